#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

// Little-endian primitives for the RIOT / RIOM binary formats.
namespace rio::binio {

inline void write_u8(std::ostream& os, std::uint8_t v) {
    os.put(static_cast<char>(v));
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
    os.write(b, 4);
}

inline void write_f32(std::ostream& os, float v) {
    write_u32(os, std::bit_cast<std::uint32_t>(v));
}

inline void write_f32_array(std::ostream& os, const float* data, std::size_t n) {
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * 4));
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            write_f32(os, data[i]);
        }
    }
}

inline std::uint8_t read_u8(std::istream& is) {
    int c = is.get();
    if (c == EOF) {
        throw std::runtime_error("unexpected end of file");
    }
    return static_cast<std::uint8_t>(c);
}

inline std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) {
        throw std::runtime_error("unexpected end of file");
    }
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
           (std::uint32_t(b[3]) << 24);
}

inline float read_f32(std::istream& is) {
    return std::bit_cast<float>(read_u32(is));
}

inline void read_f32_array(std::istream& is, float* data, std::size_t n) {
    if constexpr (std::endian::native == std::endian::little) {
        is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * 4));
        if (!is) {
            throw std::runtime_error("unexpected end of file");
        }
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            data[i] = read_f32(is);
        }
    }
}

inline void expect_magic(std::istream& is, const char (&magic)[5]) {
    char b[4];
    is.read(b, 4);
    if (!is || b[0] != magic[0] || b[1] != magic[1] || b[2] != magic[2] || b[3] != magic[3]) {
        throw std::runtime_error(std::string("bad magic, expected ") + magic);
    }
}

}  // namespace rio::binio
