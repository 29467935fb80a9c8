#include "rio/volume.hpp"

#include "rio/datasynth.hpp"
#include "binio.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace rio {

namespace {

void validate_grid(GridDims dims, double voxel_size, double truncation) {
    if (dims.x <= 0 || dims.y <= 0 || dims.z <= 0) {
        throw std::invalid_argument("grid dims must be positive");
    }
    if (voxel_size <= 0.0) {
        throw std::invalid_argument("voxel_size must be positive");
    }
    if (truncation <= 0.0) {
        throw std::invalid_argument("truncation must be positive");
    }
}

}  // namespace

float TsdfVolume::sample(const Vec3& world) const {
    Vec3 c = (world - origin) / voxel_size;
    int ix = static_cast<int>(std::floor(c.x()));
    int iy = static_cast<int>(std::floor(c.y()));
    int iz = static_cast<int>(std::floor(c.z()));
    double fx = c.x() - ix, fy = c.y() - iy, fz = c.z() - iz;

    auto corner = [&](int dx, int dy, int dz) -> double {
        int x = ix + dx, y = iy + dy, z = iz + dz;
        return in_bounds(x, y, z) ? values[index(x, y, z)] : 1.0;
    };

    double c00 = corner(0, 0, 0) * (1 - fx) + corner(1, 0, 0) * fx;
    double c10 = corner(0, 1, 0) * (1 - fx) + corner(1, 1, 0) * fx;
    double c01 = corner(0, 0, 1) * (1 - fx) + corner(1, 0, 1) * fx;
    double c11 = corner(0, 1, 1) * (1 - fx) + corner(1, 1, 1) * fx;
    double c0 = c00 * (1 - fy) + c10 * fy;
    double c1 = c01 * (1 - fy) + c11 * fy;
    return static_cast<float>(c0 * (1 - fz) + c1 * fz);
}

void PatchPairSpec::validate() const {
    if (!(coarse_extent > fine_extent && fine_extent > 0.0)) {
        throw std::invalid_argument("patch extents must satisfy coarse > fine > 0");
    }
    if (resolution < 8 || resolution % 2 != 0) {
        throw std::invalid_argument("patch resolution must be even and >= 8");
    }
}

TsdfVolume fuse_depth(std::span<const DepthFrame> frames, GridDims dims, double voxel_size,
                      const Vec3& origin, double truncation, int threads) {
    if (frames.empty()) {
        throw std::invalid_argument("fuse_depth needs at least one frame");
    }
    validate_grid(dims, voxel_size, truncation);
    if (truncation < 2.0 * voxel_size) {
        throw std::invalid_argument("truncation must be at least two voxels");
    }

    std::vector<RigidPose> world_to_cam(frames.size());
    for (std::size_t i = 0; i < frames.size(); ++i) {
        world_to_cam[i] = frames[i].camera_pose.inverse();
    }

    TsdfVolume out;
    out.dims = dims;
    out.voxel_size = voxel_size;
    out.origin = origin;
    out.truncation = truncation;
    out.values.assign(dims.count(), 1.0f);
    out.weights.assign(dims.count(), 0.0f);

    auto integrate_range = [&](std::size_t begin, std::size_t end) {
        for (std::size_t vi = begin; vi < end; ++vi) {
            int ix = static_cast<int>(vi % dims.x);
            int iy = static_cast<int>((vi / dims.x) % dims.y);
            int iz = static_cast<int>(vi / (std::int64_t(dims.x) * dims.y));
            Vec3 p = out.voxel_center(ix, iy, iz);

            double sum = 0.0;
            double weight = 0.0;
            for (std::size_t f = 0; f < frames.size(); ++f) {
                const DepthFrame& frame = frames[f];
                Vec3 cam = world_to_cam[f].apply(p);
                if (cam.z() <= 0.0) {
                    continue;
                }
                int u = static_cast<int>(std::lround(frame.fx * cam.x() / cam.z() + frame.cx));
                int v = static_cast<int>(std::lround(frame.fy * cam.y() / cam.z() + frame.cy));
                if (u < 0 || v < 0 || u >= frame.width || v >= frame.height) {
                    continue;
                }
                double d = frame.depth[std::size_t(v) * frame.width + u];
                if (d <= 0.0) {
                    continue;
                }
                double sdf = d - cam.z();
                if (sdf < -truncation) {
                    continue;  // occluded beyond the band
                }
                sum += std::min(1.0, sdf / truncation);
                weight += 1.0;
            }
            if (weight > 0.0) {
                out.values[vi] = static_cast<float>(sum / weight);
                out.weights[vi] = static_cast<float>(weight);
            }
        }
    };
    parallel_chunks(static_cast<std::size_t>(dims.count()), threads, integrate_range);
    return out;
}

TsdfVolume analytic_tsdf(const SyntheticScene& scene, GridDims dims, double voxel_size,
                         const Vec3& origin, double truncation, int threads) {
    validate_grid(dims, voxel_size, truncation);
    bool room_valid = (scene.room.max - scene.room.min).minCoeff() > 0.0;
    if (scene.objects.empty() && !room_valid) {
        throw std::invalid_argument("analytic_tsdf needs a non-empty scene");
    }

    TsdfVolume out;
    out.dims = dims;
    out.voxel_size = voxel_size;
    out.origin = origin;
    out.truncation = truncation;
    out.values.resize(dims.count());

    parallel_chunks(static_cast<std::size_t>(dims.count()), threads, [&](std::size_t begin, std::size_t end) {
        for (std::size_t vi = begin; vi < end; ++vi) {
            int ix = static_cast<int>(vi % dims.x);
            int iy = static_cast<int>((vi / dims.x) % dims.y);
            int iz = static_cast<int>(vi / (std::int64_t(dims.x) * dims.y));
            double d = scene.sdf(out.voxel_center(ix, iy, iz));
            out.values[vi] = static_cast<float>(std::clamp(d, -truncation, truncation) / truncation);
        }
    });
    return out;
}

Patch extract_patch(const TsdfVolume& volume, const Vec3& center, double extent, int resolution,
                    const Mat3& orientation) {
    if (resolution < 2) {
        throw std::invalid_argument("patch resolution must be >= 2");
    }
    if (extent <= 0.0) {
        throw std::invalid_argument("patch extent must be positive");
    }
    if (!center.allFinite()) {
        throw std::invalid_argument("patch center must be finite");
    }

    Patch patch;
    patch.resolution = resolution;
    patch.values.resize(std::size_t(resolution) * resolution * resolution);

    const double spacing = extent / resolution;
    const double half = (resolution - 1) / 2.0;
    std::size_t out = 0;
    for (int k = 0; k < resolution; ++k) {
        for (int j = 0; j < resolution; ++j) {
            for (int i = 0; i < resolution; ++i) {
                Vec3 offset((i - half) * spacing, (j - half) * spacing, (k - half) * spacing);
                patch.values[out++] = volume.sample(center + orientation * offset);
            }
        }
    }
    return patch;
}

Patch invert_tsdf(Patch patch) {
    for (float& v : patch.values) {
        v = std::max(0.0f, 1.0f - std::abs(v));
    }
    return patch;
}

PatchPair extract_two_scale(const TsdfVolume& volume, const Vec3& center, const PatchPairSpec& spec,
                            const Mat3& orientation) {
    spec.validate();
    PatchPair pair;
    pair.fine = invert_tsdf(extract_patch(volume, center, spec.fine_extent, spec.resolution, orientation));
    pair.coarse = invert_tsdf(extract_patch(volume, center, spec.coarse_extent, spec.resolution, orientation));
    return pair;
}

void save_tsdf(const TsdfVolume& volume, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw std::runtime_error("cannot open for writing: " + path.string());
    }
    os.write("RIOT", 4);
    binio::write_u32(os, 1);
    binio::write_u32(os, static_cast<std::uint32_t>(volume.dims.x));
    binio::write_u32(os, static_cast<std::uint32_t>(volume.dims.y));
    binio::write_u32(os, static_cast<std::uint32_t>(volume.dims.z));
    binio::write_f32(os, static_cast<float>(volume.voxel_size));
    binio::write_f32(os, static_cast<float>(volume.origin.x()));
    binio::write_f32(os, static_cast<float>(volume.origin.y()));
    binio::write_f32(os, static_cast<float>(volume.origin.z()));
    binio::write_f32(os, static_cast<float>(volume.truncation));
    binio::write_u8(os, volume.has_weights() ? 1 : 0);
    binio::write_f32_array(os, volume.values.data(), volume.values.size());
    if (volume.has_weights()) {
        binio::write_f32_array(os, volume.weights.data(), volume.weights.size());
    }
    if (!os) {
        throw std::runtime_error("write failed: " + path.string());
    }
}

TsdfVolume load_tsdf(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw std::runtime_error("cannot open: " + path.string());
    }
    binio::expect_magic(is, "RIOT");
    std::uint32_t version = binio::read_u32(is);
    if (version != 1) {
        throw std::runtime_error("unsupported RIOT version " + std::to_string(version));
    }
    TsdfVolume v;
    v.dims.x = static_cast<int>(binio::read_u32(is));
    v.dims.y = static_cast<int>(binio::read_u32(is));
    v.dims.z = static_cast<int>(binio::read_u32(is));
    v.voxel_size = binio::read_f32(is);
    v.origin.x() = binio::read_f32(is);
    v.origin.y() = binio::read_f32(is);
    v.origin.z() = binio::read_f32(is);
    v.truncation = binio::read_f32(is);
    bool has_weights = binio::read_u8(is) != 0;
    if (v.dims.x <= 0 || v.dims.y <= 0 || v.dims.z <= 0) {
        throw std::runtime_error("invalid dims in " + path.string());
    }
    v.values.resize(v.dims.count());
    binio::read_f32_array(is, v.values.data(), v.values.size());
    if (has_weights) {
        v.weights.resize(v.dims.count());
        binio::read_f32_array(is, v.weights.data(), v.weights.size());
    }
    return v;
}

}  // namespace rio
