#pragma once

#include "rio/core.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace rio {

struct SyntheticScene;

struct GridDims {
    int x = 0, y = 0, z = 0;
    std::int64_t count() const { return std::int64_t(x) * y * z; }
    bool operator==(const GridDims&) const = default;
};

// Dense truncated signed distance grid. Values are normalized by the
// truncation band to [-1, +1]; unobserved voxels hold +1. `origin` is the
// world position of the center of voxel (0,0,0); storage is x-fastest.
struct TsdfVolume {
    GridDims dims;
    double voxel_size = 0.0;
    Vec3 origin = Vec3::Zero();
    double truncation = 0.0;
    std::vector<float> values;
    std::vector<float> weights;  // empty unless fused from depth

    bool has_weights() const { return !weights.empty(); }

    std::int64_t index(int ix, int iy, int iz) const {
        return (std::int64_t(iz) * dims.y + iy) * dims.x + ix;
    }

    bool in_bounds(int ix, int iy, int iz) const {
        return ix >= 0 && iy >= 0 && iz >= 0 && ix < dims.x && iy < dims.y && iz < dims.z;
    }

    Vec3 voxel_center(int ix, int iy, int iz) const {
        return origin + Vec3(ix, iy, iz) * voxel_size;
    }

    // Trilinear sample at a world point; +1 outside the sampled lattice.
    float sample(const Vec3& world) const;
};

// The two patch scales consumed by the descriptor. Defaults follow the
// 32-voxel patches of extent 0.6 m and 1.2 m (voxel sizes 1.875 cm / 3.75 cm).
struct PatchPairSpec {
    double fine_extent = 0.6;
    double coarse_extent = 1.2;
    int resolution = 32;

    double fine_voxel_size() const { return fine_extent / resolution; }
    double coarse_voxel_size() const { return coarse_extent / resolution; }
    void validate() const;
};

struct DepthFrame {
    int width = 0, height = 0;
    std::vector<float> depth;  // row-major meters, 0 = invalid
    double fx = 0, fy = 0, cx = 0, cy = 0;
    RigidPose camera_pose;  // camera-to-world
};

struct Patch {
    int resolution = 0;
    std::vector<float> values;  // x-fastest
};

struct PatchPair {
    Patch fine;
    Patch coarse;
};

// Subset of a volume's voxels (linear indices), e.g. one object's segment.
struct VoxelMask {
    GridDims dims;
    std::vector<std::uint32_t> voxels;
};

struct GridSpec {
    GridDims dims;
    Vec3 origin = Vec3::Zero();
    double voxel_size = 0.015;
    double truncation = 0.15;
};

TsdfVolume fuse_depth(std::span<const DepthFrame> frames, GridDims dims, double voxel_size,
                      const Vec3& origin, double truncation, int threads = 1);

TsdfVolume analytic_tsdf(const SyntheticScene& scene, GridDims dims, double voxel_size,
                         const Vec3& origin, double truncation, int threads = 1);

// Resamples a resolution³ grid of side `extent` centered at `center`.
// Sample i sits at center + (i - (resolution-1)/2) * extent/resolution per
// axis; `orientation` rotates the sampling lattice about the center.
Patch extract_patch(const TsdfVolume& volume, const Vec3& center, double extent, int resolution,
                    const Mat3& orientation = Mat3::Identity());

// v -> 1 - |v|, mapping the surface to 1 and far/unseen space to 0.
Patch invert_tsdf(Patch patch);

// Fine and coarse patches around one center, both inverted (the fixed first
// transform of the descriptor network).
PatchPair extract_two_scale(const TsdfVolume& volume, const Vec3& center,
                            const PatchPairSpec& spec, const Mat3& orientation = Mat3::Identity());

// "RIOT" binary volume format, version 1, little-endian. Round-trips bit-exactly.
void save_tsdf(const TsdfVolume& volume, const std::filesystem::path& path);
TsdfVolume load_tsdf(const std::filesystem::path& path);

}  // namespace rio
