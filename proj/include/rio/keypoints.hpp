#pragma once

#include "rio/core.hpp"
#include "rio/volume.hpp"

#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rio {

struct Keypoint {
    Vec3 position = Vec3::Zero();  // world frame, meters
    double response = 0.0;
};

struct HarrisConfig {
    double k = 0.04;
    int gradient_radius = 2;        // voxels, cube window half-width
    double min_response = 0.0;
    double near_surface_band = 0.5; // |tsdf| below this counts as near-surface

    void validate() const;
};

// Harris corner response on TSDF gradients: for each near-surface voxel the
// structure tensor M = Σ g·gᵀ of central-difference gradients over the window,
// response = det(M) − k·trace(M)³. Returns voxels with response >= min_response
// sorted by descending response (ties by position). `restrict_to` limits the
// candidate voxels to a mask's linear indices.
std::vector<Keypoint> harris3d(const TsdfVolume& volume, const HarrisConfig& config,
                               const std::vector<std::uint32_t>* restrict_to = nullptr,
                               int threads = 1);

// Greedy non-maxima suppression by descending response; a keypoint survives
// iff every already-kept keypoint is farther than `radius`.
std::vector<Keypoint> nms(std::span<const Keypoint> keypoints, double radius);

// Best-response voxel of volume_b within search_radius of the query position,
// or nullopt when the best response falls below min_response_ratio times the
// query's own response.
std::optional<Keypoint> refine_on(const TsdfVolume& volume_b, const Keypoint& from_a,
                                  double search_radius, const HarrisConfig& config = {},
                                  double min_response_ratio = 0.1);

enum class TripletProvenance { static_pair, dynamic_pair };

struct TrainingTriplet {
    PatchPair anchor;
    PatchPair positive;
    PatchPair negative;
    TripletProvenance provenance = TripletProvenance::static_pair;
    // world-space extraction centers, kept for self-checks (not serialized)
    Vec3 anchor_position = Vec3::Zero();
    Vec3 positive_position = Vec3::Zero();
};

struct TripletSampleConfig {
    // rank-based selection: with k = 0.04 the det − k·trace³ response is
    // non-positive everywhere (det(M) <= trace³/27), so a threshold of 0
    // would reject every voxel; sampling keeps the strongest instead
    HarrisConfig harris{0.04, 2, -std::numeric_limits<double>::infinity(), 0.5};
    double nms_radius = 0.1;
    double pairing_radius = 0.0375;  // 2 fine voxels at spec defaults
    double min_response_ratio = 0.1;
    int max_keypoints = 400;
    bool rotation_augmentation = false;  // toggled on for dynamic sampling
    bool continuous_rotation = false;    // arbitrary-angle resampling instead of cube rotations
};

struct TripletBatch {
    std::vector<TrainingTriplet> triplets;
    std::vector<std::string> diagnostics;
};

// Static pre-training pairs: frames are split into two disjoint subsets fused
// into separate volumes of the same scene; anchors come from volume A,
// positives from the refined location on volume B, negatives from a random
// surface point of another scene's volume.
TripletBatch sample_static_triplets(std::span<const DepthFrame> frames, const GridSpec& grid,
                                    std::span<const TsdfVolume> negative_pool,
                                    const PatchPairSpec& spec, const TripletSampleConfig& config,
                                    int count, std::uint64_t seed, int threads = 1);

struct DynamicInstance {
    int instance_id = 0;
    bool removed = false;
    RigidPose gt_pose;  // reference -> rescan, ignored when removed
    VoxelMask mask;     // the instance's voxels in the source volume
};

// Fine-tuning pairs around moved objects: anchors on source-object surfaces,
// positive centers at gt_pose-mapped locations refined on the rescan,
// negatives from other scenes and from removed-object sites.
TripletBatch sample_dynamic_triplets(const TsdfVolume& source, const TsdfVolume& rescan,
                                     std::span<const DynamicInstance> instances,
                                     std::span<const TsdfVolume> negative_pool,
                                     const PatchPairSpec& spec, const TripletSampleConfig& config,
                                     int count, std::uint64_t seed, int threads = 1);

// The 24 axis-aligned cube rotations; index 0 is the identity.
Mat3 cube_rotation(int index);
Patch rotate_patch_cube(const Patch& patch, int rotation_index);

// Keypoint list file: JSON array of {position, response}.
void save_keypoints_json(std::span<const Keypoint> keypoints, const std::filesystem::path& path);
std::vector<Keypoint> load_keypoints_json(const std::filesystem::path& path);

// Triplet store: RIOT patch files plus an index.json mapping triplet id to
// anchor/positive/negative paths and provenance.
void save_triplet_store(std::span<const TrainingTriplet> triplets, const std::filesystem::path& dir,
                        const PatchPairSpec& spec);
std::vector<TrainingTriplet> load_triplet_store(const std::filesystem::path& dir);

}  // namespace rio
