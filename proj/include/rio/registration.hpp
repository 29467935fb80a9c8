#pragma once

#include "rio/core.hpp"
#include "rio/descriptor.hpp"
#include "rio/keypoints.hpp"
#include "rio/volume.hpp"

#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rio {

struct Correspondence {
    Vec3 source_point = Vec3::Zero();
    Vec3 target_point = Vec3::Zero();
    double descriptor_distance = 0.0;
};

struct RansacConfig {
    int max_iterations = 4096;
    double inlier_threshold = 0.05;  // meters
    int min_inliers = 5;
    std::uint64_t seed = 0;
    int threads = 1;
};

// Exact k-nearest-neighbour search in descriptor space; rows of the feature
// matrices correspond to the point arrays. Ties break toward the lower
// target index.
std::vector<Correspondence> match_knn(const FeatureMatrix& source_features,
                                      std::span<const Vec3> source_points,
                                      const FeatureMatrix& target_features,
                                      std::span<const Vec3> target_points, int k);

// Closed-form least-squares rigid alignment (SVD with reflection guard).
// Throws DegenerateInputError for < 3 or collinear correspondences.
RigidPose kabsch(std::span<const Correspondence> correspondences);

struct RansacResult {
    RigidPose pose;
    std::vector<int> inliers;      // indices into the correspondence list
    int best_sample_inliers = 0;   // inlier count of the winning minimal model
    double mean_inlier_residual = 0.0;
};

// Deterministic per seed: iteration i draws from a stream derived from
// (seed, i), so parallel and serial runs select the same model.
RansacResult ransac_align(std::span<const Correspondence> correspondences,
                          const RansacConfig& config);

struct RelocalizeConfig {
    PatchPairSpec patch;
    // min_response of -inf keeps every near-surface voxel in play; ranking +
    // NMS + the caps below pick the keypoints, so low-curvature objects
    // (spheres, cylinder barrels) still get covered.
    HarrisConfig harris{0.04, 2, -std::numeric_limits<double>::infinity(), 0.5};
    double nms_radius = 0.1;
    int min_object_keypoints = 8;
    int max_object_keypoints = 64;
    int max_scene_keypoints = 768;
    int knn = 4;
    RansacConfig ransac;
    int threads = 1;
};

struct RelocalizeDiagnostics {
    int object_keypoints = 0;
    int scene_keypoints = 0;
    int matches = 0;
    int inlier_count = 0;
    double inlier_ratio = 0.0;
};

struct RelocalizeResult {
    RigidPose pose;  // maps source-object points into the target scene
    RelocalizeDiagnostics diagnostics;
};

// Target-scene keypoints + descriptors, computed once per scan pair and
// shared across the instances being re-localized.
struct SceneFeatures {
    std::vector<Keypoint> keypoints;
    FeatureMatrix features;
};

SceneFeatures compute_scene_features(const DescriptorModel<float>& model, const TsdfVolume& scene,
                                     const RelocalizeConfig& config);

RelocalizeResult relocalize_instance(const DescriptorModel<float>& model, const TsdfVolume& source,
                                     const VoxelMask& object_mask, const SceneFeatures& target,
                                     const RelocalizeConfig& config);

RelocalizeResult relocalize_instance(const DescriptorModel<float>& model, const TsdfVolume& source,
                                     const VoxelMask& object_mask, const TsdfVolume& target,
                                     const RelocalizeConfig& config);

// Per-instance benchmark prediction row. status "failed" marks alignment
// failures; the pose fields of failed rows are identity placeholders.
struct Prediction {
    std::string scan_pair_id;
    int instance_id = 0;
    RigidPose pose;
    bool ok = true;
};

void save_predictions(std::span<const Prediction> predictions, const std::filesystem::path& path);
std::vector<Prediction> load_predictions(const std::filesystem::path& path);

}  // namespace rio
