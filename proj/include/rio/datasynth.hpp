#pragma once

#include "rio/core.hpp"
#include "rio/evaluation.hpp"
#include "rio/volume.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rio {

enum class PrimitiveType { box, sphere, cylinder };

std::string primitive_name(PrimitiveType type);
PrimitiveType primitive_from_name(const std::string& name);

struct SceneObject {
    int id = 0;
    PrimitiveType primitive = PrimitiveType::box;
    // box: half extents (x,y,z); sphere: (radius,-,-); cylinder: (radius, half height,-)
    Vec3 size = Vec3::Zero();
    RigidPose pose;  // object-to-world
    SymmetryClass symmetry;
    std::string class_label;

    double sdf(const Vec3& world_point) const;
    double bounding_radius() const;
};

struct RoomBounds {
    Vec3 min = Vec3::Zero();
    Vec3 max = Vec3::Zero();
};

// Primitive objects in an axis-aligned room shell. The room walls are part of
// the scene surface, so the analytic SDF of empty scenes is still well-defined.
struct SyntheticScene {
    std::vector<SceneObject> objects;
    RoomBounds room;
    std::uint64_t seed = 0;

    double room_sdf(const Vec3& p) const;
    double sdf(const Vec3& p) const;                      // min over room + objects
    double sdf_excluding(const Vec3& p, int object_id) const;
    const SceneObject* find_object(int id) const;
};

struct SceneGenConfig {
    RoomBounds room = {{-1.2, -1.2, 0.0}, {1.2, 1.2, 1.8}};
    int min_objects = 4;
    int max_objects = 7;
    double min_size = 0.10;  // smallest half-extent / radius
    double max_size = 0.30;
    double box_weight = 0.45;
    double cylinder_weight = 0.35;
    double sphere_weight = 0.20;
    double min_separation = -0.01;  // pairwise surface clearance, >= -1 cm
    int max_attempts = 400;
};

SyntheticScene generate_scene(const SceneGenConfig& config, std::uint64_t seed);

enum class ChangeKind { moved, removed, added };

std::string change_kind_name(ChangeKind kind);
ChangeKind change_kind_from_name(const std::string& name);

struct InstanceChange {
    int instance_id = 0;
    ChangeKind kind = ChangeKind::moved;
    std::optional<RigidPose> gt_pose;  // present iff moved
};

struct ScenePairManifest {
    std::string scan_pair_id;
    SyntheticScene reference;
    SyntheticScene rescan;
    std::vector<InstanceChange> changes;
    std::string split = "train";
};

struct ChangeConfig {
    double move_fraction = 0.6;
    double remove_fraction = 0.15;
    double add_fraction = 0.15;
    double min_translation = 0.02;
    double max_translation = 3.0;
    double max_rotation_deg = 180.0;
    // restrict move rotations to the room's vertical axis (how furniture
    // actually moves); default keeps the unconstrained random axis
    bool vertical_rotation_only = false;
    int max_attempts = 400;
};

// Moves/removes/adds objects; the manifest records the exact per-object
// ground-truth transform of every move. Deterministic per seed.
ScenePairManifest apply_changes(const SyntheticScene& reference, const ChangeConfig& config,
                                std::uint64_t seed);

// Benchmark instance records for one scan pair: moved objects with their
// ground-truth poses, symmetry, and ambiguity transforms (identity plus the
// swaps induced by identical primitives still present in the rescan).
std::vector<InstanceRecord> build_instance_records(const ScenePairManifest& manifest);

// Pinhole depth rendering of the analytic scene (sphere tracing), the frame
// source for static-training fusion at desk scale.
struct CameraIntrinsics {
    int width = 160;
    int height = 120;
    double fx = 140.0;
    double fy = 140.0;
    double cx = 79.5;
    double cy = 59.5;
};

DepthFrame render_depth(const SyntheticScene& scene, const CameraIntrinsics& intrinsics,
                        const RigidPose& camera_pose);

// Inward-looking cameras on a ring inside the room.
std::vector<DepthFrame> render_orbit(const SyntheticScene& scene, const CameraIntrinsics& intrinsics,
                                     int frame_count);

// Per-pixel depth perturbation (uniform ±sigma plus dropout), the stand-in for
// sensor noise so two frame subsets fuse into genuinely different volumes.
void add_depth_noise(DepthFrame& frame, double sigma, double dropout_fraction, std::uint64_t seed);

// Voxels of `volume` whose nearest scene surface is the given object.
VoxelMask instance_mask(const SyntheticScene& scene, int object_id, const TsdfVolume& volume);

// Worst-case surface clearance between two objects (negative = penetration),
// estimated by sampling each surface against the other's SDF.
double pair_separation(const SceneObject& a, const SceneObject& b, int samples_per_axis = 12);

// ---- manifest / bundle I/O ("3rscan-lite/1") -------------------------------

struct LoadedDataset {
    std::vector<ScenePairManifest> pairs;
    std::vector<ScanPairRecords> records;             // one per pair, aligned
    std::map<std::string, std::string> splits;        // scene id -> train|val|test
};

// Reads scenes/<id>/manifest.json + splits.json under root. Collects every
// schema violation before throwing SchemaError.
LoadedDataset load_scan_manifest(const std::filesystem::path& root);

// Single manifest file, hidden=true omits every gt_pose and the rescan scene.
void save_scene_pair_manifest(const ScenePairManifest& manifest, const std::filesystem::path& path,
                              bool hidden = false);
ScenePairManifest load_scene_pair_manifest(const std::filesystem::path& path);

struct BundleOptions {
    double voxel_size = 0.015;
    double truncation = 0.15;
    double margin = 0.30;  // grid padding beyond the room, meters
    bool hidden = false;   // omit every gt_pose from the exported files
    int threads = 1;
};

// Writes scenes/<id>/{reference.tsdf, rescan-1.tsdf, manifest.json},
// splits.json, gt_manifest.json and a predictions template.
void export_benchmark_bundle(std::span<const ScenePairManifest> pairs,
                             const std::filesystem::path& out_dir, const BundleOptions& options);

// Grid covering the room plus margin, shared by all volumes of a bundle.
GridSpec scene_grid(const RoomBounds& room, double voxel_size, double truncation, double margin);

// Largest-remainder split assignment over shuffled scene indices; the default
// fractions reproduce the reference 385/47/46 train/val/test partition at 478
// scenes. result[i] ∈ {train, val, test}.
std::vector<std::string> assign_splits(int count, double train_frac = 385.0 / 478.0,
                                       double val_frac = 47.0 / 478.0, std::uint64_t seed = 0);

}  // namespace rio
