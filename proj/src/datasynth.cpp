#include "rio/datasynth.hpp"

#include "json_helpers.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

namespace rio {

using jsonio::json;

namespace {

double box_sdf(const Vec3& p, const Vec3& half) {
    Vec3 q = p.cwiseAbs() - half;
    Vec3 outside = q.cwiseMax(0.0);
    double inside = std::min(q.maxCoeff(), 0.0);
    return outside.norm() + inside;
}

double cylinder_sdf(const Vec3& p, double radius, double half_height) {
    double dr = std::hypot(p.x(), p.y()) - radius;
    double dz = std::abs(p.z()) - half_height;
    double outside = std::hypot(std::max(dr, 0.0), std::max(dz, 0.0));
    double inside = std::min(std::max(dr, dz), 0.0);
    return outside + inside;
}

}  // namespace

std::string primitive_name(PrimitiveType type) {
    switch (type) {
        case PrimitiveType::box: return "box";
        case PrimitiveType::sphere: return "sphere";
        case PrimitiveType::cylinder: return "cylinder";
    }
    return "box";
}

PrimitiveType primitive_from_name(const std::string& name) {
    if (name == "box") return PrimitiveType::box;
    if (name == "sphere") return PrimitiveType::sphere;
    if (name == "cylinder") return PrimitiveType::cylinder;
    throw std::invalid_argument("unknown primitive: " + name);
}

std::string change_kind_name(ChangeKind kind) {
    switch (kind) {
        case ChangeKind::moved: return "moved";
        case ChangeKind::removed: return "removed";
        case ChangeKind::added: return "added";
    }
    return "moved";
}

ChangeKind change_kind_from_name(const std::string& name) {
    if (name == "moved") return ChangeKind::moved;
    if (name == "removed") return ChangeKind::removed;
    if (name == "added") return ChangeKind::added;
    throw std::invalid_argument("unknown change kind: " + name);
}

double SceneObject::sdf(const Vec3& world_point) const {
    Vec3 local = pose.rotation.transpose() * (world_point - pose.translation);
    switch (primitive) {
        case PrimitiveType::box: return box_sdf(local, size);
        case PrimitiveType::sphere: return local.norm() - size.x();
        case PrimitiveType::cylinder: return cylinder_sdf(local, size.x(), size.y());
    }
    return 0.0;
}

double SceneObject::bounding_radius() const {
    switch (primitive) {
        case PrimitiveType::box: return size.norm();
        case PrimitiveType::sphere: return size.x();
        case PrimitiveType::cylinder: return std::hypot(size.x(), size.y());
    }
    return 0.0;
}

double SyntheticScene::room_sdf(const Vec3& p) const {
    Vec3 center = 0.5 * (room.min + room.max);
    Vec3 half = 0.5 * (room.max - room.min);
    // the shell seen from inside: positive distance to the nearest wall
    return -box_sdf(p - center, half);
}

double SyntheticScene::sdf(const Vec3& p) const {
    double best = (room.max - room.min).minCoeff() > 0.0
                      ? room_sdf(p)
                      : std::numeric_limits<double>::infinity();
    for (const auto& obj : objects) {
        best = std::min(best, obj.sdf(p));
    }
    return best;
}

double SyntheticScene::sdf_excluding(const Vec3& p, int object_id) const {
    double best = (room.max - room.min).minCoeff() > 0.0
                      ? room_sdf(p)
                      : std::numeric_limits<double>::infinity();
    for (const auto& obj : objects) {
        if (obj.id != object_id) {
            best = std::min(best, obj.sdf(p));
        }
    }
    return best;
}

const SceneObject* SyntheticScene::find_object(int id) const {
    for (const auto& obj : objects) {
        if (obj.id == id) {
            return &obj;
        }
    }
    return nullptr;
}

// ---- surface sampling / separation ------------------------------------------

namespace {

std::vector<Vec3> surface_samples(const SceneObject& obj, int n) {
    std::vector<Vec3> local;
    const double pi = std::numbers::pi;
    switch (obj.primitive) {
        case PrimitiveType::box: {
            const Vec3& h = obj.size;
            for (int face = 0; face < 6; ++face) {
                int axis = face / 2;
                double sign = face % 2 == 0 ? 1.0 : -1.0;
                int a = (axis + 1) % 3, b = (axis + 2) % 3;
                for (int i = 0; i < n; ++i) {
                    for (int j = 0; j < n; ++j) {
                        Vec3 p;
                        p[axis] = sign * h[axis];
                        p[a] = h[a] * (2.0 * (i + 0.5) / n - 1.0);
                        p[b] = h[b] * (2.0 * (j + 0.5) / n - 1.0);
                        local.push_back(p);
                    }
                }
            }
            break;
        }
        case PrimitiveType::sphere: {
            double r = obj.size.x();
            for (int i = 0; i < n; ++i) {
                double phi = pi * (i + 0.5) / n;
                for (int j = 0; j < 2 * n; ++j) {
                    double theta = 2.0 * pi * j / (2 * n);
                    local.emplace_back(r * std::sin(phi) * std::cos(theta),
                                       r * std::sin(phi) * std::sin(theta), r * std::cos(phi));
                }
            }
            break;
        }
        case PrimitiveType::cylinder: {
            double r = obj.size.x(), hh = obj.size.y();
            for (int i = 0; i < 2 * n; ++i) {
                double theta = 2.0 * pi * i / (2 * n);
                for (int j = 0; j < n; ++j) {
                    double z = hh * (2.0 * (j + 0.5) / n - 1.0);
                    local.emplace_back(r * std::cos(theta), r * std::sin(theta), z);
                }
                for (double zc : {hh, -hh}) {
                    for (int j = 1; j <= n / 2; ++j) {
                        double rr = r * j / (n / 2);
                        local.emplace_back(rr * std::cos(theta), rr * std::sin(theta), zc);
                    }
                }
            }
            break;
        }
    }
    for (auto& p : local) {
        p = obj.pose.apply(p);
    }
    return local;
}

bool object_inside_room(const SceneObject& obj, const RoomBounds& room, int samples = 8) {
    for (const Vec3& p : surface_samples(obj, samples)) {
        if ((p - room.min).minCoeff() < 0.0 || (room.max - p).minCoeff() < 0.0) {
            return false;
        }
    }
    return true;
}

}  // namespace

double pair_separation(const SceneObject& a, const SceneObject& b, int samples_per_axis) {
    double centers = (a.pose.translation - b.pose.translation).norm();
    double reach = a.bounding_radius() + b.bounding_radius();
    if (centers > reach + 0.05) {
        return centers - reach;  // conservative clearance, no overlap possible
    }
    double best = std::numeric_limits<double>::infinity();
    for (const Vec3& p : surface_samples(a, samples_per_axis)) {
        best = std::min(best, b.sdf(p));
    }
    for (const Vec3& p : surface_samples(b, samples_per_axis)) {
        best = std::min(best, a.sdf(p));
    }
    return best;
}

// ---- generation --------------------------------------------------------------

namespace {

const char* const kBoxLabels[] = {"box", "table", "cabinet", "door"};
const char* const kSphereLabels[] = {"ball", "cushion"};
const char* const kCylinderLabels[] = {"stool", "bin", "column"};

SceneObject sample_object(Rng& rng, const SceneGenConfig& config, int id) {
    SceneObject obj;
    obj.id = id;
    double w = rng.uniform() * (config.box_weight + config.cylinder_weight + config.sphere_weight);
    if (w < config.box_weight) {
        obj.primitive = PrimitiveType::box;
    } else if (w < config.box_weight + config.cylinder_weight) {
        obj.primitive = PrimitiveType::cylinder;
    } else {
        obj.primitive = PrimitiveType::sphere;
    }

    auto dim = [&] { return rng.uniform(config.min_size, config.max_size); };
    switch (obj.primitive) {
        case PrimitiveType::box: {
            obj.size = Vec3(dim(), dim(), dim());
            bool square = rng.uniform() < 0.35;  // square footprint -> C4
            if (square) {
                obj.size.y() = obj.size.x();
            }
            obj.symmetry.type = square ? SymmetryClass::Type::c4 : SymmetryClass::Type::c2;
            obj.symmetry.axis = Vec3::UnitZ();
            obj.class_label = kBoxLabels[rng.below(std::size(kBoxLabels))];
            break;
        }
        case PrimitiveType::sphere: {
            obj.size = Vec3(dim(), 0.0, 0.0);
            obj.symmetry.type = SymmetryClass::Type::cinf;
            obj.symmetry.axis = Vec3::UnitZ();
            obj.class_label = kSphereLabels[rng.below(std::size(kSphereLabels))];
            break;
        }
        case PrimitiveType::cylinder: {
            obj.size = Vec3(dim(), dim(), 0.0);
            obj.symmetry.type = SymmetryClass::Type::cinf;
            obj.symmetry.axis = Vec3::UnitZ();
            obj.class_label = kCylinderLabels[rng.below(std::size(kCylinderLabels))];
            break;
        }
    }
    return obj;
}

double floor_offset(const SceneObject& obj) {
    switch (obj.primitive) {
        case PrimitiveType::box: return obj.size.z();
        case PrimitiveType::sphere: return obj.size.x();
        case PrimitiveType::cylinder: return obj.size.y();
    }
    return 0.0;
}

bool place_object(Rng& rng, const SceneGenConfig& config, SceneObject& obj,
                  const std::vector<SceneObject>& placed) {
    double br = obj.bounding_radius();
    double margin = br + 0.02;
    Vec3 lo = config.room.min + Vec3(margin, margin, 0.0);
    Vec3 hi = config.room.max - Vec3(margin, margin, 0.0);
    if ((hi - lo).minCoeff() <= 0.0) {
        return false;  // object too large for the room
    }
    for (int attempt = 0; attempt < config.max_attempts; ++attempt) {
        obj.pose.rotation = RigidPose::rotation_about(Vec3::UnitZ(), rng.uniform(0.0, 2.0 * std::numbers::pi)).rotation;
        obj.pose.translation =
            Vec3(rng.uniform(lo.x(), hi.x()), rng.uniform(lo.y(), hi.y()),
                 config.room.min.z() + floor_offset(obj));
        bool ok = true;
        for (const auto& other : placed) {
            if (pair_separation(obj, other) < config.min_separation) {
                ok = false;
                break;
            }
        }
        if (ok) {
            return true;
        }
    }
    return false;
}

}  // namespace

SyntheticScene generate_scene(const SceneGenConfig& config, std::uint64_t seed) {
    Rng rng(Rng::derive(seed, 0x5ce9e));
    SyntheticScene scene;
    scene.room = config.room;
    scene.seed = seed;
    int count = config.min_objects +
                static_cast<int>(rng.below(std::uint64_t(config.max_objects - config.min_objects + 1)));
    for (int i = 0; i < count; ++i) {
        SceneObject obj = sample_object(rng, config, i + 1);
        if (!place_object(rng, config, obj, scene.objects)) {
            std::ostringstream msg;
            msg << "failed to place object " << obj.id << " (" << primitive_name(obj.primitive)
                << ", bounding radius " << obj.bounding_radius() << ") after " << config.max_attempts
                << " attempts in a room of "
                << (config.room.max - config.room.min).transpose() << " m";
            throw GenerationError(msg.str());
        }
        scene.objects.push_back(obj);
    }
    return scene;
}

ScenePairManifest apply_changes(const SyntheticScene& reference, const ChangeConfig& config,
                                std::uint64_t seed) {
    for (double f : {config.move_fraction, config.remove_fraction, config.add_fraction}) {
        if (f < 0.0 || f > 1.0) {
            throw std::invalid_argument("change fractions must lie in [0, 1]");
        }
    }

    Rng rng(Rng::derive(seed, 0xc4a27));
    ScenePairManifest manifest;
    manifest.reference = reference;
    manifest.rescan.room = reference.room;
    manifest.rescan.seed = seed;

    // decide each object's fate up front so the draw order is stable
    std::vector<ChangeKind> fate(reference.objects.size(), ChangeKind::added);  // added = placeholder for "unchanged"
    std::vector<bool> unchanged(reference.objects.size(), false);
    for (std::size_t i = 0; i < reference.objects.size(); ++i) {
        double u = rng.uniform();
        if (u < config.move_fraction) {
            fate[i] = ChangeKind::moved;
        } else if (u < config.move_fraction + config.remove_fraction) {
            fate[i] = ChangeKind::removed;
        } else {
            unchanged[i] = true;
        }
    }

    for (std::size_t i = 0; i < reference.objects.size(); ++i) {
        if (fate[i] != ChangeKind::removed) {
            manifest.rescan.objects.push_back(reference.objects[i]);
        }
    }

    auto rescan_separation_ok = [&](const SceneObject& candidate) {
        for (const auto& other : manifest.rescan.objects) {
            if (other.id != candidate.id && pair_separation(candidate, other) < -0.01) {
                return false;
            }
        }
        return object_inside_room(candidate, manifest.rescan.room);
    };

    for (std::size_t i = 0; i < reference.objects.size(); ++i) {
        const SceneObject& ref_obj = reference.objects[i];
        if (unchanged[i]) {
            continue;
        }
        if (fate[i] == ChangeKind::removed) {
            manifest.changes.push_back({ref_obj.id, ChangeKind::removed, std::nullopt});
            continue;
        }

        // moved: rotate about the object's own center, then translate
        SceneObject* live = nullptr;
        for (auto& obj : manifest.rescan.objects) {
            if (obj.id == ref_obj.id) {
                live = &obj;
            }
        }
        bool placed = false;
        for (int attempt = 0; attempt < config.max_attempts && !placed; ++attempt) {
            double angle = rng.uniform(0.0, config.max_rotation_deg * std::numbers::pi / 180.0);
            Vec3 axis = config.vertical_rotation_only ? Vec3::UnitZ() : rng.unit_vector();
            if (config.vertical_rotation_only) {
                angle = rng.uniform(0.0, 2.0 * std::numbers::pi);  // full spin about up
            }
            double dist = rng.uniform(config.min_translation, config.max_translation);
            Vec3 direction = rng.unit_vector();

            Mat3 r = Eigen::AngleAxisd(angle, axis).toRotationMatrix();
            const Vec3& c = ref_obj.pose.translation;
            RigidPose gt{r, c - r * c + dist * direction};

            SceneObject candidate = ref_obj;
            candidate.pose = gt.compose(ref_obj.pose);
            SceneObject saved = *live;
            *live = candidate;
            if (rescan_separation_ok(candidate)) {
                manifest.changes.push_back({ref_obj.id, ChangeKind::moved, gt});
                placed = true;
            } else {
                *live = saved;
            }
        }
        if (!placed) {
            std::ostringstream msg;
            msg << "no valid move found for instance " << ref_obj.id << " after "
                << config.max_attempts << " attempts";
            throw GenerationError(msg.str());
        }
    }

    int added_count = static_cast<int>(std::lround(config.add_fraction *
                                                   static_cast<double>(reference.objects.size())));
    int next_id = 0;
    for (const auto& obj : reference.objects) {
        next_id = std::max(next_id, obj.id);
    }
    SceneGenConfig addgen;
    addgen.room = reference.room;
    for (int a = 0; a < added_count; ++a) {
        SceneObject obj = sample_object(rng, addgen, ++next_id);
        if (place_object(rng, addgen, obj, manifest.rescan.objects)) {
            manifest.rescan.objects.push_back(obj);
            manifest.changes.push_back({obj.id, ChangeKind::added, std::nullopt});
        }
        // a full room simply gets fewer additions
    }
    return manifest;
}

std::vector<InstanceRecord> build_instance_records(const ScenePairManifest& manifest) {
    auto gt_of = [&](int id) -> std::optional<RigidPose> {
        for (const auto& ch : manifest.changes) {
            if (ch.instance_id == id) {
                if (ch.kind == ChangeKind::moved) {
                    return ch.gt_pose;
                }
                return std::nullopt;
            }
        }
        return RigidPose{};  // unchanged: identity
    };
    auto in_rescan = [&](int id) { return manifest.rescan.find_object(id) != nullptr; };

    std::vector<InstanceRecord> records;
    for (const auto& change : manifest.changes) {
        if (change.kind != ChangeKind::moved || !change.gt_pose) {
            continue;
        }
        const SceneObject* obj = manifest.reference.find_object(change.instance_id);
        if (!obj) {
            continue;
        }
        InstanceRecord rec;
        rec.instance_id = obj->id;
        rec.class_label = obj->class_label;
        rec.gt_pose = *change.gt_pose;
        rec.symmetry = obj->symmetry;
        rec.ambiguity_poses.push_back(RigidPose{});

        // identical primitives still present in the rescan are interchangeable
        RigidPose gt_inv = rec.gt_pose.inverse();
        for (const auto& twin : manifest.reference.objects) {
            if (twin.id == obj->id || twin.primitive != obj->primitive ||
                (twin.size - obj->size).norm() > 1e-9 || !in_rescan(twin.id)) {
                continue;
            }
            std::optional<RigidPose> twin_gt = gt_of(twin.id);
            if (!twin_gt) {
                continue;
            }
            RigidPose onto_twin = twin.pose.compose(obj->pose.inverse());
            rec.ambiguity_poses.push_back(gt_inv.compose(twin_gt->compose(onto_twin)));
        }
        records.push_back(rec);
    }
    return records;
}

// ---- depth rendering ----------------------------------------------------------

DepthFrame render_depth(const SyntheticScene& scene, const CameraIntrinsics& intrinsics,
                        const RigidPose& camera_pose) {
    DepthFrame frame;
    frame.width = intrinsics.width;
    frame.height = intrinsics.height;
    frame.fx = intrinsics.fx;
    frame.fy = intrinsics.fy;
    frame.cx = intrinsics.cx;
    frame.cy = intrinsics.cy;
    frame.camera_pose = camera_pose;
    frame.depth.assign(std::size_t(frame.width) * frame.height, 0.0f);

    const double max_range = 1.5 * (scene.room.max - scene.room.min).norm() + 1.0;
    const double eps = 1e-4;
    const Vec3 origin = camera_pose.translation;

    for (int v = 0; v < frame.height; ++v) {
        for (int u = 0; u < frame.width; ++u) {
            Vec3 dir_cam((u - intrinsics.cx) / intrinsics.fx, (v - intrinsics.cy) / intrinsics.fy, 1.0);
            double dz = 1.0 / dir_cam.norm();
            Vec3 dir = camera_pose.rotation * dir_cam.normalized();

            double t = 0.0;
            for (int step = 0; step < 512; ++step) {
                double d = scene.sdf(origin + t * dir);
                if (d < eps) {
                    frame.depth[std::size_t(v) * frame.width + u] = static_cast<float>(t * dz);
                    break;
                }
                t += std::max(d, eps);
                if (t > max_range) {
                    break;
                }
            }
        }
    }
    return frame;
}

std::vector<DepthFrame> render_orbit(const SyntheticScene& scene, const CameraIntrinsics& intrinsics,
                                     int frame_count) {
    Vec3 center = 0.5 * (scene.room.min + scene.room.max);
    Vec3 extent = scene.room.max - scene.room.min;
    double ring = 0.38 * std::min(extent.x(), extent.y());
    double height = scene.room.min.z() + 0.62 * extent.z();
    Vec3 target(center.x(), center.y(), scene.room.min.z() + 0.25 * extent.z());

    std::vector<DepthFrame> frames;
    frames.reserve(frame_count);
    for (int i = 0; i < frame_count; ++i) {
        double a = 2.0 * std::numbers::pi * i / frame_count;
        Vec3 pos(center.x() + ring * std::cos(a), center.y() + ring * std::sin(a), height);
        Vec3 fwd = (target - pos).normalized();
        Vec3 right = fwd.cross(Vec3::UnitZ()).normalized();
        Vec3 down = fwd.cross(right);
        RigidPose cam;
        cam.rotation.col(0) = right;
        cam.rotation.col(1) = down;
        cam.rotation.col(2) = fwd;
        cam.translation = pos;
        frames.push_back(render_depth(scene, intrinsics, cam));
    }
    return frames;
}

void add_depth_noise(DepthFrame& frame, double sigma, double dropout_fraction, std::uint64_t seed) {
    Rng rng(Rng::derive(seed, 0xde91e));
    for (float& d : frame.depth) {
        if (d <= 0.0f) {
            continue;
        }
        if (dropout_fraction > 0.0 && rng.uniform() < dropout_fraction) {
            d = 0.0f;
            continue;
        }
        d = static_cast<float>(std::max(0.0, d + rng.uniform(-sigma, sigma)));
    }
}

VoxelMask instance_mask(const SyntheticScene& scene, int object_id, const TsdfVolume& volume) {
    const SceneObject* obj = scene.find_object(object_id);
    VoxelMask mask;
    mask.dims = volume.dims;
    if (!obj) {
        return mask;
    }
    double band = 0.5 * volume.truncation;
    for (int iz = 0; iz < volume.dims.z; ++iz) {
        for (int iy = 0; iy < volume.dims.y; ++iy) {
            for (int ix = 0; ix < volume.dims.x; ++ix) {
                Vec3 p = volume.voxel_center(ix, iy, iz);
                double d = obj->sdf(p);
                if (std::abs(d) >= band) {
                    continue;
                }
                if (d <= scene.sdf_excluding(p, object_id) + 1e-9) {
                    mask.voxels.push_back(static_cast<std::uint32_t>(volume.index(ix, iy, iz)));
                }
            }
        }
    }
    return mask;
}

std::vector<std::string> assign_splits(int count, double train_frac, double val_frac,
                                       std::uint64_t seed) {
    if (count < 0 || train_frac < 0.0 || val_frac < 0.0 || train_frac + val_frac > 1.0) {
        throw std::invalid_argument("split fractions must be non-negative and sum to at most 1");
    }
    const double fracs[3] = {train_frac, val_frac, 1.0 - train_frac - val_frac};
    int counts[3];
    double remainders[3];
    int assigned = 0;
    for (int s = 0; s < 3; ++s) {
        double exact = fracs[s] * count;
        counts[s] = static_cast<int>(std::floor(exact));
        remainders[s] = exact - counts[s];
        assigned += counts[s];
    }
    while (assigned < count) {  // largest remainder first, ties to the earlier split
        int pick = 0;
        for (int s = 1; s < 3; ++s) {
            if (remainders[s] > remainders[pick]) {
                pick = s;
            }
        }
        ++counts[pick];
        remainders[pick] = -1.0;
        ++assigned;
    }

    std::vector<int> order(count);
    for (int i = 0; i < count; ++i) {
        order[i] = i;
    }
    Rng rng(Rng::derive(seed, 0x5b711));
    rng.shuffle(order);

    const char* names[3] = {"train", "val", "test"};
    std::vector<std::string> result(count);
    int cursor = 0;
    for (int s = 0; s < 3; ++s) {
        for (int i = 0; i < counts[s]; ++i) {
            result[order[cursor++]] = names[s];
        }
    }
    return result;
}

GridSpec scene_grid(const RoomBounds& room, double voxel_size, double truncation, double margin) {
    GridSpec grid;
    grid.voxel_size = voxel_size;
    grid.truncation = truncation;
    grid.origin = room.min - Vec3::Constant(margin);
    Vec3 span = room.max - room.min + Vec3::Constant(2.0 * margin);
    grid.dims = {int(std::ceil(span.x() / voxel_size)) + 1, int(std::ceil(span.y() / voxel_size)) + 1,
                 int(std::ceil(span.z() / voxel_size)) + 1};
    return grid;
}

// ---- manifest and bundle I/O ---------------------------------------------------

namespace {

json symmetry_to_json(const SymmetryClass& s) {
    return json{{"type", symmetry_type_name(s.type)}, {"axis", jsonio::vec3_to_json(s.axis)}};
}

json object_to_json(const SceneObject& obj) {
    return json{{"id", obj.id},
                {"primitive", primitive_name(obj.primitive)},
                {"size", jsonio::vec3_to_json(obj.size)},
                {"pose", jsonio::pose_to_json(obj.pose)},
                {"symmetry", symmetry_to_json(obj.symmetry)},
                {"class_label", obj.class_label}};
}

json scene_to_json(const SyntheticScene& scene) {
    json objs = json::array();
    for (const auto& o : scene.objects) {
        objs.push_back(object_to_json(o));
    }
    return json{{"objects", objs},
                {"room", {{"min", jsonio::vec3_to_json(scene.room.min)},
                          {"max", jsonio::vec3_to_json(scene.room.max)}}},
                {"seed", scene.seed}};
}

// Parse helpers collect violations instead of throwing so a single load pass
// can report every problem in the file.
struct Violations {
    std::string context;
    std::vector<std::string>* sink = nullptr;
    void add(const std::string& message) const { sink->push_back(context + ": " + message); }
};

SymmetryClass symmetry_from_json(const json& j, const Violations& v) {
    SymmetryClass s;
    try {
        s.type = symmetry_type_from_name(j.at("type").get<std::string>());
    } catch (const std::exception& e) {
        v.add(std::string("symmetry: ") + e.what());
    }
    try {
        s.axis = jsonio::vec3_from_json(j.at("axis"));
        double n = s.axis.norm();
        if (std::abs(n - 1.0) > 1e-3) {
            v.add("symmetry axis is not normalized");
        } else if (n > 0.0) {
            s.axis /= n;
        }
    } catch (const std::exception& e) {
        v.add(std::string("symmetry axis: ") + e.what());
    }
    return s;
}

SceneObject object_from_json(const json& j, const Violations& parent) {
    SceneObject obj;
    obj.id = j.value("id", 0);
    Violations v{parent.context + ", instance " + std::to_string(obj.id), parent.sink};
    try {
        obj.primitive = primitive_from_name(j.at("primitive").get<std::string>());
        obj.size = jsonio::vec3_from_json(j.at("size"));
        obj.pose = jsonio::pose_from_json(j.at("pose"));
        obj.class_label = j.value("class_label", "");
    } catch (const std::exception& e) {
        v.add(e.what());
        return obj;
    }
    if (!is_rotation_matrix(obj.pose.rotation)) {
        v.add("object pose rotation is not a proper rotation (det must be +1)");
    }
    obj.symmetry = symmetry_from_json(j.at("symmetry"), v);
    return obj;
}

SyntheticScene scene_from_json(const json& j, const Violations& v) {
    SyntheticScene scene;
    try {
        scene.room.min = jsonio::vec3_from_json(j.at("room").at("min"));
        scene.room.max = jsonio::vec3_from_json(j.at("room").at("max"));
        scene.seed = j.value("seed", std::uint64_t(0));
        for (const auto& oj : j.at("objects")) {
            scene.objects.push_back(object_from_json(oj, v));
        }
    } catch (const std::exception& e) {
        v.add(e.what());
    }
    return scene;
}

json manifest_to_json(const ScenePairManifest& manifest, bool hidden) {
    json changes = json::array();
    for (const auto& ch : manifest.changes) {
        json cj{{"instance_id", ch.instance_id}, {"kind", change_kind_name(ch.kind)}};
        if (ch.gt_pose && !hidden) {
            cj["gt_pose"] = jsonio::pose_to_json(*ch.gt_pose);
        }
        changes.push_back(cj);
    }
    json j{{"schema", "3rscan-lite/1"},
           {"scan_pair_id", manifest.scan_pair_id},
           {"split", manifest.split},
           {"reference", scene_to_json(manifest.reference)},
           {"changes", changes}};
    if (hidden) {
        j["hidden"] = true;
    } else {
        j["rescan"] = scene_to_json(manifest.rescan);
    }
    return j;
}

ScenePairManifest manifest_from_json(const json& j, std::vector<std::string>& sink) {
    ScenePairManifest m;
    Violations v{j.value("scan_pair_id", "<unnamed>"), &sink};
    if (j.value("schema", "") != "3rscan-lite/1") {
        v.add("unknown schema tag '" + j.value("schema", "") + "'");
    }
    m.scan_pair_id = j.value("scan_pair_id", "");
    m.split = j.value("split", "");
    if (j.contains("reference")) {
        m.reference = scene_from_json(j.at("reference"), v);
    } else {
        v.add("missing reference scene");
    }
    bool hidden = j.value("hidden", false);
    if (j.contains("rescan")) {
        m.rescan = scene_from_json(j.at("rescan"), v);
    } else if (!hidden) {
        v.add("missing rescan scene");
    }

    std::set<int> ref_ids, rescan_ids;
    for (const auto& o : m.reference.objects) ref_ids.insert(o.id);
    for (const auto& o : m.rescan.objects) rescan_ids.insert(o.id);

    for (const auto& cj : j.value("changes", json::array())) {
        InstanceChange ch;
        ch.instance_id = cj.value("instance_id", 0);
        Violations cv{v.context + ", instance " + std::to_string(ch.instance_id), &sink};
        try {
            ch.kind = change_kind_from_name(cj.value("kind", ""));
        } catch (const std::exception& e) {
            cv.add(e.what());
            continue;
        }
        if (cj.contains("gt_pose")) {
            try {
                ch.gt_pose = jsonio::pose_from_json(cj.at("gt_pose"));
                if (!is_rotation_matrix(ch.gt_pose->rotation)) {
                    cv.add("gt_pose rotation is not a proper rotation (det must be +1)");
                }
            } catch (const std::exception& e) {
                cv.add(std::string("gt_pose: ") + e.what());
            }
        }
        if (!hidden) {
            switch (ch.kind) {
                case ChangeKind::moved:
                    if (!ch.gt_pose) {
                        cv.add("moved instance is missing gt_pose");
                    }
                    if (!ref_ids.count(ch.instance_id) || !rescan_ids.count(ch.instance_id)) {
                        cv.add("moved instance must exist in both scenes");
                    }
                    break;
                case ChangeKind::removed:
                    if (!ref_ids.count(ch.instance_id) || rescan_ids.count(ch.instance_id)) {
                        cv.add("removed instance must exist only in the reference");
                    }
                    break;
                case ChangeKind::added:
                    if (ref_ids.count(ch.instance_id) || !rescan_ids.count(ch.instance_id)) {
                        cv.add("added instance must exist only in the rescan");
                    }
                    break;
            }
        }
        m.changes.push_back(ch);
    }
    return m;
}

}  // namespace

void save_scene_pair_manifest(const ScenePairManifest& manifest, const std::filesystem::path& path,
                              bool hidden) {
    std::ofstream os(path);
    if (!os) {
        throw std::runtime_error("cannot open for writing: " + path.string());
    }
    os << manifest_to_json(manifest, hidden).dump(2) << '\n';
}

ScenePairManifest load_scene_pair_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw std::runtime_error("cannot open: " + path.string());
    }
    std::vector<std::string> violations;
    ScenePairManifest m;
    try {
        m = manifest_from_json(json::parse(is), violations);
    } catch (const json::exception& e) {
        violations.push_back(path.string() + ": " + e.what());
    }
    if (!violations.empty()) {
        throw SchemaError(violations);
    }
    return m;
}

LoadedDataset load_scan_manifest(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    LoadedDataset data;
    std::vector<std::string> violations;

    fs::path scenes_dir = root / "scenes";
    if (!fs::is_directory(scenes_dir)) {
        throw SchemaError({"missing scenes/ directory under " + root.string()});
    }
    std::vector<fs::path> manifest_paths;
    for (const auto& entry : fs::directory_iterator(scenes_dir)) {
        if (entry.is_directory() && fs::exists(entry.path() / "manifest.json")) {
            manifest_paths.push_back(entry.path() / "manifest.json");
        }
    }
    std::sort(manifest_paths.begin(), manifest_paths.end());

    for (const auto& path : manifest_paths) {
        std::ifstream is(path);
        try {
            data.pairs.push_back(manifest_from_json(json::parse(is), violations));
        } catch (const json::exception& e) {
            violations.push_back(path.string() + ": " + e.what());
        }
    }

    fs::path splits_path = root / "splits.json";
    if (fs::exists(splits_path)) {
        std::ifstream is(splits_path);
        try {
            json sj = json::parse(is);
            for (const auto& [key, value] : sj.items()) {
                std::string split = value.get<std::string>();
                if (split != "train" && split != "val" && split != "test") {
                    violations.push_back("splits.json: unknown split '" + split + "' for " + key);
                }
                data.splits[key] = split;
            }
        } catch (const json::exception& e) {
            violations.push_back(std::string("splits.json: ") + e.what());
        }
    }

    if (!violations.empty()) {
        throw SchemaError(violations);
    }
    for (const auto& pair : data.pairs) {
        ScanPairRecords records;
        records.scan_pair_id = pair.scan_pair_id;
        records.instances = build_instance_records(pair);
        data.records.push_back(std::move(records));
    }
    return data;
}

void export_benchmark_bundle(std::span<const ScenePairManifest> pairs,
                             const std::filesystem::path& out_dir, const BundleOptions& options) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(out_dir / "scenes", ec);
    if (ec) {
        throw std::runtime_error("cannot create " + (out_dir / "scenes").string() + ": " + ec.message());
    }

    json splits = json::object();
    json template_rows = json::array();
    std::vector<ScanPairRecords> all_records;

    for (const auto& pair : pairs) {
        fs::path dir = out_dir / "scenes" / pair.scan_pair_id;
        fs::create_directories(dir, ec);
        if (ec) {
            throw std::runtime_error("cannot create " + dir.string() + ": " + ec.message());
        }
        GridSpec grid = scene_grid(pair.reference.room, options.voxel_size, options.truncation,
                                   options.margin);
        save_tsdf(analytic_tsdf(pair.reference, grid.dims, grid.voxel_size, grid.origin,
                                grid.truncation, options.threads),
                  dir / "reference.tsdf");
        save_tsdf(analytic_tsdf(pair.rescan, grid.dims, grid.voxel_size, grid.origin,
                                grid.truncation, options.threads),
                  dir / "rescan-1.tsdf");
        save_scene_pair_manifest(pair, dir / "manifest.json", options.hidden);
        splits[pair.scan_pair_id] = pair.split;

        ScanPairRecords records;
        records.scan_pair_id = pair.scan_pair_id;
        records.instances = build_instance_records(pair);
        for (const auto& rec : records.instances) {
            template_rows.push_back(json{{"scan_pair_id", pair.scan_pair_id},
                                         {"instance_id", rec.instance_id},
                                         {"rotation", {1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0}},
                                         {"translation", {0.0, 0.0, 0.0}},
                                         {"status", "failed"}});
        }
        all_records.push_back(std::move(records));
    }

    std::ofstream(out_dir / "splits.json") << splits.dump(2) << '\n';
    std::ofstream(out_dir / "predictions_template.json") << template_rows.dump(2) << '\n';
    save_gt_manifest(all_records, out_dir / "gt_manifest.json", options.hidden);
}

}  // namespace rio
