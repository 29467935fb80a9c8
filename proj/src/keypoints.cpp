#include "rio/keypoints.hpp"

#include "json_helpers.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <unordered_map>

namespace rio {

using jsonio::json;

void HarrisConfig::validate() const {
    if (!(k > 0.0 && k <= 0.25)) {
        throw std::invalid_argument("harris k must lie in (0, 0.25]");
    }
    if (gradient_radius < 1) {
        throw std::invalid_argument("gradient_radius must be >= 1");
    }
    if (near_surface_band <= 0.0) {
        throw std::invalid_argument("near_surface_band must be positive");
    }
}

namespace {

constexpr double kNoResponse = -std::numeric_limits<double>::infinity();

// Structure tensor of central-difference gradients over the cube window.
double harris_response_at(const TsdfVolume& v, int cx, int cy, int cz, const HarrisConfig& cfg) {
    double m00 = 0, m01 = 0, m02 = 0, m11 = 0, m12 = 0, m22 = 0;
    int n = 0;
    const int r = cfg.gradient_radius;
    for (int dz = -r; dz <= r; ++dz) {
        for (int dy = -r; dy <= r; ++dy) {
            for (int dx = -r; dx <= r; ++dx) {
                int x = cx + dx, y = cy + dy, z = cz + dz;
                if (x < 1 || y < 1 || z < 1 || x >= v.dims.x - 1 || y >= v.dims.y - 1 ||
                    z >= v.dims.z - 1) {
                    continue;
                }
                double gx = 0.5 * (v.values[v.index(x + 1, y, z)] - v.values[v.index(x - 1, y, z)]);
                double gy = 0.5 * (v.values[v.index(x, y + 1, z)] - v.values[v.index(x, y - 1, z)]);
                double gz = 0.5 * (v.values[v.index(x, y, z + 1)] - v.values[v.index(x, y, z - 1)]);
                m00 += gx * gx;
                m01 += gx * gy;
                m02 += gx * gz;
                m11 += gy * gy;
                m12 += gy * gz;
                m22 += gz * gz;
                ++n;
            }
        }
    }
    if (n == 0) {
        return kNoResponse;
    }
    double det = m00 * (m11 * m22 - m12 * m12) - m01 * (m01 * m22 - m12 * m02) +
                 m02 * (m01 * m12 - m11 * m02);
    double trace = m00 + m11 + m22;
    return det - cfg.k * trace * trace * trace;
}

bool position_less(const Vec3& a, const Vec3& b) {
    if (a.x() != b.x()) return a.x() < b.x();
    if (a.y() != b.y()) return a.y() < b.y();
    return a.z() < b.z();
}

void sort_by_response(std::vector<Keypoint>& kps) {
    std::sort(kps.begin(), kps.end(), [](const Keypoint& a, const Keypoint& b) {
        if (a.response != b.response) return a.response > b.response;
        return position_less(a.position, b.position);
    });
}

}  // namespace

std::vector<Keypoint> harris3d(const TsdfVolume& volume, const HarrisConfig& config,
                               const std::vector<std::uint32_t>* restrict_to, int threads) {
    config.validate();
    if (volume.values.empty()) {
        return {};
    }

    std::vector<std::uint32_t> candidates;
    if (restrict_to) {
        candidates.reserve(restrict_to->size());
        for (std::uint32_t vi : *restrict_to) {
            if (vi < volume.values.size() && std::abs(volume.values[vi]) < config.near_surface_band) {
                candidates.push_back(vi);
            }
        }
    } else {
        for (std::uint32_t vi = 0; vi < volume.values.size(); ++vi) {
            if (std::abs(volume.values[vi]) < config.near_surface_band) {
                candidates.push_back(vi);
            }
        }
    }

    std::vector<double> responses(candidates.size());
    parallel_chunks(candidates.size(), threads, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            std::uint32_t vi = candidates[i];
            int ix = static_cast<int>(vi % volume.dims.x);
            int iy = static_cast<int>((vi / volume.dims.x) % volume.dims.y);
            int iz = static_cast<int>(vi / (std::int64_t(volume.dims.x) * volume.dims.y));
            responses[i] = harris_response_at(volume, ix, iy, iz, config);
        }
    });

    std::vector<Keypoint> out;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        if (responses[i] >= config.min_response) {
            std::uint32_t vi = candidates[i];
            int ix = static_cast<int>(vi % volume.dims.x);
            int iy = static_cast<int>((vi / volume.dims.x) % volume.dims.y);
            int iz = static_cast<int>(vi / (std::int64_t(volume.dims.x) * volume.dims.y));
            out.push_back({volume.voxel_center(ix, iy, iz), responses[i]});
        }
    }
    sort_by_response(out);
    return out;
}

std::vector<Keypoint> nms(std::span<const Keypoint> keypoints, double radius) {
    if (radius <= 0.0) {
        throw std::invalid_argument("nms radius must be positive");
    }
    std::vector<Keypoint> sorted(keypoints.begin(), keypoints.end());
    sort_by_response(sorted);

    // bucket kept points on a radius-sized lattice so each query touches 27 cells
    auto cell_key = [&](const Vec3& p) {
        auto q = [&](double x) { return static_cast<std::int64_t>(std::floor(x / radius)); };
        return (q(p.x()) * 73856093) ^ (q(p.y()) * 19349663) ^ (q(p.z()) * 83492791);
    };
    std::unordered_map<std::int64_t, std::vector<Vec3>> buckets;

    std::vector<Keypoint> kept;
    for (const auto& kp : sorted) {
        bool suppressed = false;
        auto q = [&](double x) { return static_cast<std::int64_t>(std::floor(x / radius)); };
        for (std::int64_t dz = -1; dz <= 1 && !suppressed; ++dz) {
            for (std::int64_t dy = -1; dy <= 1 && !suppressed; ++dy) {
                for (std::int64_t dx = -1; dx <= 1 && !suppressed; ++dx) {
                    std::int64_t key = ((q(kp.position.x()) + dx) * 73856093) ^
                                       ((q(kp.position.y()) + dy) * 19349663) ^
                                       ((q(kp.position.z()) + dz) * 83492791);
                    auto it = buckets.find(key);
                    if (it == buckets.end()) {
                        continue;
                    }
                    for (const Vec3& p : it->second) {
                        if ((p - kp.position).norm() <= radius) {
                            suppressed = true;
                            break;
                        }
                    }
                }
            }
        }
        if (!suppressed) {
            kept.push_back(kp);
            buckets[cell_key(kp.position)].push_back(kp.position);
        }
    }
    return kept;
}

std::optional<Keypoint> refine_on(const TsdfVolume& volume_b, const Keypoint& from_a,
                                  double search_radius, const HarrisConfig& config,
                                  double min_response_ratio) {
    config.validate();
    if (search_radius <= 0.0) {
        throw std::invalid_argument("search_radius must be positive");
    }
    Vec3 c = (from_a.position - volume_b.origin) / volume_b.voxel_size;
    int r = static_cast<int>(std::ceil(search_radius / volume_b.voxel_size));
    int x0 = std::max(0, static_cast<int>(std::floor(c.x())) - r);
    int y0 = std::max(0, static_cast<int>(std::floor(c.y())) - r);
    int z0 = std::max(0, static_cast<int>(std::floor(c.z())) - r);
    int x1 = std::min(volume_b.dims.x - 1, static_cast<int>(std::ceil(c.x())) + r);
    int y1 = std::min(volume_b.dims.y - 1, static_cast<int>(std::ceil(c.y())) + r);
    int z1 = std::min(volume_b.dims.z - 1, static_cast<int>(std::ceil(c.z())) + r);

    std::optional<Keypoint> best;
    for (int iz = z0; iz <= z1; ++iz) {
        for (int iy = y0; iy <= y1; ++iy) {
            for (int ix = x0; ix <= x1; ++ix) {
                if (std::abs(volume_b.values[volume_b.index(ix, iy, iz)]) >= config.near_surface_band) {
                    continue;
                }
                Vec3 p = volume_b.voxel_center(ix, iy, iz);
                if ((p - from_a.position).norm() > search_radius) {
                    continue;
                }
                double resp = harris_response_at(volume_b, ix, iy, iz, config);
                if (resp == kNoResponse) {
                    continue;
                }
                if (!best || resp > best->response ||
                    (resp == best->response && position_less(p, best->position))) {
                    best = Keypoint{p, resp};
                }
            }
        }
    }
    // responses can be negative (det - k*trace^3 is bounded above by zero for
    // k >= 1/27); the acceptance band scales by magnitude on either side
    double min_accept = -std::numeric_limits<double>::infinity();
    if (min_response_ratio > 0.0) {
        min_accept = from_a.response >= 0.0 ? min_response_ratio * from_a.response
                                            : from_a.response / min_response_ratio;
    }
    if (!best || best->response < min_accept) {
        return std::nullopt;
    }
    return best;
}

// ---- cube rotations ------------------------------------------------------------

namespace {

std::vector<Mat3> make_cube_rotations() {
    std::vector<Mat3> rots;
    const int perms[6][3] = {{0, 1, 2}, {0, 2, 1}, {1, 0, 2}, {1, 2, 0}, {2, 0, 1}, {2, 1, 0}};
    for (const auto& perm : perms) {
        for (int sign_bits = 0; sign_bits < 8; ++sign_bits) {
            Mat3 m = Mat3::Zero();
            for (int row = 0; row < 3; ++row) {
                m(row, perm[row]) = (sign_bits >> row) & 1 ? -1.0 : 1.0;
            }
            if (m.determinant() > 0.5) {
                rots.push_back(m);
            }
        }
    }
    return rots;  // 24, index 0 = identity
}

const std::vector<Mat3>& cube_rotations() {
    static const std::vector<Mat3> rots = make_cube_rotations();
    return rots;
}

}  // namespace

Mat3 cube_rotation(int index) {
    const auto& rots = cube_rotations();
    if (index < 0 || index >= static_cast<int>(rots.size())) {
        throw std::invalid_argument("cube rotation index must lie in [0, 24)");
    }
    return rots[index];
}

Patch rotate_patch_cube(const Patch& patch, int rotation_index) {
    Mat3 rt = cube_rotation(rotation_index).transpose();
    const int n = patch.resolution;
    const double c = (n - 1) / 2.0;

    Patch out;
    out.resolution = n;
    out.values.resize(patch.values.size());
    std::size_t oi = 0;
    for (int k = 0; k < n; ++k) {
        for (int j = 0; j < n; ++j) {
            for (int i = 0; i < n; ++i) {
                Vec3 src = rt * Vec3(i - c, j - c, k - c) + Vec3(c, c, c);
                int sx = static_cast<int>(std::lround(src.x()));
                int sy = static_cast<int>(std::lround(src.y()));
                int sz = static_cast<int>(std::lround(src.z()));
                out.values[oi++] = patch.values[(std::size_t(sz) * n + sy) * n + sx];
            }
        }
    }
    return out;
}

// ---- triplet sampling ------------------------------------------------------------

namespace {

std::vector<std::uint32_t> near_surface_voxels(const TsdfVolume& v, double band = 0.5) {
    std::vector<std::uint32_t> out;
    for (std::uint32_t i = 0; i < v.values.size(); ++i) {
        if (std::abs(v.values[i]) < band) {
            out.push_back(i);
        }
    }
    return out;
}

Vec3 voxel_position(const TsdfVolume& v, std::uint32_t vi) {
    int ix = static_cast<int>(vi % v.dims.x);
    int iy = static_cast<int>((vi / v.dims.x) % v.dims.y);
    int iz = static_cast<int>(vi / (std::int64_t(v.dims.x) * v.dims.y));
    return v.voxel_center(ix, iy, iz);
}

struct NegativeSampler {
    std::span<const TsdfVolume> pool;
    std::vector<std::vector<std::uint32_t>> surface;  // lazy per pool entry
    const TsdfVolume* removed_volume = nullptr;
    std::vector<std::uint32_t> removed_sites;

    explicit NegativeSampler(std::span<const TsdfVolume> pool_in) : pool(pool_in) {
        surface.resize(pool.size());
    }

    bool empty() const { return pool.empty() && removed_sites.empty(); }

    // (volume, center) for one negative patch
    std::pair<const TsdfVolume*, Vec3> draw(Rng& rng) {
        bool use_removed = !removed_sites.empty() && (pool.empty() || rng.uniform() < 0.5);
        if (use_removed) {
            std::uint32_t vi = removed_sites[rng.below(removed_sites.size())];
            return {removed_volume, voxel_position(*removed_volume, vi)};
        }
        for (std::size_t tries = 0; tries < pool.size(); ++tries) {
            std::size_t pi = rng.below(pool.size());
            if (surface[pi].empty()) {
                surface[pi] = near_surface_voxels(pool[pi]);
            }
            if (!surface[pi].empty()) {
                std::uint32_t vi = surface[pi][rng.below(surface[pi].size())];
                return {&pool[pi], voxel_position(pool[pi], vi)};
            }
        }
        return {nullptr, Vec3::Zero()};
    }
};

struct PairSite {
    Vec3 anchor;
    Vec3 positive;
};

// orientation for the anchor/positive pair; cube index -1 means continuous
struct Augmentation {
    int cube_index = 0;
    Mat3 orientation = Mat3::Identity();
};

Augmentation draw_augmentation(Rng& rng, const TripletSampleConfig& cfg) {
    Augmentation aug;
    if (!cfg.rotation_augmentation) {
        return aug;
    }
    if (cfg.continuous_rotation) {
        aug.cube_index = -1;
        aug.orientation =
            Eigen::AngleAxisd(rng.uniform(0.0, 2.0 * std::numbers::pi), rng.unit_vector())
                .toRotationMatrix();
    } else {
        aug.cube_index = static_cast<int>(rng.below(24));
        aug.orientation = cube_rotation(aug.cube_index);
    }
    return aug;
}

// NMS-kept keypoints that are also the response maximum within the pairing
// radius on their own volume. Anchors this stable refine to themselves on an
// identical volume, which the degenerate-pair contract relies on.
std::vector<Keypoint> stable_keypoints(const TsdfVolume& volume, const TripletSampleConfig& config,
                                       int threads, const std::vector<std::uint32_t>* mask = nullptr) {
    std::vector<Keypoint> kps =
        nms(harris3d(volume, config.harris, mask, threads), config.nms_radius);
    std::vector<Keypoint> stable;
    for (const auto& kp : kps) {
        if (static_cast<int>(stable.size()) >= config.max_keypoints) {
            break;
        }
        auto self = refine_on(volume, kp, config.pairing_radius, config.harris, 0.0);
        if (self && (self->position - kp.position).norm() < 1e-12) {
            stable.push_back(kp);
        }
    }
    return stable;
}

PatchPair extract_augmented(const TsdfVolume& volume, const Vec3& center, const PatchPairSpec& spec,
                            const Augmentation& aug) {
    if (aug.cube_index < 0) {
        return extract_two_scale(volume, center, spec, aug.orientation);
    }
    PatchPair pair = extract_two_scale(volume, center, spec);
    if (aug.cube_index > 0) {
        pair.fine = rotate_patch_cube(pair.fine, aug.cube_index);
        pair.coarse = rotate_patch_cube(pair.coarse, aug.cube_index);
    }
    return pair;
}

TripletBatch assemble_triplets(std::span<const PairSite> sites, const TsdfVolume& anchor_volume,
                               const TsdfVolume& positive_volume, NegativeSampler& negatives,
                               const PatchPairSpec& spec, const TripletSampleConfig& cfg, int count,
                               Rng& rng, TripletProvenance provenance) {
    TripletBatch batch;
    if (sites.empty() || count <= 0) {
        return batch;
    }
    if (negatives.empty()) {
        batch.diagnostics.push_back("no negative volumes available");
        return batch;
    }
    std::vector<std::size_t> order(sites.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    rng.shuffle(order);

    for (int t = 0; t < count; ++t) {
        const PairSite& site = sites[order[t % order.size()]];
        auto [neg_volume, neg_center] = negatives.draw(rng);
        if (!neg_volume) {
            batch.diagnostics.push_back("negative pool exhausted");
            break;
        }
        Augmentation aug = draw_augmentation(rng, cfg);
        TrainingTriplet triplet;
        triplet.anchor = extract_augmented(anchor_volume, site.anchor, spec, aug);
        triplet.positive = extract_augmented(positive_volume, site.positive, spec, aug);
        triplet.negative = extract_two_scale(*neg_volume, neg_center, spec);
        triplet.provenance = provenance;
        triplet.anchor_position = site.anchor;
        triplet.positive_position = site.positive;
        batch.triplets.push_back(std::move(triplet));
    }
    return batch;
}

}  // namespace

TripletBatch sample_static_triplets(std::span<const DepthFrame> frames, const GridSpec& grid,
                                    std::span<const TsdfVolume> negative_pool,
                                    const PatchPairSpec& spec, const TripletSampleConfig& config,
                                    int count, std::uint64_t seed, int threads) {
    spec.validate();
    TripletBatch batch;
    if (frames.size() < 2) {
        batch.diagnostics.push_back("fewer than 2 usable frames, no static pairs produced");
        return batch;
    }
    if (count <= 0) {
        return batch;
    }

    std::vector<DepthFrame> set_a, set_b;
    for (std::size_t i = 0; i < frames.size(); ++i) {
        (i % 2 == 0 ? set_a : set_b).push_back(frames[i]);
    }
    TsdfVolume vol_a = fuse_depth(set_a, grid.dims, grid.voxel_size, grid.origin, grid.truncation, threads);
    TsdfVolume vol_b = fuse_depth(set_b, grid.dims, grid.voxel_size, grid.origin, grid.truncation, threads);

    std::vector<Keypoint> kps = stable_keypoints(vol_a, config, threads);

    std::vector<PairSite> sites;
    for (const auto& kp : kps) {
        auto refined = refine_on(vol_b, kp, config.pairing_radius, config.harris,
                                 config.min_response_ratio);
        if (refined) {
            sites.push_back({kp.position, refined->position});
        }
    }
    if (sites.empty()) {
        batch.diagnostics.push_back("no keypoint pairs survived refinement");
        return batch;
    }

    Rng rng(Rng::derive(seed, 0x57a71c));
    NegativeSampler negatives(negative_pool);
    TripletBatch out = assemble_triplets(sites, vol_a, vol_b, negatives, spec, config, count, rng,
                                         TripletProvenance::static_pair);
    out.diagnostics.insert(out.diagnostics.begin(), batch.diagnostics.begin(), batch.diagnostics.end());
    return out;
}

TripletBatch sample_dynamic_triplets(const TsdfVolume& source, const TsdfVolume& rescan,
                                     std::span<const DynamicInstance> instances,
                                     std::span<const TsdfVolume> negative_pool,
                                     const PatchPairSpec& spec, const TripletSampleConfig& config,
                                     int count, std::uint64_t seed, int threads) {
    spec.validate();
    TripletBatch batch;
    if (count <= 0) {
        return batch;
    }

    NegativeSampler negatives(negative_pool);
    negatives.removed_volume = &source;

    std::vector<PairSite> sites;
    for (const auto& inst : instances) {
        if (inst.removed) {
            for (std::uint32_t vi : inst.mask.voxels) {
                if (vi < source.values.size() && std::abs(source.values[vi]) < 0.5) {
                    negatives.removed_sites.push_back(vi);
                }
            }
            continue;
        }
        std::vector<Keypoint> kps = stable_keypoints(source, config, threads, &inst.mask.voxels);
        std::size_t before = sites.size();
        for (const auto& kp : kps) {
            Keypoint mapped{inst.gt_pose.apply(kp.position), kp.response};
            auto refined = refine_on(rescan, mapped, config.pairing_radius, config.harris,
                                     config.min_response_ratio);
            if (refined) {
                sites.push_back({kp.position, refined->position});
            }
        }
        if (sites.size() == before) {
            batch.diagnostics.push_back("instance " + std::to_string(inst.instance_id) +
                                        " not found in the re-scan, skipped");
        }
    }
    if (sites.empty()) {
        batch.diagnostics.push_back("no dynamic pairs produced");
        return batch;
    }

    Rng rng(Rng::derive(seed, 0xd1a51c));
    TripletBatch out = assemble_triplets(sites, source, rescan, negatives, spec, config, count, rng,
                                         TripletProvenance::dynamic_pair);
    out.diagnostics.insert(out.diagnostics.begin(), batch.diagnostics.begin(), batch.diagnostics.end());
    return out;
}

// ---- file formats ------------------------------------------------------------------

void save_keypoints_json(std::span<const Keypoint> keypoints, const std::filesystem::path& path) {
    json arr = json::array();
    for (const auto& kp : keypoints) {
        arr.push_back(json{{"position", jsonio::vec3_to_json(kp.position)}, {"response", kp.response}});
    }
    std::ofstream os(path);
    if (!os) {
        throw std::runtime_error("cannot open for writing: " + path.string());
    }
    os << arr.dump(2) << '\n';
}

std::vector<Keypoint> load_keypoints_json(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw std::runtime_error("cannot open: " + path.string());
    }
    json arr = json::parse(is);
    std::vector<Keypoint> out;
    for (const auto& j : arr) {
        out.push_back({jsonio::vec3_from_json(j.at("position")), j.at("response").get<double>()});
    }
    return out;
}

namespace {

TsdfVolume patch_as_volume(const Patch& patch, double voxel_size) {
    TsdfVolume v;
    v.dims = {patch.resolution, patch.resolution, patch.resolution};
    v.voxel_size = voxel_size;
    v.origin = Vec3::Zero();
    v.truncation = 1.0;
    v.values = patch.values;
    return v;
}

Patch volume_as_patch(const TsdfVolume& v) {
    if (v.dims.x != v.dims.y || v.dims.y != v.dims.z) {
        throw std::runtime_error("patch volumes must be cubic");
    }
    Patch p;
    p.resolution = v.dims.x;
    p.values = v.values;
    return p;
}

}  // namespace

void save_triplet_store(std::span<const TrainingTriplet> triplets, const std::filesystem::path& dir,
                        const PatchPairSpec& spec) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "patches");

    json index = json::array();
    for (std::size_t t = 0; t < triplets.size(); ++t) {
        const TrainingTriplet& triplet = triplets[t];
        json entry{{"id", t},
                   {"provenance",
                    triplet.provenance == TripletProvenance::static_pair ? "static" : "dynamic"}};
        const std::pair<const char*, const PatchPair*> parts[] = {
            {"anchor", &triplet.anchor}, {"positive", &triplet.positive}, {"negative", &triplet.negative}};
        for (const auto& [name, pair] : parts) {
            std::string base = "patches/t" + std::to_string(t) + "_" + name;
            save_tsdf(patch_as_volume(pair->fine, spec.fine_voxel_size()), dir / (base + "_fine.tsdf"));
            save_tsdf(patch_as_volume(pair->coarse, spec.coarse_voxel_size()),
                      dir / (base + "_coarse.tsdf"));
            entry[name] = json{{"fine", base + "_fine.tsdf"}, {"coarse", base + "_coarse.tsdf"}};
        }
        index.push_back(entry);
    }
    std::ofstream os(dir / "index.json");
    if (!os) {
        throw std::runtime_error("cannot write triplet index under " + dir.string());
    }
    os << json{{"triplets", index}}.dump(2) << '\n';
}

std::vector<TrainingTriplet> load_triplet_store(const std::filesystem::path& dir) {
    std::ifstream is(dir / "index.json");
    if (!is) {
        throw std::runtime_error("cannot open triplet index under " + dir.string());
    }
    json index = json::parse(is);
    std::vector<TrainingTriplet> out;
    for (const auto& entry : index.at("triplets")) {
        TrainingTriplet triplet;
        triplet.provenance = entry.at("provenance").get<std::string>() == "dynamic"
                                 ? TripletProvenance::dynamic_pair
                                 : TripletProvenance::static_pair;
        const std::pair<const char*, PatchPair*> parts[] = {
            {"anchor", &triplet.anchor}, {"positive", &triplet.positive}, {"negative", &triplet.negative}};
        for (const auto& [name, pair] : parts) {
            pair->fine = volume_as_patch(load_tsdf(dir / entry.at(name).at("fine").get<std::string>()));
            pair->coarse =
                volume_as_patch(load_tsdf(dir / entry.at(name).at("coarse").get<std::string>()));
        }
        out.push_back(std::move(triplet));
    }
    return out;
}

}  // namespace rio
