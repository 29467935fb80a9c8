#include "rio/registration.hpp"

#include "json_helpers.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>

namespace rio {

using jsonio::json;

std::vector<Correspondence> match_knn(const FeatureMatrix& source_features,
                                      std::span<const Vec3> source_points,
                                      const FeatureMatrix& target_features,
                                      std::span<const Vec3> target_points, int k) {
    if (k < 1) {
        throw std::invalid_argument("k must be >= 1");
    }
    if (source_features.rows() != static_cast<Eigen::Index>(source_points.size()) ||
        target_features.rows() != static_cast<Eigen::Index>(target_points.size())) {
        throw std::invalid_argument("feature row count must match the point count");
    }
    if (target_features.rows() == 0) {
        return {};
    }
    if (source_features.rows() > 0 && source_features.cols() != target_features.cols()) {
        throw std::invalid_argument("source and target feature dimensions differ");
    }

    const int take = std::min<int>(k, static_cast<int>(target_features.rows()));
    std::vector<Correspondence> out;
    out.reserve(source_points.size() * take);

    std::vector<std::pair<float, int>> dist(target_features.rows());
    for (Eigen::Index si = 0; si < source_features.rows(); ++si) {
        for (Eigen::Index ti = 0; ti < target_features.rows(); ++ti) {
            dist[ti] = {(target_features.row(ti) - source_features.row(si)).squaredNorm(),
                        static_cast<int>(ti)};
        }
        std::partial_sort(dist.begin(), dist.begin() + take, dist.end());
        for (int r = 0; r < take; ++r) {
            out.push_back({source_points[si], target_points[dist[r].second],
                           std::sqrt(static_cast<double>(dist[r].first))});
        }
    }
    return out;
}

RigidPose kabsch(std::span<const Correspondence> correspondences) {
    if (correspondences.size() < 3) {
        throw DegenerateInputError("kabsch needs at least 3 correspondences");
    }
    Vec3 pc = Vec3::Zero(), qc = Vec3::Zero();
    for (const auto& c : correspondences) {
        pc += c.source_point;
        qc += c.target_point;
    }
    pc /= static_cast<double>(correspondences.size());
    qc /= static_cast<double>(correspondences.size());

    Mat3 h = Mat3::Zero();
    for (const auto& c : correspondences) {
        h += (c.source_point - pc) * (c.target_point - qc).transpose();
    }

    Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    const Vec3& sv = svd.singularValues();
    if (sv(0) <= 0.0 || sv(1) <= 1e-10 * sv(0)) {
        throw DegenerateInputError("kabsch input is rank-deficient (collinear or coincident points)");
    }
    Mat3 u = svd.matrixU(), v = svd.matrixV();
    Mat3 d = Mat3::Identity();
    d(2, 2) = (v * u.transpose()).determinant() < 0.0 ? -1.0 : 1.0;

    RigidPose pose;
    pose.rotation = v * d * u.transpose();
    pose.translation = qc - pose.rotation * pc;
    return pose;
}

namespace {

bool sample_degenerate(const Correspondence& a, const Correspondence& b, const Correspondence& c) {
    Vec3 u = b.source_point - a.source_point;
    Vec3 v = c.source_point - a.source_point;
    double scale = u.norm() * v.norm();
    return scale <= 0.0 || u.cross(v).norm() < 1e-9 * scale;
}

struct CandidateModel {
    int inlier_count = -1;
    double mean_residual = std::numeric_limits<double>::infinity();
    int iteration = std::numeric_limits<int>::max();
    RigidPose pose;

    bool better_than(const CandidateModel& other) const {
        if (inlier_count != other.inlier_count) return inlier_count > other.inlier_count;
        if (mean_residual != other.mean_residual) return mean_residual < other.mean_residual;
        return iteration < other.iteration;
    }
};

}  // namespace

RansacResult ransac_align(std::span<const Correspondence> correspondences,
                          const RansacConfig& config) {
    if (config.max_iterations <= 0 || config.inlier_threshold <= 0.0 || config.min_inliers <= 0) {
        throw std::invalid_argument("ransac config values must be positive");
    }
    const int n = static_cast<int>(correspondences.size());
    if (n < 3) {
        throw AlignmentFailure("ransac needs at least 3 correspondences, got " + std::to_string(n));
    }

    auto evaluate = [&](const RigidPose& pose, std::vector<int>* inliers) {
        int count = 0;
        double residual_sum = 0.0;
        for (int i = 0; i < n; ++i) {
            double r = (pose.apply(correspondences[i].source_point) - correspondences[i].target_point)
                           .norm();
            if (r <= config.inlier_threshold) {
                ++count;
                residual_sum += r;
                if (inliers) {
                    inliers->push_back(i);
                }
            }
        }
        return std::pair<int, double>{count, count > 0 ? residual_sum / count : 0.0};
    };

    auto run_iteration = [&](int it) {
        CandidateModel candidate;
        Rng rng(Rng::derive(config.seed, static_cast<std::uint64_t>(it)));
        // one resample is allowed before the iteration is forfeited
        for (int attempt = 0; attempt < 2; ++attempt) {
            int a = static_cast<int>(rng.below(n));
            int b = static_cast<int>(rng.below(n));
            int c = static_cast<int>(rng.below(n));
            if (a == b || a == c || b == c ||
                sample_degenerate(correspondences[a], correspondences[b], correspondences[c])) {
                continue;
            }
            Correspondence sample[3] = {correspondences[a], correspondences[b], correspondences[c]};
            RigidPose pose;
            try {
                pose = kabsch(std::span<const Correspondence>(sample, 3));
            } catch (const DegenerateInputError&) {
                continue;
            }
            auto [count, mean] = evaluate(pose, nullptr);
            candidate = CandidateModel{count, mean, it, pose};
            break;
        }
        return candidate;
    };

    CandidateModel best;
    if (config.threads <= 1) {
        for (int it = 0; it < config.max_iterations; ++it) {
            CandidateModel cand = run_iteration(it);
            if (cand.better_than(best)) {
                best = cand;
            }
        }
    } else {
        // better_than is a strict total order (iteration breaks ties), so the
        // merge order across chunks cannot change the winner
        std::mutex merge_mutex;
        parallel_chunks(static_cast<std::size_t>(config.max_iterations), config.threads,
                        [&](std::size_t begin, std::size_t end) {
                            CandidateModel local;
                            for (std::size_t it = begin; it < end; ++it) {
                                CandidateModel cand = run_iteration(static_cast<int>(it));
                                if (cand.better_than(local)) {
                                    local = cand;
                                }
                            }
                            std::lock_guard lock(merge_mutex);
                            if (local.better_than(best)) {
                                best = local;
                            }
                        });
    }

    if (best.inlier_count < config.min_inliers) {
        throw AlignmentFailure("no ransac model reached " + std::to_string(config.min_inliers) +
                               " inliers (best " + std::to_string(std::max(best.inlier_count, 0)) +
                               ")");
    }

    std::vector<int> sample_inliers;
    evaluate(best.pose, &sample_inliers);
    std::vector<Correspondence> subset;
    subset.reserve(sample_inliers.size());
    for (int i : sample_inliers) {
        subset.push_back(correspondences[i]);
    }

    RansacResult result;
    result.pose = kabsch(subset);
    result.best_sample_inliers = best.inlier_count;
    auto [count, mean] = evaluate(result.pose, &result.inliers);
    (void)count;
    result.mean_inlier_residual = mean;
    return result;
}

SceneFeatures compute_scene_features(const DescriptorModel<float>& model, const TsdfVolume& scene,
                                     const RelocalizeConfig& config) {
    SceneFeatures out;
    out.keypoints = nms(harris3d(scene, config.harris, nullptr, config.threads), config.nms_radius);
    if (static_cast<int>(out.keypoints.size()) > config.max_scene_keypoints) {
        out.keypoints.resize(config.max_scene_keypoints);
    }
    out.features = describe_keypoints(model, scene, out.keypoints, config.patch, config.threads);
    return out;
}

RelocalizeResult relocalize_instance(const DescriptorModel<float>& model, const TsdfVolume& source,
                                     const VoxelMask& object_mask, const SceneFeatures& target,
                                     const RelocalizeConfig& config) {
    std::vector<Keypoint> object_kps =
        nms(harris3d(source, config.harris, &object_mask.voxels, config.threads), config.nms_radius);
    if (static_cast<int>(object_kps.size()) > config.max_object_keypoints) {
        object_kps.resize(config.max_object_keypoints);
    }
    if (static_cast<int>(object_kps.size()) < config.min_object_keypoints) {
        throw ObjectTooSmallError("object yields " + std::to_string(object_kps.size()) +
                                  " keypoints, need " + std::to_string(config.min_object_keypoints));
    }

    FeatureMatrix object_features =
        describe_keypoints(model, source, object_kps, config.patch, config.threads);

    std::vector<Vec3> object_points(object_kps.size());
    for (std::size_t i = 0; i < object_kps.size(); ++i) {
        object_points[i] = object_kps[i].position;
    }
    std::vector<Vec3> target_points(target.keypoints.size());
    for (std::size_t i = 0; i < target.keypoints.size(); ++i) {
        target_points[i] = target.keypoints[i].position;
    }

    std::vector<Correspondence> matches =
        match_knn(object_features, object_points, target.features, target_points, config.knn);

    RelocalizeResult result;
    result.diagnostics.object_keypoints = static_cast<int>(object_kps.size());
    result.diagnostics.scene_keypoints = static_cast<int>(target.keypoints.size());
    result.diagnostics.matches = static_cast<int>(matches.size());

    RansacResult aligned = ransac_align(matches, config.ransac);
    result.pose = aligned.pose;
    result.diagnostics.inlier_count = static_cast<int>(aligned.inliers.size());
    result.diagnostics.inlier_ratio =
        matches.empty() ? 0.0
                        : static_cast<double>(aligned.inliers.size()) / static_cast<double>(matches.size());
    return result;
}

RelocalizeResult relocalize_instance(const DescriptorModel<float>& model, const TsdfVolume& source,
                                     const VoxelMask& object_mask, const TsdfVolume& target,
                                     const RelocalizeConfig& config) {
    SceneFeatures features = compute_scene_features(model, target, config);
    return relocalize_instance(model, source, object_mask, features, config);
}

void save_predictions(std::span<const Prediction> predictions, const std::filesystem::path& path) {
    json arr = json::array();
    for (const auto& p : predictions) {
        json pose = jsonio::pose_to_json(p.pose);
        arr.push_back(json{{"scan_pair_id", p.scan_pair_id},
                           {"instance_id", p.instance_id},
                           {"rotation", pose.at("rotation")},
                           {"translation", pose.at("translation")},
                           {"status", p.ok ? "ok" : "failed"}});
    }
    std::ofstream os(path);
    if (!os) {
        throw std::runtime_error("cannot open for writing: " + path.string());
    }
    os << arr.dump(2) << '\n';
}

std::vector<Prediction> load_predictions(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw std::runtime_error("cannot open: " + path.string());
    }
    json arr = json::parse(is);
    std::vector<Prediction> out;
    for (const auto& j : arr) {
        Prediction p;
        p.scan_pair_id = j.at("scan_pair_id").get<std::string>();
        p.instance_id = j.at("instance_id").get<int>();
        p.pose = jsonio::pose_from_json(j);
        std::string status = j.at("status").get<std::string>();
        if (status != "ok" && status != "failed") {
            throw std::runtime_error("unknown prediction status '" + status + "'");
        }
        p.ok = status == "ok";
        out.push_back(p);
    }
    return out;
}

}  // namespace rio
