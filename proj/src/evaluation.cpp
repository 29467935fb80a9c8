#include "rio/evaluation.hpp"

#include "json_helpers.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

namespace rio {

using jsonio::json;

std::string symmetry_type_name(SymmetryClass::Type type) {
    switch (type) {
        case SymmetryClass::Type::none: return "none";
        case SymmetryClass::Type::c2: return "c2";
        case SymmetryClass::Type::c4: return "c4";
        case SymmetryClass::Type::cinf: return "cinf";
    }
    return "none";
}

SymmetryClass::Type symmetry_type_from_name(const std::string& name) {
    if (name == "none") return SymmetryClass::Type::none;
    if (name == "c2") return SymmetryClass::Type::c2;
    if (name == "c4") return SymmetryClass::Type::c4;
    if (name == "cinf") return SymmetryClass::Type::cinf;
    throw std::invalid_argument("unknown symmetry tag: " + name);
}

namespace {

double axis_angle_deg(const Mat3& r) {
    double c = std::clamp((r.trace() - 1.0) / 2.0, -1.0, 1.0);
    return std::acos(c) * 180.0 / std::numbers::pi;
}

}  // namespace

double rotation_error_deg(const Mat3& predicted, const Mat3& gt, const SymmetryClass& symmetry) {
    if (!is_rotation_matrix(predicted) || !is_rotation_matrix(gt)) {
        throw std::invalid_argument("rotation_error_deg expects orthonormal det(+1) matrices");
    }
    switch (symmetry.type) {
        case SymmetryClass::Type::none:
            return axis_angle_deg(predicted.transpose() * gt);
        case SymmetryClass::Type::c2:
        case SymmetryClass::Type::c4: {
            int n = symmetry.type == SymmetryClass::Type::c2 ? 2 : 4;
            double best = std::numeric_limits<double>::infinity();
            for (int k = 0; k < n; ++k) {
                Mat3 sym = Eigen::AngleAxisd(2.0 * std::numbers::pi * k / n, symmetry.axis.normalized())
                               .toRotationMatrix();
                best = std::min(best, axis_angle_deg(predicted.transpose() * (gt * sym)));
            }
            return best;
        }
        case SymmetryClass::Type::cinf: {
            Vec3 axis = symmetry.axis.normalized();
            double c = std::clamp((predicted * axis).dot(gt * axis), -1.0, 1.0);
            return std::acos(c) * 180.0 / std::numbers::pi;
        }
    }
    return 0.0;
}

double translation_error(const Vec3& predicted, const Vec3& gt) {
    return (predicted - gt).norm();
}

JudgeDetail judge_instance(const std::optional<RigidPose>& prediction, const InstanceRecord& record,
                           std::span<const Thresholds> thresholds) {
    JudgeDetail detail;
    detail.hit.assign(thresholds.size(), false);
    if (!prediction) {
        detail.failed = true;
        return detail;
    }

    std::vector<RigidPose> candidates;
    if (record.ambiguity_poses.empty()) {
        candidates.push_back(record.gt_pose);
    } else {
        for (const auto& a : record.ambiguity_poses) {
            candidates.push_back(record.gt_pose.compose(a));
        }
    }

    double best_rot = std::numeric_limits<double>::infinity();
    double best_trans = std::numeric_limits<double>::infinity();
    int best_index = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        double rot = rotation_error_deg(prediction->rotation, candidates[i].rotation, record.symmetry);
        double trans = translation_error(prediction->translation, candidates[i].translation);
        if (rot < best_rot || (rot == best_rot && trans < best_trans)) {
            best_rot = rot;
            best_trans = trans;
            best_index = static_cast<int>(i);
        }
    }
    detail.rotation_error_deg = best_rot;
    detail.translation_error_m = best_trans;
    detail.candidate = best_index;
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
        detail.hit[t] =
            best_trans <= thresholds[t].translation_m && best_rot <= thresholds[t].rotation_deg;
    }
    return detail;
}

// ---- class mapping ---------------------------------------------------------------

ClassMapping ClassMapping::defaults() {
    ClassMapping m;
    m.label_to_class_ = {
        {"chair", "seating"},       {"stool", "seating"},     {"bench", "seating"},
        {"armchair", "seating"},
        {"table", "table / cabinet"}, {"cabinet", "table / cabinet"},
        {"commode", "table / cabinet"}, {"shelf", "table / cabinet"}, {"desk", "table / cabinet"},
        {"bed", "bed / sofa"},      {"sofa", "bed / sofa"},   {"couch", "bed / sofa"},
        {"fridge", "appliances"},   {"oven", "appliances"},   {"sink", "appliances"},
        {"toilet", "appliances"},   {"appliance", "appliances"},
        {"cushion", "cushions"},    {"pillow", "cushions"},   {"bean bag", "cushions"},
        {"ottoman", "cushions"},
        {"box", "items"},           {"item", "items"},        {"ball", "items"},
        {"bin", "items"},           {"basket", "items"},
        {"door", "structure"},      {"window", "structure"},  {"column", "structure"},
    };
    return m;
}

ClassMapping ClassMapping::load(const std::filesystem::path& path) {
    ClassMapping m = defaults();
    std::ifstream is(path);
    if (!is) {
        throw std::runtime_error("cannot open class mapping: " + path.string());
    }
    json j = json::parse(is);
    for (const auto& [label, cls] : j.items()) {
        m.label_to_class_[label] = cls.get<std::string>();
    }
    return m;
}

std::string ClassMapping::map_label(const std::string& label) const {
    auto it = label_to_class_.find(label);
    return it == label_to_class_.end() ? "other" : it->second;
}

// ---- benchmark -------------------------------------------------------------------

namespace {

std::optional<double> median(std::vector<double> values) {
    if (values.empty()) {
        return std::nullopt;
    }
    std::sort(values.begin(), values.end());
    std::size_t mid = values.size() / 2;
    if (values.size() % 2 == 1) {
        return values[mid];
    }
    return 0.5 * (values[mid - 1] + values[mid]);
}

}  // namespace

EvalReport benchmark(std::span<const Prediction> predictions,
                     std::span<const ScanPairRecords> ground_truth,
                     std::span<const Thresholds> thresholds, const ClassMapping& mapping) {
    EvalReport report;

    std::set<std::pair<std::string, int>> known;
    for (const auto& pair : ground_truth) {
        for (const auto& rec : pair.instances) {
            known.insert({pair.scan_pair_id, rec.instance_id});
        }
    }
    std::map<std::pair<std::string, int>, const Prediction*> by_key;
    for (const auto& p : predictions) {
        std::pair<std::string, int> key{p.scan_pair_id, p.instance_id};
        if (!known.count(key)) {
            throw EvaluationError("prediction references unknown instance " +
                                  std::to_string(p.instance_id) + " of scan pair '" +
                                  p.scan_pair_id + "'");
        }
        if (by_key.count(key)) {
            report.warnings.push_back("duplicate prediction for instance " +
                                      std::to_string(p.instance_id) + " of '" + p.scan_pair_id +
                                      "', keeping the first row");
            continue;
        }
        by_key[key] = &p;
    }

    std::vector<int> hits(thresholds.size(), 0);
    std::map<std::string, std::vector<int>> class_hits;
    std::map<std::string, int> class_counts;
    std::vector<double> rot_errors, trans_errors;

    for (const auto& pair : ground_truth) {
        for (const auto& rec : pair.instances) {
            ++report.instances;
            std::string cls = mapping.map_label(rec.class_label);
            ++class_counts[cls];
            class_hits.try_emplace(cls, std::vector<int>(thresholds.size(), 0));

            auto it = by_key.find({pair.scan_pair_id, rec.instance_id});
            std::optional<RigidPose> pred;
            if (it == by_key.end()) {
                report.warnings.push_back("no prediction for instance " +
                                          std::to_string(rec.instance_id) + " of '" +
                                          pair.scan_pair_id + "', counted as a miss");
            } else if (it->second->ok) {
                pred = it->second->pose;
                ++report.attempted;
            }

            JudgeDetail detail = judge_instance(pred, rec, thresholds);
            if (detail.failed) {
                ++report.failed;
                continue;
            }
            rot_errors.push_back(detail.rotation_error_deg);
            trans_errors.push_back(detail.translation_error_m);
            for (std::size_t t = 0; t < thresholds.size(); ++t) {
                if (detail.hit[t]) {
                    ++hits[t];
                    ++class_hits[cls][t];
                }
            }
        }
    }

    std::optional<double> mre = median(rot_errors);
    std::optional<double> mte = median(trans_errors);
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
        ThresholdReport tr;
        tr.thresholds = thresholds[t];
        tr.recall_pct = report.instances > 0
                            ? 100.0 * hits[t] / static_cast<double>(report.instances)
                            : 0.0;
        tr.mre_deg = mre;
        tr.mte_m = mte;
        report.per_threshold.push_back(tr);
    }
    for (const auto& [cls, counts] : class_hits) {
        std::vector<double> recalls;
        for (std::size_t t = 0; t < thresholds.size(); ++t) {
            recalls.push_back(100.0 * counts[t] / static_cast<double>(class_counts[cls]));
        }
        report.per_class_recall_pct[cls] = recalls;
    }
    report.per_class_counts = class_counts;
    return report;
}

// ---- keypoint matching metrics ------------------------------------------------------

MatchingReport keypoint_matching_metrics(std::span<const double> positive_distances,
                                         std::span<const double> negative_distances,
                                         double recall_target) {
    if (positive_distances.empty()) {
        throw std::invalid_argument("keypoint_matching_metrics needs at least one positive pair");
    }
    std::vector<double> pos(positive_distances.begin(), positive_distances.end());
    std::vector<double> neg(negative_distances.begin(), negative_distances.end());
    std::sort(pos.begin(), pos.end());
    std::sort(neg.begin(), neg.end());

    std::vector<double> cuts;
    cuts.reserve(pos.size() + neg.size());
    std::merge(pos.begin(), pos.end(), neg.begin(), neg.end(), std::back_inserter(cuts));
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());

    const double total_pos = static_cast<double>(pos.size());
    const double total_neg = static_cast<double>(neg.size());

    auto metrics_at = [&](double threshold) {
        double tp = static_cast<double>(std::upper_bound(pos.begin(), pos.end(), threshold) -
                                        pos.begin());
        double fp = static_cast<double>(std::upper_bound(neg.begin(), neg.end(), threshold) -
                                        neg.begin());
        double fn = total_pos - tp;
        double tn = total_neg - fp;
        MatchingMetrics m;
        m.threshold = threshold;
        m.recall = tp / total_pos;
        m.precision = tp + fp > 0.0 ? tp / (tp + fp) : 1.0;
        m.accuracy = (tp + tn) / (total_pos + total_neg);
        m.fpr = fp + tn > 0.0 ? fp / (fp + tn) : 0.0;
        m.er = (fp + fn) / (total_pos + total_neg);
        m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
                                            : 0.0;
        return m;
    };

    MatchingReport report;
    bool found = false;
    for (double cut : cuts) {
        MatchingMetrics m = metrics_at(cut);
        report.prc.push_back({cut, m.precision, m.recall});
        if (!found && m.recall >= recall_target) {
            report.operating_point = m;
            found = true;
        }
    }
    return report;
}

bool topk_hit(const Eigen::VectorXf& anchor, const Eigen::VectorXf& positive,
              const FeatureMatrix& negatives, int k) {
    if (k < 1) {
        throw std::invalid_argument("k must be >= 1");
    }
    double d_pos = (positive - anchor).norm();
    int rank = 1;
    for (Eigen::Index i = 0; i < negatives.rows(); ++i) {
        if ((negatives.row(i).transpose() - anchor).norm() < d_pos) {
            ++rank;
        }
    }
    return rank <= k;
}

// ---- manifest / report files ----------------------------------------------------------

void save_gt_manifest(std::span<const ScanPairRecords> records, const std::filesystem::path& path,
                      bool hidden) {
    json arr = json::array();
    for (const auto& pair : records) {
        json instances = json::array();
        for (const auto& rec : pair.instances) {
            json ij{{"instance_id", rec.instance_id},
                    {"class_label", rec.class_label},
                    {"symmetry",
                     {{"type", symmetry_type_name(rec.symmetry.type)},
                      {"axis", jsonio::vec3_to_json(rec.symmetry.axis)}}}};
            if (!hidden) {
                ij["gt_pose"] = jsonio::pose_to_json(rec.gt_pose);
                json amb = json::array();
                for (const auto& a : rec.ambiguity_poses) {
                    amb.push_back(jsonio::pose_to_json(a));
                }
                ij["ambiguity_poses"] = amb;
            }
            instances.push_back(ij);
        }
        arr.push_back(json{{"scan_pair_id", pair.scan_pair_id}, {"instances", instances}});
    }
    std::ofstream os(path);
    if (!os) {
        throw std::runtime_error("cannot open for writing: " + path.string());
    }
    os << arr.dump(2) << '\n';
}

std::vector<ScanPairRecords> load_gt_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw std::runtime_error("cannot open: " + path.string());
    }
    std::vector<std::string> violations;
    json arr = json::parse(is);
    std::vector<ScanPairRecords> out;
    for (const auto& pj : arr) {
        ScanPairRecords pair;
        pair.scan_pair_id = pj.value("scan_pair_id", "");
        for (const auto& ij : pj.value("instances", json::array())) {
            InstanceRecord rec;
            rec.instance_id = ij.value("instance_id", 0);
            rec.class_label = ij.value("class_label", "");
            std::string ctx = "'" + pair.scan_pair_id + "' instance " +
                              std::to_string(rec.instance_id);
            if (!ij.contains("gt_pose")) {
                violations.push_back(ctx + ": missing gt_pose (hidden manifests cannot be scored)");
                continue;
            }
            try {
                rec.gt_pose = jsonio::pose_from_json(ij.at("gt_pose"));
                if (!is_rotation_matrix(rec.gt_pose.rotation)) {
                    violations.push_back(ctx + ": gt_pose rotation is not a proper rotation");
                }
                if (ij.contains("symmetry")) {
                    rec.symmetry.type =
                        symmetry_type_from_name(ij.at("symmetry").at("type").get<std::string>());
                    rec.symmetry.axis = jsonio::vec3_from_json(ij.at("symmetry").at("axis"));
                    double n = rec.symmetry.axis.norm();
                    if (std::abs(n - 1.0) > 1e-3) {
                        violations.push_back(ctx + ": symmetry axis is not normalized");
                    } else {
                        rec.symmetry.axis /= n;
                    }
                }
                for (const auto& aj : ij.value("ambiguity_poses", json::array())) {
                    rec.ambiguity_poses.push_back(jsonio::pose_from_json(aj));
                }
            } catch (const std::exception& e) {
                violations.push_back(ctx + ": " + e.what());
                continue;
            }
            bool has_identity = false;
            for (const auto& a : rec.ambiguity_poses) {
                if ((a.rotation - Mat3::Identity()).norm() < 1e-9 && a.translation.norm() < 1e-9) {
                    has_identity = true;
                }
            }
            if (!has_identity) {
                rec.ambiguity_poses.insert(rec.ambiguity_poses.begin(), RigidPose{});
            }
            pair.instances.push_back(rec);
        }
        out.push_back(pair);
    }
    if (!violations.empty()) {
        throw SchemaError(violations);
    }
    return out;
}

std::string report_to_json(const EvalReport& report) {
    json thresholds = json::array();
    for (const auto& tr : report.per_threshold) {
        json tj{{"translation_m", tr.thresholds.translation_m},
                {"rotation_deg", tr.thresholds.rotation_deg},
                {"recall_pct", tr.recall_pct}};
        tj["mre_deg"] = tr.mre_deg ? json(*tr.mre_deg) : json(nullptr);
        tj["mte_m"] = tr.mte_m ? json(*tr.mte_m) : json(nullptr);
        thresholds.push_back(tj);
    }
    json per_class = json::object();
    for (const auto& [cls, recalls] : report.per_class_recall_pct) {
        per_class[cls] = json{{"recall_pct", recalls}, {"instances", report.per_class_counts.at(cls)}};
    }
    json j{{"thresholds", thresholds},
           {"per_class", per_class},
           {"instances", report.instances},
           {"attempted", report.attempted},
           {"failed", report.failed},
           {"warnings", report.warnings}};
    return j.dump(2);
}

namespace {

std::string fmt_num(double value, int precision) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(precision) << value;
    return os.str();
}

std::string threshold_head(const Thresholds& t, const char* prefix) {
    std::ostringstream os;
    os << prefix << " <" << fmt_num(t.translation_m, 1) << "m," << fmt_num(t.rotation_deg, 0)
       << "deg";
    return os.str();
}

}  // namespace

std::string format_report_table(const EvalReport& report) {
    std::ostringstream os;

    os << std::left << std::setw(10) << "";
    for (const auto& tr : report.per_threshold) {
        os << std::right << std::setw(20) << threshold_head(tr.thresholds, "Recall") << std::setw(12)
           << "MRE [deg]" << std::setw(10) << "MTE [m]";
    }
    os << '\n';
    os << std::left << std::setw(10) << "overall";
    for (const auto& tr : report.per_threshold) {
        os << std::right << std::setw(20) << fmt_num(tr.recall_pct, 2) << std::setw(12)
           << (tr.mre_deg ? fmt_num(*tr.mre_deg, 2) : "n/a") << std::setw(10)
           << (tr.mte_m ? fmt_num(*tr.mte_m, 4) : "n/a");
    }
    os << "\n\n";

    if (!report.per_class_recall_pct.empty() && !report.per_threshold.empty()) {
        std::size_t last = report.per_threshold.size() - 1;
        os << std::left << std::setw(18) << "class" << std::right << std::setw(20)
           << threshold_head(report.per_threshold[last].thresholds, "recall") << std::setw(12)
           << "instances" << '\n';
        for (const auto& [cls, recalls] : report.per_class_recall_pct) {
            if (cls == "other") {
                continue;
            }
            os << std::left << std::setw(18) << cls << std::right << std::setw(20)
               << fmt_num(recalls[last], 2) << std::setw(12) << report.per_class_counts.at(cls)
               << '\n';
        }
        os << std::left << std::setw(18) << "avg." << std::right << std::setw(20)
           << fmt_num(report.per_threshold[last].recall_pct, 2) << std::setw(12) << report.instances
           << '\n';
    }
    return os.str();
}

void save_prc_csv(std::span<const PrcPoint> prc, const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) {
        throw std::runtime_error("cannot open for writing: " + path.string());
    }
    os << "threshold,precision,recall\n";
    os << std::setprecision(17);
    for (const auto& p : prc) {
        os << p.threshold << ',' << p.precision << ',' << p.recall << '\n';
    }
}

}  // namespace rio
