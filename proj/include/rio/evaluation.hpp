#pragma once

#include "rio/core.hpp"
#include "rio/registration.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rio {

// Rotational symmetry about a canonical axis in the object frame.
struct SymmetryClass {
    enum class Type { none, c2, c4, cinf };
    Type type = Type::none;
    Vec3 axis = Vec3::UnitZ();
};

std::string symmetry_type_name(SymmetryClass::Type type);
SymmetryClass::Type symmetry_type_from_name(const std::string& name);

// One changed object instance: the unit of benchmark evaluation.
struct InstanceRecord {
    int instance_id = 0;
    std::string class_label;
    RigidPose gt_pose;
    SymmetryClass symmetry;
    std::vector<RigidPose> ambiguity_poses;  // always includes the identity
};

struct ScanPairRecords {
    std::string scan_pair_id;
    std::vector<InstanceRecord> instances;
};

struct Thresholds {
    double translation_m = 0.1;
    double rotation_deg = 10.0;
};

inline constexpr Thresholds kBenchmarkThresholds[2] = {{0.1, 10.0}, {0.2, 20.0}};

// Axis-angle magnitude of predicted⁻¹·gt in degrees, minimized over the
// symmetry group. For C∞ the angle between the two mapped canonical axes.
double rotation_error_deg(const Mat3& predicted, const Mat3& gt, const SymmetryClass& symmetry);

double translation_error(const Vec3& predicted, const Vec3& gt);

struct JudgeDetail {
    bool failed = false;
    double rotation_error_deg = 0.0;
    double translation_error_m = 0.0;
    int candidate = 0;              // index into ambiguity_poses
    std::vector<bool> hit;          // one entry per threshold pair
};

// Scores a prediction against every candidate gt_pose ∘ a. The candidate
// minimizing (rotation error, then translation error) is the one judged.
JudgeDetail judge_instance(const std::optional<RigidPose>& prediction, const InstanceRecord& record,
                           std::span<const Thresholds> thresholds);

struct ThresholdReport {
    Thresholds thresholds;
    double recall_pct = 0.0;
    std::optional<double> mre_deg;  // null when no prediction succeeded
    std::optional<double> mte_m;
};

struct EvalReport {
    std::vector<ThresholdReport> per_threshold;
    // class -> recall % per threshold, "other" excluded from the table but
    // included in the overall numbers
    std::map<std::string, std::vector<double>> per_class_recall_pct;
    std::map<std::string, int> per_class_counts;
    int instances = 0;
    int attempted = 0;
    int failed = 0;
    std::vector<std::string> warnings;
};

// Maps raw instance labels onto the report's class grouping.
class ClassMapping {
  public:
    static ClassMapping defaults();
    static ClassMapping load(const std::filesystem::path& path);  // {"label": "class"} overrides
    std::string map_label(const std::string& label) const;

  private:
    std::map<std::string, std::string> label_to_class_;
};

EvalReport benchmark(std::span<const Prediction> predictions,
                     std::span<const ScanPairRecords> ground_truth,
                     std::span<const Thresholds> thresholds,
                     const ClassMapping& mapping = ClassMapping::defaults());

struct MatchingMetrics {
    double threshold = 0.0;
    double recall = 0.0;
    double precision = 0.0;
    double accuracy = 0.0;
    double fpr = 0.0;
    double er = 0.0;
    double f1 = 0.0;
};

struct PrcPoint {
    double threshold = 0.0;
    double precision = 0.0;
    double recall = 0.0;
};

struct MatchingReport {
    MatchingMetrics operating_point;  // smallest threshold with recall >= target
    std::vector<PrcPoint> prc;        // one point per distinct distance
};

MatchingReport keypoint_matching_metrics(std::span<const double> positive_distances,
                                         std::span<const double> negative_distances,
                                         double recall_target = 0.95);

// Ranks positive + negatives by L2 distance to the anchor. Hit iff the
// positive places within the top k.
bool topk_hit(const Eigen::VectorXf& anchor, const Eigen::VectorXf& positive,
              const FeatureMatrix& negatives, int k);

// Ground-truth manifest + report files
void save_gt_manifest(std::span<const ScanPairRecords> records, const std::filesystem::path& path,
                      bool hidden = false);
std::vector<ScanPairRecords> load_gt_manifest(const std::filesystem::path& path);

std::string report_to_json(const EvalReport& report);
std::string format_report_table(const EvalReport& report);
void save_prc_csv(std::span<const PrcPoint> prc, const std::filesystem::path& path);

}  // namespace rio
