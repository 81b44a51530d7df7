#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "detkit/data.hpp"
#include "detkit/model/detector.hpp"

namespace detkit::evalbench {

DETKIT_DEFINE_ERROR(BadArgument);
DETKIT_DEFINE_ERROR(UnregisteredLayer);
DETKIT_DEFINE_ERROR(ReportParseError);

// ---------------------------------------------------------------------------
// COCO-style box AP

struct ImageDetections {
  int64_t image_id = 0;
  Tensor boxes{Shape{0, 4}};  // xyxy absolute
  std::vector<double> scores;
  std::vector<int64_t> labels;
};

struct ImageGroundTruth {
  int64_t image_id = 0;
  Tensor boxes{Shape{0, 4}};  // xyxy absolute
  std::vector<int64_t> labels;
  std::vector<uint8_t> crowd;
};

std::vector<double> default_iou_thresholds();  // 0.50:0.05:0.95

struct ApOptions {
  std::vector<double> iou_thresholds = default_iou_thresholds();
  int max_dets = 100;
  // Area bands in squared pixels of the evaluated coordinates.
  double small_area = 32.0 * 32.0;
  double large_area = 96.0 * 96.0;
};

// Each metric is in [0, 1], or -1 when undefined (no ground truth in that
// area band for any class).
struct ApMetrics {
  double ap = -1, ap50 = -1, ap75 = -1, ap_small = -1, ap_medium = -1, ap_large = -1;
  std::vector<std::string> skipped_classes;  // classes without ground truth
  std::vector<double> as_vector() const { return {ap, ap50, ap75, ap_small, ap_medium, ap_large}; }
};

ApMetrics coco_ap_evaluate(const std::vector<ImageDetections>& predictions,
                           const std::vector<ImageGroundTruth>& ground_truth, int64_t num_classes,
                           const ApOptions& opts = {});

ImageGroundTruth ground_truth_of(const data::Sample& sample);
ImageDetections detections_of(int64_t image_id, const model::Detections& det);

// COCO results file: [{image_id, category_id, bbox xywh, score}].
std::string results_json(const std::vector<ImageDetections>& predictions, const std::vector<int64_t>& category_ids);

// ---------------------------------------------------------------------------
// Model analysis

struct ParamCount {
  int64_t total = 0;
  int64_t trainable = 0;
};
ParamCount count_parameters(nn::Module& model);

// Multiply-accumulate units per op kind. Each recorded op contributes
// weight * (MACs it reports); kinds without a rule raise UnregisteredLayer.
class FlopRules {
 public:
  static FlopRules defaults();
  void set(const std::string& kind, double weight) { weights_[kind] = weight; }
  bool has(const std::string& kind) const { return weights_.count(kind) > 0; }
  double weight(const std::string& kind) const;

 private:
  std::map<std::string, double> weights_;
};

struct FlopStats {
  double mean = 0;  // MACs
  double std = 0;   // population
  std::vector<double> per_input;
  std::map<std::string, double> by_kind;  // summed over inputs
  std::string gflops_cell() const;
};

FlopStats estimate_flops(const std::function<void(size_t)>& run_input, size_t num_inputs,
                         const FlopRules& rules = FlopRules::defaults());
// Eval-mode forward per image [3 x H x W].
FlopStats estimate_flops(model::Detector& model, const std::vector<Tensor>& images,
                         const FlopRules& rules = FlopRules::defaults());

struct FpsStats {
  double fps = 0;
  double mean_ms = 0, median_ms = 0, std_ms = 0;
  int timed_iters = 0;
};
// Runs `once` warmup_iters times untimed, then timed_iters times. Must run
// without concurrent load. Errors: BadArgument when timed_iters < 10.
FpsStats measure_fps(const std::function<void()>& once, int warmup_iters = 50, int timed_iters = 200);
FpsStats measure_fps(model::Detector& model, int64_t height, int64_t width, int warmup_iters = 50,
                     int timed_iters = 200);

// Draws boxes with class names and scores >= score_floor. Errors: WriteError.
void visualize_predictions(const Tensor& image_hwc, const model::Detections& det,
                           const std::vector<std::string>& class_names, double score_floor,
                           const std::filesystem::path& out_path);

// ---------------------------------------------------------------------------
// Reports

struct BenchmarkRecord {
  std::string model_name;
  std::optional<double> epochs;
  std::optional<ApMetrics> ap;
  std::optional<int64_t> params;
  std::optional<double> gflops_mean;  // 1e9 MACs
  std::optional<double> gflops_std;
  std::optional<double> fps;
  std::optional<int64_t> peak_memory;  // bytes
  std::optional<double> wall_hours;
  std::string error;  // non-empty for rows that failed
};

enum class ReportFormat { kMarkdown, kCsv };

const std::vector<std::string>& report_columns();
std::string emit_report(const std::vector<BenchmarkRecord>& records, ReportFormat format);
// Inverse of the CSV form. Errors: ReportParseError.
std::vector<BenchmarkRecord> parse_report_csv(const std::string& text);
bool same_record(const BenchmarkRecord& a, const BenchmarkRecord& b);

}  // namespace detkit::evalbench
