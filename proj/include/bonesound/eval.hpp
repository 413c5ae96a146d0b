#pragma once

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "bonesound/augment.hpp"
#include "bonesound/dataset.hpp"
#include "bonesound/frontend.hpp"
#include "bonesound/model.hpp"

namespace bonesound {

// ---------------------------------------------------------------------------
// Metrics

struct ClassCounts {
  long tp = 0, fp = 0, fn = 0, tn = 0;
  bool operator==(const ClassCounts&) const = default;
};

/// One-vs-rest counts per class over `total` evaluated items.
struct ConfusionCounts {
  std::vector<ClassCounts> per_class;
  long total = 0;
};

struct ClassMetrics {
  double precision = 0, recall = 0, f1 = 0, accuracy = 0;
};

struct MetricsReport {
  std::vector<ClassMetrics> per_class;
  ClassMetrics macro;
  /// Fraction of items whose predicted class equals the true class.
  double overall_accuracy = 0;
};

/// Undefined precision or recall (0/0) is reported as 0, and so is F1 when
/// P + R = 0. Throws Error{InconsistentCounts} unless every class sums to
/// total.
ClassMetrics class_metrics(const ClassCounts& c, long total);
MetricsReport metrics(const ConfusionCounts& counts);

/// Rows = true class, columns = predicted class plus a final "none" column
/// for items without a verdict.
struct ConfusionMatrix {
  int n_classes = kNumGestures;
  std::vector<long> cells;  // n_classes x (n_classes + 1), row-major

  explicit ConfusionMatrix(int n = kNumGestures);
  void add(int truth, int predicted);  // predicted = -1 for none
  long at(int truth, int predicted) const;
  long total() const;
  ConfusionCounts counts() const;
};

// ---------------------------------------------------------------------------
// ROC

struct RocPoint {
  double fpr = 0, tpr = 0, threshold = 0;
};

struct RocResult {
  std::vector<RocPoint> points;  // starts at (0, 0, +inf), ends at (1, 1)
  double auc = 0;
};

/// Threshold sweep over the distinct scores (descending); equal scores
/// move together, giving a diagonal step. Throws Error{SingleClassLabels}.
RocResult roc_auc(std::span<const double> scores, std::span<const int> labels);

// ---------------------------------------------------------------------------
// Non-maximum suppression

struct NmsConfig {
  double epsilon = 0.7;
  double secondary_epsilon = 0.6;
  double suppression_window_s = 0.5;

  void validate() const;
};

struct Detection {
  double t = 0;
  Gesture gesture = Gesture::Pinch;
  double p = 0;
  std::array<double, kNumGestures> probs{};
};

/// Drops p < epsilon, then repeatedly keeps the best remaining detection
/// (highest p, then earliest t, then lowest class) and removes every
/// detection of any class with |dt| <= window. Output is time-ordered.
std::vector<Detection> nms(std::span<const Detection> detections, const NmsConfig& cfg);
std::vector<Detection> nms(std::span<const Detection> detections, double epsilon, double window_s);

/// Per-window detections of a candidate segment; t is the window center.
std::vector<Detection> window_detections(std::span<const GesturePrediction> predictions, double segment_t0,
                                         double window_s = 0.5, double step_s = kSegmentStep_s);

// ---------------------------------------------------------------------------
// Clip-level evaluation

struct ClipVerdict {
  std::string id;
  Gesture truth = Gesture::Pinch;
  int predicted = -1;  // -1: no surviving event
  double p = 0;
  std::array<double, kNumGestures> max_scores{};  // per-class max over windows
};

struct EvalConfig {
  NmsConfig nms{};
  int batch_size = 33;
};

struct EvalResult {
  std::vector<ClipVerdict> clips;
  ConfusionMatrix confusion;
  ConfusionCounts counts;
  MetricsReport report;
  std::vector<RocResult> roc;  // per class; empty entry when undefined
};

ClipVerdict classify_clip(const Model& model, const AudioClip& raw, const Frontend& frontend, const NmsConfig& nms);

/// Each clip: 11 windows -> predictions -> NMS -> the top surviving event is
/// the verdict. Throws Error{EmptySplit} for an empty source.
EvalResult evaluate_model(const Model& model, const ClipSource& clips, const EvalConfig& cfg = {},
                          const Frontend& frontend = default_frontend());
EvalResult evaluate_model(const Model& model, const DatasetManifest& manifest, const std::filesystem::path& base_dir,
                          Split split = Split::Test, const EvalConfig& cfg = {});

/// Per-class table plus the macro row, confusion matrix, and AUCs.
std::string format_eval(const EvalResult& result);
void write_metrics_csv(const MetricsReport& report, const std::filesystem::path& path);
void write_roc_csv(const RocResult& roc, const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Augmentation ratio sweep

struct SweepConfig {
  std::vector<int> ratios{1, 10, 100};
  TrainConfig train{};
  /// Training epochs for ratio r: max(min_epochs, round(budget / (1 + r)))
  /// capped by train.max_epochs, so every model sees about the same number
  /// of samples. The default, 165 clean-set passes, is 15 epochs at ratio 10
  /// and hits the 50-epoch cap at ratio 1.
  double epoch_budget = 165.0;
  int min_epochs = 1;
  /// Random offset of each training window around the clip center, as in
  /// single-model training; clip evaluation scores all 11 offsets.
  double window_jitter_s = 0.2;
  double snr_lo_db = 0.0, snr_hi_db = 20.0;
  int noisy_test_ratio = 10;
  std::uint64_t seed = 0;
  EvalConfig eval{};
  bool verbose = false;
};

struct SweepRow {
  int ratio = 0;
  std::string condition;  // "clean" or "noisy"
  MetricsReport report;
  int epochs = 0;
};

/// One model per ratio trained on clean + ratio-augmented train data (val
/// likewise), all from the same initial seed; each is tested on the clean
/// test clips and on a fixed noisy copy of them.
/// Throws Error{DuplicateRatio} or Error{InvalidArgument}.
std::vector<SweepRow> ratio_sweep(const ClipSource& train, const ClipSource& val, const ClipSource& test,
                                  std::span<const NoiseClip> noise, const SweepConfig& cfg);
void write_sweep_csv(std::span<const SweepRow> rows, const std::filesystem::path& path);

}  // namespace bonesound
