#include "bonesound/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "bonesound/error.hpp"

namespace bonesound {

ClassMetrics class_metrics(const ClassCounts& c, long total) {
  if (c.tp < 0 || c.fp < 0 || c.fn < 0 || c.tn < 0 || c.tp + c.fp + c.fn + c.tn != total) {
    throw Error(ErrorCode::InconsistentCounts, "class counts do not sum to the evaluated total");
  }
  ClassMetrics m;
  m.precision = c.tp + c.fp > 0 ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp) : 0.0;
  m.recall = c.tp + c.fn > 0 ? static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn) : 0.0;
  m.f1 = m.precision + m.recall > 0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  m.accuracy = total > 0 ? static_cast<double>(c.tp + c.tn) / static_cast<double>(total) : 0.0;
  return m;
}

MetricsReport metrics(const ConfusionCounts& counts) {
  if (counts.per_class.empty()) throw Error(ErrorCode::InconsistentCounts, "no classes");
  MetricsReport r;
  long hits = 0;
  for (const ClassCounts& c : counts.per_class) {
    const ClassMetrics m = class_metrics(c, counts.total);
    r.per_class.push_back(m);
    r.macro.precision += m.precision;
    r.macro.recall += m.recall;
    r.macro.f1 += m.f1;
    r.macro.accuracy += m.accuracy;
    hits += c.tp;
  }
  const auto n = static_cast<double>(counts.per_class.size());
  r.macro.precision /= n;
  r.macro.recall /= n;
  r.macro.f1 /= n;
  r.macro.accuracy /= n;
  r.overall_accuracy = counts.total > 0 ? static_cast<double>(hits) / static_cast<double>(counts.total) : 0.0;
  return r;
}

ConfusionMatrix::ConfusionMatrix(int n) : n_classes(n), cells(static_cast<std::size_t>(n * (n + 1)), 0) {}

void ConfusionMatrix::add(int truth, int predicted) {
  if (truth < 0 || truth >= n_classes || predicted < -1 || predicted >= n_classes) {
    throw Error(ErrorCode::InvalidArgument, "class index out of range");
  }
  const int col = predicted < 0 ? n_classes : predicted;
  ++cells[static_cast<std::size_t>(truth * (n_classes + 1) + col)];
}

long ConfusionMatrix::at(int truth, int predicted) const {
  const int col = predicted < 0 ? n_classes : predicted;
  return cells[static_cast<std::size_t>(truth * (n_classes + 1) + col)];
}

long ConfusionMatrix::total() const { return std::accumulate(cells.begin(), cells.end(), 0L); }

ConfusionCounts ConfusionMatrix::counts() const {
  ConfusionCounts out;
  out.total = total();
  for (int c = 0; c < n_classes; ++c) {
    ClassCounts k;
    k.tp = at(c, c);
    for (int p = -1; p < n_classes; ++p) {
      if (p != c) k.fn += at(c, p);
    }
    for (int t = 0; t < n_classes; ++t) {
      if (t != c) k.fp += at(t, c);
    }
    k.tn = out.total - k.tp - k.fn - k.fp;
    out.per_class.push_back(k);
  }
  return out;
}

RocResult roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw Error(ErrorCode::ShapeMismatch, "scores and labels differ in length");
  const auto pos = static_cast<double>(std::count_if(labels.begin(), labels.end(), [](int l) { return l != 0; }));
  const double neg = static_cast<double>(labels.size()) - pos;
  if (pos == 0 || neg == 0) throw Error(ErrorCode::SingleClassLabels, "ROC needs both positive and negative labels");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  RocResult r;
  r.points.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double s = scores[order[i]];
    while (i < order.size() && scores[order[i]] == s) {
      (labels[order[i]] != 0 ? tp : fp) += 1.0;
      ++i;
    }
    const RocPoint prev = r.points.back();
    const RocPoint next{fp / neg, tp / pos, s};
    r.auc += (next.fpr - prev.fpr) * 0.5 * (next.tpr + prev.tpr);
    r.points.push_back(next);
  }
  return r;
}

void NmsConfig::validate() const {
  if (!(0.0 < secondary_epsilon && secondary_epsilon <= epsilon && epsilon <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "need 0 < secondary_epsilon <= epsilon <= 1");
  }
  if (!(suppression_window_s >= 0.0)) throw Error(ErrorCode::InvalidArgument, "suppression window must be >= 0");
}

namespace {

// Window centers are sums of 0.05 s steps; this absorbs their rounding so a
// detection exactly one window away is treated as inside it.
constexpr double kTimeSlack = 1e-9;

bool before(const Detection& a, const Detection& b) {
  if (a.p != b.p) return a.p > b.p;
  if (a.t != b.t) return a.t < b.t;
  return index_of(a.gesture) < index_of(b.gesture);
}

}  // namespace

std::vector<Detection> nms(std::span<const Detection> detections, double epsilon, double window_s) {
  std::vector<Detection> cand;
  for (const Detection& d : detections) {
    if (d.p >= epsilon) cand.push_back(d);
  }
  std::sort(cand.begin(), cand.end(), before);
  std::vector<bool> alive(cand.size(), true);
  std::vector<Detection> kept;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    if (!alive[i]) continue;
    kept.push_back(cand[i]);
    for (std::size_t j = i + 1; j < cand.size(); ++j) {
      if (alive[j] && std::abs(cand[j].t - cand[i].t) <= window_s + kTimeSlack) alive[j] = false;
    }
  }
  std::sort(kept.begin(), kept.end(), [](const Detection& a, const Detection& b) {
    return a.t != b.t ? a.t < b.t : index_of(a.gesture) < index_of(b.gesture);
  });
  return kept;
}

std::vector<Detection> nms(std::span<const Detection> detections, const NmsConfig& cfg) {
  cfg.validate();
  return nms(detections, cfg.epsilon, cfg.suppression_window_s);
}

std::vector<Detection> window_detections(std::span<const GesturePrediction> predictions, double segment_t0,
                                         double window_s, double step_s) {
  std::vector<Detection> out;
  out.reserve(predictions.size());
  for (std::size_t k = 0; k < predictions.size(); ++k) {
    const auto& p = predictions[k];
    out.push_back({segment_t0 + static_cast<double>(k) * step_s + 0.5 * window_s, p.argmax_class, p.max_prob, p.probs});
  }
  return out;
}

ClipVerdict classify_clip(const Model& model, const AudioClip& raw, const Frontend& frontend, const NmsConfig& cfg) {
  const auto frames = frontend.windows(raw);
  std::vector<Eigen::MatrixXd> inputs;
  inputs.reserve(frames.size());
  for (const auto& f : frames) inputs.push_back(f.values);
  const auto preds = predict_batch(model, std::span<const Eigen::MatrixXd>(inputs));

  ClipVerdict v;
  v.max_scores.fill(0.0);
  for (const auto& p : preds) {
    for (int c = 0; c < kNumGestures; ++c) v.max_scores[c] = std::max(v.max_scores[c], p.probs[c]);
  }
  const double window_s = frontend.extractor.config().window_s;
  const auto det = window_detections(preds, 0.0, window_s, kSegmentStep_s);
  const auto events = nms(std::span<const Detection>(det), cfg);
  if (!events.empty()) {
    const auto best = std::min_element(events.begin(), events.end(), before);
    v.predicted = index_of(best->gesture);
    v.p = best->p;
  }
  return v;
}

EvalResult evaluate_model(const Model& model, const ClipSource& clips, const EvalConfig& cfg,
                          const Frontend& frontend) {
  if (clips.size() == 0) throw Error(ErrorCode::EmptySplit, "no clips to evaluate");
  cfg.nms.validate();
  EvalResult r;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    ClipVerdict v = classify_clip(model, clips.clip(i), frontend, cfg.nms);
    v.id = clips.id(i);
    v.truth = clips.label(i);
    r.confusion.add(index_of(v.truth), v.predicted);
    r.clips.push_back(std::move(v));
  }
  r.counts = r.confusion.counts();
  r.report = metrics(r.counts);
  for (int c = 0; c < kNumGestures; ++c) {
    std::vector<double> s;
    std::vector<int> l;
    for (const auto& v : r.clips) {
      s.push_back(v.max_scores[c]);
      l.push_back(index_of(v.truth) == c ? 1 : 0);
    }
    try {
      r.roc.push_back(roc_auc(s, l));
    } catch (const Error&) {
      r.roc.push_back({});
    }
  }
  return r;
}

EvalResult evaluate_model(const Model& model, const DatasetManifest& manifest, const std::filesystem::path& base_dir,
                          Split split, const EvalConfig& cfg) {
  const ManifestClipSource clips(manifest, base_dir, split);
  if (clips.size() == 0) {
    throw Error(ErrorCode::EmptySplit, "manifest has no " + std::string(split_name(split)) + " records");
  }
  return evaluate_model(model, clips, cfg);
}

std::string format_eval(const EvalResult& r) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-10s %10s %10s %10s %10s %8s\n", "Gesture", "Precision", "Recall", "F1",
                "Accuracy", "AUC");
  os << line;
  for (int c = 0; c < kNumGestures; ++c) {
    const auto& m = r.report.per_class[static_cast<std::size_t>(c)];
    const auto& roc = r.roc[static_cast<std::size_t>(c)];
    std::snprintf(line, sizeof line, "%-10s %10.4f %10.4f %10.4f %10.4f %8s\n",
                  std::string(gesture_name(gesture_at(c))).c_str(), m.precision, m.recall, m.f1, m.accuracy,
                  roc.points.empty() ? "-" : std::to_string(roc.auc).substr(0, 6).c_str());
    os << line;
  }
  const auto& a = r.report.macro;
  std::snprintf(line, sizeof line, "%-10s %10.4f %10.4f %10.4f %10.4f\n", "Average", a.precision, a.recall, a.f1,
                a.accuracy);
  os << line;
  std::snprintf(line, sizeof line, "overall accuracy %.4f over %ld clips\n\n", r.report.overall_accuracy,
                r.confusion.total());
  os << line;
  os << "confusion (rows true, columns predicted):\n" << std::string(10, ' ');
  for (int c = 0; c < kNumGestures; ++c) {
    std::snprintf(line, sizeof line, " %9s", std::string(gesture_name(gesture_at(c))).c_str());
    os << line;
  }
  os << "      none\n";
  for (int t = 0; t < kNumGestures; ++t) {
    std::snprintf(line, sizeof line, "%-10s", std::string(gesture_name(gesture_at(t))).c_str());
    os << line;
    for (int p = 0; p <= kNumGestures; ++p) {
      std::snprintf(line, sizeof line, " %9ld", r.confusion.at(t, p == kNumGestures ? -1 : p));
      os << line;
    }
    os << "\n";
  }
  return os.str();
}

void write_metrics_csv(const MetricsReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << "gesture,precision,recall,f1,accuracy\n";
  auto row = [&](const std::string& name, const ClassMetrics& m) {
    out << name << ',' << m.precision << ',' << m.recall << ',' << m.f1 << ',' << m.accuracy << '\n';
  };
  for (std::size_t c = 0; c < report.per_class.size(); ++c) {
    row(std::string(gesture_name(gesture_at(static_cast<int>(c)))), report.per_class[c]);
  }
  row("average", report.macro);
}

void write_roc_csv(const RocResult& roc, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << "fpr,tpr,threshold\n";
  for (const auto& p : roc.points) out << p.fpr << ',' << p.tpr << ',' << p.threshold << '\n';
}

std::vector<SweepRow> ratio_sweep(const ClipSource& train, const ClipSource& val, const ClipSource& test,
                                  std::span<const NoiseClip> noise, const SweepConfig& cfg) {
  if (cfg.ratios.empty()) throw Error(ErrorCode::InvalidArgument, "no ratios given");
  std::set<int> seen;
  for (int r : cfg.ratios) {
    if (r < 1) throw Error(ErrorCode::InvalidArgument, "ratios must be >= 1");
    if (!seen.insert(r).second) throw Error(ErrorCode::DuplicateRatio, "ratio " + std::to_string(r) + " repeated");
  }
  if (test.size() == 0) throw Error(ErrorCode::EmptySplit, "empty test set");
  if (cfg.min_epochs < 1 || !(cfg.epoch_budget > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "epoch budget and minimum epochs must be positive");
  }

  AugmentConfig noisy_cfg{cfg.noisy_test_ratio, cfg.snr_lo_db, cfg.snr_hi_db, derive_seed(cfg.seed, 3)};
  const AugmentedClipSource noisy_test(test, noise, noisy_cfg);

  const WindowPlacement placement{cfg.window_jitter_s, derive_seed(cfg.seed, 11)};
  const InMemorySource clean_train = materialize(ClipFeatureSource(train, placement));
  const InMemorySource clean_val = materialize(ClipFeatureSource(val, placement));

  std::vector<SweepRow> rows;
  for (int ratio : cfg.ratios) {
    const AugmentedClipSource aug_train(train, noise, {ratio, cfg.snr_lo_db, cfg.snr_hi_db, derive_seed(cfg.seed, 1)});
    const AugmentedClipSource aug_val(val, noise, {ratio, cfg.snr_lo_db, cfg.snr_hi_db, derive_seed(cfg.seed, 2)});
    const ClipFeatureSource lazy_train(aug_train, placement), lazy_val(aug_val, placement);
    // Up to a few ten thousand samples fit comfortably in memory; beyond
    // that features are rendered per epoch.
    constexpr std::size_t kMaterializeLimit = 20000;
    InMemorySource mat_train, mat_val;
    const SampleSource* tr = &lazy_train;
    const SampleSource* va = &lazy_val;
    if (aug_train.size() <= kMaterializeLimit) {
      mat_train = materialize(lazy_train);
      tr = &mat_train;
    }
    if (aug_val.size() <= kMaterializeLimit) {
      mat_val = materialize(lazy_val);
      va = &mat_val;
    }
    const ConcatSource train_set({&clean_train, tr});
    const ConcatSource val_set({&clean_val, va});

    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    tc.verbose = cfg.verbose;
    const int budget = static_cast<int>(std::lround(cfg.epoch_budget / (1.0 + ratio)));
    tc.max_epochs = std::min(cfg.train.max_epochs, std::max(cfg.min_epochs, budget));

    auto m = init_model<float>(cfg.seed);
    bonesound::train(m, train_set, val_set, tc);
    const Model model = m.cast<double>();

    const EvalResult clean = evaluate_model(model, test, cfg.eval);
    const EvalResult noisy = evaluate_model(model, noisy_test, cfg.eval);
    rows.push_back({ratio, "clean", clean.report, tc.max_epochs});
    rows.push_back({ratio, "noisy", noisy.report, tc.max_epochs});
    if (cfg.verbose) {
      std::fprintf(stderr, "ratio %d: clean F1 %.4f acc %.4f, noisy F1 %.4f acc %.4f\n", ratio, clean.report.macro.f1,
                   clean.report.overall_accuracy, noisy.report.macro.f1, noisy.report.overall_accuracy);
    }
  }
  return rows;
}

void write_sweep_csv(std::span<const SweepRow> rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << "ratio,condition,precision,recall,f1,accuracy,overall_accuracy,epochs\n";
  for (const auto& r : rows) {
    out << r.ratio << ',' << r.condition << ',' << r.report.macro.precision << ',' << r.report.macro.recall << ','
        << r.report.macro.f1 << ',' << r.report.macro.accuracy << ',' << r.report.overall_accuracy << ','
        << r.epochs << '\n';
  }
}

}  // namespace bonesound
