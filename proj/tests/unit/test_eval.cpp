#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>

#include "bonesound/error.hpp"
#include "bonesound/eval.hpp"
#include "support/oracles.hpp"
#include "support/temp_dir.hpp"

using namespace bonesound;
using bonesound::testing::nms_oracle;
using bonesound::testing::pairwise_auc;
using bonesound::testing_support::TempDir;

namespace {

ErrorCode code_of(auto&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::Io;
}

ConfusionCounts single(ClassCounts c) {
  return ConfusionCounts{{c}, c.tp + c.fp + c.fn + c.tn};
}

// A model that ignores its input and always favors class c.
Model constant_model(int c, double logit) {
  Model m;
  m.params.setZero();
  m.dense_bias(1)[c] = logit;  // output layer
  return m;
}

std::vector<LabeledClip> few_clips(int per_class, std::uint64_t seed) {
  std::vector<LabeledClip> out;
  for (Gesture g : kAllGestures) {
    for (int i = 0; i < per_class; ++i) {
      SynthGestureSpec spec;
      spec.label = g;
      out.push_back(synth_gesture(spec, derive_seed(seed, out.size())));
    }
  }
  return out;
}

}  // namespace

TEST(Metrics, HandExample) {
  const ClassMetrics m = class_metrics({9, 1, 3, 87}, 100);
  EXPECT_DOUBLE_EQ(m.precision, 0.9);
  EXPECT_DOUBLE_EQ(m.recall, 0.75);
  EXPECT_NEAR(m.f1, 0.8182, 5e-5);
  EXPECT_DOUBLE_EQ(m.accuracy, 0.96);
}

TEST(Metrics, PerfectAndDegenerate) {
  const ClassMetrics p = class_metrics({10, 0, 0, 40}, 50);
  EXPECT_EQ(p.precision, 1.0);
  EXPECT_EQ(p.recall, 1.0);
  EXPECT_EQ(p.f1, 1.0);
  EXPECT_EQ(p.accuracy, 1.0);
  const ClassMetrics z = class_metrics({0, 0, 5, 0}, 5);
  EXPECT_EQ(z.precision, 0.0);
  EXPECT_EQ(z.recall, 0.0);
  EXPECT_EQ(z.f1, 0.0);
}

TEST(Metrics, InconsistentCounts) {
  EXPECT_EQ(code_of([] { class_metrics({1, 1, 1, 1}, 5); }), ErrorCode::InconsistentCounts);
  EXPECT_EQ(code_of([] { class_metrics({-1, 1, 1, 4}, 5); }), ErrorCode::InconsistentCounts);
  ConfusionCounts c{{{1, 0, 0, 3}, {1, 0, 0, 2}}, 4};
  EXPECT_EQ(code_of([&] { metrics(c); }), ErrorCode::InconsistentCounts);
  EXPECT_EQ(code_of([] { metrics(ConfusionCounts{}); }), ErrorCode::InconsistentCounts);
}

TEST(Metrics, AgreesWithNaiveFormulasOnRandomTables) {
  std::mt19937 rng(1);
  std::uniform_int_distribution<long> u(0, 30);
  for (int trial = 0; trial < 1000; ++trial) {
    const long tp = u(rng) * (trial % 7 != 0), fp = u(rng) * (trial % 5 != 0), fn = u(rng) * (trial % 3 != 0);
    const long tn = u(rng);
    const long total = tp + fp + fn + tn;
    if (total == 0) continue;
    const ClassMetrics m = metrics(single({tp, fp, fn, tn})).per_class[0];
    const auto [P, R, F, A] = bonesound::testing::naive_metrics(tp, fp, fn, tn);
    EXPECT_NEAR(m.precision, P, 1e-12);
    EXPECT_NEAR(m.recall, R, 1e-12);
    EXPECT_NEAR(m.f1, F, 1e-12);
    EXPECT_NEAR(m.accuracy, A, 1e-12);
    for (double v : {m.precision, m.recall, m.f1, m.accuracy}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(Confusion, CountsMatchPairOracle) {
  std::mt19937 rng(2);
  std::uniform_int_distribution<int> t(0, 4), p(-1, 4);
  std::vector<std::pair<int, int>> pairs;
  ConfusionMatrix cm;
  for (int i = 0; i < 500; ++i) {
    pairs.emplace_back(t(rng), p(rng));
    cm.add(pairs.back().first, pairs.back().second);
  }
  EXPECT_EQ(cm.total(), 500);
  const ConfusionCounts cc = cm.counts();
  for (int c = 0; c < 5; ++c) {
    ClassCounts k;
    for (auto [tr, pr] : pairs) {
      if (tr == c && pr == c) ++k.tp;
      else if (tr != c && pr == c) ++k.fp;
      else if (tr == c) ++k.fn;
      else ++k.tn;
    }
    EXPECT_EQ(cc.per_class[c], k) << c;
  }
  long hits = 0;
  for (auto [tr, pr] : pairs) hits += tr == pr;
  EXPECT_DOUBLE_EQ(metrics(cc).overall_accuracy, hits / 500.0);
  EXPECT_EQ(code_of([&] { cm.add(5, 0); }), ErrorCode::InvalidArgument);
  EXPECT_EQ(code_of([&] { cm.add(0, -2); }), ErrorCode::InvalidArgument);
}

TEST(Confusion, RelabelingPermutesMetrics) {
  std::mt19937 rng(3);
  std::uniform_int_distribution<int> t(0, 4), p(-1, 4);
  const std::array<int, 5> perm{3, 0, 4, 1, 2};
  ConfusionMatrix a, b;
  for (int i = 0; i < 300; ++i) {
    const int tr = t(rng), pr = p(rng);
    a.add(tr, pr);
    b.add(perm[tr], pr < 0 ? -1 : perm[pr]);
  }
  const MetricsReport ra = metrics(a.counts()), rb = metrics(b.counts());
  for (int c = 0; c < 5; ++c) {
    EXPECT_DOUBLE_EQ(ra.per_class[c].f1, rb.per_class[perm[c]].f1);
    EXPECT_DOUBLE_EQ(ra.per_class[c].precision, rb.per_class[perm[c]].precision);
  }
  EXPECT_NEAR(ra.macro.f1, rb.macro.f1, 1e-12);
  EXPECT_NEAR(ra.macro.recall, rb.macro.recall, 1e-12);
  EXPECT_DOUBLE_EQ(ra.overall_accuracy, rb.overall_accuracy);
}

TEST(Roc, HandExamples) {
  const std::vector<double> s{0.9, 0.8, 0.4, 0.3};
  EXPECT_DOUBLE_EQ(roc_auc(s, std::vector<int>{1, 1, 0, 0}).auc, 1.0);
  // middle labels swapped: one of the four positive/negative pairs inverts
  EXPECT_DOUBLE_EQ(roc_auc(s, std::vector<int>{1, 0, 1, 0}).auc, 0.75);
  // two of four inverted
  EXPECT_DOUBLE_EQ(roc_auc(s, std::vector<int>{0, 1, 1, 0}).auc, 0.5);
  EXPECT_DOUBLE_EQ(roc_auc(s, std::vector<int>{0, 0, 1, 1}).auc, 0.0);
}

TEST(Roc, EndpointsAndMonotone) {
  std::mt19937 rng(4);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> s;
  std::vector<int> l;
  for (int i = 0; i < 200; ++i) {
    l.push_back(i % 3 == 0);
    s.push_back(std::round(u(rng) * 20) / 20);  // plenty of ties
  }
  const RocResult r = roc_auc(s, l);
  EXPECT_EQ(r.points.front().fpr, 0.0);
  EXPECT_EQ(r.points.front().tpr, 0.0);
  EXPECT_TRUE(std::isinf(r.points.front().threshold));
  EXPECT_DOUBLE_EQ(r.points.back().fpr, 1.0);
  EXPECT_DOUBLE_EQ(r.points.back().tpr, 1.0);
  for (std::size_t i = 1; i < r.points.size(); ++i) {
    EXPECT_GE(r.points[i].fpr, r.points[i - 1].fpr);
    EXPECT_GE(r.points[i].tpr, r.points[i - 1].tpr);
    EXPECT_LT(r.points[i].threshold, r.points[i - 1].threshold);
  }
}

TEST(Roc, MatchesPairwiseOracleWithTies) {
  std::mt19937 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::uniform_int_distribution<int> n(2, 80), q(0, 9), b(0, 1);
    std::vector<double> s;
    std::vector<int> l;
    const int size = n(rng);
    for (int i = 0; i < size; ++i) {
      s.push_back(q(rng) / 10.0);
      l.push_back(b(rng));
    }
    l[0] = 1;
    l[1] = 0;
    EXPECT_NEAR(roc_auc(s, l).auc, pairwise_auc(s, l), 1e-12) << trial;
  }
}

TEST(Roc, InvariantUnderMonotoneTransform) {
  std::mt19937 rng(6);
  std::normal_distribution<double> g;
  std::vector<double> s, t;
  std::vector<int> l;
  for (int i = 0; i < 300; ++i) {
    l.push_back(i % 2);
    s.push_back(g(rng) + 0.7 * l.back());
    t.push_back(std::exp(3.0 * s.back()) - 5.0);
  }
  EXPECT_NEAR(roc_auc(s, l).auc, roc_auc(t, l).auc, 1e-12);
}

TEST(Roc, RandomScoresNearHalf) {
  std::mt19937 rng(7);
  std::uniform_real_distribution<double> u(0, 1);
  std::bernoulli_distribution b;
  std::vector<double> s;
  std::vector<int> l;
  for (int i = 0; i < 5000; ++i) {
    s.push_back(u(rng));
    l.push_back(b(rng));
  }
  EXPECT_NEAR(roc_auc(s, l).auc, 0.5, 0.05);
}

TEST(Roc, Errors) {
  const std::vector<double> s{0.1, 0.2};
  EXPECT_EQ(code_of([&] { roc_auc(s, std::vector<int>{1, 1}); }), ErrorCode::SingleClassLabels);
  EXPECT_EQ(code_of([&] { roc_auc(s, std::vector<int>{0, 0}); }), ErrorCode::SingleClassLabels);
  EXPECT_EQ(code_of([&] { roc_auc(s, std::vector<int>{1}); }), ErrorCode::ShapeMismatch);
}

TEST(Nms, SingleDetection) {
  const std::vector<Detection> d{{1.0, Gesture::Flick, 0.9, {}}};
  const auto out = nms(d, NmsConfig{});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].t, 1.0);
  EXPECT_EQ(out[0].gesture, Gesture::Flick);
  EXPECT_TRUE(nms(std::vector<Detection>{{1.0, Gesture::Flick, 0.69, {}}}, NmsConfig{}).empty());
}

TEST(Nms, OneEventAcrossElevenWindows) {
  std::vector<Detection> d;
  for (int k = 0; k <= 10; ++k) {
    const double t = 0.05 * k;
    d.push_back({t, k % 2 ? Gesture::Pinch : Gesture::RubUp, 0.92 - 0.8 * std::abs(t - 0.25), {}});
  }
  const auto out = nms(d, NmsConfig{});
  ASSERT_EQ(out.size(), 1u);
  EXPECT_NEAR(out[0].t, 0.25, 1e-12);
  EXPECT_NEAR(out[0].p, 0.92, 1e-12);
  EXPECT_EQ(out.size(), nms_oracle(d, 0.7, 0.5).size());
}

TEST(Nms, TwoEventsOneSecondApart) {
  const std::vector<Detection> d{{0.2, Gesture::Pinch, 0.8, {}},
                                 {0.3, Gesture::Pinch, 0.75, {}},
                                 {1.2, Gesture::Flick, 0.9, {}},
                                 {1.25, Gesture::RubDown, 0.71, {}}};
  const auto out = nms(d, NmsConfig{});
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].t, 0.2);
  EXPECT_EQ(out[1].t, 1.2);
  EXPECT_EQ(out[1].gesture, Gesture::Flick);
}

TEST(Nms, MatchesBruteForceOracleAndIgnoresOrder) {
  std::mt19937 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    std::uniform_int_distribution<int> n(0, 200), slot(0, 100), cls(0, 4), pq(0, 20);
    std::vector<Detection> d;
    const int size = n(rng);
    for (int i = 0; i < size; ++i) {
      // coarse grids force ties in time and probability
      d.push_back({0.05 * slot(rng), gesture_at(cls(rng)), 0.5 + pq(rng) / 40.0, {}});
    }
    std::sort(d.begin(), d.end(), [](const Detection& a, const Detection& b) { return a.t < b.t; });
    const auto expect = nms_oracle(d, 0.7, 0.5);
    const auto got = nms(d, NmsConfig{});
    ASSERT_EQ(got.size(), expect.size()) << trial;
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_EQ(got[i].t, expect[i].t);
      EXPECT_EQ(got[i].p, expect[i].p);
      EXPECT_EQ(got[i].gesture, expect[i].gesture);
    }
    // reorder inside equal timestamps
    auto shuffled = d;
    for (auto it = shuffled.begin(); it != shuffled.end();) {
      auto end = std::find_if(it, shuffled.end(), [&](const Detection& x) { return x.t != it->t; });
      std::shuffle(it, end, rng);
      it = end;
    }
    const auto again = nms(shuffled, NmsConfig{});
    ASSERT_EQ(again.size(), got.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_EQ(again[i].t, got[i].t);
      EXPECT_EQ(again[i].gesture, got[i].gesture);
    }
    // survivors are mutually outside the window and all clear epsilon
    for (std::size_t i = 0; i < got.size(); ++i) {
      EXPECT_GE(got[i].p, 0.7);
      if (i) EXPECT_GT(got[i].t - got[i - 1].t, 0.5);
    }
  }
}

TEST(Nms, ConfigValidation) {
  EXPECT_NO_THROW(NmsConfig{}.validate());
  EXPECT_EQ(code_of([] { NmsConfig{0.5, 0.6, 0.5}.validate(); }), ErrorCode::InvalidArgument);
  EXPECT_EQ(code_of([] { NmsConfig{1.1, 0.6, 0.5}.validate(); }), ErrorCode::InvalidArgument);
  EXPECT_EQ(code_of([] { NmsConfig{0.7, 0.0, 0.5}.validate(); }), ErrorCode::InvalidArgument);
  EXPECT_EQ(code_of([] { NmsConfig{0.7, 0.6, -1.0}.validate(); }), ErrorCode::InvalidArgument);
}

TEST(WindowDetections, CentersOnTheStepGrid) {
  std::vector<GesturePrediction> p(11);
  for (int k = 0; k < 11; ++k) {
    p[k].argmax_class = gesture_at(k % 5);
    p[k].max_prob = 0.1 * k;
  }
  const auto d = window_detections(p, 3.0);
  ASSERT_EQ(d.size(), 11u);
  for (int k = 0; k < 11; ++k) {
    EXPECT_NEAR(d[k].t, 3.0 + 0.05 * k + 0.25, 1e-12);
    EXPECT_EQ(d[k].gesture, gesture_at(k % 5));
    EXPECT_EQ(d[k].p, 0.1 * k);
  }
}

TEST(Evaluate, ConstantModelPredictsOneClass) {
  const VectorClipSource clips(few_clips(2, 1));
  const EvalResult r = evaluate_model(constant_model(2, 20.0), clips);
  ASSERT_EQ(r.clips.size(), 10u);
  for (const auto& v : r.clips) {
    EXPECT_EQ(v.predicted, 2);
    EXPECT_GT(v.p, 0.99);
  }
  for (int t = 0; t < 5; ++t) EXPECT_EQ(r.confusion.at(t, 2), 2);
  EXPECT_DOUBLE_EQ(r.report.overall_accuracy, 0.2);
  EXPECT_DOUBLE_EQ(r.report.per_class[2].recall, 1.0);
  EXPECT_DOUBLE_EQ(r.report.per_class[2].precision, 0.2);
  EXPECT_DOUBLE_EQ(r.report.per_class[0].recall, 0.0);
  ASSERT_EQ(r.roc.size(), 5u);
  // every clip scores the same: ROC is the diagonal
  for (const auto& roc : r.roc) EXPECT_DOUBLE_EQ(roc.auc, 0.5);
  EXPECT_NE(format_eval(r).find("Average"), std::string::npos);
}

TEST(Evaluate, NoSurvivorsCountAsMisses) {
  const VectorClipSource clips(few_clips(1, 2));
  // uniform output: p = 0.2 < epsilon everywhere
  const EvalResult r = evaluate_model(constant_model(0, 0.0), clips);
  for (const auto& v : r.clips) EXPECT_EQ(v.predicted, -1);
  for (int t = 0; t < 5; ++t) EXPECT_EQ(r.confusion.at(t, -1), 1);
  EXPECT_EQ(r.report.overall_accuracy, 0.0);
  EXPECT_EQ(r.report.macro.f1, 0.0);
  for (const auto& c : r.counts.per_class) EXPECT_EQ(c.fn, 1);
}

TEST(Evaluate, EmptySplit) {
  const VectorClipSource none({});
  EXPECT_EQ(code_of([&] { evaluate_model(Model{}, none); }), ErrorCode::EmptySplit);
  DatasetManifest m;
  EXPECT_EQ(code_of([&] { evaluate_model(Model{}, m, ".", Split::Test); }), ErrorCode::EmptySplit);
}

TEST(Evaluate, CsvOutputs) {
  TempDir dir;
  const VectorClipSource clips(few_clips(1, 3));
  const EvalResult r = evaluate_model(constant_model(1, 20.0), clips);
  write_metrics_csv(r.report, dir.path() / "m.csv");
  write_roc_csv(r.roc[1], dir.path() / "roc.csv");
  std::ifstream m(dir.path() / "m.csv");
  std::string header;
  std::getline(m, header);
  EXPECT_EQ(header, "gesture,precision,recall,f1,accuracy");
  int rows = 0;
  for (std::string line; std::getline(m, line);) ++rows;
  EXPECT_EQ(rows, 6);
  std::ifstream roc(dir.path() / "roc.csv");
  std::getline(roc, header);
  EXPECT_EQ(header, "fpr,tpr,threshold");
}

TEST(Sweep, ArgumentErrors) {
  const VectorClipSource clips(few_clips(1, 4));
  const std::vector<NoiseClip> noise{{"pink", synth_noise(NoiseKind::Pink, 3.0, 1)}};
  SweepConfig cfg;
  cfg.ratios = {1, 10, 1};
  EXPECT_EQ(code_of([&] { ratio_sweep(clips, clips, clips, noise, cfg); }), ErrorCode::DuplicateRatio);
  cfg.ratios = {0};
  EXPECT_EQ(code_of([&] { ratio_sweep(clips, clips, clips, noise, cfg); }), ErrorCode::InvalidArgument);
  cfg.ratios = {};
  EXPECT_EQ(code_of([&] { ratio_sweep(clips, clips, clips, noise, cfg); }), ErrorCode::InvalidArgument);
  cfg.ratios = {1};
  cfg.window_jitter_s = 0.3;
  EXPECT_EQ(code_of([&] { ratio_sweep(clips, clips, clips, noise, cfg); }), ErrorCode::InvalidArgument);
  cfg.window_jitter_s = 0.2;
  cfg.min_epochs = 0;
  EXPECT_EQ(code_of([&] { ratio_sweep(clips, clips, clips, noise, cfg); }), ErrorCode::InvalidArgument);
  cfg.min_epochs = 1;
  cfg.epoch_budget = 0;
  EXPECT_EQ(code_of([&] { ratio_sweep(clips, clips, clips, noise, cfg); }), ErrorCode::InvalidArgument);
  cfg.epoch_budget = 165;
  const VectorClipSource none({});
  EXPECT_EQ(code_of([&] { ratio_sweep(clips, clips, none, noise, cfg); }), ErrorCode::EmptySplit);
}

TEST(Sweep, SingleRatioGivesOneRowPerCondition) {
  const VectorClipSource clips(few_clips(2, 5));
  const std::vector<NoiseClip> noise{{"pink", synth_noise(NoiseKind::Pink, 3.0, 1)}};
  SweepConfig cfg;
  cfg.ratios = {2};
  cfg.epoch_budget = 1;
  cfg.min_epochs = 1;
  cfg.noisy_test_ratio = 1;
  const auto rows = ratio_sweep(clips, clips, clips, noise, cfg);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].condition, "clean");
  EXPECT_EQ(rows[1].condition, "noisy");
  EXPECT_EQ(rows[0].ratio, 2);
  EXPECT_EQ(rows[0].epochs, 1);
  TempDir dir;
  write_sweep_csv(rows, dir.path() / "s.csv");
  std::ifstream in(dir.path() / "s.csv");
  int lines = 0;
  for (std::string line; std::getline(in, line);) ++lines;
  EXPECT_EQ(lines, 3);
}
