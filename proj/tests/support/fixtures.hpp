#pragma once

#include <random>
#include <vector>

#include "bonesound/dataset.hpp"
#include "bonesound/frontend.hpp"
#include "bonesound/model.hpp"

namespace bonesound::testing_support {

/// A model trained once per process on a small synthetic corpus. Good
/// enough to label clean synthetic gestures; not a quality benchmark.
inline const Model& small_trained_model() {
  static const Model model = [] {
    SynthCorpusConfig cc;
    cc.per_class = 80;
    cc.seed = 21;
    const SynthCorpus corpus = make_synthetic_corpus(cc);
    const VectorClipSource train_clips(corpus.select(Split::Train)), val_clips(corpus.select(Split::Val));
    const InMemorySource train_set = materialize(ClipFeatureSource(train_clips, WindowPlacement{0.2, 5}));
    const InMemorySource val_set = materialize(ClipFeatureSource(val_clips));
    TrainConfig tc;
    tc.batch_size = 16;
    tc.max_epochs = 50;
    tc.early_stop_patience = 50;
    tc.seed = 3;
    auto m = init_model<float>(tc.seed);
    train(m, train_set, val_set, tc);
    return m.cast<double>();
  }();
  return model;
}

/// A model that ignores its input and puts `logit` on class c (zeros
/// elsewhere), so every window predicts c with a known probability.
inline Model constant_model(int c, double logit) {
  Model m;
  m.params.setZero();
  m.dense_bias(1)[c] = logit;  // output layer
  return m;
}

/// White sensor-floor noise at the canonical rate.
inline Eigen::VectorXd quiet_floor(double seconds, double rms, std::uint32_t seed) {
  std::mt19937 rng(seed);
  std::normal_distribution<double> g(0.0, rms);
  Eigen::VectorXd x(static_cast<Eigen::Index>(seconds * kCanonicalRate));
  for (auto& v : x) v = g(rng);
  return x;
}

struct PlacedGesture {
  Gesture gesture;
  double peak_t;  // stream time of the clip's largest sample
};

/// Drops synthetic gesture clips into `stream` so each clip's peak lands at
/// the requested time; returns the actual peak times.
inline std::vector<PlacedGesture> place_gestures(Eigen::VectorXd& stream, const std::vector<PlacedGesture>& want,
                                                 std::uint64_t seed) {
  std::vector<PlacedGesture> out;
  for (std::size_t i = 0; i < want.size(); ++i) {
    SynthGestureSpec spec;
    spec.label = want[i].gesture;
    spec.background_rms = 0.0;
    const Eigen::VectorXd x = synth_gesture(spec, derive_seed(seed, i)).clip.samples;
    Eigen::Index peak = 0;
    x.cwiseAbs().maxCoeff(&peak);
    const auto start = static_cast<Eigen::Index>(std::llround(want[i].peak_t * kCanonicalRate)) - peak;
    stream.segment(start, x.size()) += x;
    out.push_back({want[i].gesture, static_cast<double>(start + peak) / kCanonicalRate});
  }
  return out;
}

}  // namespace bonesound::testing_support
