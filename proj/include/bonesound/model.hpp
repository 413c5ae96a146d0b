#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "bonesound/features.hpp"
#include "bonesound/gesture.hpp"

namespace bonesound {

/// Architecture descriptor. The defaults are the deployed network:
///   40x44x1 -> [conv3x3(same) -> ReLU -> maxpool2 -> dropout] x4 with
///   channels 8,16,32,32 -> flatten 128 -> dense 64 -> ReLU -> dropout
///   -> dense 5 -> softmax.
struct ArchMeta {
  int input_rows = 40;
  int input_cols = 44;
  std::vector<int> channels = {8, 16, 32, 32};
  int kernel = 3;
  int pool = 2;
  int dense_hidden = 64;
  int n_classes = kNumGestures;
  double conv_dropout = 0.25;
  double dense_dropout = 0.5;

  bool operator==(const ArchMeta&) const = default;
};

/// Offsets of every tensor inside the flat parameter vector, derived from an
/// ArchMeta by following the shape chain.
struct ParamLayout {
  struct Conv {
    int in_ch, out_ch;
    int in_rows, in_cols;    // spatial size entering the conv
    int out_rows, out_cols;  // after pooling
    Eigen::Index weight_offset, bias_offset;
  };
  struct Dense {
    int in, out;
    Eigen::Index weight_offset, bias_offset;
  };
  std::vector<Conv> conv;
  std::array<Dense, 2> dense{};
  Eigen::Index total = 0;

  /// Throws Error{ShapeMismatch} if the chain collapses to an empty map.
  static ParamLayout from(const ArchMeta& arch);
};

enum class Mode { Train, Infer };

/// Model parameters live in one flat vector; the accessors return mapped
/// views of each layer. Conv weights are out_ch x (in_ch*k*k) with column
/// index (ci*k + ky)*k + kx; dense weights are out x in.
template <typename Scalar>
struct CnnModel {
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

  ArchMeta arch;
  ParamLayout layout;
  Vector params;
  std::uint64_t rng_seed = 0;

  CnnModel() : CnnModel(ArchMeta{}) {}
  explicit CnnModel(ArchMeta a);

  Eigen::Index parameter_count() const { return layout.total; }

  Eigen::Map<Matrix> conv_weights(std::size_t l);
  Eigen::Map<const Matrix> conv_weights(std::size_t l) const;
  Eigen::Map<Vector> conv_bias(std::size_t l);
  Eigen::Map<const Vector> conv_bias(std::size_t l) const;
  Eigen::Map<Matrix> dense_weights(std::size_t l);
  Eigen::Map<const Matrix> dense_weights(std::size_t l) const;
  Eigen::Map<Vector> dense_bias(std::size_t l);
  Eigen::Map<const Vector> dense_bias(std::size_t l) const;

  template <typename To>
  CnnModel<To> cast() const {
    CnnModel<To> out(arch);
    out.params = params.template cast<To>();
    out.rng_seed = rng_seed;
    return out;
  }
};

using Model = CnnModel<double>;

/// He-uniform weights (limit sqrt(6 / fan_in)), zero biases.
template <typename Scalar>
CnnModel<Scalar> init_model(std::uint64_t seed, const ArchMeta& arch = {});

struct GesturePrediction {
  std::array<double, kNumGestures> probs{};
  Gesture argmax_class = Gesture::Pinch;
  double max_prob = 0.0;
};

/// Logits (n_classes x batch) for a batch of input matrices. Dropout is only
/// applied in Train mode and then needs `rng`.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> forward_logits(
    const CnnModel<Scalar>& model, std::span<const Eigen::MatrixXd> inputs, Mode mode = Mode::Infer,
    std::mt19937_64* rng = nullptr);

/// Column-wise softmax with max subtraction.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> softmax(
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& logits);

template <typename Scalar>
GesturePrediction forward(const CnnModel<Scalar>& model, const Eigen::MatrixXd& input,
                          Mode mode = Mode::Infer, std::mt19937_64* rng = nullptr);
template <typename Scalar>
GesturePrediction forward(const CnnModel<Scalar>& model, const MfccFrame& input,
                          Mode mode = Mode::Infer, std::mt19937_64* rng = nullptr) {
  return forward(model, input.values, mode, rng);
}

template <typename Scalar>
std::vector<GesturePrediction> predict_batch(const CnnModel<Scalar>& model,
                                             std::span<const Eigen::MatrixXd> inputs);

template <typename Scalar>
struct LossAndGradients {
  Scalar loss = 0;
  typename CnnModel<Scalar>::Vector grads;
  Eigen::Index correct = 0;  // argmax hits in this batch, for reporting
};

/// Mean categorical cross-entropy over the batch and its gradient with
/// respect to every parameter. Passing an rng enables dropout.
template <typename Scalar>
LossAndGradients<Scalar> loss_and_gradients(const CnnModel<Scalar>& model,
                                            std::span<const Eigen::MatrixXd> inputs,
                                            std::span<const int> labels,
                                            std::mt19937_64* dropout_rng = nullptr);

/// Loss only, no dropout. Used by finite-difference checks and validation.
template <typename Scalar>
Scalar loss(const CnnModel<Scalar>& model, std::span<const Eigen::MatrixXd> inputs,
            std::span<const int> labels);

/// Forward pass split at layer boundaries (each conv block, then the two
/// dense layers). Keeps the activations entering every stage for one fixed
/// batch, so a change confined to one layer's parameters can be evaluated
/// from that layer on. Also reports a signature of the ReLU on/off pattern
/// and pool winners, which identifies the linear region the network is in.
template <typename Scalar>
class StagedForward {
 public:
  using Matrix = typename CnnModel<Scalar>::Matrix;

  struct Result {
    Scalar loss = 0;
    std::uint64_t signature = 0;
  };

  StagedForward(const CnnModel<Scalar>& model, std::span<const Eigen::MatrixXd> inputs);

  std::size_t stage_count() const { return stage_inputs_.size(); }
  static std::size_t stage_of(const CnnModel<Scalar>& model, Eigen::Index param);

  /// Loss without dropout, recomputed from `stage` with the model's current
  /// parameters. Parameters of earlier stages must be unchanged since
  /// construction.
  Result evaluate_from(const CnnModel<Scalar>& model, std::size_t stage, std::span<const int> labels) const;

 private:
  std::vector<Matrix> stage_inputs_;
  int batch_ = 0;
};

struct TrainConfig {
  double learning_rate = 0.001;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 32;
  int max_epochs = 50;
  int early_stop_patience = 10;
  std::uint64_t seed = 0;
  bool verbose = false;

  void validate() const;
};

template <typename Scalar>
struct AdamState {
  typename CnnModel<Scalar>::Vector m, v;
  long step = 0;

  explicit AdamState(Eigen::Index n = 0)
      : m(CnnModel<Scalar>::Vector::Zero(n)), v(CnnModel<Scalar>::Vector::Zero(n)) {}
};

/// Adam with bias correction. `t` is the 1-based step index. Throws
/// Error{NonFiniteUpdate} and leaves the parameters untouched if the update
/// would produce a non-finite value.
template <typename Scalar>
void adam_step(Eigen::Ref<typename CnnModel<Scalar>::Vector> params,
               const typename CnnModel<Scalar>::Vector& grads, AdamState<Scalar>& state,
               const TrainConfig& cfg, long t);

template <typename Scalar>
void adam_step(CnnModel<Scalar>& model, const typename CnnModel<Scalar>::Vector& grads,
               AdamState<Scalar>& state, const TrainConfig& cfg, long t) {
  adam_step<Scalar>(Eigen::Ref<typename CnnModel<Scalar>::Vector>(model.params), grads, state, cfg, t);
}

/// Random-access labeled inputs. Implementations may synthesize features
/// on demand; they must be deterministic in the index.
class SampleSource {
 public:
  virtual ~SampleSource() = default;
  virtual std::size_t size() const = 0;
  virtual int label(std::size_t i) const = 0;
  virtual Eigen::MatrixXd features(std::size_t i) const = 0;
};

class InMemorySource final : public SampleSource {
 public:
  InMemorySource() = default;
  InMemorySource(std::vector<Eigen::MatrixXd> inputs, std::vector<int> labels);

  void add(Eigen::MatrixXd input, int label);
  std::size_t size() const override { return inputs_.size(); }
  int label(std::size_t i) const override { return labels_[i]; }
  Eigen::MatrixXd features(std::size_t i) const override { return inputs_[i]; }

 private:
  std::vector<Eigen::MatrixXd> inputs_;
  std::vector<int> labels_;
};

/// Concatenation of several sources, indexed in order.
class ConcatSource final : public SampleSource {
 public:
  explicit ConcatSource(std::vector<const SampleSource*> parts);
  std::size_t size() const override { return total_; }
  int label(std::size_t i) const override;
  Eigen::MatrixXd features(std::size_t i) const override;

 private:
  std::pair<const SampleSource*, std::size_t> locate(std::size_t i) const;
  std::vector<const SampleSource*> parts_;
  std::size_t total_ = 0;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0, val_loss = 0, train_acc = 0, val_acc = 0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;  // 1-based; 0 when no epoch ran
  void write_csv(const std::filesystem::path& path) const;
};

struct EvalSummary {
  double loss = 0;
  double accuracy = 0;
};

template <typename Scalar>
EvalSummary evaluate_source(const CnnModel<Scalar>& model, const SampleSource& data,
                            int batch_size = 64);

/// Seeded mini-batch training with early stopping on validation loss; the
/// best-validation parameters are restored at the end.
template <typename Scalar>
TrainHistory train(CnnModel<Scalar>& model, const SampleSource& train_set,
                   const SampleSource& val_set, const TrainConfig& cfg);

inline constexpr int kModelFormatVersion = 1;

template <typename Scalar>
nlohmann::json model_to_json(const CnnModel<Scalar>& model);
/// Throws Error{VersionMismatch} or Error{ShapeMismatch}.
Model model_from_json(const nlohmann::json& j);

template <typename Scalar>
void save_model(const CnnModel<Scalar>& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

}  // namespace bonesound
