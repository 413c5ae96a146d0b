#include "bonesound/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "bonesound/error.hpp"

namespace bonesound {
namespace {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

// Activations are stored as (batch * rows * cols) x channels, so each
// channel plane is one contiguous column and the batch is stacked inside it.
struct Geometry {
  int batch, rows, cols;
  Eigen::Index positions() const { return static_cast<Eigen::Index>(batch) * rows * cols; }
};

template <typename S>
void im2col(const Mat<S>& a, const Geometry& g, int k, Mat<S>& out) {
  const int pad = k / 2;
  const Eigen::Index plane = static_cast<Eigen::Index>(g.rows) * g.cols;
  out.resize(g.positions(), a.cols() * k * k);
  for (Eigen::Index c = 0; c < a.cols(); ++c) {
    const S* src = a.col(c).data();
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        S* dst = out.col((c * k + ky) * k + kx).data();
        const int dy = ky - pad, dx = kx - pad;
        for (int b = 0; b < g.batch; ++b) {
          const S* sb = src + b * plane;
          S* db = dst + b * plane;
          for (int y = 0; y < g.rows; ++y) {
            const int sy = y + dy;
            S* drow = db + static_cast<Eigen::Index>(y) * g.cols;
            if (sy < 0 || sy >= g.rows) {
              std::fill(drow, drow + g.cols, S(0));
              continue;
            }
            const S* srow = sb + static_cast<Eigen::Index>(sy) * g.cols;
            for (int x = 0; x < g.cols; ++x) {
              const int sx = x + dx;
              drow[x] = (sx < 0 || sx >= g.cols) ? S(0) : srow[sx];
            }
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_add(const Mat<S>& dcols, const Geometry& g, int k, Mat<S>& da) {
  const int pad = k / 2;
  const Eigen::Index plane = static_cast<Eigen::Index>(g.rows) * g.cols;
  for (Eigen::Index c = 0; c < da.cols(); ++c) {
    S* dst = da.col(c).data();
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const S* src = dcols.col((c * k + ky) * k + kx).data();
        const int dy = ky - pad, dx = kx - pad;
        for (int b = 0; b < g.batch; ++b) {
          for (int y = 0; y < g.rows; ++y) {
            const int sy = y + dy;
            if (sy < 0 || sy >= g.rows) continue;
            const S* srow = src + b * plane + static_cast<Eigen::Index>(y) * g.cols;
            S* drow = dst + b * plane + static_cast<Eigen::Index>(sy) * g.cols;
            for (int x = 0; x < g.cols; ++x) {
              const int sx = x + dx;
              if (sx >= 0 && sx < g.cols) drow[sx] += srow[x];
            }
          }
        }
      }
    }
  }
}

// Max pool with floor on odd sizes. `argmax` receives, per output cell and
// channel, the input row that won; ties go to the first in row-major order.
template <typename S>
void max_pool(const Mat<S>& in, const Geometry& g, int p, Mat<S>& out, std::vector<Eigen::Index>& argmax) {
  const int ro = g.rows / p, co = g.cols / p;
  const Eigen::Index plane_in = static_cast<Eigen::Index>(g.rows) * g.cols;
  const Eigen::Index plane_out = static_cast<Eigen::Index>(ro) * co;
  out.resize(static_cast<Eigen::Index>(g.batch) * plane_out, in.cols());
  argmax.resize(static_cast<std::size_t>(out.size()));
  for (Eigen::Index c = 0; c < in.cols(); ++c) {
    const S* src = in.col(c).data();
    for (int b = 0; b < g.batch; ++b) {
      for (int oy = 0; oy < ro; ++oy) {
        for (int ox = 0; ox < co; ++ox) {
          Eigen::Index best = b * plane_in + static_cast<Eigen::Index>(oy * p) * g.cols + ox * p;
          for (int py = 0; py < p; ++py) {
            for (int px = 0; px < p; ++px) {
              const Eigen::Index idx =
                  b * plane_in + static_cast<Eigen::Index>(oy * p + py) * g.cols + ox * p + px;
              if (src[idx] > src[best]) best = idx;
            }
          }
          const Eigen::Index q = b * plane_out + static_cast<Eigen::Index>(oy) * co + ox;
          out(q, c) = src[best];
          argmax[static_cast<std::size_t>(c * out.rows() + q)] = best;
        }
      }
    }
  }
}

template <typename S>
Mat<S> dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const S scale = static_cast<S>(1.0 / (1.0 - rate));
  Mat<S> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng) < rate ? S(0) : scale;
  return m;
}

template <typename S>
struct ConvCache {
  Geometry geom{};
  Mat<S> cols;
  Mat<S> preact;
  std::vector<Eigen::Index> argmax;
  Mat<S> mask;
};

template <typename S>
struct ForwardCache {
  std::vector<ConvCache<S>> conv;
  Mat<S> flat, z1, mask1, h1;
};

// FNV-1a over the on/off pattern of every ReLU and the winner of every
// pool cell: equal signatures mean the same linear region.
struct PatternHash {
  std::uint64_t h = 1469598103934665603ULL;
  void add(std::uint64_t v) {
    h ^= v;
    h *= 1099511628211ULL;
  }
};

template <typename S>
Mat<S> load_inputs(const ArchMeta& arch, std::span<const Eigen::MatrixXd> inputs) {
  const auto batch = static_cast<int>(inputs.size());
  if (batch == 0) throw Error(ErrorCode::EmptyBatch, "forward on an empty batch");
  const Eigen::Index plane = static_cast<Eigen::Index>(arch.input_rows) * arch.input_cols;
  Mat<S> a(plane * batch, 1);
  for (int b = 0; b < batch; ++b) {
    const auto& x = inputs[static_cast<std::size_t>(b)];
    if (x.rows() != arch.input_rows || x.cols() != arch.input_cols) {
      throw Error(ErrorCode::ShapeMismatch, "input is " + std::to_string(x.rows()) + "x" +
                                                std::to_string(x.cols()));
    }
    for (int y = 0; y < arch.input_rows; ++y) {
      for (int xx = 0; xx < arch.input_cols; ++xx) {
        a(b * plane + static_cast<Eigen::Index>(y) * arch.input_cols + xx, 0) = static_cast<S>(x(y, xx));
      }
    }
  }
  return a;
}

// conv -> ReLU -> pool -> dropout, in place on `a`.
template <typename S>
void conv_stage(const CnnModel<S>& model, std::size_t l, Mat<S>& a, int batch, std::mt19937_64* rng,
                ConvCache<S>& c, PatternHash* hash) {
  const ArchMeta& arch = model.arch;
  const auto& lay = model.layout.conv[l];
  c.geom = Geometry{batch, lay.in_rows, lay.in_cols};
  im2col(a, c.geom, arch.kernel, c.cols);
  c.preact.noalias() = c.cols * model.conv_weights(l).transpose();
  c.preact.rowwise() += model.conv_bias(l).transpose();
  const Mat<S> relu = c.preact.cwiseMax(S(0));
  max_pool(relu, c.geom, arch.pool, a, c.argmax);
  if (hash) {
    for (Eigen::Index i = 0; i < c.preact.size(); ++i) hash->add(c.preact.data()[i] > S(0));
    for (Eigen::Index idx : c.argmax) hash->add(static_cast<std::uint64_t>(idx));
  }
  if (rng && arch.conv_dropout > 0.0) {
    c.mask = dropout_mask<S>(a.rows(), a.cols(), arch.conv_dropout, *rng);
    a = a.cwiseProduct(c.mask);
  } else {
    c.mask.resize(0, 0);
  }
}

// Channel-major flatten: feature index c * (rows*cols) + spatial index.
template <typename S>
Mat<S> flatten(const CnnModel<S>& model, const Mat<S>& a, int batch) {
  const auto& last = model.layout.conv.back();
  const Eigen::Index hw = static_cast<Eigen::Index>(last.out_rows) * last.out_cols;
  Mat<S> flat(a.cols() * hw, batch);
  for (Eigen::Index c = 0; c < a.cols(); ++c) {
    for (int b = 0; b < batch; ++b) flat.block(c * hw, b, hw, 1) = a.block(b * hw, c, hw, 1);
  }
  return flat;
}

template <typename S>
Mat<S> hidden_stage(const CnnModel<S>& model, const Mat<S>& flat, std::mt19937_64* rng, Mat<S>* z1_out,
                    Mat<S>* mask_out, PatternHash* hash) {
  Mat<S> z1 = model.dense_weights(0) * flat;
  z1.colwise() += model.dense_bias(0);
  Mat<S> h1 = z1.cwiseMax(S(0));
  if (hash) {
    for (Eigen::Index i = 0; i < z1.size(); ++i) hash->add(z1.data()[i] > S(0));
  }
  if (rng && model.arch.dense_dropout > 0.0) {
    Mat<S> mask = dropout_mask<S>(h1.rows(), h1.cols(), model.arch.dense_dropout, *rng);
    h1 = h1.cwiseProduct(mask);
    if (mask_out) *mask_out = std::move(mask);
  }
  if (z1_out) *z1_out = std::move(z1);
  return h1;
}

template <typename S>
Mat<S> output_stage(const CnnModel<S>& model, const Mat<S>& h1) {
  Mat<S> logits = model.dense_weights(1) * h1;
  logits.colwise() += model.dense_bias(1);
  return logits;
}

template <typename S>
Mat<S> run_forward(const CnnModel<S>& model, std::span<const Eigen::MatrixXd> inputs, Mode mode,
                   std::mt19937_64* rng, ForwardCache<S>* cache) {
  if (mode == Mode::Train && rng == nullptr) {
    throw Error(ErrorCode::InvalidArgument, "train mode needs a dropout rng");
  }
  std::mt19937_64* drop = mode == Mode::Train ? rng : nullptr;
  const auto batch = static_cast<int>(inputs.size());
  Mat<S> a = load_inputs<S>(model.arch, inputs);

  if (cache) cache->conv.resize(model.layout.conv.size());
  ConvCache<S> local;
  for (std::size_t l = 0; l < model.layout.conv.size(); ++l) {
    conv_stage(model, l, a, batch, drop, cache ? cache->conv[l] : local, nullptr);
  }
  Mat<S> flat = flatten(model, a, batch);
  if (!cache) return output_stage(model, hidden_stage<S>(model, flat, drop, nullptr, nullptr, nullptr));
  cache->h1 = hidden_stage<S>(model, flat, drop, &cache->z1, &cache->mask1, nullptr);
  cache->flat = std::move(flat);
  return output_stage(model, cache->h1);
}

template <typename S>
Vec<S> log_softmax_col(const Vec<S>& z) {
  const S m = z.maxCoeff();
  const S lse = m + std::log((z.array() - m).exp().sum());
  return z.array() - lse;
}

void check_labels(std::span<const int> labels, std::size_t batch, int n_classes) {
  if (labels.size() != batch) throw Error(ErrorCode::ShapeMismatch, "label count differs from batch");
  for (int y : labels) {
    if (y < 0 || y >= n_classes) throw Error(ErrorCode::UnknownClass, "label out of range");
  }
}

}  // namespace

// ---------------------------------------------------------------------------

ParamLayout ParamLayout::from(const ArchMeta& arch) {
  if (arch.channels.empty() || arch.kernel < 1 || arch.kernel % 2 == 0 || arch.pool < 1 ||
      arch.dense_hidden < 1 || arch.n_classes != kNumGestures) {
    throw Error(ErrorCode::ShapeMismatch, "unsupported architecture descriptor");
  }
  ParamLayout out;
  int rows = arch.input_rows, cols = arch.input_cols, in_ch = 1;
  Eigen::Index off = 0;
  for (int ch : arch.channels) {
    if (ch < 1) throw Error(ErrorCode::ShapeMismatch, "channel count must be positive");
    Conv c{in_ch, ch, rows, cols, rows / arch.pool, cols / arch.pool, off, 0};
    off += static_cast<Eigen::Index>(ch) * in_ch * arch.kernel * arch.kernel;
    c.bias_offset = off;
    off += ch;
    rows /= arch.pool;
    cols /= arch.pool;
    if (rows < 1 || cols < 1) throw Error(ErrorCode::ShapeMismatch, "feature map collapsed to zero");
    out.conv.push_back(c);
    in_ch = ch;
  }
  const int flat = in_ch * rows * cols;
  out.dense[0] = Dense{flat, arch.dense_hidden, off, off + static_cast<Eigen::Index>(flat) * arch.dense_hidden};
  off = out.dense[0].bias_offset + arch.dense_hidden;
  out.dense[1] = Dense{arch.dense_hidden, arch.n_classes, off,
                       off + static_cast<Eigen::Index>(arch.dense_hidden) * arch.n_classes};
  out.total = out.dense[1].bias_offset + arch.n_classes;
  return out;
}

template <typename S>
CnnModel<S>::CnnModel(ArchMeta a)
    : arch(std::move(a)), layout(ParamLayout::from(arch)), params(Vector::Zero(layout.total)) {}

template <typename S>
Eigen::Map<typename CnnModel<S>::Matrix> CnnModel<S>::conv_weights(std::size_t l) {
  const auto& c = layout.conv[l];
  return {params.data() + c.weight_offset, c.out_ch, static_cast<Eigen::Index>(c.in_ch) * arch.kernel * arch.kernel};
}
template <typename S>
Eigen::Map<const typename CnnModel<S>::Matrix> CnnModel<S>::conv_weights(std::size_t l) const {
  const auto& c = layout.conv[l];
  return {params.data() + c.weight_offset, c.out_ch, static_cast<Eigen::Index>(c.in_ch) * arch.kernel * arch.kernel};
}
template <typename S>
Eigen::Map<typename CnnModel<S>::Vector> CnnModel<S>::conv_bias(std::size_t l) {
  const auto& c = layout.conv[l];
  return {params.data() + c.bias_offset, c.out_ch};
}
template <typename S>
Eigen::Map<const typename CnnModel<S>::Vector> CnnModel<S>::conv_bias(std::size_t l) const {
  const auto& c = layout.conv[l];
  return {params.data() + c.bias_offset, c.out_ch};
}
template <typename S>
Eigen::Map<typename CnnModel<S>::Matrix> CnnModel<S>::dense_weights(std::size_t l) {
  const auto& d = layout.dense[l];
  return {params.data() + d.weight_offset, d.out, d.in};
}
template <typename S>
Eigen::Map<const typename CnnModel<S>::Matrix> CnnModel<S>::dense_weights(std::size_t l) const {
  const auto& d = layout.dense[l];
  return {params.data() + d.weight_offset, d.out, d.in};
}
template <typename S>
Eigen::Map<typename CnnModel<S>::Vector> CnnModel<S>::dense_bias(std::size_t l) {
  const auto& d = layout.dense[l];
  return {params.data() + d.bias_offset, d.out};
}
template <typename S>
Eigen::Map<const typename CnnModel<S>::Vector> CnnModel<S>::dense_bias(std::size_t l) const {
  const auto& d = layout.dense[l];
  return {params.data() + d.bias_offset, d.out};
}

template <typename S>
CnnModel<S> init_model(std::uint64_t seed, const ArchMeta& arch) {
  CnnModel<S> model(arch);
  model.rng_seed = seed;
  std::mt19937_64 rng(seed);
  auto fill = [&](auto&& w, double fan_in) {
    std::uniform_real_distribution<double> u(-std::sqrt(6.0 / fan_in), std::sqrt(6.0 / fan_in));
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<S>(u(rng));
  };
  for (std::size_t l = 0; l < model.layout.conv.size(); ++l) {
    fill(model.conv_weights(l), static_cast<double>(model.conv_weights(l).cols()));
  }
  for (std::size_t l = 0; l < 2; ++l) {
    fill(model.dense_weights(l), static_cast<double>(model.dense_weights(l).cols()));
  }
  return model;
}

template <typename S>
Mat<S> forward_logits(const CnnModel<S>& model, std::span<const Eigen::MatrixXd> inputs, Mode mode,
                      std::mt19937_64* rng) {
  return run_forward<S>(model, inputs, mode, rng, nullptr);
}

template <typename S>
Mat<S> softmax(const Mat<S>& logits) {
  Mat<S> out(logits.rows(), logits.cols());
  for (Eigen::Index b = 0; b < logits.cols(); ++b) {
    const Vec<S> z = logits.col(b);
    out.col(b) = log_softmax_col<S>(z).array().exp();
  }
  return out;
}

namespace {
template <typename S>
GesturePrediction to_prediction(const Eigen::Ref<const Vec<S>>& probs) {
  GesturePrediction p;
  Eigen::Index best = 0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    p.probs[static_cast<std::size_t>(i)] = static_cast<double>(probs[i]);
    if (probs[i] > probs[best]) best = i;
  }
  p.argmax_class = gesture_at(static_cast<int>(best));
  p.max_prob = p.probs[static_cast<std::size_t>(best)];
  return p;
}
}  // namespace

template <typename S>
GesturePrediction forward(const CnnModel<S>& model, const Eigen::MatrixXd& input, Mode mode,
                          std::mt19937_64* rng) {
  const Mat<S> probs = softmax<S>(run_forward<S>(model, std::span(&input, 1), mode, rng, nullptr));
  return to_prediction<S>(probs.col(0));
}

template <typename S>
std::vector<GesturePrediction> predict_batch(const CnnModel<S>& model,
                                             std::span<const Eigen::MatrixXd> inputs) {
  std::vector<GesturePrediction> out;
  if (inputs.empty()) return out;
  const Mat<S> probs = softmax<S>(run_forward<S>(model, inputs, Mode::Infer, nullptr, nullptr));
  out.reserve(inputs.size());
  for (Eigen::Index b = 0; b < probs.cols(); ++b) out.push_back(to_prediction<S>(probs.col(b)));
  return out;
}

template <typename S>
S loss(const CnnModel<S>& model, std::span<const Eigen::MatrixXd> inputs, std::span<const int> labels) {
  check_labels(labels, inputs.size(), model.arch.n_classes);
  const Mat<S> logits = run_forward<S>(model, inputs, Mode::Infer, nullptr, nullptr);
  S total = 0;
  for (Eigen::Index b = 0; b < logits.cols(); ++b) {
    total -= log_softmax_col<S>(logits.col(b))[labels[static_cast<std::size_t>(b)]];
  }
  return total / static_cast<S>(logits.cols());
}

template <typename S>
LossAndGradients<S> loss_and_gradients(const CnnModel<S>& model, std::span<const Eigen::MatrixXd> inputs,
                                       std::span<const int> labels, std::mt19937_64* dropout_rng) {
  if (inputs.empty()) throw Error(ErrorCode::EmptyBatch, "loss on an empty batch");
  check_labels(labels, inputs.size(), model.arch.n_classes);
  const ArchMeta& arch = model.arch;
  const Mode mode = dropout_rng ? Mode::Train : Mode::Infer;

  ForwardCache<S> cache;
  const Mat<S> logits = run_forward<S>(model, inputs, mode, dropout_rng, &cache);
  const auto batch = logits.cols();

  LossAndGradients<S> out;
  Mat<S> dlogits(logits.rows(), batch);
  for (Eigen::Index b = 0; b < batch; ++b) {
    const Vec<S> logp = log_softmax_col<S>(logits.col(b));
    const int y = labels[static_cast<std::size_t>(b)];
    out.loss -= logp[y];
    Eigen::Index arg;
    logp.maxCoeff(&arg);
    if (arg == y) ++out.correct;
    dlogits.col(b) = logp.array().exp();
    dlogits(y, b) -= S(1);
  }
  out.loss /= static_cast<S>(batch);
  if (!std::isfinite(static_cast<double>(out.loss))) {
    throw Error(ErrorCode::NonFiniteLoss, "cross-entropy is not finite");
  }
  dlogits /= static_cast<S>(batch);

  out.grads = Vec<S>::Zero(model.params.size());
  auto gmap = [&](Eigen::Index offset, Eigen::Index rows, Eigen::Index cols) {
    return Eigen::Map<Mat<S>>(out.grads.data() + offset, rows, cols);
  };

  // Dense layers.
  const auto& d0 = model.layout.dense[0];
  const auto& d1 = model.layout.dense[1];
  gmap(d1.weight_offset, d1.out, d1.in).noalias() = dlogits * cache.h1.transpose();
  gmap(d1.bias_offset, d1.out, 1) = dlogits.rowwise().sum();
  Mat<S> dh = model.dense_weights(1).transpose() * dlogits;
  if (cache.mask1.size() > 0) dh = dh.cwiseProduct(cache.mask1);
  const Mat<S> dz1 = dh.cwiseProduct((cache.z1.array() > S(0)).template cast<S>().matrix());
  gmap(d0.weight_offset, d0.out, d0.in).noalias() = dz1 * cache.flat.transpose();
  gmap(d0.bias_offset, d0.out, 1) = dz1.rowwise().sum();
  const Mat<S> dflat = model.dense_weights(0).transpose() * dz1;

  // Unflatten into the last pooled map.
  const auto& last = model.layout.conv.back();
  const Eigen::Index hw = static_cast<Eigen::Index>(last.out_rows) * last.out_cols;
  Mat<S> da(hw * batch, last.out_ch);
  for (Eigen::Index c = 0; c < da.cols(); ++c) {
    for (Eigen::Index b = 0; b < batch; ++b) da.block(b * hw, c, hw, 1) = dflat.block(c * hw, b, hw, 1);
  }

  for (std::size_t li = model.layout.conv.size(); li-- > 0;) {
    const auto& lay = model.layout.conv[li];
    ConvCache<S>& c = cache.conv[li];
    if (c.mask.size() > 0) da = da.cwiseProduct(c.mask);
    Mat<S> dz = Mat<S>::Zero(c.preact.rows(), c.preact.cols());
    for (Eigen::Index ch = 0; ch < da.cols(); ++ch) {
      for (Eigen::Index q = 0; q < da.rows(); ++q) {
        dz(c.argmax[static_cast<std::size_t>(ch * da.rows() + q)], ch) += da(q, ch);
      }
    }
    dz = dz.cwiseProduct((c.preact.array() > S(0)).template cast<S>().matrix());
    const Eigen::Index k2 = static_cast<Eigen::Index>(lay.in_ch) * arch.kernel * arch.kernel;
    gmap(lay.weight_offset, lay.out_ch, k2).noalias() = dz.transpose() * c.cols;
    gmap(lay.bias_offset, lay.out_ch, 1) = dz.colwise().sum().transpose();
    if (li == 0) break;
    const Mat<S> dcols = dz * model.conv_weights(li);
    da = Mat<S>::Zero(c.geom.positions(), lay.in_ch);
    col2im_add(dcols, c.geom, arch.kernel, da);
  }
  return out;
}

template <typename S>
StagedForward<S>::StagedForward(const CnnModel<S>& model, std::span<const Eigen::MatrixXd> inputs)
    : batch_(static_cast<int>(inputs.size())) {
  Mat<S> a = load_inputs<S>(model.arch, inputs);
  ConvCache<S> scratch;
  for (std::size_t l = 0; l < model.layout.conv.size(); ++l) {
    stage_inputs_.push_back(a);
    conv_stage<S>(model, l, a, batch_, nullptr, scratch, nullptr);
  }
  Mat<S> flat = flatten(model, a, batch_);
  Mat<S> h1 = hidden_stage<S>(model, flat, nullptr, nullptr, nullptr, nullptr);
  stage_inputs_.push_back(std::move(flat));
  stage_inputs_.push_back(std::move(h1));
}

template <typename S>
std::size_t StagedForward<S>::stage_of(const CnnModel<S>& model, Eigen::Index param) {
  const auto& lay = model.layout;
  for (std::size_t l = 0; l < lay.conv.size(); ++l) {
    if (param < lay.conv[l].bias_offset + lay.conv[l].out_ch) return l;
  }
  if (param < lay.dense[0].bias_offset + lay.dense[0].out) return lay.conv.size();
  return lay.conv.size() + 1;
}

template <typename S>
typename StagedForward<S>::Result StagedForward<S>::evaluate_from(const CnnModel<S>& model, std::size_t stage,
                                                                  std::span<const int> labels) const {
  check_labels(labels, static_cast<std::size_t>(batch_), model.arch.n_classes);
  const std::size_t n_conv = model.layout.conv.size();
  PatternHash hash;
  Mat<S> h1;
  if (stage <= n_conv) {
    Mat<S> flat;
    if (stage < n_conv) {
      Mat<S> a = stage_inputs_[stage];
      ConvCache<S> scratch;
      for (std::size_t l = stage; l < n_conv; ++l) conv_stage<S>(model, l, a, batch_, nullptr, scratch, &hash);
      flat = flatten(model, a, batch_);
    } else {
      flat = stage_inputs_[n_conv];
    }
    h1 = hidden_stage<S>(model, flat, nullptr, nullptr, nullptr, &hash);
  } else {
    h1 = stage_inputs_[n_conv + 1];
  }
  const Mat<S> logits = output_stage(model, h1);
  Result r;
  for (Eigen::Index b = 0; b < logits.cols(); ++b) {
    r.loss -= log_softmax_col<S>(logits.col(b))[labels[static_cast<std::size_t>(b)]];
  }
  r.loss /= static_cast<S>(logits.cols());
  r.signature = hash.h;
  return r;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw Error(ErrorCode::InvalidArgument, "learning rate must be positive");
  if (batch_size < 1) throw Error(ErrorCode::InvalidArgument, "batch size must be >= 1");
  if (max_epochs < 0) throw Error(ErrorCode::InvalidArgument, "max_epochs must be >= 0");
}

template <typename S>
void adam_step(Eigen::Ref<typename CnnModel<S>::Vector> params, const typename CnnModel<S>::Vector& grads,
               AdamState<S>& state, const TrainConfig& cfg, long t) {
  if (t < 1) throw Error(ErrorCode::InvalidArgument, "adam step index starts at 1");
  if (grads.size() != params.size()) throw Error(ErrorCode::ShapeMismatch, "gradient size");
  if (state.m.size() != params.size()) state = AdamState<S>(params.size());

  const S b1 = static_cast<S>(cfg.adam_beta1), b2 = static_cast<S>(cfg.adam_beta2);
  Vec<S> m = b1 * state.m + (S(1) - b1) * grads;
  Vec<S> v = b2 * state.v + (S(1) - b2) * grads.cwiseAbs2();
  const S c1 = S(1) - static_cast<S>(std::pow(cfg.adam_beta1, static_cast<double>(t)));
  const S c2 = S(1) - static_cast<S>(std::pow(cfg.adam_beta2, static_cast<double>(t)));
  const Vec<S> next =
      params - static_cast<S>(cfg.learning_rate) *
                   ((m / c1).array() / ((v / c2).array().sqrt() + static_cast<S>(cfg.adam_eps))).matrix();
  if (!next.allFinite()) throw Error(ErrorCode::NonFiniteUpdate, "adam produced a non-finite parameter");
  params = next;
  state.m = std::move(m);
  state.v = std::move(v);
  state.step = t;
}

InMemorySource::InMemorySource(std::vector<Eigen::MatrixXd> inputs, std::vector<int> labels)
    : inputs_(std::move(inputs)), labels_(std::move(labels)) {
  if (inputs_.size() != labels_.size()) throw Error(ErrorCode::ShapeMismatch, "inputs vs labels");
}

void InMemorySource::add(Eigen::MatrixXd input, int label) {
  inputs_.push_back(std::move(input));
  labels_.push_back(label);
}

ConcatSource::ConcatSource(std::vector<const SampleSource*> parts) : parts_(std::move(parts)) {
  for (const auto* p : parts_) total_ += p->size();
}

std::pair<const SampleSource*, std::size_t> ConcatSource::locate(std::size_t i) const {
  for (const auto* p : parts_) {
    if (i < p->size()) return {p, i};
    i -= p->size();
  }
  throw Error(ErrorCode::InvalidArgument, "sample index out of range");
}

int ConcatSource::label(std::size_t i) const {
  auto [p, j] = locate(i);
  return p->label(j);
}

Eigen::MatrixXd ConcatSource::features(std::size_t i) const {
  auto [p, j] = locate(i);
  return p->features(j);
}

void TrainHistory::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << "epoch,train_loss,val_loss,train_acc,val_acc\n" << std::setprecision(8);
  for (const auto& e : epochs) {
    out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.train_acc << ',' << e.val_acc << '\n';
  }
}

template <typename S>
EvalSummary evaluate_source(const CnnModel<S>& model, const SampleSource& data, int batch_size) {
  EvalSummary out;
  if (data.size() == 0) return out;
  std::vector<Eigen::MatrixXd> inputs;
  std::vector<int> labels;
  double total = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(data.size(), start + static_cast<std::size_t>(batch_size));
    inputs.clear();
    labels.clear();
    for (std::size_t i = start; i < end; ++i) {
      inputs.push_back(data.features(i));
      labels.push_back(data.label(i));
    }
    const Mat<S> logits = run_forward<S>(model, inputs, Mode::Infer, nullptr, nullptr);
    for (Eigen::Index b = 0; b < logits.cols(); ++b) {
      const Vec<S> logp = log_softmax_col<S>(logits.col(b));
      total -= static_cast<double>(logp[labels[static_cast<std::size_t>(b)]]);
      Eigen::Index arg;
      logp.maxCoeff(&arg);
      if (arg == labels[static_cast<std::size_t>(b)]) ++correct;
    }
  }
  out.loss = total / static_cast<double>(data.size());
  out.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  return out;
}

template <typename S>
TrainHistory train(CnnModel<S>& model, const SampleSource& train_set, const SampleSource& val_set,
                   const TrainConfig& cfg) {
  cfg.validate();
  TrainHistory history;
  if (cfg.max_epochs == 0) return history;
  if (train_set.size() == 0 || val_set.size() == 0) {
    throw Error(ErrorCode::EmptyBatch, "training and validation sets must be non-empty");
  }

  std::mt19937_64 shuffle_rng(cfg.seed);
  std::mt19937_64 dropout_rng(cfg.seed ^ 0x9E3779B97F4A7C15ULL);
  AdamState<S> adam(model.params.size());
  long step = 0;

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Vec<S> best = model.params;
  double best_val = std::numeric_limits<double>::infinity();
  int since_best = 0;

  std::vector<Eigen::MatrixXd> inputs;
  std::vector<int> labels;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      inputs.clear();
      labels.clear();
      for (std::size_t i = start; i < end; ++i) {
        inputs.push_back(train_set.features(order[i]));
        labels.push_back(train_set.label(order[i]));
      }
      auto lg = loss_and_gradients<S>(model, inputs, labels, &dropout_rng);
      adam_step<S>(model, lg.grads, adam, cfg, ++step);
      loss_sum += static_cast<double>(lg.loss) * static_cast<double>(end - start);
      correct += static_cast<std::size_t>(lg.correct);
    }
    const EvalSummary val = evaluate_source(model, val_set);
    EpochRecord rec{epoch, loss_sum / static_cast<double>(order.size()), val.loss,
                    static_cast<double>(correct) / static_cast<double>(order.size()), val.accuracy};
    history.epochs.push_back(rec);
    if (cfg.verbose) {
      std::fprintf(stderr, "epoch %3d  train_loss %.4f  train_acc %.4f  val_loss %.4f  val_acc %.4f\n",
                   rec.epoch, rec.train_loss, rec.train_acc, rec.val_loss, rec.val_acc);
    }
    if (val.loss < best_val) {
      best_val = val.loss;
      best = model.params;
      history.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= cfg.early_stop_patience) {
      break;
    }
  }
  model.params = best;
  return history;
}

// ---------------------------------------------------------------------------
// Serialization

template <typename S>
nlohmann::json model_to_json(const CnnModel<S>& model) {
  using nlohmann::json;
  const ArchMeta& a = model.arch;
  json conv = json::array();
  for (std::size_t l = 0; l < model.layout.conv.size(); ++l) {
    const auto& lay = model.layout.conv[l];
    const auto w = model.conv_weights(l);
    json kernels = json::array();
    for (int o = 0; o < lay.out_ch; ++o) {
      json per_in = json::array();
      for (int i = 0; i < lay.in_ch; ++i) {
        json k2 = json::array();
        for (int ky = 0; ky < a.kernel; ++ky) {
          json row = json::array();
          for (int kx = 0; kx < a.kernel; ++kx) {
            row.push_back(static_cast<double>(w(o, (i * a.kernel + ky) * a.kernel + kx)));
          }
          k2.push_back(std::move(row));
        }
        per_in.push_back(std::move(k2));
      }
      kernels.push_back(std::move(per_in));
    }
    const auto b = model.conv_bias(l);
    conv.push_back({{"kernels", kernels}, {"bias", std::vector<double>(b.data(), b.data() + b.size())}});
  }
  json dense = json::array();
  for (std::size_t l = 0; l < 2; ++l) {
    const auto w = model.dense_weights(l);
    json rows = json::array();
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      std::vector<double> row(static_cast<std::size_t>(w.cols()));
      for (Eigen::Index c = 0; c < w.cols(); ++c) row[static_cast<std::size_t>(c)] = static_cast<double>(w(r, c));
      rows.push_back(row);
    }
    const auto b = model.dense_bias(l);
    std::vector<double> bias(static_cast<std::size_t>(b.size()));
    for (Eigen::Index i = 0; i < b.size(); ++i) bias[static_cast<std::size_t>(i)] = static_cast<double>(b[i]);
    dense.push_back({{"weights", rows}, {"bias", bias}});
  }
  return {{"format_version", kModelFormatVersion},
          {"arch_meta",
           {{"input", {a.input_rows, a.input_cols, 1}},
            {"channels", a.channels},
            {"kernel", a.kernel},
            {"pool", a.pool},
            {"dense_hidden", a.dense_hidden},
            {"n_classes", a.n_classes},
            {"conv_dropout", a.conv_dropout},
            {"dense_dropout", a.dense_dropout}}},
          {"rng_seed", model.rng_seed},
          {"parameters", {{"conv", conv}, {"dense", dense}}}};
}

namespace {
void expect_size(const nlohmann::json& j, std::size_t n, const std::string& what) {
  if (!j.is_array() || j.size() != n) {
    throw Error(ErrorCode::ShapeMismatch, what + ": expected " + std::to_string(n) + " entries");
  }
}
}  // namespace

Model model_from_json(const nlohmann::json& j) {
  try {
    const int version = j.at("format_version").get<int>();
    if (version != kModelFormatVersion) {
      throw Error(ErrorCode::VersionMismatch, "model format_version " + std::to_string(version));
    }
    const auto& am = j.at("arch_meta");
    ArchMeta a;
    const auto input = am.at("input").get<std::vector<int>>();
    if (input.size() != 3 || input[2] != 1) throw Error(ErrorCode::ShapeMismatch, "input must be rows x cols x 1");
    a.input_rows = input[0];
    a.input_cols = input[1];
    a.channels = am.at("channels").get<std::vector<int>>();
    a.kernel = am.at("kernel").get<int>();
    a.pool = am.at("pool").get<int>();
    a.dense_hidden = am.at("dense_hidden").get<int>();
    a.n_classes = am.at("n_classes").get<int>();
    a.conv_dropout = am.at("conv_dropout").get<double>();
    a.dense_dropout = am.at("dense_dropout").get<double>();

    Model model(a);
    model.rng_seed = j.value("rng_seed", std::uint64_t{0});
    const auto& p = j.at("parameters");
    const auto& conv = p.at("conv");
    expect_size(conv, model.layout.conv.size(), "conv layers");
    for (std::size_t l = 0; l < model.layout.conv.size(); ++l) {
      const auto& lay = model.layout.conv[l];
      const auto& kernels = conv[l].at("kernels");
      auto w = model.conv_weights(l);
      expect_size(kernels, static_cast<std::size_t>(lay.out_ch), "conv kernels");
      for (int o = 0; o < lay.out_ch; ++o) {
        expect_size(kernels[static_cast<std::size_t>(o)], static_cast<std::size_t>(lay.in_ch), "conv in_ch");
        for (int i = 0; i < lay.in_ch; ++i) {
          const auto& k2 = kernels[static_cast<std::size_t>(o)][static_cast<std::size_t>(i)];
          expect_size(k2, static_cast<std::size_t>(a.kernel), "kernel rows");
          for (int ky = 0; ky < a.kernel; ++ky) {
            expect_size(k2[static_cast<std::size_t>(ky)], static_cast<std::size_t>(a.kernel), "kernel cols");
            for (int kx = 0; kx < a.kernel; ++kx) {
              w(o, (i * a.kernel + ky) * a.kernel + kx) =
                  k2[static_cast<std::size_t>(ky)][static_cast<std::size_t>(kx)].get<double>();
            }
          }
        }
      }
      const auto& bias = conv[l].at("bias");
      expect_size(bias, static_cast<std::size_t>(lay.out_ch), "conv bias");
      for (int o = 0; o < lay.out_ch; ++o) model.conv_bias(l)[o] = bias[static_cast<std::size_t>(o)].get<double>();
    }
    const auto& dense = p.at("dense");
    expect_size(dense, 2, "dense layers");
    for (std::size_t l = 0; l < 2; ++l) {
      const auto& lay = model.layout.dense[l];
      const auto& rows = dense[l].at("weights");
      expect_size(rows, static_cast<std::size_t>(lay.out), "dense" + std::to_string(l + 1) + " rows");
      auto w = model.dense_weights(l);
      for (int r = 0; r < lay.out; ++r) {
        expect_size(rows[static_cast<std::size_t>(r)], static_cast<std::size_t>(lay.in), "dense" + std::to_string(l + 1) + " cols");
        for (int c = 0; c < lay.in; ++c) w(r, c) = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].get<double>();
      }
      const auto& bias = dense[l].at("bias");
      expect_size(bias, static_cast<std::size_t>(lay.out), "dense" + std::to_string(l + 1) + " bias");
      for (int o = 0; o < lay.out; ++o) model.dense_bias(l)[o] = bias[static_cast<std::size_t>(o)].get<double>();
    }
    if (!model.params.allFinite()) throw Error(ErrorCode::ShapeMismatch, "non-finite parameter in model file");
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ShapeMismatch, std::string("malformed model document: ") + e.what());
  }
}

template <typename S>
void save_model(const CnnModel<S>& model, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << model_to_json(model).dump() << '\n';
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::ModelMissing, "cannot open model " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ShapeMismatch, std::string("model file is not JSON: ") + e.what());
  }
  return model_from_json(j);
}

#define BONESOUND_INSTANTIATE(S)                                                                    \
  template struct CnnModel<S>;                                                                      \
  template CnnModel<S> init_model<S>(std::uint64_t, const ArchMeta&);                               \
  template Mat<S> forward_logits<S>(const CnnModel<S>&, std::span<const Eigen::MatrixXd>, Mode,     \
                                    std::mt19937_64*);                                              \
  template Mat<S> softmax<S>(const Mat<S>&);                                                        \
  template GesturePrediction forward<S>(const CnnModel<S>&, const Eigen::MatrixXd&, Mode,           \
                                        std::mt19937_64*);                                          \
  template std::vector<GesturePrediction> predict_batch<S>(const CnnModel<S>&,                      \
                                                           std::span<const Eigen::MatrixXd>);       \
  template S loss<S>(const CnnModel<S>&, std::span<const Eigen::MatrixXd>, std::span<const int>);   \
  template LossAndGradients<S> loss_and_gradients<S>(const CnnModel<S>&,                            \
                                                     std::span<const Eigen::MatrixXd>,              \
                                                     std::span<const int>, std::mt19937_64*);       \
  template void adam_step<S>(Eigen::Ref<typename CnnModel<S>::Vector>,                              \
                             const typename CnnModel<S>::Vector&, AdamState<S>&, const TrainConfig&, \
                             long);                                                                 \
  template EvalSummary evaluate_source<S>(const CnnModel<S>&, const SampleSource&, int);            \
  template TrainHistory train<S>(CnnModel<S>&, const SampleSource&, const SampleSource&,            \
                                 const TrainConfig&);                                               \
  template nlohmann::json model_to_json<S>(const CnnModel<S>&);                                     \
  template void save_model<S>(const CnnModel<S>&, const std::filesystem::path&);

#define BONESOUND_INSTANTIATE_STAGED(S) template class StagedForward<S>;
BONESOUND_INSTANTIATE_STAGED(double)
BONESOUND_INSTANTIATE_STAGED(float)
BONESOUND_INSTANTIATE(double)
BONESOUND_INSTANTIATE(float)

#undef BONESOUND_INSTANTIATE

}  // namespace bonesound
