#include "bonesound/features.hpp"

#include <cmath>
#include <complex>
#include <fstream>
#include <iomanip>
#include <numbers>

#include <unsupported/Eigen/FFT>

#include "bonesound/error.hpp"

namespace bonesound {

void MfccConfig::validate() const {
  auto fail = [](const char* what) { throw Error(ErrorCode::InvalidArgument, what); };
  if (n_coeffs > n_mels || n_coeffs <= 0) fail("need 0 < n_coeffs <= n_mels");
  if (!(mel_lo_hz >= 0.0 && mel_lo_hz < mel_hi_hz && mel_hi_hz <= sample_rate_hz / 2.0)) {
    fail("need mel_lo < mel_hi <= fs/2");
  }
  if (fft_size < frame_len) fail("fft_size must cover a frame");
  if (window_samples() < frame_len || hop <= 0) fail("window shorter than a frame");
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MfccExtractor::MfccExtractor(MfccConfig cfg) : cfg_(cfg) {
  cfg_.validate();

  window_fn_.resize(cfg_.frame_len);
  for (int n = 0; n < cfg_.frame_len; ++n) {
    window_fn_[n] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * n / (cfg_.frame_len - 1));
  }

  const double mlo = hz_to_mel(cfg_.mel_lo_hz);
  const double mhi = hz_to_mel(cfg_.mel_hi_hz);
  edges_hz_.resize(static_cast<std::size_t>(cfg_.n_mels) + 2);
  for (int i = 0; i < cfg_.n_mels + 2; ++i) {
    edges_hz_[static_cast<std::size_t>(i)] = mel_to_hz(mlo + (mhi - mlo) * i / (cfg_.n_mels + 1));
  }

  const int bins = cfg_.fft_size / 2 + 1;
  const double bin_hz = static_cast<double>(cfg_.sample_rate_hz) / cfg_.fft_size;
  mel_bank_ = Eigen::MatrixXd::Zero(cfg_.n_mels, bins);
  for (int m = 0; m < cfg_.n_mels; ++m) {
    const double lo = edges_hz_[static_cast<std::size_t>(m)];
    const double mid = edges_hz_[static_cast<std::size_t>(m) + 1];
    const double hi = edges_hz_[static_cast<std::size_t>(m) + 2];
    for (int k = 0; k < bins; ++k) {
      const double f = k * bin_hz;
      if (f > lo && f <= mid) mel_bank_(m, k) = (f - lo) / (mid - lo);
      else if (f > mid && f < hi) mel_bank_(m, k) = (hi - f) / (hi - mid);
    }
  }

  const int n = cfg_.n_mels;
  dct_.resize(cfg_.n_coeffs, n);
  for (int k = 0; k < cfg_.n_coeffs; ++k) {
    const double scale = std::sqrt((k == 0 ? 1.0 : 2.0) / n);
    for (int j = 0; j < n; ++j) {
      dct_(k, j) = scale * std::cos(std::numbers::pi * k * (j + 0.5) / n);
    }
  }
}

Eigen::MatrixXd MfccExtractor::log_mel(const Eigen::Ref<const Eigen::VectorXd>& window) const {
  if (window.size() != cfg_.window_samples()) {
    throw Error(ErrorCode::WrongWindowLength, "expected " + std::to_string(cfg_.window_samples()) +
                                                  " samples, got " + std::to_string(window.size()));
  }
  thread_local Eigen::FFT<double> fft;
  const int frames = cfg_.n_frames();
  const int bins = cfg_.fft_size / 2 + 1;

  Eigen::VectorXd buf = Eigen::VectorXd::Zero(cfg_.fft_size);
  Eigen::VectorXcd spec(cfg_.fft_size);
  Eigen::MatrixXd power(bins, frames);
  for (int f = 0; f < frames; ++f) {
    buf.head(cfg_.frame_len) =
        window.segment(static_cast<Eigen::Index>(f) * cfg_.hop, cfg_.frame_len).cwiseProduct(window_fn_);
    fft.fwd(spec, buf);
    power.col(f) = spec.head(bins).cwiseAbs2();
  }
  Eigen::MatrixXd energies = mel_bank_ * power;
  return energies.cwiseMax(cfg_.log_floor).array().log().matrix();
}

Eigen::MatrixXd MfccExtractor::cepstra(const Eigen::Ref<const Eigen::VectorXd>& window) const {
  // Rows k >= 1 of the DCT sum to zero, so they see only the deviation from
  // each column's mean; row 0 carries the mean. Flat columns then give
  // exact zeros above coefficient 0.
  Eigen::MatrixXd lm = log_mel(window);
  const Eigen::RowVectorXd mean = lm.colwise().mean();
  lm.rowwise() -= mean;
  Eigen::MatrixXd out = dct_ * lm;
  out.row(0) = mean * std::sqrt(static_cast<double>(cfg_.n_mels));
  return out;
}

MfccFrame MfccExtractor::operator()(const Eigen::Ref<const Eigen::VectorXd>& window) const {
  return MfccFrame{standardize(cepstra(window), cfg_.variance_floor), 0.0};
}

namespace {
// Mean taken about the first element, so constant data centers to exact zeros.
template <typename Derived>
double shifted_mean(const Eigen::DenseBase<Derived>& x) {
  const double anchor = x(0);
  return anchor + (x.derived().array() - anchor).mean();
}
}  // namespace

Eigen::MatrixXd standardize(const Eigen::MatrixXd& m, double variance_floor) {
  Eigen::MatrixXd out = m;
  out.row(0).array() -= shifted_mean(out.row(0));
  out.array() -= shifted_mean(out.reshaped());
  const double var = out.squaredNorm() / static_cast<double>(out.size());
  return out / std::sqrt(std::max(var, variance_floor));
}

const MfccExtractor& default_extractor() {
  static const MfccExtractor extractor{MfccConfig{}};
  return extractor;
}

MfccFrame mfcc(const Eigen::Ref<const Eigen::VectorXd>& window, const MfccConfig& cfg) {
  if (cfg == default_extractor().config()) return default_extractor()(window);
  return MfccExtractor(cfg)(window);
}

std::vector<MfccFrame> segment_windows(const Eigen::Ref<const Eigen::VectorXd>& segment,
                                       const MfccExtractor& extractor) {
  const int rate = extractor.config().sample_rate_hz;
  if (segment.size() != rate) {
    throw Error(ErrorCode::WrongSegmentLength, "expected a 1 s segment of " + std::to_string(rate) +
                                                   " samples, got " + std::to_string(segment.size()));
  }
  const auto step = static_cast<Eigen::Index>(std::llround(kSegmentStep_s * rate));
  const Eigen::Index win = extractor.config().window_samples();
  std::vector<MfccFrame> out;
  out.reserve(kWindowsPerSegment);
  for (int i = 0; i < kWindowsPerSegment; ++i) {
    MfccFrame frame = extractor(segment.segment(i * step, win));
    frame.t_start = i * kSegmentStep_s;
    out.push_back(std::move(frame));
  }
  return out;
}

void write_csv(const MfccFrame& frame, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << std::setprecision(17);
  for (Eigen::Index r = 0; r < frame.values.rows(); ++r) {
    for (Eigen::Index c = 0; c < frame.values.cols(); ++c) {
      if (c) out << ',';
      out << frame.values(r, c);
    }
    out << '\n';
  }
}

}  // namespace bonesound
