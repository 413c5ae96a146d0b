#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <utility>
#include <vector>

#include "bonesound/audio.hpp"

namespace bonesound {

struct MfccConfig {
  int sample_rate_hz = kCanonicalRate;
  double window_s = 0.5;
  int frame_len = 400;  // 25 ms
  int hop = 176;        // 11 ms
  int fft_size = 512;
  int n_mels = 40;
  double mel_lo_hz = 10.0;
  double mel_hi_hz = 1000.0;
  int n_coeffs = 40;
  double log_floor = 1e-10;
  double variance_floor = 1e-8;

  int window_samples() const { return static_cast<int>(window_s * sample_rate_hz + 0.5); }
  int n_frames() const { return (window_samples() - frame_len) / hop + 1; }
  void validate() const;
  bool operator==(const MfccConfig&) const = default;
};

/// One model input: n_coeffs rows (cepstral coefficients) by n_frames
/// columns (time), 40x44 with the default configuration.
struct MfccFrame {
  Eigen::MatrixXd values;
  double t_start = 0.0;
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Precomputed tables for one configuration. Immutable after construction;
/// safe to share across threads.
class MfccExtractor {
 public:
  explicit MfccExtractor(MfccConfig cfg = {});

  /// Natural-log mel energies, n_mels x n_frames.
  Eigen::MatrixXd log_mel(const Eigen::Ref<const Eigen::VectorXd>& window) const;
  /// Orthonormal DCT-II of each log-mel column, before standardization.
  Eigen::MatrixXd cepstra(const Eigen::Ref<const Eigen::VectorXd>& window) const;
  /// Standardized cepstra, see standardize().
  MfccFrame operator()(const Eigen::Ref<const Eigen::VectorXd>& window) const;

  const MfccConfig& config() const { return cfg_; }
  /// n_mels x (fft_size/2 + 1) triangular weights, unit peak.
  const Eigen::MatrixXd& mel_bank() const { return mel_bank_; }
  /// n_coeffs x n_mels orthonormal DCT-II basis.
  const Eigen::MatrixXd& dct() const { return dct_; }
  /// Lower edge, center and upper edge (Hz) of each filter.
  const std::vector<double>& edges_hz() const { return edges_hz_; }

 private:
  MfccConfig cfg_;
  Eigen::VectorXd window_fn_;
  Eigen::MatrixXd mel_bank_;
  Eigen::MatrixXd dct_;
  std::vector<double> edges_hz_;
};

const MfccExtractor& default_extractor();

/// Throws Error{WrongWindowLength} unless window has cfg.window_samples().
MfccFrame mfcc(const Eigen::Ref<const Eigen::VectorXd>& window, const MfccConfig& cfg = {});

/// The extractor's normalization: coefficient row 0 is centered on its own
/// (a gain change only shifts that row), then the whole matrix is scaled to
/// zero mean and unit variance.
Eigen::MatrixXd standardize(const Eigen::MatrixXd& m, double variance_floor);

inline constexpr double kSegmentStep_s = 0.05;
inline constexpr int kWindowsPerSegment = 11;

/// Eleven 0.5 s windows stepped by 0.05 s across a 1 s segment, each
/// transformed independently. Throws Error{WrongSegmentLength}.
std::vector<MfccFrame> segment_windows(const Eigen::Ref<const Eigen::VectorXd>& segment,
                                       const MfccExtractor& extractor = default_extractor());

/// Debug dump, rows = coefficients, columns = frames.
void write_csv(const MfccFrame& frame, const std::filesystem::path& path);

}  // namespace bonesound
