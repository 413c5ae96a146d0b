#include "bonesound/filter.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <nlohmann/json.hpp>

#include "bonesound/error.hpp"

namespace bonesound {

using cplx = std::complex<double>;

cplx Biquad::response(double omega) const {
  const cplx z1 = std::polar(1.0, -omega);
  const cplx z2 = z1 * z1;
  return (b0 + b1 * z1 + b2 * z2) / (1.0 + a1 * z1 + a2 * z2);
}

cplx BiquadCascade::response(double frequency_hz) const {
  const double omega = 2.0 * std::numbers::pi * frequency_hz / meta.sample_rate_hz;
  cplx h = 1.0;
  for (const auto& s : sections) h *= s.response(omega);
  return h;
}

BiquadCascade design_bandpass(double low_hz, double high_hz, int prototype_order,
                              int sample_rate_hz) {
  if (sample_rate_hz <= 0) throw Error(ErrorCode::InvalidBand, "sample rate must be positive");
  const double nyquist = sample_rate_hz / 2.0;
  if (!(low_hz > 0.0 && low_hz < high_hz && high_hz < nyquist)) {
    throw Error(ErrorCode::InvalidBand, "need 0 < low < high < fs/2");
  }
  if (prototype_order < 2 || prototype_order % 2 != 0) {
    throw Error(ErrorCode::InvalidArgument, "prototype order must be even and >= 2");
  }

  const double fs = sample_rate_hz;
  const double fs2 = 2.0 * fs;
  const double warped_lo = fs2 * std::tan(std::numbers::pi * low_hz / fs);
  const double warped_hi = fs2 * std::tan(std::numbers::pi * high_hz / fs);
  const double bandwidth = warped_hi - warped_lo;
  const double center = std::sqrt(warped_lo * warped_hi);

  // Only the upper-half-plane digital poles are kept; each pairs with its
  // conjugate in one section.
  std::vector<cplx> poles;
  const int n = prototype_order;
  for (int k = 1; k <= n; ++k) {
    const cplx proto = std::polar(1.0, std::numbers::pi * (2.0 * k + n - 1) / (2.0 * n));
    const cplx lp = proto * (bandwidth / 2.0);
    const cplx root = std::sqrt(lp * lp - center * center);
    for (const cplx s : {lp + root, lp - root}) {
      const cplx z = (fs2 + s) / (fs2 - s);
      if (z.imag() > 0.0) poles.push_back(z);
    }
  }
  if (static_cast<int>(poles.size()) != n) {
    throw Error(ErrorCode::UnstableDesign, "expected complex-conjugate pole pairs");
  }
  std::sort(poles.begin(), poles.end(),
            [](const cplx& a, const cplx& b) { return std::abs(a) < std::abs(b); });

  BiquadCascade out;
  out.meta = BandpassDesign{low_hz, high_hz, prototype_order, sample_rate_hz};
  const double center_digital = 2.0 * std::atan(center / fs2);
  for (const cplx& p : poles) {
    // Zeros at z = +1 and z = -1 in every section.
    Biquad s{1.0, 0.0, -1.0, -2.0 * p.real(), std::norm(p)};
    const double g = std::abs(s.response(center_digital));
    if (!std::isfinite(g) || g == 0.0) throw Error(ErrorCode::UnstableDesign, "degenerate section");
    s.b0 /= g;
    s.b2 /= g;
    if (!s.stable()) throw Error(ErrorCode::UnstableDesign, "section pole outside unit circle");
    out.sections.push_back(s);
  }
  return out;
}

FilterState::FilterState(const BiquadCascade& filter)
    : filter_(&filter), state_(filter.sections.size(), {0.0, 0.0}) {}

double FilterState::process(double x) {
  const auto& sections = filter_->sections;
  for (std::size_t i = 0; i < sections.size(); ++i) {
    const Biquad& s = sections[i];
    auto& st = state_[i];
    const double y = s.b0 * x + st[0];
    st[0] = s.b1 * x - s.a1 * y + st[1];
    st[1] = s.b2 * x - s.a2 * y;
    x = y;
  }
  return x;
}

void FilterState::process(std::span<const double> in, std::span<double> out) {
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = process(in[i]);
}

void FilterState::reset() { std::fill(state_.begin(), state_.end(), std::array<double, 2>{0.0, 0.0}); }

AudioClip apply(const BiquadCascade& filter, const AudioClip& clip) {
  if (clip.sample_rate_hz != filter.meta.sample_rate_hz) {
    throw Error(ErrorCode::RateMismatch, "clip rate " + std::to_string(clip.sample_rate_hz) +
                                             " vs design rate " +
                                             std::to_string(filter.meta.sample_rate_hz));
  }
  FilterState state(filter);
  AudioClip out(Eigen::VectorXd(clip.size()), clip.sample_rate_hz);
  state.process(std::span<const double>(clip.samples.data(), clip.samples.size()),
                std::span<double>(out.samples.data(), out.samples.size()));
  return out;
}

nlohmann::json to_json(const BiquadCascade& filter) {
  nlohmann::json sections = nlohmann::json::array();
  for (const auto& s : filter.sections) sections.push_back({s.b0, s.b1, s.b2, s.a1, s.a2});
  return {{"sections", sections},
          {"meta",
           {{"low_hz", filter.meta.low_hz},
            {"high_hz", filter.meta.high_hz},
            {"prototype_order", filter.meta.prototype_order},
            {"sample_rate_hz", filter.meta.sample_rate_hz}}}};
}

BiquadCascade cascade_from_json(const nlohmann::json& j) {
  BiquadCascade out;
  const auto& m = j.at("meta");
  out.meta = BandpassDesign{m.at("low_hz").get<double>(), m.at("high_hz").get<double>(),
                            m.at("prototype_order").get<int>(), m.at("sample_rate_hz").get<int>()};
  for (const auto& row : j.at("sections")) {
    if (row.size() != 5) throw Error(ErrorCode::ShapeMismatch, "section needs 5 coefficients");
    out.sections.push_back(Biquad{row[0].get<double>(), row[1].get<double>(), row[2].get<double>(),
                                  row[3].get<double>(), row[4].get<double>()});
  }
  return out;
}

}  // namespace bonesound
