#include "sleepdet/conditioning.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace sleepdet {

namespace {

using Complex = std::complex<double>;

/// Prototype lowpass poles of a Butterworth filter of the given order,
/// normalized to unit cutoff (all on the left-half-plane unit circle).
std::vector<Complex> butterworth_prototype(int order) {
  std::vector<Complex> poles;
  poles.reserve(static_cast<std::size_t>(order));
  for (int k = 1; k <= order; ++k) {
    const double theta = M_PI * (2.0 * k - 1.0) / (2.0 * order);
    poles.emplace_back(-std::sin(theta), std::cos(theta));
  }
  return poles;
}

double prewarp(double hz, double fs) {
  return 2.0 * fs * std::tan(M_PI * hz / fs);
}

struct AnalogDesign {
  std::vector<Complex> poles;
  std::vector<Complex> zeros;   // finite zeros only
  int zeros_at_infinity = 0;
  double gain = 1.0;            // numerator leading coefficient
};

AnalogDesign analog_highpass(int order, double omega_c) {
  AnalogDesign design;
  for (const Complex& p : butterworth_prototype(order)) {
    design.poles.push_back(omega_c / p);
    design.zeros.emplace_back(0.0, 0.0);
  }
  // H(s) = s^n / prod(s - p): unity gain at infinite frequency.
  design.gain = 1.0;
  return design;
}

AnalogDesign analog_bandpass(int order, double omega_lo, double omega_hi) {
  AnalogDesign design;
  const double bw = omega_hi - omega_lo;
  const double omega_sq = omega_lo * omega_hi;
  for (const Complex& p : butterworth_prototype(order)) {
    // lowpass-to-bandpass substitution: roots of s^2 - bw*p*s + omega0^2.
    const Complex half = 0.5 * bw * p;
    const Complex root = std::sqrt(half * half - omega_sq);
    design.poles.push_back(half + root);
    design.poles.push_back(half - root);
    design.zeros.emplace_back(0.0, 0.0);
  }
  design.zeros_at_infinity = order;
  // H(s) = (bw*s)^n / prod(s - p); prototype constant term is 1.
  design.gain = std::pow(bw, order);
  return design;
}

struct DigitalDesign {
  std::vector<Complex> poles;
  std::vector<Complex> zeros;
  double gain = 1.0;
};

/// Bilinear transform s = c (z-1)/(z+1) with c = 2 fs. Analog zeros at
/// infinity land on z = -1.
DigitalDesign bilinear(const AnalogDesign& analog, double fs) {
  const double c = 2.0 * fs;
  DigitalDesign digital;
  Complex gain = analog.gain;
  for (const Complex& z : analog.zeros) {
    digital.zeros.push_back((c + z) / (c - z));
    gain *= (c - z);
  }
  for (const Complex& p : analog.poles) {
    digital.poles.push_back((c + p) / (c - p));
    gain /= (c - p);
  }
  for (int i = 0; i < analog.zeros_at_infinity; ++i)
    digital.zeros.emplace_back(-1.0, 0.0);
  // Degree difference contributes (z+1)^(n_p - n_z_total); with the
  // Butterworth designs used here poles and zeros balance exactly.
  digital.gain = gain.real();
  return digital;
}

/// Groups conjugate roots into quadratic factors (1 + c1 z^-1 + c2 z^-2).
std::vector<std::pair<double, double>> conjugate_quadratics(
    std::vector<Complex> roots) {
  std::vector<std::pair<double, double>> quads;
  std::vector<bool> used(roots.size(), false);
  for (std::size_t i = 0; i < roots.size(); ++i) {
    if (used[i]) continue;
    used[i] = true;
    if (std::abs(roots[i].imag()) < 1e-12) {
      // pair real roots together
      std::size_t j = i + 1;
      while (j < roots.size() &&
             (used[j] || std::abs(roots[j].imag()) >= 1e-12))
        ++j;
      if (j < roots.size()) {
        used[j] = true;
        quads.emplace_back(-(roots[i].real() + roots[j].real()),
                           roots[i].real() * roots[j].real());
      } else {
        quads.emplace_back(-roots[i].real(), 0.0);
      }
    } else {
      // find the conjugate
      std::size_t j = i + 1;
      while (j < roots.size() &&
             (used[j] || std::abs(roots[j] - std::conj(roots[i])) > 1e-8))
        ++j;
      if (j >= roots.size())
        throw std::runtime_error("design_filter: unpaired complex root");
      used[j] = true;
      quads.emplace_back(-2.0 * roots[i].real(), std::norm(roots[i]));
    }
  }
  return quads;
}

}  // namespace

double FilterCoeffs::magnitude(double hz, double fs) const {
  const Complex z = std::polar(1.0, 2.0 * M_PI * hz / fs);
  const Complex zi = 1.0 / z;
  Complex response = 1.0;
  for (const auto& s : sections) {
    response *= (s.b0 + s.b1 * zi + s.b2 * zi * zi) /
                (1.0 + s.a1 * zi + s.a2 * zi * zi);
  }
  return std::abs(response);
}

double FilterCoeffs::max_pole_radius() const {
  double radius = 0.0;
  for (const auto& s : sections) {
    const Complex disc = Complex(s.a1 * s.a1 - 4.0 * s.a2, 0.0);
    const Complex root = std::sqrt(disc);
    radius = std::max(radius, std::abs((-s.a1 + root) / 2.0));
    radius = std::max(radius, std::abs((-s.a1 - root) / 2.0));
  }
  return radius;
}

FilterCoeffs design_filter(const FilterSpec& spec, double fs) {
  if (!(fs > 0.0)) throw std::invalid_argument("design_filter: fs must be > 0");
  if (spec.order != 2 && spec.order != 4)
    throw std::invalid_argument("design_filter: order must be 2 or 4");
  const double nyquist = 0.5 * fs;

  AnalogDesign analog;
  if (spec.kind == FilterSpec::Kind::Highpass) {
    if (!(spec.low_hz > 0.0) || spec.low_hz >= nyquist)
      throw std::invalid_argument(
          "design_filter: cutoff must lie in (0, fs/2)");
    analog = analog_highpass(spec.order, prewarp(spec.low_hz, fs));
  } else {
    if (!(spec.low_hz > 0.0) || spec.high_hz >= nyquist ||
        spec.low_hz >= spec.high_hz)
      throw std::invalid_argument(
          "design_filter: band edges must satisfy 0 < lo < hi < fs/2");
    analog = analog_bandpass(spec.order, prewarp(spec.low_hz, fs),
                             prewarp(spec.high_hz, fs));
  }

  const DigitalDesign digital = bilinear(analog, fs);
  auto pole_quads = conjugate_quadratics(digital.poles);
  auto zero_quads = conjugate_quadratics(digital.zeros);
  if (pole_quads.size() != zero_quads.size())
    throw std::runtime_error("design_filter: section count mismatch");

  // Sort pole sections by modulus so the most resonant biquad comes last.
  std::vector<std::size_t> order_idx(pole_quads.size());
  std::iota(order_idx.begin(), order_idx.end(), 0);
  std::stable_sort(order_idx.begin(), order_idx.end(),
                   [&](std::size_t a, std::size_t b) {
                     return pole_quads[a].second < pole_quads[b].second;
                   });

  FilterCoeffs coeffs;
  const auto nsec = pole_quads.size();
  const double section_gain =
      std::pow(std::abs(digital.gain), 1.0 / static_cast<double>(nsec));
  const double sign = digital.gain < 0.0 ? -1.0 : 1.0;
  for (std::size_t s = 0; s < nsec; ++s) {
    const auto& pq = pole_quads[order_idx[s]];
    const auto& zq = zero_quads[s];
    Biquad biquad;
    const double g = (s == 0 ? sign : 1.0) * section_gain;
    biquad.b0 = g;
    biquad.b1 = g * zq.first;
    biquad.b2 = g * zq.second;
    biquad.a1 = pq.first;
    biquad.a2 = pq.second;
    coeffs.sections.push_back(biquad);
  }

  if (coeffs.max_pole_radius() >= 1.0)
    throw std::runtime_error("design_filter: unstable section produced");
  return coeffs;
}

namespace {

/// Steady-state (direct form II transposed) state for a unit-valued input,
/// used to suppress start-up transients.
std::pair<double, double> section_step_state(const Biquad& s) {
  // Solve for z1, z2 with x = 1, y = H(1):
  //   y  = b0 + z1
  //   z1 = b1 - a1*y + z2
  //   z2 = b2 - a2*y
  const double denom = 1.0 + s.a1 + s.a2;
  const double h1 = (s.b0 + s.b1 + s.b2) / denom;
  const double z2 = s.b2 - s.a2 * h1;
  const double z1 = s.b1 - s.a1 * h1 + z2;
  return {z1, z2};
}

double section_dc_gain(const Biquad& s) {
  return (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
}

Vector sos_filter_zi(const Vector& signal, const FilterCoeffs& coeffs,
                     double x0) {
  Vector y = signal;
  double level = x0;  // steady input level entering the current section
  for (const auto& s : coeffs.sections) {
    auto [z1, z2] = section_step_state(s);
    z1 *= level;
    z2 *= level;
    for (Index n = 0; n < y.size(); ++n) {
      const double x = y(n);
      const double out = s.b0 * x + z1;
      z1 = s.b1 * x - s.a1 * out + z2;
      z2 = s.b2 * x - s.a2 * out;
      y(n) = out;
    }
    level *= section_dc_gain(s);
  }
  return y;
}

}  // namespace

Vector sos_filter(const Vector& signal, const FilterCoeffs& coeffs) {
  Vector y = signal;
  for (const auto& s : coeffs.sections) {
    double z1 = 0.0, z2 = 0.0;
    for (Index n = 0; n < y.size(); ++n) {
      const double x = y(n);
      const double out = s.b0 * x + z1;
      z1 = s.b1 * x - s.a1 * out + z2;
      z2 = s.b2 * x - s.a2 * out;
      y(n) = out;
    }
  }
  return y;
}

Vector zero_phase_filter(const Vector& signal, const FilterCoeffs& coeffs) {
  const int filter_order = 2 * coeffs.num_sections();
  const Index pad = 3 * static_cast<Index>(filter_order);
  if (signal.size() <= 3 * filter_order)
    throw std::invalid_argument(
        "zero_phase_filter: signal too short for edge padding");

  const Index n = signal.size();
  Vector padded(n + 2 * pad);
  // odd reflection about the first/last samples
  for (Index i = 0; i < pad; ++i)
    padded(i) = 2.0 * signal(0) - signal(pad - i);
  padded.segment(pad, n) = signal;
  for (Index i = 0; i < pad; ++i)
    padded(pad + n + i) = 2.0 * signal(n - 1) - signal(n - 2 - i);

  Vector forward = sos_filter_zi(padded, coeffs, padded(0));
  forward.reverseInPlace();
  Vector backward = sos_filter_zi(forward, coeffs, forward(0));
  backward.reverseInPlace();
  return backward.segment(pad, n);
}

namespace {

double bessel_i0(double x) {
  // power series; converges quickly for the beta values used here
  const double half_sq = 0.25 * x * x;
  double term = 1.0;
  double sum = 1.0;
  for (int k = 1; k < 64; ++k) {
    term *= half_sq / (static_cast<double>(k) * k);
    sum += term;
    if (term < 1e-18 * sum) break;
  }
  return sum;
}

/// Best rational approximation p/q to `value` with q <= max_den
/// (Stern-Brocot search).
std::pair<std::int64_t, std::int64_t> to_rational(double value,
                                                  std::int64_t max_den) {
  std::int64_t a = 0, b = 1, c = 1, d = 0;  // a/b < value < c/d
  while (b + d <= max_den) {
    const std::int64_t num = a + c;
    const std::int64_t den = b + d;
    const double mediant = static_cast<double>(num) / static_cast<double>(den);
    if (std::abs(mediant - value) < 1e-12 * value) return {num, den};
    if (mediant < value) {
      a = num;
      b = den;
    } else {
      c = num;
      d = den;
    }
  }
  const double lo_err = std::abs(static_cast<double>(a) / b - value);
  const double hi_err = d == 0 ? std::numeric_limits<double>::infinity()
                               : std::abs(static_cast<double>(c) / d - value);
  return lo_err <= hi_err ? std::make_pair(a, b) : std::make_pair(c, d);
}

}  // namespace

Vector resample(const Vector& signal, double fs_in, double fs_out) {
  if (!(fs_in > 0.0) || !(fs_out > 0.0))
    throw std::invalid_argument("resample: sampling rates must be positive");
  if (fs_in == fs_out) return signal;

  const auto [up, down] = to_rational(fs_out / fs_in, 1000);
  if (up <= 0 ||
      std::abs(static_cast<double>(up) / static_cast<double>(down) -
               fs_out / fs_in) > 1e-9 * (fs_out / fs_in))
    throw std::invalid_argument(
        "resample: rate ratio has no rational form with denominator <= 1000");

  const std::int64_t max_rate = std::max(up, down);
  const std::int64_t half_len = 10 * max_rate;
  const double cutoff = M_PI / static_cast<double>(max_rate);
  const double beta = 5.0;

  // Kaiser-windowed sinc, normalized to unit DC gain, scaled by the
  // upsampling factor to preserve amplitude.
  Vector taps(2 * half_len + 1);
  const double i0_beta = bessel_i0(beta);
  for (std::int64_t k = -half_len; k <= half_len; ++k) {
    const double ideal =
        k == 0 ? cutoff / M_PI
               : std::sin(cutoff * static_cast<double>(k)) /
                     (M_PI * static_cast<double>(k));
    const double frac = static_cast<double>(k) / static_cast<double>(half_len);
    const double window = bessel_i0(beta * std::sqrt(1.0 - frac * frac)) / i0_beta;
    taps(k + half_len) = ideal * window;
  }
  taps *= static_cast<double>(up) / taps.sum();

  const Index n_in = signal.size();
  const auto n_out = static_cast<Index>(
      (static_cast<std::int64_t>(n_in) * up + down - 1) / down);
  Vector out = Vector::Zero(n_out);
  for (Index j = 0; j < n_out; ++j) {
    // position of output sample j on the upsampled grid, filter centered
    const std::int64_t pos = static_cast<std::int64_t>(j) * down + half_len;
    // taps index t = pos - i*up must satisfy 0 <= t <= 2*half_len
    std::int64_t i_lo = (pos - 2 * half_len + up - 1) / up;
    std::int64_t i_hi = pos / up;
    i_lo = std::max<std::int64_t>(i_lo, 0);
    i_hi = std::min<std::int64_t>(i_hi, n_in - 1);
    double acc = 0.0;
    for (std::int64_t i = i_lo; i <= i_hi; ++i)
      acc += taps(pos - i * up) * signal(i);
    out(j) = acc;
  }
  return out;
}

ChannelStats compute_stats(const Matrix& signal) {
  ChannelStats stats;
  stats.mean = signal.rowwise().mean();
  const Matrix centered = signal.colwise() - stats.mean;
  stats.std = (centered.array().square().rowwise().mean()).sqrt().matrix();
  stats.std = stats.std.array().max(kStdFloor).matrix();
  return stats;
}

Matrix standardize(const Matrix& signal, const ChannelStats& stats) {
  if (signal.rows() != stats.mean.size() ||
      signal.rows() != stats.std.size())
    throw std::invalid_argument("standardize: stats shape mismatch");
  return (signal.colwise() - stats.mean).array().colwise() /
         stats.std.array();
}

ChannelGroup channel_group(const std::string& channel_name) {
  if (channel_name == "C3" || channel_name == "C4" ||
      channel_name == "EOGL" || channel_name == "EOGR")
    return ChannelGroup::Cortical;
  if (channel_name == "ChinEMG" || channel_name == "LegL" ||
      channel_name == "LegR")
    return ChannelGroup::Muscular;
  if (channel_name == "NasalPres") return ChannelGroup::NasalPressure;
  if (channel_name == "Thorax" || channel_name == "Abdomen")
    return ChannelGroup::Respiratory;
  throw std::invalid_argument("unknown channel '" + channel_name + "'");
}

FilterSpec group_filter_spec(ChannelGroup group) {
  FilterSpec spec;
  switch (group) {
    case ChannelGroup::Cortical:
      spec.kind = FilterSpec::Kind::Bandpass;
      spec.order = 2;
      spec.low_hz = 0.3;
      spec.high_hz = 35.0;
      break;
    case ChannelGroup::Muscular:
      spec.kind = FilterSpec::Kind::Highpass;
      spec.order = 4;
      spec.low_hz = 10.0;
      break;
    case ChannelGroup::NasalPressure:
      spec.kind = FilterSpec::Kind::Highpass;
      spec.order = 4;
      spec.low_hz = 0.03;
      break;
    case ChannelGroup::Respiratory:
      spec.kind = FilterSpec::Kind::Bandpass;
      spec.order = 2;
      spec.low_hz = 0.1;
      spec.high_hz = 15.0;
      break;
  }
  return spec;
}

Record condition_record(const Record& record, double target_fs) {
  for (const auto& name : canonical_channels()) {
    if (record.channel_index(name) < 0)
      throw std::invalid_argument("condition_record: missing channel '" +
                                  name + "'");
  }

  // Design each group's filter once at the target rate.
  std::vector<FilterCoeffs> group_coeffs;
  for (auto group :
       {ChannelGroup::Cortical, ChannelGroup::Muscular,
        ChannelGroup::NasalPressure, ChannelGroup::Respiratory}) {
    group_coeffs.push_back(design_filter(group_filter_spec(group), target_fs));
  }

  Matrix filtered;
  Index num_samples = -1;
  for (std::size_t c = 0; c < record.channel_names.size(); ++c) {
    const Vector raw =
        record.samples.row(static_cast<Index>(c)).cast<double>().transpose();
    Vector x = resample(raw, record.fs, target_fs);
    const auto group = channel_group(record.channel_names[c]);
    x = zero_phase_filter(x, group_coeffs[static_cast<std::size_t>(group)]);
    if (num_samples < 0) {
      num_samples = x.size();
      filtered.resize(static_cast<Index>(record.channel_names.size()),
                      num_samples);
    }
    filtered.row(static_cast<Index>(c)) = x.transpose();
  }

  const ChannelStats stats = compute_stats(filtered);
  const Matrix standardized = standardize(filtered, stats);

  Record out;
  out.id = record.id;
  out.channel_names = record.channel_names;
  out.fs = target_fs;
  out.duration = static_cast<double>(num_samples) / target_fs;
  out.samples = standardized.cast<float>();
  return out;
}

}  // namespace sleepdet
