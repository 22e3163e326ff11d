#pragma once

#include <vector>

#include "sleepdet/types.hpp"

namespace sleepdet {

/// Butterworth design request. `order` is the analog prototype order, so a
/// 2nd-order bandpass yields two biquad sections (four poles).
struct FilterSpec {
  enum class Kind { Bandpass, Highpass };
  Kind kind = Kind::Highpass;
  int order = 2;
  double low_hz = 0.0;   // lower edge (bandpass) or cutoff (highpass)
  double high_hz = 0.0;  // upper edge (bandpass only)
};

/// One second-order section of the cascade, normalized so a0 = 1.
struct Biquad {
  double b0 = 0.0, b1 = 0.0, b2 = 0.0;
  double a1 = 0.0, a2 = 0.0;
};

struct FilterCoeffs {
  std::vector<Biquad> sections;

  int num_sections() const { return static_cast<int>(sections.size()); }
  /// Magnitude of the single-pass frequency response at `hz`.
  double magnitude(double hz, double fs) const;
  /// Largest pole modulus across sections; < 1 for a stable cascade.
  double max_pole_radius() const;
};

/// Designs a digital Butterworth filter with the bilinear transform and
/// prewarped band edges, so the -3 dB points land exactly on the requested
/// frequencies.
FilterCoeffs design_filter(const FilterSpec& spec, double fs);

/// Single forward pass through the section cascade (zero initial state).
Vector sos_filter(const Vector& signal, const FilterCoeffs& coeffs);

/// Forward-backward application: zero net phase, squared magnitude
/// response. Edges are odd-reflection padded by 3*(2*sections) samples and
/// each pass starts from the steady-state response to the first sample.
Vector zero_phase_filter(const Vector& signal, const FilterCoeffs& coeffs);

/// Polyphase rational resampling with a Kaiser(beta=5.0) lowpass. Output
/// length is ceil(n * fs_out / fs_in); equal rates return the input as-is.
Vector resample(const Vector& signal, double fs_in, double fs_out);

/// Per-channel standardization statistics. Standard deviations are clamped
/// below at epsilon so constant channels map to zero.
struct ChannelStats {
  Vector mean;
  Vector std;
};

constexpr double kStdFloor = 1e-8;

ChannelStats compute_stats(const Matrix& signal);
Matrix standardize(const Matrix& signal, const ChannelStats& stats);

/// Frequency band assignment used for the four filter groups.
enum class ChannelGroup { Cortical, Muscular, NasalPressure, Respiratory };

ChannelGroup channel_group(const std::string& channel_name);
FilterSpec group_filter_spec(ChannelGroup group);

/// Full conditioning pipeline: resample every channel to target_fs (default
/// 128 Hz), zero-phase filter by channel group, then standardize per channel
/// with statistics computed from the filtered record.
Record condition_record(const Record& record, double target_fs = 128.0);

}  // namespace sleepdet
