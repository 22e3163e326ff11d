#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "sleepdet/rng.hpp"
#include "sleepdet/types.hpp"

namespace sleepdet {

/// Synthetic polysomnogram generator configuration. Signatures are
/// class-separable by channel group: arousal bursts live in the cortical
/// channels, movement bursts in the leg channels and breathing attenuation
/// in the respiratory channels, so each network stream carries exactly the
/// information its event class needs.
struct SynthConfig {
  double duration_sec = 3600.0;
  double fs = 128.0;

  // events per hour; per-record rates are jittered by +-rate_jitter so
  // index regressions across records have real spread
  double arousal_rate = 25.0;
  double limb_rate = 30.0;
  double breathing_rate = 15.0;
  double rate_jitter = 0.5;

  std::pair<double, double> arousal_duration = {3.0, 15.0};
  std::pair<double, double> limb_duration = {0.5, 10.0};
  std::pair<double, double> breathing_duration = {10.0, 60.0};

  double arousal_burst_amp = 3.0;   // 12-16 Hz burst gain over background
  double limb_burst_amp = 5.0;      // rectified noise burst gain
  std::pair<double, double> breathing_attenuation = {0.80, 0.95};

  double breath_freq_hz = 0.27;
  double breath_amp = 3.0;
  double background_noise = 1.0;    // pink noise sd
  double sensor_noise = 0.3;        // additive white noise sd
  double min_gap_sec = 2.0;         // between events of one class
  double edge_margin_sec = 5.0;
  double cooccur_breathing_arousal = 0.3;

  double rate_for(EventClass cls) const;
  std::pair<double, double> duration_for(EventClass cls) const;
  void validate() const;
};

/// One synthetic record plus its exact annotations (sorted by onset).
std::pair<Record, std::vector<Event>> generate_record(const SynthConfig& config,
                                                      std::uint64_t seed,
                                                      const std::string& id);

/// Writes n records and their annotations under out_dir and returns a
/// manifest with a deterministic 70/10/20 split.
DatasetManifest generate_dataset(int n_records, const SynthConfig& config,
                                 std::uint64_t seed,
                                 const std::string& out_dir);

}  // namespace sleepdet
