#include "sleepdet/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "sleepdet/conditioning.hpp"
#include "sleepdet/signal_io.hpp"

namespace sleepdet {

namespace fs = std::filesystem;

double SynthConfig::rate_for(EventClass cls) const {
  switch (cls) {
    case EventClass::Arousal: return arousal_rate;
    case EventClass::LimbMovement: return limb_rate;
    case EventClass::DisorderedBreathing: return breathing_rate;
  }
  throw std::logic_error("unreachable");
}

std::pair<double, double> SynthConfig::duration_for(EventClass cls) const {
  switch (cls) {
    case EventClass::Arousal: return arousal_duration;
    case EventClass::LimbMovement: return limb_duration;
    case EventClass::DisorderedBreathing: return breathing_duration;
  }
  throw std::logic_error("unreachable");
}

void SynthConfig::validate() const {
  if (!(duration_sec > 0.0) || !(fs > 0.0))
    throw std::invalid_argument("synth config: duration and fs must be > 0");
  for (EventClass cls : kAllEventClasses) {
    if (rate_for(cls) < 0.0)
      throw std::invalid_argument("synth config: negative event rate");
    const auto [lo, hi] = duration_for(cls);
    if (!(lo > 0.0) || lo > hi)
      throw std::invalid_argument("synth config: bad duration range");
    // occupancy guard: non-overlapping placement must remain feasible
    const double mean_dur = 0.5 * (lo + hi);
    const double max_rate = rate_for(cls) * (1.0 + rate_jitter);
    if (max_rate * (mean_dur + min_gap_sec) > 0.8 * 3600.0)
      throw std::invalid_argument(
          "synth config: rate too high to place non-overlapping events");
  }
}

namespace {

/// Paul Kellet's economy pink-noise filter driven by the supplied rng.
/// The 0.3352 factor scales the output to unit variance.
class PinkNoise {
 public:
  explicit PinkNoise(Rng& rng) : rng_(rng) {}

  double next() {
    const double white = rng_.normal();
    b0_ = 0.99765 * b0_ + white * 0.0990460;
    b1_ = 0.96300 * b1_ + white * 0.2965164;
    b2_ = 0.57000 * b2_ + white * 1.0526913;
    return (b0_ + b1_ + b2_ + white * 0.1848) * 0.3352;
  }

 private:
  Rng& rng_;
  double b0_ = 0.0, b1_ = 0.0, b2_ = 0.0;
};

std::vector<Event> schedule_events(EventClass cls, double rate_per_hour,
                                   const SynthConfig& config, Rng& rng) {
  std::vector<Event> events;
  if (rate_per_hour <= 0.0) return events;
  const auto [dur_lo, dur_hi] = config.duration_for(cls);
  const double mean_dur = 0.5 * (dur_lo + dur_hi);
  // compensate the dead time taken by the events themselves so the
  // realized count stays near rate * duration
  const double occupancy =
      rate_per_hour * (mean_dur + config.min_gap_sec) / 3600.0;
  const double eff_rate =
      rate_per_hour / std::max(1e-6, 1.0 - std::min(occupancy, 0.9)) / 3600.0;

  double cursor = config.edge_margin_sec;
  const double end = config.duration_sec - config.edge_margin_sec;
  while (true) {
    cursor += rng.exponential(eff_rate);
    const double duration = rng.uniform(dur_lo, dur_hi);
    if (cursor + duration > end) break;
    Event event;
    event.cls = cls;
    event.onset = cursor;
    event.duration = duration;
    events.push_back(event);
    cursor += duration + config.min_gap_sec;
  }
  return events;
}

/// Raised-cosine plateau envelope: 0 outside [onset, offset], smooth ramps
/// of `ramp` seconds just inside the interval.
double plateau(double t, double onset, double offset, double ramp) {
  if (t <= onset || t >= offset) return 0.0;
  const double from_start = t - onset;
  const double to_end = offset - t;
  double g = 1.0;
  if (from_start < ramp)
    g = std::min(g, 0.5 - 0.5 * std::cos(M_PI * from_start / ramp));
  if (to_end < ramp)
    g = std::min(g, 0.5 - 0.5 * std::cos(M_PI * to_end / ramp));
  return g;
}

}  // namespace

std::pair<Record, std::vector<Event>> generate_record(const SynthConfig& config,
                                                      std::uint64_t seed,
                                                      const std::string& id) {
  config.validate();
  Rng rng(seed);

  auto jittered = [&](double rate) {
    return rate * (1.0 + config.rate_jitter * (2.0 * rng.uniform() - 1.0));
  };
  std::vector<Event> arousals =
      schedule_events(EventClass::Arousal, jittered(config.arousal_rate),
                      config, rng);
  std::vector<Event> movements =
      schedule_events(EventClass::LimbMovement, jittered(config.limb_rate),
                      config, rng);
  std::vector<Event> apneas = schedule_events(
      EventClass::DisorderedBreathing, jittered(config.breathing_rate),
      config, rng);

  // terminal arousals: some breathing events trigger an arousal at their end
  const auto [ar_lo, ar_hi] = config.arousal_duration;
  for (const Event& apnea : apneas) {
    if (rng.uniform() >= config.cooccur_breathing_arousal) continue;
    Event arousal;
    arousal.cls = EventClass::Arousal;
    arousal.duration = rng.uniform(ar_lo, ar_hi);
    arousal.onset = apnea.offset() - 1.0 + rng.uniform(0.0, 1.0);
    if (arousal.onset < config.edge_margin_sec ||
        arousal.offset() > config.duration_sec - config.edge_margin_sec)
      continue;
    const bool clash = std::any_of(
        arousals.begin(), arousals.end(), [&](const Event& other) {
          return arousal.onset < other.offset() + config.min_gap_sec &&
                 other.onset < arousal.offset() + config.min_gap_sec;
        });
    if (!clash) arousals.push_back(arousal);
  }
  std::sort(arousals.begin(), arousals.end(),
            [](const Event& a, const Event& b) { return a.onset < b.onset; });

  const auto& names = canonical_channels();
  const auto num_samples =
      static_cast<Index>(std::llround(config.duration_sec * config.fs));
  Record record;
  record.id = id;
  record.channel_names = names;
  record.fs = config.fs;
  record.duration = config.duration_sec;
  record.samples.resize(static_cast<Index>(names.size()), num_samples);

  const double dt = 1.0 / config.fs;
  std::vector<double> channel(static_cast<std::size_t>(num_samples));

  for (std::size_t c = 0; c < names.size(); ++c) {
    const ChannelGroup group = channel_group(names[c]);
    Rng channel_rng(mix_seed(seed, 0xC000 + c));
    PinkNoise pink(channel_rng);
    const double phase = channel_rng.uniform(0.0, 2.0 * M_PI);
    const double burst_freq = channel_rng.uniform(12.0, 16.0);

    const bool respiratory = group == ChannelGroup::NasalPressure ||
                             group == ChannelGroup::Respiratory;
    const bool cortical = group == ChannelGroup::Cortical ||
                          names[c] == "ChinEMG";
    const bool leg = names[c] == "LegL" || names[c] == "LegR";

    for (Index t = 0; t < num_samples; ++t) {
      const double time = static_cast<double>(t) * dt;
      double value = config.background_noise * pink.next() +
                     config.sensor_noise * channel_rng.normal();
      if (respiratory) {
        value = 0.3 * value +
                config.breath_amp *
                    std::sin(2.0 * M_PI * config.breath_freq_hz * time + phase);
      }
      channel[static_cast<std::size_t>(t)] = value;
    }

    if (cortical) {
      for (const Event& event : arousals) {
        const double ramp = std::min(0.5, 0.25 * event.duration);
        const auto t_lo = static_cast<Index>(event.onset * config.fs);
        const auto t_hi =
            std::min(num_samples,
                     static_cast<Index>(event.offset() * config.fs) + 1);
        for (Index t = t_lo; t < t_hi; ++t) {
          const double time = static_cast<double>(t) * dt;
          const double env =
              plateau(time, event.onset, event.offset(), ramp);
          channel[static_cast<std::size_t>(t)] +=
              config.arousal_burst_amp * env *
              std::sin(2.0 * M_PI * burst_freq * time + phase);
        }
      }
    }
    if (leg) {
      for (const Event& event : movements) {
        const double ramp = std::min(0.1, 0.25 * event.duration);
        const auto t_lo = static_cast<Index>(event.onset * config.fs);
        const auto t_hi =
            std::min(num_samples,
                     static_cast<Index>(event.offset() * config.fs) + 1);
        for (Index t = t_lo; t < t_hi; ++t) {
          const double time = static_cast<double>(t) * dt;
          const double env =
              plateau(time, event.onset, event.offset(), ramp);
          channel[static_cast<std::size_t>(t)] +=
              config.limb_burst_amp * env * std::abs(channel_rng.normal());
        }
      }
    }
    if (respiratory) {
      for (const Event& event : apneas) {
        Rng att_rng(mix_seed(seed, 0xA77 + static_cast<std::uint64_t>(
                                               event.onset * 1000.0)));
        const double attenuation = att_rng.uniform(
            config.breathing_attenuation.first,
            config.breathing_attenuation.second);
        const double ramp = std::min(1.5, 0.25 * event.duration);
        const auto t_lo = static_cast<Index>(event.onset * config.fs);
        const auto t_hi =
            std::min(num_samples,
                     static_cast<Index>(event.offset() * config.fs) + 1);
        for (Index t = t_lo; t < t_hi; ++t) {
          const double time = static_cast<double>(t) * dt;
          const double env =
              plateau(time, event.onset, event.offset(), ramp);
          channel[static_cast<std::size_t>(t)] *= 1.0 - attenuation * env;
        }
      }
    }

    for (Index t = 0; t < num_samples; ++t)
      record.samples(static_cast<Index>(c), t) =
          static_cast<float>(channel[static_cast<std::size_t>(t)]);
  }

  std::vector<Event> all_events;
  all_events.insert(all_events.end(), arousals.begin(), arousals.end());
  all_events.insert(all_events.end(), movements.begin(), movements.end());
  all_events.insert(all_events.end(), apneas.begin(), apneas.end());
  std::sort(all_events.begin(), all_events.end(),
            [](const Event& a, const Event& b) { return a.onset < b.onset; });
  return {std::move(record), std::move(all_events)};
}

DatasetManifest generate_dataset(int n_records, const SynthConfig& config,
                                 std::uint64_t seed,
                                 const std::string& out_dir) {
  if (n_records < 3)
    throw std::invalid_argument("generate_dataset: need at least 3 records");
  config.validate();
  fs::create_directories(out_dir);

  DatasetManifest manifest;
  manifest.seed = seed;
  for (int i = 0; i < n_records; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "record_%03d", i);
    const auto record_seed = mix_seed(seed, static_cast<std::uint64_t>(i));
    auto [record, events] = generate_record(config, record_seed, name);

    ManifestEntry entry;
    entry.record_path = (fs::path(out_dir) / (std::string(name) + ".rec")).string();
    entry.annotation_path =
        (fs::path(out_dir) / (std::string(name) + ".events.json")).string();
    save_record(record, entry.record_path);
    save_annotations(events, entry.annotation_path);
    manifest.entries.push_back(entry);
  }
  return split_dataset(manifest, {0.7, 0.1, 0.2}, seed);
}

}  // namespace sleepdet
