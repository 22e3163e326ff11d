#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace sleepdet {

using Scalar = double;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Array = Eigen::ArrayXd;
using MatrixF = Eigen::MatrixXf;
using Index = Eigen::Index;

/// Sleep micro-event categories handled by the toolkit.
enum class EventClass { Arousal, LimbMovement, DisorderedBreathing };

constexpr std::array<EventClass, 3> kAllEventClasses = {
    EventClass::Arousal, EventClass::LimbMovement,
    EventClass::DisorderedBreathing};

std::string to_string(EventClass cls);
EventClass event_class_from_string(const std::string& name);

/// Annotated interval. Onset and duration are in seconds relative to the
/// start of the record (or the start of a segment once extracted).
struct Event {
  EventClass cls = EventClass::Arousal;
  double onset = 0.0;
  double duration = 0.0;

  double center() const { return onset + 0.5 * duration; }
  double offset() const { return onset + duration; }
};

/// Multichannel signal with named channels. Samples are stored as float32,
/// matching the on-disk format; one row per channel.
struct Record {
  std::string id;
  std::vector<std::string> channel_names;
  MatrixF samples;  // channels x samples
  double fs = 0.0;
  double duration = 0.0;  // seconds

  Index num_channels() const { return samples.rows(); }
  Index num_samples() const { return samples.cols(); }
  int channel_index(const std::string& name) const;
};

/// A decoded model prediction for one event.
struct Detection {
  EventClass cls = EventClass::Arousal;
  double probability = 0.0;
  double center = 0.0;    // seconds
  double duration = 0.0;  // seconds

  double onset() const { return center - 0.5 * duration; }
  double offset() const { return center + 0.5 * duration; }
};

enum class Split { Train, Eval, Test };

std::string to_string(Split split);
Split split_from_string(const std::string& name);

struct ManifestEntry {
  std::string record_path;
  std::string annotation_path;
  Split split = Split::Train;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::uint64_t seed = 0;

  std::vector<ManifestEntry> entries_for(Split split) const;
};

/// Canonical channel layout expected by the conditioning pipeline:
/// two central EEGs, two EOGs, one chin EMG, two leg EMGs, nasal pressure
/// and two respiratory effort belts.
const std::vector<std::string>& canonical_channels();

}  // namespace sleepdet
