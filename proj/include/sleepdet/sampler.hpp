#pragma once

#include <memory>
#include <string>
#include <vector>

#include "sleepdet/rng.hpp"
#include "sleepdet/types.hpp"

namespace sleepdet {

/// A conditioned record paired with its annotations.
struct LoadedRecord {
  Record record;
  std::vector<Event> events;
};

/// Loads and conditions manifest entries once, caching by path.
class RecordStore {
 public:
  std::shared_ptr<const LoadedRecord> get(const ManifestEntry& entry);
  void clear() { cache_.clear(); }

 private:
  std::vector<std::pair<std::string, std::shared_ptr<const LoadedRecord>>>
      cache_;
};

/// Training segment: standardized signal slice plus the events overlapping
/// it, expressed relative to its start. Events keep their full extent even
/// when they overhang the segment boundary, so localization targets always
/// describe the true interval.
struct SegmentSample {
  Matrix signal;  // C x T, double precision for the network
  std::vector<Event> events;
  std::string record_id;
  double start_sec = 0.0;
};

/// Class-balanced event-centered segment draw: a class is picked uniformly
/// among those present (restricted to allowed_classes), an event of that
/// class uniformly, and the segment start uniformly from
/// [midpoint - T, midpoint] clipped to the record, so the chosen event's
/// midpoint always falls inside the segment.
SegmentSample sample_segment(const Record& record,
                             const std::vector<Event>& events,
                             double segment_seconds, Rng& rng,
                             const std::vector<EventClass>& allowed_classes);

/// Events overlapping [start, start+T], shifted to segment time (unclipped).
std::vector<Event> events_in_segment(const std::vector<Event>& events,
                                     double start_sec, double segment_seconds,
                                     const std::vector<EventClass>& classes);

struct BatchConfig {
  int batch_size = 8;
  int steps_per_epoch = 200;
  double segment_seconds = 120.0;
};

/// Reproducible batch stream over a set of records. Each epoch derives an
/// independent generator from (seed, worker, epoch); records are drawn
/// uniformly with replacement.
class BatchIterator {
 public:
  BatchIterator(std::vector<std::shared_ptr<const LoadedRecord>> records,
                BatchConfig config, std::uint64_t seed,
                std::vector<EventClass> allowed_classes, int worker = 0);

  void begin_epoch(int epoch);
  /// One batch of batch_size samples; call steps_per_epoch times per epoch.
  std::vector<SegmentSample> next_batch();

  const BatchConfig& config() const { return config_; }

 private:
  std::vector<std::shared_ptr<const LoadedRecord>> records_;
  BatchConfig config_;
  std::uint64_t seed_;
  std::vector<EventClass> allowed_classes_;
  int worker_;
  Rng rng_{0};
};

}  // namespace sleepdet
