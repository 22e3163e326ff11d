#include "sleepdet/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "sleepdet/conditioning.hpp"
#include "sleepdet/signal_io.hpp"

namespace sleepdet {

std::shared_ptr<const LoadedRecord> RecordStore::get(
    const ManifestEntry& entry) {
  for (const auto& [path, record] : cache_) {
    if (path == entry.record_path) return record;
  }
  auto loaded = std::make_shared<LoadedRecord>();
  const Record raw = load_record(entry.record_path);
  loaded->record = condition_record(raw);
  loaded->events =
      load_annotations(entry.annotation_path, raw.duration);
  cache_.emplace_back(entry.record_path, loaded);
  return loaded;
}

std::vector<Event> events_in_segment(const std::vector<Event>& events,
                                     double start_sec, double segment_seconds,
                                     const std::vector<EventClass>& classes) {
  // Events keep their full extent (possibly overhanging the segment): a
  // boundary fragment must still teach the true interval, otherwise the
  // network fires confidently on slivers at inference and floods the
  // scoring with near-duplicates.
  std::vector<Event> out;
  const double end_sec = start_sec + segment_seconds;
  for (const Event& event : events) {
    if (std::find(classes.begin(), classes.end(), event.cls) == classes.end())
      continue;
    const double overlap =
        std::min(event.offset(), end_sec) - std::max(event.onset, start_sec);
    if (overlap <= 0.0) continue;
    Event shifted = event;
    shifted.onset = event.onset - start_sec;
    out.push_back(shifted);
  }
  return out;
}

SegmentSample sample_segment(const Record& record,
                             const std::vector<Event>& events,
                             double segment_seconds, Rng& rng,
                             const std::vector<EventClass>& allowed_classes) {
  if (record.duration < segment_seconds)
    throw std::invalid_argument("sample_segment: record shorter than segment");

  std::vector<EventClass> present;
  for (EventClass cls : allowed_classes) {
    const bool any = std::any_of(events.begin(), events.end(),
                                 [&](const Event& e) { return e.cls == cls; });
    if (any) present.push_back(cls);
  }
  if (present.empty())
    throw std::invalid_argument("sample_segment: record has no usable events");

  const EventClass cls =
      present[static_cast<std::size_t>(rng.uniform_int(
          0, static_cast<std::int64_t>(present.size()) - 1))];
  std::vector<const Event*> candidates;
  for (const Event& e : events) {
    if (e.cls == cls) candidates.push_back(&e);
  }
  const Event& anchor = *candidates[static_cast<std::size_t>(rng.uniform_int(
      0, static_cast<std::int64_t>(candidates.size()) - 1))];

  const double midpoint = anchor.center();
  const double lo = std::max(0.0, midpoint - segment_seconds);
  const double hi =
      std::min(midpoint, record.duration - segment_seconds);
  double start = rng.uniform(lo, hi);
  // snap to the sample grid so signal and annotations stay aligned
  const auto start_sample = static_cast<Index>(std::floor(start * record.fs));
  start = static_cast<double>(start_sample) / record.fs;

  const auto len = static_cast<Index>(std::llround(segment_seconds * record.fs));
  SegmentSample sample;
  sample.record_id = record.id;
  sample.start_sec = start;
  sample.signal =
      record.samples.middleCols(start_sample, len).cast<double>();
  sample.events =
      events_in_segment(events, start, segment_seconds, allowed_classes);
  return sample;
}

BatchIterator::BatchIterator(
    std::vector<std::shared_ptr<const LoadedRecord>> records,
    BatchConfig config, std::uint64_t seed,
    std::vector<EventClass> allowed_classes, int worker)
    : records_(std::move(records)),
      config_(config),
      seed_(seed),
      allowed_classes_(std::move(allowed_classes)),
      worker_(worker) {
  if (records_.empty())
    throw std::invalid_argument("BatchIterator: empty record set");
  begin_epoch(0);
}

void BatchIterator::begin_epoch(int epoch) {
  rng_ = Rng(mix_seed(mix_seed(seed_, static_cast<std::uint64_t>(worker_)),
                      static_cast<std::uint64_t>(epoch)));
}

std::vector<SegmentSample> BatchIterator::next_batch() {
  std::vector<SegmentSample> batch;
  batch.reserve(static_cast<std::size_t>(config_.batch_size));
  for (int b = 0; b < config_.batch_size; ++b) {
    // uniform record draw with replacement; skip records with no usable
    // events (should not happen with generated data, guard regardless)
    for (int attempt = 0;; ++attempt) {
      const auto idx = static_cast<std::size_t>(rng_.uniform_int(
          0, static_cast<std::int64_t>(records_.size()) - 1));
      const auto& loaded = *records_[idx];
      try {
        batch.push_back(sample_segment(loaded.record, loaded.events,
                                       config_.segment_seconds, rng_,
                                       allowed_classes_));
        break;
      } catch (const std::invalid_argument&) {
        if (attempt >= 100)
          throw std::runtime_error(
              "BatchIterator: no record provides usable segments");
      }
    }
  }
  return batch;
}

}  // namespace sleepdet
