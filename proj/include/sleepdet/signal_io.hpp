#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sleepdet/types.hpp"

namespace sleepdet {

/// Raised for malformed record/annotation/manifest files. The message
/// carries the path and, for binary records, the byte offset of the fault.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Record container format: a 4-byte little-endian header length, a UTF-8
/// JSON header {id, fs, duration, channels:[{name,length},...]}, then one
/// contiguous float32 little-endian block per channel in header order.
Record load_record(const std::string& path);
void save_record(const Record& record, const std::string& path);

/// Annotation files are JSON arrays of {class, onset, duration}. Events are
/// returned sorted by onset. When record_duration is supplied, events
/// extending past the end of the record are rejected.
std::vector<Event> load_annotations(
    const std::string& path,
    std::optional<double> record_duration = std::nullopt);
void save_annotations(const std::vector<Event>& events,
                      const std::string& path);

DatasetManifest load_manifest(const std::string& path);
void save_manifest(const DatasetManifest& manifest, const std::string& path);

/// Reassigns splits deterministically. Entries are shuffled with the seed;
/// eval and test sizes are the nearest integers to n*fraction and the
/// remainder goes to train, so the published 1653/200/1000 partition of
/// 2853 records is reproduced by its fractions.
DatasetManifest split_dataset(const DatasetManifest& manifest,
                              const std::array<double, 3>& fractions,
                              std::uint64_t seed);

}  // namespace sleepdet
