#include "sleepdet/signal_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "sleepdet/rng.hpp"

namespace sleepdet {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "record format assumes a little-endian host");

std::string to_string(EventClass cls) {
  switch (cls) {
    case EventClass::Arousal: return "Ar";
    case EventClass::LimbMovement: return "LM";
    case EventClass::DisorderedBreathing: return "SDB";
  }
  throw std::logic_error("unreachable event class");
}

EventClass event_class_from_string(const std::string& name) {
  if (name == "Ar") return EventClass::Arousal;
  if (name == "LM") return EventClass::LimbMovement;
  if (name == "SDB") return EventClass::DisorderedBreathing;
  throw IoError("unknown event class label '" + name + "'");
}

std::string to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Eval: return "eval";
    case Split::Test: return "test";
  }
  throw std::logic_error("unreachable split");
}

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "eval") return Split::Eval;
  if (name == "test") return Split::Test;
  throw IoError("unknown split label '" + name + "'");
}

int Record::channel_index(const std::string& name) const {
  for (std::size_t i = 0; i < channel_names.size(); ++i) {
    if (channel_names[i] == name) return static_cast<int>(i);
  }
  return -1;
}

std::vector<ManifestEntry> DatasetManifest::entries_for(Split split) const {
  std::vector<ManifestEntry> out;
  for (const auto& entry : entries) {
    if (entry.split == split) out.push_back(entry);
  }
  return out;
}

const std::vector<std::string>& canonical_channels() {
  static const std::vector<std::string> names = {
      "C3",   "C4",   "EOGL",      "EOGR",   "ChinEMG",
      "LegL", "LegR", "NasalPres", "Thorax", "Abdomen"};
  return names;
}

namespace {

[[noreturn]] void fail_at(const std::string& path, std::uint64_t offset,
                          const std::string& what) {
  std::ostringstream oss;
  oss << path << ": at byte " << offset << ": " << what;
  throw IoError(oss.str());
}

json parse_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path + ": cannot open file");
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw IoError(path + ": " + e.what());
  }
  return j;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path + ": cannot open file for writing");
  out << text;
  if (!out) throw IoError(path + ": write failed");
}

}  // namespace

Record load_record(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path + ": cannot open file");

  std::uint32_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  if (!in) fail_at(path, 0, "malformed header: truncated length prefix");

  std::string header_text(header_len, '\0');
  in.read(header_text.data(), header_len);
  if (!in) fail_at(path, 4, "malformed header: truncated JSON header");

  json header;
  try {
    header = json::parse(header_text);
  } catch (const json::parse_error& e) {
    fail_at(path, 4, std::string("malformed header: ") + e.what());
  }

  Record record;
  std::vector<std::uint64_t> lengths;
  const std::uint64_t data_start = 4u + header_len;
  try {
    record.id = header.at("id").get<std::string>();
    record.fs = header.at("fs").get<double>();
    record.duration = header.at("duration").get<double>();
    for (const auto& ch : header.at("channels")) {
      record.channel_names.push_back(ch.at("name").get<std::string>());
      lengths.push_back(ch.at("length").get<std::uint64_t>());
    }
  } catch (const json::exception& e) {
    fail_at(path, 4, std::string("malformed header: ") + e.what());
  }

  if (!(record.fs > 0.0)) fail_at(path, 4, "non-positive fs");
  if (lengths.empty()) fail_at(path, 4, "malformed header: no channels");
  for (std::size_t i = 1; i < lengths.size(); ++i) {
    if (lengths[i] != lengths[0]) {
      std::ostringstream oss;
      oss << "channel-length mismatch: channel '" << record.channel_names[i]
          << "' has " << lengths[i] << " samples, expected " << lengths[0];
      fail_at(path, 4, oss.str());
    }
  }
  {
    std::set<std::string> unique(record.channel_names.begin(),
                                 record.channel_names.end());
    if (unique.size() != record.channel_names.size())
      fail_at(path, 4, "malformed header: duplicate channel names");
  }
  const auto expected =
      static_cast<std::uint64_t>(std::llround(record.fs * record.duration));
  if (expected != lengths[0]) {
    std::ostringstream oss;
    oss << "channel-length mismatch: header declares " << lengths[0]
        << " samples but fs*duration rounds to " << expected;
    fail_at(path, 4, oss.str());
  }

  const auto num_channels = static_cast<Index>(lengths.size());
  const auto num_samples = static_cast<Index>(lengths[0]);
  record.samples.resize(num_channels, num_samples);
  for (Index c = 0; c < num_channels; ++c) {
    const std::uint64_t offset =
        data_start + static_cast<std::uint64_t>(c) * lengths[0] * 4u;
    std::vector<float> buf(lengths[0]);
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!in) {
      fail_at(path, offset, "channel-length mismatch: file truncated in '" +
                                record.channel_names[c] + "'");
    }
    for (Index t = 0; t < num_samples; ++t) record.samples(c, t) = buf[t];
  }
  // Trailing bytes indicate a corrupted or mislabelled file.
  in.peek();
  if (!in.eof()) {
    fail_at(path, data_start + lengths.size() * lengths[0] * 4u,
            "channel-length mismatch: trailing bytes after last channel");
  }
  return record;
}

void save_record(const Record& record, const std::string& path) {
  if (!(record.fs > 0.0)) throw IoError(path + ": non-positive fs");
  if (record.samples.rows() !=
      static_cast<Index>(record.channel_names.size()))
    throw IoError(path + ": channel name/sample row count mismatch");
  const auto expected = std::llround(record.fs * record.duration);
  if (expected != record.num_samples())
    throw IoError(path + ": sample count does not match fs*duration");

  json header;
  header["id"] = record.id;
  header["fs"] = record.fs;
  header["duration"] = record.duration;
  header["channels"] = json::array();
  for (const auto& name : record.channel_names) {
    header["channels"].push_back(
        {{"name", name},
         {"length", static_cast<std::uint64_t>(record.num_samples())}});
  }
  const std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path + ": cannot open file for writing");
  const auto header_len = static_cast<std::uint32_t>(header_text.size());
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_text.data(), header_text.size());
  std::vector<float> buf(static_cast<std::size_t>(record.num_samples()));
  for (Index c = 0; c < record.num_channels(); ++c) {
    for (Index t = 0; t < record.num_samples(); ++t)
      buf[static_cast<std::size_t>(t)] = record.samples(c, t);
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!out) throw IoError(path + ": write failed");
}

std::vector<Event> load_annotations(const std::string& path,
                                    std::optional<double> record_duration) {
  const json j = parse_json_file(path);
  if (!j.is_array()) throw IoError(path + ": expected a JSON array of events");

  std::vector<Event> events;
  events.reserve(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& item = j[i];
    Event event;
    try {
      event.cls = event_class_from_string(item.at("class").get<std::string>());
      event.onset = item.at("onset").get<double>();
      event.duration = item.at("duration").get<double>();
    } catch (const json::exception& e) {
      throw IoError(path + ": event " + std::to_string(i) + ": " + e.what());
    }
    if (!(event.duration > 0.0))
      throw IoError(path + ": event " + std::to_string(i) +
                    ": non-positive duration");
    if (event.onset < 0.0)
      throw IoError(path + ": event " + std::to_string(i) +
                    ": negative onset");
    if (record_duration && event.offset() > *record_duration + 1e-9)
      throw IoError(path + ": event " + std::to_string(i) +
                    ": extends past end of record");
    events.push_back(event);
  }
  std::stable_sort(events.begin(), events.end(),
                   [](const Event& a, const Event& b) {
                     return a.onset < b.onset;
                   });
  return events;
}

void save_annotations(const std::vector<Event>& events,
                      const std::string& path) {
  json j = json::array();
  for (const auto& event : events) {
    j.push_back({{"class", to_string(event.cls)},
                 {"onset", event.onset},
                 {"duration", event.duration}});
  }
  write_text_file(path, j.dump(2) + "\n");
}

DatasetManifest load_manifest(const std::string& path) {
  const json j = parse_json_file(path);
  DatasetManifest manifest;
  try {
    manifest.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& item : j.at("entries")) {
      ManifestEntry entry;
      entry.record_path = item.at("record").get<std::string>();
      entry.annotation_path = item.at("annotations").get<std::string>();
      entry.split = split_from_string(item.at("split").get<std::string>());
      manifest.entries.push_back(entry);
    }
  } catch (const json::exception& e) {
    throw IoError(path + ": " + e.what());
  }
  return manifest;
}

void save_manifest(const DatasetManifest& manifest, const std::string& path) {
  json j;
  j["seed"] = manifest.seed;
  j["entries"] = json::array();
  for (const auto& entry : manifest.entries) {
    j["entries"].push_back({{"record", entry.record_path},
                            {"annotations", entry.annotation_path},
                            {"split", to_string(entry.split)}});
  }
  write_text_file(path, j.dump(2) + "\n");
}

DatasetManifest split_dataset(const DatasetManifest& manifest,
                              const std::array<double, 3>& fractions,
                              std::uint64_t seed) {
  if (manifest.entries.empty())
    throw std::invalid_argument("split_dataset: empty manifest");
  for (double f : fractions) {
    if (!(f > 0.0))
      throw std::invalid_argument("split_dataset: fractions must be positive");
  }
  const double total = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(total - 1.0) > 1e-9)
    throw std::invalid_argument("split_dataset: fractions must sum to 1");

  const auto n = static_cast<std::int64_t>(manifest.entries.size());
  std::vector<std::int64_t> order(manifest.entries.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (std::int64_t i = n - 1; i > 0; --i) {
    const auto j = rng.uniform_int(0, i);
    std::swap(order[static_cast<std::size_t>(i)],
              order[static_cast<std::size_t>(j)]);
  }

  const auto n_eval = std::llround(static_cast<double>(n) * fractions[1]);
  const auto n_test = std::llround(static_cast<double>(n) * fractions[2]);
  const auto n_train = n - n_eval - n_test;
  if (n_train < 0)
    throw std::invalid_argument("split_dataset: fractions leave no train set");

  DatasetManifest out = manifest;
  out.seed = seed;
  for (std::int64_t i = 0; i < n; ++i) {
    auto& entry = out.entries[static_cast<std::size_t>(order[i])];
    if (i < n_train) {
      entry.split = Split::Train;
    } else if (i < n_train + n_eval) {
      entry.split = Split::Eval;
    } else {
      entry.split = Split::Test;
    }
  }
  return out;
}

}  // namespace sleepdet
