#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "sleepdet/evaluation.hpp"
#include "sleepdet/network.hpp"
#include "sleepdet/synthetic.hpp"
#include "sleepdet/training.hpp"

namespace sleepdet {

/// Configuration errors carry the JSON path of the offending field,
/// e.g. "$.train.batch_size: expected a positive integer".
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Experiment bundle: everything the CLI subcommands need, read from one
/// JSON file. Every field has a default; an empty document is valid.
struct RunConfig {
  std::uint64_t seed = 1234;

  SynthConfig synth;
  int synth_records = 20;

  // architecture (streams/channels are fixed by the canonical layout)
  int f0 = 4;
  int k_max = 4;
  int n_h = 32;
  int n_a = 32;
  double segment_seconds = 120.0;
  double fs = 128.0;
  double weight_decay = 1e-4;  // applied by the -wd variants
  std::vector<WindowSpec> windows;

  TrainConfig train;
  EvalConfig eval;
};

RunConfig default_run_config();
RunConfig load_run_config(const std::string& path);
RunConfig run_config_from_json_text(const std::string& text);

/// Materializes the network configuration for a CLI run.
ModelConfig build_model_config(const RunConfig& config,
                               const std::string& variant,
                               const std::optional<EventClass>& single_event);

}  // namespace sleepdet
