#include "sleepdet/run_config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace sleepdet {

using nlohmann::json;

namespace {

/// Walks a JSON object with path tracking so every validation error points
/// at the exact field.
class Cursor {
 public:
  Cursor(const json& j, std::string path) : j_(&j), path_(std::move(path)) {}

  bool has(const std::string& key) const { return j_->contains(key); }

  Cursor at(const std::string& key) const {
    return Cursor(j_->at(key), path_ + "." + key);
  }

  void allow_only(const std::set<std::string>& keys) const {
    if (!j_->is_object())
      throw ConfigError(path_ + ": expected an object");
    for (const auto& [key, value] : j_->items()) {
      if (!keys.count(key))
        throw ConfigError(path_ + "." + key + ": unknown field");
    }
  }

  double number(double lo, double hi) const {
    if (!j_->is_number())
      throw ConfigError(path_ + ": expected a number");
    const double v = j_->get<double>();
    if (v < lo || v > hi) {
      std::ostringstream oss;
      oss << path_ << ": value " << v << " outside [" << lo << ", " << hi
          << "]";
      throw ConfigError(oss.str());
    }
    return v;
  }

  int integer(int lo, int hi) const {
    if (!j_->is_number_integer())
      throw ConfigError(path_ + ": expected an integer");
    const auto v = j_->get<std::int64_t>();
    if (v < lo || v > hi) {
      std::ostringstream oss;
      oss << path_ << ": value " << v << " outside [" << lo << ", " << hi
          << "]";
      throw ConfigError(oss.str());
    }
    return static_cast<int>(v);
  }

  std::uint64_t seed_value() const {
    if (!j_->is_number_unsigned() && !j_->is_number_integer())
      throw ConfigError(path_ + ": expected an integer seed");
    return j_->get<std::uint64_t>();
  }

  const json& raw() const { return *j_; }
  const std::string& path() const { return path_; }

 private:
  const json* j_;
  std::string path_;
};

std::pair<double, double> parse_range(const Cursor& c) {
  if (!c.raw().is_array() || c.raw().size() != 2)
    throw ConfigError(c.path() + ": expected [low, high]");
  const double lo = c.raw()[0].get<double>();
  const double hi = c.raw()[1].get<double>();
  if (!(lo > 0.0) || lo > hi)
    throw ConfigError(c.path() + ": range must satisfy 0 < low <= high");
  return {lo, hi};
}

void parse_synth(const Cursor& c, SynthConfig& synth, int& n_records) {
  c.allow_only({"records", "duration_sec", "fs", "arousal_rate", "limb_rate",
                "breathing_rate", "rate_jitter", "arousal_burst_amp",
                "limb_burst_amp", "breath_amp", "breath_freq_hz",
                "background_noise", "sensor_noise",
                "cooccur_breathing_arousal", "arousal_duration",
                "limb_duration", "breathing_duration"});
  if (c.has("records")) n_records = c.at("records").integer(3, 100000);
  if (c.has("duration_sec"))
    synth.duration_sec = c.at("duration_sec").number(60.0, 1e6);
  if (c.has("fs")) synth.fs = c.at("fs").number(1.0, 10000.0);
  if (c.has("arousal_rate"))
    synth.arousal_rate = c.at("arousal_rate").number(0.0, 200.0);
  if (c.has("limb_rate")) synth.limb_rate = c.at("limb_rate").number(0.0, 200.0);
  if (c.has("breathing_rate"))
    synth.breathing_rate = c.at("breathing_rate").number(0.0, 60.0);
  if (c.has("rate_jitter"))
    synth.rate_jitter = c.at("rate_jitter").number(0.0, 0.9);
  if (c.has("arousal_burst_amp"))
    synth.arousal_burst_amp = c.at("arousal_burst_amp").number(0.0, 100.0);
  if (c.has("limb_burst_amp"))
    synth.limb_burst_amp = c.at("limb_burst_amp").number(0.0, 100.0);
  if (c.has("breath_amp")) synth.breath_amp = c.at("breath_amp").number(0.0, 100.0);
  if (c.has("breath_freq_hz"))
    synth.breath_freq_hz = c.at("breath_freq_hz").number(0.05, 2.0);
  if (c.has("background_noise"))
    synth.background_noise = c.at("background_noise").number(0.0, 100.0);
  if (c.has("sensor_noise"))
    synth.sensor_noise = c.at("sensor_noise").number(0.0, 100.0);
  if (c.has("cooccur_breathing_arousal"))
    synth.cooccur_breathing_arousal =
        c.at("cooccur_breathing_arousal").number(0.0, 1.0);
  if (c.has("arousal_duration"))
    synth.arousal_duration = parse_range(c.at("arousal_duration"));
  if (c.has("limb_duration"))
    synth.limb_duration = parse_range(c.at("limb_duration"));
  if (c.has("breathing_duration"))
    synth.breathing_duration = parse_range(c.at("breathing_duration"));
}

void parse_model(const Cursor& c, RunConfig& config) {
  c.allow_only({"f0", "k_max", "n_h", "n_a", "segment_seconds", "fs",
                "weight_decay"});
  if (c.has("f0")) config.f0 = c.at("f0").integer(1, 256);
  if (c.has("k_max")) config.k_max = c.at("k_max").integer(1, 10);
  if (c.has("n_h")) config.n_h = c.at("n_h").integer(1, 1024);
  if (c.has("n_a")) config.n_a = c.at("n_a").integer(1, 1024);
  if (c.has("segment_seconds"))
    config.segment_seconds = c.at("segment_seconds").number(1.0, 3600.0);
  if (c.has("fs")) config.fs = c.at("fs").number(1.0, 10000.0);
  if (c.has("weight_decay"))
    config.weight_decay = c.at("weight_decay").number(0.0, 1.0);
}

void parse_windows(const Cursor& c, RunConfig& config) {
  if (!c.raw().is_object())
    throw ConfigError(c.path() + ": expected an object keyed by event class");
  for (const auto& [key, value] : c.raw().items()) {
    EventClass cls;
    try {
      cls = event_class_from_string(key);
    } catch (const std::exception&) {
      throw ConfigError(c.path() + "." + key + ": unknown event class");
    }
    const Cursor wc = c.at(key);
    wc.allow_only({"duration", "stride"});
    for (auto& spec : config.windows) {
      if (spec.cls == cls) {
        if (wc.has("duration"))
          spec.duration = wc.at("duration").number(0.1, 3600.0);
        if (wc.has("stride"))
          spec.stride = wc.at("stride").number(0.01, 3600.0);
      }
    }
  }
}

void parse_train(const Cursor& c, TrainConfig& train) {
  c.allow_only({"lr0", "beta1", "beta2", "epsilon", "lr_patience", "lr_factor",
                "early_stop_patience", "negative_ratio", "batch_size",
                "steps_per_epoch", "max_epochs", "eval_segments",
                "theta_match"});
  if (c.has("lr0")) train.lr0 = c.at("lr0").number(1e-8, 10.0);
  if (c.has("beta1")) train.adam.beta1 = c.at("beta1").number(0.0, 0.9999);
  if (c.has("beta2")) train.adam.beta2 = c.at("beta2").number(0.0, 0.999999);
  if (c.has("epsilon")) train.adam.epsilon = c.at("epsilon").number(1e-16, 1.0);
  if (c.has("lr_patience")) train.lr_patience = c.at("lr_patience").integer(1, 100);
  if (c.has("lr_factor")) train.lr_factor = c.at("lr_factor").number(0.0, 1.0);
  if (c.has("early_stop_patience"))
    train.early_stop_patience = c.at("early_stop_patience").integer(1, 1000);
  if (c.has("negative_ratio"))
    train.negative_ratio = c.at("negative_ratio").integer(1, 100);
  if (c.has("batch_size")) train.batch_size = c.at("batch_size").integer(1, 1024);
  if (c.has("steps_per_epoch"))
    train.steps_per_epoch = c.at("steps_per_epoch").integer(1, 100000);
  if (c.has("max_epochs")) train.max_epochs = c.at("max_epochs").integer(1, 10000);
  if (c.has("eval_segments"))
    train.eval_segments = c.at("eval_segments").integer(1, 100000);
  if (c.has("theta_match")) train.theta_match = c.at("theta_match").number(0.0, 1.0);
}

void parse_eval(const Cursor& c, EvalConfig& eval) {
  c.allow_only({"iou_eval", "theta_nms", "theta_min", "theta_max",
                "theta_step", "workers"});
  if (c.has("iou_eval")) eval.iou_eval = c.at("iou_eval").number(0.01, 1.0);
  if (c.has("theta_nms")) eval.theta_nms = c.at("theta_nms").number(0.01, 1.0);
  if (c.has("theta_min")) eval.theta_min = c.at("theta_min").number(0.0, 1.0);
  if (c.has("theta_max")) eval.theta_max = c.at("theta_max").number(0.0, 1.0);
  if (c.has("theta_step")) eval.theta_step = c.at("theta_step").number(1e-4, 1.0);
  if (c.has("workers")) eval.workers = c.at("workers").integer(1, 256);
}

}  // namespace

RunConfig default_run_config() {
  RunConfig config;
  config.windows = default_model_config().windows;
  return config;
}

RunConfig run_config_from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("$: ") + e.what());
  }
  RunConfig config = default_run_config();
  const Cursor root(j, "$");
  root.allow_only({"seed", "synth", "model", "windows", "train", "eval"});
  if (root.has("seed")) config.seed = root.at("seed").seed_value();
  if (root.has("synth"))
    parse_synth(root.at("synth"), config.synth, config.synth_records);
  if (root.has("model")) parse_model(root.at("model"), config);
  if (root.has("windows")) parse_windows(root.at("windows"), config);
  if (root.has("train")) parse_train(root.at("train"), config.train);
  if (root.has("eval")) parse_eval(root.at("eval"), config.eval);

  if (config.eval.theta_min > config.eval.theta_max)
    throw ConfigError("$.eval.theta_min: exceeds theta_max");
  return config;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open config file");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return run_config_from_json_text(buffer.str());
}

ModelConfig build_model_config(const RunConfig& config,
                               const std::string& variant,
                               const std::optional<EventClass>& single_event) {
  ModelConfig model = default_model_config();
  model.f0 = config.f0;
  model.k_max = config.k_max;
  model.n_h = config.n_h;
  model.n_a = config.n_a;
  model.fs = config.fs;
  model.segment_samples =
      static_cast<int>(std::llround(config.segment_seconds * config.fs));
  model.windows = config.windows;

  if (variant == "splitstream") {
    model.head = HeadVariant::Dense;
    model.weight_decay = 0.0;
  } else if (variant == "splitstream-wd") {
    model.head = HeadVariant::Dense;
    model.weight_decay = config.weight_decay;
  } else if (variant == "splitstream-dw") {
    model.head = HeadVariant::Depthwise;
    model.weight_decay = 0.0;
  } else if (variant == "splitstream-dw-wd") {
    model.head = HeadVariant::Depthwise;
    model.weight_decay = config.weight_decay;
  } else {
    throw ConfigError("unknown variant '" + variant + "'");
  }

  if (single_event) model = single_event_config(model, *single_event);
  model.validate();
  return model;
}

}  // namespace sleepdet
