// sleepdet command-line interface: synthetic data generation, training,
// threshold optimization, evaluation and single-record prediction.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "sleepdet/conditioning.hpp"
#include "sleepdet/evaluation.hpp"
#include "sleepdet/run_config.hpp"
#include "sleepdet/signal_io.hpp"
#include "sleepdet/synthetic.hpp"
#include "sleepdet/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct CommonOpts {
  std::string config_path;
  std::string out_dir = ".";
  std::optional<std::uint64_t> seed_override;
  int workers = 1;
};

sleepdet::RunConfig resolve_config(const CommonOpts& opts) {
  sleepdet::RunConfig config = opts.config_path.empty()
                                   ? sleepdet::default_run_config()
                                   : sleepdet::load_run_config(opts.config_path);
  if (opts.seed_override) config.seed = *opts.seed_override;
  config.eval.workers = opts.workers;
  return config;
}

std::vector<std::shared_ptr<const sleepdet::LoadedRecord>> load_split(
    sleepdet::RecordStore& store, const sleepdet::DatasetManifest& manifest,
    sleepdet::Split split) {
  std::vector<std::shared_ptr<const sleepdet::LoadedRecord>> records;
  for (const auto& entry : manifest.entries_for(split))
    records.push_back(store.get(entry));
  return records;
}

int cmd_gen_data(const CommonOpts& opts) {
  const auto config = resolve_config(opts);
  const auto manifest = sleepdet::generate_dataset(
      config.synth_records, config.synth, config.seed, opts.out_dir);
  const auto manifest_path = (fs::path(opts.out_dir) / "manifest.json").string();
  sleepdet::save_manifest(manifest, manifest_path);
  std::cout << manifest_path << "\n";
  return kExitOk;
}

int cmd_train(const CommonOpts& opts, const std::string& manifest_path,
              const std::string& variant,
              const std::optional<std::string>& single_event) {
  const auto config = resolve_config(opts);
  std::optional<sleepdet::EventClass> single;
  if (single_event)
    single = sleepdet::event_class_from_string(*single_event);
  const auto model = sleepdet::build_model_config(config, variant, single);

  const auto manifest = sleepdet::load_manifest(manifest_path);
  sleepdet::RecordStore store;
  const auto train_records =
      load_split(store, manifest, sleepdet::Split::Train);
  const auto eval_records = load_split(store, manifest, sleepdet::Split::Eval);

  fs::create_directories(opts.out_dir);
  const auto log_path = (fs::path(opts.out_dir) / "train_log.jsonl").string();
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw sleepdet::IoError(log_path + ": cannot open log");

  const auto result = sleepdet::train(
      train_records, eval_records, model, config.train, config.seed,
      [&](const std::string& line) { log << line << "\n"; });

  sleepdet::Checkpoint checkpoint;
  checkpoint.config = model;
  checkpoint.params = result.best_params;
  checkpoint.seed = config.seed;
  checkpoint.epoch = result.best_epoch;
  const auto ckpt_path = (fs::path(opts.out_dir) / "checkpoint.bin").string();
  sleepdet::save_checkpoint(checkpoint, ckpt_path);
  std::cout << ckpt_path << "\n";
  return kExitOk;
}

int cmd_sweep(const CommonOpts& opts, const std::string& manifest_path,
              const std::string& checkpoint_path) {
  const auto config = resolve_config(opts);
  const auto checkpoint = sleepdet::load_checkpoint(checkpoint_path);
  const auto manifest = sleepdet::load_manifest(manifest_path);
  sleepdet::RecordStore store;
  const auto eval_records = load_split(store, manifest, sleepdet::Split::Eval);

  const auto result = sleepdet::sweep_threshold(
      eval_records, checkpoint.config, checkpoint.params, config.eval);

  fs::create_directories(opts.out_dir);
  const auto thresholds_path =
      (fs::path(opts.out_dir) / "thresholds.json").string();
  sleepdet::save_thresholds(result.best, thresholds_path);
  sleepdet::write_curves_csv(
      result.curves, (fs::path(opts.out_dir) / "f1_curves.csv").string());
  std::cout << thresholds_path << "\n";
  return kExitOk;
}

int cmd_evaluate(const CommonOpts& opts, const std::string& manifest_path,
                 const std::string& checkpoint_path,
                 const std::string& thresholds_path) {
  const auto config = resolve_config(opts);
  const auto checkpoint = sleepdet::load_checkpoint(checkpoint_path);
  const auto thresholds = sleepdet::load_thresholds(thresholds_path);
  const auto manifest = sleepdet::load_manifest(manifest_path);
  sleepdet::RecordStore store;
  const auto test_records = load_split(store, manifest, sleepdet::Split::Test);

  const auto report = sleepdet::evaluate(test_records, checkpoint.config,
                                         checkpoint.params, thresholds,
                                         config.eval);
  fs::create_directories(opts.out_dir);
  const auto report_path = (fs::path(opts.out_dir) / "report.json").string();
  sleepdet::write_report_json(report, report_path);
  sleepdet::write_index_scatter_csv(
      report, (fs::path(opts.out_dir) / "index_scatter.csv").string());
  sleepdet::write_temporal_errors_csv(
      report, (fs::path(opts.out_dir) / "temporal_errors.csv").string());
  std::cout << report_path << "\n";
  return kExitOk;
}

int cmd_predict(const CommonOpts& opts, const std::string& checkpoint_path,
                const std::string& thresholds_path,
                const std::string& record_path) {
  const auto config = resolve_config(opts);
  const auto checkpoint = sleepdet::load_checkpoint(checkpoint_path);
  const auto thresholds = sleepdet::load_thresholds(thresholds_path);

  const auto raw = sleepdet::load_record(record_path);
  const auto conditioned = sleepdet::condition_record(raw);
  const auto grid = sleepdet::make_grid(checkpoint.config);
  const auto detections =
      sleepdet::predict_record(conditioned, checkpoint.config,
                               checkpoint.params, grid, thresholds,
                               config.eval.theta_nms);

  json j = json::array();
  for (const auto& det : detections) {
    json jd;
    jd["class"] = sleepdet::to_string(det.cls);
    jd["probability"] = det.probability;
    jd["onset"] = det.onset();
    jd["duration"] = det.duration;
    j.push_back(jd);
  }
  fs::create_directories(opts.out_dir);
  const auto out_path = (fs::path(opts.out_dir) / "detections.json").string();
  std::ofstream out(out_path, std::ios::trunc);
  if (!out) throw sleepdet::IoError(out_path + ": cannot open output");
  out << j.dump(2) << "\n";
  std::cout << out_path << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "sleepdet: joint sleep-event detection on multichannel recordings"};
  app.require_subcommand(1);

  CommonOpts opts;
  std::string manifest_path, checkpoint_path, thresholds_path, record_path;
  std::string variant = "splitstream";
  std::optional<std::string> single_event;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", opts.config_path,
                    "JSON configuration file (defaults apply when omitted)");
    cmd->add_option("--out", opts.out_dir, "output directory");
    cmd->add_option("--seed", opts.seed_override,
                    "override the configured seed");
    cmd->add_option("--workers", opts.workers,
                    "worker threads for record-parallel stages (default 1; "
                    "single-worker runs are bit-reproducible)");
  };

  auto* gen = app.add_subcommand("gen-data",
                                 "generate a synthetic dataset and manifest");
  add_common(gen);

  auto* train = app.add_subcommand("train", "train a detection model");
  add_common(train);
  train->add_option("--manifest", manifest_path, "dataset manifest")
      ->required();
  train
      ->add_option("--variant", variant,
                   "splitstream | splitstream-wd | splitstream-dw | "
                   "splitstream-dw-wd")
      ->check(CLI::IsMember({"splitstream", "splitstream-wd", "splitstream-dw",
                             "splitstream-dw-wd"}));
  train->add_option("--single-event", single_event,
                    "train a single-stream model for one class (Ar, LM, SDB)");

  auto* sweep = app.add_subcommand(
      "sweep-threshold", "optimize per-class thresholds on the eval split");
  add_common(sweep);
  sweep->add_option("--manifest", manifest_path, "dataset manifest")
      ->required();
  sweep->add_option("--checkpoint", checkpoint_path, "trained checkpoint")
      ->required();

  auto* evaluate = app.add_subcommand(
      "evaluate", "score a checkpoint on the test split");
  add_common(evaluate);
  evaluate->add_option("--manifest", manifest_path, "dataset manifest")
      ->required();
  evaluate->add_option("--checkpoint", checkpoint_path, "trained checkpoint")
      ->required();
  evaluate->add_option("--thresholds", thresholds_path, "thresholds JSON")
      ->required();

  auto* predict = app.add_subcommand(
      "predict", "emit detections for a single record");
  add_common(predict);
  predict->add_option("--checkpoint", checkpoint_path, "trained checkpoint")
      ->required();
  predict->add_option("--thresholds", thresholds_path, "thresholds JSON")
      ->required();
  predict->add_option("--record", record_path, "record file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(opts);
    if (train->parsed())
      return cmd_train(opts, manifest_path, variant, single_event);
    if (sweep->parsed()) return cmd_sweep(opts, manifest_path, checkpoint_path);
    if (evaluate->parsed())
      return cmd_evaluate(opts, manifest_path, checkpoint_path,
                          thresholds_path);
    if (predict->parsed())
      return cmd_predict(opts, checkpoint_path, thresholds_path, record_path);
  } catch (const sleepdet::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}
