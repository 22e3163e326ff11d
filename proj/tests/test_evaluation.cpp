#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "sleepdet/evaluation.hpp"
#include "sleepdet/rng.hpp"
#include "test_support.hpp"

using namespace sleepdet;
namespace fs = std::filesystem;

namespace {

Event make_event(EventClass cls, double onset, double duration) {
  Event event;
  event.cls = cls;
  event.onset = onset;
  event.duration = duration;
  return event;
}

Detection from_event(const Event& event, double p = 0.9) {
  Detection det;
  det.cls = event.cls;
  det.probability = p;
  det.center = event.center();
  det.duration = event.duration;
  return det;
}

}  // namespace

TEST_CASE("scoring match basics") {
  const std::vector<Event> truths = {make_event(EventClass::Arousal, 10.0, 5.0),
                                     make_event(EventClass::Arousal, 30.0, 5.0)};
  SUBCASE("perfect predictions") {
    const std::vector<Detection> preds = {from_event(truths[0]),
                                          from_event(truths[1])};
    const auto match = match_for_scoring(preds, truths, 0.3);
    CHECK(match.pairs.size() == 2);
    CHECK(match.unmatched_predictions.empty());
    CHECK(match.unmatched_truths.empty());
  }
  SUBCASE("duplicate predictions: one TP, one FP") {
    const std::vector<Detection> preds = {from_event(truths[0], 0.9),
                                          from_event(truths[0], 0.8)};
    const auto match = match_for_scoring(preds, {truths[0]}, 0.3);
    CHECK(match.pairs.size() == 1);
    CHECK(match.unmatched_predictions.size() == 1);
    CHECK(match.unmatched_truths.empty());
  }
  SUBCASE("no predictions: everything missed") {
    const auto match = match_for_scoring({}, truths, 0.3);
    CHECK(match.pairs.empty());
    CHECK(match.unmatched_truths.size() == 2);
  }
  SUBCASE("class mismatch never matches") {
    std::vector<Detection> preds = {from_event(truths[0])};
    preds[0].cls = EventClass::LimbMovement;
    const auto match = match_for_scoring(preds, truths, 0.3);
    CHECK(match.pairs.empty());
  }
  SUBCASE("greedy takes the higher-IoU pair first") {
    // one truth, two candidates: the closer one wins even if listed later
    const Event truth = make_event(EventClass::Arousal, 10.0, 10.0);
    std::vector<Detection> preds;
    Detection off;
    off.cls = EventClass::Arousal;
    off.probability = 0.9;
    off.center = 18.0;
    off.duration = 10.0;
    preds.push_back(off);
    preds.push_back(from_event(truth));
    const auto match = match_for_scoring(preds, {truth}, 0.1);
    REQUIRE(match.pairs.size() == 1);
    CHECK(match.pairs[0].first == 1);
  }
}

TEST_CASE("precision/recall/F1 conventions") {
  SUBCASE("worked example") {
    const Prf p = prf1(6, 2, 4);
    CHECK(p.precision == doctest::Approx(0.75));
    CHECK(p.recall == doctest::Approx(0.6));
    CHECK(p.f1 == doctest::Approx(2.0 * 0.75 * 0.6 / 1.35));
  }
  SUBCASE("perfect") {
    const Prf p = prf1(5, 0, 0);
    CHECK(p.precision == 1.0);
    CHECK(p.recall == 1.0);
    CHECK(p.f1 == 1.0);
  }
  SUBCASE("vacuous case scores perfect") {
    const Prf p = prf1(0, 0, 0);
    CHECK(p.precision == 1.0);
    CHECK(p.recall == 1.0);
    CHECK(p.f1 == 1.0);
  }
  SUBCASE("zero precision and recall give zero F1") {
    const Prf p = prf1(0, 3, 4);
    CHECK(p.precision == 0.0);
    CHECK(p.recall == 0.0);
    CHECK(p.f1 == 0.0);
  }
}

TEST_CASE("index computation") {
  CHECK(compute_index(20, 2.0) == doctest::Approx(10.0));
  CHECK(compute_index(0, 1.0) == 0.0);
  CHECK(compute_index(7, 0.5) == doctest::Approx(14.0));
  CHECK_THROWS_AS(compute_index(5, 0.0), std::invalid_argument);
  // linear in count, inverse-linear in duration
  CHECK(compute_index(40, 2.0) == doctest::Approx(2.0 * compute_index(20, 2.0)));
  CHECK(compute_index(20, 4.0) == doctest::Approx(0.5 * compute_index(20, 2.0)));
}

TEST_CASE("pearson r^2") {
  SUBCASE("perfect linear relation") {
    std::vector<double> x = {1, 2, 3, 4, 5};
    std::vector<double> y;
    for (double v : x) y.push_back(2.0 * v + 1.0);
    CHECK(*pearson_r2(x, y) == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("anti-correlation also gives one") {
    std::vector<double> x = {1, 2, 3, 4};
    std::vector<double> y = {-1, -2, -3, -4};
    CHECK(*pearson_r2(x, y) == doctest::Approx(1.0).epsilon(1e-12));
  }
  SUBCASE("independent samples give near zero") {
    Rng rng(17);
    std::vector<double> x, y;
    for (int i = 0; i < 10000; ++i) {
      x.push_back(rng.normal());
      y.push_back(rng.normal());
    }
    CHECK(*pearson_r2(x, y) < 0.01);
  }
  SUBCASE("degenerate inputs are undefined") {
    CHECK_FALSE(pearson_r2({1.0, 2.0}, {1.0, 2.0}).has_value());
    CHECK_FALSE(pearson_r2({1.0, 1.0, 1.0}, {1.0, 2.0, 3.0}).has_value());
  }
}

TEST_CASE("temporal errors") {
  const std::vector<Event> truths = {make_event(EventClass::Arousal, 10.0, 20.0)};

  SUBCASE("pure shift") {
    Detection det = from_event(truths[0]);
    det.center += 5.0;
    const auto match = match_for_scoring({det}, truths, 0.0001);
    REQUIRE(match.pairs.size() == 1);
    const auto samples = temporal_errors({det}, truths, match);
    REQUIRE(samples.size() == 1);
    CHECK(samples[0].d_onset == doctest::Approx(5.0));
    CHECK(samples[0].d_offset == doctest::Approx(5.0));
    CHECK(samples[0].d_duration == doctest::Approx(0.0));
  }
  SUBCASE("centered lengthening") {
    Detection det = from_event(truths[0]);
    det.duration += 2.0;
    const auto match = match_for_scoring({det}, truths, 0.3);
    const auto samples = temporal_errors({det}, truths, match);
    REQUIRE(samples.size() == 1);
    CHECK(samples[0].d_onset == doctest::Approx(-1.0));
    CHECK(samples[0].d_offset == doctest::Approx(1.0));
    CHECK(samples[0].d_duration == doctest::Approx(2.0));
  }
  SUBCASE("identical events give zeros; identity is exact") {
    Rng rng(3);
    for (int i = 0; i < 200; ++i) {
      const Event truth = make_event(EventClass::LimbMovement,
                                     rng.uniform(0.0, 100.0),
                                     rng.uniform(0.5, 10.0));
      Detection det = from_event(truth);
      det.center += rng.normal() * 0.8;
      det.duration = std::max(0.2, det.duration + rng.normal());
      const auto match = match_for_scoring({det}, {truth}, 0.0001);
      if (match.pairs.empty()) continue;
      const auto samples = temporal_errors({det}, {truth}, match);
      // bitwise identity, not approximate
      CHECK(samples[0].d_duration == samples[0].d_offset - samples[0].d_onset);
    }
    const auto match = match_for_scoring({from_event(truths[0])}, truths, 0.3);
    const auto samples =
        temporal_errors({from_event(truths[0])}, truths, match);
    CHECK(samples[0].d_onset == 0.0);
    CHECK(samples[0].d_offset == 0.0);
    CHECK(samples[0].d_duration == 0.0);
  }
}

TEST_CASE("threshold sweep on fabricated candidates") {
  // an oracle "model" that emits every truth with p = 0.9 and nothing else
  const std::vector<EventClass> classes = {EventClass::Arousal};
  std::vector<std::vector<Event>> truths(2);
  truths[0] = {make_event(EventClass::Arousal, 10.0, 5.0),
               make_event(EventClass::Arousal, 40.0, 5.0)};
  truths[1] = {make_event(EventClass::Arousal, 20.0, 8.0)};
  std::vector<std::vector<std::vector<Detection>>> candidates(2);
  for (int r = 0; r < 2; ++r) {
    candidates[static_cast<std::size_t>(r)].resize(1);
    for (const auto& truth : truths[static_cast<std::size_t>(r)])
      candidates[static_cast<std::size_t>(r)][0].push_back(
          from_event(truth, 0.9));
  }
  EvalConfig eval;
  const auto result = sweep_from_candidates(candidates, truths, classes, eval);
  REQUIRE(result.curves.size() == 1);
  const auto& curve = result.curves[0];
  for (std::size_t i = 0; i < curve.theta.size(); ++i) {
    CHECK(curve.mean_f1[i] >= 0.0);
    CHECK(curve.mean_f1[i] <= 1.0);
    if (curve.theta[i] < 0.9 - 1e-9) {
      CHECK(curve.mean_f1[i] == doctest::Approx(1.0));
    } else {
      // above the emission probability nothing survives: zero recall
      CHECK(curve.mean_f1[i] == doctest::Approx(0.0));
    }
  }
  // flat optimum: the tie resolves to the smallest theta on the grid
  CHECK(result.best.at(EventClass::Arousal) == doctest::Approx(0.05));

  // reported argmax is consistent with the emitted curve
  double best_f1 = -1.0;
  double best_theta = 0.0;
  for (std::size_t i = 0; i < curve.theta.size(); ++i) {
    if (curve.mean_f1[i] > best_f1) {
      best_f1 = curve.mean_f1[i];
      best_theta = curve.theta[i];
    }
  }
  CHECK(result.best.at(EventClass::Arousal) == doctest::Approx(best_theta));
}

TEST_CASE("threshold files roundtrip") {
  const ThresholdSet thresholds = {{EventClass::Arousal, 0.35},
                                   {EventClass::LimbMovement, 0.4},
                                   {EventClass::DisorderedBreathing, 0.55}};
  const auto path =
      (fs::temp_directory_path() / "sleepdet_thresholds.json").string();
  save_thresholds(thresholds, path);
  const auto loaded = load_thresholds(path);
  CHECK(loaded == thresholds);
}

namespace {

std::shared_ptr<const LoadedRecord> tiny_loaded_record(std::uint64_t seed,
                                                       const std::string& id) {
  auto loaded = std::make_shared<LoadedRecord>();
  loaded->record.id = id;
  loaded->record.channel_names = canonical_channels();
  loaded->record.fs = 128.0;
  loaded->record.duration = 120.0;
  loaded->record.samples.resize(10, 120 * 128);
  Rng rng(seed);
  for (Index i = 0; i < loaded->record.samples.size(); ++i)
    loaded->record.samples.data()[i] = static_cast<float>(rng.normal());
  loaded->events = {make_event(EventClass::Arousal, 30.0, 8.0),
                    make_event(EventClass::LimbMovement, 60.0, 2.0),
                    make_event(EventClass::DisorderedBreathing, 80.0, 20.0)};
  return loaded;
}

ModelConfig small_eval_config() {
  ModelConfig config = default_model_config();
  config.f0 = 2;
  config.k_max = 4;
  config.n_h = 4;
  config.n_a = 4;
  config.segment_samples = 60 * 128;
  config.windows = {{EventClass::Arousal, 15.0, 7.5},
                    {EventClass::LimbMovement, 3.0, 1.5},
                    {EventClass::DisorderedBreathing, 30.0, 15.0}};
  return config;
}

}  // namespace

TEST_CASE("evaluate emits a complete, deterministic report") {
  const ModelConfig config = small_eval_config();
  Rng rng(8);
  const Params params = init_params(config, rng);
  std::vector<std::shared_ptr<const LoadedRecord>> records = {
      tiny_loaded_record(1, "rec_a"), tiny_loaded_record(2, "rec_b"),
      tiny_loaded_record(3, "rec_c")};
  const ThresholdSet thresholds = {{EventClass::Arousal, 0.3},
                                   {EventClass::LimbMovement, 0.3},
                                   {EventClass::DisorderedBreathing, 0.3}};
  EvalConfig eval;
  const ScoreReport report = evaluate(records, config, params, thresholds, eval);
  REQUIRE(report.records.size() == 3);
  for (EventClass cls : config.event_classes) {
    CHECK(report.aggregate.count(cls) == 1);
    for (const auto& record : report.records) {
      const auto& cs = record.classes.at(cls);
      CHECK(cs.tp >= 0);
      CHECK(cs.true_index >= 0.0);
    }
  }

  const ScoreReport again = evaluate(records, config, params, thresholds, eval);
  for (std::size_t r = 0; r < report.records.size(); ++r) {
    for (EventClass cls : config.event_classes) {
      CHECK(report.records[r].classes.at(cls).pred_index ==
            again.records[r].classes.at(cls).pred_index);
      CHECK(report.records[r].classes.at(cls).f1 ==
            again.records[r].classes.at(cls).f1);
    }
  }

  // multi-worker evaluation reduces to the same report
  EvalConfig parallel = eval;
  parallel.workers = 3;
  const ScoreReport threaded =
      evaluate(records, config, params, thresholds, parallel);
  for (std::size_t r = 0; r < report.records.size(); ++r)
    CHECK(report.records[r].classes.at(EventClass::Arousal).f1 ==
          threaded.records[r].classes.at(EventClass::Arousal).f1);

  // aggregates are invariant to record ordering
  std::vector<std::shared_ptr<const LoadedRecord>> reordered = {
      records[2], records[0], records[1]};
  const ScoreReport shuffled =
      evaluate(reordered, config, params, thresholds, eval);
  for (EventClass cls : config.event_classes) {
    CHECK(shuffled.aggregate.at(cls).f1_mean ==
          doctest::Approx(report.aggregate.at(cls).f1_mean).epsilon(1e-12));
    CHECK(shuffled.aggregate.at(cls).precision_mean ==
          doctest::Approx(report.aggregate.at(cls).precision_mean)
              .epsilon(1e-12));
  }

  // writers produce parseable artifacts with the expected schema
  const auto dir = fs::temp_directory_path() / "sleepdet_eval_test";
  fs::create_directories(dir);
  write_report_json(report, (dir / "report.json").string());
  write_index_scatter_csv(report, (dir / "scatter.csv").string());
  write_temporal_errors_csv(report, (dir / "temporal.csv").string());
  std::ifstream in(dir / "report.json");
  nlohmann::json j;
  in >> j;
  CHECK(j.contains("aggregate"));
  CHECK(j["aggregate"].contains("Ar"));
  CHECK(j["aggregate"]["Ar"].contains("index_r2"));
  CHECK(j["records"].size() == 3);
}
