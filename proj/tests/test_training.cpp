#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "grad_check.hpp"
#include "sleepdet/conditioning.hpp"
#include "sleepdet/synthetic.hpp"
#include "sleepdet/training.hpp"

using namespace sleepdet;
namespace ts = testing_support;

TEST_CASE("huber values") {
  CHECK(huber(0.0) == 0.0);
  CHECK(huber(0.5) == doctest::Approx(0.125));
  CHECK(huber(2.0) == doctest::Approx(1.5));
  CHECK(huber(-2.0) == doctest::Approx(1.5));
}

TEST_CASE("huber derivative is continuous at the knee") {
  const double h = 1e-7;
  for (double r : {1.0, -1.0}) {
    const double left = (huber(r) - huber(r - h)) / h;
    const double right = (huber(r + h) - huber(r)) / h;
    CHECK(std::abs(left - right) < 1e-6);
    CHECK(huber_grad(r) == doctest::Approx(r > 0 ? 1.0 : -1.0));
  }
}

TEST_CASE("localization loss") {
  SUBCASE("perfect prediction") {
    Matrix y(2, 2), t(2, 2);
    y << 0.1, 0.2, -0.3, 0.4;
    t = y;
    CHECK(localization_loss(y, t) == 0.0);
  }
  SUBCASE("single positive worked example") {
    Matrix y(1, 2), t(1, 2);
    y << 0.5, 0.0;
    t << 0.0, 0.0;
    CHECK(localization_loss(y, t) == doctest::Approx(0.125));
  }
  SUBCASE("empty is zero") {
    CHECK(localization_loss(Matrix(0, 2), Matrix(0, 2)) == 0.0);
  }
}

TEST_CASE("positive classification loss") {
  SUBCASE("uniform logits give log K") {
    Matrix logits = Matrix::Zero(1, 4);
    Matrix one_hot = Matrix::Zero(1, 4);
    one_hot(0, 2) = 1.0;
    CHECK(positive_class_loss(logits, one_hot) ==
          doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  SUBCASE("saturated correct logit") {
    Matrix logits = Matrix::Zero(1, 4);
    logits(0, 1) = 20.0;
    Matrix one_hot = Matrix::Zero(1, 4);
    one_hot(0, 1) = 1.0;
    CHECK(positive_class_loss(logits, one_hot) < 1e-8);
  }
  SUBCASE("mean over two rows") {
    Matrix logits = Matrix::Zero(2, 4);
    logits(1, 0) = 20.0;
    Matrix one_hot = Matrix::Zero(2, 4);
    one_hot(0, 0) = 1.0;  // uniform row: log 4
    one_hot(1, 0) = 1.0;  // saturated row: ~0
    CHECK(positive_class_loss(logits, one_hot) ==
          doctest::Approx(0.5 * std::log(4.0)).epsilon(1e-6));
  }
}

namespace {

/// Brute-force worst-negative selection: sort every unmatched window by
/// negative-class probability and take the first quota.
std::vector<int> reference_hard_negatives(const Matrix& logits,
                                          const std::vector<int>& unmatched,
                                          int n_positive, int ratio) {
  std::vector<std::pair<double, int>> scored;
  for (int w : unmatched) {
    double denom = 0.0;
    for (Index k = 0; k < logits.cols(); ++k)
      denom += std::exp(logits(w, k) - logits.row(w).maxCoeff());
    const double p_neg = std::exp(logits(w, logits.cols() - 1) -
                                  logits.row(w).maxCoeff()) /
                         denom;
    scored.emplace_back(p_neg, w);
  }
  std::sort(scored.begin(), scored.end());
  std::vector<int> out;
  const auto quota = std::min<std::size_t>(
      scored.size(),
      static_cast<std::size_t>(ratio) * static_cast<std::size_t>(n_positive));
  for (std::size_t i = 0; i < quota; ++i) out.push_back(scored[i].second);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST_CASE("hard negative mining") {
  Rng rng(21);

  SUBCASE("quota arithmetic and brute-force agreement") {
    Matrix logits(12, 4);
    for (Index i = 0; i < logits.size(); ++i) logits.data()[i] = rng.normal();
    std::vector<int> unmatched;
    for (int w = 2; w < 12; ++w) unmatched.push_back(w);  // 10 negatives
    std::vector<int> selected;
    hard_negative_loss(logits, unmatched, 2, 3, &selected);
    CHECK(selected.size() == 6);
    auto sorted = selected;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == reference_hard_negatives(logits, unmatched, 2, 3));
  }
  SUBCASE("confidently negative windows give near-zero loss") {
    Matrix logits = Matrix::Zero(6, 4);
    logits.col(3).setConstant(25.0);
    std::vector<int> unmatched = {0, 1, 2, 3, 4, 5};
    CHECK(hard_negative_loss(logits, unmatched, 1, 3) < 1e-9);
  }
  SUBCASE("no positives contributes nothing") {
    Matrix logits = Matrix::Zero(4, 4);
    CHECK(hard_negative_loss(logits, {0, 1, 2, 3}, 0, 3) == 0.0);
  }
  SUBCASE("random instances match brute force") {
    for (int trial = 0; trial < 1000; ++trial) {
      const auto n_windows = rng.uniform_int(1, 30);
      Matrix logits(n_windows, 4);
      for (Index i = 0; i < logits.size(); ++i)
        logits.data()[i] = rng.normal();
      std::vector<int> unmatched;
      for (int w = 0; w < n_windows; ++w)
        if (rng.uniform() < 0.7) unmatched.push_back(w);
      const auto n_pos = static_cast<int>(rng.uniform_int(0, 4));
      std::vector<int> selected;
      hard_negative_loss(logits, unmatched, n_pos, 3, &selected);
      std::sort(selected.begin(), selected.end());
      CHECK(selected ==
            reference_hard_negatives(logits, unmatched, n_pos, 3));
      const auto expected_count = std::min<std::size_t>(
          unmatched.size(), 3 * static_cast<std::size_t>(std::max(0, n_pos)));
      CHECK(selected.size() == expected_count);
    }
  }
}

TEST_CASE("total loss composition") {
  const ModelConfig config = ts::tiny_model_config();
  const WindowGrid grid = make_grid(config);
  Event event;
  event.cls = EventClass::Arousal;
  event.onset = 0.5;
  event.duration = 0.5;
  const MatchResult match = match_events({event}, grid, 0.5);
  REQUIRE(match.num_positive() >= 1);

  SUBCASE("perfect predictions give near-zero loss") {
    NetworkOutput out;
    out.logits = Matrix::Zero(grid.size(), config.num_classes());
    out.logits.col(config.negative_class()).setConstant(30.0);
    out.loc = Matrix::Zero(grid.size(), 2);
    for (Index i = 0; i < match.num_positive(); ++i) {
      const int w = match.pairs[static_cast<std::size_t>(i)].first;
      out.logits(w, config.negative_class()) = 0.0;
      out.logits(w, 0) = 30.0;  // arousal class
      out.loc.row(w) = match.targets.row(i);
    }
    const LossBreakdown loss = total_loss(out, match, 3);
    CHECK(loss.total < 1e-6);
  }
  SUBCASE("components sum exactly") {
    Rng rng(5);
    NetworkOutput out;
    out.logits.resize(grid.size(), config.num_classes());
    out.loc.resize(grid.size(), 2);
    for (Index i = 0; i < out.logits.size(); ++i)
      out.logits.data()[i] = rng.normal();
    for (Index i = 0; i < out.loc.size(); ++i) out.loc.data()[i] = rng.normal();
    const LossBreakdown loss = total_loss(out, match, 3);
    CHECK(loss.total == loss.loc + loss.positive + loss.negative);
    CHECK(loss.num_positive == match.num_positive());
  }
  SUBCASE("raising the ratio cannot shrink the selected set") {
    Rng rng(6);
    NetworkOutput out;
    out.logits.resize(grid.size(), config.num_classes());
    out.loc = Matrix::Zero(grid.size(), 2);
    for (Index i = 0; i < out.logits.size(); ++i)
      out.logits.data()[i] = rng.normal();
    const LossBreakdown z3 = total_loss(out, match, 3);
    const LossBreakdown z6 = total_loss(out, match, 6);
    CHECK(z6.hard_negatives.size() >= z3.hard_negatives.size());
  }
}

TEST_CASE("adam first step magnitude is the learning rate") {
  const ModelConfig config = ts::tiny_model_config();
  Rng rng(31);
  Params params = init_params(config, rng);
  Params before = params;
  Params grads = zeros_like(params);
  for (auto& view : tensor_views(grads)) {
    for (Index i = 0; i < view.flat.size(); ++i)
      view.flat(i) = (i % 2 == 0 ? 1.0 : -1.0) * (0.5 + 0.1 * (i % 7));
  }
  AdamState state = make_adam_state(params, 1e-3);
  adam_step(params, grads, state, AdamConfig{}, 0.0);

  auto va = tensor_views(params);
  auto vb = tensor_views(before);
  for (std::size_t v = 0; v < va.size(); ++v) {
    if (!va[v].trainable) continue;
    for (Index i = 0; i < va[v].flat.size(); ++i) {
      const double update = std::abs(va[v].flat(i) - vb[v].flat(i));
      CHECK(update <= 1e-3 + 1e-12);
      CHECK(update >= 1e-3 * (1.0 - 1e-4));
    }
  }
  CHECK(state.step == 1);
}

TEST_CASE("adam leaves parameters alone under zero gradients") {
  const ModelConfig config = ts::tiny_model_config();
  Rng rng(32);
  Params params = init_params(config, rng);
  const Params before = params;
  Params grads = zeros_like(params);
  AdamState state = make_adam_state(params, 1e-3);
  for (int s = 0; s < 5; ++s) adam_step(params, grads, state, AdamConfig{}, 0.0);
  auto va = tensor_views(params);
  Params before_copy = before;
  auto vb = tensor_views(before_copy);
  for (std::size_t v = 0; v < va.size(); ++v)
    CHECK((va[v].flat - vb[v].flat).lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("adam rejects non-finite gradients") {
  const ModelConfig config = ts::tiny_model_config();
  Rng rng(33);
  Params params = init_params(config, rng);
  Params grads = zeros_like(params);
  tensor_views(grads)[0].flat(0) = std::numeric_limits<double>::quiet_NaN();
  AdamState state = make_adam_state(params, 1e-3);
  CHECK_THROWS_AS(adam_step(params, grads, state, AdamConfig{}, 0.0),
                  TrainDivergence);
}

TEST_CASE("adam matches a scalar reference transcript on a quadratic") {
  // minimize f(x) = 0.5 * a x^2 per coordinate; reference implemented
  // independently with plain doubles
  const AdamConfig cfg;
  const double lr = 0.01;
  const std::vector<double> curvature = {1.0, 4.0, 0.25};

  // reference transcript
  std::vector<double> x_ref = {1.0, -2.0, 3.0};
  {
    std::vector<double> m(3, 0.0), v(3, 0.0);
    for (int t = 1; t <= 50; ++t) {
      for (int i = 0; i < 3; ++i) {
        const double g = curvature[static_cast<std::size_t>(i)] *
                         x_ref[static_cast<std::size_t>(i)];
        m[static_cast<std::size_t>(i)] =
            cfg.beta1 * m[static_cast<std::size_t>(i)] + (1 - cfg.beta1) * g;
        v[static_cast<std::size_t>(i)] =
            cfg.beta2 * v[static_cast<std::size_t>(i)] + (1 - cfg.beta2) * g * g;
        const double mh = m[static_cast<std::size_t>(i)] /
                          (1 - std::pow(cfg.beta1, t));
        const double vh = v[static_cast<std::size_t>(i)] /
                          (1 - std::pow(cfg.beta2, t));
        x_ref[static_cast<std::size_t>(i)] -=
            lr * mh / (std::sqrt(vh) + cfg.epsilon);
      }
    }
  }

  // the production optimizer over a Params-shaped singleton tensor set
  ModelConfig config = ts::tiny_model_config();
  Rng rng(34);
  Params params = init_params(config, rng);
  auto views = tensor_views(params);
  // use the first three coordinates of the first trainable tensor
  views[0].flat(0) = 1.0;
  views[0].flat(1) = -2.0;
  views[0].flat(2) = 3.0;
  AdamState state = make_adam_state(params, lr);
  for (int t = 1; t <= 50; ++t) {
    Params grads = zeros_like(params);
    auto gviews = tensor_views(grads);
    auto pviews = tensor_views(params);
    for (int i = 0; i < 3; ++i)
      gviews[0].flat(i) =
          curvature[static_cast<std::size_t>(i)] * pviews[0].flat(i);
    adam_step(params, grads, state, cfg, 0.0);
  }
  auto final_views = tensor_views(params);
  for (int i = 0; i < 3; ++i)
    CHECK(std::abs(final_views[0].flat(i) -
                   x_ref[static_cast<std::size_t>(i)]) < 1e-12);
}

TEST_CASE("plateau decay walkthrough") {
  SUBCASE("decay after three non-improving epochs") {
    const std::vector<double> history = {1.0, 0.9, 0.95, 0.96, 0.97};
    CHECK(lr_plateau_update(history, 1e-3) == doctest::Approx(1e-4));
    // before the third bad epoch the rate is untouched
    const std::vector<double> shorter = {1.0, 0.9, 0.95, 0.96};
    CHECK(lr_plateau_update(shorter, 1e-3) == doctest::Approx(1e-3));
  }
  SUBCASE("monotone improvement never decays") {
    CHECK(lr_plateau_update({1.0, 0.9, 0.8, 0.7, 0.6}, 1e-3) ==
          doctest::Approx(1e-3));
  }
  SUBCASE("second decay after three more bad epochs") {
    const std::vector<double> history = {1.0, 0.9, 0.95, 0.96, 0.97,
                                         0.98, 0.99, 1.01};
    CHECK(lr_plateau_update(history, 1e-3) == doctest::Approx(1e-5));
  }
  SUBCASE("empty history rejected") {
    CHECK_THROWS_AS(lr_plateau_update({}, 1e-3), std::invalid_argument);
  }
}

namespace {

std::vector<std::shared_ptr<const LoadedRecord>> synthetic_split(
    int n_records, std::uint64_t seed) {
  SynthConfig synth;
  synth.duration_sec = 600.0;
  synth.arousal_rate = 30.0;
  synth.limb_rate = 30.0;
  synth.breathing_rate = 15.0;
  synth.breathing_duration = {10.0, 30.0};
  std::vector<std::shared_ptr<const LoadedRecord>> records;
  for (int i = 0; i < n_records; ++i) {
    auto [record, events] = generate_record(
        synth, mix_seed(seed, static_cast<std::uint64_t>(i)),
        "train_test_" + std::to_string(i));
    auto loaded = std::make_shared<LoadedRecord>();
    loaded->record = condition_record(record);
    loaded->events = events;
    records.push_back(loaded);
  }
  return records;
}

ModelConfig small_train_model() {
  ModelConfig model = default_model_config();
  model.f0 = 2;
  model.k_max = 6;
  model.n_h = 32;
  model.n_a = 32;
  model.segment_samples = 60 * 128;
  model.windows = {{EventClass::Arousal, 15.0, 7.5},
                   {EventClass::LimbMovement, 6.0, 3.0},
                   {EventClass::DisorderedBreathing, 30.0, 15.0}};
  return model;
}

}  // namespace

TEST_CASE("training halves the eval loss within five epochs") {
  const auto records = synthetic_split(8, 11);
  const std::vector<std::shared_ptr<const LoadedRecord>> train_records(
      records.begin(), records.begin() + 7);
  const std::vector<std::shared_ptr<const LoadedRecord>> eval_records(
      records.begin() + 7, records.end());

  TrainConfig config;
  config.batch_size = 8;
  config.steps_per_epoch = 100;
  config.max_epochs = 5;
  config.eval_segments = 48;
  config.lr0 = 3e-3;

  const auto result = train(train_records, eval_records, small_train_model(),
                            config, 3);
  REQUIRE(result.eval_history.size() == 5);
  CAPTURE(result.initial_eval_loss);
  CAPTURE(result.eval_history.back());
  CHECK(result.eval_history.back() <= 0.5 * result.initial_eval_loss);
  // the returned checkpoint is the best epoch, not necessarily the last
  CHECK(result.best_epoch ==
        best_epoch(result.eval_history) + 1);
}

TEST_CASE("training is bugwise deterministic for a fixed seed") {
  const auto records = synthetic_split(3, 21);
  const std::vector<std::shared_ptr<const LoadedRecord>> train_records(
      records.begin(), records.begin() + 2);
  const std::vector<std::shared_ptr<const LoadedRecord>> eval_records(
      records.begin() + 2, records.end());

  TrainConfig config;
  config.batch_size = 4;
  config.steps_per_epoch = 6;
  config.max_epochs = 2;
  config.eval_segments = 8;

  const ModelConfig model = small_train_model();
  const auto a = train(train_records, eval_records, model, config, 99);
  const auto b = train(train_records, eval_records, model, config, 99);
  CHECK(a.eval_history == b.eval_history);

  Params pa = a.best_params, pb = b.best_params;
  auto va = tensor_views(pa), vb = tensor_views(pb);
  for (std::size_t i = 0; i < va.size(); ++i)
    CHECK((va[i].flat - vb[i].flat).lpNorm<Eigen::Infinity>() == 0.0);

  const auto c = train(train_records, eval_records, model, config, 100);
  bool differs = false;
  Params pc = c.best_params;
  auto vc = tensor_views(pc);
  for (std::size_t i = 0; i < va.size(); ++i)
    if ((va[i].flat - vc[i].flat).lpNorm<Eigen::Infinity>() > 0.0)
      differs = true;
  CHECK(differs);
}

TEST_CASE("weight decay shrinks the parameter norm") {
  const auto records = synthetic_split(3, 31);
  const std::vector<std::shared_ptr<const LoadedRecord>> train_records(
      records.begin(), records.begin() + 2);
  const std::vector<std::shared_ptr<const LoadedRecord>> eval_records(
      records.begin() + 2, records.end());

  TrainConfig config;
  config.batch_size = 4;
  config.steps_per_epoch = 10;
  config.max_epochs = 5;
  config.eval_segments = 8;

  ModelConfig plain = small_train_model();
  ModelConfig decayed = plain;
  decayed.weight_decay = 1e-4;

  auto norm_of = [](const TrainResult& result) {
    Params params = result.final_params;
    double acc = 0.0;
    for (const auto& view : tensor_views(params)) {
      if (!view.trainable) continue;
      acc += view.flat.squaredNorm();
    }
    return std::sqrt(acc);
  };
  const auto base = train(train_records, eval_records, plain, config, 55);
  const auto wd = train(train_records, eval_records, decayed, config, 55);
  CHECK(norm_of(wd) < norm_of(base));
}

TEST_CASE("early stopping walkthrough") {
  SUBCASE("ten non-improving epochs stop") {
    std::vector<double> history = {1.0};
    for (int i = 0; i < 10; ++i) history.push_back(1.0 + 0.01 * i);
    CHECK(early_stopping_update(history, 10));
  }
  SUBCASE("improvement at epoch nine resets the counter") {
    std::vector<double> history = {1.0};
    for (int i = 0; i < 9; ++i) history.push_back(1.0 + 0.01 * i);
    history.push_back(0.5);  // improvement
    CHECK_FALSE(early_stopping_update(history, 10));
  }
  SUBCASE("best epoch is the argmin") {
    CHECK(best_epoch({3.0, 1.0, 2.0, 1.5}) == 1);
  }
}
