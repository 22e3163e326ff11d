#include "sleepdet/training.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace sleepdet {

using nlohmann::json;

double huber(double residual) {
  const double magnitude = std::abs(residual);
  return magnitude < 1.0 ? 0.5 * residual * residual : magnitude - 0.5;
}

double huber_grad(double residual) {
  if (residual > 1.0) return 1.0;
  if (residual < -1.0) return -1.0;
  return residual;
}

double localization_loss(const Matrix& predicted, const Matrix& targets) {
  if (predicted.rows() == 0) return 0.0;
  double sum = 0.0;
  for (Index i = 0; i < predicted.rows(); ++i) {
    sum += huber(predicted(i, 0) - targets(i, 0));
    sum += huber(predicted(i, 1) - targets(i, 1));
  }
  return sum / static_cast<double>(predicted.rows());
}

namespace {

Vector softmax_row(const Eigen::RowVectorXd& logits) {
  const double peak = logits.maxCoeff();
  Vector p = (logits.transpose().array() - peak).exp().matrix();
  p /= p.sum();
  return p;
}

}  // namespace

double positive_class_loss(const Matrix& logits, const Matrix& one_hot) {
  if (logits.rows() == 0) return 0.0;
  double sum = 0.0;
  for (Index i = 0; i < logits.rows(); ++i) {
    const Vector p = softmax_row(logits.row(i));
    Index target = 0;
    one_hot.row(i).maxCoeff(&target);
    sum -= std::log(std::max(p(target), 1e-300));
  }
  return sum / static_cast<double>(logits.rows());
}

double hard_negative_loss(const Matrix& logits,
                          const std::vector<int>& unmatched, int n_positive,
                          int ratio, std::vector<int>* selected) {
  if (selected) selected->clear();
  if (n_positive <= 0 || unmatched.empty()) return 0.0;
  const Index neg_class = logits.cols() - 1;

  std::vector<std::pair<double, int>> scored;  // (p_negative, window)
  scored.reserve(unmatched.size());
  for (int w : unmatched) {
    const Vector p = softmax_row(logits.row(w));
    scored.emplace_back(p(neg_class), w);
  }
  const auto quota = std::min<std::size_t>(
      scored.size(), static_cast<std::size_t>(ratio) *
                         static_cast<std::size_t>(n_positive));
  std::stable_sort(scored.begin(), scored.end(),
                   [](const auto& a, const auto& b) {
                     if (a.first != b.first) return a.first < b.first;
                     return a.second < b.second;
                   });

  double sum = 0.0;
  for (std::size_t i = 0; i < quota; ++i) {
    sum -= std::log(std::max(scored[i].first, 1e-300));
    if (selected) selected->push_back(scored[i].second);
  }
  return quota > 0 ? sum / static_cast<double>(quota) : 0.0;
}

LossBreakdown total_loss(const NetworkOutput& output, const MatchResult& match,
                         int negative_ratio, Matrix* d_logits, Matrix* d_loc) {
  LossBreakdown loss;
  loss.num_positive = match.num_positive();
  const Index n_pos = loss.num_positive;
  const Index k_total = output.logits.cols();
  const Index neg_class = k_total - 1;

  if (d_logits) *d_logits = Matrix::Zero(output.logits.rows(), k_total);
  if (d_loc) *d_loc = Matrix::Zero(output.loc.rows(), 2);

  if (n_pos > 0) {
    // localization over matched windows
    double loc_sum = 0.0;
    for (Index i = 0; i < n_pos; ++i) {
      const int w = match.pairs[static_cast<std::size_t>(i)].first;
      for (Index c = 0; c < 2; ++c) {
        const double r = output.loc(w, c) - match.targets(i, c);
        loc_sum += huber(r);
        if (d_loc)
          (*d_loc)(w, c) += huber_grad(r) / static_cast<double>(n_pos);
      }
    }
    loss.loc = loc_sum / static_cast<double>(n_pos);

    // positive cross-entropy
    double pos_sum = 0.0;
    for (Index i = 0; i < n_pos; ++i) {
      const int w = match.pairs[static_cast<std::size_t>(i)].first;
      const Vector p = softmax_row(output.logits.row(w));
      Index target = 0;
      match.one_hot.row(i).maxCoeff(&target);
      pos_sum -= std::log(std::max(p(target), 1e-300));
      if (d_logits) {
        Vector grad = p;
        grad(target) -= 1.0;
        d_logits->row(w) += grad.transpose() / static_cast<double>(n_pos);
      }
    }
    loss.positive = pos_sum / static_cast<double>(n_pos);

    // hard negatives
    loss.negative =
        hard_negative_loss(output.logits, match.unmatched,
                           static_cast<int>(n_pos), negative_ratio,
                           &loss.hard_negatives);
    if (d_logits && !loss.hard_negatives.empty()) {
      const double inv = 1.0 / static_cast<double>(loss.hard_negatives.size());
      for (int w : loss.hard_negatives) {
        const Vector p = softmax_row(output.logits.row(w));
        Vector grad = p;
        grad(neg_class) -= 1.0;
        d_logits->row(w) += grad.transpose() * inv;
      }
    }
  }
  loss.total = loss.loc + loss.positive + loss.negative;
  return loss;
}

AdamState make_adam_state(Params& params, double lr) {
  AdamState state;
  state.lr = lr;
  for (const auto& view : tensor_views(params)) {
    state.m.push_back(Vector::Zero(view.flat.size()));
    state.v.push_back(Vector::Zero(view.flat.size()));
  }
  return state;
}

void adam_step(Params& params, Params& grads, AdamState& state,
               const AdamConfig& config, double weight_decay) {
  auto param_views = tensor_views(params);
  auto grad_views = tensor_views(grads);
  if (param_views.size() != grad_views.size() ||
      param_views.size() != state.m.size())
    throw std::invalid_argument("adam_step: state/parameter shape mismatch");

  state.step += 1;
  const double bias1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bias2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));

  for (std::size_t i = 0; i < param_views.size(); ++i) {
    if (!param_views[i].trainable) continue;
    auto& theta = param_views[i].flat;
    const auto& grad = grad_views[i].flat;
    if (!grad.allFinite())
      throw TrainDivergence("adam_step: non-finite gradient in tensor '" +
                            param_views[i].name + "'");
    auto& m = state.m[i];
    auto& v = state.v[i];
    m = config.beta1 * m + (1.0 - config.beta1) * grad;
    v = (config.beta2 * v.array() +
         (1.0 - config.beta2) * grad.array().square())
            .matrix();
    const Array m_hat = m.array() / bias1;
    const Array v_hat = v.array() / bias2;
    theta.array() -= state.lr * m_hat / (v_hat.sqrt() + config.epsilon);
    if (weight_decay > 0.0)
      theta.array() -= state.lr * weight_decay * theta.array();
  }
}

double lr_plateau_update(const std::vector<double>& history, double lr0,
                         int patience, double factor) {
  if (history.empty())
    throw std::invalid_argument("lr_plateau_update: empty history");
  double lr = lr0;
  double best = std::numeric_limits<double>::infinity();
  int bad = 0;
  for (double loss : history) {
    if (loss < best) {
      best = loss;
      bad = 0;
    } else {
      if (++bad >= patience) {
        lr *= factor;
        bad = 0;
      }
    }
  }
  return lr;
}

bool early_stopping_update(const std::vector<double>& history, int patience) {
  if (history.empty())
    throw std::invalid_argument("early_stopping_update: empty history");
  double best = std::numeric_limits<double>::infinity();
  int bad = 0;
  for (double loss : history) {
    if (loss < best) {
      best = loss;
      bad = 0;
    } else {
      ++bad;
    }
  }
  return bad >= patience;
}

int best_epoch(const std::vector<double>& history) {
  const auto it = std::min_element(history.begin(), history.end());
  return static_cast<int>(it - history.begin());
}

namespace {

struct EvalSegment {
  Matrix signal;
  MatchResult match;
};

std::vector<EvalSegment> draw_eval_segments(
    const std::vector<std::shared_ptr<const LoadedRecord>>& records,
    const ModelConfig& model_config, const TrainConfig& config,
    const WindowGrid& grid, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0xE7A15EEDull));
  std::vector<EvalSegment> segments;
  for (int i = 0; i < config.eval_segments; ++i) {
    for (int attempt = 0;; ++attempt) {
      const auto idx = static_cast<std::size_t>(rng.uniform_int(
          0, static_cast<std::int64_t>(records.size()) - 1));
      try {
        SegmentSample sample = sample_segment(
            records[idx]->record, records[idx]->events,
            model_config.segment_seconds(), rng, model_config.event_classes);
        EvalSegment segment;
        segment.signal = std::move(sample.signal);
        segment.match =
            match_events(sample.events, grid, config.theta_match);
        segments.push_back(std::move(segment));
        break;
      } catch (const std::invalid_argument&) {
        if (attempt >= 100)
          throw std::runtime_error("train: eval split has no usable segments");
      }
    }
  }
  return segments;
}

}  // namespace

TrainResult train(
    const std::vector<std::shared_ptr<const LoadedRecord>>& train_records,
    const std::vector<std::shared_ptr<const LoadedRecord>>& eval_records,
    const ModelConfig& model_config, const TrainConfig& config,
    std::uint64_t seed, const TrainLogger& logger) {
  if (train_records.empty() || eval_records.empty())
    throw std::invalid_argument("train: empty train or eval split");
  model_config.validate();

  const WindowGrid grid = make_grid(model_config);
  Rng init_rng(mix_seed(seed, 0x1217ull));
  Params params = init_params(model_config, init_rng);
  AdamState adam = make_adam_state(params, config.lr0);

  BatchConfig batch_config;
  batch_config.batch_size = config.batch_size;
  batch_config.steps_per_epoch = config.steps_per_epoch;
  batch_config.segment_seconds = model_config.segment_seconds();
  BatchIterator iterator(train_records, batch_config, seed,
                         model_config.event_classes);

  const std::vector<EvalSegment> eval_segments =
      draw_eval_segments(eval_records, model_config, config, grid, seed);

  auto log_line = [&](const json& j) {
    if (logger) logger(j.dump());
  };

  auto eval_pass = [&](const Params& p) {
    double loss = 0.0;
    for (const auto& segment : eval_segments) {
      const NetworkOutput output =
          model_forward(segment.signal, model_config, p, grid, false);
      loss += total_loss(output, segment.match, config.negative_ratio).total;
    }
    return loss / static_cast<double>(eval_segments.size());
  };

  TrainResult result;
  result.best_params = params;
  result.initial_eval_loss = eval_pass(params);
  log_line({{"epoch", 0}, {"eval_loss", result.initial_eval_loss}});

  std::vector<double> history;
  double lr = config.lr0;

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    iterator.begin_epoch(epoch);
    for (int step = 0; step < config.steps_per_epoch; ++step) {
      const auto batch = iterator.next_batch();
      Params grads = zeros_like(params);
      std::vector<ForwardCache> caches(batch.size());
      std::vector<const ForwardCache*> cache_ptrs;
      LossBreakdown mean_loss;

      for (std::size_t b = 0; b < batch.size(); ++b) {
        const MatchResult match =
            match_events(batch[b].events, grid, config.theta_match);
        const NetworkOutput output =
            model_forward(batch[b].signal, model_config, params, grid, true,
                          &caches[b]);
        Matrix d_logits, d_loc;
        const LossBreakdown loss =
            total_loss(output, match, config.negative_ratio, &d_logits, &d_loc);
        if (!std::isfinite(loss.total)) {
          std::ostringstream oss;
          oss << "train: non-finite loss at epoch " << epoch << " step "
              << step << " record " << batch[b].record_id;
          throw TrainDivergence(oss.str());
        }
        // batch loss is the mean of per-segment losses
        const double scale = 1.0 / static_cast<double>(batch.size());
        model_backward(model_config, params, grid, caches[b],
                       d_logits * scale, d_loc * scale, grads);
        mean_loss.loc += loss.loc * scale;
        mean_loss.positive += loss.positive * scale;
        mean_loss.negative += loss.negative * scale;
        mean_loss.total += loss.total * scale;
        cache_ptrs.push_back(&caches[b]);
      }

      adam.lr = lr;
      adam_step(params, grads, adam, config.adam, model_config.weight_decay);
      update_running_stats(params, cache_ptrs, model_config.bn_momentum);

      log_line({{"epoch", epoch},
                {"step", step},
                {"loss_loc", mean_loss.loc},
                {"loss_pos", mean_loss.positive},
                {"loss_neg", mean_loss.negative},
                {"loss_total", mean_loss.total},
                {"lr", lr}});
    }

    // deterministic eval pass in inference mode
    const double eval_loss = eval_pass(params);
    history.push_back(eval_loss);

    const bool improved = best_epoch(history) == epoch - 1;
    if (improved) {
      result.best_params = params;
      result.best_epoch = epoch;
    }
    const double new_lr =
        lr_plateau_update(history, config.lr0, config.lr_patience,
                          config.lr_factor);
    const bool decayed = new_lr < lr;
    lr = new_lr;
    const bool stop =
        early_stopping_update(history, config.early_stop_patience);
    result.epochs_run = epoch;

    log_line({{"epoch", epoch},
              {"eval_loss", eval_loss},
              {"best", improved},
              {"decayed", decayed},
              {"stopped", stop}});

    if (stop) {
      result.stopped_early = true;
      break;
    }
  }

  result.final_params = params;
  result.eval_history = history;
  return result;
}

}  // namespace sleepdet
