#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sleepdet/event_geometry.hpp"
#include "sleepdet/network.hpp"
#include "sleepdet/sampler.hpp"
#include "sleepdet/types.hpp"

namespace sleepdet {

/// Huber penalty: 0.5 r^2 below unit residual, |r| - 0.5 above.
double huber(double residual);
double huber_grad(double residual);

struct LossBreakdown {
  double loc = 0.0;
  double positive = 0.0;
  double negative = 0.0;
  double total = 0.0;
  int num_positive = 0;
  std::vector<int> hard_negatives;  // selected window indices
};

double localization_loss(const Matrix& predicted, const Matrix& targets);

/// Mean negative log-likelihood of the matched class over positive windows.
double positive_class_loss(const Matrix& logits, const Matrix& one_hot);

/// Hard negative mining: of the unmatched windows, the ratio*n_positive
/// windows with the lowest negative-class probability (capped by
/// availability, ties broken by window index) contribute mean cross-entropy
/// against the negative class.
double hard_negative_loss(const Matrix& logits,
                          const std::vector<int>& unmatched, int n_positive,
                          int ratio, std::vector<int>* selected = nullptr);

/// Three-component detection loss. When d_logits/d_loc are non-null they
/// receive the exact gradients of the total loss (zero-initialized inside).
LossBreakdown total_loss(const NetworkOutput& output, const MatchResult& match,
                         int negative_ratio, Matrix* d_logits = nullptr,
                         Matrix* d_loc = nullptr);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::vector<Vector> m;
  std::vector<Vector> v;
  std::int64_t step = 0;
  double lr = 1e-3;
};

AdamState make_adam_state(Params& params, double lr);

/// One Adam update over every trainable tensor. Weight decay, when
/// non-zero, is applied decoupled from the moment estimates
/// (theta -= lr * decay * theta). Non-finite gradients abort.
void adam_step(Params& params, Params& grads, AdamState& state,
               const AdamConfig& config, double weight_decay);

/// Walks a per-epoch eval-loss history: the learning rate is multiplied by
/// `factor` whenever `patience` consecutive epochs fail to improve the best
/// loss; the counter resets on improvement or decay.
double lr_plateau_update(const std::vector<double>& history, double lr0,
                         int patience = 3, double factor = 0.1);

/// True when the trailing `patience` epochs all failed to improve on the
/// best loss seen so far.
bool early_stopping_update(const std::vector<double>& history,
                           int patience = 10);

/// Index of the best (lowest) loss epoch, 0-based.
int best_epoch(const std::vector<double>& history);

struct TrainConfig {
  AdamConfig adam;
  double lr0 = 1e-3;
  int lr_patience = 3;
  double lr_factor = 0.1;
  int early_stop_patience = 10;
  int negative_ratio = 3;
  int batch_size = 8;
  int steps_per_epoch = 200;
  int max_epochs = 50;
  int eval_segments = 100;
  double theta_match = 0.5;
};

struct TrainResult {
  Params best_params;   // checkpoint of the best eval epoch
  Params final_params;  // state after the last epoch run
  int best_epoch = 0;
  int epochs_run = 0;
  double initial_eval_loss = 0.0;  // untrained model on the eval segments
  std::vector<double> eval_history;
  bool stopped_early = false;
};

struct TrainDivergence : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Per-step / per-epoch logging callback; receives one JSON line.
using TrainLogger = std::function<void(const std::string&)>;

TrainResult train(const std::vector<std::shared_ptr<const LoadedRecord>>& train_records,
                  const std::vector<std::shared_ptr<const LoadedRecord>>& eval_records,
                  const ModelConfig& model_config, const TrainConfig& config,
                  std::uint64_t seed, const TrainLogger& logger = nullptr);

}  // namespace sleepdet
