#pragma once

#include <functional>
#include <string>
#include <vector>

#include "sleepdet/event_geometry.hpp"
#include "sleepdet/rng.hpp"
#include "sleepdet/types.hpp"

namespace sleepdet {

enum class HeadVariant { Dense, Depthwise };

std::string to_string(HeadVariant variant);
HeadVariant head_variant_from_string(const std::string& name);

/// One feature-extraction stream and the channel rows it reads from the
/// segment matrix.
struct StreamSpec {
  std::string name;
  std::vector<int> channel_rows;
};

/// Architecture hyperparameters. The conv stack uses kernel 3 / stride 2 /
/// pad 1 blocks, so the temporal axis shrinks by 2^k_max.
struct ModelConfig {
  std::vector<EventClass> event_classes;  // K-1 detection classes
  std::vector<StreamSpec> streams;
  std::vector<WindowSpec> windows;  // anchor geometry per event class
  int f0 = 4;
  int k_max = 4;
  int n_h = 32;
  int n_a = 32;
  int segment_samples = 15360;
  double fs = 128.0;
  HeadVariant head = HeadVariant::Dense;
  double weight_decay = 0.0;
  double bn_eps = 1e-6;
  double bn_momentum = 0.9;
  // Normalization statistics at inference: per-segment temporal statistics
  // (the same computation as training) by default. The running averages are
  // still tracked and checkpointed; set false to normalize with them
  // instead. Per-segment statistics are content-adaptive, so their running
  // average does not normalize any particular segment well; scoring with it
  // measurably destabilizes eval-loss scheduling and detection accuracy.
  bool instance_norm_inference = true;

  int num_classes() const { return static_cast<int>(event_classes.size()) + 1; }
  int negative_class() const { return num_classes() - 1; }
  int stream_filters() const { return f0 << (k_max - 1); }
  int fused_filters() const {
    return stream_filters() * static_cast<int>(streams.size());
  }
  int reduced_samples() const { return segment_samples >> k_max; }
  double segment_seconds() const { return segment_samples / fs; }

  void validate() const;
};

/// Joint-detection configuration over the canonical 10-channel layout.
ModelConfig default_model_config();
/// Restriction of a config to a single stream / single event class.
ModelConfig single_event_config(const ModelConfig& base, EventClass cls);

WindowGrid make_grid(const ModelConfig& config);

struct ConvBlockParams {
  Matrix kernel;  // f_out x (3 * f_in), taps stored as [K0 K1 K2]
  Vector gamma;
  Vector beta;
  Vector run_mean;  // buffers, not trained
  Vector run_var;
};

struct StreamParams {
  Matrix mix_weight;  // C x C
  Vector mix_bias;
  std::vector<ConvBlockParams> blocks;
};

struct GruDirParams {
  Matrix wz_update, wh_update;
  Matrix wz_reset, wh_reset;
  Matrix wz_new, wh_new;
  Vector bz_update, bh_update;
  Vector bz_reset, bh_reset;
  Vector bz_new, bh_new;
};

struct AttentionParams {
  Matrix w_hidden;  // 2n_h x n_a
  Matrix w_score;   // n_a x K
};

struct DenseHeadParams {
  Matrix w_clf;  // (N_d*K) x (2n_h*K)
  Vector b_clf;
  Matrix w_loc;  // (N_d*2) x (2n_h*K)
  Vector b_loc;
};

struct DepthwiseHeadParams {
  std::vector<Matrix> w_clf;  // per class: N_d x 2n_h
  std::vector<Vector> b_clf;
  std::vector<Matrix> w_loc;  // per event class: (n_k*2) x 2n_h
  std::vector<Vector> b_loc;
};

struct Params {
  std::vector<StreamParams> streams;
  GruDirParams gru_fwd, gru_bwd;
  AttentionParams attention;
  HeadVariant head = HeadVariant::Dense;
  DenseHeadParams dense;
  DepthwiseHeadParams depthwise;
};

/// Flat view over one tensor; `flat` maps the tensor's storage in place.
struct TensorView {
  std::string name;
  Eigen::Map<Vector> flat;
  bool trainable = true;
};

/// Ordered, named views over every tensor (weights first order is fixed and
/// defines the checkpoint layout). Running statistics are included with
/// trainable=false.
std::vector<TensorView> tensor_views(Params& params);

Params init_params(const ModelConfig& config, Rng& rng);
/// Zero-valued tensors with the same shapes; used as gradient accumulators.
Params zeros_like(const Params& params);

struct NetworkOutput {
  Matrix logits;  // N_d x K
  Matrix loc;     // N_d x 2
};

/// Row-wise softmax with max subtraction.
Matrix softmax_rows(const Matrix& logits);

struct ConvBlockCache {
  Matrix zcol;      // (3 f_in) x T_out
  Matrix xhat;      // normalized pre-activation
  Matrix pre_relu;  // gamma*xhat + beta
  Vector mean, var, inv_std;
  Index t_in = 0;
};

struct StreamCache {
  Matrix input;    // stream channel slice
  Matrix mix_pre;  // before ReLU
  Matrix mix_out;
  std::vector<ConvBlockCache> blocks;
  Matrix features;  // f' x T'
};

struct GruDirCache {
  Matrix update, reset, candidate, hidden;  // n_h x T'
  Matrix recur_pre;                         // Wh_new h_prev + bh_new
};

struct AttentionCache {
  Matrix hidden_tanh;  // T' x n_a
  Matrix alpha;        // T' x K
};

struct ForwardCache {
  std::vector<StreamCache> streams;
  Matrix fused;  // 3f' x T'
  GruDirCache fwd, bwd;
  Matrix hidden;   // 2n_h x T'
  AttentionCache attention;
  Matrix context;  // 2n_h x K
  bool training = true;
};

// --- building blocks (each usable standalone; model_forward composes) ---

Matrix channel_mixing(const Matrix& x, const Matrix& weight, const Vector& bias,
                      Matrix* pre_cache = nullptr);

Matrix conv_block_forward(const Matrix& z_in, const ConvBlockParams& block,
                          bool training, double bn_eps,
                          ConvBlockCache* cache = nullptr);

/// Concatenated forward/backward GRU features, 2n_h x T'.
Matrix bgru_forward(const Matrix& z, const GruDirParams& fwd,
                    const GruDirParams& bwd, GruDirCache* cache_fwd = nullptr,
                    GruDirCache* cache_bwd = nullptr);

/// Per-class context vectors (2n_h x K) and attention weights (T' x K whose
/// columns sum to one).
void additive_attention(const Matrix& hidden, const AttentionParams& params,
                        Matrix& context, Matrix& alpha,
                        AttentionCache* cache = nullptr);

NetworkOutput detection_heads(const Matrix& context, const Params& params,
                              const ModelConfig& config,
                              const WindowGrid& grid);

NetworkOutput model_forward(const Matrix& segment, const ModelConfig& config,
                            const Params& params, const WindowGrid& grid,
                            bool training, ForwardCache* cache = nullptr);

/// Exact reverse-mode gradients for every trainable tensor, accumulated
/// into `grads` (which must be zeros_like or a running accumulator).
void model_backward(const ModelConfig& config, const Params& params,
                    const WindowGrid& grid, const ForwardCache& cache,
                    const Matrix& d_logits, const Matrix& d_loc,
                    Params& grads);

/// Folds the batch-norm statistics observed in the caches into the running
/// averages: run <- momentum*run + (1-momentum)*batch_mean(stat).
void update_running_stats(Params& params,
                          const std::vector<const ForwardCache*>& caches,
                          double momentum);

/// Checkpoint serialization: 4-byte little-endian manifest length, JSON
/// manifest (model config, seed, epoch, tensor table), then raw float32
/// little-endian blocks in tensor_views order.
struct Checkpoint {
  ModelConfig config;
  Params params;
  std::uint64_t seed = 0;
  int epoch = 0;
};

void save_checkpoint(const Checkpoint& checkpoint, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace sleepdet
