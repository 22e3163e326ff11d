#include "sleepdet/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "sleepdet/signal_io.hpp"

namespace sleepdet {

using nlohmann::json;

std::string to_string(HeadVariant variant) {
  return variant == HeadVariant::Dense ? "dense" : "depthwise";
}

HeadVariant head_variant_from_string(const std::string& name) {
  if (name == "dense") return HeadVariant::Dense;
  if (name == "depthwise") return HeadVariant::Depthwise;
  throw std::invalid_argument("unknown head variant '" + name + "'");
}

void ModelConfig::validate() const {
  if (event_classes.empty())
    throw std::invalid_argument("model config: no event classes");
  if (streams.empty()) throw std::invalid_argument("model config: no streams");
  for (const auto& stream : streams) {
    if (stream.channel_rows.empty())
      throw std::invalid_argument("model config: stream '" + stream.name +
                                  "' has no channels");
  }
  if (f0 < 1 || k_max < 1 || n_h < 1 || n_a < 1)
    throw std::invalid_argument("model config: sizes must be positive");
  if (segment_samples % (1 << k_max) != 0)
    throw std::invalid_argument(
        "model config: segment_samples must be divisible by 2^k_max");
  if (reduced_samples() < 1)
    throw std::invalid_argument("model config: reduced temporal axis empty");
  if (windows.size() != event_classes.size())
    throw std::invalid_argument(
        "model config: one window spec per event class required");
  for (std::size_t i = 0; i < windows.size(); ++i) {
    if (windows[i].cls != event_classes[i])
      throw std::invalid_argument(
          "model config: window spec order must match event classes");
    if (windows[i].duration > segment_seconds() + 1e-9)
      throw std::invalid_argument(
          "model config: window duration exceeds segment length");
  }
}

ModelConfig default_model_config() {
  ModelConfig config;
  config.event_classes = {EventClass::Arousal, EventClass::LimbMovement,
                          EventClass::DisorderedBreathing};
  const auto& names = canonical_channels();
  auto rows_of = [&](std::initializer_list<const char*> wanted) {
    std::vector<int> rows;
    for (const char* w : wanted) {
      const auto it = std::find(names.begin(), names.end(), std::string(w));
      rows.push_back(static_cast<int>(it - names.begin()));
    }
    return rows;
  };
  config.streams = {
      {"arousal", rows_of({"C3", "C4", "EOGL", "EOGR", "ChinEMG"})},
      {"limb", rows_of({"LegL", "LegR"})},
      {"breathing", rows_of({"NasalPres", "Thorax", "Abdomen"})}};
  config.windows = {{EventClass::Arousal, 15.0, 7.5},
                    {EventClass::LimbMovement, 3.0, 1.5},
                    {EventClass::DisorderedBreathing, 30.0, 15.0}};
  return config;
}

ModelConfig single_event_config(const ModelConfig& base, EventClass cls) {
  ModelConfig config = base;
  std::size_t idx = 0;
  while (idx < base.event_classes.size() && base.event_classes[idx] != cls)
    ++idx;
  if (idx >= base.event_classes.size())
    throw std::invalid_argument("single_event_config: class not in base config");
  config.event_classes = {cls};
  config.streams = {base.streams[idx]};
  config.windows = {base.windows[idx]};
  return config;
}

WindowGrid make_grid(const ModelConfig& config) {
  return generate_default_windows(config.segment_seconds(), config.windows);
}

// ---------------------------------------------------------------------------
// parameter registry

namespace {

void add_view(std::vector<TensorView>& views, const std::string& name,
              Matrix& m, bool trainable = true) {
  views.push_back({name, Eigen::Map<Vector>(m.data(), m.size()), trainable});
}

void add_view(std::vector<TensorView>& views, const std::string& name,
              Vector& v, bool trainable = true) {
  views.push_back({name, Eigen::Map<Vector>(v.data(), v.size()), trainable});
}

void gru_views(std::vector<TensorView>& views, const std::string& prefix,
               GruDirParams& p) {
  add_view(views, prefix + ".wz_update", p.wz_update);
  add_view(views, prefix + ".wh_update", p.wh_update);
  add_view(views, prefix + ".bz_update", p.bz_update);
  add_view(views, prefix + ".bh_update", p.bh_update);
  add_view(views, prefix + ".wz_reset", p.wz_reset);
  add_view(views, prefix + ".wh_reset", p.wh_reset);
  add_view(views, prefix + ".bz_reset", p.bz_reset);
  add_view(views, prefix + ".bh_reset", p.bh_reset);
  add_view(views, prefix + ".wz_new", p.wz_new);
  add_view(views, prefix + ".wh_new", p.wh_new);
  add_view(views, prefix + ".bz_new", p.bz_new);
  add_view(views, prefix + ".bh_new", p.bh_new);
}

}  // namespace

std::vector<TensorView> tensor_views(Params& params) {
  std::vector<TensorView> views;
  for (std::size_t s = 0; s < params.streams.size(); ++s) {
    auto& stream = params.streams[s];
    const std::string sp = "stream" + std::to_string(s);
    add_view(views, sp + ".mix.weight", stream.mix_weight);
    add_view(views, sp + ".mix.bias", stream.mix_bias);
    for (std::size_t k = 0; k < stream.blocks.size(); ++k) {
      auto& block = stream.blocks[k];
      const std::string bp = sp + ".block" + std::to_string(k);
      add_view(views, bp + ".kernel", block.kernel);
      add_view(views, bp + ".gamma", block.gamma);
      add_view(views, bp + ".beta", block.beta);
      add_view(views, bp + ".run_mean", block.run_mean, false);
      add_view(views, bp + ".run_var", block.run_var, false);
    }
  }
  gru_views(views, "gru.fwd", params.gru_fwd);
  gru_views(views, "gru.bwd", params.gru_bwd);
  add_view(views, "attention.w_hidden", params.attention.w_hidden);
  add_view(views, "attention.w_score", params.attention.w_score);
  if (params.head == HeadVariant::Dense) {
    add_view(views, "head.w_clf", params.dense.w_clf);
    add_view(views, "head.b_clf", params.dense.b_clf);
    add_view(views, "head.w_loc", params.dense.w_loc);
    add_view(views, "head.b_loc", params.dense.b_loc);
  } else {
    for (std::size_t k = 0; k < params.depthwise.w_clf.size(); ++k) {
      const std::string hp = "head.class" + std::to_string(k);
      add_view(views, hp + ".w_clf", params.depthwise.w_clf[k]);
      add_view(views, hp + ".b_clf", params.depthwise.b_clf[k]);
    }
    for (std::size_t k = 0; k < params.depthwise.w_loc.size(); ++k) {
      const std::string hp = "head.class" + std::to_string(k);
      add_view(views, hp + ".w_loc", params.depthwise.w_loc[k]);
      add_view(views, hp + ".b_loc", params.depthwise.b_loc[k]);
    }
  }
  return views;
}

// ---------------------------------------------------------------------------
// initialization

namespace {

Matrix glorot_uniform(Index rows, Index cols, Rng& rng) {
  const double bound =
      std::sqrt(6.0 / static_cast<double>(rows + cols));
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i)
    m.data()[i] = rng.uniform(-bound, bound);
  return m;
}

Matrix orthogonal_init(Index rows, Index cols, Rng& rng) {
  const Index big = std::max(rows, cols);
  const Index small = std::min(rows, cols);
  Matrix gauss(big, small);
  for (Index i = 0; i < gauss.size(); ++i) gauss.data()[i] = rng.normal();
  Eigen::HouseholderQR<Matrix> qr(gauss);
  Matrix q = qr.householderQ() * Matrix::Identity(big, small);
  const Matrix r = qr.matrixQR().topRows(small);
  for (Index j = 0; j < small; ++j)
    if (r(j, j) < 0.0) q.col(j) = -q.col(j);
  return rows >= cols ? q : Matrix(q.transpose());
}

GruDirParams init_gru_dir(int n_h, int n_in, Rng& rng) {
  GruDirParams p;
  p.wz_update = orthogonal_init(n_h, n_in, rng);
  p.wh_update = orthogonal_init(n_h, n_h, rng);
  p.wz_reset = orthogonal_init(n_h, n_in, rng);
  p.wh_reset = orthogonal_init(n_h, n_h, rng);
  p.wz_new = orthogonal_init(n_h, n_in, rng);
  p.wh_new = orthogonal_init(n_h, n_h, rng);
  // positive update-gate bias starts the cells with long memory, which the
  // attention needs before it can localize anything over hundreds of steps
  p.bz_update = Vector::Zero(n_h);
  p.bh_update = Vector::Constant(n_h, 2.0);
  p.bz_reset = Vector::Zero(n_h);
  p.bh_reset = Vector::Zero(n_h);
  p.bz_new = Vector::Zero(n_h);
  p.bh_new = Vector::Zero(n_h);
  return p;
}

}  // namespace

Params init_params(const ModelConfig& config, Rng& rng) {
  config.validate();
  Params params;
  params.head = config.head;
  for (const auto& stream : config.streams) {
    StreamParams sp;
    const auto c = static_cast<Index>(stream.channel_rows.size());
    sp.mix_weight = glorot_uniform(c, c, rng);
    sp.mix_bias = Vector::Zero(c);
    int f_in = static_cast<int>(c);
    for (int k = 1; k <= config.k_max; ++k) {
      const int f_out = config.f0 << (k - 1);
      ConvBlockParams block;
      block.kernel = glorot_uniform(f_out, 3 * f_in, rng);
      block.gamma = Vector::Ones(f_out);
      block.beta = Vector::Zero(f_out);
      block.run_mean = Vector::Zero(f_out);
      block.run_var = Vector::Ones(f_out);
      sp.blocks.push_back(std::move(block));
      f_in = f_out;
    }
    params.streams.push_back(std::move(sp));
  }
  const int fused = config.fused_filters();
  params.gru_fwd = init_gru_dir(config.n_h, fused, rng);
  params.gru_bwd = init_gru_dir(config.n_h, fused, rng);
  params.attention.w_hidden = glorot_uniform(2 * config.n_h, config.n_a, rng);
  params.attention.w_score = glorot_uniform(config.n_a, config.num_classes(), rng);

  const WindowGrid grid = make_grid(config);
  const int n_d = grid.size();
  const int k_total = config.num_classes();
  const int ctx = 2 * config.n_h;
  if (config.head == HeadVariant::Dense) {
    params.dense.w_clf = glorot_uniform(n_d * k_total, ctx * k_total, rng);
    params.dense.b_clf = Vector::Zero(n_d * k_total);
    params.dense.w_loc = glorot_uniform(n_d * 2, ctx * k_total, rng);
    params.dense.b_loc = Vector::Zero(n_d * 2);
  } else {
    for (int k = 0; k < k_total; ++k) {
      params.depthwise.w_clf.push_back(glorot_uniform(n_d, ctx, rng));
      params.depthwise.b_clf.push_back(Vector::Zero(n_d));
    }
    for (std::size_t e = 0; e < config.event_classes.size(); ++e) {
      const int n_e = grid.class_end[e] - grid.class_begin[e];
      params.depthwise.w_loc.push_back(glorot_uniform(n_e * 2, ctx, rng));
      params.depthwise.b_loc.push_back(Vector::Zero(n_e * 2));
    }
  }
  return params;
}

Params zeros_like(const Params& params) {
  Params zeros = params;
  auto views = tensor_views(zeros);
  for (auto& view : views) view.flat.setZero();
  return zeros;
}

// ---------------------------------------------------------------------------
// forward blocks

Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Index i = 0; i < logits.rows(); ++i) {
    const double peak = logits.row(i).maxCoeff();
    p.row(i) = (logits.row(i).array() - peak).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

Matrix channel_mixing(const Matrix& x, const Matrix& weight, const Vector& bias,
                      Matrix* pre_cache) {
  if (weight.rows() != x.rows() || weight.cols() != x.rows() ||
      bias.size() != x.rows())
    throw std::invalid_argument("channel_mixing: shape mismatch");
  Matrix pre = (weight * x).colwise() + bias;
  if (pre_cache) *pre_cache = pre;
  return pre.cwiseMax(0.0);
}

namespace {

/// Gathers strided columns of z into the tap-u rows of zcol. Column j of
/// zcol takes input column 2j + u - 1 (zero outside bounds).
void im2col_tap(const Matrix& z, int u, Matrix& zcol) {
  const Index f_in = z.rows();
  const Index t_out = zcol.cols();
  auto rows = zcol.middleRows(static_cast<Index>(u) * f_in, f_in);
  rows.setZero();
  const Index start = static_cast<Index>(u) - 1;
  const Index j0 = start < 0 ? 1 : 0;
  for (Index j = j0; j < t_out; ++j) {
    const Index col = 2 * j + start;
    if (col >= z.cols()) break;
    rows.col(j) = z.col(col);
  }
}

void col2im_tap(const Matrix& d_zcol, int u, Matrix& d_z) {
  const Index f_in = d_z.rows();
  const Index t_out = d_zcol.cols();
  const auto rows = d_zcol.middleRows(static_cast<Index>(u) * f_in, f_in);
  const Index start = static_cast<Index>(u) - 1;
  const Index j0 = start < 0 ? 1 : 0;
  for (Index j = j0; j < t_out; ++j) {
    const Index col = 2 * j + start;
    if (col >= d_z.cols()) break;
    d_z.col(col) += rows.col(j);
  }
}

}  // namespace

Matrix conv_block_forward(const Matrix& z_in, const ConvBlockParams& block,
                          bool training, double bn_eps,
                          ConvBlockCache* cache) {
  const Index f_in = z_in.rows();
  const Index t_in = z_in.cols();
  if (t_in % 2 != 0)
    throw std::invalid_argument("conv_block_forward: odd temporal length");
  if (block.kernel.cols() != 3 * f_in)
    throw std::invalid_argument("conv_block_forward: kernel shape mismatch");
  const Index t_out = t_in / 2;

  Matrix zcol(3 * f_in, t_out);
  for (int u = 0; u < 3; ++u) im2col_tap(z_in, u, zcol);
  Matrix conv = block.kernel * zcol;

  Vector mean, var;
  if (training) {
    mean = conv.rowwise().mean();
    var = (conv.colwise() - mean).array().square().rowwise().mean().matrix();
  } else {
    mean = block.run_mean;
    var = block.run_var;
  }
  const Vector inv_std = (var.array() + bn_eps).rsqrt().matrix();
  Matrix xhat =
      ((conv.colwise() - mean).array().colwise() * inv_std.array()).matrix();
  Matrix pre_relu =
      ((xhat.array().colwise() * block.gamma.array()).colwise() +
       block.beta.array())
          .matrix();
  if (cache) {
    cache->zcol = std::move(zcol);
    cache->xhat = xhat;
    cache->pre_relu = pre_relu;
    cache->mean = mean;
    cache->var = var;
    cache->inv_std = inv_std;
    cache->t_in = t_in;
  }
  return pre_relu.cwiseMax(0.0);
}

namespace {

inline Array sigmoid(const Array& x) { return 1.0 / (1.0 + (-x).exp()); }

void gru_direction_forward(const Matrix& z, const GruDirParams& p,
                           bool reverse, GruDirCache& cache) {
  const Index n_h = p.wz_update.rows();
  const Index t_total = z.cols();
  const Matrix proj_u = (p.wz_update * z).colwise() + p.bz_update;
  const Matrix proj_r = (p.wz_reset * z).colwise() + p.bz_reset;
  const Matrix proj_n = (p.wz_new * z).colwise() + p.bz_new;

  cache.update.resize(n_h, t_total);
  cache.reset.resize(n_h, t_total);
  cache.candidate.resize(n_h, t_total);
  cache.hidden.resize(n_h, t_total);
  cache.recur_pre.resize(n_h, t_total);

  Vector h_prev = Vector::Zero(n_h);
  for (Index i = 0; i < t_total; ++i) {
    const Index t = reverse ? t_total - 1 - i : i;
    const Array u =
        sigmoid((proj_u.col(t) + p.wh_update * h_prev + p.bh_update).array());
    const Array r =
        sigmoid((proj_r.col(t) + p.wh_reset * h_prev + p.bh_reset).array());
    const Array q = (p.wh_new * h_prev + p.bh_new).array();
    const Array n = (proj_n.col(t).array() + r * q).tanh();
    const Array h = (1.0 - u) * n + u * h_prev.array();
    cache.update.col(t) = u.matrix();
    cache.reset.col(t) = r.matrix();
    cache.recur_pre.col(t) = q.matrix();
    cache.candidate.col(t) = n.matrix();
    cache.hidden.col(t) = h.matrix();
    h_prev = h.matrix();
  }
}

void gru_direction_backward(const Matrix& z, const GruDirParams& p,
                            bool reverse, const GruDirCache& cache,
                            const Eigen::Ref<const Matrix>& d_hidden,
                            GruDirParams& grads, Matrix& d_z) {
  const Index n_h = p.wz_update.rows();
  const Index t_total = z.cols();
  Matrix d_proj_u = Matrix::Zero(n_h, t_total);
  Matrix d_proj_r = Matrix::Zero(n_h, t_total);
  Matrix d_proj_n = Matrix::Zero(n_h, t_total);

  Vector dh_carry = Vector::Zero(n_h);
  const Vector h_zero = Vector::Zero(n_h);
  Vector h_prev(n_h);
  for (Index i = t_total - 1; i >= 0; --i) {
    const Index t = reverse ? t_total - 1 - i : i;
    const bool has_prev = i > 0;
    const Index t_prev = reverse ? t + 1 : t - 1;
    if (has_prev) {
      h_prev = cache.hidden.col(t_prev);
    } else {
      h_prev = h_zero;
    }

    const Array u = cache.update.col(t).array();
    const Array r = cache.reset.col(t).array();
    const Array n = cache.candidate.col(t).array();
    const Array q = cache.recur_pre.col(t).array();

    const Array dh = d_hidden.col(t).array() + dh_carry.array();
    const Array du = dh * (h_prev.array() - n);
    const Array dn = dh * (1.0 - u);
    Array dh_next = dh * u;

    const Array da_n = dn * (1.0 - n.square());
    d_proj_n.col(t) = da_n.matrix();
    const Array dr = da_n * q;
    const Vector dq = (da_n * r).matrix();
    grads.wh_new.noalias() += dq * h_prev.transpose();
    grads.bh_new += dq;
    dh_next += (p.wh_new.transpose() * dq).array();

    const Vector da_u = (du * u * (1.0 - u)).matrix();
    const Vector da_r = (dr * r * (1.0 - r)).matrix();
    d_proj_u.col(t) = da_u;
    d_proj_r.col(t) = da_r;
    grads.wh_update.noalias() += da_u * h_prev.transpose();
    grads.bh_update += da_u;
    dh_next += (p.wh_update.transpose() * da_u).array();
    grads.wh_reset.noalias() += da_r * h_prev.transpose();
    grads.bh_reset += da_r;
    dh_next += (p.wh_reset.transpose() * da_r).array();

    dh_carry = dh_next.matrix();
  }

  grads.wz_update.noalias() += d_proj_u * z.transpose();
  grads.bz_update += d_proj_u.rowwise().sum();
  grads.wz_reset.noalias() += d_proj_r * z.transpose();
  grads.bz_reset += d_proj_r.rowwise().sum();
  grads.wz_new.noalias() += d_proj_n * z.transpose();
  grads.bz_new += d_proj_n.rowwise().sum();
  d_z.noalias() += p.wz_update.transpose() * d_proj_u;
  d_z.noalias() += p.wz_reset.transpose() * d_proj_r;
  d_z.noalias() += p.wz_new.transpose() * d_proj_n;
}

}  // namespace

Matrix bgru_forward(const Matrix& z, const GruDirParams& fwd,
                    const GruDirParams& bwd, GruDirCache* cache_fwd,
                    GruDirCache* cache_bwd) {
  GruDirCache local_fwd, local_bwd;
  GruDirCache& cf = cache_fwd ? *cache_fwd : local_fwd;
  GruDirCache& cb = cache_bwd ? *cache_bwd : local_bwd;
  gru_direction_forward(z, fwd, false, cf);
  gru_direction_forward(z, bwd, true, cb);
  const Index n_h = fwd.wz_update.rows();
  Matrix hidden(2 * n_h, z.cols());
  hidden.topRows(n_h) = cf.hidden;
  hidden.bottomRows(n_h) = cb.hidden;
  return hidden;
}

void additive_attention(const Matrix& hidden, const AttentionParams& params,
                        Matrix& context, Matrix& alpha,
                        AttentionCache* cache) {
  const Matrix pre = hidden.transpose() * params.w_hidden;  // T' x n_a
  const Matrix hidden_tanh = pre.array().tanh();
  Matrix scores = hidden_tanh * params.w_score;  // T' x K
  alpha.resize(scores.rows(), scores.cols());
  for (Index k = 0; k < scores.cols(); ++k) {
    const double peak = scores.col(k).maxCoeff();
    alpha.col(k) = (scores.col(k).array() - peak).exp();
    alpha.col(k) /= alpha.col(k).sum();
  }
  context = hidden * alpha;  // 2n_h x K
  if (cache) {
    cache->hidden_tanh = hidden_tanh;
    cache->alpha = alpha;
  }
}

NetworkOutput detection_heads(const Matrix& context, const Params& params,
                              const ModelConfig& config,
                              const WindowGrid& grid) {
  const int n_d = grid.size();
  const int k_total = config.num_classes();
  NetworkOutput out;
  if (params.head == HeadVariant::Dense) {
    const Eigen::Map<const Vector> c_vec(context.data(), context.size());
    const Vector s_flat = params.dense.w_clf * c_vec + params.dense.b_clf;
    const Vector y_flat = params.dense.w_loc * c_vec + params.dense.b_loc;
    out.logits = Eigen::Map<const Matrix>(s_flat.data(), n_d, k_total);
    out.loc = Eigen::Map<const Matrix>(y_flat.data(), n_d, 2);
  } else {
    out.logits.resize(n_d, k_total);
    for (int k = 0; k < k_total; ++k) {
      out.logits.col(k) = params.depthwise.w_clf[static_cast<std::size_t>(k)] *
                              context.col(k) +
                          params.depthwise.b_clf[static_cast<std::size_t>(k)];
    }
    out.loc.resize(n_d, 2);
    for (std::size_t e = 0; e < config.event_classes.size(); ++e) {
      const int begin = grid.class_begin[e];
      const int n_e = grid.class_end[e] - begin;
      const Vector y_flat =
          params.depthwise.w_loc[e] * context.col(static_cast<Index>(e)) +
          params.depthwise.b_loc[e];
      out.loc.block(begin, 0, n_e, 2) =
          Eigen::Map<const Matrix>(y_flat.data(), n_e, 2);
    }
  }
  return out;
}

NetworkOutput model_forward(const Matrix& segment, const ModelConfig& config,
                            const Params& params, const WindowGrid& grid,
                            bool training, ForwardCache* cache) {
  if (segment.cols() != config.segment_samples)
    throw std::invalid_argument("model_forward: segment length mismatch");
  ForwardCache local;
  ForwardCache& c = cache ? *cache : local;
  c.training = training;
  c.streams.assign(config.streams.size(), {});

  const int t_reduced = config.reduced_samples();
  c.fused.resize(config.fused_filters(), t_reduced);
  Index fused_row = 0;
  for (std::size_t s = 0; s < config.streams.size(); ++s) {
    const auto& spec = config.streams[s];
    StreamCache& sc = c.streams[s];
    sc.input.resize(static_cast<Index>(spec.channel_rows.size()),
                    segment.cols());
    for (std::size_t r = 0; r < spec.channel_rows.size(); ++r)
      sc.input.row(static_cast<Index>(r)) = segment.row(spec.channel_rows[r]);

    sc.mix_out = channel_mixing(sc.input, params.streams[s].mix_weight,
                                params.streams[s].mix_bias, &sc.mix_pre);
    Matrix z = sc.mix_out;
    sc.blocks.resize(params.streams[s].blocks.size());
    const bool batch_stats = training || config.instance_norm_inference;
    for (std::size_t k = 0; k < params.streams[s].blocks.size(); ++k) {
      z = conv_block_forward(z, params.streams[s].blocks[k], batch_stats,
                             config.bn_eps, &sc.blocks[k]);
    }
    sc.features = z;
    c.fused.middleRows(fused_row, z.rows()) = z;
    fused_row += z.rows();
  }

  c.hidden = bgru_forward(c.fused, params.gru_fwd, params.gru_bwd, &c.fwd,
                          &c.bwd);
  Matrix alpha;
  additive_attention(c.hidden, params.attention, c.context, alpha,
                     &c.attention);
  return detection_heads(c.context, params, config, grid);
}

namespace {

Matrix conv_block_backward(const Matrix& d_out, const ConvBlockParams& block,
                           const ConvBlockCache& cache,
                           ConvBlockParams& grads) {
  const Matrix d_pre =
      (cache.pre_relu.array() > 0.0).select(d_out, Matrix::Zero(d_out.rows(),
                                                                d_out.cols()));
  grads.beta += d_pre.rowwise().sum();
  grads.gamma += (d_pre.array() * cache.xhat.array()).rowwise().sum().matrix();
  const Matrix d_xhat =
      (d_pre.array().colwise() * block.gamma.array()).matrix();

  // backprop through the per-row temporal statistics
  const Vector m1 = d_xhat.rowwise().mean();
  const Vector m2 =
      (d_xhat.array() * cache.xhat.array()).rowwise().mean().matrix();
  const Matrix d_conv = (((d_xhat.colwise() - m1).array() -
                          cache.xhat.array().colwise() * m2.array())
                             .colwise() *
                         cache.inv_std.array())
                            .matrix();

  grads.kernel.noalias() += d_conv * cache.zcol.transpose();
  const Matrix d_zcol = block.kernel.transpose() * d_conv;
  const Index f_in = block.kernel.cols() / 3;
  Matrix d_in = Matrix::Zero(f_in, cache.t_in);
  for (int u = 0; u < 3; ++u) col2im_tap(d_zcol, u, d_in);
  return d_in;
}

}  // namespace

void model_backward(const ModelConfig& config, const Params& params,
                    const WindowGrid& grid, const ForwardCache& cache,
                    const Matrix& d_logits, const Matrix& d_loc,
                    Params& grads) {
  if (!cache.training)
    throw std::logic_error("model_backward: cache from inference-mode forward");
  const int k_total = config.num_classes();
  const Index ctx_rows = 2 * config.n_h;

  // heads
  Matrix d_context = Matrix::Zero(ctx_rows, k_total);
  if (params.head == HeadVariant::Dense) {
    const Eigen::Map<const Vector> c_vec(cache.context.data(),
                                         cache.context.size());
    const Eigen::Map<const Vector> ds_flat(d_logits.data(), d_logits.size());
    const Eigen::Map<const Vector> dy_flat(d_loc.data(), d_loc.size());
    grads.dense.w_clf.noalias() += ds_flat * c_vec.transpose();
    grads.dense.b_clf += ds_flat;
    grads.dense.w_loc.noalias() += dy_flat * c_vec.transpose();
    grads.dense.b_loc += dy_flat;
    Vector dc_vec = params.dense.w_clf.transpose() * ds_flat;
    dc_vec.noalias() += params.dense.w_loc.transpose() * dy_flat;
    d_context += Eigen::Map<const Matrix>(dc_vec.data(), ctx_rows, k_total);
  } else {
    for (int k = 0; k < k_total; ++k) {
      const auto ks = static_cast<std::size_t>(k);
      const Vector ds_k = d_logits.col(k);
      grads.depthwise.w_clf[ks].noalias() +=
          ds_k * cache.context.col(k).transpose();
      grads.depthwise.b_clf[ks] += ds_k;
      d_context.col(k).noalias() +=
          params.depthwise.w_clf[ks].transpose() * ds_k;
    }
    for (std::size_t e = 0; e < config.event_classes.size(); ++e) {
      const int begin = grid.class_begin[e];
      const int n_e = grid.class_end[e] - begin;
      const Matrix dy_block = d_loc.block(begin, 0, n_e, 2);
      const Eigen::Map<const Vector> dy_flat(dy_block.data(),
                                             dy_block.size());
      grads.depthwise.w_loc[e].noalias() +=
          dy_flat * cache.context.col(static_cast<Index>(e)).transpose();
      grads.depthwise.b_loc[e] += dy_flat;
      d_context.col(static_cast<Index>(e)).noalias() +=
          params.depthwise.w_loc[e].transpose() * dy_flat;
    }
  }

  // attention
  const Matrix& alpha = cache.attention.alpha;
  const Matrix& hidden_tanh = cache.attention.hidden_tanh;
  Matrix d_hidden = d_context * alpha.transpose();  // 2n_h x T'
  const Matrix d_alpha = cache.hidden.transpose() * d_context;  // T' x K
  Matrix d_scores(alpha.rows(), alpha.cols());
  for (Index k = 0; k < alpha.cols(); ++k) {
    const double inner = alpha.col(k).dot(d_alpha.col(k));
    d_scores.col(k) =
        (alpha.col(k).array() * (d_alpha.col(k).array() - inner)).matrix();
  }
  grads.attention.w_score.noalias() += hidden_tanh.transpose() * d_scores;
  const Matrix d_tanh = d_scores * params.attention.w_score.transpose();
  const Matrix d_pre =
      (d_tanh.array() * (1.0 - hidden_tanh.array().square())).matrix();
  grads.attention.w_hidden.noalias() += cache.hidden * d_pre;
  d_hidden.noalias() += params.attention.w_hidden * d_pre.transpose();

  // bGRU
  const Index n_h = config.n_h;
  Matrix d_fused = Matrix::Zero(cache.fused.rows(), cache.fused.cols());
  gru_direction_backward(cache.fused, params.gru_fwd, false, cache.fwd,
                         d_hidden.topRows(n_h), grads.gru_fwd, d_fused);
  gru_direction_backward(cache.fused, params.gru_bwd, true, cache.bwd,
                         d_hidden.bottomRows(n_h), grads.gru_bwd, d_fused);

  // streams
  Index fused_row = 0;
  for (std::size_t s = 0; s < config.streams.size(); ++s) {
    const StreamCache& sc = cache.streams[s];
    const Index f_prime = sc.features.rows();
    Matrix d_z = d_fused.middleRows(fused_row, f_prime);
    fused_row += f_prime;
    for (std::size_t k = params.streams[s].blocks.size(); k-- > 0;) {
      d_z = conv_block_backward(d_z, params.streams[s].blocks[k],
                                sc.blocks[k], grads.streams[s].blocks[k]);
    }
    // mixing
    const Matrix d_mix_pre =
        (sc.mix_pre.array() > 0.0)
            .select(d_z, Matrix::Zero(d_z.rows(), d_z.cols()));
    grads.streams[s].mix_weight.noalias() +=
        d_mix_pre * sc.input.transpose();
    grads.streams[s].mix_bias += d_mix_pre.rowwise().sum();
  }
}

void update_running_stats(Params& params,
                          const std::vector<const ForwardCache*>& caches,
                          double momentum) {
  if (caches.empty()) return;
  const double scale = 1.0 / static_cast<double>(caches.size());
  for (std::size_t s = 0; s < params.streams.size(); ++s) {
    for (std::size_t k = 0; k < params.streams[s].blocks.size(); ++k) {
      auto& block = params.streams[s].blocks[k];
      Vector mean = Vector::Zero(block.run_mean.size());
      Vector var = Vector::Zero(block.run_var.size());
      for (const ForwardCache* cache : caches) {
        mean += cache->streams[s].blocks[k].mean;
        var += cache->streams[s].blocks[k].var;
      }
      block.run_mean = momentum * block.run_mean + (1.0 - momentum) * scale * mean;
      block.run_var = momentum * block.run_var + (1.0 - momentum) * scale * var;
    }
  }
}

// ---------------------------------------------------------------------------
// checkpoint serialization

namespace {

json window_spec_to_json(const WindowSpec& spec) {
  return {{"class", to_string(spec.cls)},
          {"duration", spec.duration},
          {"stride", spec.stride}};
}

WindowSpec window_spec_from_json(const json& j) {
  WindowSpec spec;
  spec.cls = event_class_from_string(j.at("class").get<std::string>());
  spec.duration = j.at("duration").get<double>();
  spec.stride = j.at("stride").get<double>();
  return spec;
}

json model_config_to_json(const ModelConfig& config) {
  json j;
  j["event_classes"] = json::array();
  for (auto cls : config.event_classes)
    j["event_classes"].push_back(to_string(cls));
  j["streams"] = json::array();
  for (const auto& stream : config.streams)
    j["streams"].push_back(
        {{"name", stream.name}, {"channel_rows", stream.channel_rows}});
  j["windows"] = json::array();
  for (const auto& spec : config.windows)
    j["windows"].push_back(window_spec_to_json(spec));
  j["f0"] = config.f0;
  j["k_max"] = config.k_max;
  j["n_h"] = config.n_h;
  j["n_a"] = config.n_a;
  j["segment_samples"] = config.segment_samples;
  j["fs"] = config.fs;
  j["head"] = to_string(config.head);
  j["weight_decay"] = config.weight_decay;
  j["bn_eps"] = config.bn_eps;
  j["bn_momentum"] = config.bn_momentum;
  j["instance_norm_inference"] = config.instance_norm_inference;
  return j;
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig config;
  config.event_classes.clear();
  for (const auto& name : j.at("event_classes"))
    config.event_classes.push_back(
        event_class_from_string(name.get<std::string>()));
  config.streams.clear();
  for (const auto& stream : j.at("streams")) {
    StreamSpec spec;
    spec.name = stream.at("name").get<std::string>();
    spec.channel_rows = stream.at("channel_rows").get<std::vector<int>>();
    config.streams.push_back(spec);
  }
  config.windows.clear();
  for (const auto& spec : j.at("windows"))
    config.windows.push_back(window_spec_from_json(spec));
  config.f0 = j.at("f0").get<int>();
  config.k_max = j.at("k_max").get<int>();
  config.n_h = j.at("n_h").get<int>();
  config.n_a = j.at("n_a").get<int>();
  config.segment_samples = j.at("segment_samples").get<int>();
  config.fs = j.at("fs").get<double>();
  config.head = head_variant_from_string(j.at("head").get<std::string>());
  config.weight_decay = j.at("weight_decay").get<double>();
  config.bn_eps = j.at("bn_eps").get<double>();
  config.bn_momentum = j.at("bn_momentum").get<double>();
  config.instance_norm_inference =
      j.at("instance_norm_inference").get<bool>();
  return config;
}

}  // namespace

void save_checkpoint(const Checkpoint& checkpoint, const std::string& path) {
  Params params = checkpoint.params;
  auto views = tensor_views(params);

  json manifest;
  manifest["format"] = "sleepdet-checkpoint";
  manifest["version"] = 1;
  manifest["model"] = model_config_to_json(checkpoint.config);
  manifest["seed"] = checkpoint.seed;
  manifest["epoch"] = checkpoint.epoch;
  manifest["tensors"] = json::array();
  for (const auto& view : views)
    manifest["tensors"].push_back(
        {{"name", view.name}, {"size", view.flat.size()}});
  const std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path + ": cannot open file for writing");
  const auto len = static_cast<std::uint32_t>(text.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), text.size());
  for (const auto& view : views) {
    std::vector<float> buf(static_cast<std::size_t>(view.flat.size()));
    for (Index i = 0; i < view.flat.size(); ++i)
      buf[static_cast<std::size_t>(i)] = static_cast<float>(view.flat(i));
    out.write(reinterpret_cast<const char*>(buf.data()),
              static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!out) throw IoError(path + ": write failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path + ": cannot open file");
  std::uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in) throw IoError(path + ": truncated checkpoint manifest");
  std::string text(len, '\0');
  in.read(text.data(), len);
  if (!in) throw IoError(path + ": truncated checkpoint manifest");

  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::parse_error& e) {
    throw IoError(path + ": " + e.what());
  }
  if (manifest.value("format", "") != "sleepdet-checkpoint")
    throw IoError(path + ": not a checkpoint file");

  Checkpoint checkpoint;
  checkpoint.config = model_config_from_json(manifest.at("model"));
  checkpoint.seed = manifest.at("seed").get<std::uint64_t>();
  checkpoint.epoch = manifest.at("epoch").get<int>();

  Rng rng(0);
  checkpoint.params = init_params(checkpoint.config, rng);
  auto views = tensor_views(checkpoint.params);
  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != views.size())
    throw IoError(path + ": tensor table size mismatch");
  for (std::size_t i = 0; i < views.size(); ++i) {
    const auto declared = tensors[i].at("size").get<Index>();
    if (tensors[i].at("name").get<std::string>() != views[i].name ||
        declared != views[i].flat.size())
      throw IoError(path + ": tensor table mismatch at '" + views[i].name +
                    "'");
    std::vector<float> buf(static_cast<std::size_t>(declared));
    in.read(reinterpret_cast<char*>(buf.data()),
            static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!in) throw IoError(path + ": truncated tensor block '" +
                           views[i].name + "'");
    for (Index j = 0; j < declared; ++j)
      views[i].flat(j) = static_cast<double>(buf[static_cast<std::size_t>(j)]);
  }
  return checkpoint;
}

}  // namespace sleepdet
