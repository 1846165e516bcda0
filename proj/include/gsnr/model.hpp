#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gsnr/corpus.hpp"
#include "gsnr/error.hpp"
#include "gsnr/io.hpp"
#include "gsnr/rng.hpp"

namespace gsnr {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// ============================================================================
// Configuration
// ============================================================================

struct ModelConfig {
  int n_layers = 2;
  int d_model = 32;
  int n_heads = 4;
  int d_ff = 64;
  int vocab_size = 259;
  int max_seq_len = 128;
  int lora_rank = 8;
  double lora_alpha = 16.0;

  double lora_scaling() const { return lora_alpha / static_cast<double>(lora_rank); }

  void validate() const {
    if (n_layers < 1) throw ContractError("model: n_layers must be >= 1");
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
      throw ContractError("model: d_model must be a positive multiple of n_heads");
    if (d_ff < 1) throw ContractError("model: d_ff must be >= 1");
    if (vocab_size < 2) throw ContractError("model: vocab_size must be >= 2");
    if (max_seq_len < 2) throw ContractError("model: max_seq_len must be >= 2");
    if (lora_rank < 1 || lora_rank > d_model)
      throw ContractError("model: lora_rank must be in [1, d_model]");
    if (lora_alpha <= 0) throw ContractError("model: lora_alpha must be positive");
  }
};

// ============================================================================
// Parameters
// ============================================================================

// Weight matrices are stored [out, in]; activations are [T, d] with one row
// per position, so every projection is x * W^T + b.

struct LayerParams {
  Vector ln1_gamma, ln1_beta;
  Matrix w_query, w_key, w_value;       // [C, C]
  Vector b_query, b_key, b_value;       // [C]
  Matrix w_attn_out;                    // [C, C]
  Vector b_attn_out;
  Vector ln2_gamma, ln2_beta;
  Matrix w_ff1;                         // [F, C]
  Vector b_ff1;
  Matrix w_ff2;                         // [C, F]
  Vector b_ff2;
};

/// Frozen transformer weights shared by every ensemble member.
struct BackboneParams {
  ModelConfig config;
  Matrix token_embedding;     // [V, C]
  Matrix position_embedding;  // [S, C]
  std::vector<LayerParams> layers;
  Vector lnf_gamma, lnf_beta;
  Matrix w_head;              // [V, C], untied, no bias

  std::int64_t parameter_count() const {
    const std::int64_t V = config.vocab_size, C = config.d_model;
    const std::int64_t S = config.max_seq_len, F = config.d_ff, L = config.n_layers;
    const std::int64_t per_layer = 2 * C                // ln1
                                   + 3 * (C * C + C)    // q,k,v
                                   + C * C + C          // attn out
                                   + 2 * C              // ln2
                                   + F * C + F          // ff1
                                   + C * F + C;         // ff2
    return V * C + S * C + L * per_layer + 2 * C + V * C;
  }
};

namespace detail {

inline void append_row_major(std::vector<double>& out, const Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out.push_back(m(i, j));
}

inline void append_vector(std::vector<double>& out, const Vector& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
}

inline void read_row_major(const Vector& src, Eigen::Index& pos, Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = src(pos++);
}

inline void read_vector(const Vector& src, Eigen::Index& pos, Vector& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = src(pos++);
}

}  // namespace detail

/// Canonical flat order for backbone weights: embeddings, then per layer
/// (ln1, q, k, v, attn-out, ln2, ff1, ff2 with biases after each weight),
/// then final LN and head. Matrices are serialized row-major.
inline Vector backbone_to_flat(const BackboneParams& p) {
  std::vector<double> buf;
  buf.reserve(static_cast<std::size_t>(p.parameter_count()));
  detail::append_row_major(buf, p.token_embedding);
  detail::append_row_major(buf, p.position_embedding);
  for (const LayerParams& l : p.layers) {
    detail::append_vector(buf, l.ln1_gamma);
    detail::append_vector(buf, l.ln1_beta);
    detail::append_row_major(buf, l.w_query);
    detail::append_vector(buf, l.b_query);
    detail::append_row_major(buf, l.w_key);
    detail::append_vector(buf, l.b_key);
    detail::append_row_major(buf, l.w_value);
    detail::append_vector(buf, l.b_value);
    detail::append_row_major(buf, l.w_attn_out);
    detail::append_vector(buf, l.b_attn_out);
    detail::append_vector(buf, l.ln2_gamma);
    detail::append_vector(buf, l.ln2_beta);
    detail::append_row_major(buf, l.w_ff1);
    detail::append_vector(buf, l.b_ff1);
    detail::append_row_major(buf, l.w_ff2);
    detail::append_vector(buf, l.b_ff2);
  }
  detail::append_vector(buf, p.lnf_gamma);
  detail::append_vector(buf, p.lnf_beta);
  detail::append_row_major(buf, p.w_head);
  return Eigen::Map<const Vector>(buf.data(), static_cast<Eigen::Index>(buf.size()));
}

inline void backbone_from_flat(BackboneParams& p, const Vector& flat) {
  if (flat.size() != p.parameter_count())
    throw ContractError("backbone_from_flat: dimension mismatch");
  Eigen::Index pos = 0;
  detail::read_row_major(flat, pos, p.token_embedding);
  detail::read_row_major(flat, pos, p.position_embedding);
  for (LayerParams& l : p.layers) {
    detail::read_vector(flat, pos, l.ln1_gamma);
    detail::read_vector(flat, pos, l.ln1_beta);
    detail::read_row_major(flat, pos, l.w_query);
    detail::read_vector(flat, pos, l.b_query);
    detail::read_row_major(flat, pos, l.w_key);
    detail::read_vector(flat, pos, l.b_key);
    detail::read_row_major(flat, pos, l.w_value);
    detail::read_vector(flat, pos, l.b_value);
    detail::read_row_major(flat, pos, l.w_attn_out);
    detail::read_vector(flat, pos, l.b_attn_out);
    detail::read_vector(flat, pos, l.ln2_gamma);
    detail::read_vector(flat, pos, l.ln2_beta);
    detail::read_row_major(flat, pos, l.w_ff1);
    detail::read_vector(flat, pos, l.b_ff1);
    detail::read_row_major(flat, pos, l.w_ff2);
    detail::read_vector(flat, pos, l.b_ff2);
  }
  detail::read_vector(flat, pos, p.lnf_gamma);
  detail::read_vector(flat, pos, p.lnf_beta);
  detail::read_row_major(flat, pos, p.w_head);
}

/// Deterministic backbone init: scaled Gaussians (std 0.02), with the
/// residual projections (attn-out, ff2) at 0.02/sqrt(2*n_layers), layer
/// norms at identity, biases at zero.
inline BackboneParams init_backbone(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  BackboneParams p;
  p.config = config;
  const int C = config.d_model, F = config.d_ff, V = config.vocab_size;
  const int S = config.max_seq_len;
  Rng rng(derive_seed(seed, "backbone_init"));
  const double std_base = 0.02;
  const double std_resid = 0.02 / std::sqrt(2.0 * config.n_layers);

  auto gauss = [&rng](Matrix& m, double stddev) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rng.normal(0.0, stddev);
  };

  p.token_embedding.resize(V, C);
  gauss(p.token_embedding, std_base);
  p.position_embedding.resize(S, C);
  gauss(p.position_embedding, std_base);
  p.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (LayerParams& l : p.layers) {
    l.ln1_gamma = Vector::Ones(C);
    l.ln1_beta = Vector::Zero(C);
    l.w_query.resize(C, C);
    gauss(l.w_query, std_base);
    l.b_query = Vector::Zero(C);
    l.w_key.resize(C, C);
    gauss(l.w_key, std_base);
    l.b_key = Vector::Zero(C);
    l.w_value.resize(C, C);
    gauss(l.w_value, std_base);
    l.b_value = Vector::Zero(C);
    l.w_attn_out.resize(C, C);
    gauss(l.w_attn_out, std_resid);
    l.b_attn_out = Vector::Zero(C);
    l.ln2_gamma = Vector::Ones(C);
    l.ln2_beta = Vector::Zero(C);
    l.w_ff1.resize(F, C);
    gauss(l.w_ff1, std_base);
    l.b_ff1 = Vector::Zero(F);
    l.w_ff2.resize(C, F);
    gauss(l.w_ff2, std_resid);
    l.b_ff2 = Vector::Zero(C);
  }
  p.lnf_gamma = Vector::Ones(C);
  p.lnf_beta = Vector::Zero(C);
  p.w_head.resize(V, C);
  gauss(p.w_head, std_base);
  return p;
}

// ============================================================================
// LoRA adapter
// ============================================================================

struct LoraPair {
  Matrix a;  // [r, C]
  Matrix b;  // [C, r]
};

struct LoraLayer {
  LoraPair query, key, value;
};

/// Low-rank update attached to the q/k/v projections: the effective
/// projection weight is W + (alpha/r) * B * A.
struct LoraAdapter {
  int n_layers = 0;
  int d_model = 0;
  int rank = 0;
  double alpha = 0.0;
  std::vector<LoraLayer> layers;

  double scaling() const { return alpha / static_cast<double>(rank); }

  std::int64_t flat_size() const {
    return static_cast<std::int64_t>(n_layers) * 3 * 2 * rank * d_model;
  }
};

/// Adapter-shaped gradient container; same canonical layout as the adapter.
struct AdapterGrad {
  std::vector<LoraLayer> layers;
};

inline LoraAdapter make_zero_adapter(const ModelConfig& config) {
  LoraAdapter ad;
  ad.n_layers = config.n_layers;
  ad.d_model = config.d_model;
  ad.rank = config.lora_rank;
  ad.alpha = config.lora_alpha;
  ad.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (LoraLayer& l : ad.layers) {
    for (LoraPair* p : {&l.query, &l.key, &l.value}) {
      p->a = Matrix::Zero(config.lora_rank, config.d_model);
      p->b = Matrix::Zero(config.d_model, config.lora_rank);
    }
  }
  return ad;
}

inline AdapterGrad make_zero_adapter_grad(const ModelConfig& config) {
  AdapterGrad g;
  g.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (LoraLayer& l : g.layers) {
    for (LoraPair* p : {&l.query, &l.key, &l.value}) {
      p->a = Matrix::Zero(config.lora_rank, config.d_model);
      p->b = Matrix::Zero(config.d_model, config.lora_rank);
    }
  }
  return g;
}

/// A entries drawn with variance 1/r, B zero, so a fresh adapter leaves the
/// backbone's function unchanged while members still start from distinct A.
inline LoraAdapter init_adapter(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  LoraAdapter ad = make_zero_adapter(config);
  Rng rng(derive_seed(seed, "adapter_init"));
  const double stddev = 1.0 / std::sqrt(static_cast<double>(config.lora_rank));
  for (LoraLayer& l : ad.layers) {
    for (LoraPair* p : {&l.query, &l.key, &l.value}) {
      for (Eigen::Index i = 0; i < p->a.rows(); ++i)
        for (Eigen::Index j = 0; j < p->a.cols(); ++j)
          p->a(i, j) = rng.normal(0.0, stddev);
    }
  }
  return ad;
}

// Canonical flat order: layer-major; within a layer q, k, v; within a
// projection A before B; matrices row-major. Identical across members and
// epochs so logged gradients are comparable.

namespace detail {

template <typename LayerRange>
inline Vector lora_layers_to_flat(const LayerRange& layers, std::int64_t flat_size) {
  std::vector<double> buf;
  buf.reserve(static_cast<std::size_t>(flat_size));
  for (const LoraLayer& l : layers) {
    for (const LoraPair* p : {&l.query, &l.key, &l.value}) {
      append_row_major(buf, p->a);
      append_row_major(buf, p->b);
    }
  }
  return Eigen::Map<const Vector>(buf.data(), static_cast<Eigen::Index>(buf.size()));
}

inline void lora_layers_from_flat(std::vector<LoraLayer>& layers, const Vector& flat) {
  Eigen::Index pos = 0;
  for (LoraLayer& l : layers) {
    for (LoraPair* p : {&l.query, &l.key, &l.value}) {
      read_row_major(flat, pos, p->a);
      read_row_major(flat, pos, p->b);
    }
  }
  if (pos != flat.size()) throw ContractError("lora_layers_from_flat: dimension mismatch");
}

}  // namespace detail

inline Vector adapter_to_flat(const LoraAdapter& ad) {
  return detail::lora_layers_to_flat(ad.layers, ad.flat_size());
}

inline void adapter_from_flat(LoraAdapter& ad, const Vector& flat) {
  if (flat.size() != ad.flat_size())
    throw ContractError("adapter_from_flat: dimension mismatch");
  detail::lora_layers_from_flat(ad.layers, flat);
}

inline Vector adapter_grad_to_flat(const AdapterGrad& g, const ModelConfig& config) {
  return detail::lora_layers_to_flat(
      g.layers, static_cast<std::int64_t>(config.n_layers) * 3 * 2 * config.lora_rank * config.d_model);
}

/// Backbone with the adapter's update folded into the q/k/v weights.
/// forward_loss on the merged backbone equals the adapted model.
inline BackboneParams merge_adapter(const BackboneParams& backbone,
                                    const LoraAdapter& adapter) {
  BackboneParams merged = backbone;
  const double s = adapter.scaling();
  for (std::size_t l = 0; l < merged.layers.size(); ++l) {
    merged.layers[l].w_query += s * (adapter.layers[l].query.b * adapter.layers[l].query.a);
    merged.layers[l].w_key += s * (adapter.layers[l].key.b * adapter.layers[l].key.a);
    merged.layers[l].w_value += s * (adapter.layers[l].value.b * adapter.layers[l].value.a);
  }
  return merged;
}

// ============================================================================
// Forward / backward
// ============================================================================

namespace detail {

constexpr double kLayerNormEps = 1e-5;

inline double gelu(double x) {
  const double s = std::sqrt(2.0 / M_PI);
  const double u = s * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_derivative(double x) {
  const double s = std::sqrt(2.0 / M_PI);
  const double u = s * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  const double du = s * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

struct LayerNormCache {
  Matrix xhat;  // [T, C]
  Vector rstd;  // [T]
};

inline Matrix layer_norm_forward(const Matrix& x, const Vector& gamma,
                                 const Vector& beta, LayerNormCache& cache) {
  const Eigen::Index T = x.rows(), C = x.cols();
  cache.xhat.resize(T, C);
  cache.rstd.resize(T);
  Matrix y(T, C);
  for (Eigen::Index t = 0; t < T; ++t) {
    const double mean = x.row(t).mean();
    const double var = (x.row(t).array() - mean).square().mean();
    const double rstd = 1.0 / std::sqrt(var + kLayerNormEps);
    cache.rstd(t) = rstd;
    cache.xhat.row(t) = ((x.row(t).array() - mean) * rstd).matrix();
    y.row(t) = cache.xhat.row(t).cwiseProduct(gamma.transpose()) + beta.transpose();
  }
  return y;
}

/// dy -> dx; accumulates dgamma/dbeta when provided.
inline Matrix layer_norm_backward(const Matrix& dy, const LayerNormCache& cache,
                                  const Vector& gamma, Vector* dgamma, Vector* dbeta) {
  const Eigen::Index T = dy.rows(), C = dy.cols();
  Matrix dx(T, C);
  for (Eigen::Index t = 0; t < T; ++t) {
    const Eigen::RowVectorXd dyg = dy.row(t).cwiseProduct(gamma.transpose());
    const double mean_dyg = dyg.mean();
    const double mean_dyg_xhat = dyg.cwiseProduct(cache.xhat.row(t)).mean();
    dx.row(t) = (cache.rstd(t) *
                 (dyg.array() - mean_dyg - cache.xhat.row(t).array() * mean_dyg_xhat))
                    .matrix();
  }
  if (dgamma) {
    for (Eigen::Index t = 0; t < T; ++t)
      *dgamma += dy.row(t).cwiseProduct(cache.xhat.row(t)).transpose();
  }
  if (dbeta) *dbeta += dy.colwise().sum().transpose();
  return dx;
}

struct LayerCache {
  Matrix x_in;          // [T, C]
  LayerNormCache ln1;
  Matrix ln1_out;       // [T, C]
  Matrix u_q, u_k, u_v;  // [T, r] LoRA intermediates (empty without adapter)
  std::vector<Matrix> att_probs;  // per head [T, T]
  Matrix att_concat;    // [T, C]
  Matrix res1;          // [T, C]
  LayerNormCache ln2;
  Matrix ln2_out;       // [T, C]
  Matrix ff_pre;        // [T, F]
  Matrix ff_act;        // [T, F]
};

struct ForwardCache {
  Matrix embedded;               // [T, C]
  std::vector<LayerCache> layers;
  LayerNormCache lnf;
  Matrix lnf_out;                // [T, C]
  Matrix probs;                  // [T, V]; only target rows populated
  std::vector<Eigen::Index> target_rows;    // rows of logits carrying loss
  std::vector<std::int32_t> target_tokens;  // token predicted at each row
  double loss = 0.0;
};

}  // namespace detail

namespace detail {

/// Full forward pass with activation caching. `adapter` may be null
/// (backbone-only). Throws NumericalError if the loss is not finite.
inline ForwardCache forward_cached(const BackboneParams& bp, const LoraAdapter* adapter,
                                   const TokenizedExample& ex) {
  const ModelConfig& cfg = bp.config;
  const Eigen::Index T = static_cast<Eigen::Index>(ex.token_ids.size());
  const int C = cfg.d_model, H = cfg.n_heads, hs = cfg.d_model / cfg.n_heads;
  if (T < 2) throw ContractError("forward: sequence too short");
  if (T > cfg.max_seq_len) throw ContractError("forward: sequence exceeds max_seq_len");
  for (std::int32_t id : ex.token_ids)
    if (id < 0 || id >= cfg.vocab_size)
      throw ContractError("forward: token id out of vocabulary range");

  ForwardCache cache;
  cache.embedded.resize(T, C);
  for (Eigen::Index t = 0; t < T; ++t)
    cache.embedded.row(t) = bp.token_embedding.row(ex.token_ids[static_cast<std::size_t>(t)]) +
                            bp.position_embedding.row(t);

  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hs));
  const double lora_scale = adapter ? adapter->scaling() : 0.0;

  cache.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  Matrix x = cache.embedded;
  for (int li = 0; li < cfg.n_layers; ++li) {
    LayerCache& lc = cache.layers[static_cast<std::size_t>(li)];
    const LayerParams& lp = bp.layers[static_cast<std::size_t>(li)];
    lc.x_in = x;
    lc.ln1_out = layer_norm_forward(lc.x_in, lp.ln1_gamma, lp.ln1_beta, lc.ln1);

    Matrix q = (lc.ln1_out * lp.w_query.transpose()).rowwise() + lp.b_query.transpose();
    Matrix k = (lc.ln1_out * lp.w_key.transpose()).rowwise() + lp.b_key.transpose();
    Matrix v = (lc.ln1_out * lp.w_value.transpose()).rowwise() + lp.b_value.transpose();
    if (adapter) {
      const LoraLayer& al = adapter->layers[static_cast<std::size_t>(li)];
      lc.u_q = lc.ln1_out * al.query.a.transpose();
      lc.u_k = lc.ln1_out * al.key.a.transpose();
      lc.u_v = lc.ln1_out * al.value.a.transpose();
      q += lora_scale * (lc.u_q * al.query.b.transpose());
      k += lora_scale * (lc.u_k * al.key.b.transpose());
      v += lora_scale * (lc.u_v * al.value.b.transpose());
    }

    lc.att_probs.resize(static_cast<std::size_t>(H));
    lc.att_concat.resize(T, C);
    for (int h = 0; h < H; ++h) {
      const auto qh = q.middleCols(h * hs, hs);
      const auto kh = k.middleCols(h * hs, hs);
      const auto vh = v.middleCols(h * hs, hs);
      Matrix scores = (qh * kh.transpose()) * att_scale;  // [T, T]
      Matrix& p = lc.att_probs[static_cast<std::size_t>(h)];
      p.resize(T, T);
      for (Eigen::Index i = 0; i < T; ++i) {
        // causal: position i attends to 0..i
        double mx = scores(i, 0);
        for (Eigen::Index j = 1; j <= i; ++j) mx = std::max(mx, scores(i, j));
        double sum = 0.0;
        for (Eigen::Index j = 0; j <= i; ++j) {
          const double e = std::exp(scores(i, j) - mx);
          p(i, j) = e;
          sum += e;
        }
        for (Eigen::Index j = 0; j <= i; ++j) p(i, j) /= sum;
        for (Eigen::Index j = i + 1; j < T; ++j) p(i, j) = 0.0;
      }
      lc.att_concat.middleCols(h * hs, hs) = p * vh;
    }

    Matrix att_out =
        (lc.att_concat * lp.w_attn_out.transpose()).rowwise() + lp.b_attn_out.transpose();
    lc.res1 = lc.x_in + att_out;

    lc.ln2_out = layer_norm_forward(lc.res1, lp.ln2_gamma, lp.ln2_beta, lc.ln2);
    lc.ff_pre = (lc.ln2_out * lp.w_ff1.transpose()).rowwise() + lp.b_ff1.transpose();
    lc.ff_act = lc.ff_pre.unaryExpr([](double z) { return gelu(z); });
    Matrix ff_out = (lc.ff_act * lp.w_ff2.transpose()).rowwise() + lp.b_ff2.transpose();
    x = lc.res1 + ff_out;
  }

  cache.lnf_out = layer_norm_forward(x, bp.lnf_gamma, bp.lnf_beta, cache.lnf);

  // positions j >= 1 with mask 1 are predicted from row j-1
  for (std::size_t j = 1; j < ex.token_ids.size(); ++j) {
    if (ex.loss_mask[j]) {
      cache.target_rows.push_back(static_cast<Eigen::Index>(j) - 1);
      cache.target_tokens.push_back(ex.token_ids[j]);
    }
  }
  if (cache.target_rows.empty())
    throw ContractError("forward: loss mask selects no predictable position");

  cache.probs = Matrix::Zero(T, cfg.vocab_size);
  double loss_sum = 0.0;
  for (std::size_t n = 0; n < cache.target_rows.size(); ++n) {
    const Eigen::Index row = cache.target_rows[n];
    Vector logits = bp.w_head * cache.lnf_out.row(row).transpose();  // [V]
    const double mx = logits.maxCoeff();
    Vector e = (logits.array() - mx).exp().matrix();
    const double z = e.sum();
    cache.probs.row(row) = (e / z).transpose();
    loss_sum -= std::log(cache.probs(row, cache.target_tokens[n]));
  }
  cache.loss = loss_sum / static_cast<double>(cache.target_rows.size());
  if (!std::isfinite(cache.loss))
    throw NumericalError("forward: non-finite loss on example " + std::to_string(ex.id),
                         ex.id);
  return cache;
}

struct BackboneGrad {
  Matrix token_embedding, position_embedding;
  std::vector<LayerParams> layers;
  Vector lnf_gamma, lnf_beta;
  Matrix w_head;
};

inline BackboneGrad make_zero_backbone_grad(const ModelConfig& cfg) {
  BackboneGrad g;
  const int C = cfg.d_model, F = cfg.d_ff;
  g.token_embedding = Matrix::Zero(cfg.vocab_size, C);
  g.position_embedding = Matrix::Zero(cfg.max_seq_len, C);
  g.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (LayerParams& l : g.layers) {
    l.ln1_gamma = Vector::Zero(C);
    l.ln1_beta = Vector::Zero(C);
    l.w_query = Matrix::Zero(C, C);
    l.b_query = Vector::Zero(C);
    l.w_key = Matrix::Zero(C, C);
    l.b_key = Vector::Zero(C);
    l.w_value = Matrix::Zero(C, C);
    l.b_value = Vector::Zero(C);
    l.w_attn_out = Matrix::Zero(C, C);
    l.b_attn_out = Vector::Zero(C);
    l.ln2_gamma = Vector::Zero(C);
    l.ln2_beta = Vector::Zero(C);
    l.w_ff1 = Matrix::Zero(F, C);
    l.b_ff1 = Vector::Zero(F);
    l.w_ff2 = Matrix::Zero(C, F);
    l.b_ff2 = Vector::Zero(C);
  }
  g.lnf_gamma = Vector::Zero(C);
  g.lnf_beta = Vector::Zero(C);
  g.w_head = Matrix::Zero(cfg.vocab_size, C);
  return g;
}

/// Reverse pass. Either gradient sink may be null; adapter gradients need
/// `adapter` non-null. `loss_scale` multiplies the loss before
/// differentiation (the ensemble objective seeds 1/M here).
inline void backward_cached(const BackboneParams& bp, const LoraAdapter* adapter,
                            const TokenizedExample& ex, const ForwardCache& cache,
                            double loss_scale, AdapterGrad* agrad, BackboneGrad* bgrad) {
  const ModelConfig& cfg = bp.config;
  const Eigen::Index T = static_cast<Eigen::Index>(ex.token_ids.size());
  const int C = cfg.d_model, H = cfg.n_heads, hs = cfg.d_model / cfg.n_heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(hs));
  const double lora_scale = adapter ? adapter->scaling() : 0.0;
  if (agrad && !adapter)
    throw ContractError("backward: adapter gradients requested without an adapter");

  // cross-entropy backward, only target rows are nonzero
  const double seed = loss_scale / static_cast<double>(cache.target_rows.size());
  Matrix dlogits = Matrix::Zero(T, cfg.vocab_size);
  for (std::size_t n = 0; n < cache.target_rows.size(); ++n) {
    const Eigen::Index row = cache.target_rows[n];
    dlogits.row(row) = cache.probs.row(row) * seed;
    dlogits(row, cache.target_tokens[n]) -= seed;
  }

  Matrix d_lnf_out = dlogits * bp.w_head;  // [T, C]
  if (bgrad) bgrad->w_head += dlogits.transpose() * cache.lnf_out;

  Matrix dx = layer_norm_backward(d_lnf_out, cache.lnf, bp.lnf_gamma,
                                  bgrad ? &bgrad->lnf_gamma : nullptr,
                                  bgrad ? &bgrad->lnf_beta : nullptr);

  for (int li = cfg.n_layers - 1; li >= 0; --li) {
    const LayerCache& lc = cache.layers[static_cast<std::size_t>(li)];
    const LayerParams& lp = bp.layers[static_cast<std::size_t>(li)];
    LayerParams* lg = bgrad ? &bgrad->layers[static_cast<std::size_t>(li)] : nullptr;

    // x_out = res1 + ff2(gelu(ff1(ln2(res1))))
    const Matrix& d_xout = dx;
    Matrix d_ff_act = d_xout * lp.w_ff2;  // [T, F]
    if (lg) {
      lg->w_ff2 += d_xout.transpose() * lc.ff_act;
      lg->b_ff2 += d_xout.colwise().sum().transpose();
    }
    Matrix d_ff_pre =
        d_ff_act.cwiseProduct(lc.ff_pre.unaryExpr([](double z) { return gelu_derivative(z); }));
    Matrix d_ln2_out = d_ff_pre * lp.w_ff1;  // [T, C]
    if (lg) {
      lg->w_ff1 += d_ff_pre.transpose() * lc.ln2_out;
      lg->b_ff1 += d_ff_pre.colwise().sum().transpose();
    }
    Matrix d_res1 = d_xout + layer_norm_backward(d_ln2_out, lc.ln2, lp.ln2_gamma,
                                                 lg ? &lg->ln2_gamma : nullptr,
                                                 lg ? &lg->ln2_beta : nullptr);

    // res1 = x_in + attn_out(ln1(x_in))
    const Matrix& d_att_out = d_res1;
    Matrix d_att_concat = d_att_out * lp.w_attn_out;  // [T, C]
    if (lg) {
      lg->w_attn_out += d_att_out.transpose() * lc.att_concat;
      lg->b_attn_out += d_att_out.colwise().sum().transpose();
    }

    // recompute q/k/v from cached ln1_out (cheaper than caching them)
    Matrix q = (lc.ln1_out * lp.w_query.transpose()).rowwise() + lp.b_query.transpose();
    Matrix k = (lc.ln1_out * lp.w_key.transpose()).rowwise() + lp.b_key.transpose();
    Matrix v = (lc.ln1_out * lp.w_value.transpose()).rowwise() + lp.b_value.transpose();
    const LoraLayer* al =
        adapter ? &adapter->layers[static_cast<std::size_t>(li)] : nullptr;
    if (al) {
      q += lora_scale * (lc.u_q * al->query.b.transpose());
      k += lora_scale * (lc.u_k * al->key.b.transpose());
      v += lora_scale * (lc.u_v * al->value.b.transpose());
    }

    Matrix dq = Matrix::Zero(T, C), dk = Matrix::Zero(T, C), dv = Matrix::Zero(T, C);
    for (int h = 0; h < H; ++h) {
      const auto qh = q.middleCols(h * hs, hs);
      const auto kh = k.middleCols(h * hs, hs);
      const auto vh = v.middleCols(h * hs, hs);
      const Matrix& p = lc.att_probs[static_cast<std::size_t>(h)];
      const auto d_att_h = d_att_concat.middleCols(h * hs, hs);

      Matrix dp = d_att_h * vh.transpose();            // [T, T]
      dv.middleCols(h * hs, hs) = p.transpose() * d_att_h;
      // softmax backward per row; masked entries have p == 0 so ds == 0
      Matrix ds(T, T);
      for (Eigen::Index i = 0; i < T; ++i) {
        const double dot = dp.row(i).cwiseProduct(p.row(i)).sum();
        ds.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
      }
      dq.middleCols(h * hs, hs) = (ds * kh) * att_scale;
      dk.middleCols(h * hs, hs) = (ds.transpose() * qh) * att_scale;
    }

    Matrix d_ln1_out = Matrix::Zero(T, C);
    struct ProjRef {
      const Matrix* dproj;
      const Matrix* w;
      const LoraPair* pair;
      const Matrix* u;
      Matrix* wg;
      Vector* bg;
      LoraPair* pg;
    };
    LoraLayer* alg = agrad ? &agrad->layers[static_cast<std::size_t>(li)] : nullptr;
    const ProjRef projs[3] = {
        {&dq, &lp.w_query, al ? &al->query : nullptr, &lc.u_q, lg ? &lg->w_query : nullptr,
         lg ? &lg->b_query : nullptr, alg ? &alg->query : nullptr},
        {&dk, &lp.w_key, al ? &al->key : nullptr, &lc.u_k, lg ? &lg->w_key : nullptr,
         lg ? &lg->b_key : nullptr, alg ? &alg->key : nullptr},
        {&dv, &lp.w_value, al ? &al->value : nullptr, &lc.u_v, lg ? &lg->w_value : nullptr,
         lg ? &lg->b_value : nullptr, alg ? &alg->value : nullptr},
    };
    for (const ProjRef& pr : projs) {
      d_ln1_out += (*pr.dproj) * (*pr.w);
      if (pr.pair) d_ln1_out += lora_scale * ((*pr.dproj) * pr.pair->b * pr.pair->a);
      if (pr.wg) {
        *pr.wg += pr.dproj->transpose() * lc.ln1_out;
        *pr.bg += pr.dproj->colwise().sum().transpose();
      }
      if (pr.pg) {
        pr.pg->b += lora_scale * (pr.dproj->transpose() * (*pr.u));
        pr.pg->a += lora_scale * ((*pr.dproj) * pr.pair->b).transpose() * lc.ln1_out;
      }
    }

    Matrix d_x_in = d_res1 + layer_norm_backward(d_ln1_out, lc.ln1, lp.ln1_gamma,
                                                 lg ? &lg->ln1_gamma : nullptr,
                                                 lg ? &lg->ln1_beta : nullptr);
    dx = std::move(d_x_in);
  }

  if (bgrad) {
    for (Eigen::Index t = 0; t < T; ++t) {
      bgrad->token_embedding.row(ex.token_ids[static_cast<std::size_t>(t)]) += dx.row(t);
      bgrad->position_embedding.row(t) += dx.row(t);
    }
  }
}

}  // namespace detail

/// Mean next-token cross-entropy over the masked-in positions.
inline double forward_loss(const BackboneParams& backbone, const LoraAdapter* adapter,
                           const TokenizedExample& ex) {
  return detail::forward_cached(backbone, adapter, ex).loss;
}

inline double forward_loss(const BackboneParams& backbone, const LoraAdapter& adapter,
                           const TokenizedExample& ex) {
  return forward_loss(backbone, &adapter, ex);
}

struct LossAndGradient {
  double loss = 0.0;
  Vector gradient;  // canonical flat adapter order
};

/// Exact reverse-mode gradient of `loss_scale * loss` with respect to the
/// adapter parameters only; the backbone receives no gradient.
inline LossAndGradient adapter_gradient(const BackboneParams& backbone,
                                        const LoraAdapter& adapter,
                                        const TokenizedExample& ex,
                                        double loss_scale = 1.0) {
  detail::ForwardCache cache = detail::forward_cached(backbone, &adapter, ex);
  AdapterGrad g = make_zero_adapter_grad(backbone.config);
  detail::backward_cached(backbone, &adapter, ex, cache, loss_scale, &g, nullptr);
  LossAndGradient out;
  out.loss = cache.loss;
  out.gradient = adapter_grad_to_flat(g, backbone.config);
  if (!out.gradient.allFinite())
    throw NumericalError("adapter_gradient: non-finite gradient on example " +
                             std::to_string(ex.id),
                         ex.id);
  return out;
}

/// Full-parameter gradient (no adapter), flattened in the canonical
/// backbone order. Used by the full fine-tuning regime and warm training.
inline LossAndGradient backbone_gradient(const BackboneParams& backbone,
                                         const TokenizedExample& ex,
                                         double loss_scale = 1.0) {
  detail::ForwardCache cache = detail::forward_cached(backbone, nullptr, ex);
  detail::BackboneGrad g = detail::make_zero_backbone_grad(backbone.config);
  detail::backward_cached(backbone, nullptr, ex, cache, loss_scale, nullptr, &g);
  BackboneParams shell;  // reuse the canonical flattener
  shell.config = backbone.config;
  shell.token_embedding = std::move(g.token_embedding);
  shell.position_embedding = std::move(g.position_embedding);
  shell.layers = std::move(g.layers);
  shell.lnf_gamma = std::move(g.lnf_gamma);
  shell.lnf_beta = std::move(g.lnf_beta);
  shell.w_head = std::move(g.w_head);
  LossAndGradient out;
  out.loss = cache.loss;
  out.gradient = backbone_to_flat(shell);
  if (!out.gradient.allFinite())
    throw NumericalError("backbone_gradient: non-finite gradient on example " +
                             std::to_string(ex.id),
                         ex.id);
  return out;
}

// ============================================================================
// Adam
// ============================================================================

struct AdamState {
  Vector m, v;
  std::int64_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lr = 5e-5;
};

inline AdamState make_adam_state(Eigen::Index dim, double lr) {
  AdamState st;
  st.m = Vector::Zero(dim);
  st.v = Vector::Zero(dim);
  st.lr = lr;
  return st;
}

/// One Adam update with bias correction, in place.
inline void adam_step(Vector& params, const Vector& grad, AdamState& st) {
  if (params.size() != grad.size() || st.m.size() != grad.size())
    throw ContractError("adam_step: dimension mismatch");
  st.t += 1;
  st.m = st.beta1 * st.m + (1.0 - st.beta1) * grad;
  st.v = st.beta2 * st.v + (1.0 - st.beta2) * grad.cwiseProduct(grad);
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
  params.array() -=
      st.lr * (st.m.array() / bc1) / ((st.v.array() / bc2).sqrt() + st.eps);
}

inline void adam_step(LoraAdapter& adapter, const Vector& grad, AdamState& st) {
  Vector flat = adapter_to_flat(adapter);
  adam_step(flat, grad, st);
  adapter_from_flat(adapter, flat);
}

// ============================================================================
// Checkpoints
// ============================================================================

struct AdapterCheckpoint {
  std::uint64_t config_hash = 0;
  std::int32_t member = 0;
  std::int32_t epoch = 0;
  LoraAdapter adapter;
};

namespace detail {

constexpr char kCheckpointMagic[8] = {'G', 'S', 'N', 'R', 'C', 'K', 'P', 'T'};

template <typename T>
inline void put_raw(std::string& out, const T& v) {
  const char* p = reinterpret_cast<const char*>(&v);
  out.append(p, sizeof(T));
}

template <typename T>
inline T get_raw(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw ParseError("checkpoint: truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace detail

/// Binary checkpoint: magic, version, config hash, member id, epoch, flat
/// parameter vector. Round-trips bit-exactly.
inline void save_adapter_checkpoint(const std::filesystem::path& path,
                                    const AdapterCheckpoint& ck) {
  std::string buf;
  buf.append(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
  detail::put_raw<std::uint32_t>(buf, 1);  // version
  detail::put_raw<std::uint64_t>(buf, ck.config_hash);
  detail::put_raw<std::int32_t>(buf, ck.member);
  detail::put_raw<std::int32_t>(buf, ck.epoch);
  const Vector flat = adapter_to_flat(ck.adapter);
  detail::put_raw<std::int64_t>(buf, static_cast<std::int64_t>(flat.size()));
  buf.append(reinterpret_cast<const char*>(flat.data()), sizeof(double) * flat.size());
  atomic_write_file(path, buf);
}

inline AdapterCheckpoint load_adapter_checkpoint(const std::filesystem::path& path,
                                                 const ModelConfig& config) {
  const std::string buf = read_text_file(path);
  std::size_t pos = 0;
  if (buf.size() < sizeof(detail::kCheckpointMagic) ||
      std::memcmp(buf.data(), detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic)) != 0)
    throw ParseError("checkpoint: bad magic in " + path.string());
  pos += sizeof(detail::kCheckpointMagic);
  const auto version = detail::get_raw<std::uint32_t>(buf, pos);
  if (version != 1) throw ParseError("checkpoint: unsupported version");
  AdapterCheckpoint ck;
  ck.config_hash = detail::get_raw<std::uint64_t>(buf, pos);
  ck.member = detail::get_raw<std::int32_t>(buf, pos);
  ck.epoch = detail::get_raw<std::int32_t>(buf, pos);
  const auto dim = detail::get_raw<std::int64_t>(buf, pos);
  ck.adapter = make_zero_adapter(config);
  if (dim != ck.adapter.flat_size())
    throw ContractError("checkpoint: parameter count does not match config");
  if (pos + sizeof(double) * static_cast<std::size_t>(dim) > buf.size())
    throw ParseError("checkpoint: truncated parameter block");
  Vector flat(dim);
  std::memcpy(flat.data(), buf.data() + pos, sizeof(double) * static_cast<std::size_t>(dim));
  adapter_from_flat(ck.adapter, flat);
  return ck;
}

}  // namespace gsnr
