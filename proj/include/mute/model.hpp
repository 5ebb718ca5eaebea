#pragma once

// Pre-norm causal decoder-only transformer with hand-written backward pass.
//
//   x0      = embedding[tok] + positional[pos]
//   block l : x <- x + Attn(LN1(x));  x <- x + MLP(LN2(x))     (GELU MLP)
//   logits  = final_LN(x_N) * unembedding^T
//
// hidden[l] is the residual stream after block l, before final_LN. Row
// vectors throughout: a token's state is a row, weights multiply on the right.

#include <cmath>
#include <compare>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mute/common.hpp"

namespace mute {

struct ModelConfig {
  int n_layers = 2;
  int d_model = 16;
  int n_heads = 2;
  int d_ff = 64;
  int vocab_size = 32;
  int max_len = 16;
  std::uint64_t seed = 0;
  bool operator==(const ModelConfig&) const = default;
};

inline void validate(const ModelConfig& c) {
  require(c.n_layers >= 1 && c.d_model >= 1 && c.n_heads >= 1 && c.d_ff >= 1 && c.vocab_size >= 1 &&
              c.max_len >= 1,
          "model dimensions must be >= 1");
  require(c.d_model % c.n_heads == 0, "d_model must be divisible by n_heads");
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers}, {"d_model", c.d_model},       {"n_heads", c.n_heads}, {"d_ff", c.d_ff},
          {"vocab_size", c.vocab_size}, {"max_len", c.max_len}, {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.seed = j.value("seed", std::uint64_t{0});
  return c;
}

/// Identifies one parameter tensor. layer == 0 marks the global tensors
/// (embedding, positional, final LN, unembedding); blocks are 1-based.
struct ParamKey {
  int layer = 0;
  std::string name;
  auto operator<=>(const ParamKey&) const = default;
};

inline std::string layer_label(int layer) { return layer == 0 ? "global" : std::to_string(layer); }

enum class ParamSubset { all, attention_only, mlp_only };

inline std::string_view to_string(ParamSubset s) {
  switch (s) {
    case ParamSubset::attention_only: return "attention_only";
    case ParamSubset::mlp_only: return "mlp_only";
    default: return "all";
  }
}

inline bool subset_contains(ParamSubset s, std::string_view name) {
  switch (s) {
    case ParamSubset::attention_only: return name == "W_q" || name == "W_k" || name == "W_v" || name == "W_o";
    case ParamSubset::mlp_only: return name == "W_1" || name == "b_1" || name == "W_2" || name == "b_2";
    default: return true;
  }
}

/// Which tensors a gradient (and therefore an update) may touch.
struct Scope {
  bool all_layers = true;
  int layer = 0;
  ParamSubset subset = ParamSubset::all;

  static Scope everything() { return {}; }
  static Scope at(int layer, ParamSubset subset = ParamSubset::all) { return {false, layer, subset}; }

  bool contains(const ParamKey& k) const {
    if (all_layers) return true;
    return k.layer == layer && subset_contains(subset, k.name);
  }
  /// Deepest block the backward pass must reach (0 = down to the embeddings).
  int lowest_layer() const { return all_layers ? 0 : layer; }
};

template <typename T>
struct LayerParams {
  Matrix<T> ln1_scale, ln1_bias, w_q, w_k, w_v, w_o, ln2_scale, ln2_bias, w_1, b_1, w_2, b_2;

  template <typename Self, typename F>
  static void visit(Self& p, F&& f) {
    f("ln1_scale", p.ln1_scale);
    f("ln1_bias", p.ln1_bias);
    f("W_q", p.w_q);
    f("W_k", p.w_k);
    f("W_v", p.w_v);
    f("W_o", p.w_o);
    f("ln2_scale", p.ln2_scale);
    f("ln2_bias", p.ln2_bias);
    f("W_1", p.w_1);
    f("b_1", p.b_1);
    f("W_2", p.w_2);
    f("b_2", p.b_2);
  }
};

/// All parameter tensors, visited in checkpoint order. Used both for the
/// model itself and, with some tensors left empty, for gradients and
/// optimizer moments.
template <typename T>
struct Params {
  Matrix<T> embedding, positional;
  std::vector<LayerParams<T>> layers;
  Matrix<T> final_ln_scale, final_ln_bias, unembedding;

  template <typename F>
  void for_each(F&& f) {
    visit(*this, f);
  }
  template <typename F>
  void for_each(F&& f) const {
    visit(*this, f);
  }

  /// Same structure as `like`; tensors inside `scope` are zero, the rest empty.
  static Params zeros_like(const Params& like, const Scope& scope) {
    Params out;
    out.layers.resize(like.layers.size());
    auto src = flat(like);
    int i = 0;
    out.for_each([&](const ParamKey& k, Matrix<T>& m) {
      const Matrix<T>& s = *src[static_cast<std::size_t>(i++)];
      if (scope.contains(k)) m = Matrix<T>::Zero(s.rows(), s.cols());
    });
    return out;
  }

  static std::vector<const Matrix<T>*> flat(const Params& p) {
    std::vector<const Matrix<T>*> v;
    p.for_each([&](const ParamKey&, const Matrix<T>& m) { v.push_back(&m); });
    return v;
  }

private:
  template <typename Self, typename F>
  static void visit(Self& p, F& f) {
    f(ParamKey{0, "embedding"}, p.embedding);
    f(ParamKey{0, "positional"}, p.positional);
    for (std::size_t l = 0; l < p.layers.size(); ++l) {
      const int layer = static_cast<int>(l) + 1;
      LayerParams<T>::visit(p.layers[l], [&](const char* name, auto& m) { f(ParamKey{layer, name}, m); });
    }
    f(ParamKey{0, "final_ln_scale"}, p.final_ln_scale);
    f(ParamKey{0, "final_ln_bias"}, p.final_ln_bias);
    f(ParamKey{0, "unembedding"}, p.unembedding);
  }
};

template <typename T>
struct MicroModel {
  ModelConfig config;
  Params<T> params;

  int n_layers() const { return config.n_layers; }
  int d_model() const { return config.d_model; }

  template <typename U>
  MicroModel<U> cast() const {
    MicroModel<U> out;
    out.config = config;
    out.params.layers.resize(params.layers.size());
    auto src = Params<T>::flat(params);
    std::size_t i = 0;
    out.params.for_each([&](const ParamKey&, Matrix<U>& m) { m = src[i++]->template cast<U>(); });
    return out;
  }
};

template <typename T>
MicroModel<T> init_model(const ModelConfig& config) {
  validate(config);
  const int d = config.d_model, f = config.d_ff, v = config.vocab_size;
  MicroModel<T> model;
  model.config = config;
  Params<T>& p = model.params;
  p.embedding.resize(v, d);
  p.positional.resize(config.max_len, d);
  p.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& L : p.layers) {
    L.ln1_scale = Matrix<T>::Ones(1, d);
    L.ln1_bias = Matrix<T>::Zero(1, d);
    L.w_q.resize(d, d);
    L.w_k.resize(d, d);
    L.w_v.resize(d, d);
    L.w_o.resize(d, d);
    L.ln2_scale = Matrix<T>::Ones(1, d);
    L.ln2_bias = Matrix<T>::Zero(1, d);
    L.w_1.resize(d, f);
    L.b_1 = Matrix<T>::Zero(1, f);
    L.w_2.resize(f, d);
    L.b_2 = Matrix<T>::Zero(1, d);
  }
  p.final_ln_scale = Matrix<T>::Ones(1, d);
  p.final_ln_bias = Matrix<T>::Zero(1, d);
  p.unembedding.resize(v, d);

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  p.for_each([&](const ParamKey& k, Matrix<T>& m) {
    const bool is_weight = k.name == "embedding" || k.name == "positional" || k.name == "unembedding" ||
                           k.name.starts_with("W_");
    if (!is_weight) return;
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(normal(rng));
  });
  return model;
}

// --- batches and forward caches ------------------------------------------

/// Several token sequences stacked row-wise; attention stays per sequence.
struct Batch {
  std::vector<int> tokens;
  std::vector<int> positions;
  std::vector<int> seq_offsets{0};

  Eigen::Index rows() const { return static_cast<Eigen::Index>(tokens.size()); }
  int n_seq() const { return static_cast<int>(seq_offsets.size()) - 1; }
  int seq_len(int s) const { return seq_offsets[static_cast<std::size_t>(s) + 1] - seq_offsets[static_cast<std::size_t>(s)]; }
  int row(int s, int pos) const { return seq_offsets[static_cast<std::size_t>(s)] + pos; }

  void add(std::span<const int> seq) {
    for (std::size_t i = 0; i < seq.size(); ++i) {
      tokens.push_back(seq[i]);
      positions.push_back(static_cast<int>(i));
    }
    seq_offsets.push_back(static_cast<int>(tokens.size()));
  }
};

template <typename T>
using ColVector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
struct BlockCache {
  Matrix<T> xhat1, a, q, k, v, ctx, x_mid, xhat2, m, u, tanh_u, g;
  ColVector<T> rstd1, rstd2;
  std::vector<T> probs;  // per sequence, per head: row-major n x n causal attention weights
};

/// Everything the backward pass needs from one forward run over blocks
/// [first_layer, last_layer].
template <typename T>
struct Activations {
  int first_layer = 1;
  int last_layer = 0;
  std::vector<BlockCache<T>> blocks;
  std::vector<Matrix<T>> inputs;   // inputs[i]: residual entering block first_layer + i
  std::vector<Matrix<T>> outputs;  // outputs[i]: hidden state after block first_layer + i
  std::vector<int> logit_rows;
  Matrix<T> zhat;  // normalized final-LN rows (before scale/bias)
  ColVector<T> rstd_f;
  Matrix<T> z;
  Matrix<T> logits;

  const Matrix<T>& hidden(int layer) const { return outputs[static_cast<std::size_t>(layer - first_layer)]; }
};

namespace detail {

inline constexpr double kLnEps = 1e-5;

template <typename T>
void layer_norm(const Matrix<T>& x, const Matrix<T>& scale, const Matrix<T>& bias, Matrix<T>& xhat,
                ColVector<T>& rstd, Matrix<T>& y) {
  const ColVector<T> mu = x.rowwise().mean();
  xhat = x.colwise() - mu;
  rstd = (xhat.array().square().rowwise().mean() + static_cast<T>(kLnEps)).rsqrt().matrix();
  xhat = xhat.array().colwise() * rstd.array();
  y = (xhat.array().rowwise() * scale.row(0).array()).rowwise() + bias.row(0).array();
}

/// d(input) of a layer norm given d(xhat).
template <typename T>
Matrix<T> layer_norm_dx(const Matrix<T>& dxhat, const Matrix<T>& xhat, const ColVector<T>& rstd) {
  const ColVector<T> mean_d = dxhat.rowwise().mean();
  const ColVector<T> mean_dx = (dxhat.array() * xhat.array()).rowwise().mean().matrix();
  Matrix<T> out = dxhat;
  out.colwise() -= mean_d;
  out -= (xhat.array().colwise() * mean_dx.array()).matrix();
  return out.array().colwise() * rstd.array();
}

template <typename T>
constexpr T gelu_k() {
  return static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
}

template <typename T>
T gelu(T x) {
  const T t = std::tanh(gelu_k<T>() * (x + T(0.044715) * x * x * x));
  return T(0.5) * x * (T(1) + t);
}

template <typename T>
T gelu_grad(T x) {
  const T t = std::tanh(gelu_k<T>() * (x + T(0.044715) * x * x * x));
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * gelu_k<T>() * (T(1) + T(3 * 0.044715) * x * x);
}

// Causal multi-head attention on stacked sequences. Plain loops: sequences
// are short, so Eigen temporaries would cost more than the arithmetic.
template <typename T>
void attention_forward(const Batch& batch, int H, int dh, T scale, const Matrix<T>& q, const Matrix<T>& k,
                       const Matrix<T>& v, std::vector<T>& probs, Matrix<T>& ctx) {
  const Eigen::Index d = q.cols();
  std::size_t total = 0;
  for (int s = 0; s < batch.n_seq(); ++s) total += static_cast<std::size_t>(batch.seq_len(s)) * batch.seq_len(s) * H;
  probs.assign(total, T(0));
  std::size_t base = 0;
  for (int s = 0; s < batch.n_seq(); ++s) {
    const int o = batch.seq_offsets[static_cast<std::size_t>(s)], n = batch.seq_len(s);
    for (int h = 0; h < H; ++h, base += static_cast<std::size_t>(n) * n) {
      T* P = probs.data() + base;
      for (int i = 0; i < n; ++i) {
        const T* qi = q.data() + (o + i) * d + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (int j = 0; j <= i; ++j) {
          const T* kj = k.data() + (o + j) * d + h * dh;
          T acc = 0;
          for (int e = 0; e < dh; ++e) acc += qi[e] * kj[e];
          P[i * n + j] = acc * scale;
          mx = std::max(mx, P[i * n + j]);
        }
        T sum = 0;
        for (int j = 0; j <= i; ++j) sum += (P[i * n + j] = std::exp(P[i * n + j] - mx));
        T* ci = ctx.data() + (o + i) * d + h * dh;
        for (int j = 0; j <= i; ++j) {
          const T p = (P[i * n + j] /= sum);
          const T* vj = v.data() + (o + j) * d + h * dh;
          for (int e = 0; e < dh; ++e) ci[e] += p * vj[e];
        }
      }
    }
  }
}

template <typename T>
void attention_backward(const Batch& batch, int H, int dh, T scale, const Matrix<T>& q, const Matrix<T>& k,
                        const Matrix<T>& v, const std::vector<T>& probs, const Matrix<T>& dctx, Matrix<T>& dq,
                        Matrix<T>& dk, Matrix<T>& dv) {
  const Eigen::Index d = q.cols();
  std::vector<T> dP;
  std::size_t base = 0;
  for (int s = 0; s < batch.n_seq(); ++s) {
    const int o = batch.seq_offsets[static_cast<std::size_t>(s)], n = batch.seq_len(s);
    dP.resize(static_cast<std::size_t>(n));
    for (int h = 0; h < H; ++h, base += static_cast<std::size_t>(n) * n) {
      const T* P = probs.data() + base;
      for (int i = 0; i < n; ++i) {
        const T* dci = dctx.data() + (o + i) * d + h * dh;
        T rs = 0;
        for (int j = 0; j <= i; ++j) {
          const T* vj = v.data() + (o + j) * d + h * dh;
          T* dvj = dv.data() + (o + j) * d + h * dh;
          const T p = P[i * n + j];
          T acc = 0;
          for (int e = 0; e < dh; ++e) {
            acc += dci[e] * vj[e];
            dvj[e] += p * dci[e];
          }
          dP[static_cast<std::size_t>(j)] = acc;
          rs += p * acc;
        }
        const T* qi = q.data() + (o + i) * d + h * dh;
        T* dqi = dq.data() + (o + i) * d + h * dh;
        for (int j = 0; j <= i; ++j) {
          const T ds = P[i * n + j] * (dP[static_cast<std::size_t>(j)] - rs) * scale;
          const T* kj = k.data() + (o + j) * d + h * dh;
          T* dkj = dk.data() + (o + j) * d + h * dh;
          for (int e = 0; e < dh; ++e) {
            dqi[e] += ds * kj[e];
            dkj[e] += ds * qi[e];
          }
        }
      }
    }
  }
}

// Vectorized tanh-approximation GELU; tanh_u is kept for the backward pass.
template <typename T>
void gelu_forward(const Matrix<T>& u, Matrix<T>& tanh_u, Matrix<T>& g) {
  const auto ua = u.array();
  tanh_u = (gelu_k<T>() * (ua + T(0.044715) * ua.cube())).tanh().matrix();
  g = (T(0.5) * ua * (T(1) + tanh_u.array())).matrix();
}

template <typename T>
Matrix<T> gelu_grad(const Matrix<T>& u, const Matrix<T>& tanh_u) {
  const auto ua = u.array();
  const auto t = tanh_u.array();
  return (T(0.5) * (T(1) + t) +
          T(0.5) * ua * (T(1) - t.square()) * gelu_k<T>() * (T(1) + T(3 * 0.044715) * ua.square()))
      .matrix();
}

template <typename T>
void add_to(Matrix<T>& dst, const auto& expr) {
  if (dst.size() > 0) dst += expr;
}

}  // namespace detail

template <typename T>
void check_tokens(const MicroModel<T>& model, const Batch& batch) {
  for (int s = 0; s < batch.n_seq(); ++s)
    if (batch.seq_len(s) > model.config.max_len)
      throw InputError("sequence length " + std::to_string(batch.seq_len(s)) + " exceeds max_len " +
                       std::to_string(model.config.max_len));
  for (int t : batch.tokens)
    if (t < 0 || t >= model.config.vocab_size)
      throw InputError("token id " + std::to_string(t) + " outside [0, " + std::to_string(model.config.vocab_size) +
                       ")");
}

template <typename T>
Matrix<T> embed(const MicroModel<T>& model, const Batch& batch) {
  check_tokens(model, batch);
  Matrix<T> x(batch.rows(), model.d_model());
  for (Eigen::Index r = 0; r < batch.rows(); ++r)
    x.row(r) = model.params.embedding.row(batch.tokens[static_cast<std::size_t>(r)]) +
               model.params.positional.row(batch.positions[static_cast<std::size_t>(r)]);
  return x;
}

/// Runs block `layer` (1-based) on residual rows `x`; returns the new residual.
template <typename T>
Matrix<T> block_forward(const MicroModel<T>& model, int layer, const Matrix<T>& x, const Batch& batch,
                        BlockCache<T>& c) {
  const LayerParams<T>& P = model.params.layers[static_cast<std::size_t>(layer - 1)];
  const int d = model.d_model(), H = model.config.n_heads, dh = d / H;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));

  detail::layer_norm(x, P.ln1_scale, P.ln1_bias, c.xhat1, c.rstd1, c.a);
  c.q.noalias() = c.a * P.w_q;
  c.k.noalias() = c.a * P.w_k;
  c.v.noalias() = c.a * P.w_v;
  c.ctx.setZero(x.rows(), d);
  detail::attention_forward(batch, H, dh, scale, c.q, c.k, c.v, c.probs, c.ctx);
  c.x_mid = x;
  c.x_mid.noalias() += c.ctx * P.w_o;

  detail::layer_norm(c.x_mid, P.ln2_scale, P.ln2_bias, c.xhat2, c.rstd2, c.m);
  c.u.noalias() = c.m * P.w_1;
  c.u.rowwise() += P.b_1.row(0);
  detail::gelu_forward(c.u, c.tanh_u, c.g);
  Matrix<T> out = c.x_mid;
  out.noalias() += c.g * P.w_2;
  out.rowwise() += P.b_2.row(0);
  return out;
}

struct RunOptions {
  int first_layer = 1;
  int last_layer = -1;                     // -1: through the final block
  bool logits = true;                      // apply final LN + unembedding
  std::optional<std::vector<int>> rows{};  // rows to project; all rows if unset
};

/// Forward over blocks [first_layer, last_layer]. `x_in` is the residual
/// entering first_layer; when first_layer == 1 it may be omitted and the
/// embeddings are looked up.
template <typename T>
Activations<T> run(const MicroModel<T>& model, const Batch& batch, const RunOptions& opt = {},
                   const Matrix<T>* x_in = nullptr) {
  const int N = model.n_layers();
  const int last = opt.last_layer < 0 ? N : opt.last_layer;
  require(opt.first_layer >= 1 && opt.first_layer <= last + 1 && last <= N, "invalid layer range");
  require(!opt.logits || last == N, "logits require running through the final block");
  if (x_in == nullptr) {
    require(opt.first_layer == 1, "x_in required when starting above block 1");
  } else {
    require(x_in->rows() == batch.rows() && x_in->cols() == model.d_model(), "x_in shape mismatch");
    check_tokens(model, batch);
  }

  Activations<T> acts;
  acts.first_layer = opt.first_layer;
  acts.last_layer = last;
  Matrix<T> x = x_in ? *x_in : embed(model, batch);
  const auto n_blocks = static_cast<std::size_t>(std::max(0, last - opt.first_layer + 1));
  acts.blocks.resize(n_blocks);
  for (int l = opt.first_layer; l <= last; ++l) {
    const auto i = static_cast<std::size_t>(l - opt.first_layer);
    acts.inputs.push_back(x);
    x = block_forward(model, l, x, batch, acts.blocks[i]);
    acts.outputs.push_back(x);
  }
  if (!opt.logits) return acts;

  if (opt.rows) {
    acts.logit_rows = *opt.rows;
  } else {
    acts.logit_rows.resize(static_cast<std::size_t>(batch.rows()));
    for (std::size_t r = 0; r < acts.logit_rows.size(); ++r) acts.logit_rows[r] = static_cast<int>(r);
  }
  Matrix<T> sel(static_cast<Eigen::Index>(acts.logit_rows.size()), model.d_model());
  for (std::size_t i = 0; i < acts.logit_rows.size(); ++i) sel.row(static_cast<Eigen::Index>(i)) = x.row(acts.logit_rows[i]);
  detail::layer_norm(sel, model.params.final_ln_scale, model.params.final_ln_bias, acts.zhat, acts.rstd_f, acts.z);
  acts.logits.noalias() = acts.z * model.params.unembedding.transpose();
  return acts;
}

/// Backward pass of one block. `dout` is d(loss)/d(block output). Weight
/// gradients accumulate into the non-empty tensors of `g`. Returns
/// d(loss)/d(block input) when `need_dx`; otherwise the attention half is
/// skipped unless one of its tensors is in scope.
template <typename T>
Matrix<T> block_backward(const MicroModel<T>& model, int layer, const Batch& batch, const Matrix<T>& x_in,
                         const BlockCache<T>& c, const Matrix<T>& dout, LayerParams<T>& g, bool need_dx) {
  const LayerParams<T>& P = model.params.layers[static_cast<std::size_t>(layer - 1)];
  const int d = model.d_model(), H = model.config.n_heads, dh = d / H;
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  (void)x_in;

  // MLP half
  detail::add_to(g.w_2, c.g.transpose() * dout);
  detail::add_to(g.b_2, dout.colwise().sum());
  Matrix<T> du = dout * P.w_2.transpose();
  du.array() *= detail::gelu_grad(c.u, c.tanh_u).array();
  detail::add_to(g.w_1, c.m.transpose() * du);
  detail::add_to(g.b_1, du.colwise().sum());

  const bool need_attn = need_dx || g.w_q.size() || g.w_k.size() || g.w_v.size() || g.w_o.size() ||
                         g.ln1_scale.size() || g.ln1_bias.size();
  const bool need_ln2 = need_attn || g.ln2_scale.size() || g.ln2_bias.size();
  if (!need_ln2) return {};

  const Matrix<T> dm = du * P.w_1.transpose();
  detail::add_to(g.ln2_scale, (dm.array() * c.xhat2.array()).colwise().sum().matrix());
  detail::add_to(g.ln2_bias, dm.colwise().sum());
  if (!need_attn) return {};
  Matrix<T> dmid = dout;
  dmid += detail::layer_norm_dx<T>(dm.array().rowwise() * P.ln2_scale.row(0).array(), c.xhat2, c.rstd2);

  // attention half
  detail::add_to(g.w_o, c.ctx.transpose() * dmid);
  const Matrix<T> dctx = dmid * P.w_o.transpose();
  Matrix<T> dq = Matrix<T>::Zero(dctx.rows(), d), dk = dq, dv = dq;
  detail::attention_backward(batch, H, dh, scale, c.q, c.k, c.v, c.probs, dctx, dq, dk, dv);
  detail::add_to(g.w_q, c.a.transpose() * dq);
  detail::add_to(g.w_k, c.a.transpose() * dk);
  detail::add_to(g.w_v, c.a.transpose() * dv);
  if (!need_dx && !g.ln1_scale.size() && !g.ln1_bias.size()) return {};

  Matrix<T> da = dq * P.w_q.transpose();
  da.noalias() += dk * P.w_k.transpose();
  da.noalias() += dv * P.w_v.transpose();
  detail::add_to(g.ln1_scale, (da.array() * c.xhat1.array()).colwise().sum().matrix());
  detail::add_to(g.ln1_bias, da.colwise().sum());
  if (!need_dx) return {};
  dmid += detail::layer_norm_dx<T>(da.array().rowwise() * P.ln1_scale.row(0).array(), c.xhat1, c.rstd1);
  return dmid;
}

/// Seeds for the backward pass: d(loss)/d(logits) for the projected rows and
/// optionally d(loss)/d(hidden[l]) for individual layers.
template <typename T>
struct BackwardSeeds {
  const Matrix<T>* dlogits = nullptr;
  std::map<int, Matrix<T>> dhidden;
};

/// Gradients of all parameters in `scope`; tensors outside scope stay empty.
template <typename T>
Params<T> backward(const MicroModel<T>& model, const Batch& batch, const Activations<T>& acts,
                   const BackwardSeeds<T>& seeds, const Scope& scope) {
  const int lowest = scope.lowest_layer();
  if (!scope.all_layers)
    require(scope.layer >= 1 && scope.layer <= model.n_layers(), "scope layer out of range");
  require(lowest == 0 ? acts.first_layer == 1 : acts.first_layer <= lowest,
          "forward run does not reach the scoped layers");
  Params<T> g = Params<T>::zeros_like(model.params, scope);

  Matrix<T> dx = Matrix<T>::Zero(batch.rows(), model.d_model());
  if (seeds.dlogits) {
    const Matrix<T>& dlog = *seeds.dlogits;
    require(dlog.rows() == acts.logits.rows() && dlog.cols() == acts.logits.cols(), "dlogits shape mismatch");
    detail::add_to(g.unembedding, dlog.transpose() * acts.z);
    const Matrix<T> dz = dlog * model.params.unembedding;
    detail::add_to(g.final_ln_scale, (dz.array() * acts.zhat.array()).colwise().sum().matrix());
    detail::add_to(g.final_ln_bias, dz.colwise().sum());
    const Matrix<T> dsel = detail::layer_norm_dx<T>(dz.array().rowwise() * model.params.final_ln_scale.row(0).array(),
                                                    acts.zhat, acts.rstd_f);
    for (std::size_t i = 0; i < acts.logit_rows.size(); ++i) dx.row(acts.logit_rows[i]) += dsel.row(static_cast<Eigen::Index>(i));
  }

  const int stop = std::max(lowest, 1);
  for (int l = acts.last_layer; l >= stop; --l) {
    if (auto it = seeds.dhidden.find(l); it != seeds.dhidden.end()) dx += it->second;
    const auto i = static_cast<std::size_t>(l - acts.first_layer);
    const bool need_dx = l > stop || lowest == 0;
    dx = block_backward(model, l, batch, acts.inputs[i], acts.blocks[i], dx,
                        g.layers[static_cast<std::size_t>(l - 1)], need_dx);
  }
  if (lowest == 0) {
    for (Eigen::Index r = 0; r < batch.rows(); ++r) {
      if (g.embedding.size()) g.embedding.row(batch.tokens[static_cast<std::size_t>(r)]) += dx.row(r);
      if (g.positional.size()) g.positional.row(batch.positions[static_cast<std::size_t>(r)]) += dx.row(r);
    }
  }
  return g;
}

// --- single-sequence API ---------------------------------------------------

template <typename T>
struct ForwardTrace {
  Matrix<T> logits;               // [seq x vocab]
  std::vector<Matrix<T>> hidden;  // N matrices [seq x d]
};

template <typename T>
ForwardTrace<T> forward(const MicroModel<T>& model, std::span<const int> tokens) {
  Batch b;
  b.add(tokens);
  Activations<T> a = run(model, b);
  return {std::move(a.logits), std::move(a.outputs)};
}

template <typename T>
RowVector<T> softmax(const Eigen::Ref<const RowVector<T>>& logits) {
  RowVector<T> p = (logits.array() - logits.maxCoeff()).exp().matrix();
  return p / p.sum();
}

/// Decodes an intermediate hidden state through the final LayerNorm and the
/// unembedding: softmax(E * LN_final(h)).
template <typename T>
RowVector<T> logit_lens(const MicroModel<T>& model, const Eigen::Ref<const RowVector<T>>& h) {
  if (h.size() != model.d_model())
    throw InputError("hidden state has dimension " + std::to_string(h.size()) + ", model expects " +
                     std::to_string(model.d_model()));
  Matrix<T> x = h;
  Matrix<T> xhat, z;
  ColVector<T> rstd;
  detail::layer_norm(x, model.params.final_ln_scale, model.params.final_ln_bias, xhat, rstd, z);
  RowVector<T> logits = z * model.params.unembedding.transpose();
  return softmax<T>(logits);
}

/// Lens distributions for many rows at once (rows of `h`).
template <typename T>
Matrix<T> logit_lens_rows(const MicroModel<T>& model, const Matrix<T>& h) {
  if (h.cols() != model.d_model()) throw InputError("hidden state dimension mismatch");
  Matrix<T> xhat, z;
  ColVector<T> rstd;
  detail::layer_norm(h, model.params.final_ln_scale, model.params.final_ln_bias, xhat, rstd, z);
  Matrix<T> logits = z * model.params.unembedding.transpose();
  const ColVector<T> mx = logits.rowwise().maxCoeff();
  logits = (logits.colwise() - mx).array().exp().matrix();
  const ColVector<T> sums = logits.rowwise().sum();
  return logits.array().colwise() / sums.array();
}

// --- gradients as a keyed map ---------------------------------------------

template <typename T>
struct Gradients {
  Scope scope;
  std::map<ParamKey, Matrix<T>> tensors;

  const Matrix<T>& at(int layer, const std::string& name) const { return tensors.at(ParamKey{layer, name}); }
};

template <typename T>
Gradients<T> to_gradients(Params<T> pack, const Scope& scope) {
  Gradients<T> out{scope, {}};
  pack.for_each([&](const ParamKey& k, Matrix<T>& m) {
    if (m.size() > 0) out.tensors.emplace(k, std::move(m));
  });
  return out;
}

// --- Adam ---------------------------------------------------------------------

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adaptive-moment optimizer; tensors with empty gradients are never touched.
template <typename T>
class Adam {
public:
  explicit Adam(AdamHyper h) : h_(h) {}

  void step(Params<T>& params, const Params<T>& grads) {
    if (moments_m_.layers.empty() && !params.layers.empty()) {
      moments_m_.layers.resize(params.layers.size());
      moments_v_.layers.resize(params.layers.size());
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(h_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(h_.beta2, static_cast<double>(t_));
    auto g = Params<T>::flat(grads);
    std::vector<Matrix<T>*> m, v;
    moments_m_.for_each([&](const ParamKey&, Matrix<T>& x) { m.push_back(&x); });
    moments_v_.for_each([&](const ParamKey&, Matrix<T>& x) { v.push_back(&x); });
    std::size_t i = 0;
    params.for_each([&](const ParamKey&, Matrix<T>& p) {
      const Matrix<T>& gi = *g[i];
      Matrix<T>& mi = *m[i];
      Matrix<T>& vi = *v[i];
      ++i;
      if (gi.size() == 0) return;
      if (mi.size() == 0) {
        mi = Matrix<T>::Zero(p.rows(), p.cols());
        vi = Matrix<T>::Zero(p.rows(), p.cols());
      }
      mi = static_cast<T>(h_.beta1) * mi + static_cast<T>(1 - h_.beta1) * gi;
      vi = static_cast<T>(h_.beta2) * vi + static_cast<T>(1 - h_.beta2) * gi.cwiseProduct(gi);
      if (h_.lr == 0) return;
      const T step = static_cast<T>(h_.lr / bc1);
      const T inv_bc2 = static_cast<T>(1.0 / bc2);
      const T eps = static_cast<T>(h_.eps);
      p.array() -= step * mi.array() / ((vi.array() * inv_bc2).sqrt() + eps);
    });
  }

  long steps_taken() const { return t_; }

private:
  AdamHyper h_;
  Params<T> moments_m_, moments_v_;
  long t_ = 0;
};

// --- MCK1 checkpoints ------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                     static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
  os.write(b, 4);
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void put_f32(std::string& buf, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}

inline float get_f32(const unsigned char* p) {
  const std::uint32_t u = get_u32(p);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
std::string serialize_model(const MicroModel<T>& model) {
  std::ostringstream os(std::ios::binary);
  os.write("MCK1", 4);
  detail::put_u32(os, kCheckpointVersion);
  const std::string cfg = to_json(model.config).dump();
  detail::put_u32(os, static_cast<std::uint32_t>(cfg.size()));
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  std::string body;
  model.params.for_each([&](const ParamKey&, const Matrix<T>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) detail::put_f32(body, static_cast<float>(m.data()[i]));
  });
  os.write(body.data(), static_cast<std::streamsize>(body.size()));
  return os.str();
}

template <typename T>
MicroModel<T> deserialize_model(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 12) throw FormatError("truncated checkpoint: header needs 12 bytes, got " + std::to_string(bytes.size()));
  if (bytes.compare(0, 4, "MCK1") != 0) throw FormatError("bad magic: expected \"MCK1\"");
  const std::uint32_t version = detail::get_u32(p + 4);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t jlen = detail::get_u32(p + 8);
  if (bytes.size() < 12 + static_cast<std::size_t>(jlen)) throw FormatError("truncated checkpoint config");
  ModelConfig cfg;
  try {
    cfg = model_config_from_json(nlohmann::json::parse(bytes.substr(12, jlen)));
    validate(cfg);
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError(std::string("bad checkpoint config: ") + e.what());
  }
  MicroModel<T> model = init_model<T>(ModelConfig{cfg.n_layers, cfg.d_model, cfg.n_heads, cfg.d_ff, cfg.vocab_size,
                                                  cfg.max_len, cfg.seed});
  std::size_t expected = 0;
  model.params.for_each([&](const ParamKey&, const Matrix<T>& m) { expected += static_cast<std::size_t>(m.size()) * 4; });
  const std::size_t have = bytes.size() - 12 - jlen;
  if (have != expected)
    throw FormatError("checkpoint parameter block is " + std::to_string(have) + " bytes, expected " +
                      std::to_string(expected));
  const unsigned char* q = p + 12 + jlen;
  model.params.for_each([&](const ParamKey&, Matrix<T>& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i, q += 4) m.data()[i] = static_cast<T>(detail::get_f32(q));
  });
  return model;
}

template <typename T>
void save_model(const MicroModel<T>& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open '" + path + "' for writing");
  const std::string bytes = serialize_model(model);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

template <typename T = float>
MicroModel<T> load_model(const std::string& path) {
  return deserialize_model<T>(detail::read_file(path));
}

/// Tensors whose bytes differ between two models of identical shape.
template <typename T>
std::vector<ParamKey> changed_params(const MicroModel<T>& before, const MicroModel<T>& after) {
  std::vector<ParamKey> out;
  auto a = Params<T>::flat(before.params);
  std::size_t i = 0;
  after.params.for_each([&](const ParamKey& k, const Matrix<T>& m) {
    const Matrix<T>& o = *a[i++];
    if (o.rows() != m.rows() || o.cols() != m.cols() ||
        std::memcmp(o.data(), m.data(), static_cast<std::size_t>(m.size()) * sizeof(T)) != 0)
      out.push_back(k);
  });
  return out;
}

}  // namespace mute
