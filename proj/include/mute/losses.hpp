#pragma once

// Scalar objectives over sample batches, each with an exact analytic
// gradient restricted to a Scope:
//
//   CrossEntropyLoss  mean over samples of the mean answer-token NLL
//   SimNpoLoss        -(2/beta) log sigmoid(-(beta/|y|) log pi(y|x) - gamma)
//   RmuLoss           ||h_l - c*u||^2/d on forget tokens
//                     + retain_weight * ||h_l - h_l^frozen||^2/d on retain tokens
//
// Objectives may cache the residual entering some block L ("prefix"), valid
// as long as blocks below L and the embeddings do not change. Forward passes
// then start at L, which is what makes single-layer unlearning cheap.

#include <cmath>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "mute/corpus.hpp"
#include "mute/model.hpp"

namespace mute {

inline Batch make_batch(std::span<const Sample> samples) {
  Batch b;
  for (const Sample& s : samples) b.add(s.tokens);
  return b;
}

/// Row (in a Batch built from `samples`) that predicts each answer token.
struct AnswerIndex {
  std::vector<int> rows;
  std::vector<int> targets;
  std::vector<int> sample;
  std::vector<int> answer_len;  // per sample

  static AnswerIndex build(std::span<const Sample> samples, const Batch& batch) {
    AnswerIndex ix;
    for (int s = 0; s < static_cast<int>(samples.size()); ++s) {
      const Sample& smp = samples[static_cast<std::size_t>(s)];
      if (smp.answer_tokens.empty()) throw DataError("sample with empty answer (fact " + std::to_string(smp.semantic_id) + ")");
      if (smp.answer_start < 1) throw DataError("answer_start must be >= 1");
      ix.answer_len.push_back(smp.answer_len());
      for (int j = 0; j < smp.answer_len(); ++j) {
        ix.rows.push_back(batch.row(s, smp.answer_start + j - 1));
        ix.targets.push_back(smp.answer_tokens[static_cast<std::size_t>(j)]);
        ix.sample.push_back(s);
      }
    }
    return ix;
  }
};

/// Residual entering block `layer` for every row of `batch`.
template <typename T>
Matrix<T> residual_before(const MicroModel<T>& model, const Batch& batch, int layer) {
  require(layer >= 1 && layer <= model.n_layers(), "layer out of range");
  if (layer == 1) return embed(model, batch);
  Activations<T> a = run(model, batch, RunOptions{1, layer - 1, false, {}});
  return a.outputs.back();
}

template <typename T>
struct LossAndGrad {
  T value{};
  Params<T> grads;
};

/// Log-softmax of each row.
template <typename T>
Matrix<T> log_softmax_rows(const Matrix<T>& logits) {
  const ColVector<T> mx = logits.rowwise().maxCoeff();
  Matrix<T> z = logits.colwise() - mx;
  const ColVector<T> lse = z.array().exp().rowwise().sum().log().matrix();
  return z.colwise() - lse;
}

/// Shared machinery for objectives that read answer-position logits.
template <typename T>
class AnswerObjective {
public:
  explicit AnswerObjective(std::vector<Sample> samples) : samples_(std::move(samples)) {
    require(!samples_.empty(), "empty batch");
    batch_ = make_batch(samples_);
    index_ = AnswerIndex::build(samples_, batch_);
  }

  /// Freeze the residual entering `layer` as computed by `model`.
  void cache_prefix(const MicroModel<T>& model, int layer) {
    prefix_layer_ = layer;
    prefix_ = residual_before(model, batch_, layer);
  }
  void clear_prefix() { prefix_.reset(); }

  const std::vector<Sample>& samples() const { return samples_; }

protected:
  Activations<T> forward_logits(const MicroModel<T>& model, int lowest_needed) const {
    RunOptions opt;
    opt.rows = index_.rows;
    if (prefix_ && lowest_needed >= prefix_layer_) {
      opt.first_layer = prefix_layer_;
      return run(model, batch_, opt, &*prefix_);
    }
    return run(model, batch_, opt);
  }

  std::vector<Sample> samples_;
  Batch batch_;
  AnswerIndex index_;
  std::optional<Matrix<T>> prefix_;
  int prefix_layer_ = 1;
};

template <typename T>
class CrossEntropyLoss : public AnswerObjective<T> {
public:
  using AnswerObjective<T>::AnswerObjective;

  /// Per-sample mean answer-token cross-entropy in nats.
  std::vector<T> per_sample(const MicroModel<T>& model) const {
    const Activations<T> a = this->forward_logits(model, model.n_layers());
    return per_sample_from(log_softmax_rows(a.logits));
  }

  T value(const MicroModel<T>& model) const {
    const auto v = per_sample(model);
    T sum = 0;
    for (T x : v) sum += x;
    return sum / static_cast<T>(v.size());
  }

  LossAndGrad<T> value_and_grad(const MicroModel<T>& model, const Scope& scope) const {
    const Activations<T> a = this->forward_logits(model, scope.lowest_layer());
    const Matrix<T> logp = log_softmax_rows(a.logits);
    const auto v = per_sample_from(logp);
    const T n = static_cast<T>(this->samples_.size());
    Matrix<T> dlogits = logp.array().exp().matrix();
    for (std::size_t i = 0; i < this->index_.rows.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      dlogits(r, this->index_.targets[i]) -= T(1);
      dlogits.row(r) /= n * static_cast<T>(this->index_.answer_len[static_cast<std::size_t>(this->index_.sample[i])]);
    }
    BackwardSeeds<T> seeds;
    seeds.dlogits = &dlogits;
    LossAndGrad<T> out;
    T sum = 0;
    for (T x : v) sum += x;
    out.value = sum / n;
    out.grads = backward(model, this->batch_, a, seeds, scope);
    return out;
  }

private:
  std::vector<T> per_sample_from(const Matrix<T>& logp) const {
    std::vector<T> v(this->samples_.size(), T(0));
    for (std::size_t i = 0; i < this->index_.rows.size(); ++i) {
      const auto s = static_cast<std::size_t>(this->index_.sample[i]);
      v[s] -= logp(static_cast<Eigen::Index>(i), this->index_.targets[i]) / static_cast<T>(this->index_.answer_len[s]);
    }
    return v;
  }
};

struct SimNpoParams {
  double beta = 1.0;
  double gamma = 0.0;
};

/// Per-sample SimNPO loss from the summed answer log-probability.
inline double simnpo_sample_loss(double log_prob, int answer_len, double beta, double gamma) {
  const double z = -(beta / answer_len) * log_prob - gamma;
  // -log sigmoid(z) = softplus(-z)
  const double softplus = z > 0 ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));
  return (2.0 / beta) * softplus;
}

template <typename T>
class SimNpoLoss : public AnswerObjective<T> {
public:
  SimNpoLoss(std::vector<Sample> samples, SimNpoParams p) : AnswerObjective<T>(std::move(samples)), p_(p) {
    require(p_.beta > 0, "SimNPO beta must be > 0");
  }

  /// Sum over answer tokens of log pi(y_j | x, y_<j), one entry per sample.
  std::vector<T> log_probs(const MicroModel<T>& model) const {
    return log_probs_from(log_softmax_rows(this->forward_logits(model, model.n_layers()).logits));
  }

  T value(const MicroModel<T>& model) const { return value_from(log_probs(model)); }

  LossAndGrad<T> value_and_grad(const MicroModel<T>& model, const Scope& scope) const {
    const Activations<T> a = this->forward_logits(model, scope.lowest_layer());
    const Matrix<T> logp = log_softmax_rows(a.logits);
    const auto lp = log_probs_from(logp);
    const double n = static_cast<double>(this->samples_.size());
    // dL_s/dlogpi_s = (2/|y|) * sigmoid(-z), z = -(beta/|y|) logpi - gamma
    std::vector<T> coef(lp.size());
    for (std::size_t s = 0; s < lp.size(); ++s) {
      const double len = this->index_.answer_len[s];
      const double z = -(p_.beta / len) * static_cast<double>(lp[s]) - p_.gamma;
      coef[s] = static_cast<T>((2.0 / len) / (1.0 + std::exp(z)) / n);
    }
    // dlogpi/dlogits = onehot - softmax
    Matrix<T> dlogits = logp.array().exp().matrix();
    for (std::size_t i = 0; i < this->index_.rows.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      dlogits(r, this->index_.targets[i]) -= T(1);
      dlogits.row(r) *= -coef[static_cast<std::size_t>(this->index_.sample[i])];
    }
    BackwardSeeds<T> seeds;
    seeds.dlogits = &dlogits;
    return {value_from(lp), backward(model, this->batch_, a, seeds, scope)};
  }

  const SimNpoParams& params() const { return p_; }

private:
  std::vector<T> log_probs_from(const Matrix<T>& logp) const {
    std::vector<T> v(this->samples_.size(), T(0));
    for (std::size_t i = 0; i < this->index_.rows.size(); ++i)
      v[static_cast<std::size_t>(this->index_.sample[i])] += logp(static_cast<Eigen::Index>(i), this->index_.targets[i]);
    return v;
  }

  T value_from(const std::vector<T>& lp) const {
    double sum = 0;
    for (std::size_t s = 0; s < lp.size(); ++s)
      sum += simnpo_sample_loss(static_cast<double>(lp[s]), this->index_.answer_len[s], p_.beta, p_.gamma);
    return static_cast<T>(sum / static_cast<double>(lp.size()));
  }

  SimNpoParams p_;
};

/// Fixed unit steering direction: components Uniform[0,1), then l2-normalized.
template <typename T>
RowVector<T> steering_direction(int dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  RowVector<double> u(dim);
  for (int i = 0; i < dim; ++i) u(i) = uni(rng);
  u /= u.norm();
  return u.cast<T>();
}

/// Token positions steered by RMU: prompt positions (before the answer)
/// holding non-special tokens.
inline std::vector<int> steered_positions(const Sample& s, int special_size) {
  std::vector<int> pos;
  for (int p = 0; p < s.answer_start; ++p)
    if (s.tokens[static_cast<std::size_t>(p)] >= special_size) pos.push_back(p);
  return pos;
}

template <typename T>
class RmuLoss {
public:
  struct Config {
    int layer = 1;
    std::optional<double> steering_coeff{};  // default: mean frozen ||h_l|| over forget tokens
    double retain_weight = 1.0;
    std::uint64_t u_seed = 0;
    int special_size = 0;  // token ids below this are special and never steered
  };

  RmuLoss(const MicroModel<T>& frozen, std::span<const Sample> forget, std::span<const Sample> retain, Config cfg)
      : cfg_(cfg) {
    require(!forget.empty() && !retain.empty(), "RMU needs non-empty forget and retain batches");
    require(cfg_.layer >= 1 && cfg_.layer <= frozen.n_layers(), "RMU layer out of range");
    require(cfg_.retain_weight >= 0, "retain weight must be >= 0");
    for (const Sample& s : forget) add(s, forget_rows_);
    for (const Sample& s : retain) add(s, retain_rows_);
    require(!forget_rows_.empty() && !retain_rows_.empty(), "RMU batches contain no steerable tokens");

    prefix_ = residual_before(frozen, batch_, cfg_.layer);
    const Matrix<T> h = hidden(frozen);
    frozen_retain_.resize(static_cast<Eigen::Index>(retain_rows_.size()), frozen.d_model());
    for (std::size_t i = 0; i < retain_rows_.size(); ++i)
      frozen_retain_.row(static_cast<Eigen::Index>(i)) = h.row(retain_rows_[i]);
    if (cfg_.steering_coeff) {
      coeff_ = *cfg_.steering_coeff;
    } else {
      double sum = 0;
      for (int r : forget_rows_) sum += static_cast<double>(h.row(r).norm());
      coeff_ = sum / static_cast<double>(forget_rows_.size());
    }
    require(coeff_ > 0, "steering coefficient must be > 0");
    direction_ = steering_direction<T>(frozen.d_model(), cfg_.u_seed);
    target_ = direction_ * static_cast<T>(coeff_);
  }

  T value(const MicroModel<T>& model) const {
    const Matrix<T> h = hidden(model);
    return terms(h).first;
  }

  LossAndGrad<T> value_and_grad(const MicroModel<T>& model, const Scope& scope) const {
    require(scope.lowest_layer() == cfg_.layer && !scope.all_layers,
            "RMU gradients are defined for a scope at the steered layer");
    Activations<T> a = forward(model);
    auto [value, dh] = terms(a.outputs.back());
    BackwardSeeds<T> seeds;
    seeds.dhidden.emplace(cfg_.layer, std::move(dh));
    return {value, backward(model, batch_, a, seeds, scope)};
  }

  /// Forget and retain terms separately (retain term unweighted).
  std::pair<double, double> components(const MicroModel<T>& model) const {
    const Matrix<T> h = hidden(model);
    const double d = static_cast<double>(h.cols());
    double f = 0, r = 0;
    for (int row : forget_rows_) f += static_cast<double>((h.row(row) - target_).squaredNorm()) / d;
    for (std::size_t i = 0; i < retain_rows_.size(); ++i)
      r += static_cast<double>((h.row(retain_rows_[i]) - frozen_retain_.row(static_cast<Eigen::Index>(i))).squaredNorm()) / d;
    return {f / static_cast<double>(forget_rows_.size()), r / static_cast<double>(retain_rows_.size())};
  }

  double steering_coeff() const { return coeff_; }
  const RowVector<T>& direction() const { return direction_; }
  const RowVector<T>& target() const { return target_; }
  const Config& config() const { return cfg_; }

private:
  void add(const Sample& s, std::vector<int>& rows) {
    const int seq = batch_.n_seq();
    batch_.add(s.tokens);
    for (int p : steered_positions(s, cfg_.special_size)) rows.push_back(batch_.row(seq, p));
  }

  Activations<T> forward(const MicroModel<T>& model) const {
    return run(model, batch_, RunOptions{cfg_.layer, cfg_.layer, false, {}}, &prefix_);
  }
  Matrix<T> hidden(const MicroModel<T>& model) const { return forward(model).outputs.back(); }

  std::pair<T, Matrix<T>> terms(const Matrix<T>& h) const {
    const T d = static_cast<T>(h.cols());
    const T nf = static_cast<T>(forget_rows_.size()), nr = static_cast<T>(retain_rows_.size());
    const T w = static_cast<T>(cfg_.retain_weight);
    Matrix<T> dh = Matrix<T>::Zero(h.rows(), h.cols());
    T f = 0, r = 0;
    for (int row : forget_rows_) {
      const RowVector<T> diff = h.row(row) - target_;
      f += diff.squaredNorm();
      dh.row(row) += diff * (T(2) / (d * nf));
    }
    for (std::size_t i = 0; i < retain_rows_.size(); ++i) {
      const int row = retain_rows_[i];
      const RowVector<T> diff = h.row(row) - frozen_retain_.row(static_cast<Eigen::Index>(i));
      r += diff.squaredNorm();
      dh.row(row) += diff * (w * T(2) / (d * nr));
    }
    return {f / (d * nf) + w * r / (d * nr), std::move(dh)};
  }

  Config cfg_;
  Batch batch_;
  std::vector<int> forget_rows_, retain_rows_;
  Matrix<T> prefix_;
  Matrix<T> frozen_retain_;
  double coeff_ = 0;
  RowVector<T> direction_, target_;
};

/// Gradient of a loss with respect to the tensors in `scope`. Tensors outside
/// the scope have no entry at all.
template <typename T, typename Loss>
Gradients<T> grad(const MicroModel<T>& model, const Loss& loss, const Scope& scope) {
  return to_gradients(loss.value_and_grad(model, scope).grads, scope);
}

}  // namespace mute
