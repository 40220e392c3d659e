#pragma once

// Network building blocks and training math: dense layers, LSTM cells,
// diagonal Gaussians, likelihoods and the Adam optimizer.

#include "nidm/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nidm::nn {

using ad::Parameter;
using ad::ParameterSet;
using ad::Tape;
using ad::Tensor;
using ad::Var;

inline constexpr double kLog2Pi = 1.8378770664093453;  // log(2 pi)

enum class Activation { Identity, Tanh, Relu };

/// Uniform fan-in initialization U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline Tensor uniform_init(std::size_t rows, std::size_t cols, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

struct DenseLayer {
  Parameter* weight = nullptr;  // in x out
  Parameter* bias = nullptr;    // 1 x out
  Activation activation = Activation::Identity;

  DenseLayer() = default;
  DenseLayer(ParameterSet& ps, const std::string& name, std::size_t in, std::size_t out, Activation act,
             std::mt19937_64& rng)
      : activation(act) {
    weight = &ps.add(name + ".w", uniform_init(in, out, in, rng));
    bias = &ps.add(name + ".b", Tensor::matrix(1, out));
  }

  std::size_t in_width() const { return weight->value.rows(); }
  std::size_t out_width() const { return weight->value.cols(); }

  Var operator()(Tape& t, Var x) const {
    if (x.cols() != in_width())
      throw ad::ShapeError("dense layer " + weight->name + " expects width " + std::to_string(in_width()) + ", got " +
                           ad::shape_string(x.shape()));
    Var y = ad::add_row(ad::matmul(x, t.param(*weight)), t.param(*bias));
    switch (activation) {
      case Activation::Tanh:
        return ad::tanh(y);
      case Activation::Relu:
        return ad::relu(y);
      case Activation::Identity:
        break;
    }
    return y;
  }
};

struct LstmState {
  Var hidden;
  Var cell;
};

/// Standard LSTM cell. Gate blocks in the weight columns are ordered
/// input, forget, candidate, output; the forget bias starts at 1.
struct LstmCell {
  Parameter* w_input = nullptr;      // in x 4H
  Parameter* w_recurrent = nullptr;  // H x 4H
  Parameter* bias = nullptr;         // 1 x 4H
  std::size_t hidden = 0;

  LstmCell() = default;
  LstmCell(ParameterSet& ps, const std::string& name, std::size_t in, std::size_t hidden_width, std::mt19937_64& rng)
      : hidden(hidden_width) {
    w_input = &ps.add(name + ".wx", uniform_init(in, 4 * hidden, in, rng));
    w_recurrent = &ps.add(name + ".wh", uniform_init(hidden, 4 * hidden, hidden, rng));
    Tensor b = Tensor::matrix(1, 4 * hidden);
    for (std::size_t j = hidden; j < 2 * hidden; ++j) b[j] = 1.0;
    bias = &ps.add(name + ".b", std::move(b));
  }

  std::size_t in_width() const { return w_input->value.rows(); }

  LstmState zero_state(Tape& t, std::size_t batch) const {
    return {t.constant(Tensor::matrix(batch, hidden)), t.constant(Tensor::matrix(batch, hidden))};
  }

  LstmState step(Tape& t, Var input, const LstmState& s) const {
    if (input.cols() != in_width())
      throw ad::ShapeError("lstm " + w_input->name + " expects input width " + std::to_string(in_width()) +
                           ", got " + ad::shape_string(input.shape()));
    if (s.hidden.cols() != hidden || s.hidden.rows() != input.rows())
      throw ad::ShapeError("lstm " + w_input->name + " state " + ad::shape_string(s.hidden.shape()) +
                           " does not match input " + ad::shape_string(input.shape()));
    Var gates = ad::add_row(ad::matmul(input, t.param(*w_input)) + ad::matmul(s.hidden, t.param(*w_recurrent)),
                            t.param(*bias));
    const std::size_t h = hidden;
    Var i = ad::sigmoid(ad::slice(gates, 0, h));
    Var f = ad::sigmoid(ad::slice(gates, h, 2 * h));
    Var g = ad::tanh(ad::slice(gates, 2 * h, 3 * h));
    Var o = ad::sigmoid(ad::slice(gates, 3 * h, 4 * h));
    Var c = f * s.cell + i * g;
    return {o * ad::tanh(c), c};
  }

  /// Final hidden state after consuming the whole sequence.
  Var encode(Tape& t, const std::vector<Var>& sequence) const {
    if (sequence.empty()) throw std::invalid_argument("lstm encode of an empty sequence");
    LstmState s = zero_state(t, sequence.front().rows());
    for (const Var& x : sequence) s = step(t, x, s);
    return s.hidden;
  }
};

/// Diagonal Gaussian parameterized by mean and log-variance (batch x dim).
struct DiagGaussian {
  Var mean;
  Var log_var;
};

/// Splits a (batch x 2L) head output into mean and log-variance. The
/// log-variance is clamped to a wide band to keep exp() finite.
inline DiagGaussian gaussian_head(Var raw, std::size_t latent) {
  return {ad::slice(raw, 0, latent), ad::clamp(ad::slice(raw, latent, 2 * latent), -12.0, 6.0)};
}

/// KL(q || p) per batch row, summed over latent dimensions: (batch x 1).
inline Var diag_gaussian_kl(const DiagGaussian& q, const DiagGaussian& p) {
  if (q.mean.shape() != p.mean.shape())
    throw ad::ShapeError("diag_gaussian_kl: dimension mismatch " + ad::shape_string(q.mean.shape()) + " vs " +
                         ad::shape_string(p.mean.shape()));
  // 0.5 * (lv_p - lv_q + (var_q + (mu_q - mu_p)^2) / var_p - 1)
  Var var_ratio = ad::exp(q.log_var - p.log_var);
  Var mean_term = ad::square(q.mean - p.mean) / ad::exp(p.log_var);
  Var per_dim = ad::scale(ad::add_scalar(p.log_var - q.log_var + var_ratio + mean_term, -1.0), 0.5);
  return ad::row_sum(per_dim);
}

/// KL(q || N(0, I)) per batch row.
inline Var standard_normal_kl(const DiagGaussian& q) {
  Var per_dim = ad::scale(ad::add_scalar(ad::exp(q.log_var) + ad::square(q.mean) - q.log_var, -1.0), 0.5);
  return ad::row_sum(per_dim);
}

/// Scalar closed form, used as a reference and for reporting.
inline double diag_gaussian_kl(std::span<const double> mu_q, std::span<const double> var_q,
                               std::span<const double> mu_p, std::span<const double> var_p) {
  if (mu_q.size() != mu_p.size() || var_q.size() != mu_q.size() || var_p.size() != mu_p.size())
    throw std::invalid_argument("diag_gaussian_kl: dimension mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < mu_q.size(); ++i) {
    const double d = mu_q[i] - mu_p[i];
    kl += 0.5 * (std::log(var_p[i] / var_q[i]) + (var_q[i] + d * d) / var_p[i] - 1.0);
  }
  return kl;
}

/// Standard normal noise shaped like `like`.
inline Tensor standard_normal(const ad::Shape& shape, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor t(shape);
  for (double& v : t.values()) v = n(rng);
  return t;
}

/// mu + sigma * eps with eps ~ N(0, I); gradients reach mean and log-variance.
inline Var reparam_sample(Tape& t, const DiagGaussian& g, std::mt19937_64& rng) {
  Var eps = t.constant(standard_normal(g.mean.shape(), rng));
  return g.mean + ad::exp(ad::scale(g.log_var, 0.5)) * eps;
}

/// Elementwise Gaussian negative log-likelihood of x under N(mean, exp(log_var)).
inline Var gaussian_nll(Var x, Var mean, Var log_var) {
  Var sq = ad::square(x - mean) / ad::exp(log_var);
  return ad::scale(ad::add_scalar(log_var + sq, kLog2Pi), 0.5);
}

/// Per-row mixture NLL of scalar targets x (batch x 1) under a K-component
/// Gaussian mixture given by weight logits, means and log-variances (batch x K).
/// Weights come from a softmax, so they are always on the simplex.
inline Var gmm_nll(Var x, Var logits, Var means, Var log_vars) {
  const std::size_t k = logits.cols();
  if (means.cols() != k || log_vars.cols() != k || x.cols() != 1)
    throw ad::ShapeError("gmm_nll: inconsistent component shapes");
  Tape& t = *x.tape;
  Var ones = t.constant(Tensor::matrix(1, k, 1.0));
  Var x_rep = ad::matmul(x, ones);  // batch x K
  Var log_w = logits - ad::matmul(ad::logsumexp_rows(logits), ones);
  Var comp = log_w - gaussian_nll(x_rep, means, log_vars);
  return ad::neg(ad::logsumexp_rows(comp));
}

/// Batch mixture NLL for explicit weights/means/variances, summed over actions.
inline double gmm_nll(std::span<const double> actions, std::span<const double> weights,
                      std::span<const double> means, std::span<const double> variances) {
  if (weights.size() != means.size() || weights.size() != variances.size() || weights.empty())
    throw std::invalid_argument("gmm_nll: component arrays must be non-empty and equally sized");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw std::invalid_argument("gmm_nll: negative mixture weight");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("gmm_nll: mixture weights do not sum to 1");
  for (double v : variances)
    if (!(v > 0.0)) throw std::invalid_argument("gmm_nll: variances must be positive");
  double nll = 0.0;
  std::vector<double> terms(weights.size());
  for (double a : actions) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < weights.size(); ++k) {
      const double d = a - means[k];
      terms[k] = std::log(weights[k]) - 0.5 * (kLog2Pi + std::log(variances[k]) + d * d / variances[k]);
      mx = std::max(mx, terms[k]);
    }
    double s = 0.0;
    for (double tk : terms) s += std::exp(tk - mx);
    nll -= mx + std::log(s);
  }
  return nll;
}

/// Scalar Huber loss.
inline double huber(double r, double threshold) {
  const double a = std::abs(r);
  return a <= threshold ? 0.5 * r * r : threshold * (a - 0.5 * threshold);
}

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;

  AdamState() = default;
  AdamState(const ParameterSet& params, AdamConfig cfg) : config(cfg) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      m.emplace_back(params[i].value.shape(), 0.0);
      v.emplace_back(params[i].value.shape(), 0.0);
    }
  }
};

/// One bias-corrected Adam update from the gradients stored in the parameters.
inline void adam_step(AdamState& st, ParameterSet& params) {
  if (st.m.size() != params.size()) throw std::invalid_argument("adam_step: optimizer state does not match parameters");
  ++st.step;
  const auto& c = st.config;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(st.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = params[k];
    if (p.grad.shape() != st.m[k].shape())
      throw ad::ShapeError("adam_step: gradient shape mismatch for " + p.name);
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      double& m = st.m[k][i];
      double& v = st.v[k][i];
      m = c.beta1 * m + (1.0 - c.beta1) * g;
      v = c.beta2 * v + (1.0 - c.beta2) * g * g;
      p.value[i] -= c.lr * (m / bc1) / (std::sqrt(v / bc2) + c.eps);
    }
  }
}

}  // namespace nidm::nn
