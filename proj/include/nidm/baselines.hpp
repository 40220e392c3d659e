#pragma once

// Comparison policies trained on single-step action likelihood: a
// feed-forward MLP and an LSTM with Gaussian action heads, and a latent MLP
// with a standard-normal prior and a Gaussian-mixture action head. Also the
// factory that builds any policy kind.

#include "nidm/nidm_policy.hpp"

#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace nidm {

inline constexpr double kActionLogVarMin = -10.0;
inline constexpr double kActionLogVarMax = 4.0;

/// Mean and clamped log-variance of a (B x 2) head output.
struct GaussianAction {
  Var mean;
  Var log_var;
};

inline GaussianAction gaussian_action(Var raw) {
  return {ad::slice(raw, 0, 1), ad::clamp(ad::slice(raw, 1, 2), kActionLogVarMin, kActionLogVarMax)};
}

/// Column k of the batch's standardized actions.
inline Var action_column(Tape& t, const WindowBatch& b, std::size_t k) {
  Tensor c = Tensor::matrix(b.size, 1);
  for (std::size_t r = 0; r < b.size; ++r) c.at(r, 0) = b.step_actions.at(r, k);
  return t.constant(std::move(c));
}

inline std::vector<double> sample_gaussian_actions(const Tensor& mean, const Tensor& log_var, const Standardization& st,
                                                   std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> a(mean.rows());
  for (std::size_t r = 0; r < a.size(); ++r) {
    const double s = mean.at(r, 0) + std::exp(0.5 * log_var.at(r, 0)) * n(rng);
    a[r] = s * st.accel_std + st.accel_mean;
  }
  return a;
}

struct GmmComponents {
  Var logits;
  Var means;
  Var log_vars;
};

inline GmmComponents gmm_head(Var raw, std::size_t k) {
  return {ad::slice(raw, 0, k), ad::slice(raw, k, 2 * k),
          ad::clamp(ad::slice(raw, 2 * k, 3 * k), kActionLogVarMin, kActionLogVarMax)};
}

// ---------------------------------------------------------------------------

class MlpModel final : public PolicyModel {
 public:
  MlpModel(const ModelConfig& cfg, const Standardization& stats, std::uint64_t seed) : PolicyModel(cfg, stats) {
    std::mt19937_64 rng(seed);
    const std::size_t H = cfg.hidden;
    l0_ = nn::DenseLayer(params_, "mlp.0", kFeatureCount, H, nn::Activation::Relu, rng);
    l1_ = nn::DenseLayer(params_, "mlp.1", H, H, nn::Activation::Relu, rng);
    l2_ = nn::DenseLayer(params_, "mlp.2", H, H, nn::Activation::Relu, rng);
    l3_ = nn::DenseLayer(params_, "mlp.3", H, 2, nn::Activation::Identity, rng);
  }

  PolicyKind kind() const override { return PolicyKind::MLP; }

  GaussianAction forward(Tape& t, Var features) const {
    return gaussian_action(l3_(t, l2_(t, l1_(t, l0_(t, features)))));
  }

  LossTerms loss(Tape& t, const WindowBatch& b, double, std::mt19937_64&) const override {
    std::vector<Var> nll;
    for (std::size_t k = 0; k < b.step_features.size(); ++k) {
      GaussianAction g = forward(t, t.constant(b.step_features[k]));
      nll.push_back(nn::gaussian_nll(action_column(t, b, k), g.mean, g.log_var));
    }
    Var zero = t.constant(Tensor::scalar(0.0));
    Var l_a = ad::reduce_mean(ad::concat(nll));
    return {l_a, l_a, zero, zero};
  }

  std::unique_ptr<DrivingPolicy> make_driver() const override;

 private:
  nn::DenseLayer l0_, l1_, l2_, l3_;
};

class MlpDriver final : public DrivingPolicy {
 public:
  explicit MlpDriver(const MlpModel& m) : model_(m) {}
  std::string name() const override { return "MLP"; }
  void begin(const std::vector<std::vector<ObservedStep>>&, std::mt19937_64&) override {}
  std::vector<double> act(const std::vector<FeatureVector>& obs, std::span<const double>,
                          std::mt19937_64& rng) override {
    if (obs.empty()) return {};
    Tape t;
    GaussianAction g = model_.forward(t, t.constant(feature_tensor(obs, model_.stats())));
    return sample_gaussian_actions(g.mean.value(), g.log_var.value(), model_.stats(), rng);
  }

 private:
  const MlpModel& model_;
};

inline std::unique_ptr<DrivingPolicy> MlpModel::make_driver() const { return std::make_unique<MlpDriver>(*this); }

// ---------------------------------------------------------------------------

class LstmModel final : public PolicyModel {
 public:
  LstmModel(const ModelConfig& cfg, const Standardization& stats, std::uint64_t seed) : PolicyModel(cfg, stats) {
    std::mt19937_64 rng(seed);
    const std::size_t H = cfg.hidden;
    cell_ = nn::LstmCell(params_, "lstm.cell", kFeatureCount, H, rng);
    hidden_ = nn::DenseLayer(params_, "lstm.0", H, H, nn::Activation::Relu, rng);
    out_ = nn::DenseLayer(params_, "lstm.1", H, 2, nn::Activation::Identity, rng);
  }

  PolicyKind kind() const override { return PolicyKind::LSTM; }

  nn::LstmState zero_state(Tape& t, std::size_t batch) const { return cell_.zero_state(t, batch); }

  std::pair<GaussianAction, nn::LstmState> step(Tape& t, Var features, const nn::LstmState& s) const {
    nn::LstmState next = cell_.step(t, features, s);
    return {gaussian_action(out_(t, hidden_(t, next.hidden))), next};
  }

  LossTerms loss(Tape& t, const WindowBatch& b, double, std::mt19937_64&) const override {
    nn::LstmState s = zero_state(t, b.size);
    std::vector<Var> nll;
    for (std::size_t k = 0; k < b.step_features.size(); ++k) {
      auto [g, next] = step(t, t.constant(b.step_features[k]), s);
      s = next;
      nll.push_back(nn::gaussian_nll(action_column(t, b, k), g.mean, g.log_var));
    }
    Var zero = t.constant(Tensor::scalar(0.0));
    Var l_a = ad::reduce_mean(ad::concat(nll));
    return {l_a, l_a, zero, zero};
  }

  std::unique_ptr<DrivingPolicy> make_driver() const override;

 private:
  nn::LstmCell cell_;
  nn::DenseLayer hidden_, out_;
};

/// Warms the recurrent state on the logged history, then steps on live observations.
class LstmDriver final : public DrivingPolicy {
 public:
  explicit LstmDriver(const LstmModel& m) : model_(m) {}
  std::string name() const override { return "LSTM"; }

  void begin(const std::vector<std::vector<ObservedStep>>& histories, std::mt19937_64&) override {
    const std::size_t B = histories.size();
    const std::size_t H = model_.config().hidden;
    hidden_ = Tensor::matrix(B, H);
    cell_ = Tensor::matrix(B, H);
    if (B == 0) return;
    Tape t;
    nn::LstmState s = model_.zero_state(t, B);
    const std::size_t steps = histories.front().size();
    for (std::size_t k = 0; k < steps; ++k) {
      std::vector<FeatureVector> obs;
      for (const auto& h : histories) obs.push_back(h.at(k).features);
      s = model_.step(t, t.constant(feature_tensor(obs, model_.stats())), s).second;
    }
    hidden_ = s.hidden.value();
    cell_ = s.cell.value();
  }

  std::vector<double> act(const std::vector<FeatureVector>& obs, std::span<const double>,
                          std::mt19937_64& rng) override {
    if (obs.empty()) return {};
    Tape t;
    auto [g, next] =
        model_.step(t, t.constant(feature_tensor(obs, model_.stats())), {t.constant(hidden_), t.constant(cell_)});
    hidden_ = next.hidden.value();
    cell_ = next.cell.value();
    return sample_gaussian_actions(g.mean.value(), g.log_var.value(), model_.stats(), rng);
  }

 private:
  const LstmModel& model_;
  Tensor hidden_, cell_;
};

inline std::unique_ptr<DrivingPolicy> LstmModel::make_driver() const { return std::make_unique<LstmDriver>(*this); }

// ---------------------------------------------------------------------------

/// Encoder over the whole window gives q(z); at test time z ~ N(0, I). The
/// decoder maps (features, z) to a K-component mixture over the action.
class LatentMlpModel final : public PolicyModel {
 public:
  LatentMlpModel(const ModelConfig& cfg, const Standardization& stats, std::uint64_t seed) : PolicyModel(cfg, stats) {
    std::mt19937_64 rng(seed);
    const std::size_t H = cfg.hidden, L = cfg.latent, K = cfg.gmm_components;
    encoder_ = nn::LstmCell(params_, "latent_mlp.encoder", kFeatureCount + 1, H, rng);
    enc_out_ = nn::DenseLayer(params_, "latent_mlp.posterior", H, 2 * L, nn::Activation::Identity, rng);
    l0_ = nn::DenseLayer(params_, "latent_mlp.0", kFeatureCount + L, H, nn::Activation::Relu, rng);
    l1_ = nn::DenseLayer(params_, "latent_mlp.1", H, H, nn::Activation::Relu, rng);
    l2_ = nn::DenseLayer(params_, "latent_mlp.2", H, H, nn::Activation::Relu, rng);
    l3_ = nn::DenseLayer(params_, "latent_mlp.3", H, 3 * K, nn::Activation::Identity, rng);
  }

  PolicyKind kind() const override { return PolicyKind::LatentMLP; }

  GmmComponents decode(Tape& t, Var features, Var z) const {
    return gmm_head(l3_(t, l2_(t, l1_(t, l0_(t, ad::concat({features, z}))))), cfg_.gmm_components);
  }

  LossTerms loss(Tape& t, const WindowBatch& b, double beta, std::mt19937_64& rng) const override {
    const std::size_t S = b.step_features.size();
    nn::LstmState s = encoder_.zero_state(t, b.size);
    for (std::size_t k = 0; k < S; ++k) {
      Var a = action_column(t, b, k);
      s = encoder_.step(t, ad::concat({t.constant(b.step_features[k]), a}), s);
    }
    nn::DiagGaussian q = nn::gaussian_head(enc_out_(t, s.hidden), cfg_.latent);
    Var z = nn::reparam_sample(t, q, rng);
    std::vector<Var> nll;
    for (std::size_t k = 0; k < S; ++k) {
      GmmComponents g = decode(t, t.constant(b.step_features[k]), z);
      nll.push_back(nn::gmm_nll(action_column(t, b, k), g.logits, g.means, g.log_vars));
    }
    Var l_a = ad::reduce_mean(ad::concat(nll));
    Var kl = ad::reduce_mean(nn::standard_normal_kl(q));
    return {l_a + ad::scale(kl, beta), l_a, t.constant(Tensor::scalar(0.0)), kl};
  }

  std::unique_ptr<DrivingPolicy> make_driver() const override;

 private:
  nn::LstmCell encoder_;
  nn::DenseLayer enc_out_, l0_, l1_, l2_, l3_;
};

/// Draws an action from each row's mixture (raw acceleration units).
inline std::vector<double> sample_gmm_actions(const GmmComponents& g, const Standardization& st,
                                              std::mt19937_64& rng) {
  const Tensor& logits = g.logits.value();
  const Tensor& means = g.means.value();
  const Tensor& log_vars = g.log_vars.value();
  const std::size_t K = logits.cols();
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> out(logits.rows());
  std::vector<double> w(K);
  for (std::size_t r = 0; r < out.size(); ++r) {
    double mx = logits.at(r, 0);
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, logits.at(r, k));
    for (std::size_t k = 0; k < K; ++k) w[k] = std::exp(logits.at(r, k) - mx);
    std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
    const std::size_t k = pick(rng);
    const double s = means.at(r, k) + std::exp(0.5 * log_vars.at(r, k)) * n(rng);
    out[r] = s * st.accel_std + st.accel_mean;
  }
  return out;
}

class LatentMlpDriver final : public DrivingPolicy {
 public:
  explicit LatentMlpDriver(const LatentMlpModel& m) : model_(m) {}
  std::string name() const override { return "LatentMLP"; }

  void begin(const std::vector<std::vector<ObservedStep>>& histories, std::mt19937_64& rng) override {
    z_ = nn::standard_normal({histories.size(), model_.config().latent}, rng);
  }

  std::vector<double> act(const std::vector<FeatureVector>& obs, std::span<const double>,
                          std::mt19937_64& rng) override {
    if (obs.empty()) return {};
    if (obs.size() != z_.rows()) throw std::invalid_argument("observation count differs from the vehicles given to begin()");
    Tape t;
    GmmComponents g = model_.decode(t, t.constant(feature_tensor(obs, model_.stats())), t.constant(z_));
    return sample_gmm_actions(g, model_.stats(), rng);
  }

 private:
  const LatentMlpModel& model_;
  Tensor z_;
};

inline std::unique_ptr<DrivingPolicy> LatentMlpModel::make_driver() const {
  return std::make_unique<LatentMlpDriver>(*this);
}

// ---------------------------------------------------------------------------

inline std::unique_ptr<PolicyModel> make_model(PolicyKind kind, const ModelConfig& cfg, const Standardization& stats,
                                               std::uint64_t seed) {
  switch (kind) {
    case PolicyKind::MLP:
      return std::make_unique<MlpModel>(cfg, stats, seed);
    case PolicyKind::LSTM:
      return std::make_unique<LstmModel>(cfg, stats, seed);
    case PolicyKind::LatentMLP:
      return std::make_unique<LatentMlpModel>(cfg, stats, seed);
    case PolicyKind::CVAE:
      return std::make_unique<LatentDriverModel>(DecoderKind::Direct, cfg, stats, seed);
    case PolicyKind::NIDM:
      return std::make_unique<LatentDriverModel>(DecoderKind::Idm, cfg, stats, seed);
  }
  throw std::invalid_argument("unknown policy kind");
}

}  // namespace nidm
