#pragma once

// Pieces shared by every learned policy: the policy-kind tag, model
// configuration, mini-batch assembly from training windows, the driving
// interface used by closed-loop evaluation, and the Adam training loop.

#include "nidm/dataset.hpp"
#include "nidm/neural_core.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nidm {

using ad::ParameterSet;
using ad::Tape;
using ad::Tensor;
using ad::Var;

enum class PolicyKind { MLP, LSTM, LatentMLP, CVAE, NIDM };

inline constexpr std::array<PolicyKind, 5> kAllPolicyKinds = {PolicyKind::MLP, PolicyKind::LSTM, PolicyKind::LatentMLP,
                                                             PolicyKind::CVAE, PolicyKind::NIDM};

inline const char* to_string(PolicyKind k) {
  switch (k) {
    case PolicyKind::MLP:
      return "MLP";
    case PolicyKind::LSTM:
      return "LSTM";
    case PolicyKind::LatentMLP:
      return "LatentMLP";
    case PolicyKind::CVAE:
      return "CVAE";
    case PolicyKind::NIDM:
      return "NIDM";
  }
  return "?";
}

/// Case-insensitive; accepts "latent-mlp" and "latent_mlp" as well.
inline PolicyKind parse_policy_kind(std::string s) {
  std::string k;
  for (char c : s)
    if (c != '-' && c != '_') k.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  if (k == "mlp") return PolicyKind::MLP;
  if (k == "lstm") return PolicyKind::LSTM;
  if (k == "latentmlp") return PolicyKind::LatentMLP;
  if (k == "cvae") return PolicyKind::CVAE;
  if (k == "nidm") return PolicyKind::NIDM;
  throw std::invalid_argument("unknown policy kind '" + s + "'");
}

struct ModelConfig {
  std::size_t hidden = 64;
  std::size_t latent = 6;
  std::size_t gmm_components = 3;
  std::size_t history_steps = 30;
  std::size_t horizon_steps = 50;
  double dt = 0.1;
  double vehicle_length = 4.0;
  double accel_floor = kDefaultAccelFloor;
  double accel_cap = 4.0;
  double huber_threshold = 1.0;
  double gap_guard = 0.1;  // smallest headway fed to the IDM layer
  DispositionBounds bounds;

  void validate() const {
    if (hidden == 0 || latent == 0 || gmm_components == 0) throw std::invalid_argument("network widths must be positive");
    if (history_steps == 0) throw std::invalid_argument("history length must be positive");
    if (!(dt > 0.0)) throw std::invalid_argument("time step must be positive");
    if (!(accel_cap > accel_floor)) throw std::invalid_argument("acceleration envelope is empty");
    if (!(gap_guard > 0.0)) throw std::invalid_argument("gap guard must be positive");
  }
};

inline ModelConfig model_config_for(const Dataset& ds) {
  ModelConfig m;
  m.history_steps = ds.config.history_steps;
  m.horizon_steps = ds.config.horizon_steps;
  m.dt = ds.dt;
  m.vehicle_length = ds.vehicle_length;
  return m;
}

// ---------------------------------------------------------------------------
// batches

/// Column tensors (B x 1) of logged neighbour data for one horizon step.
struct PlaybackStep {
  Tensor leader_present, leader_x, leader_v;
  Tensor ramp_present, ramp_x, ramp_v, ramp_dist;
};

struct WindowBatch {
  std::size_t size = 0;
  std::size_t history_steps = 0;
  std::size_t horizon_steps = 0;
  std::vector<Tensor> history;        // B x (F + 1): features, action
  std::vector<Tensor> future;         // B x (F + 2): features, action, displacement
  std::vector<Tensor> step_features;  // every window step, B x F standardized
  Tensor step_actions;                // B x (H + T) standardized actions
  Tensor v0, a_prev0;                 // B x 1 at the rollout start
  std::vector<PlaybackStep> playback;
  Tensor target_accel;  // B x T raw
  Tensor target_pos;    // B x T, position at step i + 1 relative to the rollout start
  std::vector<double> psi;
};

inline WindowBatch make_batch(std::span<const TrainingWindow* const> windows, const Standardization& st,
                              std::size_t history_steps, std::size_t horizon_steps) {
  if (windows.empty()) throw std::invalid_argument("empty batch");
  const std::size_t B = windows.size();
  const std::size_t H = history_steps;
  const std::size_t T = horizon_steps;
  const std::size_t F = kFeatureCount;
  for (const auto* w : windows)
    if (w->features.size() != H + T || w->playback.size() != T)
      throw std::invalid_argument("window length " + std::to_string(w->features.size()) + " does not match " +
                                  std::to_string(H) + " + " + std::to_string(T));
  WindowBatch b;
  b.size = B;
  b.history_steps = H;
  b.horizon_steps = T;
  b.step_actions = Tensor::matrix(B, H + T);
  for (std::size_t k = 0; k < H + T; ++k) {
    Tensor feat = Tensor::matrix(B, F);
    Tensor seq = Tensor::matrix(B, k < H ? F + 1 : F + 2);
    for (std::size_t r = 0; r < B; ++r) {
      const TrainingWindow& w = *windows[r];
      const auto z = st.standardize(w.features[k]);
      const double za = st.standardize_accel(w.accel[k]);
      for (std::size_t j = 0; j < F; ++j) {
        feat.at(r, j) = z[j];
        seq.at(r, j) = z[j];
      }
      seq.at(r, F) = za;
      if (k >= H) seq.at(r, F + 1) = st.standardize_disp(w.position[k] - w.position[H]);
      b.step_actions.at(r, k) = za;
    }
    b.step_features.push_back(std::move(feat));
    (k < H ? b.history : b.future).push_back(std::move(seq));
  }
  b.v0 = Tensor::matrix(B, 1);
  b.a_prev0 = Tensor::matrix(B, 1);
  b.target_accel = Tensor::matrix(B, T);
  b.target_pos = Tensor::matrix(B, T);
  for (std::size_t r = 0; r < B; ++r) {
    const TrainingWindow& w = *windows[r];
    b.v0.at(r, 0) = w.speed[H];
    b.a_prev0.at(r, 0) = w.accel[H - 1];
    for (std::size_t i = 0; i < T; ++i) {
      b.target_accel.at(r, i) = w.accel[H + i];
      b.target_pos.at(r, i) = w.position[H + i + 1] - w.position[H];
    }
    b.psi.push_back(w.psi);
  }
  for (std::size_t i = 0; i < T; ++i) {
    PlaybackStep p;
    auto col = [&](auto member) {
      Tensor t = Tensor::matrix(B, 1);
      for (std::size_t r = 0; r < B; ++r) t.at(r, 0) = (windows[r]->playback.*member)[i];
      return t;
    };
    p.leader_present = col(&Playback::leader_present);
    p.leader_x = col(&Playback::leader_x);
    p.leader_v = col(&Playback::leader_v);
    p.ramp_present = col(&Playback::ramp_present);
    p.ramp_x = col(&Playback::ramp_x);
    p.ramp_v = col(&Playback::ramp_v);
    p.ramp_dist = col(&Playback::ramp_dist);
    b.playback.push_back(std::move(p));
  }
  return b;
}

inline WindowBatch make_batch(const std::vector<TrainingWindow>& windows, const Standardization& st,
                              std::size_t history_steps, std::size_t horizon_steps) {
  std::vector<const TrainingWindow*> ptrs;
  for (const auto& w : windows) ptrs.push_back(&w);
  return make_batch(std::span<const TrainingWindow* const>(ptrs), st, history_steps, horizon_steps);
}

/// Standardized history rows (features, action) of one vehicle, as consumed
/// by the history encoders.
struct ObservedStep {
  FeatureVector features;
  double accel = 0.0;
};

/// Stacks per-vehicle histories into H tensors of shape B x (F + 1).
inline std::vector<Tensor> history_tensors(const std::vector<std::vector<ObservedStep>>& histories,
                                           const Standardization& st, std::size_t history_steps) {
  const std::size_t B = histories.size();
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < history_steps; ++k) {
    Tensor t = Tensor::matrix(B, kFeatureCount + 1);
    for (std::size_t r = 0; r < B; ++r) {
      if (histories[r].size() != history_steps)
        throw std::invalid_argument("history of vehicle " + std::to_string(r) + " has " +
                                    std::to_string(histories[r].size()) + " steps, expected " +
                                    std::to_string(history_steps));
      const auto z = st.standardize(histories[r][k].features);
      for (std::size_t j = 0; j < kFeatureCount; ++j) t.at(r, j) = z[j];
      t.at(r, kFeatureCount) = st.standardize_accel(histories[r][k].accel);
    }
    out.push_back(std::move(t));
  }
  return out;
}

inline Tensor feature_tensor(const std::vector<FeatureVector>& obs, const Standardization& st) {
  Tensor t = Tensor::matrix(obs.size(), kFeatureCount);
  for (std::size_t r = 0; r < obs.size(); ++r) {
    const auto z = st.standardize(obs[r]);
    for (std::size_t j = 0; j < kFeatureCount; ++j) t.at(r, j) = z[j];
  }
  return t;
}

// ---------------------------------------------------------------------------
// driving interface

/// A policy controlling a fixed set of vehicles in closed loop. begin()
/// receives each vehicle's logged history; act() then returns one
/// acceleration per vehicle per step. rule_accel carries the simulator's own
/// accelerations for the same vehicles (used only by the passthrough policy).
class DrivingPolicy {
 public:
  virtual ~DrivingPolicy() = default;
  virtual std::string name() const = 0;
  virtual void begin(const std::vector<std::vector<ObservedStep>>& histories, std::mt19937_64& rng) = 0;
  virtual std::vector<double> act(const std::vector<FeatureVector>& obs, std::span<const double> rule_accel,
                                  std::mt19937_64& rng) = 0;
};

/// Replays the simulator's rule-based accelerations.
class GroundTruthPolicy final : public DrivingPolicy {
 public:
  std::string name() const override { return "GroundTruth"; }
  void begin(const std::vector<std::vector<ObservedStep>>&, std::mt19937_64&) override {}
  std::vector<double> act(const std::vector<FeatureVector>&, std::span<const double> rule_accel,
                          std::mt19937_64&) override {
    return {rule_accel.begin(), rule_accel.end()};
  }
};

// ---------------------------------------------------------------------------
// models and training

struct LossTerms {
  Var total;
  Var l_a;
  Var l_x;
  Var l_kl;
};

class PolicyModel {
 public:
  PolicyModel(const ModelConfig& cfg, const Standardization& stats) : cfg_(cfg), stats_(stats) { cfg_.validate(); }
  PolicyModel(const PolicyModel&) = delete;
  PolicyModel& operator=(const PolicyModel&) = delete;
  virtual ~PolicyModel() = default;

  virtual PolicyKind kind() const = 0;
  /// Training objective on a batch. Components a model lacks are zero.
  virtual LossTerms loss(Tape& t, const WindowBatch& batch, double beta, std::mt19937_64& rng) const = 0;
  virtual std::unique_ptr<DrivingPolicy> make_driver() const = 0;

  const ModelConfig& config() const { return cfg_; }
  const Standardization& stats() const { return stats_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

 protected:
  ModelConfig cfg_;
  Standardization stats_;
  ParameterSet params_;
};

struct TrainConfig {
  double lr = 1e-3;
  double beta = 0.02;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  std::uint64_t seed = 1;
  std::size_t beta_warmup_iters = 0;  // linear KL-weight ramp; 0 disables it
  double grad_clip = 0.0;             // global gradient-norm clip; 0 disables it

  void validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("learning rate must be positive");
    if (!(beta >= 0.0)) throw std::invalid_argument("KL weight must be non-negative");
    if (epochs == 0 || batch_size == 0) throw std::invalid_argument("epochs and batch size must be positive");
    if (!(grad_clip >= 0.0)) throw std::invalid_argument("gradient clip must be non-negative");
  }
};

struct LossRecord {
  std::size_t iter = 0;
  double l_a = 0.0;
  double l_x = 0.0;
  double l_kl = 0.0;
  double total = 0.0;
  bool validation = false;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::size_t iter, std::uint64_t batch_seed)
      : std::runtime_error(what), iteration(iter), batch_seed(batch_seed) {}
  std::size_t iteration;
  std::uint64_t batch_seed;
};

/// Trailing moving average over `window` records.
inline std::vector<double> smooth(const std::vector<double>& xs, std::size_t window) {
  std::vector<double> out(xs.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    acc += xs[i];
    if (i >= window) acc -= xs[i - window];
    out[i] = acc / static_cast<double>(std::min(i + 1, window));
  }
  return out;
}

inline std::vector<double> total_series(const std::vector<LossRecord>& history, bool validation) {
  std::vector<double> out;
  for (const auto& r : history)
    if (r.validation == validation) out.push_back(r.total);
  return out;
}

/// Mini-batch Adam on the model's loss. Each iteration also evaluates one
/// validation batch (rotating through the validation windows).
inline std::vector<LossRecord> train_model(PolicyModel& model, const Dataset& ds, const TrainConfig& cfg,
                                           const std::function<void(const LossRecord&)>& on_record = {}) {
  cfg.validate();
  if (ds.train.empty() || ds.val.empty()) throw std::invalid_argument("training needs both dataset splits");
  const ModelConfig& mc = model.config();
  nn::AdamState adam(model.params(), nn::AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
  std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, seed_stream::kTraining, 0));
  std::vector<const TrainingWindow*> train_ptrs, val_ptrs;
  for (const auto& w : ds.train) train_ptrs.push_back(&w);
  for (const auto& w : ds.val) val_ptrs.push_back(&w);
  std::shuffle(val_ptrs.begin(), val_ptrs.end(), shuffle_rng);
  std::vector<LossRecord> history;
  std::size_t iter = 0;
  std::size_t val_cursor = 0;

  auto record = [&](const LossTerms& terms, bool validation) {
    LossRecord r{iter, terms.l_a.item(), terms.l_x.item(), terms.l_kl.item(), terms.total.item(), validation};
    history.push_back(r);
    if (on_record) on_record(r);
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(train_ptrs.begin(), train_ptrs.end(), shuffle_rng);
    for (std::size_t begin = 0; begin < train_ptrs.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(begin + cfg.batch_size, train_ptrs.size());
      const std::uint64_t batch_seed = derive_seed(cfg.seed, seed_stream::kTraining, iter + 1);
      const double beta = cfg.beta_warmup_iters > 0
                              ? cfg.beta * std::min(1.0, static_cast<double>(iter + 1) /
                                                             static_cast<double>(cfg.beta_warmup_iters))
                              : cfg.beta;
      const WindowBatch batch = make_batch(std::span(train_ptrs).subspan(begin, end - begin), model.stats(),
                                           mc.history_steps, mc.horizon_steps);
      try {
        Tape tape;
        std::mt19937_64 rng(batch_seed);
        LossTerms terms = model.loss(tape, batch, beta, rng);
        model.params().zero_grad();
        tape.backward(terms.total);
        double norm2 = 0.0;
        for (std::size_t k = 0; k < model.params().size(); ++k)
          for (double g : model.params()[k].grad.values()) norm2 += g * g;
        if (!std::isfinite(norm2)) throw ad::NonFiniteError("non-finite gradient");
        if (cfg.grad_clip > 0.0 && std::sqrt(norm2) > cfg.grad_clip) {
          const double s = cfg.grad_clip / std::sqrt(norm2);
          for (std::size_t k = 0; k < model.params().size(); ++k)
            for (double& g : model.params()[k].grad.values()) g *= s;
        }
        nn::adam_step(adam, model.params());
        record(terms, false);

        const std::size_t vb = std::min(cfg.batch_size, val_ptrs.size());
        std::vector<const TrainingWindow*> vsel;
        for (std::size_t k = 0; k < vb; ++k) vsel.push_back(val_ptrs[(val_cursor + k) % val_ptrs.size()]);
        val_cursor = (val_cursor + vb) % val_ptrs.size();
        const WindowBatch vbatch = make_batch(vsel, model.stats(), mc.history_steps, mc.horizon_steps);
        Tape vtape;
        std::mt19937_64 vrng(derive_seed(cfg.seed, seed_stream::kTraining, ~iter));
        record(model.loss(vtape, vbatch, beta, vrng), true);
      } catch (const ad::NonFiniteError& e) {
        throw DivergenceError("training diverged at iteration " + std::to_string(iter) + " (batch seed " +
                                  std::to_string(batch_seed) + "): " + e.what(),
                              iter, batch_seed);
      }
      ++iter;
    }
  }
  return history;
}

}  // namespace nidm
