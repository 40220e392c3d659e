#pragma once

// Neural IDM: history/future LSTM encoders, prior and posterior latent
// heads, a decoder from the latent to bounded IDM parameters, a recurrent
// attention head, and the differentiable closed-loop rollout. The CVAE
// baseline shares everything except the action source: its recurrent head
// emits accelerations directly.

#include "nidm/policy.hpp"

#include <array>
#include <memory>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace nidm {

enum class DecoderKind { Idm, Direct };

/// Per-step observation of the ego in rollout form: B x 1 columns. In a
/// training rollout speed and positions are live graph values, in closed-loop
/// evaluation they are constants.
struct StepInputs {
  Var speed;
  Var prev_accel;
  Var leader_gap;
  Var leader_dv;
  Var ramp_gap;
  Var ramp_dv;
  Tensor leader_present;
  Tensor ramp_present;
  Tensor ramp_dist;
};

struct RolloutResult {
  std::vector<double> accel;     // T
  std::vector<double> position;  // T + 1, relative to the start
  std::vector<double> speed;     // T + 1
  std::vector<AttentionWeights> attention;
  IdmParams theta;
  std::vector<double> z;
};

/// Batch rollout graph nodes (B rows each).
struct RolloutGraph {
  std::vector<Var> accel;     // T entries, B x 1
  std::vector<Var> position;  // T entries, B x 1: position after each step
  std::vector<Var> speed;     // T entries, B x 1
  std::vector<Var> attention; // T entries, B x 2 (NIDM only)
  std::optional<Var> theta;   // B x 5 (NIDM only)
  Var z;
};

struct LatentSample {
  Var z;
  nn::DiagGaussian dist;
};

enum class LatentMode { Posterior, Prior };

class LatentDriverModel final : public PolicyModel {
 public:
  LatentDriverModel(DecoderKind decoder, const ModelConfig& cfg, const Standardization& stats, std::uint64_t seed)
      : PolicyModel(cfg, stats), decoder_(decoder) {
    std::mt19937_64 rng(seed);
    const std::size_t F = kFeatureCount, H = cfg.hidden, L = cfg.latent;
    history_enc_ = nn::LstmCell(params_, "history_enc", F + 1, H, rng);
    future_enc_ = nn::LstmCell(params_, "future_enc", F + 2, H, rng);
    post_hidden_ = nn::DenseLayer(params_, "posterior.0", 2 * H, H, nn::Activation::Tanh, rng);
    post_out_ = nn::DenseLayer(params_, "posterior.1", H, 2 * L, nn::Activation::Identity, rng);
    prior_hidden_ = nn::DenseLayer(params_, "prior.0", H, H, nn::Activation::Tanh, rng);
    prior_out_ = nn::DenseLayer(params_, "prior.1", H, 2 * L, nn::Activation::Identity, rng);
    if (decoder_ == DecoderKind::Idm) {
      idm_hidden_ = nn::DenseLayer(params_, "idm_decoder.0", L, H, nn::Activation::Tanh, rng);
      idm_out_ = nn::DenseLayer(params_, "idm_decoder.1", H, 5, nn::Activation::Identity, rng);
    }
    policy_cell_ = nn::LstmCell(params_, "policy_cell", F + L, H, rng);
    head_ = nn::DenseLayer(params_, "policy_head", H, decoder_ == DecoderKind::Idm ? 2 : 1, nn::Activation::Identity,
                           rng);
    const auto ranges = cfg.bounds.idm_ranges();
    for (std::size_t k = 0; k < 5; ++k) bounds_[k] = make_bounds(ranges[k]);
  }

  PolicyKind kind() const override { return decoder_ == DecoderKind::Idm ? PolicyKind::NIDM : PolicyKind::CVAE; }
  DecoderKind decoder() const { return decoder_; }

  /// Final hidden state of the history encoder over H steps of (features, action).
  Var encode_history(Tape& t, const std::vector<Tensor>& history) const {
    if (history.size() != cfg_.history_steps)
      throw std::invalid_argument("history has " + std::to_string(history.size()) + " steps, expected " +
                                  std::to_string(cfg_.history_steps));
    return encode(t, history_enc_, history);
  }

  Var encode_future(Tape& t, const std::vector<Tensor>& future) const {
    if (future.size() != cfg_.horizon_steps)
      throw std::invalid_argument("future has " + std::to_string(future.size()) + " steps, expected " +
                                  std::to_string(cfg_.horizon_steps));
    return encode(t, future_enc_, future);
  }

  nn::DiagGaussian prior(Var h_x) const {
    Tape& t = *h_x.tape;
    return nn::gaussian_head(prior_out_(t, prior_hidden_(t, h_x)), cfg_.latent);
  }

  nn::DiagGaussian posterior(Var h_x, Var h_y) const {
    Tape& t = *h_x.tape;
    return nn::gaussian_head(post_out_(t, post_hidden_(t, ad::concat({h_x, h_y}))), cfg_.latent);
  }

  LatentSample infer_latent(Var h_x, std::optional<Var> h_y, LatentMode mode, std::mt19937_64& rng) const {
    if (mode == LatentMode::Posterior && !h_y) throw std::invalid_argument("posterior inference needs the future context");
    LatentSample s;
    s.dist = mode == LatentMode::Posterior ? posterior(h_x, *h_y) : prior(h_x);
    s.z = nn::reparam_sample(*h_x.tape, s.dist, rng);
    return s;
  }

  /// Raw decoder scores (B x 5) in IdmParams field order.
  Var idm_scores(Var z) const {
    require_idm();
    Tape& t = *z.tape;
    return idm_out_(t, idm_hidden_(t, z));
  }

  /// Logistic squashing of raw scores into the disposition bounds (B x 5).
  Var squash(Var scores) const {
    std::vector<Var> cols;
    for (std::size_t k = 0; k < 5; ++k) {
      const ParamBounds& b = bounds_[k];
      Var s = ad::sigmoid(ad::scale(ad::slice(scores, k, k + 1), b.slope));
      cols.push_back(ad::add_scalar(ad::scale(s, b.agg - b.tim), b.tim));
    }
    return ad::concat(cols);
  }

  Var decode_theta(Var z) const { return squash(idm_scores(z)); }

  IdmParams decode_idm_params(std::span<const double> z) const {
    Tape t;
    Var theta = decode_theta(t.constant(Tensor({1, z.size()}, std::vector<double>(z.begin(), z.end()))));
    return theta_row(theta.value(), 0);
  }

  static IdmParams theta_row(const Tensor& theta, std::size_t r) {
    return {theta.at(r, 0), theta.at(r, 1), theta.at(r, 2), theta.at(r, 3), theta.at(r, 4)};
  }

  /// Standardized per-step features from live rollout values (B x F).
  Var step_features(Tape& t, const StepInputs& in) const {
    const Standardization& st = stats_;
    auto z = [&](Var x, std::size_t j, const Tensor* mask) {
      Var s = ad::scale(ad::add_scalar(x, -st.feature_mean[j]), 1.0 / st.feature_std[j]);
      return mask ? s * t.constant(*mask) : s;
    };
    auto zc = [&](const Tensor& x, std::size_t j, const Tensor* mask) { return z(t.constant(x), j, mask); };
    return ad::concat({z(in.speed, kSpeed, nullptr), z(in.prev_accel, kPrevAccel, nullptr),
                       zc(in.leader_present, kLeaderPresent, nullptr), z(in.leader_dv, kLeaderDv, &in.leader_present),
                       z(in.leader_gap, kLeaderGap, &in.leader_present), zc(in.ramp_present, kRampPresent, nullptr),
                       z(in.ramp_dv, kRampDv, &in.ramp_present), z(in.ramp_gap, kRampGap, &in.ramp_present),
                       zc(in.ramp_dist, kRampMergeDist, &in.ramp_present)});
  }

  /// Batched IDM with the ReLU gap and the deceleration floor. theta is B x 5,
  /// `interaction` masks the leader term (0 gives the free-road formula).
  Var idm(Var theta, Var v, Var dv, Var gap, const Tensor& interaction) const {
    Tape& t = *v.tape;
    Var v_des = ad::slice(theta, 0, 1);
    Var d_min = ad::slice(theta, 1, 2);
    Var T_des = ad::slice(theta, 2, 3);
    Var a_max = ad::slice(theta, 3, 4);
    Var b_max = ad::slice(theta, 4, 5);
    Var dynamic = ad::relu(T_des * v + v * dv / ad::scale(ad::sqrt(a_max * b_max), 2.0));
    Var ratio = (d_min + dynamic) / ad::clamp_below(gap, cfg_.gap_guard);
    Var inner = ad::add_scalar(ad::neg(ad::pow4(v / v_des)) - ad::square(ratio) * t.constant(interaction), 1.0);
    return ad::clamp_below(a_max * inner, cfg_.accel_floor);
  }

  struct PolicyStep {
    Var accel;
    std::optional<Var> attention;
    nn::LstmState state;
  };

  /// One closed-loop policy step: attention (or direct action) from the
  /// recurrent head over features and z, then the resulting acceleration.
  PolicyStep policy_step(Tape& t, const StepInputs& in, Var z, std::optional<Var> theta,
                         const nn::LstmState& state) const {
    Var feat = step_features(t, in);
    nn::LstmState next = policy_cell_.step(t, ad::concat({feat, z}), state);
    Var out = head_(t, next.hidden);
    PolicyStep s{Var{}, std::nullopt, next};
    if (decoder_ == DecoderKind::Idm) {
      if (!theta) throw std::invalid_argument("IDM decoder step needs theta");
      Var w = ad::softmax(out);
      const std::size_t B = in.speed.rows();
      Var f_l = idm(*theta, in.speed, in.leader_dv, in.leader_gap, in.leader_present);
      Var f_m = idm(*theta, in.speed, in.ramp_dv, in.ramp_gap, Tensor::matrix(B, 1, 1.0));
      Tensor absent = in.ramp_present;
      for (double& x : absent.values()) x = 1.0 - x;
      // without a relevant ramp vehicle the merge branch falls back to the leader branch
      Var f_m_eff = f_m * t.constant(in.ramp_present) + f_l * t.constant(absent);
      s.accel = ad::slice(w, 0, 1) * f_l + ad::slice(w, 1, 2) * f_m_eff;
      s.attention = w;
    } else {
      Var a = ad::add_scalar(ad::scale(out, stats_.accel_std), stats_.accel_mean);
      s.accel = ad::clamp(a, cfg_.accel_floor, cfg_.accel_cap);
    }
    return s;
  }

  /// Differentiable rollout of the ego against logged neighbours. Positions
  /// are relative to the ego's start.
  RolloutGraph rollout(Tape& t, const WindowBatch& b, Var z, std::size_t steps) const {
    if (steps > b.playback.size())
      throw std::invalid_argument("playback holds " + std::to_string(b.playback.size()) + " steps, rollout needs " +
                                  std::to_string(steps));
    RolloutGraph g;
    g.z = z;
    if (decoder_ == DecoderKind::Idm) g.theta = decode_theta(z);
    const std::size_t B = b.size;
    Var x = t.constant(Tensor::matrix(B, 1));
    Var v = t.constant(b.v0);
    Var a_prev = t.constant(b.a_prev0);
    nn::LstmState state = policy_cell_.zero_state(t, B);
    const double len = cfg_.vehicle_length;
    for (std::size_t i = 0; i < steps; ++i) {
      const PlaybackStep& p = b.playback[i];
      StepInputs in;
      in.speed = v;
      in.prev_accel = a_prev;
      in.leader_gap = ad::add_scalar(t.constant(p.leader_x) - x, -len);
      in.leader_dv = v - t.constant(p.leader_v);
      in.ramp_gap = ad::add_scalar(t.constant(p.ramp_x) - x, -len);
      in.ramp_dv = v - t.constant(p.ramp_v);
      in.leader_present = p.leader_present;
      in.ramp_present = p.ramp_present;
      in.ramp_dist = p.ramp_dist;
      PolicyStep s = policy_step(t, in, z, g.theta, state);
      state = s.state;
      Var x_next = ad::advance_position(x, v, s.accel, cfg_.dt);
      v = ad::relu(v + ad::scale(s.accel, cfg_.dt));
      x = x_next;
      a_prev = s.accel;
      g.accel.push_back(s.accel);
      g.position.push_back(x);
      g.speed.push_back(v);
      if (s.attention) g.attention.push_back(*s.attention);
    }
    return g;
  }

  /// Weighted loss: Huber on standardized action and position residuals plus
  /// beta times the posterior-to-prior KL.
  LossTerms rollout_loss(Tape& t, const RolloutGraph& g, const WindowBatch& b, const nn::DiagGaussian& q,
                         const nn::DiagGaussian& p, double beta) const {
    const std::size_t T = g.accel.size();
    if (T != b.target_accel.cols() || T != b.target_pos.cols())
      throw std::invalid_argument("rollout length " + std::to_string(T) + " does not match targets of length " +
                                  std::to_string(b.target_accel.cols()));
    LossTerms terms;
    Var kl = ad::reduce_mean(nn::diag_gaussian_kl(q, p));
    if (T == 0) {
      terms.l_a = t.constant(Tensor::scalar(0.0));
      terms.l_x = t.constant(Tensor::scalar(0.0));
    } else {
      Var a_res = ad::scale(ad::concat(g.accel) - t.constant(b.target_accel), 1.0 / stats_.accel_std);
      Var x_res = ad::scale(ad::concat(g.position) - t.constant(b.target_pos), 1.0 / stats_.disp_std);
      terms.l_a = ad::reduce_mean(ad::huber(a_res, cfg_.huber_threshold));
      terms.l_x = ad::reduce_mean(ad::huber(x_res, cfg_.huber_threshold));
    }
    terms.l_kl = kl;
    terms.total = terms.l_a + terms.l_x + ad::scale(kl, beta);
    return terms;
  }

  LossTerms loss(Tape& t, const WindowBatch& b, double beta, std::mt19937_64& rng) const override {
    Var h_x = encode_history(t, b.history);
    Var h_y = encode_future(t, b.future);
    nn::DiagGaussian q = posterior(h_x, h_y);
    nn::DiagGaussian p = prior(h_x);
    Var z = nn::reparam_sample(t, q, rng);
    RolloutGraph g = rollout(t, b, z, b.horizon_steps);
    return rollout_loss(t, g, b, q, p, beta);
  }

  /// n prior samples for a single window, each rolled out over the horizon.
  std::vector<RolloutResult> predict(const TrainingWindow& w, std::size_t n, std::mt19937_64& rng) const {
    std::vector<const TrainingWindow*> rep(n, &w);
    if (n == 0) return {};
    const WindowBatch b = make_batch(rep, stats_, cfg_.history_steps, cfg_.horizon_steps);
    Tape t;
    Var h_x = encode_history(t, b.history);
    LatentSample s = infer_latent(h_x, std::nullopt, LatentMode::Prior, rng);
    RolloutGraph g = rollout(t, b, s.z, b.horizon_steps);
    std::vector<RolloutResult> out(n);
    for (std::size_t r = 0; r < n; ++r) {
      RolloutResult& res = out[r];
      res.position.push_back(0.0);
      res.speed.push_back(b.v0.at(r, 0));
      for (std::size_t i = 0; i < g.accel.size(); ++i) {
        res.accel.push_back(g.accel[i].value().at(r, 0));
        res.position.push_back(g.position[i].value().at(r, 0));
        res.speed.push_back(g.speed[i].value().at(r, 0));
        if (!g.attention.empty())
          res.attention.push_back({g.attention[i].value().at(r, 0), g.attention[i].value().at(r, 1)});
      }
      if (g.theta) res.theta = theta_row(g.theta->value(), r);
      for (std::size_t k = 0; k < cfg_.latent; ++k) res.z.push_back(s.z.value().at(r, k));
    }
    return out;
  }

  /// Prior mean of z for each window (B x L).
  Tensor prior_mean(const std::vector<const TrainingWindow*>& windows) const {
    const WindowBatch b = make_batch(windows, stats_, cfg_.history_steps, cfg_.horizon_steps);
    Tape t;
    return prior(encode_history(t, b.history)).mean.value();
  }

  std::unique_ptr<DrivingPolicy> make_driver() const override;

 private:
  void require_idm() const {
    if (decoder_ != DecoderKind::Idm) throw std::logic_error("the direct-action decoder has no IDM parameters");
  }

  static Var encode(Tape& t, const nn::LstmCell& cell, const std::vector<Tensor>& seq) {
    std::vector<Var> xs;
    xs.reserve(seq.size());
    for (const Tensor& x : seq) xs.push_back(t.constant(x));
    return cell.encode(t, xs);
  }

  DecoderKind decoder_;
  nn::LstmCell history_enc_, future_enc_, policy_cell_;
  nn::DenseLayer post_hidden_, post_out_, prior_hidden_, prior_out_, idm_hidden_, idm_out_, head_;
  std::array<ParamBounds, 5> bounds_{};
};

/// Closed-loop driver: one prior latent per controlled vehicle, fixed for the
/// rollout, with the recurrent head stepping on live observations.
class LatentDriver final : public DrivingPolicy {
 public:
  explicit LatentDriver(const LatentDriverModel& m) : model_(m) {}

  std::string name() const override { return to_string(model_.kind()); }

  void begin(const std::vector<std::vector<ObservedStep>>& histories, std::mt19937_64& rng) override {
    const std::size_t B = histories.size();
    const ModelConfig& c = model_.config();
    if (B == 0) return;
    Tape t;
    Var h_x = model_.encode_history(t, history_tensors(histories, model_.stats(), c.history_steps));
    LatentSample s = model_.infer_latent(h_x, std::nullopt, LatentMode::Prior, rng);
    z_ = s.z.value();
    if (model_.decoder() == DecoderKind::Idm) theta_ = model_.decode_theta(s.z).value();
    hidden_ = Tensor::matrix(B, c.hidden);
    cell_ = Tensor::matrix(B, c.hidden);
    last_attention_.assign(B, AttentionWeights{});
  }

  std::vector<double> act(const std::vector<FeatureVector>& obs, std::span<const double>, std::mt19937_64&) override {
    const std::size_t B = obs.size();
    if (B == 0) return {};
    if (B != z_.rows()) throw std::invalid_argument("observation count differs from the vehicles given to begin()");
    Tape t;
    auto col = [&](std::size_t j) {
      Tensor c = Tensor::matrix(B, 1);
      for (std::size_t r = 0; r < B; ++r) c.at(r, 0) = obs[r].values[j];
      return c;
    };
    StepInputs in;
    in.speed = t.constant(col(kSpeed));
    in.prev_accel = t.constant(col(kPrevAccel));
    in.leader_present = col(kLeaderPresent);
    in.ramp_present = col(kRampPresent);
    in.ramp_dist = col(kRampMergeDist);
    Tensor lg = col(kLeaderGap), rg = col(kRampGap);
    for (std::size_t r = 0; r < B; ++r) {
      if (!obs[r].leader_present()) lg.at(r, 0) = kAbsentOffset;
      if (!obs[r].ramp_present()) rg.at(r, 0) = kAbsentOffset;
    }
    in.leader_gap = t.constant(lg);
    in.leader_dv = t.constant(col(kLeaderDv));
    in.ramp_gap = t.constant(rg);
    in.ramp_dv = t.constant(col(kRampDv));
    std::optional<Var> theta;
    if (!theta_.empty()) theta = t.constant(theta_);
    auto step = model_.policy_step(t, in, t.constant(z_), theta, {t.constant(hidden_), t.constant(cell_)});
    hidden_ = step.state.hidden.value();
    cell_ = step.state.cell.value();
    std::vector<double> a(B);
    for (std::size_t r = 0; r < B; ++r) {
      a[r] = step.accel.value().at(r, 0);
      if (step.attention) last_attention_[r] = {step.attention->value().at(r, 0), step.attention->value().at(r, 1)};
    }
    return a;
  }

  const Tensor& theta() const { return theta_; }
  const std::vector<AttentionWeights>& last_attention() const { return last_attention_; }

 private:
  const LatentDriverModel& model_;
  Tensor z_, theta_, hidden_, cell_;
  std::vector<AttentionWeights> last_attention_;
};

inline std::unique_ptr<DrivingPolicy> LatentDriverModel::make_driver() const {
  return std::make_unique<LatentDriver>(*this);
}

}  // namespace nidm
