#pragma once

// Closed-loop evaluation: after a ground-truth warmup every main-lane vehicle
// is driven by one shared policy while the ramp vehicle keeps its rule-based
// behaviour. Metrics are RWSE curves, histogram KL against ground truth and
// collision rates.

#include "nidm/parallel.hpp"
#include "nidm/policy.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nidm {

struct EvalProtocol {
  double episode_duration = 10.0;
  double warmup = 3.0;
  std::size_t m_scenes = 30;
  std::size_t n_traces = 5;
  std::uint64_t seed = 2024;
  double accel_floor = kDefaultAccelFloor;
  double accel_cap = 4.0;

  void validate() const {
    if (!(warmup > 0.0 && warmup < episode_duration)) throw std::invalid_argument("warmup must be shorter than the episode");
    if (m_scenes == 0 || n_traces == 0) throw std::invalid_argument("scene and trace counts must be positive");
    if (!(accel_cap > accel_floor)) throw std::invalid_argument("acceleration envelope is empty");
  }
};

/// Joint states of one closed-loop run; states[k] is the snapshot at step k
/// (k = 0 .. steps), with a = acceleration applied from that snapshot.
struct RolloutLog {
  std::size_t scene = 0;
  std::size_t trace = 0;
  std::size_t warmup_steps = 0;
  double vehicle_length = 4.0;
  std::vector<std::size_t> controlled;
  std::vector<std::vector<VehicleState>> states;
};

inline std::vector<Scene> evaluation_scenes(const EvalProtocol& p, const ScenarioConfig& cfg) {
  std::vector<Scene> scenes;
  for (std::size_t s = 0; s < p.m_scenes; ++s)
    scenes.push_back(populate_scene(derive_seed(p.seed, seed_stream::kEvalScene, s), cfg));
  return scenes;
}

inline std::uint64_t trace_seed(const EvalProtocol& p, std::size_t scene, std::size_t trace) {
  return derive_seed(derive_seed(p.seed, seed_stream::kEvalTrace, scene), seed_stream::kEvalTrace, trace);
}

/// One closed-loop run of `policy` on a scene.
inline RolloutLog run_closed_loop(DrivingPolicy& policy, const Scene& scene, const ScenarioConfig& cfg,
                                  const EvalProtocol& p, std::mt19937_64& rng) {
  p.validate();
  TrafficSimulator sim(scene, cfg, /*stop_on_collision=*/false);
  const auto steps = static_cast<std::size_t>(std::llround(p.episode_duration / cfg.dt));
  const auto warm = static_cast<std::size_t>(std::llround(p.warmup / cfg.dt));
  RolloutLog log;
  log.warmup_steps = warm;
  log.vehicle_length = cfg.vehicle_length;
  for (std::size_t i = 0; i < scene.vehicles.size(); ++i)
    if (i != scene.ramp_vehicle) log.controlled.push_back(i);
  log.states.push_back(sim.vehicles());

  std::vector<std::vector<ObservedStep>> histories(log.controlled.size());
  for (std::size_t t = 0; t < warm; ++t) {
    const StepPlan plan = sim.plan();
    for (std::size_t c = 0; c < log.controlled.size(); ++c)
      histories[c].push_back({sim.observe(log.controlled[c]), plan.accel[log.controlled[c]]});
    sim.advance(plan, plan.accel);
    log.states.push_back(sim.vehicles());
  }

  policy.begin(histories, rng);
  std::vector<FeatureVector> obs(log.controlled.size());
  std::vector<double> rule(log.controlled.size());
  for (std::size_t t = warm; t < steps; ++t) {
    const StepPlan plan = sim.plan();
    for (std::size_t c = 0; c < log.controlled.size(); ++c) {
      obs[c] = sim.observe(log.controlled[c]);
      rule[c] = plan.accel[log.controlled[c]];
    }
    const std::vector<double> a = policy.act(obs, rule, rng);
    if (a.size() != obs.size()) throw std::runtime_error("policy returned the wrong number of accelerations");
    std::vector<double> applied = plan.accel;
    for (std::size_t c = 0; c < log.controlled.size(); ++c) {
      if (!std::isfinite(a[c])) throw std::runtime_error("policy " + policy.name() + " produced a non-finite action");
      applied[log.controlled[c]] = std::clamp(a[c], p.accel_floor, p.accel_cap);
    }
    sim.advance(plan, applied);
    log.states.push_back(sim.vehicles());
  }
  // the snapshot's a is the acceleration applied from it
  for (std::size_t k = 0; k + 1 < log.states.size(); ++k)
    for (std::size_t i = 0; i < log.states[k].size(); ++i) log.states[k][i].a = log.states[k + 1][i].a;
  return log;
}

/// m scenes x n traces, scene-major. Every trace draws from its own seed.
inline std::vector<RolloutLog> closed_loop_eval(DrivingPolicy& policy, const std::vector<Scene>& scenes,
                                                const EvalProtocol& p, const ScenarioConfig& cfg) {
  std::vector<RolloutLog> logs;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    for (std::size_t j = 0; j < p.n_traces; ++j) {
      std::mt19937_64 rng(trace_seed(p, s, j));
      RolloutLog log = run_closed_loop(policy, scenes[s], cfg, p, rng);
      log.scene = s;
      log.trace = j;
      logs.push_back(std::move(log));
    }
  }
  return logs;
}

/// Parallel variant: one driver per rollout from `make_driver`. Results equal
/// the sequential run because every rollout owns its seed.
inline std::vector<RolloutLog> closed_loop_eval(const std::function<std::unique_ptr<DrivingPolicy>()>& make_driver,
                                                const std::vector<Scene>& scenes, const EvalProtocol& p,
                                                const ScenarioConfig& cfg, std::size_t threads) {
  std::vector<RolloutLog> logs(scenes.size() * p.n_traces);
  parallel_for(logs.size(), threads, [&](std::size_t k, std::size_t) {
    const std::size_t s = k / p.n_traces, j = k % p.n_traces;
    auto driver = make_driver();
    std::mt19937_64 rng(trace_seed(p, s, j));
    logs[k] = run_closed_loop(*driver, scenes[s], cfg, p, rng);
    logs[k].scene = s;
    logs[k].trace = j;
  });
  return logs;
}

/// Ground-truth reference run per scene.
inline std::vector<RolloutLog> reference_runs(const std::vector<Scene>& scenes, const EvalProtocol& p,
                                              const ScenarioConfig& cfg) {
  GroundTruthPolicy gt;
  EvalProtocol once = p;
  once.n_traces = 1;
  return closed_loop_eval(gt, scenes, once, cfg);
}

// ---------------------------------------------------------------------------
// collisions

/// True when two vehicles in the same lane overlap (bumper gap <= 0).
inline bool has_overlap(std::span<const VehicleState> vs, double vehicle_length) {
  for (std::size_t i = 0; i < vs.size(); ++i)
    for (std::size_t j = 0; j < vs.size(); ++j)
      if (i != j && vs[i].lane == vs[j].lane && vs[j].x >= vs[i].x && vs[j].x - vehicle_length - vs[i].x <= 0.0 &&
          (vs[j].x > vs[i].x || j > i))
        return true;
  return false;
}

inline bool rollout_collided(const RolloutLog& log) {
  for (std::size_t k = log.warmup_steps; k < log.states.size(); ++k)
    if (has_overlap(log.states[k], log.vehicle_length)) return true;
  return false;
}

struct CollisionSummary {
  std::size_t count = 0;
  std::size_t rollouts = 0;
  double rate() const { return rollouts == 0 ? 0.0 : static_cast<double>(count) / static_cast<double>(rollouts); }
};

inline CollisionSummary count_collisions(std::span<const RolloutLog> logs) {
  CollisionSummary s;
  s.rollouts = logs.size();
  for (const auto& l : logs) s.count += rollout_collided(l) ? 1 : 0;
  return s;
}

// ---------------------------------------------------------------------------
// RWSE

/// Streaming root weighted square error: per horizon step, the root mean of
/// squared errors over every (truth, trace) pair added.
class RwseAccumulator {
 public:
  explicit RwseAccumulator(std::size_t horizon) : sum_(horizon, 0.0), count_(horizon, 0) {}

  void add(std::span<const double> truth, std::span<const double> predicted) {
    if (truth.size() != sum_.size() || predicted.size() != sum_.size())
      throw std::invalid_argument("RWSE horizon mismatch: expected " + std::to_string(sum_.size()) + ", got " +
                                  std::to_string(truth.size()) + " and " + std::to_string(predicted.size()));
    for (std::size_t t = 0; t < sum_.size(); ++t) {
      const double e = truth[t] - predicted[t];
      sum_[t] += e * e;
      ++count_[t];
    }
  }

  std::vector<double> curve() const {
    std::vector<double> out(sum_.size(), 0.0);
    for (std::size_t t = 0; t < out.size(); ++t)
      out[t] = count_[t] ? std::sqrt(sum_[t] / static_cast<double>(count_[t])) : 0.0;
    return out;
  }

  std::size_t horizon() const { return sum_.size(); }

 private:
  std::vector<double> sum_;
  std::vector<std::size_t> count_;
};

/// truth: m trajectories; traces: n sampled trajectories per truth.
inline std::vector<double> rwse(const std::vector<std::vector<double>>& truth,
                                const std::vector<std::vector<std::vector<double>>>& traces) {
  if (truth.empty() || truth.size() != traces.size())
    throw std::invalid_argument("RWSE needs one trace set per true trajectory");
  RwseAccumulator acc(truth.front().size());
  for (std::size_t i = 0; i < truth.size(); ++i)
    for (const auto& tr : traces[i]) acc.add(truth[i], tr);
  return acc.curve();
}

// ---------------------------------------------------------------------------
// KL

/// KL(reference || generated) over `bins` equal-width bins spanning the pooled
/// range; each bin probability gets eps added before renormalization.
inline double histogram_kl(std::span<const double> generated, std::span<const double> reference,
                           std::size_t bins = 100, double eps = 1e-6) {
  if (generated.empty() || reference.empty()) throw std::invalid_argument("histogram_kl needs non-empty samples");
  if (bins == 0) throw std::invalid_argument("histogram_kl needs at least one bin");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (double x : generated) lo = std::min(lo, x), hi = std::max(hi, x);
  for (double x : reference) lo = std::min(lo, x), hi = std::max(hi, x);
  if (!std::isfinite(lo) || !std::isfinite(hi)) throw std::invalid_argument("histogram_kl given non-finite samples");
  const double width = (hi - lo) / static_cast<double>(bins);
  auto histogram = [&](std::span<const double> xs) {
    std::vector<double> h(bins, 0.0);
    for (double x : xs) {
      std::size_t b = width > 0.0 ? static_cast<std::size_t>((x - lo) / width) : 0;
      h[std::min(b, bins - 1)] += 1.0;
    }
    double total = 0.0;
    for (double& v : h) {
      v = v / static_cast<double>(xs.size()) + eps;
      total += v;
    }
    for (double& v : h) v /= total;
    return h;
  };
  const auto p = histogram(reference);
  const auto q = histogram(generated);
  double kl = 0.0;
  for (std::size_t b = 0; b < bins; ++b) kl += p[b] * std::log(p[b] / q[b]);
  return std::max(kl, 0.0);
}

// ---------------------------------------------------------------------------
// report

struct MetricsReport {
  std::string policy;
  std::vector<double> rwse_position;  // per post-warmup horizon step (0.1 s .. end)
  std::vector<double> rwse_speed;
  std::array<double, 3> kl{};  // speed, position, acceleration
  double kl_mean = 0.0;
  CollisionSummary collisions;

  double rwse_position_at(double seconds, double dt) const {
    const auto k = static_cast<std::size_t>(std::llround(seconds / dt));
    if (k == 0 || k > rwse_position.size()) throw std::out_of_range("horizon outside the evaluated range");
    return rwse_position[k - 1];
  }
};

inline constexpr std::array<const char*, 3> kKlDimensions = {"speed", "position", "acceleration"};

/// Metrics for generated runs against one reference run per scene. Runs from
/// several training seeds can be pooled by concatenating their logs.
inline MetricsReport compute_metrics(const std::string& policy, const std::vector<RolloutLog>& reference,
                                     const std::vector<RolloutLog>& generated) {
  if (reference.empty() || generated.empty()) throw std::invalid_argument("metrics need reference and generated runs");
  MetricsReport r;
  r.policy = policy;
  const std::size_t warm = reference.front().warmup_steps;
  const std::size_t horizon = reference.front().states.size() - 1 - warm;
  RwseAccumulator pos(horizon), spd(horizon);
  std::array<std::vector<double>, 3> ref_samples, gen_samples;
  auto collect = [&](const RolloutLog& l, std::array<std::vector<double>, 3>& out) {
    for (std::size_t i : l.controlled)
      for (std::size_t k = warm + 1; k < l.states.size(); ++k) {
        out[0].push_back(l.states[k][i].v);
        out[1].push_back(l.states[k][i].x);
        out[2].push_back(l.states[k - 1][i].a);
      }
  };
  for (const auto& l : reference) collect(l, ref_samples);
  for (const auto& g : generated) {
    if (g.scene >= reference.size()) throw std::invalid_argument("generated run refers to an unknown scene");
    const RolloutLog& truth = reference[g.scene];
    if (g.states.size() != truth.states.size() || g.controlled != truth.controlled || g.warmup_steps != warm)
      throw std::invalid_argument("generated run does not align with its reference");
    for (std::size_t i : g.controlled) {
      std::vector<double> tx, ty, px, py;
      for (std::size_t k = warm + 1; k < g.states.size(); ++k) {
        tx.push_back(truth.states[k][i].x);
        px.push_back(g.states[k][i].x);
        ty.push_back(truth.states[k][i].v);
        py.push_back(g.states[k][i].v);
      }
      pos.add(tx, px);
      spd.add(ty, py);
    }
    collect(g, gen_samples);
  }
  r.rwse_position = pos.curve();
  r.rwse_speed = spd.curve();
  double sum = 0.0;
  for (std::size_t d = 0; d < 3; ++d) {
    r.kl[d] = histogram_kl(gen_samples[d], ref_samples[d]);
    sum += r.kl[d];
  }
  r.kl_mean = sum / 3.0;
  r.collisions = count_collisions(generated);
  return r;
}

}  // namespace nidm
