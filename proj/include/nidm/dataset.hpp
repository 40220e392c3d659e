#pragma once

// Training windows cut from ground-truth episodes, the episode-level
// train/validation split and the standardization statistics.

#include "nidm/parallel.hpp"
#include "nidm/scenario.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace nidm {

struct DatasetConfig {
  std::size_t history_steps = 30;
  std::size_t horizon_steps = 50;
  std::size_t stride = 10;
  double train_fraction = 0.7;
  std::uint64_t seed = 0;

  std::size_t window_steps() const { return history_steps + horizon_steps; }

  void validate() const {
    if (history_steps == 0 || horizon_steps == 0) throw std::invalid_argument("window lengths must be positive");
    if (stride == 0) throw std::invalid_argument("window stride must be positive");
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw std::invalid_argument("train fraction must be in (0, 1)");
  }
};

/// Per-feature mean/std from the training split. Missing slots are filled
/// with the mean before the std is taken, so they standardize to zero.
struct Standardization {
  std::array<double, kFeatureCount> feature_mean{};
  std::array<double, kFeatureCount> feature_std{};
  double accel_mean = 0.0;
  double accel_std = 1.0;
  double disp_mean = 0.0;
  double disp_std = 1.0;

  std::array<double, kFeatureCount> standardize(const FeatureVector& f) const {
    std::array<double, kFeatureCount> z{};
    for (std::size_t j = 0; j < kFeatureCount; ++j)
      z[j] = f.observed(j) ? (f.values[j] - feature_mean[j]) / feature_std[j] : 0.0;
    return z;
  }
  /// Raw value with missing slots replaced by the training mean.
  std::array<double, kFeatureCount> filled(const FeatureVector& f) const {
    std::array<double, kFeatureCount> out = f.values;
    for (std::size_t j = 0; j < kFeatureCount; ++j)
      if (!f.observed(j)) out[j] = feature_mean[j];
    return out;
  }
  double standardize_accel(double a) const { return (a - accel_mean) / accel_std; }
  double standardize_disp(double d) const { return (d - disp_mean) / disp_std; }

  bool operator==(const Standardization&) const = default;
};

/// Logged neighbours of the target vehicle over the prediction horizon.
/// Positions are relative to the target's position at the rollout start.
struct Playback {
  std::vector<double> leader_present, leader_x, leader_v;
  std::vector<int> leader_id;
  std::vector<double> ramp_present, ramp_x, ramp_v, ramp_dist;

  std::size_t size() const { return leader_present.size(); }
};

/// Large but finite stand-in position for an absent neighbour.
inline constexpr double kAbsentOffset = 1.0e4;

/// 80 contiguous logged steps of one main-lane vehicle. Raw values; the
/// dataset statistics are applied when batches are assembled.
struct TrainingWindow {
  std::size_t episode = 0;
  std::size_t vehicle = 0;
  std::size_t start = 0;
  double psi = 0.0;
  std::vector<FeatureVector> features;  // window_steps
  std::vector<double> accel;            // window_steps
  std::vector<double> position;         // window_steps + 1, absolute
  std::vector<double> speed;            // window_steps + 1
  Playback playback;                    // horizon_steps
};

struct Dataset {
  DatasetConfig config;
  double dt = 0.1;
  double vehicle_length = 4.0;
  std::vector<EpisodeLog> episodes;
  std::vector<std::size_t> train_episodes;
  std::vector<std::size_t> val_episodes;
  Standardization stats;
  std::vector<TrainingWindow> train;
  std::vector<TrainingWindow> val;
};

/// Main-lane vehicles that serve as prediction targets (the ramp vehicle is excluded).
inline std::vector<std::size_t> target_vehicles(const EpisodeLog& log) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < log.vehicle_count(); ++i)
    if (i != log.ramp_vehicle) out.push_back(i);
  return out;
}

/// Start steps of the windows that fit entirely inside the usable part of the log.
inline std::vector<std::size_t> window_starts(std::size_t usable_steps, const DatasetConfig& cfg) {
  std::vector<std::size_t> starts;
  for (std::size_t s = 0; s + cfg.window_steps() <= usable_steps; s += cfg.stride) starts.push_back(s);
  return starts;
}

inline std::size_t usable_steps(const EpisodeLog& log) {
  return log.collided ? std::min(log.steps.size(), log.collision_step > 0 ? log.collision_step - 1 : 0)
                      : log.steps.size();
}

inline TrainingWindow make_window(const EpisodeLog& log, std::size_t episode, std::size_t vehicle, std::size_t start,
                                  const DatasetConfig& cfg) {
  const std::size_t len = cfg.window_steps();
  if (start + len > log.steps.size()) throw std::out_of_range("window extends past the episode");
  TrainingWindow w;
  w.episode = episode;
  w.vehicle = vehicle;
  w.start = start;
  w.psi = log.drivers[vehicle].psi;
  for (std::size_t k = 0; k < len; ++k) {
    const std::size_t t = start + k;
    const VehicleState& s = log.steps[t].vehicles[vehicle];
    w.features.push_back(extract_features(log, vehicle, t));
    w.accel.push_back(s.a);
    w.position.push_back(s.x);
    w.speed.push_back(s.v);
  }
  const VehicleState& last = log.steps[start + len - 1].vehicles[vehicle];
  const Kinematics end = step_kinematics(last.x, last.v, last.a, log.dt);
  w.position.push_back(end.x);
  w.speed.push_back(end.v);

  const double origin = w.position[cfg.history_steps];
  Playback& p = w.playback;
  for (std::size_t k = cfg.history_steps; k < len; ++k) {
    const auto& vs = log.steps[start + k].vehicles;
    const auto lead = leader_of(vs, vehicle);
    p.leader_present.push_back(lead ? 1.0 : 0.0);
    p.leader_x.push_back(lead ? vs[*lead].x - origin : kAbsentOffset);
    p.leader_v.push_back(lead ? vs[*lead].v : 0.0);
    p.leader_id.push_back(lead ? static_cast<int>(*lead) : -1);
    const RampRelation rr = ramp_relation(vs, vehicle, log.ramp_vehicle, log.road, log.vehicle_length);
    p.ramp_present.push_back(rr.present ? 1.0 : 0.0);
    p.ramp_x.push_back(rr.present ? rr.projected_x - origin : kAbsentOffset);
    p.ramp_v.push_back(rr.present ? vs[log.ramp_vehicle].v : 0.0);
    p.ramp_dist.push_back(rr.present ? log.road.distance_to_merge(vs[log.ramp_vehicle].x) : 0.0);
  }
  return w;
}

/// Episode-level split; never splits windows of one episode across sets.
inline void split_episodes(std::size_t count, const DatasetConfig& cfg, std::vector<std::size_t>& train,
                           std::vector<std::size_t>& val) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(derive_seed(cfg.seed, seed_stream::kSplit, 0));
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(count)));
  train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(n_train, count)));
  val.assign(order.begin() + static_cast<std::ptrdiff_t>(std::min(n_train, count)), order.end());
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
}

inline Standardization compute_standardization(const std::vector<EpisodeLog>& episodes,
                                               const std::vector<std::size_t>& train_episodes,
                                               const std::vector<TrainingWindow>& train_windows,
                                               const DatasetConfig& cfg) {
  Standardization st;
  std::vector<FeatureVector> feats;
  std::vector<double> accels;
  for (std::size_t e : train_episodes) {
    const EpisodeLog& log = episodes[e];
    const std::size_t usable = usable_steps(log);
    for (std::size_t i : target_vehicles(log)) {
      for (std::size_t t = 0; t < usable; ++t) {
        feats.push_back(extract_features(log, i, t));
        accels.push_back(log.steps[t].vehicles[i].a);
      }
    }
  }
  if (feats.empty()) throw std::invalid_argument("training split holds no steps");
  const double n = static_cast<double>(feats.size());
  for (std::size_t j = 0; j < kFeatureCount; ++j) {
    double sum = 0.0;
    std::size_t present = 0;
    for (const auto& f : feats)
      if (f.observed(j)) {
        sum += f.values[j];
        ++present;
      }
    const double mean = present > 0 ? sum / static_cast<double>(present) : 0.0;
    double ss = 0.0;
    for (const auto& f : feats) {
      const double d = (f.observed(j) ? f.values[j] : mean) - mean;
      ss += d * d;
    }
    const double sd = std::sqrt(ss / n);
    st.feature_mean[j] = mean;
    st.feature_std[j] = sd > 1e-12 ? sd : 1.0;
  }
  const double am = std::accumulate(accels.begin(), accels.end(), 0.0) / n;
  double ass = 0.0;
  for (double a : accels) ass += (a - am) * (a - am);
  st.accel_mean = am;
  st.accel_std = std::max(std::sqrt(ass / n), 1e-6);

  std::vector<double> disp;
  for (const auto& w : train_windows) {
    const double origin = w.position[cfg.history_steps];
    for (std::size_t k = cfg.history_steps + 1; k < w.position.size(); ++k) disp.push_back(w.position[k] - origin);
  }
  if (!disp.empty()) {
    const double dm = std::accumulate(disp.begin(), disp.end(), 0.0) / static_cast<double>(disp.size());
    double dss = 0.0;
    for (double d : disp) dss += (d - dm) * (d - dm);
    st.disp_mean = dm;
    st.disp_std = std::max(std::sqrt(dss / static_cast<double>(disp.size())), 1e-6);
  }
  return st;
}

inline Dataset build_dataset(std::vector<EpisodeLog> logs, const DatasetConfig& cfg) {
  cfg.validate();
  if (logs.empty()) throw std::invalid_argument("build_dataset needs at least one episode");
  Dataset ds;
  ds.config = cfg;
  ds.dt = logs.front().dt;
  ds.vehicle_length = logs.front().vehicle_length;
  ds.episodes = std::move(logs);
  split_episodes(ds.episodes.size(), cfg, ds.train_episodes, ds.val_episodes);
  if (ds.train_episodes.empty() || ds.val_episodes.empty())
    throw std::invalid_argument("dataset split left an empty training or validation set (" +
                                std::to_string(ds.episodes.size()) + " episodes)");
  auto cut = [&](const std::vector<std::size_t>& eps, std::vector<TrainingWindow>& out) {
    for (std::size_t e : eps) {
      const EpisodeLog& log = ds.episodes[e];
      for (std::size_t i : target_vehicles(log))
        for (std::size_t s : window_starts(usable_steps(log), cfg)) out.push_back(make_window(log, e, i, s, cfg));
    }
  };
  cut(ds.train_episodes, ds.train);
  cut(ds.val_episodes, ds.val);
  if (ds.train.empty() || ds.val.empty())
    throw std::invalid_argument("episodes are too short for " + std::to_string(cfg.window_steps()) + "-step windows");
  ds.stats = compute_standardization(ds.episodes, ds.train_episodes, ds.train, cfg);
  return ds;
}

/// Ground-truth episodes for a master seed; episode k uses its own derived
/// seed, so the result is independent of the worker count.
inline std::vector<EpisodeLog> generate_episodes(std::size_t count, std::uint64_t master_seed,
                                                 const ScenarioConfig& cfg, std::size_t threads = 1) {
  std::vector<EpisodeLog> logs(count);
  parallel_for(count, threads, [&](std::size_t k, std::size_t) {
    logs[k] = simulate_episode(populate_scene(derive_seed(master_seed, seed_stream::kEpisode, k), cfg), cfg);
  });
  return logs;
}

}  // namespace nidm
