#pragma once

// Ramp-merge world: road geometry, Beta-sampled driver populations, the
// ground-truth IDM / MOBIL / C-IDM simulator and per-vehicle feature
// extraction.

#include "nidm/traffic_models.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace nidm {

// ---------------------------------------------------------------------------
// seeding

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Seed for item `index` of stream `stream` under a master seed. Every
/// parallel unit of work (episode, rollout, training run) draws its own seed
/// through this rule, so results never depend on execution order.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index) {
  return splitmix64(splitmix64(master ^ splitmix64(stream + 0x5EEDULL)) + index);
}

namespace seed_stream {
inline constexpr std::uint64_t kEpisode = 1;
inline constexpr std::uint64_t kSplit = 2;
inline constexpr std::uint64_t kEvalScene = 3;
inline constexpr std::uint64_t kEvalTrace = 4;
inline constexpr std::uint64_t kTraining = 5;
}  // namespace seed_stream

// ---------------------------------------------------------------------------
// configuration

/// Main lane runs along +x from 0. The straight ramp ends at the merge point
/// and approaches it from below at ramp_angle_deg.
struct RoadGeometry {
  double main_length = 500.0;
  double ramp_length = 100.0;
  double merge_point = 150.0;
  double ramp_angle_deg = 15.0;

  void validate() const {
    if (!(main_length > 0.0) || !(ramp_length > 0.0))
      throw std::invalid_argument("road lengths must be positive");
    if (!(merge_point > 0.0 && merge_point < main_length))
      throw std::invalid_argument("merge point must lie strictly inside the main lane");
  }

  /// Main-lane coordinate of a ramp vehicle at arc length `ramp_x`.
  double project(double ramp_x) const { return merge_point - (ramp_length - ramp_x); }

  std::array<double, 2> ramp_point(double ramp_x) const {
    const double angle = ramp_angle_deg * std::numbers::pi / 180.0;
    const double remaining = ramp_length - ramp_x;
    return {merge_point - remaining * std::cos(angle), -remaining * std::sin(angle)};
  }

  double distance_to_merge(double ramp_x) const {
    const auto p = ramp_point(ramp_x);
    return std::hypot(p[0] - merge_point, p[1]);
  }
};

struct ScenarioConfig {
  RoadGeometry road;
  DispositionBounds bounds;
  double precision = 15.0;
  double politeness = 0.5;
  // cooperation factor = clamp(coop_base - coop_slope * psi, 0, 1)
  double coop_base = 1.0;
  double coop_slope = 1.0;
  double vehicle_length = 4.0;
  double dt = 0.1;
  double accel_floor = kDefaultAccelFloor;
  double episode_duration = 10.0;
  int min_vehicles = 4;
  int max_vehicles = 7;
  double init_speed_min = 15.0;
  double init_speed_max = 25.0;
  double rear_start_max = 20.0;
  double extra_gap_max = 15.0;
  double front_limit = 350.0;
  double ramp_start_max = 30.0;
  int max_placement_attempts = 200;

  std::size_t episode_steps() const { return static_cast<std::size_t>(std::llround(episode_duration / dt)); }

  void validate() const {
    road.validate();
    if (!(precision > 0.0)) throw std::invalid_argument("precision must be positive");
    if (!(politeness >= 0.0 && politeness <= 1.0)) throw std::invalid_argument("politeness must be in [0, 1]");
    if (!(dt > 0.0) || !(episode_duration > 0.0)) throw std::invalid_argument("time step and duration must be positive");
    if (min_vehicles < 2 || max_vehicles < min_vehicles) throw std::invalid_argument("invalid vehicle count range");
    if (!(init_speed_min >= 0.0 && init_speed_max >= init_speed_min)) throw std::invalid_argument("invalid speed range");
    if (!(vehicle_length > 0.0)) throw std::invalid_argument("vehicle length must be positive");
    if (max_placement_attempts < 1) throw std::invalid_argument("placement attempts must be positive");
  }
};

// ---------------------------------------------------------------------------
// drivers

struct DriverProfile {
  double psi = 0.5;
  IdmParams idm;
  MobilParams mobil;
  double coop = 0.5;
};

inline double sample_beta(double alpha, double beta, std::mt19937_64& rng) {
  std::gamma_distribution<double> ga(alpha, 1.0);
  std::gamma_distribution<double> gb(beta, 1.0);
  const double x = ga(rng);
  const double y = gb(rng);
  return x / (x + y);
}

/// Draws every disposition parameter from Beta(phi psi, phi (1 - psi)) and
/// maps it between the timid and aggressive ends of its range.
inline DriverProfile sample_driver_profile(double psi, double phi, std::mt19937_64& rng,
                                           const ScenarioConfig& cfg = {}) {
  if (!(psi >= 0.0 && psi <= 1.0)) {
    std::ostringstream os;
    os << "aggressiveness must lie in [0, 1], got " << psi;
    throw std::invalid_argument(os.str());
  }
  if (!(phi > 0.0)) throw std::invalid_argument("precision must be positive");
  const double p = std::clamp(psi, 1e-6, 1.0 - 1e-6);
  const double alpha = phi * p;
  const double beta = phi * (1.0 - p);
  auto draw = [&](const ParamRange& r) { return r.at(sample_beta(alpha, beta, rng)); };
  const auto& b = cfg.bounds;
  DriverProfile d;
  d.psi = psi;
  d.idm.v_des = draw(b.v_des);
  d.idm.T_des = draw(b.T_des);
  d.idm.d_min = draw(b.d_min);
  d.idm.a_max = draw(b.a_max);
  d.idm.b_max = draw(b.b_max);
  d.mobil.b_safe = draw(b.b_safe);
  d.mobil.a_th = draw(b.a_th);
  d.mobil.politeness = cfg.politeness;
  d.coop = std::clamp(cfg.coop_base - cfg.coop_slope * psi, 0.0, 1.0);
  return d;
}

// ---------------------------------------------------------------------------
// state

enum class Lane { Main, Ramp };

/// x is the front-bumper arc length in the vehicle's lane; a is the last
/// applied acceleration.
struct VehicleState {
  Lane lane = Lane::Main;
  double x = 0.0;
  double v = 0.0;
  double a = 0.0;
};

struct Scene {
  std::vector<VehicleState> vehicles;
  std::vector<DriverProfile> drivers;
  std::size_t ramp_vehicle = 0;
  std::uint64_t seed = 0;
};

/// Random scene: N in [min, max] vehicles, one of them on the ramp. Main-lane
/// vehicles start at least their desired gap behind the vehicle ahead.
inline Scene populate_scene(std::uint64_t seed, const ScenarioConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> count(cfg.min_vehicles, cfg.max_vehicles);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> speed(cfg.init_speed_min, cfg.init_speed_max);
  const int n = count(rng);
  Scene s;
  s.seed = seed;
  for (int i = 0; i < n; ++i) s.drivers.push_back(sample_driver_profile(unit(rng), cfg.precision, rng, cfg));
  const std::size_t main_count = static_cast<std::size_t>(n - 1);
  for (int attempt = 0; attempt < cfg.max_placement_attempts; ++attempt) {
    s.vehicles.assign(static_cast<std::size_t>(n), VehicleState{});
    for (auto& v : s.vehicles) v.v = speed(rng);
    s.vehicles[0].x = cfg.rear_start_max * unit(rng);
    bool ok = true;
    for (std::size_t k = 1; k < main_count; ++k) {
      const VehicleState& follower = s.vehicles[k - 1];
      const double need = desired_gap(s.drivers[k - 1].idm, follower.v, follower.v - s.vehicles[k].v, GapMode::Relu);
      s.vehicles[k].x = follower.x + cfg.vehicle_length + need + cfg.extra_gap_max * unit(rng);
      if (s.vehicles[k].x > cfg.front_limit) {
        ok = false;
        break;
      }
    }
    VehicleState& ramp = s.vehicles[main_count];
    ramp.lane = Lane::Ramp;
    ramp.x = cfg.ramp_start_max * unit(rng);
    s.ramp_vehicle = main_count;
    if (ok) return s;
  }
  std::ostringstream os;
  os << "scene placement failed after " << cfg.max_placement_attempts << " attempts (seed " << seed << ")";
  throw std::runtime_error(os.str());
}

/// Time to reach the merge point; infinite when stopped or already past it.
inline double compute_ttm(const VehicleState& s, const RoadGeometry& road) {
  const double remaining = s.lane == Lane::Ramp ? road.ramp_length - s.x : road.merge_point - s.x;
  if (remaining < 0.0) return kInfiniteTime;
  if (remaining == 0.0) return 0.0;
  if (s.v <= 0.0) return kInfiniteTime;
  return remaining / s.v;
}

// ---------------------------------------------------------------------------
// neighbourhood queries on a snapshot

/// Nearest main-lane vehicle strictly ahead of main-lane coordinate x.
inline std::optional<std::size_t> main_vehicle_ahead(std::span<const VehicleState> vs, double x,
                                                     std::optional<std::size_t> skip = {}) {
  std::optional<std::size_t> best;
  for (std::size_t j = 0; j < vs.size(); ++j) {
    if (vs[j].lane != Lane::Main || (skip && *skip == j)) continue;
    if (vs[j].x > x && (!best || vs[j].x < vs[*best].x)) best = j;
  }
  return best;
}

/// Nearest main-lane vehicle at or behind main-lane coordinate x.
inline std::optional<std::size_t> main_vehicle_behind(std::span<const VehicleState> vs, double x) {
  std::optional<std::size_t> best;
  for (std::size_t j = 0; j < vs.size(); ++j) {
    if (vs[j].lane != Lane::Main) continue;
    if (vs[j].x <= x && (!best || vs[j].x > vs[*best].x)) best = j;
  }
  return best;
}

inline std::optional<std::size_t> leader_of(std::span<const VehicleState> vs, std::size_t i) {
  if (vs[i].lane != Lane::Main) return std::nullopt;
  std::optional<std::size_t> best;
  for (std::size_t j = 0; j < vs.size(); ++j) {
    if (j == i || vs[j].lane != Lane::Main) continue;
    const bool ahead = vs[j].x > vs[i].x || (vs[j].x == vs[i].x && j > i);
    if (ahead && (!best || vs[j].x < vs[*best].x)) best = j;
  }
  return best;
}

/// A ramp vehicle is relevant to a main-lane ego when its projection lies
/// ahead of the ego's front bumper by more than a vehicle length and behind
/// the ego's leader (or the ego has none).
struct RampRelation {
  bool present = false;
  double projected_x = 0.0;
  double gap = 0.0;
};

inline RampRelation ramp_relation(std::span<const VehicleState> vs, std::size_t ego, std::size_t ramp_vehicle,
                                  const RoadGeometry& road, double vehicle_length) {
  RampRelation r;
  if (ramp_vehicle >= vs.size() || vs[ramp_vehicle].lane != Lane::Ramp || vs[ego].lane != Lane::Main) return r;
  r.projected_x = road.project(vs[ramp_vehicle].x);
  r.gap = r.projected_x - vehicle_length - vs[ego].x;
  if (r.gap <= 0.0) return r;
  const auto lead = leader_of(vs, ego);
  r.present = !lead || r.projected_x < vs[*lead].x;
  return r;
}

// ---------------------------------------------------------------------------
// features

inline constexpr std::size_t kFeatureCount = 9;

enum FeatureIndex : std::size_t {
  kSpeed = 0,
  kPrevAccel,
  kLeaderPresent,
  kLeaderDv,
  kLeaderGap,
  kRampPresent,
  kRampDv,
  kRampGap,
  kRampMergeDist,
};

inline const std::array<const char*, kFeatureCount>& feature_names() {
  static const std::array<const char*, kFeatureCount> names = {
      "speed", "prev_accel", "leader_present", "leader_dv", "leader_gap",
      "ramp_present", "ramp_dv", "ramp_gap", "ramp_merge_dist"};
  return names;
}

/// Raw per-vehicle observation. Slots of an absent leader or ramp vehicle are
/// zero here and replaced by the training mean at standardization.
struct FeatureVector {
  std::array<double, kFeatureCount> values{};

  bool leader_present() const { return values[kLeaderPresent] > 0.5; }
  bool ramp_present() const { return values[kRampPresent] > 0.5; }
  /// Whether slot j carries a measured value.
  bool observed(std::size_t j) const {
    if (j == kLeaderDv || j == kLeaderGap) return leader_present();
    if (j == kRampDv || j == kRampGap || j == kRampMergeDist) return ramp_present();
    return true;
  }
};

inline FeatureVector extract_features(std::span<const VehicleState> vs, std::size_t ego, double prev_accel,
                                      std::size_t ramp_vehicle, const RoadGeometry& road, double vehicle_length) {
  FeatureVector f;
  const VehicleState& e = vs[ego];
  f.values[kSpeed] = e.v;
  f.values[kPrevAccel] = prev_accel;
  if (const auto lead = leader_of(vs, ego)) {
    f.values[kLeaderPresent] = 1.0;
    f.values[kLeaderDv] = e.v - vs[*lead].v;
    f.values[kLeaderGap] = vs[*lead].x - vehicle_length - e.x;
  }
  const RampRelation rr = ramp_relation(vs, ego, ramp_vehicle, road, vehicle_length);
  if (rr.present) {
    f.values[kRampPresent] = 1.0;
    f.values[kRampDv] = e.v - vs[ramp_vehicle].v;
    f.values[kRampGap] = rr.gap;
    f.values[kRampMergeDist] = road.distance_to_merge(vs[ramp_vehicle].x);
  }
  return f;
}

// ---------------------------------------------------------------------------
// episode log

struct StepRecord {
  std::vector<VehicleState> vehicles;  // state at this step, a = acceleration applied from it
  std::vector<AttentionTarget> attention;
  bool merge_committed = false;
};

struct EpisodeLog {
  double dt = 0.1;
  RoadGeometry road;
  double vehicle_length = 4.0;
  std::uint64_t seed = 0;
  std::vector<DriverProfile> drivers;
  std::size_t ramp_vehicle = 0;
  std::vector<StepRecord> steps;
  std::optional<std::size_t> merge_step;
  bool collided = false;
  std::size_t collision_step = 0;
  std::size_t barrier_stops = 0;

  std::size_t vehicle_count() const { return drivers.size(); }

  AttentionWeights attention_weights(std::size_t t, std::size_t vehicle) const {
    return steps[t].attention[vehicle] == AttentionTarget::Leader ? AttentionWeights{1.0, 0.0}
                                                                  : AttentionWeights{0.0, 1.0};
  }
};

inline FeatureVector extract_features(const EpisodeLog& log, std::size_t vehicle, std::size_t t) {
  if (t >= log.steps.size()) throw std::out_of_range("step index outside the episode");
  const double prev = t > 0 ? log.steps[t - 1].vehicles[vehicle].a : 0.0;
  return extract_features(log.steps[t].vehicles, vehicle, prev, log.ramp_vehicle, log.road, log.vehicle_length);
}

// ---------------------------------------------------------------------------
// simulator

struct StepPlan {
  std::vector<double> accel;
  std::vector<AttentionTarget> attention;
  bool merge_committed = false;
};

class TrafficSimulator {
 public:
  /// With stop_on_collision unset the simulation keeps running after a contact
  /// (used for policy evaluation); model inputs are then guarded.
  TrafficSimulator(const Scene& scene, const ScenarioConfig& cfg, bool stop_on_collision = true)
      : cfg_(cfg), stop_on_collision_(stop_on_collision) {
    cfg_.validate();
    log_.dt = cfg.dt;
    log_.road = cfg.road;
    log_.vehicle_length = cfg.vehicle_length;
    log_.seed = scene.seed;
    log_.drivers = scene.drivers;
    log_.ramp_vehicle = scene.ramp_vehicle;
    state_ = scene.vehicles;
    if (state_.size() != scene.drivers.size()) throw std::invalid_argument("scene vehicles and drivers differ in count");
    for (const auto& v : state_)
      if (v.v < 0.0) throw std::invalid_argument("negative initial speed");
    check_collisions();
  }

  const std::vector<VehicleState>& vehicles() const { return state_; }
  const EpisodeLog& log() const { return log_; }
  EpisodeLog take_log() { return std::move(log_); }
  std::size_t step_index() const { return step_; }
  bool collided() const { return log_.collided; }
  bool finished() const { return stop_on_collision_ && log_.collided; }
  bool merge_committed() const { return committed_; }
  const ScenarioConfig& config() const { return cfg_; }

  FeatureVector observe(std::size_t vehicle) const {
    return extract_features(state_, vehicle, state_[vehicle].a, log_.ramp_vehicle, cfg_.road, cfg_.vehicle_length);
  }

  /// Ground-truth accelerations and attention for the current state. Updates
  /// the ramp vehicle's merge commitment.
  StepPlan plan() {
    const std::size_t n = state_.size();
    StepPlan p;
    p.accel.assign(n, 0.0);
    p.attention.assign(n, AttentionTarget::Leader);
    std::vector<double> follow(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      if (state_[i].lane == Lane::Main) follow[i] = leader_accel(i);

    const std::size_t r = log_.ramp_vehicle;
    const bool ramp_active = r < n && state_[r].lane == Lane::Ramp;
    if (ramp_active) {
      const MergeAssessment m = assess_merge(follow);
      if (!committed_ && m.merge) committed_ = true;
      if (committed_ && !m.safe && can_stop_before_line()) committed_ = false;
      p.accel[r] = committed_ ? m.accel.a_c_tilde : std::min(m.accel.a_c, m.accel.a_c_tilde);
    } else {
      committed_ = false;
    }

    for (std::size_t i = 0; i < n; ++i) {
      if (state_[i].lane != Lane::Main) continue;
      p.accel[i] = follow[i];
      if (!ramp_active) continue;
      const RampRelation rr = ramp_relation(state_, i, r, cfg_.road, cfg_.vehicle_length);
      if (!rr.present) continue;
      const DriverProfile& d = log_.drivers[i];
      const double f_m = accel_toward(i, rr.gap, state_[r].v);
      const AttentionTarget target =
          cidm_attention_target(compute_ttm(state_[i], cfg_.road), compute_ttm(state_[r], cfg_.road), d.coop, true,
                                committed_, f_m, d.mobil.b_safe);
      p.attention[i] = target;
      if (target == AttentionTarget::RampProjection) p.accel[i] = f_m;
    }
    p.merge_committed = committed_;
    return p;
  }

  /// Integrates one step with the given accelerations and logs the pre-step state.
  void advance(const StepPlan& plan, std::span<const double> accel) {
    if (accel.size() != state_.size()) throw std::invalid_argument("acceleration count does not match vehicles");
    StepRecord rec;
    rec.vehicles = state_;
    for (std::size_t i = 0; i < state_.size(); ++i) rec.vehicles[i].a = accel[i];
    rec.attention = plan.attention;
    rec.merge_committed = plan.merge_committed;
    log_.steps.push_back(std::move(rec));

    for (std::size_t i = 0; i < state_.size(); ++i) {
      const Kinematics k = step_kinematics(state_[i].x, state_[i].v, accel[i], cfg_.dt);
      state_[i] = {state_[i].lane, k.x, k.v, accel[i]};
    }
    ++step_;
    resolve_ramp_end();
    check_collisions();
  }

  /// One ground-truth step.
  void step() {
    const StepPlan p = plan();
    advance(p, p.accel);
  }

 private:
  struct MergeAssessment {
    MobilAccelerations accel;
    bool safe = false;
    bool merge = false;
  };

  double guarded(double gap) const { return stop_on_collision_ ? gap : std::max(gap, 1e-3); }

  /// IDM acceleration of vehicle i toward an obstacle `gap` ahead moving at `lead_v`.
  /// A non-positive gap (only possible for projected or post-contact
  /// configurations) yields the floor.
  double accel_toward(std::size_t i, double gap, double lead_v) const {
    const VehicleState& s = state_[i];
    if (gap <= 0.0) return cfg_.accel_floor;
    return idm_accel(log_.drivers[i].idm, {s.v, gap, s.v - lead_v}, GapMode::Relu, cfg_.accel_floor);
  }

  double leader_accel(std::size_t i) const {
    const auto lead = leader_of(state_, i);
    if (!lead) return idm_free_accel(log_.drivers[i].idm, state_[i].v, cfg_.accel_floor);
    const double gap = guarded(state_[*lead].x - cfg_.vehicle_length - state_[i].x);
    return accel_toward(i, gap, state_[*lead].v);
  }

  MergeAssessment assess_merge(const std::vector<double>& follow) const {
    const std::size_t r = log_.ramp_vehicle;
    const VehicleState& rv = state_[r];
    const DriverProfile& rd = log_.drivers[r];
    const double p = cfg_.road.project(rv.x);
    MergeAssessment m;
    m.accel.a_c = accel_toward(r, cfg_.road.ramp_length - rv.x, 0.0);
    const auto lead = main_vehicle_ahead(state_, p);
    m.accel.a_c_tilde = lead ? accel_toward(r, state_[*lead].x - cfg_.vehicle_length - p, state_[*lead].v)
                             : idm_free_accel(rd.idm, rv.v, cfg_.accel_floor);
    if (const auto fol = main_vehicle_behind(state_, p)) {
      m.accel.a_n = follow[*fol];
      m.accel.a_n_tilde = accel_toward(*fol, p - cfg_.vehicle_length - state_[*fol].x, rv.v);
    }
    // own braking toward the new leader must also respect the safe limit
    m.safe = mobil_safe(m.accel, rd.mobil) && m.accel.a_c_tilde > rd.mobil.b_safe;
    m.merge = m.safe && mobil_decide(m.accel, rd.mobil);
    return m;
  }

  bool can_stop_before_line() const {
    const VehicleState& rv = state_[log_.ramp_vehicle];
    const double room = cfg_.road.ramp_length - rv.x;
    if (room <= 0.0) return false;
    return rv.v * rv.v / (2.0 * room) <= -log_.drivers[log_.ramp_vehicle].mobil.b_safe;
  }

  void resolve_ramp_end() {
    if (log_.ramp_vehicle >= state_.size()) return;
    VehicleState& rv = state_[log_.ramp_vehicle];
    if (rv.lane != Lane::Ramp || rv.x < cfg_.road.ramp_length) return;
    const double x_main = cfg_.road.merge_point + (rv.x - cfg_.road.ramp_length);
    bool clear = committed_;
    if (clear) {
      if (const auto lead = main_vehicle_ahead(state_, x_main))
        clear = state_[*lead].x - cfg_.vehicle_length - x_main > 0.0;
      if (const auto fol = main_vehicle_behind(state_, x_main))
        clear = clear && x_main - cfg_.vehicle_length - state_[*fol].x > 0.0;
    }
    if (clear) {
      rv.lane = Lane::Main;
      rv.x = x_main;
      committed_ = false;
      if (!log_.merge_step) log_.merge_step = step_;
    } else {
      // blocked merge: the vehicle halts at the end of the ramp
      rv.x = cfg_.road.ramp_length;
      rv.v = 0.0;
      ++log_.barrier_stops;
    }
  }

  void check_collisions() {
    if (log_.collided) return;
    std::vector<std::size_t> order;
    for (std::size_t i = 0; i < state_.size(); ++i)
      if (state_[i].lane == Lane::Main) order.push_back(i);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return state_[a].x < state_[b].x; });
    for (std::size_t k = 1; k < order.size(); ++k) {
      if (state_[order[k]].x - cfg_.vehicle_length - state_[order[k - 1]].x <= 0.0) {
        log_.collided = true;
        log_.collision_step = step_;
        return;
      }
    }
  }

  ScenarioConfig cfg_;
  bool stop_on_collision_ = true;
  std::vector<VehicleState> state_;
  EpisodeLog log_;
  std::size_t step_ = 0;
  bool committed_ = false;
};

/// Runs the ground-truth rules for `duration` seconds (or until a collision).
inline EpisodeLog simulate_episode(const Scene& scene, const ScenarioConfig& cfg, double duration) {
  TrafficSimulator sim(scene, cfg);
  const auto steps = static_cast<std::size_t>(std::llround(duration / cfg.dt));
  for (std::size_t t = 0; t < steps && !sim.finished(); ++t) sim.step();
  return sim.take_log();
}

inline EpisodeLog simulate_episode(const Scene& scene, const ScenarioConfig& cfg) {
  return simulate_episode(scene, cfg, cfg.episode_duration);
}

}  // namespace nidm
