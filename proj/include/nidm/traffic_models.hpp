#pragma once

// Closed-form driving equations shared by the ground-truth simulator and the
// learned policies: IDM acceleration, desired gap, attention blending,
// logistic parameter squashing, the MOBIL merge criterion, C-IDM attention
// selection and constant-acceleration kinematics.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>

namespace nidm {

inline constexpr double kDefaultAccelFloor = -6.0;
inline constexpr double kInfiniteTime = std::numeric_limits<double>::infinity();

/// Five-parameter IDM driver disposition. b_max is a positive magnitude.
struct IdmParams {
  double v_des = 20.0;  // m/s
  double d_min = 3.0;   // m
  double T_des = 1.25;  // s
  double a_max = 3.0;   // m/s^2
  double b_max = 3.0;   // m/s^2
};

struct AttentionWeights {
  double w_l = 1.0;
  double w_m = 0.0;
};

struct MobilParams {
  double b_safe = -4.0;     // m/s^2, negative
  double a_th = 0.1;        // m/s^2
  double politeness = 0.5;  // in [0, 1]
};

/// Ego speed, bumper-to-bumper headway and approach rate (v - v_leader).
struct LeaderContext {
  double v = 0.0;
  double d = 0.0;
  double dv = 0.0;
};

/// Aggressive and timid ends of a parameter range plus the logistic slope.
struct ParamBounds {
  double agg = 1.0;
  double tim = 0.0;
  double slope = 4.0;
};

/// One row of the disposition table: value for the most aggressive and the
/// most timid driver.
struct ParamRange {
  double aggressive = 0.0;
  double timid = 0.0;

  double lo() const { return std::min(aggressive, timid); }
  double hi() const { return std::max(aggressive, timid); }
  double midpoint() const { return 0.5 * (aggressive + timid); }
  double at(double aggressiveness) const { return timid + aggressiveness * (aggressive - timid); }
  bool contains(double x) const { return x >= lo() && x <= hi(); }
};

/// Driver parameter ranges, defaults are the published disposition table.
struct DispositionBounds {
  ParamRange v_des{25.0, 15.0};
  ParamRange T_des{0.5, 2.0};
  ParamRange d_min{1.0, 5.0};
  ParamRange a_max{4.0, 2.0};
  ParamRange b_max{4.0, 2.0};
  ParamRange b_safe{-5.0, -3.0};
  ParamRange a_th{0.0, 0.2};

  /// The five IDM ranges in IdmParams field order (v_des, d_min, T_des, a_max, b_max).
  std::array<ParamRange, 5> idm_ranges() const { return {v_des, d_min, T_des, a_max, b_max}; }
};

enum class GapMode { Plain, Relu };

/// Clip applied to the raw IDM output. FloorBelow bounds decelerations;
/// LiteralMin is min(f, floor), kept only so both readings can be compared.
enum class ClipMode { FloorBelow, LiteralMin };

enum class AttentionTarget { Leader, RampProjection };

inline const char* to_string(AttentionTarget t) {
  return t == AttentionTarget::Leader ? "leader" : "ramp";
}

inline void validate(const IdmParams& p) {
  if (!(p.v_des > 0.0) || !(p.T_des > 0.0) || !(p.a_max > 0.0) || !(p.b_max > 0.0) || !(p.d_min >= 0.0)) {
    std::ostringstream os;
    os << "invalid IDM parameters: v_des=" << p.v_des << " d_min=" << p.d_min << " T_des=" << p.T_des
       << " a_max=" << p.a_max << " b_max=" << p.b_max;
    throw std::invalid_argument(os.str());
  }
}

inline bool within(const IdmParams& p, const DispositionBounds& b) {
  return b.v_des.contains(p.v_des) && b.d_min.contains(p.d_min) && b.T_des.contains(p.T_des) &&
         b.a_max.contains(p.a_max) && b.b_max.contains(p.b_max);
}

inline double desired_gap(const IdmParams& p, double v, double dv, GapMode mode = GapMode::Relu) {
  double dynamic = p.T_des * v + v * dv / (2.0 * std::sqrt(p.a_max * p.b_max));
  if (mode == GapMode::Relu) dynamic = std::max(dynamic, 0.0);
  return p.d_min + dynamic;
}

/// Unclipped IDM acceleration with interaction toward a leader.
inline double idm_raw(const IdmParams& p, const LeaderContext& ctx, GapMode mode = GapMode::Relu) {
  if (!(ctx.d > 0.0)) {
    std::ostringstream os;
    os << "IDM headway must be positive, got d=" << ctx.d;
    throw std::domain_error(os.str());
  }
  const double ratio = ctx.v / p.v_des;
  const double gap_ratio = desired_gap(p, ctx.v, ctx.dv, mode) / ctx.d;
  return p.a_max * (1.0 - ratio * ratio * ratio * ratio - gap_ratio * gap_ratio);
}

inline double apply_clip(double accel, double floor, ClipMode clip) {
  return clip == ClipMode::FloorBelow ? std::max(accel, floor) : std::min(accel, floor);
}

inline double idm_accel(const IdmParams& p, const LeaderContext& ctx, GapMode mode = GapMode::Relu,
                        double floor = kDefaultAccelFloor, ClipMode clip = ClipMode::FloorBelow) {
  return apply_clip(idm_raw(p, ctx, mode), floor, clip);
}

/// IDM acceleration on a free road (no leader).
inline double idm_free_accel(const IdmParams& p, double v, double floor = kDefaultAccelFloor) {
  const double ratio = v / p.v_des;
  return std::max(p.a_max * (1.0 - ratio * ratio * ratio * ratio), floor);
}

inline double nidm_blend(double f_l, double f_m, const AttentionWeights& w) { return f_l * w.w_l + f_m * w.w_m; }

/// Slope giving the logistic a unit-scale transition across the range.
/// The magnitude is used so the slope stays positive for ranges whose timid
/// end is the larger value.
inline double logistic_slope(double agg, double tim) { return 4.0 / std::abs(agg - tim); }

inline ParamBounds make_bounds(const ParamRange& r) {
  return {r.aggressive, r.timid, logistic_slope(r.aggressive, r.timid)};
}

inline double logistic_param(double x, const ParamBounds& b) {
  const double s = b.slope * x;
  // stable sigmoid
  const double sig = s >= 0.0 ? 1.0 / (1.0 + std::exp(-s)) : std::exp(s) / (1.0 + std::exp(s));
  return b.tim + (b.agg - b.tim) * sig;
}

/// Accelerations entering the MOBIL criterion. Tilde values are evaluated as
/// if the merge had been performed. c = merging car, n = new follower,
/// o = old follower.
struct MobilAccelerations {
  double a_c = 0.0, a_c_tilde = 0.0;
  double a_n = 0.0, a_n_tilde = 0.0;
  double a_o = 0.0, a_o_tilde = 0.0;
};

inline double mobil_incentive(const MobilAccelerations& m, double politeness) {
  return (m.a_c_tilde - m.a_c) + politeness * ((m.a_n_tilde - m.a_n) + (m.a_o_tilde - m.a_o));
}

inline bool mobil_safe(const MobilAccelerations& m, const MobilParams& mp) { return m.a_n_tilde > mp.b_safe; }

inline bool mobil_decide(const MobilAccelerations& m, const MobilParams& mp) {
  return mobil_safe(m, mp) && mobil_incentive(m, mp.politeness) > mp.a_th;
}

/// C-IDM attention rule for a main-lane driver. The forced yield toward a
/// committed merger takes priority over the passing rule.
inline AttentionTarget cidm_attention_target(double ttm_main, double ttm_ramp, double coop, bool ramp_present,
                                             bool merge_committed, double a_n_if_yield, double b_safe) {
  if (!ramp_present) return AttentionTarget::Leader;
  // coop * inf is undefined for coop == 0; a non-cooperative driver never yields on timing.
  const double threshold = coop > 0.0 ? coop * ttm_main : 0.0;
  if (ttm_ramp < threshold) return AttentionTarget::RampProjection;
  if (merge_committed && a_n_if_yield < b_safe) return AttentionTarget::RampProjection;
  return AttentionTarget::Leader;
}

struct Kinematics {
  double x = 0.0;
  double v = 0.0;
};

/// Constant-acceleration update with speed floored at zero. When the vehicle
/// would stop inside the interval the position is truncated at the stop.
inline Kinematics step_kinematics(double x, double v, double a, double dt) {
  const double v_next = v + a * dt;
  if (v_next >= 0.0) return {x + v * dt + 0.5 * a * dt * dt, v_next};
  const double t_stop = -v / a;
  return {x + v * t_stop + 0.5 * a * t_stop * t_stop, 0.0};
}

}  // namespace nidm
