#include "nidm/dataset.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace nidm;

namespace {

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

/// Scene with main-lane vehicles only; the ramp index points past the end.
Scene main_only(std::vector<VehicleState> vs, std::vector<DriverProfile> ds) {
  Scene s;
  s.vehicles = std::move(vs);
  s.drivers = std::move(ds);
  s.ramp_vehicle = s.vehicles.size();
  return s;
}

DriverProfile driver(const IdmParams& p) {
  DriverProfile d;
  d.idm = p;
  return d;
}

}  // namespace

TEST(Disposition, BetaMeanAtHalf) {
  std::mt19937_64 rng(1);
  std::vector<double> v;
  for (int i = 0; i < 100000; ++i) v.push_back(sample_driver_profile(0.5, 15.0, rng).idm.v_des);
  EXPECT_NEAR(mean_of(v), 20.0, 0.05);
}

TEST(Disposition, EndpointsMapToBounds) {
  const DispositionBounds b;
  EXPECT_EQ(b.v_des.at(0.0), 15.0);
  EXPECT_EQ(b.v_des.at(1.0), 25.0);
  EXPECT_EQ(b.T_des.at(0.0), 2.0);
}

TEST(Disposition, SamplesWithinBounds) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const ScenarioConfig cfg;
  for (int i = 0; i < 5000; ++i) {
    const DriverProfile d = sample_driver_profile(u(rng), cfg.precision, rng, cfg);
    EXPECT_TRUE(within(d.idm, cfg.bounds));
    EXPECT_TRUE(cfg.bounds.b_safe.contains(d.mobil.b_safe));
    EXPECT_TRUE(cfg.bounds.a_th.contains(d.mobil.a_th));
    EXPECT_GE(d.coop, 0.0);
    EXPECT_LE(d.coop, 1.0);
  }
}

TEST(Disposition, UniformPsiCentresOnMidpoints) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const ScenarioConfig cfg;
  const int n = 100000;
  std::array<std::vector<double>, 5> xs;
  for (int i = 0; i < n; ++i) {
    const DriverProfile d = sample_driver_profile(u(rng), cfg.precision, rng, cfg);
    xs[0].push_back(d.idm.v_des);
    xs[1].push_back(d.idm.d_min);
    xs[2].push_back(d.idm.T_des);
    xs[3].push_back(d.idm.a_max);
    xs[4].push_back(d.idm.b_max);
  }
  const auto ranges = cfg.bounds.idm_ranges();
  for (std::size_t k = 0; k < 5; ++k) {
    // Var(psi~) for psi ~ U(0,1) mixed Beta is at most 1/4; 5 sigma bound
    const double width = ranges[k].hi() - ranges[k].lo();
    EXPECT_NEAR(mean_of(xs[k]), ranges[k].midpoint(), 5.0 * width * 0.5 / std::sqrt(n));
  }
}

TEST(Disposition, RejectsInvalidPsi) {
  std::mt19937_64 rng(1);
  EXPECT_THROW(sample_driver_profile(1.5, 15.0, rng), std::invalid_argument);
  EXPECT_THROW(sample_driver_profile(0.5, 0.0, rng), std::invalid_argument);
}

TEST(Scene, CountsAndSpacing) {
  const ScenarioConfig cfg;
  std::set<std::size_t> seen;
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    const Scene s = populate_scene(seed, cfg);
    seen.insert(s.vehicles.size());
    EXPECT_GE(s.vehicles.size(), 4u);
    EXPECT_LE(s.vehicles.size(), 7u);
    EXPECT_EQ(s.vehicles[s.ramp_vehicle].lane, Lane::Ramp);
    for (const auto& v : s.vehicles) EXPECT_GE(v.v, 0.0);
    for (std::size_t i = 0; i + 1 < s.ramp_vehicle; ++i)
      EXPECT_GT(s.vehicles[i + 1].x - cfg.vehicle_length - s.vehicles[i].x, 0.0);
  }
  EXPECT_EQ(seen.size(), 4u);
}

TEST(Scene, Deterministic) {
  const ScenarioConfig cfg;
  const Scene a = populate_scene(77, cfg), b = populate_scene(77, cfg);
  ASSERT_EQ(a.vehicles.size(), b.vehicles.size());
  for (std::size_t i = 0; i < a.vehicles.size(); ++i) {
    EXPECT_EQ(a.vehicles[i].x, b.vehicles[i].x);
    EXPECT_EQ(a.vehicles[i].v, b.vehicles[i].v);
    EXPECT_EQ(a.drivers[i].idm.v_des, b.drivers[i].idm.v_des);
  }
}

TEST(Ttm, Examples) {
  const RoadGeometry road;
  EXPECT_DOUBLE_EQ(compute_ttm({Lane::Ramp, road.ramp_length - 50.0, 25.0, 0.0}, road), 2.0);
  EXPECT_DOUBLE_EQ(compute_ttm({Lane::Main, road.merge_point - 50.0, 25.0, 0.0}, road), 2.0);
  EXPECT_TRUE(std::isinf(compute_ttm({Lane::Ramp, 10.0, 0.0, 0.0}, road)));
  EXPECT_EQ(compute_ttm({Lane::Ramp, road.ramp_length, 0.0, 0.0}, road), 0.0);
  EXPECT_EQ(compute_ttm({Lane::Main, road.merge_point, 20.0, 0.0}, road), 0.0);
}

TEST(Geometry, ProjectionAndDistance) {
  const RoadGeometry road;
  EXPECT_DOUBLE_EQ(road.project(road.ramp_length), road.merge_point);
  EXPECT_DOUBLE_EQ(road.project(road.ramp_length - 30.0), road.merge_point - 30.0);
  EXPECT_NEAR(road.distance_to_merge(road.ramp_length), 0.0, 1e-12);
  EXPECT_NEAR(road.distance_to_merge(road.ramp_length - 40.0), 40.0, 1e-9);
}

TEST(Simulator, FreeFlowHoldsDesiredSpeed) {
  ScenarioConfig cfg;
  const IdmParams p{22.0, 2.0, 1.5, 2.0, 2.0};
  const Scene s = main_only({{Lane::Main, 0.0, 22.0, 0.0}}, {driver(p)});
  const EpisodeLog log = simulate_episode(s, cfg);
  ASSERT_EQ(log.steps.size(), 100u);
  for (const auto& rec : log.steps) EXPECT_NEAR(rec.vehicles[0].v, 22.0, 0.1);
}

TEST(Simulator, CarFollowingReachesFixedPoint) {
  ScenarioConfig cfg;
  const double v_lead = 6.0;
  const IdmParams lead{v_lead, 2.0, 1.5, 2.0, 2.0};
  const IdmParams follower{15.0, 5.0, 2.0, 2.0, 2.0};  // timid end of every range
  const Scene s = main_only({{Lane::Main, 0.0, 8.0, 0.0}, {Lane::Main, 60.0, v_lead, 0.0}},
                            {driver(follower), driver(lead)});
  const EpisodeLog log = simulate_episode(s, cfg, 200.0);
  ASSERT_FALSE(log.collided);
  const auto& last = log.steps.back().vehicles;
  EXPECT_NEAR(last[1].v, v_lead, 1e-9);
  const double gap = last[1].x - cfg.vehicle_length - last[0].x;
  // Full IDM fixed point s* / sqrt(1 - (v/v_des)^4); the desired-gap rule
  // d_min + T v is the headway term alone.
  const double s_star = follower.d_min + follower.T_des * v_lead;
  const double fixed = s_star / std::sqrt(1.0 - std::pow(v_lead / follower.v_des, 4.0));
  EXPECT_NEAR(gap, fixed, 1e-3 * fixed);
  EXPECT_NEAR(gap, s_star, 0.05 * s_star);
}

TEST(Simulator, GroundTruthEpisodesAreCollisionFree) {
  const ScenarioConfig cfg;
  const auto logs = generate_episodes(300, 1234, cfg);
  std::size_t merged = 0;
  for (const auto& log : logs) {
    EXPECT_FALSE(log.collided) << "seed " << log.seed;
    merged += log.merge_step ? 1 : 0;
    for (const auto& rec : log.steps) {
      for (const auto& v : rec.vehicles) {
        EXPECT_GE(v.v, 0.0);
        EXPECT_GE(v.a, cfg.accel_floor);
      }
      for (std::size_t i = 0; i < rec.vehicles.size(); ++i) {
        if (rec.vehicles[i].lane != Lane::Main) continue;
        if (const auto lead = leader_of(rec.vehicles, i)) {
          EXPECT_GT(rec.vehicles[*lead].x - cfg.vehicle_length - rec.vehicles[i].x, 0.0);
        }
      }
    }
  }
  EXPECT_GT(merged, 150u);
}

TEST(Simulator, IdenticalSeedIdenticalLog) {
  const ScenarioConfig cfg;
  const EpisodeLog a = simulate_episode(populate_scene(5, cfg), cfg);
  const EpisodeLog b = simulate_episode(populate_scene(5, cfg), cfg);
  ASSERT_EQ(a.steps.size(), b.steps.size());
  for (std::size_t t = 0; t < a.steps.size(); ++t)
    for (std::size_t i = 0; i < a.steps[t].vehicles.size(); ++i) {
      EXPECT_EQ(a.steps[t].vehicles[i].x, b.steps[t].vehicles[i].x);
      EXPECT_EQ(a.steps[t].vehicles[i].v, b.steps[t].vehicles[i].v);
      EXPECT_EQ(a.steps[t].vehicles[i].a, b.steps[t].vehicles[i].a);
      EXPECT_EQ(a.steps[t].attention[i], b.steps[t].attention[i]);
    }
  EXPECT_EQ(a.merge_step, b.merge_step);
}

TEST(Simulator, AttentionReplaysFromLoggedState) {
  const ScenarioConfig cfg;
  std::size_t ramp_attention = 0;
  for (const auto& log : generate_episodes(60, 99, cfg)) {
    const std::size_t r = log.ramp_vehicle;
    for (const auto& rec : log.steps) {
      const auto& vs = rec.vehicles;
      for (std::size_t i = 0; i < vs.size(); ++i) {
        if (vs[i].lane != Lane::Main) continue;
        AttentionTarget want = AttentionTarget::Leader;
        const RampRelation rr = ramp_relation(vs, i, r, log.road, log.vehicle_length);
        if (vs[r].lane == Lane::Ramp && rr.present) {
          const double f_m =
              idm_accel(log.drivers[i].idm, {vs[i].v, rr.gap, vs[i].v - vs[r].v}, GapMode::Relu, cfg.accel_floor);
          want = cidm_attention_target(compute_ttm(vs[i], log.road), compute_ttm(vs[r], log.road), log.drivers[i].coop,
                                       true, rec.merge_committed, f_m, log.drivers[i].mobil.b_safe);
        }
        EXPECT_EQ(rec.attention[i], want);
        ramp_attention += want == AttentionTarget::RampProjection ? 1 : 0;
      }
    }
  }
  EXPECT_GT(ramp_attention, 0u);
}

TEST(Features, AbsentRampVehicleUsesTrainingMean) {
  const ScenarioConfig cfg;
  const auto logs = generate_episodes(20, 3, cfg);
  const Dataset ds = build_dataset(logs, DatasetConfig{});
  bool checked = false;
  for (const auto& w : ds.train)
    for (const auto& f : w.features)
      if (!f.ramp_present()) {
        const auto z = ds.stats.standardize(f);
        const auto filled = ds.stats.filled(f);
        EXPECT_EQ(z[kRampGap], 0.0);
        EXPECT_EQ(filled[kRampGap], ds.stats.feature_mean[kRampGap]);
        EXPECT_EQ(filled[kRampDv], ds.stats.feature_mean[kRampDv]);
        EXPECT_EQ(f.values[kRampPresent], 0.0);
        checked = true;
      }
  EXPECT_TRUE(checked);
}

TEST(Features, RampAtMergePointHasZeroDistance) {
  const RoadGeometry road;
  std::vector<VehicleState> vs = {{Lane::Main, 100.0, 20.0, 0.0}, {Lane::Ramp, road.ramp_length, 10.0, 0.0}};
  const FeatureVector f = extract_features(vs, 0, 0.0, 1, road, 4.0);
  ASSERT_TRUE(f.ramp_present());
  EXPECT_NEAR(f.values[kRampMergeDist], 0.0, 1e-12);
  EXPECT_DOUBLE_EQ(f.values[kRampGap], road.merge_point - 4.0 - 100.0);
  EXPECT_FALSE(f.leader_present());
}

TEST(Dataset, WindowStarts) {
  const DatasetConfig cfg;
  EXPECT_EQ(window_starts(100, cfg), (std::vector<std::size_t>{0, 10, 20}));
  EXPECT_TRUE(window_starts(79, cfg).empty());
}

TEST(Dataset, StandardizedTrainingFeaturesAreUnit) {
  const ScenarioConfig cfg;
  const Dataset ds = build_dataset(generate_episodes(30, 8, cfg), DatasetConfig{});
  std::array<double, kFeatureCount> sum{}, sq{};
  double n = 0.0;
  for (std::size_t e : ds.train_episodes) {
    const EpisodeLog& log = ds.episodes[e];
    for (std::size_t i : target_vehicles(log))
      for (std::size_t t = 0; t < usable_steps(log); ++t) {
        const auto z = ds.stats.standardize(extract_features(log, i, t));
        for (std::size_t j = 0; j < kFeatureCount; ++j) {
          sum[j] += z[j];
          sq[j] += z[j] * z[j];
        }
        n += 1.0;
      }
  }
  for (std::size_t j = 0; j < kFeatureCount; ++j) {
    EXPECT_NEAR(sum[j] / n, 0.0, 1e-6) << feature_names()[j];
    // constant features keep unit scale and zero spread
    if (ds.stats.feature_std[j] != 1.0) {
      EXPECT_NEAR(std::sqrt(sq[j] / n), 1.0, 1e-6) << feature_names()[j];
    }
  }
}

TEST(Dataset, SplitIsByEpisode) {
  const ScenarioConfig cfg;
  const Dataset ds = build_dataset(generate_episodes(50, 4, cfg), DatasetConfig{});
  EXPECT_EQ(ds.train_episodes.size(), 35u);
  EXPECT_EQ(ds.val_episodes.size(), 15u);
  std::set<std::size_t> train(ds.train_episodes.begin(), ds.train_episodes.end());
  for (std::size_t e : ds.val_episodes) EXPECT_FALSE(train.count(e));
  for (const auto& w : ds.train) EXPECT_TRUE(train.count(w.episode));
  for (const auto& w : ds.val) EXPECT_FALSE(train.count(w.episode));
}

TEST(Dataset, WindowShapeAndLeaderIdentity) {
  const ScenarioConfig cfg;
  const DatasetConfig dc;
  const Dataset ds = build_dataset(generate_episodes(20, 6, cfg), dc);
  for (const auto& w : ds.train) {
    ASSERT_EQ(w.features.size(), 80u);
    ASSERT_EQ(w.accel.size(), 80u);
    ASSERT_EQ(w.position.size(), 81u);
    ASSERT_EQ(w.playback.size(), 50u);
    const EpisodeLog& log = ds.episodes[w.episode];
    for (std::size_t k = 0; k < 50; ++k) {
      const auto& vs = log.steps[w.start + dc.history_steps + k].vehicles;
      const auto lead = leader_of(vs, w.vehicle);
      EXPECT_EQ(w.playback.leader_id[k], lead ? static_cast<int>(*lead) : -1);
      if (lead) {
        EXPECT_DOUBLE_EQ(w.playback.leader_x[k], vs[*lead].x - w.position[dc.history_steps]);
      }
    }
  }
}
