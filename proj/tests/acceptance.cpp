// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//
// Criteria 6-10 share one desk-scale pipeline: 50 ground-truth episodes, every
// policy trained for 30 epochs under three seeds, closed-loop evaluation on
// m = 30 scenes x n = 5 traces per checkpoint.

#include "nidm/io.hpp"

#include <Eigen/Dense>

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

using namespace nidm;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double x) {
  std::ostringstream os;
  os << x;
  return os.str();
}

// ---------------------------------------------------------------------------
// oracles kept independent of the library

double oracle_idm(const IdmParams& p, double v, double d, double dv) {
  const double s_star = p.d_min + p.T_des * v + v * dv / (2.0 * std::sqrt(p.a_max * p.b_max));
  return p.a_max * (1.0 - std::pow(v / p.v_des, 4.0) - std::pow(s_star / d, 2.0));
}

/// Gap at which a follower at constant speed v has zero IDM acceleration.
double oracle_fixed_point_gap(const IdmParams& p, double v) {
  return (p.d_min + p.T_des * v) / std::sqrt(1.0 - std::pow(v / p.v_des, 4.0));
}

double oracle_kl_1d(double mq, double vq, double mp, double vp) {
  return 0.5 * (std::log(vp / vq) + (vq + (mq - mp) * (mq - mp)) / vp - 1.0);
}

std::vector<double> ranks(const std::vector<double>& x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * static_cast<double>(i + j);
    i = j + 1;
  }
  return r;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) { return pearson(ranks(a), ranks(b)); }

// ---------------------------------------------------------------------------
// 1-5: analytic and statistical checks

Outcome gradient_integrity() {
  DatasetConfig dc;
  dc.history_steps = 5;
  dc.horizon_steps = 10;
  dc.stride = 25;
  const Dataset ds = build_dataset(generate_episodes(8, 41, ScenarioConfig{}), dc);
  double worst = 0.0;
  std::string worst_name;
  std::size_t instances = 0, blocks = 0;
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    ModelConfig mc = model_config_for(ds);
    mc.hidden = 6;
    mc.latent = 3;
    LatentDriverModel m(DecoderKind::Idm, mc, ds.stats, seed);
    // perturb the decoder away from its zero bias so θ is not at the midpoints
    std::mt19937_64 init(seed);
    std::normal_distribution<double> n(0.0, 0.3);
    for (double& v : m.params().find("idm_decoder.1.b")->value.values()) v = n(init);
    // pick windows whose rollout keeps every clamp and relu input away from its kink
    for (std::size_t start = 0; start + 3 <= ds.train.size(); start += 3) {
      std::vector<const TrainingWindow*> ws{&ds.train[start], &ds.train[start + 1], &ds.train[start + 2]};
      const WindowBatch b = make_batch(ws, ds.stats, dc.history_steps, dc.horizon_steps);
      auto loss = [&](Tape& t) {
        std::mt19937_64 rng(seed * 1000 + start);
        return m.loss(t, b, 0.05, rng).total;
      };
      Tape probe;
      loss(probe);
      if (probe.kink_margin() < 1e-3) continue;
      const auto errs = grad_check(m.params(), loss);
      for (std::size_t k = 0; k < errs.size(); ++k) {
        if (errs[k] > worst || !std::isfinite(errs[k])) {
          worst = errs[k];
          worst_name = m.params()[k].name;
        }
      }
      blocks += errs.size();
      ++instances;
      break;
    }
  }
  const bool ok = instances == 4 && worst < 1e-4;
  return {ok, std::to_string(instances) + " instances, " + std::to_string(blocks) + " parameter blocks, worst relative error " +
                  num(worst) + " (" + worst_name + ")"};
}

Outcome idm_analytics() {
  const IdmParams p{20.0, 2.0, 1.5, 2.0, 2.0};
  const double free = idm_accel(p, {20.0, 1e9, 0.0});
  const double standstill = idm_accel(p, {0.0, 2.0, 0.0});
  const double worked = idm_accel(p, {10.0, 100.0, 0.0}, GapMode::Plain);
  const double oracle = oracle_idm(p, 10.0, 100.0, 0.0);
  bool ok = std::abs(free) < 1e-6 && standstill == 0.0 && std::abs(worked - oracle) <= 1e-9 * std::abs(oracle) &&
            std::abs(oracle - 1.8172) < 5e-5;

  std::size_t violations = 0, checks = 0;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const DispositionBounds b;
  for (int trial = 0; trial < 300; ++trial) {
    const IdmParams q{b.v_des.at(u(rng)), b.d_min.at(u(rng)), b.T_des.at(u(rng)), b.a_max.at(u(rng)), b.b_max.at(u(rng))};
    for (double v = 0.0; v <= 30.0; v += 3.0)
      for (double dv = -8.0; dv <= 8.0; dv += 4.0) {
        double prev = -1e300;
        for (double d = 0.5; d < 250.0; d *= 1.25, ++checks) {
          const double a = idm_accel(q, {v, d, dv});
          if (a < prev) ++violations;
          prev = a;
        }
      }
    for (double d = 2.0; d < 120.0; d *= 1.5)
      for (double dv = -8.0; dv <= 8.0; dv += 4.0) {
        double prev = 1e300;
        for (double v = 0.0; v <= 30.0; v += 0.5, ++checks) {
          const double a = idm_accel(q, {v, d, dv});
          if (a > prev) ++violations;
          prev = a;
        }
      }
    for (double d = 2.0; d < 120.0; d *= 1.5) {
      double prev = 1e300;
      for (double dv = -10.0; dv <= 10.0; dv += 0.5, ++checks) {
        const double a = idm_accel(q, {12.0, d, dv});
        if (a > prev) ++violations;
        prev = a;
      }
    }
  }
  ok = ok && violations == 0;
  return {ok, "free-road |a| " + num(std::abs(free)) + ", standstill a " + num(standstill) + ", worked " + num(worked) +
                  " vs oracle " + num(oracle) + ", monotonicity violations " + std::to_string(violations) + "/" +
                  std::to_string(checks)};
}

Outcome simulator_fidelity() {
  const ScenarioConfig cfg;
  const auto logs = generate_episodes(300, 2024, cfg, thread_count_from_env());
  std::size_t collided = 0;
  for (const auto& l : logs) collided += l.collided ? 1 : 0;

  // steady car-following behind a leader cruising at its own desired speed
  double worst = 0.0;
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> psi(0.0, 1.0), lead_speed(6.0, 14.0);
  std::size_t cases = 0;
  for (int trial = 0; trial < 20; ++trial) {
    DriverProfile follower = sample_driver_profile(psi(rng), cfg.precision, rng, cfg);
    DriverProfile leader = follower;
    leader.idm.v_des = std::min(lead_speed(rng), 0.7 * follower.idm.v_des);
    Scene s;
    s.vehicles = {{Lane::Main, 0.0, leader.idm.v_des, 0.0}, {Lane::Main, 60.0, leader.idm.v_des, 0.0}};
    s.drivers = {follower, leader};
    s.ramp_vehicle = 2;  // no ramp vehicle
    ScenarioConfig long_run = cfg;
    long_run.road.main_length = 1e5;
    const EpisodeLog log = simulate_episode(s, long_run, 200.0);
    const auto& last = log.steps.back().vehicles;
    const double gap = last[1].x - last[0].x - cfg.vehicle_length;
    const double want = oracle_fixed_point_gap(follower.idm, last[1].v);
    worst = std::max(worst, std::abs(gap - want) / want);
    ++cases;
  }
  const bool ok = logs.size() >= 300 && collided == 0 && worst < 0.05;
  return {ok, std::to_string(collided) + "/" + std::to_string(logs.size()) +
                  " episodes collided; worst steady-state gap deviation " + num(100.0 * worst) + "% over " +
                  std::to_string(cases) + " car-following cases"};
}

Outcome disposition_statistics() {
  const ScenarioConfig cfg;
  const double phi = 15.0;
  const std::size_t N = 100000;
  double worst_z = 0.0;
  std::string worst_what;
  std::size_t checks = 0;
  for (double psi : {0.15, 0.5, 0.85}) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(psi * 1000));
    std::array<std::vector<double>, 7> xs;
    for (std::size_t i = 0; i < N; ++i) {
      const DriverProfile d = sample_driver_profile(psi, phi, rng, cfg);
      const double vals[7] = {d.idm.v_des, d.idm.T_des, d.idm.d_min, d.idm.a_max, d.idm.b_max, d.mobil.b_safe, d.mobil.a_th};
      for (std::size_t k = 0; k < 7; ++k) xs[k].push_back(vals[k]);
    }
    const ParamRange ranges[7] = {cfg.bounds.v_des, cfg.bounds.T_des, cfg.bounds.d_min, cfg.bounds.a_max,
                                  cfg.bounds.b_max, cfg.bounds.b_safe, cfg.bounds.a_th};
    const char* names[7] = {"v_des", "T_des", "d_min", "a_max", "b_max", "b_safe", "a_th"};
    for (std::size_t k = 0; k < 7; ++k) {
      const ParamRange& r = ranges[k];
      const double span = r.aggressive - r.timid;
      // Beta(phi psi, phi (1 - psi)) mapped affinely onto the range
      const double mean = r.timid + psi * span;
      const double var = span * span * psi * (1.0 - psi) / (phi + 1.0);
      double m = 0.0;
      for (double x : xs[k]) m += x;
      m /= static_cast<double>(N);
      double s2 = 0.0, s4 = 0.0;
      for (double x : xs[k]) {
        const double d2 = (x - m) * (x - m);
        s2 += d2;
        s4 += d2 * d2;
      }
      const double sample_var = s2 / static_cast<double>(N - 1);
      const double se_mean = std::sqrt(var / static_cast<double>(N));
      // standard error of the variance estimate from the sampled fourth moment
      const double se_var = std::sqrt((s4 / static_cast<double>(N) - sample_var * sample_var) / static_cast<double>(N));
      for (double z : {std::abs(m - mean) / se_mean, std::abs(sample_var - var) / se_var}) {
        ++checks;
        if (z > worst_z) {
          worst_z = z;
          worst_what = std::string(names[k]) + " at psi " + num(psi);
        }
      }
    }
  }
  return {worst_z < 3.0, std::to_string(checks) + " moment checks at 1e5 draws, largest deviation " + num(worst_z) +
                             " standard errors (" + worst_what + ")"};
}

Outcome metric_oracles() {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> n(0.0, 10.0);
  double worst_rwse = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + trial % 9, traces = 1 + trial % 5, H = 100;
    std::vector<std::vector<double>> truth(m, std::vector<double>(H));
    std::vector<std::vector<std::vector<double>>> gen(m, std::vector<std::vector<double>>(traces, std::vector<double>(H)));
    for (auto& t : truth)
      for (double& x : t) x = n(rng);
    for (auto& g : gen)
      for (auto& t : g)
        for (double& x : t) x = n(rng);
    const auto streamed = rwse(truth, gen);
    for (std::size_t t = 0; t < H; ++t) {
      double s = 0.0;
      for (std::size_t i = 0; i < m; ++i)
        for (const auto& tr : gen[i]) s += (truth[i][t] - tr[t]) * (truth[i][t] - tr[t]);
      const double brute = std::sqrt(s / static_cast<double>(m * traces));
      worst_rwse = std::max(worst_rwse, std::abs(streamed[t] - brute) / std::max(1.0, brute));
    }
  }

  std::size_t negative = 0, kl_checks = 0;
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  std::uniform_real_distribution<double> var(0.01, 9.0);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<double> a(1 + trial % 300), b(1 + (trial * 7) % 300);
    const double shift = u(rng);
    for (double& x : a) x = u(rng);
    for (double& x : b) x = 0.3 * u(rng) + shift;
    negative += histogram_kl(a, b, 1 + trial % 100) < 0.0 ? 1 : 0;
    const std::size_t d = 1 + trial % 5;
    std::vector<double> mq(d), vq(d), mp(d), vp(d);
    for (std::size_t k = 0; k < d; ++k) mq[k] = u(rng), mp[k] = u(rng), vq[k] = var(rng), vp[k] = var(rng);
    double oracle = 0.0;
    for (std::size_t k = 0; k < d; ++k) oracle += oracle_kl_1d(mq[k], vq[k], mp[k], vp[k]);
    const double got = nn::diag_gaussian_kl(mq, vq, mp, vp);
    negative += got < 0.0 ? 1 : 0;
    negative += std::abs(got - oracle) > 1e-9 * std::max(1.0, oracle) ? 1 : 0;
    kl_checks += 3;
  }

  const double case_a = nn::diag_gaussian_kl(std::vector<double>{1.0}, std::vector<double>{1.0}, std::vector<double>{0.0},
                                             std::vector<double>{1.0});
  const double case_b = nn::diag_gaussian_kl(std::vector<double>{0.0}, std::vector<double>{4.0}, std::vector<double>{0.0},
                                             std::vector<double>{1.0});
  Tape t;
  nn::DiagGaussian q{t.constant(Tensor::row({0.0})), t.constant(Tensor::row({std::log(4.0)}))};
  nn::DiagGaussian p{t.constant(Tensor::row({0.0})), t.constant(Tensor::row({0.0}))};
  const double case_b_tape = nn::diag_gaussian_kl(q, p).value().item();
  const double want_b = 0.5 * (4.0 - 1.0 - std::log(4.0));
  const bool cases_ok = std::abs(case_a - 0.5) < 1e-9 && std::abs(case_b - want_b) < 1e-9 &&
                        std::abs(case_b_tape - want_b) < 1e-9 && std::abs(want_b - 0.8069) < 5e-5;
  const bool ok = worst_rwse <= 1e-12 && negative == 0 && cases_ok;
  return {ok, "RWSE streaming vs brute force max deviation " + num(worst_rwse) + "; KL property failures " +
                  std::to_string(negative) + "/" + std::to_string(kl_checks) + "; closed-form cases " + num(case_a) +
                  ", " + num(case_b) + " (tape " + num(case_b_tape) + ")"};
}

// ---------------------------------------------------------------------------
// desk-scale pipeline

constexpr std::array<std::uint64_t, 3> kTrainingSeeds = {1, 2, 3};

struct Trained {
  std::unique_ptr<PolicyModel> model;
  std::vector<LossRecord> history;
  bool diverged = false;
  std::string error;
};

struct Desk {
  io::RunConfig cfg;
  Dataset ds;
  std::map<PolicyKind, std::vector<Trained>> models;
  std::vector<Scene> scenes;
  std::vector<RolloutLog> reference;
  std::map<PolicyKind, std::vector<RolloutLog>> logs;  // pooled over seeds
  std::map<PolicyKind, MetricsReport> reports;
};

Desk build_desk() {
  using clock = std::chrono::steady_clock;
  Desk d;
  d.cfg.episodes = 50;
  d.cfg.training.epochs = 30;
  const std::size_t threads = thread_count_from_env();
  auto t0 = clock::now();
  d.ds = build_dataset(generate_episodes(d.cfg.episodes, d.cfg.seed, d.cfg.scenario, threads), d.cfg.dataset);
  std::cout << "  desk dataset: " << d.ds.train.size() << " train / " << d.ds.val.size() << " validation windows"
            << std::endl;
  const ModelConfig mc = [&] {
    ModelConfig m = d.cfg.model;
    m.history_steps = d.ds.config.history_steps;
    m.horizon_steps = d.ds.config.horizon_steps;
    return m;
  }();
  EvalProtocol proto = d.cfg.evaluation;
  d.scenes = evaluation_scenes(proto, d.cfg.scenario);
  d.reference = reference_runs(d.scenes, proto, d.cfg.scenario);
  for (PolicyKind k : kAllPolicyKinds) {
    for (std::uint64_t seed : kTrainingSeeds) {
      Trained tr;
      tr.model = make_model(k, mc, d.ds.stats, seed);
      TrainConfig tc = d.cfg.training;
      tc.seed = seed;
      try {
        tr.history = train_model(*tr.model, d.ds, tc);
      } catch (const DivergenceError& e) {
        tr.diverged = true;
        tr.error = e.what();
      }
      const PolicyModel& model = *tr.model;
      auto logs = closed_loop_eval([&] { return model.make_driver(); }, d.scenes, proto, d.cfg.scenario, threads);
      auto& pool = d.logs[k];
      pool.insert(pool.end(), logs.begin(), logs.end());
      std::cout << "  trained and evaluated " << to_string(k) << " seed " << seed << " ("
                << std::chrono::duration<double>(clock::now() - t0).count() << " s elapsed)" << std::endl;
      d.models[k].push_back(std::move(tr));
    }
    d.reports[k] = compute_metrics(to_string(k), d.reference, d.logs[k]);
  }
  return d;
}

Outcome training_convergence(const Desk& d) {
  bool ok = true;
  std::ostringstream os;
  for (PolicyKind k : {PolicyKind::NIDM, PolicyKind::CVAE}) {
    for (const Trained& tr : d.models.at(k)) {
      if (tr.diverged) {
        ok = false;
        os << to_string(k) << " diverged: " << tr.error << "; ";
        continue;
      }
      bool finite = true;
      for (const auto& r : tr.history)
        finite = finite && std::isfinite(r.l_a) && std::isfinite(r.l_x) && std::isfinite(r.l_kl) && std::isfinite(r.total);
      for (bool val : {false, true}) {
        const auto s = smooth(total_series(tr.history, val), 10);
        const double ratio = s.back() / s.front();
        ok = ok && finite && ratio < 0.5;
        if (&tr == &d.models.at(k).front())
          os << to_string(k) << (val ? " val " : " train ") << num(s.front()) << "->" << num(s.back()) << " ("
             << num(100.0 * ratio) << "%); ";
      }
      ok = ok && finite;
    }
  }
  os << "all three seeds checked";
  return {ok, os.str()};
}

Outcome collision_ordering(const Desk& d) {
  auto rate = [&](PolicyKind k) { return d.reports.at(k).collisions.rate(); };
  const double nidm = rate(PolicyKind::NIDM), cvae = rate(PolicyKind::CVAE);
  const double mlp = rate(PolicyKind::MLP), lstm = rate(PolicyKind::LSTM), lat = rate(PolicyKind::LatentMLP);
  const double best_non_latent = std::min(mlp, lstm);
  const bool order = nidm < cvae && cvae < mlp && cvae < lstm && cvae < lat;
  const bool margin = nidm < best_non_latent / 3.0;
  std::ostringstream os;
  for (PolicyKind k : kAllPolicyKinds)
    os << to_string(k) << " " << d.reports.at(k).collisions.count << "/" << d.reports.at(k).collisions.rollouts << " ("
       << num(100.0 * rate(k)) << "%) ";
  os << "| ordering " << (order ? "holds" : "violated") << ", NIDM < best non-latent/3 " << (margin ? "holds" : "violated");
  return {order && margin, os.str()};
}

Outcome rwse_ordering(const Desk& d) {
  const double dt = d.cfg.scenario.dt;
  const double nidm = d.reports.at(PolicyKind::NIDM).rwse_position_at(5.0, dt);
  const double mlp = d.reports.at(PolicyKind::MLP).rwse_position_at(5.0, dt);
  const double lstm = d.reports.at(PolicyKind::LSTM).rwse_position_at(5.0, dt);
  std::ostringstream os;
  os << "position RWSE at 5 s: NIDM " << num(nidm) << " m, MLP " << num(mlp) << " m, LSTM " << num(lstm) << " m";
  os << " (CVAE " << num(d.reports.at(PolicyKind::CVAE).rwse_position_at(5.0, dt)) << ", LatentMLP "
     << num(d.reports.at(PolicyKind::LatentMLP).rwse_position_at(5.0, dt)) << ")";
  return {nidm <= mlp && nidm <= lstm, os.str()};
}

/// Delegates to a latent driver and records θ and attention after every step.
class InvariantProbe final : public DrivingPolicy {
 public:
  InvariantProbe(std::unique_ptr<DrivingPolicy> inner, const DispositionBounds& b) : inner_(std::move(inner)), b_(b) {
    latent_ = dynamic_cast<LatentDriver*>(inner_.get());
  }
  std::string name() const override { return inner_->name(); }
  void begin(const std::vector<std::vector<ObservedStep>>& h, std::mt19937_64& rng) override {
    inner_->begin(h, rng);
    theta0_ = latent_->theta();
    for (std::size_t r = 0; r < theta0_.rows(); ++r) {
      ++theta_checks;
      if (!within(LatentDriverModel::theta_row(theta0_, r), b_)) ++theta_out_of_bounds;
    }
  }
  std::vector<double> act(const std::vector<FeatureVector>& obs, std::span<const double> rule,
                          std::mt19937_64& rng) override {
    auto a = inner_->act(obs, rule, rng);
    ++steps;
    if (latent_->theta().storage() != theta0_.storage()) ++theta_changes;
    for (const auto& w : latent_->last_attention()) worst_attention = std::max(worst_attention, std::abs(w.w_l + w.w_m - 1.0));
    return a;
  }

  std::size_t steps = 0, theta_changes = 0, theta_checks = 0, theta_out_of_bounds = 0;
  double worst_attention = 0.0;

 private:
  std::unique_ptr<DrivingPolicy> inner_;
  LatentDriver* latent_ = nullptr;
  DispositionBounds b_;
  Tensor theta0_;
};

int run_cli(const std::string& args) {
  const std::string cmd = std::string(NIDM_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string tree_hash(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir));
  std::sort(files.begin(), files.end());
  std::uint64_t h = io::fnv1a("");
  for (const auto& f : files) h = io::fnv1a(io::read_text(dir / f), io::fnv1a(f.string(), h));
  return io::hex64(h);
}

Outcome structural_invariants(const Desk& d) {
  const DispositionBounds& bounds = d.cfg.model.bounds;
  // θ and attention on trained NIDM instances in closed loop
  std::size_t steps = 0, changes = 0, theta_checks = 0, out_of_bounds = 0;
  double worst_attention = 0.0;
  EvalProtocol proto = d.cfg.evaluation;
  for (const Trained& tr : d.models.at(PolicyKind::NIDM)) {
    for (std::size_t s = 0; s < d.scenes.size(); ++s)
      for (std::size_t j = 0; j < proto.n_traces; ++j) {
        InvariantProbe probe(tr.model->make_driver(), bounds);
        std::mt19937_64 rng(trace_seed(proto, s, j));
        run_closed_loop(probe, d.scenes[s], d.cfg.scenario, proto, rng);
        steps += probe.steps;
        changes += probe.theta_changes;
        theta_checks += probe.theta_checks;
        out_of_bounds += probe.theta_out_of_bounds;
        worst_attention = std::max(worst_attention, probe.worst_attention);
      }
    // open-loop samples on validation windows
    const auto* m = dynamic_cast<const LatentDriverModel*>(tr.model.get());
    std::mt19937_64 rng(3);
    for (std::size_t w = 0; w < d.ds.val.size(); w += 7)
      for (const auto& r : m->predict(d.ds.val[w], 10, rng)) {
        ++theta_checks;
        if (!within(r.theta, bounds)) ++out_of_bounds;
        for (const auto& a : r.attention) worst_attention = std::max(worst_attention, std::abs(a.w_l + a.w_m - 1.0));
      }
  }

  // accelerations in every closed-loop log and every ground-truth episode
  double min_accel = 1e300;
  for (const auto& [k, logs] : d.logs)
    for (const auto& l : logs)
      for (std::size_t t = 0; t + 1 < l.states.size(); ++t)
        for (const auto& v : l.states[t]) min_accel = std::min(min_accel, v.a);
  for (const auto& e : d.ds.episodes)
    for (const auto& st : e.steps)
      for (const auto& v : st.vehicles) min_accel = std::min(min_accel, v.a);

  // CLI outputs under a repeated seed
  const fs::path root = fs::temp_directory_path() / ("nidm_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  io::write_json(root / "cfg.json", {{"episodes", 8},
                                     {"dataset", {{"history_steps", 5}, {"horizon_steps", 10}, {"stride", 20}}},
                                     {"model", {{"hidden", 8}, {"latent", 3}}},
                                     {"training", {{"epochs", 1}, {"batch_size", 16}}},
                                     {"evaluation", {{"warmup", 0.5}, {"m_scenes", 3}, {"n_traces", 2}}}});
  const std::string cfg = "--config " + (root / "cfg.json").string() + " --seed 17 ";
  std::vector<std::string> hashes[2];
  int failures = 0;
  for (int rep = 0; rep < 2; ++rep) {
    const fs::path r = root / std::to_string(rep);
    failures += run_cli("gen-data " + cfg + "--out " + (r / "data").string()) != 0;
    for (const char* k : {"nidm", "cvae", "mlp", "lstm", "latent-mlp"})
      failures += run_cli("train " + cfg + "--policy " + k + " --dataset " + (r / "data").string() + " --out " +
                          (r / k).string()) != 0;
    failures += run_cli("eval " + cfg + "--dataset " + (r / "data").string() + " --checkpoint " + (r / "nidm").string() +
                        " --checkpoint " + (r / "cvae").string() + " --checkpoint " + (r / "mlp").string() +
                        " --checkpoint " + (r / "lstm").string() + " --checkpoint " + (r / "latent-mlp").string() +
                        " --out " + (r / "eval").string()) != 0;
    failures += run_cli("inspect-latent " + cfg + "--checkpoint " + (r / "nidm").string() + " --dataset " +
                        (r / "data").string() + " --out " + (r / "latent").string()) != 0;
    for (const char* sub : {"data", "nidm", "cvae", "mlp", "lstm", "latent-mlp", "eval", "latent"})
      hashes[rep].push_back(fs::exists(r / sub) ? tree_hash(r / sub) : "missing");
  }
  std::size_t mismatched = 0;
  for (std::size_t i = 0; i < hashes[0].size(); ++i) mismatched += hashes[0][i] != hashes[1][i] ? 1 : 0;
  fs::remove_all(root);

  const bool ok = out_of_bounds == 0 && worst_attention <= 1e-9 && changes == 0 && steps > 0 &&
                  min_accel >= kDefaultAccelFloor && failures == 0 && mismatched == 0;
  std::ostringstream os;
  os << "theta out of bounds " << out_of_bounds << "/" << theta_checks << "; theta changed in " << changes << "/" << steps
     << " closed-loop steps; worst attention-sum error " << num(worst_attention) << "; minimum acceleration "
     << num(min_accel) << "; CLI runs failed " << failures << ", output trees differing " << mismatched << "/"
     << hashes[0].size();
  return {ok, os.str()};
}

Outcome latent_informativeness(const Desk& d) {
  const auto* m = dynamic_cast<const LatentDriverModel*>(d.models.at(PolicyKind::NIDM).front().model.get());
  auto prior_means = [&](const std::vector<TrainingWindow>& ws) {
    std::vector<const TrainingWindow*> p;
    for (const auto& w : ws) p.push_back(&w);
    return m->prior_mean(p);
  };
  const Tensor zt = prior_means(d.ds.train), zv = prior_means(d.ds.val);
  const std::size_t L = zt.cols();
  Eigen::MatrixXd X(zt.rows(), L + 1);
  Eigen::VectorXd y(zt.rows());
  for (std::size_t r = 0; r < zt.rows(); ++r) {
    for (std::size_t k = 0; k < L; ++k) X(r, k) = zt.at(r, k);
    X(r, L) = 1.0;
    y(r) = d.ds.train[r].psi;
  }
  const Eigen::VectorXd w = X.colPivHouseholderQr().solve(y);
  std::vector<double> pred, psi;
  for (std::size_t r = 0; r < zv.rows(); ++r) {
    double s = w(L);
    for (std::size_t k = 0; k < L; ++k) s += w(k) * zv.at(r, k);
    pred.push_back(s);
    psi.push_back(d.ds.val[r].psi);
  }
  const double rho = spearman(pred, psi);
  return {std::abs(rho) >= 0.5, "linear probe fit on " + std::to_string(zt.rows()) + " training windows, Spearman rho " +
                                    num(rho) + " on " + std::to_string(zv.rows()) + " validation windows"};
}

}  // namespace

int main() {
  using clock = std::chrono::steady_clock;
  const char* titles[] = {"",
                          "gradient integrity",
                          "IDM analytics",
                          "simulator fidelity",
                          "disposition statistics",
                          "metric oracles",
                          "training convergence",
                          "collision ordering",
                          "RWSE ordering",
                          "structural invariants",
                          "latent informativeness"};
  std::vector<std::pair<int, Outcome>> results;
  auto run = [&](int id, const std::function<Outcome()>& fn) {
    const auto t0 = clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(clock::now() - t0).count();
    std::cout << "criterion " << id << " [" << titles[id] << "] " << (o.pass ? "PASS" : "FAIL") << ": " << o.detail
              << " (" << num(secs) << " s)" << std::endl;
    results.emplace_back(id, o);
  };

  run(1, gradient_integrity);
  run(2, idm_analytics);
  run(3, simulator_fidelity);
  run(4, disposition_statistics);
  run(5, metric_oracles);

  std::cout << "building desk-scale pipeline (5 policies x 3 seeds)" << std::endl;
  std::optional<Desk> desk;
  try {
    desk = build_desk();
  } catch (const std::exception& e) {
    std::cout << "desk pipeline failed: " << e.what() << std::endl;
  }
  auto with_desk = [&](Outcome (*fn)(const Desk&)) {
    return [&, fn] { return desk ? fn(*desk) : Outcome{false, "desk pipeline unavailable"}; };
  };
  run(6, with_desk(training_convergence));
  run(7, with_desk(collision_ordering));
  run(8, with_desk(rwse_ordering));
  run(9, with_desk(structural_invariants));
  run(10, with_desk(latent_informativeness));

  std::size_t passed = 0;
  for (const auto& [id, o] : results) passed += o.pass ? 1 : 0;
  std::cout << passed << "/" << results.size() << " criteria passed" << std::endl;
  return passed == results.size() ? 0 : 1;
}
