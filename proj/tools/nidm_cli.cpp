// nidm_cli: gen-data, train, eval and inspect-latent.
//
// Exit codes: 0 success, 2 configuration / validation / IO error,
// 3 training divergence, 1 anything else.

#include "nidm/io.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <optional>

namespace {

using namespace nidm;
namespace fs = std::filesystem;
using io::ConfigError;
using io::json;

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "JSON run configuration (unknown keys are rejected)");
  cmd->add_option("--seed", o.seed, "master seed");
  cmd->add_option("--out", o.out, "output directory")->required();
}

io::RunConfig base_config(const CommonOptions& o) {
  io::RunConfig cfg = o.config.empty() ? io::RunConfig{} : io::load_config(o.config);
  if (o.seed) {
    cfg.seed = *o.seed;
    cfg.dataset.seed = *o.seed;
    cfg.training.seed = *o.seed;
  }
  return cfg;
}

void make_out_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw ConfigError("cannot create " + p.string() + ": " + ec.message());
}

// ---------------------------------------------------------------------------

int run_gen_data(const CommonOptions& o, std::optional<std::size_t> episodes) {
  io::RunConfig cfg = base_config(o);
  if (episodes) cfg.episodes = *episodes;
  if (cfg.episodes < 2) throw ConfigError("at least 2 episodes are needed for a train/validation split");
  cfg = io::from_json(io::to_json(cfg));  // re-validate after overrides
  auto logs = generate_episodes(cfg.episodes, cfg.seed, cfg.scenario, thread_count_from_env());
  std::size_t collided = 0;
  for (const auto& l : logs) collided += l.collided ? 1 : 0;
  Dataset ds;
  try {
    ds = build_dataset(std::move(logs), cfg.dataset);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  io::write_dataset(o.out, ds, cfg);
  std::cerr << "gen-data: " << ds.episodes.size() << " episodes (" << collided << " collided), "
            << ds.train.size() << " train / " << ds.val.size() << " validation windows -> " << o.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

int run_train(const CommonOptions& o, const std::string& policy, const std::string& dataset_dir,
              std::optional<std::size_t> epochs) {
  PolicyKind kind;
  try {
    kind = parse_policy_kind(policy);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  io::LoadedDataset loaded = io::read_dataset(dataset_dir);
  io::RunConfig cfg = o.config.empty() ? loaded.config : io::load_config(o.config);
  if (o.seed) cfg.training.seed = *o.seed;
  else if (o.config.empty()) cfg.training.seed = loaded.config.seed;
  if (epochs) cfg.training.epochs = *epochs;
  try {
    cfg.training.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  const Dataset& ds = loaded.dataset;
  ModelConfig mc = cfg.model;
  mc.history_steps = ds.config.history_steps;
  mc.horizon_steps = ds.config.horizon_steps;
  mc.dt = ds.dt;
  mc.vehicle_length = ds.vehicle_length;
  mc.accel_floor = loaded.config.scenario.accel_floor;
  mc.bounds = loaded.config.scenario.bounds;
  auto model = make_model(kind, mc, ds.stats, cfg.training.seed);

  make_out_dir(o.out);
  std::vector<LossRecord> seen;
  const std::size_t per_epoch = (ds.train.size() + cfg.training.batch_size - 1) / cfg.training.batch_size;
  try {
    train_model(*model, ds, cfg.training, [&](const LossRecord& r) {
      seen.push_back(r);
      if (r.validation && (r.iter + 1) % per_epoch == 0)
        std::cerr << "train " << to_string(kind) << ": epoch " << (r.iter + 1) / per_epoch << " val total "
                  << r.total << "\n";
    });
  } catch (const DivergenceError& e) {
    io::write_text(fs::path(o.out) / "losses.csv", io::loss_csv(seen));
    std::cerr << "error: " << e.what() << "\n"
              << "partial loss history written to " << (fs::path(o.out) / "losses.csv").string() << "\n";
    return 3;
  }
  io::write_text(fs::path(o.out) / "losses.csv", io::loss_csv(seen));
  const json extra = {{"dataset_config_hash", io::config_hash(loaded.config)},
                      {"training", io::to_json(cfg)["training"]},
                      {"iterations", seen.empty() ? 0 : seen.back().iter + 1}};
  io::write_checkpoint(o.out, *model, cfg.training.seed, extra);
  std::cerr << "train " << to_string(kind) << ": checkpoint -> " << o.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

int run_eval(const CommonOptions& o, const std::vector<std::string>& checkpoints, const std::string& dataset_dir,
             std::optional<std::size_t> m, std::optional<std::size_t> n) {
  if (checkpoints.empty()) throw ConfigError("eval needs at least one --checkpoint");
  std::optional<io::LoadedDataset> loaded;
  if (!dataset_dir.empty()) loaded = io::read_dataset(dataset_dir);
  io::RunConfig cfg = !o.config.empty() ? io::load_config(o.config) : loaded ? loaded->config : io::RunConfig{};
  EvalProtocol proto = cfg.evaluation;
  if (o.seed) proto.seed = *o.seed;
  if (m) proto.m_scenes = *m;
  if (n) proto.n_traces = *n;
  proto.accel_floor = cfg.scenario.accel_floor;
  try {
    proto.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }

  std::vector<io::LoadedCheckpoint> models;
  for (const auto& c : checkpoints) {
    models.push_back(io::read_checkpoint(c));
    const auto& info = models.back().info;
    if (loaded && !(info.stats == loaded->dataset.stats))
      throw ConfigError("checkpoint " + c + " was trained with standardization statistics that differ from dataset " +
                        dataset_dir);
    if (!(models.front().info.stats == info.stats))
      throw ConfigError("checkpoints " + checkpoints.front() + " and " + c + " use different standardization statistics");
    if (info.model.dt != cfg.scenario.dt)
      throw ConfigError("checkpoint " + c + " uses dt " + io::fmt(info.model.dt) + " but the scenario uses " +
                        io::fmt(cfg.scenario.dt));
    const auto warm_steps = static_cast<std::size_t>(std::llround(proto.warmup / cfg.scenario.dt));
    if (warm_steps != info.model.history_steps)
      throw ConfigError("checkpoint " + c + " conditions on " + std::to_string(info.model.history_steps) +
                        " history steps but the evaluation warm-up is " + std::to_string(warm_steps) + " steps");
  }

  const std::size_t threads = thread_count_from_env();
  const auto scenes = evaluation_scenes(proto, cfg.scenario);
  const auto reference = reference_runs(scenes, proto, cfg.scenario);

  // Checkpoints of the same policy kind are pooled into one report.
  std::vector<std::string> order;
  std::map<std::string, std::vector<RolloutLog>> pooled;
  json ckpt_ids = json::array();
  for (std::size_t k = 0; k < models.size(); ++k) {
    const PolicyModel& model = *models[k].model;
    const std::string name = to_string(model.kind());
    std::cerr << "eval: " << name << " (" << checkpoints[k] << ")\n";
    auto logs = closed_loop_eval([&] { return model.make_driver(); }, scenes, proto, cfg.scenario, threads);
    if (!pooled.count(name)) order.push_back(name);
    auto& dst = pooled[name];
    dst.insert(dst.end(), std::make_move_iterator(logs.begin()), std::make_move_iterator(logs.end()));
    ckpt_ids.push_back({{"policy", name}, {"seed", models[k].info.seed}, {"weights_hash", models[k].info.weights_hash}});
  }
  std::vector<MetricsReport> reports;
  for (const auto& name : order) reports.push_back(compute_metrics(name, reference, pooled[name]));

  make_out_dir(o.out);
  const fs::path out = o.out;
  io::write_text(out / "rwse.csv", io::rwse_csv(reports, cfg.scenario.dt));
  io::write_text(out / "summary.csv", io::summary_csv(reports));
  io::write_text(out / "collisions.csv", io::collision_csv(reports));
  io::write_json(out / "run_manifest.json", {{"schema_version", io::kSchemaVersion},
                                             {"kind", "evaluation"},
                                             {"m", proto.m_scenes},
                                             {"n", proto.n_traces},
                                             {"eval_seed", proto.seed},
                                             {"warmup_s", proto.warmup},
                                             {"episode_duration_s", proto.episode_duration},
                                             {"config_hash", io::config_hash(cfg)},
                                             {"kl_dimensions", kKlDimensions},
                                             {"checkpoints", ckpt_ids}});
  for (const auto& r : reports)
    std::cerr << "  " << r.policy << ": collisions " << r.collisions.count << "/" << r.collisions.rollouts
              << ", mean KL " << r.kl_mean << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

int run_inspect_latent(const CommonOptions& o, const std::string& checkpoint, const std::string& dataset_dir,
                       std::size_t windows) {
  io::LoadedCheckpoint ck = io::read_checkpoint(checkpoint);
  const auto* model = dynamic_cast<const LatentDriverModel*>(ck.model.get());
  if (!model)
    throw ConfigError(std::string("inspect-latent supports NIDM and CVAE checkpoints, not ") + to_string(ck.info.kind));
  io::LoadedDataset loaded = io::read_dataset(dataset_dir);
  if (!(ck.info.stats == loaded.dataset.stats))
    throw ConfigError("checkpoint " + checkpoint + " does not match the standardization of dataset " + dataset_dir);
  const std::uint64_t seed = o.seed.value_or(loaded.config.seed);
  const auto& val = loaded.dataset.val;
  std::vector<std::size_t> idx(val.size());
  std::iota(idx.begin(), idx.end(), 0);
  if (windows < idx.size()) {
    std::mt19937_64 rng(derive_seed(seed, seed_stream::kSplit, 1));
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(windows);
    std::sort(idx.begin(), idx.end());
  }
  std::vector<const TrainingWindow*> sel;
  for (std::size_t i : idx) sel.push_back(&val[i]);
  make_out_dir(o.out);
  io::write_text(fs::path(o.out) / "latent.csv", io::latent_csv(*model, sel));
  std::cerr << "inspect-latent: " << sel.size() << " validation windows -> " << o.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neural intelligent driver model: data generation, training and evaluation"};
  app.require_subcommand(1);

  CommonOptions gen_o, train_o, eval_o, latent_o;
  std::optional<std::size_t> episodes, epochs, m, n;
  std::string policy, train_dataset, eval_dataset, latent_dataset, latent_ckpt;
  std::vector<std::string> eval_ckpts;
  std::size_t latent_windows = 5000;

  auto* gen = app.add_subcommand("gen-data", "simulate ground-truth episodes and write a dataset directory");
  add_common(gen, gen_o);
  gen->add_option("--episodes", episodes, "number of episodes");

  auto* train = app.add_subcommand("train", "train one policy on a dataset directory");
  add_common(train, train_o);
  train->add_option("--policy", policy, "mlp | lstm | latent-mlp | cvae | nidm")->required();
  train->add_option("--dataset", train_dataset, "dataset directory from gen-data")->required();
  train->add_option("--epochs", epochs, "training epochs");

  auto* eval = app.add_subcommand("eval", "closed-loop evaluation of one or more checkpoints");
  add_common(eval, eval_o);
  eval->add_option("--checkpoint", eval_ckpts, "checkpoint directory (repeatable)")->required();
  eval->add_option("--dataset", eval_dataset, "dataset the checkpoints must match");
  eval->add_option("--m", m, "number of evaluation scenes");
  eval->add_option("--n", n, "rollouts per scene");

  auto* latent = app.add_subcommand("inspect-latent", "export prior-mean latents of validation windows");
  add_common(latent, latent_o);
  latent->add_option("--checkpoint", latent_ckpt, "NIDM or CVAE checkpoint directory")->required();
  latent->add_option("--dataset", latent_dataset, "dataset directory")->required();
  latent->add_option("--windows", latent_windows, "number of validation windows");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) return run_gen_data(gen_o, episodes);
    if (train->parsed()) return run_train(train_o, policy, train_dataset, epochs);
    if (eval->parsed()) return run_eval(eval_o, eval_ckpts, eval_dataset, m, n);
    if (latent->parsed()) return run_inspect_latent(latent_o, latent_ckpt, latent_dataset, latent_windows);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
