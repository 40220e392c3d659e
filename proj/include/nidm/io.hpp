#pragma once

// Persistence: the JSON run configuration (unknown keys rejected), dataset
// directories (JSON manifest + per-episode CSV), checkpoints (JSON manifest +
// little-endian float64 blob) and the metrics / loss / latent CSV writers.

#include "nidm/baselines.hpp"
#include "nidm/evaluation.hpp"

#include <json.hpp>

#include <bit>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

namespace nidm::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kCsvSchemaLine = "# nidm schema_version=1";

/// Invalid configuration or input file; mapped to exit code 2 by the CLI.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// formatting helpers

/// Shortest text that parses back to the same double.
inline std::string fmt(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s, const std::string& where) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ConfigError("cannot parse number '" + std::string(s) + "' in " + where);
  return v;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == ',') {
      out.push_back(line.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

/// FNV-1a 64-bit, used for config and file fingerprints.
inline std::uint64_t fnv1a(std::string_view data, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw ConfigError("cannot open " + p.string() + " for writing");
  f << text;
  if (!f) throw ConfigError("failed writing " + p.string());
}

inline std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw ConfigError("cannot open " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline json read_json(const fs::path& p) {
  try {
    return json::parse(read_text(p));
  } catch (const json::parse_error& e) {
    throw ConfigError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

inline void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

inline void require_schema(const json& j, const std::string& kind, const fs::path& where) {
  if (!j.is_object() || !j.contains("schema_version") || !j["schema_version"].is_number_integer())
    throw ConfigError(where.string() + " has no schema_version field");
  if (j["schema_version"].get<int>() != kSchemaVersion)
    throw ConfigError(where.string() + " has unsupported schema_version " + j["schema_version"].dump());
  if (!kind.empty() && j.value("kind", std::string{}) != kind)
    throw ConfigError(where.string() + " is not a " + kind + " file");
}

/// Reads lines of a CSV written by this module, checking the schema line and header.
inline std::vector<std::string> read_csv_rows(const fs::path& p, const std::string& header) {
  std::istringstream in(read_text(p));
  std::string line;
  if (!std::getline(in, line) || line != kCsvSchemaLine)
    throw ConfigError(p.string() + " lacks a supported schema line");
  if (!std::getline(in, line) || line != header) throw ConfigError(p.string() + " has an unexpected header");
  std::vector<std::string> rows;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(line);
  return rows;
}

// ---------------------------------------------------------------------------
// run configuration

struct RunConfig {
  std::uint64_t seed = 7;
  std::size_t episodes = 50;
  ScenarioConfig scenario;
  DatasetConfig dataset;
  ModelConfig model;
  TrainConfig training;
  EvalProtocol evaluation;
  std::size_t latent_windows = 5000;
};

inline json range_json(const ParamRange& r) { return json::array({r.aggressive, r.timid}); }

inline json bounds_json(const DispositionBounds& b) {
  return {{"v_des", range_json(b.v_des)}, {"T_des", range_json(b.T_des)}, {"d_min", range_json(b.d_min)},
          {"a_max", range_json(b.a_max)}, {"b_max", range_json(b.b_max)}, {"b_safe", range_json(b.b_safe)},
          {"a_th", range_json(b.a_th)}};
}

inline ParamRange range_from(const json& j, const std::string& key) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number())
    throw ConfigError("bound '" + key + "' must be [aggressive, timid]");
  return {j[0].get<double>(), j[1].get<double>()};
}

inline DispositionBounds bounds_from(const json& j) {
  DispositionBounds b;
  b.v_des = range_from(j.at("v_des"), "v_des");
  b.T_des = range_from(j.at("T_des"), "T_des");
  b.d_min = range_from(j.at("d_min"), "d_min");
  b.a_max = range_from(j.at("a_max"), "a_max");
  b.b_max = range_from(j.at("b_max"), "b_max");
  b.b_safe = range_from(j.at("b_safe"), "b_safe");
  b.a_th = range_from(j.at("a_th"), "a_th");
  return b;
}

inline json to_json(const RunConfig& c) {
  const auto& s = c.scenario;
  const auto& d = c.dataset;
  const auto& m = c.model;
  const auto& t = c.training;
  const auto& e = c.evaluation;
  return {
      {"schema_version", kSchemaVersion},
      {"seed", c.seed},
      {"episodes", c.episodes},
      {"latent_windows", c.latent_windows},
      {"scenario",
       {{"road",
         {{"main_length", s.road.main_length},
          {"ramp_length", s.road.ramp_length},
          {"merge_point", s.road.merge_point},
          {"ramp_angle_deg", s.road.ramp_angle_deg}}},
        {"bounds", bounds_json(s.bounds)},
        {"precision", s.precision},
        {"politeness", s.politeness},
        {"coop_base", s.coop_base},
        {"coop_slope", s.coop_slope},
        {"vehicle_length", s.vehicle_length},
        {"dt", s.dt},
        {"accel_floor", s.accel_floor},
        {"episode_duration", s.episode_duration},
        {"min_vehicles", s.min_vehicles},
        {"max_vehicles", s.max_vehicles},
        {"init_speed_min", s.init_speed_min},
        {"init_speed_max", s.init_speed_max},
        {"rear_start_max", s.rear_start_max},
        {"extra_gap_max", s.extra_gap_max},
        {"front_limit", s.front_limit},
        {"ramp_start_max", s.ramp_start_max},
        {"max_placement_attempts", s.max_placement_attempts}}},
      {"dataset",
       {{"history_steps", d.history_steps},
        {"horizon_steps", d.horizon_steps},
        {"stride", d.stride},
        {"train_fraction", d.train_fraction}}},
      {"model",
       {{"hidden", m.hidden},
        {"latent", m.latent},
        {"gmm_components", m.gmm_components},
        {"accel_cap", m.accel_cap},
        {"huber_threshold", m.huber_threshold},
        {"gap_guard", m.gap_guard}}},
      {"training",
       {{"lr", t.lr},
        {"beta", t.beta},
        {"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"beta_warmup_iters", t.beta_warmup_iters},
        {"grad_clip", t.grad_clip}}},
      {"evaluation",
       {{"episode_duration", e.episode_duration},
        {"warmup", e.warmup},
        {"m_scenes", e.m_scenes},
        {"n_traces", e.n_traces},
        {"seed", e.seed},
        {"accel_cap", e.accel_cap}}},
  };
}

/// Rejects any key absent from the reference document, naming its dotted path.
inline void check_keys(const json& given, const json& reference, const std::string& path) {
  if (!given.is_object()) throw ConfigError("config entry '" + (path.empty() ? "<root>" : path) + "' must be an object");
  for (auto it = given.begin(); it != given.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!reference.contains(it.key())) throw ConfigError("unknown config key '" + key + "'");
    const json& ref = reference[it.key()];
    if (ref.is_object()) check_keys(it.value(), ref, key);
    else if (ref.is_number() && !it.value().is_number())
      throw ConfigError("config key '" + key + "' must be a number");
  }
}

template <typename T>
T get_as(const json& j, const char* key, const std::string& section) {
  try {
    if constexpr (std::is_unsigned_v<T>) {
      if (!j.at(key).is_number_integer() || j.at(key).get<long long>() < 0)
        throw ConfigError("config key '" + section + "." + key + "' must be a non-negative integer");
    }
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + section + "." + key + "': " + e.what());
  }
}

inline RunConfig from_json(const json& given) {
  const RunConfig defaults;
  const json ref = to_json(defaults);
  check_keys(given, ref, "");
  if (given.contains("schema_version") && given["schema_version"] != kSchemaVersion)
    throw ConfigError("unsupported config schema_version " + given["schema_version"].dump());
  json j = ref;
  j.merge_patch(given);
  RunConfig c;
  c.seed = get_as<std::uint64_t>(j, "seed", "");
  c.episodes = get_as<std::size_t>(j, "episodes", "");
  c.latent_windows = get_as<std::size_t>(j, "latent_windows", "");
  const json& s = j["scenario"];
  const json& r = s["road"];
  c.scenario.road = {get_as<double>(r, "main_length", "scenario.road"), get_as<double>(r, "ramp_length", "scenario.road"),
                     get_as<double>(r, "merge_point", "scenario.road"),
                     get_as<double>(r, "ramp_angle_deg", "scenario.road")};
  c.scenario.bounds = bounds_from(s["bounds"]);
  c.scenario.precision = get_as<double>(s, "precision", "scenario");
  c.scenario.politeness = get_as<double>(s, "politeness", "scenario");
  c.scenario.coop_base = get_as<double>(s, "coop_base", "scenario");
  c.scenario.coop_slope = get_as<double>(s, "coop_slope", "scenario");
  c.scenario.vehicle_length = get_as<double>(s, "vehicle_length", "scenario");
  c.scenario.dt = get_as<double>(s, "dt", "scenario");
  c.scenario.accel_floor = get_as<double>(s, "accel_floor", "scenario");
  c.scenario.episode_duration = get_as<double>(s, "episode_duration", "scenario");
  c.scenario.min_vehicles = get_as<int>(s, "min_vehicles", "scenario");
  c.scenario.max_vehicles = get_as<int>(s, "max_vehicles", "scenario");
  c.scenario.init_speed_min = get_as<double>(s, "init_speed_min", "scenario");
  c.scenario.init_speed_max = get_as<double>(s, "init_speed_max", "scenario");
  c.scenario.rear_start_max = get_as<double>(s, "rear_start_max", "scenario");
  c.scenario.extra_gap_max = get_as<double>(s, "extra_gap_max", "scenario");
  c.scenario.front_limit = get_as<double>(s, "front_limit", "scenario");
  c.scenario.ramp_start_max = get_as<double>(s, "ramp_start_max", "scenario");
  c.scenario.max_placement_attempts = get_as<int>(s, "max_placement_attempts", "scenario");
  const json& d = j["dataset"];
  c.dataset.history_steps = get_as<std::size_t>(d, "history_steps", "dataset");
  c.dataset.horizon_steps = get_as<std::size_t>(d, "horizon_steps", "dataset");
  c.dataset.stride = get_as<std::size_t>(d, "stride", "dataset");
  c.dataset.train_fraction = get_as<double>(d, "train_fraction", "dataset");
  c.dataset.seed = c.seed;
  const json& m = j["model"];
  c.model.hidden = get_as<std::size_t>(m, "hidden", "model");
  c.model.latent = get_as<std::size_t>(m, "latent", "model");
  c.model.gmm_components = get_as<std::size_t>(m, "gmm_components", "model");
  c.model.accel_cap = get_as<double>(m, "accel_cap", "model");
  c.model.huber_threshold = get_as<double>(m, "huber_threshold", "model");
  c.model.gap_guard = get_as<double>(m, "gap_guard", "model");
  c.model.history_steps = c.dataset.history_steps;
  c.model.horizon_steps = c.dataset.horizon_steps;
  c.model.dt = c.scenario.dt;
  c.model.vehicle_length = c.scenario.vehicle_length;
  c.model.accel_floor = c.scenario.accel_floor;
  c.model.bounds = c.scenario.bounds;
  const json& t = j["training"];
  c.training.lr = get_as<double>(t, "lr", "training");
  c.training.beta = get_as<double>(t, "beta", "training");
  c.training.epochs = get_as<std::size_t>(t, "epochs", "training");
  c.training.batch_size = get_as<std::size_t>(t, "batch_size", "training");
  c.training.beta_warmup_iters = get_as<std::size_t>(t, "beta_warmup_iters", "training");
  c.training.grad_clip = get_as<double>(t, "grad_clip", "training");
  c.training.seed = c.seed;
  const json& e = j["evaluation"];
  c.evaluation.episode_duration = get_as<double>(e, "episode_duration", "evaluation");
  c.evaluation.warmup = get_as<double>(e, "warmup", "evaluation");
  c.evaluation.m_scenes = get_as<std::size_t>(e, "m_scenes", "evaluation");
  c.evaluation.n_traces = get_as<std::size_t>(e, "n_traces", "evaluation");
  c.evaluation.seed = get_as<std::uint64_t>(e, "seed", "evaluation");
  c.evaluation.accel_cap = get_as<double>(e, "accel_cap", "evaluation");
  c.evaluation.accel_floor = c.scenario.accel_floor;
  try {
    c.scenario.validate();
    c.dataset.validate();
    c.model.validate();
    c.training.validate();
    c.evaluation.validate();
  } catch (const std::invalid_argument& ex) {
    throw ConfigError(std::string("invalid configuration: ") + ex.what());
  }
  return c;
}

inline RunConfig load_config(const fs::path& p) { return from_json(read_json(p)); }

inline std::string config_hash(const RunConfig& c) { return hex64(fnv1a(to_json(c).dump())); }

// ---------------------------------------------------------------------------
// dataset directory

inline const char* kStepColumns = "step,time,vehicle,lane,x,v,a,attention,merge_committed";
inline const char* kDriverColumns = "vehicle,psi,v_des,d_min,T_des,a_max,b_max,b_safe,a_th,politeness,coop";

inline json stats_json(const Standardization& s) {
  return {{"feature_mean", s.feature_mean}, {"feature_std", s.feature_std}, {"accel_mean", s.accel_mean},
          {"accel_std", s.accel_std},       {"disp_mean", s.disp_mean},     {"disp_std", s.disp_std}};
}

inline Standardization stats_from(const json& j) {
  Standardization s;
  s.feature_mean = j.at("feature_mean").get<std::array<double, kFeatureCount>>();
  s.feature_std = j.at("feature_std").get<std::array<double, kFeatureCount>>();
  s.accel_mean = j.at("accel_mean").get<double>();
  s.accel_std = j.at("accel_std").get<double>();
  s.disp_mean = j.at("disp_mean").get<double>();
  s.disp_std = j.at("disp_std").get<double>();
  return s;
}

inline std::string episode_file(std::size_t k) {
  std::ostringstream os;
  os << "episode_" << std::setw(4) << std::setfill('0') << k;
  return os.str();
}

inline std::string episode_steps_csv(const EpisodeLog& log) {
  std::ostringstream os;
  os << kCsvSchemaLine << "\n" << kStepColumns << "\n";
  for (std::size_t t = 0; t < log.steps.size(); ++t) {
    const StepRecord& rec = log.steps[t];
    for (std::size_t i = 0; i < rec.vehicles.size(); ++i) {
      const VehicleState& s = rec.vehicles[i];
      os << t << ',' << fmt(static_cast<double>(t) * log.dt) << ',' << i << ','
         << (s.lane == Lane::Main ? "main" : "ramp") << ',' << fmt(s.x) << ',' << fmt(s.v) << ',' << fmt(s.a) << ','
         << to_string(rec.attention[i]) << ',' << (rec.merge_committed ? 1 : 0) << '\n';
    }
  }
  return os.str();
}

inline std::string episode_drivers_csv(const EpisodeLog& log) {
  std::ostringstream os;
  os << kCsvSchemaLine << "\n" << kDriverColumns << "\n";
  for (std::size_t i = 0; i < log.drivers.size(); ++i) {
    const DriverProfile& d = log.drivers[i];
    os << i << ',' << fmt(d.psi) << ',' << fmt(d.idm.v_des) << ',' << fmt(d.idm.d_min) << ',' << fmt(d.idm.T_des)
       << ',' << fmt(d.idm.a_max) << ',' << fmt(d.idm.b_max) << ',' << fmt(d.mobil.b_safe) << ','
       << fmt(d.mobil.a_th) << ',' << fmt(d.mobil.politeness) << ',' << fmt(d.coop) << '\n';
  }
  return os.str();
}

inline void write_dataset(const fs::path& dir, const Dataset& ds, const RunConfig& cfg) {
  std::error_code ec;
  fs::create_directories(dir / "episodes", ec);
  if (ec) throw ConfigError("cannot create " + (dir / "episodes").string() + ": " + ec.message());
  json episodes = json::array();
  for (std::size_t k = 0; k < ds.episodes.size(); ++k) {
    const EpisodeLog& log = ds.episodes[k];
    const std::string base = episode_file(k);
    write_text(dir / "episodes" / (base + "_steps.csv"), episode_steps_csv(log));
    write_text(dir / "episodes" / (base + "_drivers.csv"), episode_drivers_csv(log));
    episodes.push_back({{"id", k},
                        {"seed", log.seed},
                        {"steps_file", "episodes/" + base + "_steps.csv"},
                        {"drivers_file", "episodes/" + base + "_drivers.csv"},
                        {"steps", log.steps.size()},
                        {"vehicles", log.vehicle_count()},
                        {"ramp_vehicle", log.ramp_vehicle},
                        {"merge_step", log.merge_step ? json(*log.merge_step) : json(nullptr)},
                        {"collided", log.collided},
                        {"collision_step", log.collision_step},
                        {"barrier_stops", log.barrier_stops}});
  }
  std::vector<std::string> names(feature_names().begin(), feature_names().end());
  json manifest = {{"schema_version", kSchemaVersion},
                   {"kind", "dataset"},
                   {"master_seed", cfg.seed},
                   {"feature_names", names},
                   {"standardization", stats_json(ds.stats)},
                   {"splits", {{"train", ds.train_episodes}, {"validation", ds.val_episodes}}},
                   {"window_counts", {{"train", ds.train.size()}, {"validation", ds.val.size()}}},
                   {"columns", {{"steps", kStepColumns}, {"drivers", kDriverColumns}}},
                   {"bounds", bounds_json(cfg.scenario.bounds)},
                   {"config", to_json(cfg)},
                   {"config_hash", config_hash(cfg)},
                   {"episodes", episodes}};
  write_json(dir / "manifest.json", manifest);
}

struct LoadedDataset {
  RunConfig config;
  Dataset dataset;
};

/// Reads a dataset directory and rebuilds windows and statistics, checking
/// them against the manifest.
inline LoadedDataset read_dataset(const fs::path& dir) {
  const json manifest = read_json(dir / "manifest.json");
  require_schema(manifest, "dataset", dir / "manifest.json");
  LoadedDataset out;
  out.config = from_json(manifest.at("config"));
  const RunConfig& cfg = out.config;
  std::vector<EpisodeLog> logs;
  for (const json& e : manifest.at("episodes")) {
    EpisodeLog log;
    log.dt = cfg.scenario.dt;
    log.road = cfg.scenario.road;
    log.vehicle_length = cfg.scenario.vehicle_length;
    log.seed = e.at("seed").get<std::uint64_t>();
    log.ramp_vehicle = e.at("ramp_vehicle").get<std::size_t>();
    if (!e.at("merge_step").is_null()) log.merge_step = e.at("merge_step").get<std::size_t>();
    log.collided = e.at("collided").get<bool>();
    log.collision_step = e.at("collision_step").get<std::size_t>();
    log.barrier_stops = e.at("barrier_stops").get<std::size_t>();
    const std::size_t n = e.at("vehicles").get<std::size_t>();
    const std::size_t steps = e.at("steps").get<std::size_t>();
    const fs::path dpath = dir / e.at("drivers_file").get<std::string>();
    for (const std::string& row : read_csv_rows(dpath, kDriverColumns)) {
      const auto c = split_csv(row);
      if (c.size() != 11) throw ConfigError("bad row in " + dpath.string());
      DriverProfile d;
      d.psi = parse_double(c[1], dpath.string());
      d.idm = {parse_double(c[2], dpath.string()), parse_double(c[3], dpath.string()),
               parse_double(c[4], dpath.string()), parse_double(c[5], dpath.string()),
               parse_double(c[6], dpath.string())};
      d.mobil = {parse_double(c[7], dpath.string()), parse_double(c[8], dpath.string()),
                 parse_double(c[9], dpath.string())};
      d.coop = parse_double(c[10], dpath.string());
      log.drivers.push_back(d);
    }
    if (log.drivers.size() != n) throw ConfigError("driver count mismatch in " + dpath.string());
    const fs::path spath = dir / e.at("steps_file").get<std::string>();
    const auto rows = read_csv_rows(spath, kStepColumns);
    if (rows.size() != steps * n) throw ConfigError("row count mismatch in " + spath.string());
    log.steps.resize(steps);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      const auto c = split_csv(rows[k]);
      if (c.size() != 9) throw ConfigError("bad row in " + spath.string());
      StepRecord& rec = log.steps[k / n];
      VehicleState s;
      s.lane = c[3] == "main" ? Lane::Main : Lane::Ramp;
      s.x = parse_double(c[4], spath.string());
      s.v = parse_double(c[5], spath.string());
      s.a = parse_double(c[6], spath.string());
      rec.vehicles.push_back(s);
      rec.attention.push_back(c[7] == "leader" ? AttentionTarget::Leader : AttentionTarget::RampProjection);
      rec.merge_committed = c[8] == "1";
    }
    logs.push_back(std::move(log));
  }
  DatasetConfig dcfg = cfg.dataset;
  out.dataset = build_dataset(std::move(logs), dcfg);
  if (!(out.dataset.stats == stats_from(manifest.at("standardization"))))
    throw ConfigError("dataset statistics in " + dir.string() + " do not match its episodes");
  return out;
}

// ---------------------------------------------------------------------------
// checkpoints

struct CheckpointInfo {
  PolicyKind kind = PolicyKind::NIDM;
  std::uint64_t seed = 0;
  ModelConfig model;
  Standardization stats;
  std::string weights_hash;
  json extra;
};

inline json model_config_json(const ModelConfig& m) {
  return {{"hidden", m.hidden},
          {"latent", m.latent},
          {"gmm_components", m.gmm_components},
          {"history_steps", m.history_steps},
          {"horizon_steps", m.horizon_steps},
          {"dt", m.dt},
          {"vehicle_length", m.vehicle_length},
          {"accel_floor", m.accel_floor},
          {"accel_cap", m.accel_cap},
          {"huber_threshold", m.huber_threshold},
          {"gap_guard", m.gap_guard},
          {"bounds", bounds_json(m.bounds)}};
}

inline ModelConfig model_config_from(const json& j) {
  ModelConfig m;
  m.hidden = j.at("hidden").get<std::size_t>();
  m.latent = j.at("latent").get<std::size_t>();
  m.gmm_components = j.at("gmm_components").get<std::size_t>();
  m.history_steps = j.at("history_steps").get<std::size_t>();
  m.horizon_steps = j.at("horizon_steps").get<std::size_t>();
  m.dt = j.at("dt").get<double>();
  m.vehicle_length = j.at("vehicle_length").get<double>();
  m.accel_floor = j.at("accel_floor").get<double>();
  m.accel_cap = j.at("accel_cap").get<double>();
  m.huber_threshold = j.at("huber_threshold").get<double>();
  m.gap_guard = j.at("gap_guard").get<double>();
  m.bounds = bounds_from(j.at("bounds"));
  return m;
}

inline std::string weights_blob(const ParameterSet& ps, json& directory) {
  std::string blob;
  directory = json::array();
  for (std::size_t k = 0; k < ps.size(); ++k) {
    const auto& p = ps[k];
    directory.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"offset", blob.size() / 8}});
    for (double v : p.value.values()) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) blob.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
    }
  }
  return blob;
}

/// Writes checkpoint.json and weights.bin into `dir`.
inline void write_checkpoint(const fs::path& dir, const PolicyModel& model, std::uint64_t seed, const json& extra = {}) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create " + dir.string() + ": " + ec.message());
  json directory;
  const std::string blob = weights_blob(model.params(), directory);
  write_text(dir / "weights.bin", blob);
  json manifest = {{"schema_version", kSchemaVersion},
                   {"kind", "checkpoint"},
                   {"policy", to_string(model.kind())},
                   {"seed", seed},
                   {"model", model_config_json(model.config())},
                   {"standardization", stats_json(model.stats())},
                   {"weights_file", "weights.bin"},
                   {"weights_hash", hex64(fnv1a(blob))},
                   {"byte_order", "little"},
                   {"dtype", "float64"},
                   {"tensors", directory},
                   {"extra", extra.is_null() ? json::object() : extra}};
  write_json(dir / "checkpoint.json", manifest);
}

struct LoadedCheckpoint {
  CheckpointInfo info;
  std::unique_ptr<PolicyModel> model;
};

inline LoadedCheckpoint read_checkpoint(const fs::path& dir) {
  const json manifest = read_json(dir / "checkpoint.json");
  require_schema(manifest, "checkpoint", dir / "checkpoint.json");
  LoadedCheckpoint out;
  try {
    out.info.kind = parse_policy_kind(manifest.at("policy").get<std::string>());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  out.info.seed = manifest.at("seed").get<std::uint64_t>();
  out.info.model = model_config_from(manifest.at("model"));
  out.info.stats = stats_from(manifest.at("standardization"));
  out.info.weights_hash = manifest.at("weights_hash").get<std::string>();
  out.info.extra = manifest.value("extra", json::object());
  out.model = make_model(out.info.kind, out.info.model, out.info.stats, out.info.seed);
  const std::string blob = read_text(dir / manifest.at("weights_file").get<std::string>());
  if (hex64(fnv1a(blob)) != out.info.weights_hash) throw ConfigError("weights hash mismatch in " + dir.string());
  ParameterSet& ps = out.model->params();
  std::size_t loaded = 0;
  for (const json& t : manifest.at("tensors")) {
    const std::string name = t.at("name").get<std::string>();
    ad::Parameter* p = ps.find(name);
    if (!p) throw ConfigError("checkpoint tensor '" + name + "' does not belong to a " + to_string(out.info.kind));
    if (t.at("shape").get<ad::Shape>() != p->value.shape())
      throw ConfigError("checkpoint tensor '" + name + "' has shape " + t.at("shape").dump() + ", model expects " +
                        ad::shape_string(p->value.shape()));
    const std::size_t offset = t.at("offset").get<std::size_t>();
    if ((offset + p->value.size()) * 8 > blob.size()) throw ConfigError("weights blob too short for '" + name + "'");
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b)
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(blob[(offset + i) * 8 + b])) << (8 * b);
      p->value[i] = std::bit_cast<double>(bits);
    }
    ++loaded;
  }
  if (loaded != ps.size()) throw ConfigError("checkpoint in " + dir.string() + " is missing tensors");
  return out;
}

// ---------------------------------------------------------------------------
// CSV writers

inline const char* kLossColumns = "iter,L_a,L_x,L_KL,total,split,L_a_smooth,L_x_smooth,L_KL_smooth,total_smooth";

/// Per-iteration losses plus trailing 10-iteration averages within each split.
inline std::string loss_csv(const std::vector<LossRecord>& history, std::size_t window = 10) {
  std::ostringstream os;
  os << kCsvSchemaLine << "\n" << kLossColumns << "\n";
  for (bool val : {false, true}) {
    std::vector<const LossRecord*> rows;
    for (const auto& r : history)
      if (r.validation == val) rows.push_back(&r);
    std::array<std::vector<double>, 4> series;
    for (const auto* r : rows) {
      series[0].push_back(r->l_a);
      series[1].push_back(r->l_x);
      series[2].push_back(r->l_kl);
      series[3].push_back(r->total);
    }
    std::array<std::vector<double>, 4> sm;
    for (std::size_t k = 0; k < 4; ++k) sm[k] = smooth(series[k], window);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto* r = rows[i];
      os << r->iter << ',' << fmt(r->l_a) << ',' << fmt(r->l_x) << ',' << fmt(r->l_kl) << ',' << fmt(r->total) << ','
         << (val ? "validation" : "train") << ',' << fmt(sm[0][i]) << ',' << fmt(sm[1][i]) << ',' << fmt(sm[2][i])
         << ',' << fmt(sm[3][i]) << '\n';
    }
  }
  return os.str();
}

inline const char* kRwseColumns = "policy,step,horizon_s,rwse_position,rwse_speed";
inline const char* kSummaryColumns =
    "policy,kl_speed,kl_position,kl_acceleration,kl_mean,collision_count,collision_rate_pct,rollouts";
inline const char* kCollisionColumns = "policy,collision_count,collision_rate_pct";

inline std::string rwse_csv(const std::vector<MetricsReport>& reports, double dt) {
  std::ostringstream os;
  os << kCsvSchemaLine << "\n" << kRwseColumns << "\n";
  for (const auto& r : reports)
    for (std::size_t k = 0; k < r.rwse_position.size(); ++k)
      os << r.policy << ',' << k + 1 << ',' << fmt(static_cast<double>(k + 1) * dt) << ',' << fmt(r.rwse_position[k])
         << ',' << fmt(r.rwse_speed[k]) << '\n';
  return os.str();
}

inline std::string summary_csv(const std::vector<MetricsReport>& reports) {
  std::ostringstream os;
  os << kCsvSchemaLine << "\n" << kSummaryColumns << "\n";
  for (const auto& r : reports)
    os << r.policy << ',' << fmt(r.kl[0]) << ',' << fmt(r.kl[1]) << ',' << fmt(r.kl[2]) << ',' << fmt(r.kl_mean) << ','
       << r.collisions.count << ',' << fmt(100.0 * r.collisions.rate()) << ',' << r.collisions.rollouts << '\n';
  return os.str();
}

inline std::string collision_csv(const std::vector<MetricsReport>& reports) {
  std::ostringstream os;
  os << kCsvSchemaLine << "\n" << kCollisionColumns << "\n";
  for (const auto& r : reports)
    os << r.policy << ',' << r.collisions.count << ',' << fmt(100.0 * r.collisions.rate()) << '\n';
  return os.str();
}

/// Header of the latent dump; theta columns only for the IDM decoder.
inline std::string latent_columns(std::size_t latent, bool with_theta) {
  std::string h = "window,episode,vehicle,start,psi";
  for (std::size_t k = 0; k < latent; ++k) h += ",z" + std::to_string(k);
  if (with_theta) h += ",v_des,d_min,T_des,a_max,b_max";
  return h;
}

/// Prior-mean latent of each window, with decoded IDM parameters for NIDM.
inline std::string latent_csv(const LatentDriverModel& model, const std::vector<const TrainingWindow*>& windows) {
  const bool theta = model.decoder() == DecoderKind::Idm;
  const std::size_t L = model.config().latent;
  std::ostringstream os;
  os << kCsvSchemaLine << "\n" << latent_columns(L, theta) << "\n";
  constexpr std::size_t kChunk = 256;
  for (std::size_t begin = 0; begin < windows.size(); begin += kChunk) {
    std::vector<const TrainingWindow*> chunk(windows.begin() + static_cast<std::ptrdiff_t>(begin),
                                             windows.begin() + static_cast<std::ptrdiff_t>(std::min(begin + kChunk, windows.size())));
    const Tensor z = model.prior_mean(chunk);
    for (std::size_t r = 0; r < chunk.size(); ++r) {
      const TrainingWindow& w = *chunk[r];
      os << begin + r << ',' << w.episode << ',' << w.vehicle << ',' << w.start << ',' << fmt(w.psi);
      std::vector<double> zr(L);
      for (std::size_t k = 0; k < L; ++k) {
        zr[k] = z.at(r, k);
        os << ',' << fmt(zr[k]);
      }
      if (theta) {
        const IdmParams p = model.decode_idm_params(zr);
        os << ',' << fmt(p.v_des) << ',' << fmt(p.d_min) << ',' << fmt(p.T_des) << ',' << fmt(p.a_max) << ','
           << fmt(p.b_max);
      }
      os << '\n';
    }
  }
  return os.str();
}

}  // namespace nidm::io
