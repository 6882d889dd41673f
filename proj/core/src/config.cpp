#include "trafficfuse/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "json.hpp"
#include "trafficfuse/error.hpp"

namespace trafficfuse {

using nlohmann::json;

std::array<double, kHours> default_hour_multipliers() {
  std::array<double, kHours> m{};
  double sum = 0.0;
  for (int h = 0; h < kHours; ++h) {
    // Daytime fleets (delivery, ride-hailing) report more than night traffic.
    m[static_cast<std::size_t>(h)] = 1.0 + 0.3 * std::sin(2.0 * std::numbers::pi * (h - 8.0) / 24.0);
    sum += m[static_cast<std::size_t>(h)];
  }
  for (auto& v : m) v *= kHours / sum;
  return m;
}

PenetrationModel::PenetrationModel() : hour_multipliers(default_hour_multipliers()) { day_multipliers.fill(1.0); }

double PenetrationModel::rate(int group, int hour, int day) const {
  if (group < 0 || group >= static_cast<int>(group_rates.size())) {
    throw ParameterError("penetration group " + std::to_string(group) + " has no rate");
  }
  const double p = group_rates[static_cast<std::size_t>(group)] * hour_multipliers.at(static_cast<std::size_t>(hour)) *
                   day_multipliers.at(static_cast<std::size_t>(day));
  return std::clamp(p, floor, 1.0);
}

void PenetrationModel::validate() const {
  if (group_rates.empty()) throw ParameterError("penetration model needs at least one group rate");
  for (double r : group_rates) {
    if (!(r > 0 && r <= 1)) throw ParameterError("penetration base rates must lie in (0, 1]");
  }
  for (double m : hour_multipliers) {
    if (!(m >= 0)) throw ParameterError("hour multipliers must be >= 0");
  }
  for (double m : day_multipliers) {
    if (!(m >= 0)) throw ParameterError("day multipliers must be >= 0");
  }
  if (!(floor > 0 && floor <= 1)) throw ParameterError("penetration floor must lie in (0, 1]");
}

std::uint64_t stage_seed(std::uint64_t global_seed, std::string_view stage) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : stage) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  // splitmix64 finaliser
  std::uint64_t z = global_seed + 0x9e3779b97f4a7c15ULL * (h | 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ParseError(where_ + ": expected an object");
  }
  ~Reader() = default;

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ParseError(where_ + "." + key + ": " + e.what());
    }
  }

  bool has(const char* key) const { return j_.contains(key); }
  const json& at(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ParseError(where_ + ": unknown key '" + item.key() + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

std::filesystem::path resolve(const std::string& p, const std::filesystem::path& base) {
  if (p.empty()) return {};
  std::filesystem::path path(p);
  return path.is_absolute() || base.empty() ? path : base / path;
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text, const std::filesystem::path& base_dir) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  ExperimentConfig c;
  Reader r(root, "config");
  r.get("seed", c.seed);

  if (r.has("network")) {
    Reader n(r.at("network"), "config.network");
    std::string seg;
    std::string edg;
    std::string dem;
    n.get("twin", c.twin);
    n.get("segments", seg);
    n.get("edges", edg);
    n.get("demand", dem);
    n.finish();
    c.segments_csv = resolve(seg, base_dir);
    c.edges_csv = resolve(edg, base_dir);
    c.demand_csv = resolve(dem, base_dir);
    if (!seg.empty()) c.twin.clear();
  }
  if (c.twin.empty() && (c.segments_csv.empty() || c.edges_csv.empty() || c.demand_csv.empty())) {
    throw ParseError("config.network: a file network needs segments, edges and demand paths");
  }
  if (!c.twin.empty() && c.twin != "grid" && c.twin != "chain") {
    throw ParseError("config.network.twin: expected \"grid\" or \"chain\", got \"" + c.twin + "\"");
  }

  if (r.has("simulation")) {
    Reader s(r.at("simulation"), "config.simulation");
    s.get("bins", c.grid.bins);
    s.get("bin_seconds", c.grid.bin_seconds);
    std::string start;
    s.get("start", start);
    if (!start.empty()) c.grid.start = parse_iso8601(start);
    s.get("warmup_bins", c.warmup_bins);
    s.get("arterial_peak", c.grid.arterial_peak);
    s.get("freeway_peak", c.grid.freeway_peak);
    s.get("day_to_day_std", c.grid.day_to_day_std);
    s.get("bin_noise_std", c.grid.bin_noise_std);
    s.get("chain_level", c.chain_level);
    s.finish();
  }

  if (r.has("penetration")) {
    Reader p(r.at("penetration"), "config.penetration");
    p.get("group_rates", c.penetration.group_rates);
    std::vector<double> hours;
    std::vector<double> days;
    p.get("hour_multipliers", hours);
    p.get("day_multipliers", days);
    p.get("floor", c.penetration.floor);
    p.get("pooled_months", c.pooled_months);
    p.finish();
    if (!hours.empty()) {
      if (hours.size() != kHours) throw ParseError("config.penetration.hour_multipliers: expected 24 values");
      std::copy(hours.begin(), hours.end(), c.penetration.hour_multipliers.begin());
    }
    if (!days.empty()) {
      if (days.size() != kDays) throw ParseError("config.penetration.day_multipliers: expected 7 values");
      std::copy(days.begin(), days.end(), c.penetration.day_multipliers.begin());
    }
  }

  if (r.has("cameras")) {
    Reader k(r.at("cameras"), "config.cameras");
    k.get("calibration", c.calibration_cameras);
    k.get("validation", c.validation_cameras);
    k.get("noise_std", c.camera_noise_std);
    k.finish();
  }

  if (r.has("model")) {
    Reader m(r.at("model"), "config.model");
    m.get("d", c.model.d);
    m.get("spatial_layers", c.model.spatial_layers);
    m.get("temporal_blocks", c.model.temporal_blocks);
    m.get("heads", c.model.heads);
    m.get("history", c.model.history);
    m.get("horizon", c.model.horizon);
    m.get("ffn_width", c.model.ffn_width);
    m.get("raw_adjacency", c.model.raw_adjacency);
    m.finish();
  }

  if (r.has("training")) {
    Reader t(r.at("training"), "config.training");
    t.get("learning_rate", c.training.learning_rate);
    t.get("clip_norm", c.training.clip_norm);
    t.get("batch_windows", c.training.batch_windows);
    t.get("max_epochs", c.training.max_epochs);
    t.get("patience", c.training.patience);
    t.get("validation_fraction", c.training.validation_fraction);
    t.get("max_steps", c.training.max_steps);
    t.get("train_bins", c.train_bins);
    if (t.has("loss")) {
      Reader l(t.at("loss"), "config.training.loss");
      l.get("mae", c.training.loss.mae);
      l.get("nll", c.training.loss.nll);
      l.get("cap", c.training.loss.cap);
      l.get("cons", c.training.loss.cons);
      l.get("tau_fraction", c.training.loss.tau_fraction);
      l.finish();
    }
    t.finish();
  }

  if (r.has("filter")) {
    Reader f(r.at("filter"), "config.filter");
    f.get("members", c.filter.members);
    f.get("sigma0", c.filter.sigma0);
    f.get("sigma_y", c.filter.sigma_y);
    f.get("eps", c.filter.eps);
    f.get("lambda_base", c.filter.lambda_base);
    f.get("lambda_glob", c.filter.lambda_glob);
    f.get("q_base", c.filter.q_base);
    f.get("q_hour", c.filter.q_hour);
    f.get("q_day", c.filter.q_day);
    f.get("q_regime", c.filter.q_regime);
    f.get("global_gain", c.filter.global_gain);
    f.get("global_obs_cap", c.filter.global_obs_cap);
    f.get("init_base_std", c.filter.init_base_std);
    f.get("init_global_std", c.filter.init_global_std);
    std::string noise = c.filter.forecast_noise == ForecastNoise::kGaussian ? "gaussian" : "inflation";
    f.get("forecast_noise", noise);
    if (noise == "inflation") {
      c.filter.forecast_noise = ForecastNoise::kInflation;
    } else if (noise == "gaussian") {
      c.filter.forecast_noise = ForecastNoise::kGaussian;
    } else {
      throw ParseError("config.filter.forecast_noise: expected \"inflation\" or \"gaussian\", got \"" + noise + "\"");
    }
    f.finish();
  }

  if (r.has("propagation")) {
    Reader p(r.at("propagation"), "config.propagation");
    p.get("gamma_pd", c.propagation.gamma_pd);
    p.get("smoothing", c.propagation.smoothing);
    p.get("confidence_decay", c.propagation.confidence_decay);
    p.finish();
  }

  if (r.has("calibration")) {
    Reader k(r.at("calibration"), "config.calibration");
    k.get("observation_cutoff", c.observation_cutoff);
    k.get("alpha_warmup_bins", c.alpha_warmup_bins);
    k.get("interval_level", c.interval_level);
    k.finish();
  }

  if (r.has("evaluation")) {
    Reader e(r.at("evaluation"), "config.evaluation");
    e.get("start_bin", c.evaluation_start);
    e.finish();
  }

  if (r.has("observability")) {
    Reader o(r.at("observability"), "config.observability");
    o.get("horizon", c.observability_horizon);
    o.finish();
  }
  r.finish();

  try {
    c.penetration.validate();
    c.model.validate();
    c.filter.validate();
    c.propagation.validate();
  } catch (const ParameterError& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  if (c.grid.bins < 2) throw ParseError("config.simulation.bins must be >= 2");
  if (c.warmup_bins < 0) throw ParseError("config.simulation.warmup_bins must be >= 0");
  if (c.pooled_months < 1) throw ParseError("config.penetration.pooled_months must be >= 1");
  if (!(c.interval_level > 0 && c.interval_level < 1)) throw ParseError("config.calibration.interval_level must lie in (0, 1)");
  for (const auto& id : c.calibration_cameras) {
    if (std::find(c.validation_cameras.begin(), c.validation_cameras.end(), id) != c.validation_cameras.end()) {
      throw ParseError("config.cameras: segment '" + id + "' is in both the calibration and validation sets");
    }
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string() + ": cannot open config");
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str(), path.parent_path());
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

std::string config_to_json(const ExperimentConfig& c) {
  json j;
  j["seed"] = c.seed;
  if (c.twin.empty()) {
    j["network"] = {{"segments", c.segments_csv.string()}, {"edges", c.edges_csv.string()},
                    {"demand", c.demand_csv.string()}};
  } else {
    j["network"] = {{"twin", c.twin}};
  }
  j["simulation"] = {{"bins", c.grid.bins},
                     {"bin_seconds", c.grid.bin_seconds},
                     {"start", format_iso8601(c.grid.start)},
                     {"warmup_bins", c.warmup_bins},
                     {"arterial_peak", c.grid.arterial_peak},
                     {"freeway_peak", c.grid.freeway_peak},
                     {"day_to_day_std", c.grid.day_to_day_std},
                     {"bin_noise_std", c.grid.bin_noise_std},
                     {"chain_level", c.chain_level}};
  j["penetration"] = {{"group_rates", c.penetration.group_rates},
                      {"hour_multipliers", c.penetration.hour_multipliers},
                      {"day_multipliers", c.penetration.day_multipliers},
                      {"floor", c.penetration.floor},
                      {"pooled_months", c.pooled_months}};
  j["cameras"] = {{"calibration", c.calibration_cameras},
                  {"validation", c.validation_cameras},
                  {"noise_std", c.camera_noise_std}};
  j["model"] = {{"d", c.model.d},
                {"spatial_layers", c.model.spatial_layers},
                {"temporal_blocks", c.model.temporal_blocks},
                {"heads", c.model.heads},
                {"history", c.model.history},
                {"horizon", c.model.horizon},
                {"ffn_width", c.model.ffn_width},
                {"raw_adjacency", c.model.raw_adjacency}};
  j["training"] = {{"learning_rate", c.training.learning_rate},
                   {"clip_norm", c.training.clip_norm},
                   {"batch_windows", c.training.batch_windows},
                   {"max_epochs", c.training.max_epochs},
                   {"patience", c.training.patience},
                   {"validation_fraction", c.training.validation_fraction},
                   {"max_steps", c.training.max_steps},
                   {"train_bins", c.train_bins},
                   {"loss",
                    {{"mae", c.training.loss.mae},
                     {"nll", c.training.loss.nll},
                     {"cap", c.training.loss.cap},
                     {"cons", c.training.loss.cons},
                     {"tau_fraction", c.training.loss.tau_fraction}}}};
  j["filter"] = {{"members", c.filter.members},
                 {"sigma0", c.filter.sigma0},
                 {"sigma_y", c.filter.sigma_y},
                 {"eps", c.filter.eps},
                 {"lambda_base", c.filter.lambda_base},
                 {"lambda_glob", c.filter.lambda_glob},
                 {"q_base", c.filter.q_base},
                 {"q_hour", c.filter.q_hour},
                 {"q_day", c.filter.q_day},
                 {"q_regime", c.filter.q_regime},
                 {"global_gain", c.filter.global_gain},
                 {"global_obs_cap", c.filter.global_obs_cap},
                 {"init_base_std", c.filter.init_base_std},
                 {"init_global_std", c.filter.init_global_std},
                 {"forecast_noise", c.filter.forecast_noise == ForecastNoise::kGaussian ? "gaussian" : "inflation"}};
  j["propagation"] = {{"gamma_pd", c.propagation.gamma_pd},
                      {"smoothing", c.propagation.smoothing},
                      {"confidence_decay", c.propagation.confidence_decay}};
  j["calibration"] = {{"observation_cutoff", c.observation_cutoff},
                      {"alpha_warmup_bins", c.alpha_warmup_bins},
                      {"interval_level", c.interval_level}};
  j["evaluation"] = {{"start_bin", c.evaluation_start}};
  j["observability"] = {{"horizon", c.observability_horizon}};
  return j.dump(2) + "\n";
}

}  // namespace trafficfuse
