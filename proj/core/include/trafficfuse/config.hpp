#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "trafficfuse/ensrf.hpp"
#include "trafficfuse/propagation.hpp"
#include "trafficfuse/stgnn.hpp"
#include "trafficfuse/twin.hpp"

namespace trafficfuse {

/// Probe sampling rate per segment group, modulated by hour and day.
struct PenetrationModel {
  std::vector<double> group_rates{0.1, 0.1};  // the grid twin uses group 0 (mesh) and 1 (freeway)
  std::array<double, kHours> hour_multipliers;
  std::array<double, kDays> day_multipliers;
  double floor = 1e-6;

  PenetrationModel();
  /// Clipped into [floor, 1].
  double rate(int group, int hour, int day) const;
  void validate() const;
};

/// Hour multipliers averaging 1 with a daytime high and a night low.
std::array<double, kHours> default_hour_multipliers();

struct ExperimentConfig {
  // Network: a built-in twin ("grid" or "chain") or CSV files.
  std::string twin = "grid";
  std::filesystem::path segments_csv;
  std::filesystem::path edges_csv;
  std::filesystem::path demand_csv;
  GridTwinOptions grid;
  double chain_level = 100.0;

  int warmup_bins = 96;  // simulated before the recorded horizon, then dropped

  PenetrationModel penetration;
  int pooled_months = 1;

  /// External segment ids; the twin's placement when empty.
  std::vector<std::string> calibration_cameras;
  std::vector<std::string> validation_cameras;
  double camera_noise_std = 5.0;

  ModelConfig model;
  TrainConfig training;
  /// Columns used for features statistics and training; half the horizon when <= 0.
  int train_bins = 0;

  FilterConfig filter;
  PropagationConfig propagation;
  /// Camera data at or after this column is withheld; none withheld when <= 0.
  int observation_cutoff = 0;
  /// Columns used to estimate the initial calibration level.
  int alpha_warmup_bins = 96;
  double interval_level = 0.95;

  /// First column scored by evaluate.
  int evaluation_start = 96;

  int observability_horizon = 0;

  std::uint64_t seed = 42;
};

ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig parse_config(const std::string& json_text, const std::filesystem::path& base_dir = {});
std::string config_to_json(const ExperimentConfig& config);

/// Independent seed for a named pipeline stage.
std::uint64_t stage_seed(std::uint64_t global_seed, std::string_view stage);

}  // namespace trafficfuse
