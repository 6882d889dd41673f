#pragma once

// End-to-end experiment: simulate ground truth, thin it to probe data, place
// cameras, build features, train the predictor, run the calibration filter
// and score the result.

#include <Eigen/Dense>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "trafficfuse/config.hpp"
#include "trafficfuse/ctm.hpp"
#include "trafficfuse/ensrf.hpp"
#include "trafficfuse/features.hpp"
#include "trafficfuse/observability.hpp"
#include "trafficfuse/propagation.hpp"
#include "trafficfuse/stgnn.hpp"

namespace trafficfuse {

/// Binomial thinning: n = round(truth), p = pen.rate(group, hour, day).
/// Missing entries stay missing. `group` may be empty (all group 0).
CountMatrix thin_counts(const CountMatrix& truth, const PenetrationModel& pen, std::span<const int> group,
                        std::mt19937_64& rng);

/// Sums (or averages) datasets that share bin width and time-of-week
/// alignment; a cell is missing only if missing everywhere.
CountMatrix pool_windows(std::span<const CountMatrix> months, bool average = false);

struct LocationMetrics {
  std::string segment_id;
  int samples = 0;
  double mae = 0.0;
  double rmse = 0.0;
  std::optional<double> r2;
  std::optional<double> r;
  std::string missing_reason;
  std::optional<double> coverage;
};

struct MetricsReport {
  std::vector<LocationMetrics> locations;
  int samples = 0;
  double mae = 0.0;
  double rmse = 0.0;
  std::optional<double> pooled_r2;  // 1 - sum SSE / sum SST, per-location means
  std::optional<double> pooled_r;
  std::optional<double> coverage;
};

/// Scores `estimate` against `truth` on `locations` over columns
/// [first, last). Cells missing in either are skipped. Coverage uses
/// `lower`/`upper` when both are given.
MetricsReport evaluate(const CountMatrix& estimate, const CountMatrix& truth, std::span<const SegmentId> locations,
                       const RoadNetwork& net, const CountMatrix* lower = nullptr, const CountMatrix* upper = nullptr,
                       int first = 0, int last = -1);

/// Accumulates per-edge transition counts; rows of `edge_counts` follow net.edges().
std::vector<LinkTransition> transitions_from_edge_counts(const RoadNetwork& net, const Eigen::MatrixXd& edge_counts);

struct SimulationStage {
  RoadNetwork net;
  TurnRatios turns;
  FdParams fd;
  std::vector<int> group;
  std::vector<SegmentId> calibration_cameras;
  std::vector<SegmentId> validation_cameras;
  CountMatrix truth;
  CountMatrix speeds;
  Eigen::MatrixXd link_flows;        // E x T
  Eigen::MatrixXd boundary_inflow;   // N x T
  Eigen::MatrixXd boundary_outflow;  // N x T
  Diagnostics diagnostics;
};

struct SampleStage {
  CountMatrix probe_counts;
  CountMatrix probe_speeds;
  Eigen::MatrixXd probe_link_flows;  // E x T
  /// Expected probe-scale boundary net flow between t and t+1.
  Eigen::VectorXd boundary_net;
  std::vector<CameraObservation> calibration_obs;
  std::vector<CameraObservation> validation_obs;
};

struct CalibrationStage {
  CountMatrix q_hat;       // one-step predictor counts
  CountMatrix sigma;       // predictor standard deviation
  CountMatrix calibrated;
  CountMatrix lower;
  CountMatrix upper;
  CountMatrix alpha_mean;
  CountMatrix alpha_var;
  CountMatrix confidence;
  /// Width 2 z sd of the central interval of the base log-calibration.
  CountMatrix beta_width;
  double log_alpha0 = 0.0;
  /// Segments with zero localisation weight from every calibration camera.
  std::vector<SegmentId> unreachable;
  /// Largest |analysis change of beta_base| on `unreachable` over the run.
  double unreachable_max_change = 0.0;
  int analysis_steps = 0;
  Diagnostics diagnostics;
};

SimulationStage run_simulation(const ExperimentConfig& config);
SampleStage run_sampling(const ExperimentConfig& config, const SimulationStage& sim);
FeatureTensor run_features(const ExperimentConfig& config, const SimulationStage& sim, const SampleStage& sample);
TrainResult run_training(const ExperimentConfig& config, const SimulationStage& sim, const SampleStage& sample,
                         const FeatureTensor& tensor);
CalibrationStage run_calibration(const ExperimentConfig& config, const SimulationStage& sim,
                                 const SampleStage& sample, const FeatureTensor& tensor, const Predictor& model);
ObservabilityReport run_observability(const ExperimentConfig& config, const SimulationStage& sim,
                                      const SampleStage& sample);

struct PipelineResult {
  SimulationStage sim;
  SampleStage sample;
  FeatureTensor tensor;
  TrainResult training;
  CalibrationStage calibration;
  ObservabilityReport observability;
  MetricsReport calibrated_metrics;
  MetricsReport predictor_metrics;
};

MetricsReport evaluate_calibrated(const ExperimentConfig& config, const SimulationStage& sim,
                                  const CalibrationStage& cal);
MetricsReport evaluate_predictor(const ExperimentConfig& config, const SimulationStage& sim,
                                 const CalibrationStage& cal);

/// Deterministic JSON (fixed key order, shortest round-trip numbers).
std::string metrics_json(const ExperimentConfig& config, const MetricsReport& calibrated,
                         const MetricsReport& predictor);

/// Runs every stage; stage failures are rethrown as StageError. Artifacts
/// are written to `out_dir` when it is non-empty.
PipelineResult run_pipeline(const ExperimentConfig& config, const std::filesystem::path& out_dir = {});

// Artifact I/O used by the CLI stage commands.
void save_simulation(const SimulationStage& sim, const ExperimentConfig& config, const std::filesystem::path& dir);
SimulationStage load_simulation(const ExperimentConfig& config, const std::filesystem::path& dir);
void save_sample(const SampleStage& sample, const SimulationStage& sim, const ExperimentConfig& config,
                 const std::filesystem::path& dir);
SampleStage load_sample(const SimulationStage& sim, const std::filesystem::path& dir);
void save_calibration(const CalibrationStage& cal, const SimulationStage& sim, const ExperimentConfig& config,
                      const std::filesystem::path& dir);
CalibrationStage load_calibration(const SimulationStage& sim, const std::filesystem::path& dir);
/// Long-format CSV: bin_start, segment_id, alpha_mean, alpha_var, confidence.
void save_calibration_field(const CalibrationStage& cal, const RoadNetwork& net, const std::filesystem::path& path,
                            std::string_view comment = {});

}  // namespace trafficfuse
