#pragma once

// Log-space calibration field beta = log(alpha) estimated with a serial,
// localised, deterministic ensemble square-root filter. Each member carries
// a per-segment base plus hour-of-day, day-of-week and regime offsets.

#include <Eigen/Dense>
#include <Eigen/SparseCore>
#include <filesystem>
#include <random>
#include <vector>

#include "trafficfuse/diagnostics.hpp"
#include "trafficfuse/network.hpp"

namespace trafficfuse {

inline constexpr int kHours = 24;
inline constexpr int kDays = 7;
inline constexpr int kRegimes = 3;

enum Regime : int { kFree = 0, kTransitional = 1, kCongested = 2 };

/// Free for b >= 0.7, transitional for 0.4 <= b < 0.7, congested below.
int regime_index(double b);

/// How forecast process noise enters the ensemble. kInflation scales each
/// column's anomaly so its sample variance grows by exactly Q; kGaussian adds
/// independent N(0, Q) draws per member.
enum class ForecastNoise { kInflation, kGaussian };

struct FilterConfig {
  int members = 64;
  double sigma0 = 0.05;
  double sigma_y = 5.0;
  double eps = 1.0;
  double lambda_base = 0.02;
  double lambda_glob = 0.2;
  double q_base = 1e-4;
  double q_hour = 1e-5;
  double q_day = 1e-5;
  double q_regime = 1e-5;
  double global_gain = 0.1;
  int global_obs_cap = 4;
  double init_base_std = 0.25;
  double init_global_std = 0.05;
  ForecastNoise forecast_noise = ForecastNoise::kInflation;

  void validate() const;
};

struct CameraObservation {
  SegmentId segment = 0;
  int time = 0;
  double count = 0.0;
  bool missing = false;
};

/// log(y + eps) - log(q_hat + eps).
double log_ratio(double y, double q_hat, double eps);
/// sigma0^2 + sigma_y^2 / (y + eps)^2.
double obs_variance(double y, double sigma0, double sigma_y, double eps);

/// Calendar and regime context of one time bin.
struct TimeContext {
  int hour = 0;
  int day = 0;
  std::vector<int> regime;  // per segment; empty means all free
};

class CalibrationEnsemble {
 public:
  CalibrationEnsemble() = default;
  CalibrationEnsemble(int segments, int members);

  /// Base ~ N(log_alpha0, init_base_std^2), globals ~ N(0, init_global_std^2).
  static CalibrationEnsemble initialize(int segments, const FilterConfig& config, double log_alpha0,
                                        std::mt19937_64& rng);

  int members() const { return static_cast<int>(base.rows()); }
  int segments() const { return static_cast<int>(base.cols()); }

  double effective_beta(int m, SegmentId i, int hour, int day, int regime) const {
    return base(m, i) + hour_offset(m, hour) + day_offset(m, day) + regime_offset(m, regime);
  }
  double hour_offset(int m, int h) const { return hour(m, h); }
  double day_offset(int m, int d) const { return day(m, d); }
  double regime_offset(int m, int c) const { return regime(m, c); }

  Eigen::VectorXd base_mean() const { return base.colwise().mean().transpose(); }

  Eigen::MatrixXd base;    // M x N
  Eigen::MatrixXd hour;    // M x 24
  Eigen::MatrixXd day;     // M x 7
  Eigen::MatrixXd regime;  // M x 3
  Eigen::VectorXd confidence;  // N, in [0, 1]
  Diagnostics diagnostics;
};

/// Median over segments of the base ensemble mean.
double beta_star(const CalibrationEnsemble& ens);

/// OU forecast. `smoothed_base` (M x N) replaces the base before reversion
/// when given. Noise variances are the configured Q values, applied as set
/// by `config.forecast_noise`.
void forecast_step(CalibrationEnsemble& ens, const FilterConfig& config, std::mt19937_64& rng,
                   double beta_star, const Eigen::MatrixXd* smoothed_base = nullptr);

struct AnalysisReport {
  int assimilated = 0;
  int skipped = 0;
  int global_updates = 0;
  /// Per assimilated observation: prior and posterior ensemble variance of
  /// the effective log-ratio at the observed segment.
  std::vector<double> prior_variance;
  std::vector<double> posterior_variance;
};

/// Serial scalar EnSRF over `observations` (one time bin), in ascending
/// segment order. `q_hat` holds the predictor counts per segment. Column i
/// of `localization` (N x N) is the weight vector for a camera on segment i;
/// null means no localisation.
AnalysisReport analysis_step(CalibrationEnsemble& ens, std::vector<CameraObservation> observations,
                             const Eigen::VectorXd& q_hat, const TimeContext& context,
                             const Eigen::SparseMatrix<double>* localization, const FilterConfig& config);

struct AlphaStatistics {
  Eigen::VectorXd mean;      // N
  Eigen::VectorXd variance;  // N, unbiased over members
};

/// Effective log-calibration per member (M x N). With no context, the base alone.
Eigen::MatrixXd beta_members(const CalibrationEnsemble& ens, const TimeContext* context = nullptr);

/// Statistics of alpha = exp(effective beta). With no context, the base alone.
AlphaStatistics alpha_statistics(const CalibrationEnsemble& ens, const TimeContext* context = nullptr);

/// Per-segment alpha quantile over members (linear interpolation).
Eigen::VectorXd alpha_quantile(const CalibrationEnsemble& ens, double q, const TimeContext* context = nullptr);

/// Quantile of the predictive count alpha * max(0, X) with alpha drawn from
/// the ensemble and X ~ N(q_hat, sigma^2), per segment. Found by bisection
/// on the mixture CDF.
Eigen::VectorXd predictive_quantile(const CalibrationEnsemble& ens, const Eigen::VectorXd& q_hat,
                                    const Eigen::VectorXd& sigma, double q, const TimeContext* context = nullptr);

/// CSV columns segment_id, bin_start (ISO 8601), count, quality_flag. A
/// quality flag other than "ok"/"1" or an empty count marks the record missing.
/// `start`/`bin_seconds` map bin_start to a column index.
std::vector<CameraObservation> load_camera_observations(const std::filesystem::path& path, const RoadNetwork& net,
                                                        EpochSeconds start, double bin_seconds);
void save_camera_observations(const std::vector<CameraObservation>& obs, const RoadNetwork& net,
                              EpochSeconds start, double bin_seconds, const std::filesystem::path& path);

}  // namespace trafficfuse
