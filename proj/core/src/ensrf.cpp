#include "trafficfuse/ensrf.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <set>
#include <sstream>

#include "trafficfuse/csv.hpp"
#include "trafficfuse/error.hpp"

namespace trafficfuse {

int regime_index(double b) {
  if (b >= 0.7) return kFree;
  if (b >= 0.4) return kTransitional;
  return kCongested;
}

void FilterConfig::validate() const {
  if (members < 2) throw ParameterError("ensemble size M must be >= 2");
  if (!(lambda_base > 0 && lambda_base < 1) || !(lambda_glob > 0 && lambda_glob < 1)) {
    throw ParameterError("mean-reversion rates must lie in (0, 1)");
  }
  if (!(lambda_base < lambda_glob)) throw ParameterError("lambda_base must be smaller than lambda_glob");
  if (!(eps > 0)) throw ParameterError("eps must be > 0");
  if (sigma0 < 0 || sigma_y < 0) throw ParameterError("noise scales must be >= 0");
  if (q_base < 0 || q_hour < 0 || q_day < 0 || q_regime < 0) throw ParameterError("process noise must be >= 0");
  if (global_gain < 0) throw ParameterError("global gain scale must be >= 0");
  if (global_obs_cap < 0) throw ParameterError("global observation cap must be >= 0");
}

double log_ratio(double y, double q_hat, double eps) { return std::log(y + eps) - std::log(q_hat + eps); }

double obs_variance(double y, double sigma0, double sigma_y, double eps) {
  const double s = y + eps;
  return sigma0 * sigma0 + sigma_y * sigma_y / (s * s);
}

CalibrationEnsemble::CalibrationEnsemble(int segments, int members)
    : base(Eigen::MatrixXd::Zero(members, segments)),
      hour(Eigen::MatrixXd::Zero(members, kHours)),
      day(Eigen::MatrixXd::Zero(members, kDays)),
      regime(Eigen::MatrixXd::Zero(members, kRegimes)),
      confidence(Eigen::VectorXd::Zero(segments)) {}

CalibrationEnsemble CalibrationEnsemble::initialize(int segments, const FilterConfig& config, double log_alpha0,
                                                    std::mt19937_64& rng) {
  config.validate();
  CalibrationEnsemble ens(segments, config.members);
  std::normal_distribution<double> z(0.0, 1.0);
  for (int m = 0; m < config.members; ++m) {
    for (int i = 0; i < segments; ++i) ens.base(m, i) = log_alpha0 + config.init_base_std * z(rng);
  }
  for (Eigen::MatrixXd* g : {&ens.hour, &ens.day, &ens.regime}) {
    for (Eigen::Index m = 0; m < g->rows(); ++m) {
      for (Eigen::Index k = 0; k < g->cols(); ++k) (*g)(m, k) = config.init_global_std * z(rng);
    }
  }
  return ens;
}

double beta_star(const CalibrationEnsemble& ens) {
  Eigen::VectorXd mean = ens.base_mean();
  if (mean.size() == 0) return 0.0;
  std::vector<double> v(mean.data(), mean.data() + mean.size());
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  if (v.size() % 2 == 1) return v[mid];
  const double hi = v[mid];
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

namespace {

// Adds process noise of variance q to every column of `g`: either by scaling
// the column anomaly so its sample variance grows by exactly q, or with
// independent Gaussian draws.
void add_process_noise(Eigen::MatrixXd& g, double q, ForecastNoise mode, std::mt19937_64& rng,
                       std::normal_distribution<double>& z) {
  if (q <= 0) return;
  const Eigen::Index members = g.rows();
  if (mode == ForecastNoise::kGaussian || members < 2) {
    const double s = std::sqrt(q);
    for (Eigen::Index k = 0; k < g.cols(); ++k) {
      for (Eigen::Index m = 0; m < members; ++m) g(m, k) += s * z(rng);
    }
    return;
  }
  const double dof = static_cast<double>(members - 1);
  Eigen::VectorXd e(members);
  for (Eigen::Index k = 0; k < g.cols(); ++k) {
    const double mean = g.col(k).mean();
    const Eigen::VectorXd a = g.col(k).array() - mean;
    const double ss = a.squaredNorm();
    if (ss > 0) {
      g.col(k) = (mean + std::sqrt((ss + q * dof) / ss) * a.array()).matrix();
      continue;
    }
    // Collapsed column: seed a centred draw with the exact variance.
    for (Eigen::Index m = 0; m < members; ++m) e[m] = z(rng);
    e.array() -= e.mean();
    const double ee = e.squaredNorm();
    if (ee > 0) g.col(k) += std::sqrt(q * dof / ee) * e;
  }
}

}  // namespace

void forecast_step(CalibrationEnsemble& ens, const FilterConfig& config, std::mt19937_64& rng, double beta_star,
                   const Eigen::MatrixXd* smoothed_base) {
  if (smoothed_base && (smoothed_base->rows() != ens.base.rows() || smoothed_base->cols() != ens.base.cols())) {
    throw DataError("smoothed base field shape does not match the ensemble");
  }
  std::normal_distribution<double> z(0.0, 1.0);
  const Eigen::MatrixXd& src = smoothed_base ? *smoothed_base : ens.base;
  Eigen::MatrixXd next = (1.0 - config.lambda_base) * src.array() + config.lambda_base * beta_star;
  add_process_noise(next, config.q_base, config.forecast_noise, rng, z);
  ens.base = std::move(next);
  auto decay = [&](Eigen::MatrixXd& g, double q) {
    g *= 1.0 - config.lambda_glob;
    add_process_noise(g, q, config.forecast_noise, rng, z);
  };
  decay(ens.hour, config.q_hour);
  decay(ens.day, config.q_day);
  decay(ens.regime, config.q_regime);
}

namespace {

double sample_variance(const Eigen::VectorXd& x) {
  const double mean = x.mean();
  return (x.array() - mean).square().sum() / static_cast<double>(x.size() - 1);
}

}  // namespace

AnalysisReport analysis_step(CalibrationEnsemble& ens, std::vector<CameraObservation> observations,
                             const Eigen::VectorXd& q_hat, const TimeContext& context,
                             const Eigen::SparseMatrix<double>* localization, const FilterConfig& config) {
  const int n = ens.segments();
  const int members = ens.members();
  if (members < 2) throw ParameterError("ensemble size M must be >= 2");
  if (q_hat.size() != n) throw DataError("q_hat length does not match the ensemble");
  if (context.hour < 0 || context.hour >= kHours || context.day < 0 || context.day >= kDays) {
    throw ParameterError("time context out of range");
  }
  if (!context.regime.empty() && static_cast<int>(context.regime.size()) != n) {
    throw DataError("regime vector length does not match the ensemble");
  }
  if (localization && (localization->rows() != n || localization->cols() != n)) {
    throw DataError("localization matrix shape does not match the ensemble");
  }

  std::sort(observations.begin(), observations.end(),
            [](const CameraObservation& a, const CameraObservation& b) { return a.segment < b.segment; });
  std::set<std::pair<int, int>> seen;
  for (const auto& o : observations) {
    if (o.segment < 0 || o.segment >= n) {
      throw DataError("camera observation on unknown segment " + std::to_string(o.segment));
    }
    if (!seen.insert({o.segment, o.time}).second) {
      throw DataError("duplicate camera observation for segment " + std::to_string(o.segment) + " at bin " +
                      std::to_string(o.time));
    }
  }

  AnalysisReport report;
  const double inv_m1 = 1.0 / static_cast<double>(members - 1);
  Eigen::VectorXd z(members);
  Eigen::VectorXd anomaly(members);
  for (const auto& o : observations) {
    if (o.missing || !std::isfinite(o.count)) {
      ++report.skipped;
      continue;
    }
    if (o.count < 0) throw DataError("negative camera count on segment " + std::to_string(o.segment));
    const SegmentId i = o.segment;
    const int c = context.regime.empty() ? static_cast<int>(kFree) : context.regime[static_cast<std::size_t>(i)];
    for (int m = 0; m < members; ++m) z[m] = ens.effective_beta(m, i, context.hour, context.day, c);
    const double z_mean = z.mean();
    anomaly = z.array() - z_mean;
    const double p_zz = anomaly.squaredNorm() * inv_m1;
    const double r = obs_variance(o.count, config.sigma0, config.sigma_y, config.eps);
    const double obs = log_ratio(o.count, std::max(0.0, q_hat[i]), config.eps);
    const double innovation = obs - z_mean;
    const double denom = p_zz + r;
    const double gamma = 1.0 / (1.0 + std::sqrt(r / denom));
    // Members move by K (nu - gamma Z_m): mean shift plus anomaly shrink.
    const Eigen::VectorXd drive = (innovation - gamma * anomaly.array()).matrix();

    auto update_column = [&](Eigen::MatrixXd& block, Eigen::Index col, double scale) {
      const double mean = block.col(col).mean();
      const double cov = (block.col(col).array() - mean).matrix().dot(anomaly) * inv_m1;
      const double gain = scale * cov / denom;
      if (gain == 0.0) return;
      block.col(col) += gain * drive;
    };

    if (localization) {
      for (Eigen::SparseMatrix<double>::InnerIterator it(*localization, i); it; ++it) {
        if (it.value() == 0.0) continue;
        update_column(ens.base, it.row(), it.value());
      }
    } else {
      for (int j = 0; j < n; ++j) update_column(ens.base, j, 1.0);
    }
    if (report.global_updates < config.global_obs_cap && config.global_gain > 0) {
      for (Eigen::MatrixXd* g : {&ens.hour, &ens.day, &ens.regime}) {
        for (Eigen::Index k = 0; k < g->cols(); ++k) update_column(*g, k, config.global_gain);
      }
      ++report.global_updates;
    }

    for (int m = 0; m < members; ++m) z[m] = ens.effective_beta(m, i, context.hour, context.day, c);
    report.prior_variance.push_back(p_zz);
    report.posterior_variance.push_back(sample_variance(z));
    if (report.posterior_variance.back() > p_zz * (1.0 + 1e-9) + 1e-15) {
      ens.diagnostics.warn("variance_not_contracted",
                           "posterior variance exceeded prior at segment " + std::to_string(i));
    }
    ++report.assimilated;
  }
  return report;
}

Eigen::MatrixXd beta_members(const CalibrationEnsemble& ens, const TimeContext* context) {
  Eigen::MatrixXd beta = ens.base;
  if (context) {
    const int n = ens.segments();
    for (int m = 0; m < ens.members(); ++m) {
      for (int i = 0; i < n; ++i) {
        const int c = context->regime.empty() ? static_cast<int>(kFree) : context->regime[static_cast<std::size_t>(i)];
        beta(m, i) = ens.effective_beta(m, i, context->hour, context->day, c);
      }
    }
  }
  return beta;
}

namespace {

Eigen::MatrixXd alpha_members(const CalibrationEnsemble& ens, const TimeContext* context) {
  return beta_members(ens, context).array().exp().matrix();
}

}  // namespace

AlphaStatistics alpha_statistics(const CalibrationEnsemble& ens, const TimeContext* context) {
  if (ens.members() < 2) throw ParameterError("ensemble size M must be >= 2");
  const Eigen::MatrixXd alpha = alpha_members(ens, context);
  AlphaStatistics s;
  s.mean = alpha.colwise().mean().transpose();
  s.variance.resize(alpha.cols());
  for (Eigen::Index i = 0; i < alpha.cols(); ++i) {
    s.variance[i] = (alpha.col(i).array() - s.mean[i]).square().sum() / static_cast<double>(alpha.rows() - 1);
  }
  return s;
}

Eigen::VectorXd alpha_quantile(const CalibrationEnsemble& ens, double q, const TimeContext* context) {
  if (!(q >= 0 && q <= 1)) throw ParameterError("quantile must lie in [0, 1]");
  const Eigen::MatrixXd alpha = alpha_members(ens, context);
  Eigen::VectorXd out(alpha.cols());
  std::vector<double> col(static_cast<std::size_t>(alpha.rows()));
  for (Eigen::Index i = 0; i < alpha.cols(); ++i) {
    for (Eigen::Index m = 0; m < alpha.rows(); ++m) col[static_cast<std::size_t>(m)] = alpha(m, i);
    std::sort(col.begin(), col.end());
    const double pos = q * static_cast<double>(col.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, col.size() - 1);
    out[i] = col[lo] + (pos - static_cast<double>(lo)) * (col[hi] - col[lo]);
  }
  return out;
}

Eigen::VectorXd predictive_quantile(const CalibrationEnsemble& ens, const Eigen::VectorXd& q_hat,
                                    const Eigen::VectorXd& sigma, double q, const TimeContext* context) {
  if (!(q > 0 && q < 1)) throw ParameterError("predictive quantile must lie in (0, 1)");
  if (q_hat.size() != ens.segments() || sigma.size() != ens.segments()) {
    throw ParameterError("q_hat and sigma must have one entry per segment");
  }
  const Eigen::MatrixXd alpha = alpha_members(ens, context);
  const double members = static_cast<double>(alpha.rows());
  Eigen::VectorXd out(alpha.cols());
  for (Eigen::Index i = 0; i < alpha.cols(); ++i) {
    const double mu = q_hat[i];
    const double sd = sigma[i];
    if (!std::isfinite(mu) || !std::isfinite(sd)) {
      out[i] = std::numeric_limits<double>::quiet_NaN();
      continue;
    }
    // P(alpha_m * max(0, X) <= v), X ~ N(mu, sd^2), averaged over members.
    auto cdf = [&](double v) {
      double acc = 0.0;
      for (Eigen::Index m = 0; m < alpha.rows(); ++m) {
        const double x = v / alpha(m, i);
        acc += sd > 0 ? 0.5 * std::erfc(-(x - mu) / (sd * std::numbers::sqrt2)) : (mu <= x ? 1.0 : 0.0);
      }
      return acc / members;
    };
    if (cdf(0.0) >= q) {
      out[i] = 0.0;
      continue;
    }
    double lo = 0.0;
    double hi = alpha.col(i).maxCoeff() * (std::max(mu, 0.0) + 10.0 * sd) + 1e-12;
    for (int it = 0; it < 60 && hi - lo > 1e-9 * std::max(1.0, hi); ++it) {
      const double mid = 0.5 * (lo + hi);
      (cdf(mid) < q ? lo : hi) = mid;
    }
    out[i] = 0.5 * (lo + hi);
  }
  return out;
}

std::vector<CameraObservation> load_camera_observations(const std::filesystem::path& path, const RoadNetwork& net,
                                                        EpochSeconds start, double bin_seconds) {
  const auto rows = csv::read(path);
  if (rows.empty()) throw ParseError(path.string() + ": empty camera file");
  const auto& header = rows.front().cells;
  if (header.size() < 3 || header[0] != "segment_id" || header[1] != "bin_start" || header[2] != "count") {
    throw ParseError(path.string() + ":" + std::to_string(rows.front().line) +
                     ": expected header segment_id,bin_start,count[,quality_flag]");
  }
  std::vector<CameraObservation> out;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.cells.size() < 3) {
      throw ParseError(path.string() + ":" + std::to_string(row.line) + ": expected at least 3 columns");
    }
    const auto seg = net.index_of(row.cells[0]);
    if (!seg) throw DataError(path.string() + ":" + std::to_string(row.line) + ": unknown segment '" + row.cells[0] + "'");
    EpochSeconds t = 0;
    try {
      t = parse_iso8601(row.cells[1]);
    } catch (const Error& e) {
      throw ParseError(path.string() + ":" + std::to_string(row.line) + ": " + e.what());
    }
    const double offset = static_cast<double>(t - start) / bin_seconds;
    if (offset < 0 || offset != std::floor(offset)) {
      throw DataError(path.string() + ":" + std::to_string(row.line) + ": bin_start is not aligned to the bin grid");
    }
    CameraObservation o;
    o.segment = *seg;
    o.time = static_cast<int>(offset);
    if (row.cells[2].empty()) {
      o.missing = true;
      o.count = 0.0;
    } else {
      o.count = csv::to_double(row.cells[2], path, row.line, "count");
      if (o.count < 0) throw DataError(path.string() + ":" + std::to_string(row.line) + ": negative count");
    }
    if (row.cells.size() > 3 && !row.cells[3].empty() && row.cells[3] != "ok" && row.cells[3] != "1") {
      o.missing = true;
    }
    out.push_back(o);
  }
  return out;
}

void save_camera_observations(const std::vector<CameraObservation>& obs, const RoadNetwork& net,
                              EpochSeconds start, double bin_seconds, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "segment_id,bin_start,count,quality_flag\n";
  for (const auto& o : obs) {
    const auto t = start + static_cast<EpochSeconds>(std::llround(o.time * bin_seconds));
    out << net.external_id(o.segment) << ',' << format_iso8601(t) << ',' << csv::format(o.count) << ','
        << (o.missing ? "missing" : "ok") << '\n';
  }
  csv::write_atomic(path, out.str());
}

}  // namespace trafficfuse
