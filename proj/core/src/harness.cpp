#include "trafficfuse/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "json.hpp"
#include "trafficfuse/csv.hpp"
#include "trafficfuse/error.hpp"
#include "trafficfuse/twin.hpp"

namespace trafficfuse {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

CountMatrix like(const CountMatrix& shape, double fill = kNaN) {
  CountMatrix m;
  m.values = Eigen::MatrixXd::Constant(shape.segments(), shape.bins(), fill);
  m.bin_seconds = shape.bin_seconds;
  m.start = shape.start;
  return m;
}

std::string seed_comment(const ExperimentConfig& config, std::string_view artifact) {
  return "trafficfuse " + std::string(artifact) + " seed=" + std::to_string(config.seed);
}

std::vector<SegmentId> resolve_cameras(const RoadNetwork& net, const std::vector<std::string>& ids,
                                       const char* role) {
  std::vector<SegmentId> out;
  for (const auto& id : ids) {
    const auto seg = net.index_of(id);
    if (!seg) throw ParameterError(std::string(role) + " camera on unknown segment '" + id + "'");
    out.push_back(*seg);
  }
  std::sort(out.begin(), out.end());
  if (std::adjacent_find(out.begin(), out.end()) != out.end()) {
    throw ParameterError(std::string(role) + " camera list contains a duplicate segment");
  }
  return out;
}

void check_disjoint(std::span<const SegmentId> calibration, std::span<const SegmentId> validation) {
  for (SegmentId c : calibration) {
    if (std::find(validation.begin(), validation.end(), c) != validation.end()) {
      throw Error("camera on segment " + std::to_string(c) + " is in both the calibration and validation sets");
    }
  }
}

// Inverse standard normal CDF by bisection; only used for interval levels.
double normal_quantile(double p) {
  double lo = -10.0;
  double hi = 10.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (0.5 * std::erfc(-mid / std::numbers::sqrt2) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

template <typename Fn>
auto stage(const char* name, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

}  // namespace

CountMatrix thin_counts(const CountMatrix& truth, const PenetrationModel& pen, std::span<const int> group,
                        std::mt19937_64& rng) {
  pen.validate();
  if (!group.empty() && static_cast<int>(group.size()) != truth.segments()) {
    throw DataError("segment group list does not match the count matrix");
  }
  CountMatrix out = like(truth);
  for (int t = 0; t < truth.bins(); ++t) {
    const int h = truth.hour(t);
    const int d = truth.day(t);
    for (int i = 0; i < truth.segments(); ++i) {
      const double v = truth.values(i, t);
      if (std::isnan(v)) continue;
      if (v < 0) throw DataError("negative truth count at segment " + std::to_string(i) + ", bin " + std::to_string(t));
      const auto n = static_cast<long long>(std::llround(v));
      const double p = pen.rate(group.empty() ? 0 : group[static_cast<std::size_t>(i)], h, d);
      std::binomial_distribution<long long> b(n, p);
      out.values(i, t) = static_cast<double>(b(rng));
    }
  }
  return out;
}

CountMatrix pool_windows(std::span<const CountMatrix> months, bool average) {
  if (months.empty()) throw ParameterError("pool_windows needs at least one dataset");
  const CountMatrix& ref = months.front();
  constexpr EpochSeconds kWeek = 7 * 86400;
  for (const auto& m : months) {
    if (m.segments() != ref.segments() || m.bins() != ref.bins() || m.bin_seconds != ref.bin_seconds) {
      throw DataError("pooled datasets must share segments, bin count and bin width");
    }
    const EpochSeconds shift = ((m.start - ref.start) % kWeek + kWeek) % kWeek;
    if (shift != 0) throw DataError("pooled datasets are misaligned in time-of-week");
  }
  CountMatrix out = like(ref);
  for (int t = 0; t < ref.bins(); ++t) {
    for (int i = 0; i < ref.segments(); ++i) {
      double sum = 0.0;
      int n = 0;
      for (const auto& m : months) {
        const double v = m.values(i, t);
        if (std::isnan(v)) continue;
        sum += v;
        ++n;
      }
      if (n > 0) out.values(i, t) = average ? sum / n : sum;
    }
  }
  return out;
}

MetricsReport evaluate(const CountMatrix& estimate, const CountMatrix& truth, std::span<const SegmentId> locations,
                       const RoadNetwork& net, const CountMatrix* lower, const CountMatrix* upper, int first,
                       int last) {
  if (estimate.segments() != truth.segments() || estimate.bins() != truth.bins()) {
    throw DataError("estimate and truth matrices are not aligned");
  }
  const bool intervals = lower != nullptr && upper != nullptr;
  if (intervals && (lower->values.rows() != truth.values.rows() || lower->values.cols() != truth.values.cols() ||
                    upper->values.rows() != truth.values.rows() || upper->values.cols() != truth.values.cols())) {
    throw DataError("interval matrices are not aligned with truth");
  }
  if (last < 0 || last > truth.bins()) last = truth.bins();
  first = std::clamp(first, 0, last);

  MetricsReport rep;
  double abs_sum = 0.0;
  double sq_sum = 0.0;
  double sse_sum = 0.0;
  double sst_sum = 0.0;
  int covered_all = 0;
  int interval_all = 0;
  std::vector<double> xs;
  std::vector<double> ys;
  for (SegmentId i : locations) {
    LocationMetrics lm;
    lm.segment_id = net.external_id(i);
    std::vector<double> est;
    std::vector<double> tru;
    int covered = 0;
    int with_interval = 0;
    for (int t = first; t < last; ++t) {
      const double e = estimate.values(i, t);
      const double y = truth.values(i, t);
      if (std::isnan(e) || std::isnan(y)) continue;
      est.push_back(e);
      tru.push_back(y);
      if (intervals) {
        const double lo = lower->values(i, t);
        const double hi = upper->values(i, t);
        if (!std::isnan(lo) && !std::isnan(hi)) {
          ++with_interval;
          covered += (y >= lo && y <= hi) ? 1 : 0;
        }
      }
    }
    lm.samples = static_cast<int>(est.size());
    if (lm.samples == 0) {
      lm.missing_reason = "no aligned samples";
      rep.locations.push_back(lm);
      continue;
    }
    double mean_y = 0.0;
    double mean_e = 0.0;
    for (std::size_t k = 0; k < est.size(); ++k) {
      mean_y += tru[k];
      mean_e += est[k];
    }
    mean_y /= lm.samples;
    mean_e /= lm.samples;
    double sse = 0.0;
    double sst = 0.0;
    double see = 0.0;
    double sxy = 0.0;
    double abs_err = 0.0;
    for (std::size_t k = 0; k < est.size(); ++k) {
      const double err = est[k] - tru[k];
      abs_err += std::abs(err);
      sse += err * err;
      sst += (tru[k] - mean_y) * (tru[k] - mean_y);
      see += (est[k] - mean_e) * (est[k] - mean_e);
      sxy += (est[k] - mean_e) * (tru[k] - mean_y);
    }
    lm.mae = abs_err / lm.samples;
    lm.rmse = std::sqrt(sse / lm.samples);
    if (sst > 0) {
      lm.r2 = 1.0 - sse / sst;
    } else {
      lm.missing_reason = "zero-variance truth";
    }
    if (sst > 0 && see > 0) {
      lm.r = std::clamp(sxy / std::sqrt(sst * see), -1.0, 1.0);
    } else if (lm.missing_reason.empty()) {
      lm.missing_reason = "zero-variance estimate";
    }
    if (with_interval > 0) lm.coverage = static_cast<double>(covered) / with_interval;
    rep.locations.push_back(lm);

    abs_sum += abs_err;
    sq_sum += sse;
    sse_sum += sse;
    sst_sum += sst;
    covered_all += covered;
    interval_all += with_interval;
    rep.samples += lm.samples;
    xs.insert(xs.end(), est.begin(), est.end());
    ys.insert(ys.end(), tru.begin(), tru.end());
  }
  if (rep.samples > 0) {
    rep.mae = abs_sum / rep.samples;
    rep.rmse = std::sqrt(sq_sum / rep.samples);
    if (sst_sum > 0) rep.pooled_r2 = 1.0 - sse_sum / sst_sum;
    double mx = 0.0;
    double my = 0.0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      mx += xs[k];
      my += ys[k];
    }
    mx /= static_cast<double>(xs.size());
    my /= static_cast<double>(ys.size());
    double sxx = 0.0;
    double syy = 0.0;
    double sxy = 0.0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      sxx += (xs[k] - mx) * (xs[k] - mx);
      syy += (ys[k] - my) * (ys[k] - my);
      sxy += (xs[k] - mx) * (ys[k] - my);
    }
    if (sxx > 0 && syy > 0) rep.pooled_r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
    if (interval_all > 0) rep.coverage = static_cast<double>(covered_all) / interval_all;
  }
  return rep;
}

std::vector<LinkTransition> transitions_from_edge_counts(const RoadNetwork& net, const Eigen::MatrixXd& edge_counts) {
  if (edge_counts.rows() != static_cast<Eigen::Index>(net.edges().size())) {
    throw DataError("edge count rows do not match the network edges");
  }
  std::vector<LinkTransition> out;
  for (std::size_t e = 0; e < net.edges().size(); ++e) {
    double total = 0.0;
    for (Eigen::Index t = 0; t < edge_counts.cols(); ++t) {
      const double v = edge_counts(static_cast<Eigen::Index>(e), t);
      if (!std::isnan(v)) total += v;
    }
    out.push_back({net.edges()[e].from, net.edges()[e].to, total});
  }
  return out;
}

SimulationStage run_simulation(const ExperimentConfig& config) {
  SimulationStage sim;
  TwinScenario tw;
  const int warm = config.warmup_bins;
  const double dt = config.grid.bin_seconds;
  if (config.twin == "grid") {
    std::mt19937_64 rng(stage_seed(config.seed, "demand"));
    GridTwinOptions opts = config.grid;
    opts.bins = config.grid.bins + warm;
    opts.start = config.grid.start - static_cast<EpochSeconds>(std::llround(warm * dt));
    tw = grid_twin(opts, rng);
  } else if (config.twin == "chain") {
    tw = chain_twin(config.grid.bins + warm, config.chain_level, dt);
    tw.start = config.grid.start - static_cast<EpochSeconds>(std::llround(warm * dt));
  } else {
    tw.net = load_network(config.segments_csv, config.edges_csv, &sim.diagnostics);
    double bin = dt;
    EpochSeconds start = 0;
    tw.inflow = load_demand_profile(config.demand_csv, tw.net, &bin, &start);
    tw.bin_seconds = bin;
    tw.start = start;
    tw.turns = uniform_turn_ratios(tw.net);
    tw.fd = default_fd_params(tw.net, bin);
    tw.group.assign(static_cast<std::size_t>(tw.net.size()), 0);
  }
  if (!config.calibration_cameras.empty() || !config.validation_cameras.empty()) {
    tw.calibration_cameras = resolve_cameras(tw.net, config.calibration_cameras, "calibration");
    tw.validation_cameras = resolve_cameras(tw.net, config.validation_cameras, "validation");
  }
  check_disjoint(tw.calibration_cameras, tw.validation_cameras);

  const bool file_net = config.twin.empty();
  const int lead = file_net ? 0 : warm;
  const int horizon = static_cast<int>(tw.inflow.cols());
  SimulationOptions so;
  so.bin_seconds = tw.bin_seconds;
  so.start = tw.start;
  so.exit_capacity = tw.exit_capacity;
  SimulationResult res = simulate(tw.net, tw.fd, tw.turns, tw.inflow, horizon, so);

  const int keep = horizon - lead;
  const EpochSeconds start = tw.start + static_cast<EpochSeconds>(std::llround(lead * tw.bin_seconds));
  sim.truth.values = res.counts.values.rightCols(keep);
  sim.truth.bin_seconds = tw.bin_seconds;
  sim.truth.start = start;
  sim.speeds.values = res.speeds.values.rightCols(keep);
  sim.speeds.bin_seconds = tw.bin_seconds;
  sim.speeds.start = start;
  sim.link_flows = res.link_flows.rightCols(keep);
  sim.boundary_inflow = res.boundary_inflow.rightCols(keep);
  sim.boundary_outflow = res.boundary_outflow.rightCols(keep);
  sim.diagnostics.merge(res.diagnostics);
  sim.net = std::move(tw.net);
  sim.turns = std::move(tw.turns);
  sim.fd = tw.fd;
  sim.group = std::move(tw.group);
  sim.calibration_cameras = std::move(tw.calibration_cameras);
  sim.validation_cameras = std::move(tw.validation_cameras);
  return sim;
}

SampleStage run_sampling(const ExperimentConfig& config, const SimulationStage& sim) {
  std::mt19937_64 rng(stage_seed(config.seed, "sample"));
  const CountMatrix& truth = sim.truth;
  const int n = truth.segments();
  const int t_len = truth.bins();
  const int months = config.pooled_months;
  SampleStage s;

  std::vector<CountMatrix> draws;
  for (int m = 0; m < months; ++m) draws.push_back(thin_counts(truth, config.penetration, sim.group, rng));
  s.probe_counts = pool_windows(draws, false);

  s.probe_speeds = like(truth);
  for (int t = 0; t < t_len; ++t) {
    for (int i = 0; i < n; ++i) {
      if (s.probe_counts.values(i, t) > 0) s.probe_speeds.values(i, t) = sim.speeds.values(i, t);
    }
  }

  const auto& edges = sim.net.edges();
  s.probe_link_flows = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(edges.size()), t_len);
  for (int t = 0; t < t_len; ++t) {
    for (std::size_t e = 0; e < edges.size(); ++e) {
      const double v = sim.link_flows(static_cast<Eigen::Index>(e), t);
      const auto trips = static_cast<long long>(std::llround(std::max(0.0, v)));
      const double p = config.penetration.rate(sim.group.empty() ? 0 : sim.group[static_cast<std::size_t>(edges[e].from)],
                                               truth.hour(t), truth.day(t));
      double sum = 0.0;
      for (int m = 0; m < months; ++m) {
        std::binomial_distribution<long long> b(trips, p);
        sum += static_cast<double>(b(rng));
      }
      s.probe_link_flows(static_cast<Eigen::Index>(e), t) = sum;
    }
  }

  // Expected probe-scale change of the network total between t and t+1.
  s.boundary_net = Eigen::VectorXd::Zero(t_len);
  auto expected_total = [&](int t) {
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      const double p = config.penetration.rate(sim.group.empty() ? 0 : sim.group[static_cast<std::size_t>(i)],
                                               truth.hour(t), truth.day(t));
      total += months * p * truth.values(i, t);
    }
    return total;
  };
  for (int t = 0; t + 1 < t_len; ++t) s.boundary_net[t] = expected_total(t + 1) - expected_total(t);

  std::mt19937_64 cam_rng(stage_seed(config.seed, "cameras"));
  std::normal_distribution<double> noise(0.0, config.camera_noise_std);
  auto observe = [&](std::span<const SegmentId> cams, std::vector<CameraObservation>& out) {
    for (int t = 0; t < t_len; ++t) {
      for (SegmentId c : cams) {
        CameraObservation o;
        o.segment = c;
        o.time = t;
        o.count = std::max(0.0, truth.values(c, t) + noise(cam_rng));
        out.push_back(o);
      }
    }
  };
  observe(sim.calibration_cameras, s.calibration_obs);
  observe(sim.validation_cameras, s.validation_obs);
  return s;
}

namespace {

int train_columns(const ExperimentConfig& config, int bins) {
  return config.train_bins > 0 ? std::min(config.train_bins, bins) : bins / 2;
}

}  // namespace

FeatureTensor run_features(const ExperimentConfig& config, const SimulationStage& sim, const SampleStage& sample) {
  FeatureOptions opts;
  opts.train_bins = train_columns(config, sample.probe_counts.bins());
  Diagnostics diag;
  return build_tensor(sample.probe_counts, sample.probe_speeds, sim.net, sim.fd, opts, &diag);
}

TrainResult run_training(const ExperimentConfig& config, const SimulationStage& sim, const SampleStage& sample,
                         const FeatureTensor& tensor) {
  ModelConfig model = config.model;
  model.seed = stage_seed(config.seed, "model");
  TrainConfig tc = config.training;
  tc.bin_limit = train_columns(config, tensor.bins());
  WindowSource src{&tensor, sample.probe_counts.values, sample.boundary_net};
  return train(src, sim.net, model, tc);
}

CalibrationStage run_calibration(const ExperimentConfig& config, const SimulationStage& sim,
                                 const SampleStage& sample, const FeatureTensor& tensor, const Predictor& model) {
  const RoadNetwork& net = sim.net;
  const int n = net.size();
  const int t_len = sim.truth.bins();
  check_disjoint(sim.calibration_cameras, sim.validation_cameras);

  CalibrationStage cal;
  WindowSource src{&tensor, sample.probe_counts.values, sample.boundary_net};
  const SeriesPrediction pred = predict_series(model, src, net);
  cal.q_hat = like(sim.truth);
  cal.q_hat.values = pred.q_hat.front();
  cal.sigma = like(sim.truth);
  cal.sigma.values = pred.sigma.front();
  for (CountMatrix* m : {&cal.calibrated, &cal.lower, &cal.upper, &cal.alpha_mean, &cal.alpha_var, &cal.confidence,
                         &cal.beta_width}) {
    *m = like(sim.truth);
  }

  const int train_cols = train_columns(config, t_len);
  const LinkFlowStats stats = link_flow_stats(
      net, transitions_from_edge_counts(net, sample.probe_link_flows.leftCols(train_cols)));
  const TransitionMatrix tm = build_transition(stats, net, config.propagation);
  const Eigen::SparseMatrix<double> rho = localization_matrix(tm, sim.calibration_cameras);
  {
    std::vector<bool> reach(static_cast<std::size_t>(n), false);
    for (int c = 0; c < rho.outerSize(); ++c) {
      for (Eigen::SparseMatrix<double>::InnerIterator it(rho, c); it; ++it) {
        if (it.value() != 0.0) reach[static_cast<std::size_t>(it.row())] = true;
      }
    }
    for (int i = 0; i < n; ++i) {
      if (!reach[static_cast<std::size_t>(i)]) cal.unreachable.push_back(i);
    }
  }

  std::vector<std::vector<CameraObservation>> by_time(static_cast<std::size_t>(t_len));
  const std::set<SegmentId> allowed(sim.calibration_cameras.begin(), sim.calibration_cameras.end());
  for (const auto& o : sample.calibration_obs) {
    if (!allowed.count(o.segment)) throw Error("observation on segment " + std::to_string(o.segment) + " is not a calibration camera");
    if (o.time < 0 || o.time >= t_len) continue;
    by_time[static_cast<std::size_t>(o.time)].push_back(o);
  }

  int t0 = -1;
  for (int t = 0; t < t_len && t0 < 0; ++t) {
    if (cal.q_hat.values.col(t).allFinite()) t0 = t;
  }
  if (t0 < 0) throw DataError("the predictor produced no complete column");
  const int cutoff = config.observation_cutoff > 0 ? config.observation_cutoff : t_len;

  std::vector<double> ratios;
  for (int t = t0; t < std::min({t_len, t0 + config.alpha_warmup_bins, cutoff}); ++t) {
    for (const auto& o : by_time[static_cast<std::size_t>(t)]) {
      const double q = cal.q_hat.values(o.segment, t);
      if (!o.missing && q > 1.0 && o.count > 0) ratios.push_back(o.count / q);
    }
  }
  cal.log_alpha0 = ratios.empty() ? 0.0 : std::log(median(ratios));

  std::mt19937_64 rng(stage_seed(config.seed, "filter"));
  const FilterConfig& fc = config.filter;
  CalibrationEnsemble ens = CalibrationEnsemble::initialize(n, fc, cal.log_alpha0, rng);
  const double lo_q = 0.5 * (1.0 - config.interval_level);
  const double hi_q = 1.0 - lo_q;
  const double z_level = normal_quantile(hi_q);

  for (int t = t0; t < t_len; ++t) {
    if (t > t0) {
      const double b_star = beta_star(ens);
      const Eigen::MatrixXd smoothed = diffuse(ens.base, tm);
      forecast_step(ens, fc, rng, b_star, &smoothed);
    }
    TimeContext ctx;
    ctx.hour = sim.truth.hour(t);
    ctx.day = sim.truth.day(t);
    ctx.regime.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const double v = sample.probe_speeds.values(i, t);
      const double b = std::isnan(v) ? 1.0 : speed_ratio(v, net.segment(i).free_flow_speed);
      ctx.regime[static_cast<std::size_t>(i)] = regime_index(b);
    }

    std::vector<SegmentId> observed;
    if (t < cutoff) {
      const auto& obs = by_time[static_cast<std::size_t>(t)];
      for (const auto& o : obs) {
        if (!o.missing) observed.push_back(o.segment);
      }
      Eigen::MatrixXd base_before(ens.members(), static_cast<Eigen::Index>(cal.unreachable.size()));
      for (std::size_t k = 0; k < cal.unreachable.size(); ++k) {
        base_before.col(static_cast<Eigen::Index>(k)) = ens.base.col(cal.unreachable[k]);
      }
      analysis_step(ens, obs, cal.q_hat.values.col(t), ctx, &rho, fc);
      ++cal.analysis_steps;
      for (std::size_t k = 0; k < cal.unreachable.size(); ++k) {
        const double change =
            (ens.base.col(cal.unreachable[k]) - base_before.col(static_cast<Eigen::Index>(k))).cwiseAbs().maxCoeff();
        cal.unreachable_max_change = std::max(cal.unreachable_max_change, change);
      }
    }

    const AlphaStatistics st = alpha_statistics(ens, &ctx);
    const Eigen::MatrixXd& beta = ens.base;
    const Eigen::VectorXd beta_sd =
        ((beta.rowwise() - beta.colwise().mean()).colwise().squaredNorm() / static_cast<double>(beta.rows() - 1))
            .cwiseSqrt()
            .transpose();
    ens.confidence = update_confidence(ens.confidence, st.mean, st.variance, observed, config.propagation.confidence_decay);
    const double a_star = median(std::span<const double>(st.mean.data(), static_cast<std::size_t>(st.mean.size())));
    const Eigen::VectorXd alpha_c = shrink_blend(st.mean, ens.confidence, a_star);
    const Eigen::VectorXd q_now = cal.q_hat.values.col(t).cwiseMax(0.0);
    const Eigen::VectorXd s_now = cal.sigma.values.col(t);
    const Eigen::VectorXd y_lo = predictive_quantile(ens, q_now, s_now, lo_q, &ctx);
    const Eigen::VectorXd y_hi = predictive_quantile(ens, q_now, s_now, hi_q, &ctx);
    for (int i = 0; i < n; ++i) {
      const double q = std::max(0.0, cal.q_hat.values(i, t));
      cal.calibrated.values(i, t) = alpha_c[i] * q;
      cal.lower.values(i, t) = y_lo[i];
      cal.upper.values(i, t) = y_hi[i];
      cal.alpha_mean.values(i, t) = st.mean[i];
      cal.alpha_var.values(i, t) = st.variance[i];
      cal.confidence.values(i, t) = ens.confidence[i];
      cal.beta_width.values(i, t) = 2.0 * z_level * beta_sd[i];
    }
  }
  cal.diagnostics.merge(ens.diagnostics);
  return cal;
}

ObservabilityReport run_observability(const ExperimentConfig& config, const SimulationStage& sim,
                                      const SampleStage& sample) {
  const RoadNetwork& net = sim.net;
  std::vector<double> weights(net.edges().size(), 0.0);
  for (std::size_t e = 0; e < weights.size(); ++e) {
    weights[e] = sample.probe_link_flows.row(static_cast<Eigen::Index>(e)).sum();
  }
  const TurnRatios tr = turn_ratios_from_weights(net, weights);
  Eigen::VectorXd nominal = Eigen::VectorXd::Zero(net.size());
  for (int i = 0; i < net.size(); ++i) {
    double s = 0.0;
    int k = 0;
    for (int t = 0; t < sim.truth.bins(); ++t) {
      const double v = sim.truth.values(i, t);
      if (std::isnan(v)) continue;
      s += v;
      ++k;
    }
    nominal[i] = k > 0 ? s / k : 0.0;
  }
  ObservabilityOptions opts;
  opts.horizon = config.observability_horizon;
  return analyze_observability(net, sim.fd, tr, nominal, sim.calibration_cameras, sim.truth.bin_seconds, opts);
}

MetricsReport evaluate_calibrated(const ExperimentConfig& config, const SimulationStage& sim,
                                  const CalibrationStage& cal) {
  return evaluate(cal.calibrated, sim.truth, sim.validation_cameras, sim.net, &cal.lower, &cal.upper,
                  config.evaluation_start);
}

MetricsReport evaluate_predictor(const ExperimentConfig& config, const SimulationStage& sim,
                                 const CalibrationStage& cal) {
  return evaluate(cal.q_hat, sim.truth, sim.validation_cameras, sim.net, nullptr, nullptr, config.evaluation_start);
}

namespace {

nlohmann::json report_json(const MetricsReport& r) {
  using nlohmann::json;
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json j;
  j["samples"] = r.samples;
  j["mae"] = r.mae;
  j["rmse"] = r.rmse;
  j["pooled_r2"] = opt(r.pooled_r2);
  j["pooled_r"] = opt(r.pooled_r);
  j["coverage"] = opt(r.coverage);
  auto& locs = j["locations"] = json::array();
  for (const auto& l : r.locations) {
    json e;
    e["segment_id"] = l.segment_id;
    e["samples"] = l.samples;
    e["mae"] = l.mae;
    e["rmse"] = l.rmse;
    e["r2"] = opt(l.r2);
    e["r"] = opt(l.r);
    e["coverage"] = opt(l.coverage);
    if (!l.missing_reason.empty()) e["missing_reason"] = l.missing_reason;
    locs.push_back(e);
  }
  return j;
}

}  // namespace

std::string metrics_json(const ExperimentConfig& config, const MetricsReport& calibrated,
                         const MetricsReport& predictor) {
  nlohmann::json j;
  j["seed"] = config.seed;
  j["interval_level"] = config.interval_level;
  j["calibrated"] = report_json(calibrated);
  j["uncalibrated"] = report_json(predictor);
  j["mae_improvement"] = predictor.mae > 0 ? nlohmann::json(1.0 - calibrated.mae / predictor.mae) : nlohmann::json(nullptr);
  return j.dump(2) + "\n";
}

PipelineResult run_pipeline(const ExperimentConfig& config, const std::filesystem::path& out_dir) {
  PipelineResult r;
  const bool write = !out_dir.empty();
  r.sim = stage("simulate", [&] { return run_simulation(config); });
  if (write) stage("simulate", [&] { save_simulation(r.sim, config, out_dir); return 0; });
  r.sample = stage("sample", [&] { return run_sampling(config, r.sim); });
  if (write) stage("sample", [&] { save_sample(r.sample, r.sim, config, out_dir); return 0; });
  r.tensor = stage("features", [&] { return run_features(config, r.sim, r.sample); });
  if (write) stage("features", [&] { r.tensor.save(out_dir / "features.bin"); return 0; });
  r.training = stage("train", [&] { return run_training(config, r.sim, r.sample, r.tensor); });
  ModelConfig model_cfg = config.model;
  model_cfg.seed = stage_seed(config.seed, "model");
  if (write) {
    stage("train", [&] {
      save_checkpoint(model_cfg, r.training.params, out_dir / "model.ckpt");
      save_train_log(r.training.log, out_dir / "train_log.csv");
      return 0;
    });
  }
  r.calibration = stage("calibrate", [&] {
    const Predictor model(model_cfg, r.sim.net, r.training.params);
    return run_calibration(config, r.sim, r.sample, r.tensor, model);
  });
  if (write) stage("calibrate", [&] { save_calibration(r.calibration, r.sim, config, out_dir); return 0; });
  r.observability = stage("observability", [&] { return run_observability(config, r.sim, r.sample); });
  if (write) {
    stage("observability", [&] {
      save_observability(r.observability, r.sim.net, out_dir / "observability.json", out_dir / "observability.csv");
      return 0;
    });
  }
  stage("evaluate", [&] {
    r.calibrated_metrics = evaluate_calibrated(config, r.sim, r.calibration);
    r.predictor_metrics = evaluate_predictor(config, r.sim, r.calibration);
    if (write) csv::write_atomic(out_dir / "metrics.json", metrics_json(config, r.calibrated_metrics, r.predictor_metrics));
    return 0;
  });
  return r;
}

// ---------------------------------------------------------------------------
// Artifact I/O

namespace {

void save_edge_matrix(const Eigen::MatrixXd& m, const RoadNetwork& net, const CountMatrix& timing,
                      const std::filesystem::path& path, std::string_view comment) {
  std::ostringstream out;
  if (!comment.empty()) out << "# " << comment << '\n';
  out << "from_id,to_id";
  for (int t = 0; t < m.cols(); ++t) out << ',' << format_iso8601(timing.time_at(t));
  out << '\n';
  for (std::size_t e = 0; e < net.edges().size(); ++e) {
    out << net.external_id(net.edges()[e].from) << ',' << net.external_id(net.edges()[e].to);
    for (int t = 0; t < m.cols(); ++t) out << ',' << csv::format(m(static_cast<Eigen::Index>(e), t));
    out << '\n';
  }
  csv::write_atomic(path, out.str());
}

Eigen::MatrixXd load_edge_matrix(const RoadNetwork& net, int bins, const std::filesystem::path& path) {
  const auto rows = csv::read(path);
  if (rows.empty()) throw ParseError(path.string() + ": empty file");
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(net.edges().size()), bins);
  std::map<std::pair<int, int>, std::size_t> index;
  for (std::size_t e = 0; e < net.edges().size(); ++e) index[{net.edges()[e].from, net.edges()[e].to}] = e;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (static_cast<int>(row.cells.size()) != bins + 2) {
      throw ParseError(path.string() + ":" + std::to_string(row.line) + ": expected " + std::to_string(bins + 2) + " columns");
    }
    const auto from = net.index_of(row.cells[0]);
    const auto to = net.index_of(row.cells[1]);
    if (!from || !to || !index.count({*from, *to})) {
      throw DataError(path.string() + ":" + std::to_string(row.line) + ": not a network edge");
    }
    const auto e = static_cast<Eigen::Index>(index.at({*from, *to}));
    for (int t = 0; t < bins; ++t) m(e, t) = csv::to_double(row.cells[static_cast<std::size_t>(t + 2)], path, row.line, "flow");
  }
  return m;
}

CountMatrix from_values(const Eigen::MatrixXd& values, const CountMatrix& timing) {
  CountMatrix m;
  m.values = values;
  m.bin_seconds = timing.bin_seconds;
  m.start = timing.start;
  return m;
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path.string() + ": cannot open; run the earlier pipeline stage first");
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

std::vector<std::string> external_ids(const RoadNetwork& net, std::span<const SegmentId> ids) {
  std::vector<std::string> out;
  for (SegmentId i : ids) out.push_back(net.external_id(i));
  return out;
}

}  // namespace

void save_simulation(const SimulationStage& sim, const ExperimentConfig& config, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_network(sim.net, dir / "network");
  save_count_matrix(sim.truth, sim.net, dir / "truth_counts.csv", seed_comment(config, "truth counts"));
  save_count_matrix(sim.speeds, sim.net, dir / "truth_speeds.csv", seed_comment(config, "truth speeds"));
  save_edge_matrix(sim.link_flows, sim.net, sim.truth, dir / "link_flows.csv", seed_comment(config, "link flows"));
  save_count_matrix(from_values(sim.boundary_inflow, sim.truth), sim.net, dir / "boundary_inflow.csv",
                    seed_comment(config, "boundary inflow"));
  save_count_matrix(from_values(sim.boundary_outflow, sim.truth), sim.net, dir / "boundary_outflow.csv",
                    seed_comment(config, "boundary outflow"));
  std::ostringstream tr;
  tr << "from_id,to_id,beta\n";
  for (int i = 0; i < sim.net.size(); ++i) {
    for (SparseMatrix::InnerIterator it(sim.turns.beta, i); it; ++it) {
      tr << sim.net.external_id(i) << ',' << sim.net.external_id(static_cast<SegmentId>(it.col())) << ','
         << csv::format(it.value()) << '\n';
    }
  }
  csv::write_atomic(dir / "turn_ratios.csv", tr.str());
  nlohmann::json j;
  j["seed"] = config.seed;
  j["group"] = sim.group;
  j["calibration_cameras"] = external_ids(sim.net, sim.calibration_cameras);
  j["validation_cameras"] = external_ids(sim.net, sim.validation_cameras);
  j["fd"] = {{"wave_speed", sim.fd.wave_speed}, {"jam_density", sim.fd.jam_density}, {"crit_ratio", sim.fd.crit_ratio}};
  j["diagnostics"] = sim.diagnostics.counters();
  csv::write_atomic(dir / "simulation.json", j.dump(2) + "\n");
}

SimulationStage load_simulation(const ExperimentConfig& config, const std::filesystem::path& dir) {
  (void)config;
  SimulationStage sim;
  sim.net = load_network(dir / "network", &sim.diagnostics);
  sim.truth = load_count_matrix(dir / "truth_counts.csv", sim.net);
  sim.speeds = load_count_matrix(dir / "truth_speeds.csv", sim.net);
  sim.link_flows = load_edge_matrix(sim.net, sim.truth.bins(), dir / "link_flows.csv");
  sim.boundary_inflow = load_count_matrix(dir / "boundary_inflow.csv", sim.net).values;
  sim.boundary_outflow = load_count_matrix(dir / "boundary_outflow.csv", sim.net).values;
  std::vector<double> weights(sim.net.edges().size(), 0.0);
  const auto path = dir / "turn_ratios.csv";
  const auto rows = csv::read(path);
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.cells.size() != 3) throw ParseError(path.string() + ":" + std::to_string(row.line) + ": expected 3 columns");
    const auto from = sim.net.index_of(row.cells[0]);
    const auto to = sim.net.index_of(row.cells[1]);
    bool found = false;
    for (std::size_t e = 0; e < sim.net.edges().size() && from && to; ++e) {
      if (sim.net.edges()[e].from == *from && sim.net.edges()[e].to == *to) {
        weights[e] = csv::to_double(row.cells[2], path, row.line, "beta");
        found = true;
      }
    }
    if (!found) throw DataError(path.string() + ":" + std::to_string(row.line) + ": not a network edge");
  }
  sim.turns = turn_ratios_from_weights(sim.net, weights);
  const nlohmann::json j = read_json(dir / "simulation.json");
  try {
    sim.group = j.at("group").get<std::vector<int>>();
    sim.fd.wave_speed = j.at("fd").at("wave_speed").get<double>();
    sim.fd.jam_density = j.at("fd").at("jam_density").get<double>();
    sim.fd.crit_ratio = j.at("fd").at("crit_ratio").get<double>();
    sim.calibration_cameras = resolve_cameras(sim.net, j.at("calibration_cameras").get<std::vector<std::string>>(), "calibration");
    sim.validation_cameras = resolve_cameras(sim.net, j.at("validation_cameras").get<std::vector<std::string>>(), "validation");
  } catch (const nlohmann::json::exception& e) {
    throw ParseError((dir / "simulation.json").string() + ": " + e.what());
  }
  return sim;
}

void save_sample(const SampleStage& s, const SimulationStage& sim, const ExperimentConfig& config,
                 const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_count_matrix(s.probe_counts, sim.net, dir / "probe_counts.csv", seed_comment(config, "probe counts"));
  save_count_matrix(s.probe_speeds, sim.net, dir / "probe_speeds.csv", seed_comment(config, "probe speeds"));
  save_edge_matrix(s.probe_link_flows, sim.net, sim.truth, dir / "probe_link_flows.csv",
                   seed_comment(config, "probe link flows"));
  std::ostringstream bn;
  bn << "# " << seed_comment(config, "boundary net flow") << "\nbin_start,n_b\n";
  for (int t = 0; t < s.boundary_net.size(); ++t) {
    bn << format_iso8601(sim.truth.time_at(t)) << ',' << csv::format(s.boundary_net[t]) << '\n';
  }
  csv::write_atomic(dir / "boundary_net.csv", bn.str());
  save_camera_observations(s.calibration_obs, sim.net, sim.truth.start, sim.truth.bin_seconds,
                           dir / "cameras_calibration.csv");
  save_camera_observations(s.validation_obs, sim.net, sim.truth.start, sim.truth.bin_seconds,
                           dir / "cameras_validation.csv");
}

SampleStage load_sample(const SimulationStage& sim, const std::filesystem::path& dir) {
  SampleStage s;
  s.probe_counts = load_count_matrix(dir / "probe_counts.csv", sim.net);
  s.probe_speeds = load_count_matrix(dir / "probe_speeds.csv", sim.net);
  s.probe_link_flows = load_edge_matrix(sim.net, sim.truth.bins(), dir / "probe_link_flows.csv");
  const auto path = dir / "boundary_net.csv";
  const auto rows = csv::read(path);
  s.boundary_net = Eigen::VectorXd::Zero(sim.truth.bins());
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.cells.size() != 2) throw ParseError(path.string() + ":" + std::to_string(row.line) + ": expected 2 columns");
    const int t = static_cast<int>((parse_iso8601(row.cells[0]) - sim.truth.start) /
                                   static_cast<EpochSeconds>(sim.truth.bin_seconds));
    if (t < 0 || t >= sim.truth.bins()) throw DataError(path.string() + ":" + std::to_string(row.line) + ": bin outside the horizon");
    s.boundary_net[t] = csv::to_double(row.cells[1], path, row.line, "n_b");
  }
  s.calibration_obs = load_camera_observations(dir / "cameras_calibration.csv", sim.net, sim.truth.start,
                                               sim.truth.bin_seconds);
  s.validation_obs = load_camera_observations(dir / "cameras_validation.csv", sim.net, sim.truth.start,
                                              sim.truth.bin_seconds);
  return s;
}

void save_calibration_field(const CalibrationStage& cal, const RoadNetwork& net, const std::filesystem::path& path,
                            std::string_view comment) {
  std::ostringstream out;
  if (!comment.empty()) out << "# " << comment << '\n';
  out << "bin_start,segment_id,alpha_mean,alpha_var,confidence\n";
  for (int t = 0; t < cal.alpha_mean.bins(); ++t) {
    if (std::isnan(cal.alpha_mean.values(0, t))) continue;
    const std::string when = format_iso8601(cal.alpha_mean.time_at(t));
    for (int i = 0; i < net.size(); ++i) {
      out << when << ',' << net.external_id(i) << ',' << csv::format(cal.alpha_mean.values(i, t)) << ','
          << csv::format(cal.alpha_var.values(i, t)) << ',' << csv::format(cal.confidence.values(i, t)) << '\n';
    }
  }
  csv::write_atomic(path, out.str());
}

void save_calibration(const CalibrationStage& cal, const SimulationStage& sim, const ExperimentConfig& config,
                      const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto& net = sim.net;
  save_count_matrix(cal.q_hat, net, dir / "predictor_counts.csv", seed_comment(config, "predictor counts"));
  save_count_matrix(cal.sigma, net, dir / "predictor_sigma.csv", seed_comment(config, "predictor sigma"));
  save_count_matrix(cal.calibrated, net, dir / "calibrated_counts.csv", seed_comment(config, "calibrated counts"));
  save_count_matrix(cal.lower, net, dir / "interval_lower.csv", seed_comment(config, "interval lower"));
  save_count_matrix(cal.upper, net, dir / "interval_upper.csv", seed_comment(config, "interval upper"));
  save_count_matrix(cal.beta_width, net, dir / "beta_width.csv", seed_comment(config, "log-calibration width"));
  save_calibration_field(cal, net, dir / "calibration_field.csv", seed_comment(config, "calibration field"));
  nlohmann::json j;
  j["seed"] = config.seed;
  j["log_alpha0"] = cal.log_alpha0;
  j["analysis_steps"] = cal.analysis_steps;
  j["unreachable_segments"] = external_ids(net, cal.unreachable);
  j["unreachable_max_change"] = cal.unreachable_max_change;
  j["diagnostics"] = cal.diagnostics.counters();
  csv::write_atomic(dir / "calibration.json", j.dump(2) + "\n");
}

CalibrationStage load_calibration(const SimulationStage& sim, const std::filesystem::path& dir) {
  CalibrationStage cal;
  cal.q_hat = load_count_matrix(dir / "predictor_counts.csv", sim.net);
  cal.sigma = load_count_matrix(dir / "predictor_sigma.csv", sim.net);
  cal.calibrated = load_count_matrix(dir / "calibrated_counts.csv", sim.net);
  cal.lower = load_count_matrix(dir / "interval_lower.csv", sim.net);
  cal.upper = load_count_matrix(dir / "interval_upper.csv", sim.net);
  cal.beta_width = load_count_matrix(dir / "beta_width.csv", sim.net);
  const nlohmann::json j = read_json(dir / "calibration.json");
  try {
    cal.log_alpha0 = j.at("log_alpha0").get<double>();
    cal.analysis_steps = j.at("analysis_steps").get<int>();
    cal.unreachable_max_change = j.at("unreachable_max_change").get<double>();
    for (const auto& id : j.at("unreachable_segments").get<std::vector<std::string>>()) {
      const auto seg = sim.net.index_of(id);
      if (!seg) throw DataError("unknown segment '" + id + "' in calibration.json");
      cal.unreachable.push_back(*seg);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError((dir / "calibration.json").string() + ": " + e.what());
  }
  return cal;
}

}  // namespace trafficfuse
