#include "trafficfuse/observability.hpp"

#include <Eigen/SVD>
#include <cmath>
#include <limits>
#include <sstream>

#include "json.hpp"
#include "trafficfuse/csv.hpp"
#include "trafficfuse/error.hpp"

namespace trafficfuse {

const char* regime_name(LinearRegime r) { return r == LinearRegime::kFree ? "free" : "congested"; }

Eigen::MatrixXd selection_matrix(int segments, std::span<const SegmentId> cameras) {
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(cameras.size()), segments);
  for (std::size_t k = 0; k < cameras.size(); ++k) {
    if (cameras[k] < 0 || cameras[k] >= segments) {
      throw ParameterError("camera segment " + std::to_string(cameras[k]) + " out of range");
    }
    c(static_cast<Eigen::Index>(k), cameras[k]) = 1.0;
  }
  return c;
}

LinearSystem linearize(const RoadNetwork& net, const FdParams& fd, const TurnRatios& tr,
                       const Eigen::VectorXd& nominal, LinearRegime regime, std::span<const SegmentId> cameras,
                       double bin_seconds) {
  validate_fd(fd, net);
  const int n = net.size();
  if (nominal.size() != n) throw DataError("nominal state length does not match the network");
  LinearSystem sys;
  sys.regime = regime;
  sys.a = Eigen::MatrixXd::Zero(n, n);
  if (regime == LinearRegime::kFree) {
    for (int i = 0; i < n; ++i) {
      const Segment& seg = net.segment(i);
      const double q_max = max_storage(seg, bin_seconds);
      const double phi = nominal[i] < q_max ? 1.0 : 0.0;
      sys.a(i, i) = 1.0 - phi;
      for (SparseMatrix::InnerIterator it(tr.beta, i); it; ++it) sys.a(it.col(), i) += it.value() * phi;
    }
  } else {
    for (int j = 0; j < n; ++j) {
      const double psi = std::min(1.0, fd.wave_speed / net.segment(j).free_flow_speed);
      sys.a(j, j) = 1.0 - psi;
      double total = 0.0;
      for (SegmentId i : net.upstream(j)) total += tr.beta.coeff(i, j);
      for (SegmentId i : net.upstream(j)) {
        const double w = total > 0 ? tr.beta.coeff(i, j) / total : 0.0;
        sys.a(i, j) += w * psi;
      }
    }
  }
  std::vector<SegmentId> sources;
  for (int i = 0; i < n; ++i) {
    if (net.upstream(i).empty()) sources.push_back(i);
  }
  sys.b = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(sources.size()));
  for (std::size_t k = 0; k < sources.size(); ++k) sys.b(sources[k], static_cast<Eigen::Index>(k)) = 1.0;
  sys.c = selection_matrix(n, cameras);
  return sys;
}

Eigen::MatrixXd observability_matrix(const LinearSystem& sys, int horizon) {
  if (horizon < 1) throw ParameterError("horizon must be >= 1");
  const auto m = sys.c.rows();
  const auto n = sys.a.rows();
  Eigen::MatrixXd o(m * horizon, n);
  Eigen::MatrixXd block = sys.c;
  for (int t = 0; t < horizon; ++t) {
    o.middleRows(t * m, m) = block;
    block = block * sys.a;
  }
  return o;
}

RankResult observability_rank(const LinearSystem& sys, int max_segments) {
  const auto n = sys.a.rows();
  if (n > max_segments) {
    throw ParameterError("observability rank is dense and capped at " + std::to_string(max_segments) +
                         " segments; use the Gramian scores for larger networks");
  }
  RankResult r;
  if (n == 0 || sys.c.rows() == 0) return r;
  const Eigen::MatrixXd o = observability_matrix(sys, static_cast<int>(n));
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(o);
  const auto& s = svd.singularValues();
  const double tol = static_cast<double>(std::max(o.rows(), o.cols())) * s[0] *
                     std::numeric_limits<double>::epsilon();
  for (Eigen::Index k = 0; k < s.size(); ++k) r.rank += s[k] > tol ? 1 : 0;
  r.gamma = static_cast<double>(r.rank) / static_cast<double>(n);
  return r;
}

Eigen::MatrixXd gramian(const LinearSystem& sys, int horizon) {
  if (horizon < 1) throw ParameterError("horizon must be >= 1");
  Eigen::MatrixXd term = sys.c.transpose() * sys.c;
  Eigen::MatrixXd w = term;
  for (int t = 1; t < horizon; ++t) {
    term = sys.a.transpose() * term * sys.a;
    w += term;
  }
  return 0.5 * (w + w.transpose());
}

double spectral_radius(const Eigen::MatrixXd& a, int iterations) {
  const auto n = a.rows();
  if (n == 0) return 0.0;
  Eigen::VectorXd x(n);
  for (Eigen::Index i = 0; i < n; ++i) x[i] = 1.0 + 0.01 * static_cast<double>(i % 7);
  x.normalize();
  const int burn = iterations / 2;
  double log_sum = 0.0;
  int counted = 0;
  for (int k = 0; k < iterations; ++k) {
    x = a * x;
    const double norm = x.norm();
    if (norm == 0.0) return 0.0;
    x /= norm;
    if (k >= burn) {
      log_sum += std::log(norm);
      ++counted;
    }
  }
  return std::exp(log_sum / counted);
}

Eigen::MatrixXd lyapunov_gramian(const LinearSystem& sys, double tol, int max_iterations) {
  const double radius = spectral_radius(sys.a);
  if (radius >= 1.0) {
    std::ostringstream msg;
    msg << "system is not Schur-stable: estimated spectral radius " << radius;
    throw StabilityError(msg.str(), radius);
  }
  const Eigen::MatrixXd q = sys.c.transpose() * sys.c;
  Eigen::MatrixXd w = q;
  for (int k = 0; k < max_iterations; ++k) {
    Eigen::MatrixXd next = sys.a.transpose() * w * sys.a + q;
    const double change = (next - w).cwiseAbs().maxCoeff();
    w = std::move(next);
    if (change < tol) return 0.5 * (w + w.transpose());
  }
  throw Error("Lyapunov iteration did not converge in " + std::to_string(max_iterations) + " iterations");
}

Eigen::MatrixXd time_varying_gramian(std::span<const Eigen::MatrixXd> a_sequence, const Eigen::MatrixXd& c,
                                     int horizon) {
  if (horizon < 1) throw ParameterError("horizon must be >= 1");
  if (static_cast<int>(a_sequence.size()) < horizon - 1) {
    throw ParameterError("A sequence is shorter than the horizon");
  }
  const auto n = c.cols();
  const Eigen::MatrixXd q = c.transpose() * c;
  Eigen::MatrixXd phi = Eigen::MatrixXd::Identity(n, n);
  Eigen::MatrixXd w = q;
  for (int t = 1; t < horizon; ++t) {
    phi = a_sequence[static_cast<std::size_t>(t - 1)] * phi;
    w += phi.transpose() * q * phi;
  }
  return 0.5 * (w + w.transpose());
}

ObservabilityReport segment_scores(std::vector<RegimeReport> regimes, int horizon) {
  if (regimes.empty()) throw ParameterError("segment_scores needs at least one regime Gramian");
  ObservabilityReport rep;
  rep.horizon = horizon;
  const auto n = regimes.front().gramian_diag.size();
  rep.obs = Eigen::VectorXd::Zero(n);
  for (const auto& r : regimes) {
    if (r.gramian_diag.size() != n) throw DataError("regime Gramians have different sizes");
    rep.obs = rep.obs.cwiseMax(r.gramian_diag.cwiseMax(0.0));
  }
  const double top = n > 0 ? rep.obs.maxCoeff() : 0.0;
  if (top > 0) {
    rep.conf = rep.obs / top;
  } else {
    rep.conf = Eigen::VectorXd::Zero(n);
    rep.diagnostics.warn("no_observability", "all Gramian diagonals are zero; no camera observes the network");
  }
  rep.regimes = std::move(regimes);
  return rep;
}

ObservabilityReport analyze_observability(const RoadNetwork& net, const FdParams& fd, const TurnRatios& tr,
                                          const Eigen::VectorXd& nominal, std::span<const SegmentId> cameras,
                                          double bin_seconds, const ObservabilityOptions& options) {
  const int horizon = options.horizon > 0 ? options.horizon : net.size();
  std::vector<RegimeReport> regimes;
  Diagnostics diag;
  for (LinearRegime r : {LinearRegime::kFree, LinearRegime::kCongested}) {
    const LinearSystem sys = linearize(net, fd, tr, nominal, r, cameras, bin_seconds);
    RegimeReport rep;
    rep.regime = regime_name(r);
    if (net.size() <= options.rank_cap) {
      const RankResult rank = observability_rank(sys, options.rank_cap);
      rep.rank = rank.rank;
      rep.gamma_rank = rank.gamma;
    } else {
      diag.warn("rank_skipped", "network exceeds the dense rank cap; only Gramian scores are reported");
    }
    rep.spectral_radius = spectral_radius(sys.a);
    rep.gramian_diag = gramian(sys, horizon).diagonal();
    regimes.push_back(std::move(rep));
  }
  ObservabilityReport out = segment_scores(std::move(regimes), horizon);
  out.diagnostics.merge(diag);
  return out;
}

void save_observability(const ObservabilityReport& report, const RoadNetwork& net,
                        const std::filesystem::path& json_path, const std::filesystem::path& csv_path) {
  nlohmann::json j;
  j["horizon"] = report.horizon;
  auto& regs = j["regimes"] = nlohmann::json::array();
  for (const auto& r : report.regimes) {
    nlohmann::json e;
    e["regime"] = r.regime;
    if (r.rank >= 0) {
      e["rank"] = r.rank;
      e["gamma_rank"] = r.gamma_rank;
    }
    e["spectral_radius"] = r.spectral_radius;
    regs.push_back(e);
  }
  auto& segs = j["segments"] = nlohmann::json::array();
  for (Eigen::Index i = 0; i < report.conf.size(); ++i) {
    segs.push_back({{"segment_id", net.external_id(static_cast<SegmentId>(i))},
                    {"obs", report.obs[i]},
                    {"conf", report.conf[i]}});
  }
  auto& warn = j["warnings"] = nlohmann::json::array();
  for (const auto& m : report.diagnostics.messages()) warn.push_back(m);
  csv::write_atomic(json_path, j.dump(2) + "\n");

  std::ostringstream out;
  out << "segment_id,obs,conf";
  for (const auto& r : report.regimes) out << ",gramian_" << r.regime;
  out << '\n';
  for (Eigen::Index i = 0; i < report.conf.size(); ++i) {
    out << net.external_id(static_cast<SegmentId>(i)) << ',' << csv::format(report.obs[i]) << ','
        << csv::format(report.conf[i]);
    for (const auto& r : report.regimes) out << ',' << csv::format(r.gramian_diag[i]);
    out << '\n';
  }
  csv::write_atomic(csv_path, out.str());
}

}  // namespace trafficfuse
