#include "trafficfuse/propagation.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "trafficfuse/csv.hpp"
#include "trafficfuse/error.hpp"

namespace trafficfuse {

LinkFlowStats link_flow_stats(const RoadNetwork& net, std::span<const LinkTransition> transitions) {
  const int n = net.size();
  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(transitions.size());
  for (std::size_t k = 0; k < transitions.size(); ++k) {
    const auto& tr = transitions[k];
    if (tr.from < 0 || tr.from >= n || tr.to < 0 || tr.to >= n || !net.has_edge(tr.from, tr.to)) {
      throw DataError("transition record " + std::to_string(k) + ": (" + std::to_string(tr.from) + ", " +
                      std::to_string(tr.to) + ") is not an edge");
    }
    if (!(tr.count >= 0)) throw DataError("transition record " + std::to_string(k) + ": negative count");
    trip.emplace_back(tr.from, tr.to, tr.count);
  }
  LinkFlowStats s;
  s.flows.resize(n, n);
  s.flows.setFromTriplets(trip.begin(), trip.end());
  s.flows.makeCompressed();
  return s;
}

void PropagationConfig::validate() const {
  if (!(gamma_pd > 0 && gamma_pd < 1)) throw ParameterError("gamma_pd must lie in (0, 1)");
  if (!(smoothing >= 0 && smoothing < 1)) throw ParameterError("smoothing s must lie in [0, 1)");
  if (!(confidence_decay >= 0 && confidence_decay <= 1)) throw ParameterError("confidence decay must lie in [0, 1]");
}

TransitionMatrix build_transition(const LinkFlowStats& stats, const RoadNetwork& net,
                                  const PropagationConfig& config) {
  config.validate();
  const int n = net.size();
  if (stats.flows.rows() != n || stats.flows.cols() != n) throw DataError("link flow statistics shape mismatch");
  using Sparse = TransitionMatrix::Sparse;
  std::vector<Eigen::Triplet<double>> trip;
  for (int i = 0; i < n; ++i) {
    double total = 0.0;
    for (Sparse::InnerIterator it(stats.flows, i); it; ++it) {
      if (it.value() < 0) throw DataError("negative link flow on " + std::to_string(i) + "->" + std::to_string(it.col()));
      total += it.value();
    }
    if (total <= 0) continue;
    for (Sparse::InnerIterator it(stats.flows, i); it; ++it) {
      if (it.value() > 0) trip.emplace_back(i, static_cast<int>(it.col()), it.value() / total);
    }
  }
  TransitionMatrix t;
  t.gamma_pd = config.gamma_pd;
  t.smoothing = config.smoothing;
  t.p.resize(n, n);
  t.p.setFromTriplets(trip.begin(), trip.end());
  t.p.makeCompressed();

  const Sparse pt = Sparse(t.p.transpose());
  t.w = (config.gamma_pd * 0.5) * (t.p + pt);
  t.w.makeCompressed();
  t.w2 = config.gamma_pd * Sparse(t.w * t.w);
  t.w3 = config.gamma_pd * Sparse(t.w2 * t.w);

  std::vector<Eigen::Triplet<double>> eff;
  for (int i = 0; i < n; ++i) {
    double off = 0.0;
    for (Sparse::InnerIterator it(t.w, i); it; ++it) {
      if (it.col() != i && it.value() != 0.0) {
        off += it.value();
        eff.emplace_back(i, static_cast<int>(it.col()), it.value());
      }
    }
    if (off > 1.0) {
      // Renormalise so the row stays stochastic with a zero diagonal.
      for (auto k = eff.size(); k-- > 0 && eff[k].row() == i;) {
        eff[k] = Eigen::Triplet<double>(i, eff[k].col(), eff[k].value() / off);
      }
    } else {
      eff.emplace_back(i, i, 1.0 - off);
    }
  }
  t.w_eff.resize(n, n);
  t.w_eff.setFromTriplets(eff.begin(), eff.end());
  t.w_eff.makeCompressed();
  return t;
}

Eigen::VectorXd localization_vector(const TransitionMatrix& t, SegmentId i) {
  const int n = t.size();
  if (i < 0 || i >= n) throw ParameterError("segment " + std::to_string(i) + " out of range");
  Eigen::VectorXd rho = Eigen::VectorXd::Zero(n);
  // The kernels are symmetric, so column i equals row i.
  using Sparse = TransitionMatrix::Sparse;
  for (Sparse::InnerIterator it(t.w, i); it; ++it) rho[it.col()] += it.value();
  for (Sparse::InnerIterator it(t.w2, i); it; ++it) rho[it.col()] += 0.5 * it.value();
  for (Sparse::InnerIterator it(t.w3, i); it; ++it) rho[it.col()] += 0.25 * it.value();
  rho = rho.cwiseMax(0.0).cwiseMin(1.0);
  rho[i] = 1.0;
  return rho;
}

Eigen::SparseMatrix<double> localization_matrix(const TransitionMatrix& t, std::span<const SegmentId> cameras) {
  const int n = t.size();
  std::vector<Eigen::Triplet<double>> trip;
  for (SegmentId c : cameras) {
    const Eigen::VectorXd rho = localization_vector(t, c);
    for (int j = 0; j < n; ++j) {
      if (rho[j] != 0.0) trip.emplace_back(j, c, rho[j]);
    }
  }
  Eigen::SparseMatrix<double> out(n, n);
  out.setFromTriplets(trip.begin(), trip.end(), [](double, double b) { return b; });
  out.makeCompressed();
  return out;
}

Eigen::MatrixXd diffuse(const Eigen::MatrixXd& field, const TransitionMatrix& t) {
  if (field.cols() != t.size()) throw DataError("field width does not match the transition matrix");
  const double s = t.smoothing;
  if (s == 0.0) return field;
  // (1 - s) b_i + s sum_j W_eff_ij b_j written as b_i + s sum_{j != i} W_eff_ij (b_j - b_i),
  // which holds because W_eff rows sum to 1 and keeps a constant field exact.
  Eigen::MatrixXd out = field;
  using Sparse = TransitionMatrix::Sparse;
  for (int i = 0; i < t.size(); ++i) {
    for (Sparse::InnerIterator it(t.w_eff, i); it; ++it) {
      const auto j = static_cast<Eigen::Index>(it.col());
      if (j == i) continue;
      out.col(i) += (s * it.value()) * (field.col(j) - field.col(i));
    }
  }
  return out;
}

Eigen::VectorXd update_confidence(const Eigen::VectorXd& prev, const Eigen::VectorXd& alpha_mean,
                                  const Eigen::VectorXd& alpha_var, std::span<const SegmentId> observed,
                                  double decay) {
  const auto n = prev.size();
  if (alpha_mean.size() != n || alpha_var.size() != n) throw DataError("confidence inputs have mismatched lengths");
  Eigen::VectorXd delta(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(alpha_mean[i] > 0)) throw ParameterError("alpha mean must be positive");
    const double cv = std::sqrt(std::max(0.0, alpha_var[i])) / alpha_mean[i];
    delta[i] = std::clamp(std::max(decay * prev[i], 1.0 / (1.0 + cv)), 0.0, 1.0);
  }
  for (SegmentId i : observed) {
    if (i < 0 || i >= n) throw ParameterError("observed segment out of range");
    delta[i] = 1.0;
  }
  return delta;
}

Eigen::VectorXd shrink_blend(const Eigen::VectorXd& alpha_mean, const Eigen::VectorXd& delta, double alpha_star) {
  if (alpha_mean.size() != delta.size()) throw DataError("shrink_blend inputs have mismatched lengths");
  return (delta.array() * alpha_mean.array() + (1.0 - delta.array()) * alpha_star).matrix();
}

double median(std::span<const double> values) {
  if (values.empty()) throw ParameterError("median of an empty set");
  std::vector<double> v(values.begin(), values.end());
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  if (v.size() % 2 == 1) return v[mid];
  const double hi = v[mid];
  const double lo = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

Eigen::MatrixXd calibrate_counts(const Eigen::MatrixXd& q_hat, const Eigen::VectorXd& alpha) {
  if (q_hat.rows() != alpha.size()) throw DataError("calibrate_counts inputs have mismatched lengths");
  if ((alpha.array() <= 0).any()) throw ParameterError("calibration factors must be positive");
  return (q_hat.array().colwise() * alpha.array()).cwiseMax(0.0).matrix();
}

void save_transition(const TransitionMatrix& t, const RoadNetwork& net, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "from_id,to_id,p\n";
  for (int i = 0; i < t.size(); ++i) {
    for (TransitionMatrix::Sparse::InnerIterator it(t.p, i); it; ++it) {
      out << net.external_id(i) << ',' << net.external_id(static_cast<SegmentId>(it.col())) << ','
          << csv::format(it.value()) << '\n';
    }
  }
  csv::write_atomic(path, out.str());
}

void save_localization(const Eigen::SparseMatrix<double>& rho, const RoadNetwork& net,
                       const std::filesystem::path& path) {
  std::ostringstream out;
  out << "camera_id,segment_id,rho\n";
  for (int c = 0; c < rho.outerSize(); ++c) {
    for (Eigen::SparseMatrix<double>::InnerIterator it(rho, c); it; ++it) {
      out << net.external_id(c) << ',' << net.external_id(static_cast<SegmentId>(it.row())) << ','
          << csv::format(it.value()) << '\n';
    }
  }
  csv::write_atomic(path, out.str());
}

}  // namespace trafficfuse
