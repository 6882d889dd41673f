#pragma once

// Flow-weighted transition kernels used to localise camera updates, diffuse
// the calibration field, and blend it toward a network-wide prior.

#include <Eigen/Dense>
#include <Eigen/SparseCore>
#include <filesystem>
#include <span>
#include <vector>

#include "trafficfuse/network.hpp"

namespace trafficfuse {

/// Accumulated directed trajectory flows q_{i->j} on edges.
struct LinkFlowStats {
  Eigen::SparseMatrix<double, Eigen::RowMajor> flows;  // N x N
};

struct LinkTransition {
  SegmentId from = 0;
  SegmentId to = 0;
  double count = 0.0;
};

/// Sums transitions per edge. A pair that is not an edge, or a negative
/// count, raises DataError naming the record index.
LinkFlowStats link_flow_stats(const RoadNetwork& net, std::span<const LinkTransition> transitions);

struct PropagationConfig {
  double gamma_pd = 0.8;
  double smoothing = 0.1;  // s
  double confidence_decay = 0.999;

  void validate() const;
};

struct TransitionMatrix {
  using Sparse = Eigen::SparseMatrix<double, Eigen::RowMajor>;
  Sparse p;
  Sparse w;
  Sparse w2;
  Sparse w3;
  Sparse w_eff;
  double gamma_pd = 0.8;
  double smoothing = 0.1;

  int size() const { return static_cast<int>(p.rows()); }
};

/// P_ij = q_ij / sum_k q_ik (zero rows stay zero), W = g (P + P^T) / 2,
/// W2 = g W^2, W3 = g W2 W, and W_eff = off-diagonal W with the diagonal
/// topped up to make each row sum to 1 (identity row when isolated).
TransitionMatrix build_transition(const LinkFlowStats& stats, const RoadNetwork& net,
                                  const PropagationConfig& config = {});

/// rho = clip(W[:,i] + W2[:,i]/2 + W3[:,i]/4, 0, 1) with rho_i = 1.
Eigen::VectorXd localization_vector(const TransitionMatrix& t, SegmentId i);

/// Column i holds the localisation vector of a camera on segment i; columns
/// of segments not in `cameras` are empty.
Eigen::SparseMatrix<double> localization_matrix(const TransitionMatrix& t, std::span<const SegmentId> cameras);

/// Per member row: (1 - s) beta + s W_eff beta. `field` is M x N.
Eigen::MatrixXd diffuse(const Eigen::MatrixXd& field, const TransitionMatrix& t);

/// delta = max(decay * prev, 1 / (1 + sqrt(var) / mean)); 1 on `observed`.
Eigen::VectorXd update_confidence(const Eigen::VectorXd& prev, const Eigen::VectorXd& alpha_mean,
                                  const Eigen::VectorXd& alpha_var, std::span<const SegmentId> observed,
                                  double decay);

/// delta * alpha + (1 - delta) * alpha_star.
Eigen::VectorXd shrink_blend(const Eigen::VectorXd& alpha_mean, const Eigen::VectorXd& delta, double alpha_star);

/// Median of the entries.
double median(std::span<const double> values);

/// Elementwise alpha * q_hat, floored at 0. `q_hat` is N x K, `alpha` N.
Eigen::MatrixXd calibrate_counts(const Eigen::MatrixXd& q_hat, const Eigen::VectorXd& alpha);

/// Sparse triplet CSV: from_id,to_id,p.
void save_transition(const TransitionMatrix& t, const RoadNetwork& net, const std::filesystem::path& path);
/// CSV: camera_id,segment_id,rho for the nonzero entries.
void save_localization(const Eigen::SparseMatrix<double>& rho, const RoadNetwork& net,
                       const std::filesystem::path& path);

}  // namespace trafficfuse
