#pragma once

// Linearised CTM state-space models and observability measures for a given
// camera placement: rank index, finite-horizon and Lyapunov Gramians, and
// per-segment scores.

#include <Eigen/Dense>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "trafficfuse/ctm.hpp"
#include "trafficfuse/diagnostics.hpp"
#include "trafficfuse/network.hpp"

namespace trafficfuse {

enum class LinearRegime { kFree, kCongested };

const char* regime_name(LinearRegime r);

struct LinearSystem {
  Eigen::MatrixXd a;  // N x N
  Eigen::MatrixXd b;  // N x p, unit columns on source segments
  Eigen::MatrixXd c;  // m x N camera selection rows
  LinearRegime regime = LinearRegime::kFree;
};

/// m x N matrix of unit rows e_s for the camera segments.
Eigen::MatrixXd selection_matrix(int segments, std::span<const SegmentId> cameras);

/// Jacobian of one CTM step at `nominal` counts.
/// Free: segment i sends phi_i = dD_i/dn_i of its count (1 below capacity,
/// 0 when capped), split by beta: A_ji = beta_ij phi_i, A_ii = 1 - phi_i.
/// Congested: inflow to j falls with its supply slope psi_j = v_w / v_free_j,
/// which upstream i retains in proportion to beta_ij normalised over the
/// upstream set of j: A_ij = w_ij psi_j, A_jj = 1 - psi_j.
/// Sinks (free) and sources (congested) dissipate.
LinearSystem linearize(const RoadNetwork& net, const FdParams& fd, const TurnRatios& tr,
                       const Eigen::VectorXd& nominal, LinearRegime regime, std::span<const SegmentId> cameras,
                       double bin_seconds);

struct RankResult {
  int rank = 0;
  double gamma = 0.0;  // rank / N
};

/// Rank of [C; CA; ...; CA^{N-1}] with tolerance max(N, mN) * s_max * eps.
/// Throws ParameterError above `max_segments`.
RankResult observability_rank(const LinearSystem& sys, int max_segments = 400);

/// Stacked O_T = [C; CA; ...; CA^{T-1}].
Eigen::MatrixXd observability_matrix(const LinearSystem& sys, int horizon);

/// sum_{t<T} (A^T)^t C^T C A^t, accumulated iteratively.
Eigen::MatrixXd gramian(const LinearSystem& sys, int horizon);

/// Power-iteration estimate of the spectral radius (geometric mean of the
/// late growth factors); 0 for nilpotent matrices.
double spectral_radius(const Eigen::MatrixXd& a, int iterations = 500);

/// Fixed point of W = A^T W A + C^T C. Throws StabilityError when the
/// estimated radius is >= 1, and Error if `max_iterations` is exhausted.
Eigen::MatrixXd lyapunov_gramian(const LinearSystem& sys, double tol = 1e-12, int max_iterations = 1000000);

/// sum_{t<T} Phi(t)^T C^T C Phi(t) with Phi(0) = I, Phi(t+1) = A_t Phi(t).
Eigen::MatrixXd time_varying_gramian(std::span<const Eigen::MatrixXd> a_sequence, const Eigen::MatrixXd& c,
                                     int horizon);

struct RegimeReport {
  std::string regime;
  int rank = -1;              // -1 when not computed
  double gamma_rank = 0.0;
  double spectral_radius = 0.0;
  Eigen::VectorXd gramian_diag;
};

struct ObservabilityReport {
  int horizon = 0;
  std::vector<RegimeReport> regimes;
  Eigen::VectorXd obs;   // max over regimes of the Gramian diagonal
  Eigen::VectorXd conf;  // obs / max obs
  Diagnostics diagnostics;
};

/// Combines per-regime Gramian diagonals. An all-zero result yields zero
/// confidence and a "no_observability" warning.
ObservabilityReport segment_scores(std::vector<RegimeReport> regimes, int horizon);

struct ObservabilityOptions {
  int horizon = 0;  // T; N when <= 0
  int rank_cap = 400;
};

/// Both regimes around `nominal`: rank index, radius and finite Gramian.
ObservabilityReport analyze_observability(const RoadNetwork& net, const FdParams& fd, const TurnRatios& tr,
                                          const Eigen::VectorXd& nominal, std::span<const SegmentId> cameras,
                                          double bin_seconds, const ObservabilityOptions& options = {});

/// JSON summary and per-segment CSV (segment_id, obs, conf, and per-regime
/// Gramian diagonals).
void save_observability(const ObservabilityReport& report, const RoadNetwork& net,
                        const std::filesystem::path& json_path, const std::filesystem::path& csv_path);

}  // namespace trafficfuse
