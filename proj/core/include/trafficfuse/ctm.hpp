#pragma once

#include <Eigen/Dense>
#include <vector>

#include "trafficfuse/diagnostics.hpp"
#include "trafficfuse/network.hpp"

namespace trafficfuse {

// Fundamental-diagram conventions
// -------------------------------
// Densities here are segment-aggregate pseudo-densities: density times the
// bin length, so that rho * v (m/s) is a vehicle count per bin and compares
// directly against Q_max = C * dt. Segment counts are bin volumes and map to
// pseudo-density as rho = q / v_free. The jam pseudo-density of a segment is
// jam_density (veh/m per lane) * lanes * dt.

struct FdParams {
  double wave_speed = 3.0;     // v_w, m/s
  double jam_density = 0.15;   // veh/m per lane
  double crit_ratio = 0.7;     // v_crit / v_free, shared by all segments

  double crit_speed(const Segment& seg) const { return crit_ratio * seg.free_flow_speed; }
};

/// v_w = 0.25 * min v_free; jam density large enough that the supply at zero
/// density reaches Q_max on every segment; v_crit = 0.7 v_free.
FdParams default_fd_params(const RoadNetwork& net, double bin_seconds);

/// Throws ParameterError unless 0 < v_w < v_free for all segments,
/// jam_density > 0 and crit_ratio in (0, 1).
void validate_fd(const FdParams& fd, const RoadNetwork& net);

double jam_pseudo_density(const Segment& seg, const FdParams& fd, double bin_seconds);
inline double pseudo_density_from_count(double q, const Segment& seg) {
  return q / seg.free_flow_speed;
}

/// clamp(v / v_free, 0, 1). Out-of-range inputs bump "speed_clamped".
double speed_ratio(double v, double v_free, Diagnostics* diag = nullptr);

/// Speed-to-density closure: free branch for b >= v_crit/v_free, jam branch
/// below it.
double density_from_speed(double b, const Segment& seg, const FdParams& fd, double bin_seconds);

/// Branch-wise inverse of density_from_speed. Densities in the gap between
/// the two branch images map to the threshold ratio; where the images
/// overlap the free branch wins.
double speed_ratio_from_density(double rho, const Segment& seg, const FdParams& fd,
                                double bin_seconds);

/// Size of the density jump at b = v_crit/v_free (congested minus free value).
double fd_discontinuity(const Segment& seg, const FdParams& fd, double bin_seconds);

double demand(double rho, const Segment& seg, const FdParams& fd, double bin_seconds);
double supply(double rho, const Segment& seg, const FdParams& fd, double bin_seconds);
double link_flow(double demand_i, double supply_j, double beta_ij);

/// Split ratios supported on network edges.
struct TurnRatios {
  SparseMatrix beta;
};

/// Uniform split over each segment's downstream set.
TurnRatios uniform_turn_ratios(const RoadNetwork& net);
/// Builds ratios from per-edge weights (normalised per row). Rows without
/// weight fall back to uniform.
TurnRatios turn_ratios_from_weights(const RoadNetwork& net, const std::vector<double>& edge_weights);
/// Throws ValidationError if support leaves the edge set, entries are
/// negative, or a row with downstream neighbours does not sum to 1.
void validate_turn_ratios(const TurnRatios& tr, const RoadNetwork& net);

struct TrafficState {
  Eigen::VectorXd counts;
  Eigen::VectorXd speeds;
  int time_index = 0;
};

/// Builds a state, clamping speeds into [0, v_free] ("speed_clamped").
TrafficState make_state(Eigen::VectorXd counts, Eigen::VectorXd speeds, const RoadNetwork& net,
                        int time_index = 0, Diagnostics* diag = nullptr);

struct StepFlows {
  std::vector<double> edge_flow;     // parallel to net.edges()
  Eigen::VectorXd boundary_outflow;  // after clipping
};

/// One CTM update. Outflows of a segment never exceed its content;
/// boundary outflow beyond what remains is clipped ("boundary_outflow_clipped").
TrafficState ctm_step(const TrafficState& state, const RoadNetwork& net, const FdParams& fd,
                      const TurnRatios& tr, const Eigen::VectorXd& boundary_inflow,
                      const Eigen::VectorXd& boundary_outflow, double bin_seconds,
                      Diagnostics* diag = nullptr, StepFlows* flows = nullptr);

struct SimulationResult {
  CountMatrix counts;
  CountMatrix speeds;
  /// Edge flows per bin, rows parallel to net.edges().
  Eigen::MatrixXd link_flows;
  Eigen::MatrixXd boundary_inflow;
  Eigen::MatrixXd boundary_outflow;
  Diagnostics diagnostics;
};

struct SimulationOptions {
  double bin_seconds = 900.0;
  EpochSeconds start = 0;
  /// Initial counts; zero when empty.
  Eigen::VectorXd initial_counts;
  /// Optional per-sink discharge cap (veh/bin), indexed by segment; when
  /// empty, sinks discharge their full demand.
  Eigen::VectorXd exit_capacity;
};

/// Rolls ctm_step over `horizon` bins. `inflow` is N x horizon (vehicles
/// per bin entering at boundary segments). Sinks (no downstream) discharge
/// their demand. Column t holds the state after step t.
SimulationResult simulate(const RoadNetwork& net, const FdParams& fd, const TurnRatios& tr,
                          const Eigen::MatrixXd& inflow, int horizon,
                          const SimulationOptions& options = {});

/// Reads a boundary demand CSV (count-matrix schema restricted to boundary
/// rows) into an N x T inflow matrix.
Eigen::MatrixXd load_demand_profile(const std::filesystem::path& path, const RoadNetwork& net,
                                    double* bin_seconds = nullptr, EpochSeconds* start = nullptr);

}  // namespace trafficfuse
