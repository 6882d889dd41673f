#include "trafficfuse/ctm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "trafficfuse/error.hpp"

namespace trafficfuse {

FdParams default_fd_params(const RoadNetwork& net, double bin_seconds) {
  FdParams fd;
  double vmin = std::numeric_limits<double>::infinity();
  for (const auto& s : net.segments()) vmin = std::min(vmin, s.free_flow_speed);
  if (!std::isfinite(vmin)) vmin = 10.0;
  fd.wave_speed = 0.25 * vmin;
  // v_w * jam_density * lanes * dt >= C * dt  <=>  jam_density >= C / (v_w * lanes)
  double k = 0.15;
  for (const auto& s : net.segments()) {
    k = std::max(k, 1.05 * s.capacity_veh_per_hr / 3600.0 / (fd.wave_speed * s.lanes));
  }
  fd.jam_density = k;
  fd.crit_ratio = 0.7;
  (void)bin_seconds;
  return fd;
}

void validate_fd(const FdParams& fd, const RoadNetwork& net) {
  if (!(fd.wave_speed > 0.0)) throw ParameterError("wave speed must be positive");
  if (!(fd.jam_density > 0.0)) throw ParameterError("jam density must be positive");
  if (!(fd.crit_ratio > 0.0 && fd.crit_ratio < 1.0)) {
    throw ParameterError("critical speed must lie strictly between 0 and v_free");
  }
  for (const auto& s : net.segments()) {
    if (!(fd.wave_speed < s.free_flow_speed)) {
      throw ParameterError("wave speed must be below v_free on segment '" +
                           net.external_id(s.id) + "'");
    }
  }
}

double jam_pseudo_density(const Segment& seg, const FdParams& fd, double bin_seconds) {
  return fd.jam_density * seg.lanes * bin_seconds;
}

double speed_ratio(double v, double v_free, Diagnostics* diag) {
  if (!(v_free > 0.0)) throw ParameterError("v_free must be positive");
  const double b = v / v_free;
  if (b > 1.0 || b < 0.0) {
    if (diag) diag->count("speed_clamped");
    return std::clamp(b, 0.0, 1.0);
  }
  return b;
}

double density_from_speed(double b, const Segment& seg, const FdParams& fd, double bin_seconds) {
  const double vf = seg.free_flow_speed;
  if (b >= fd.crit_ratio) {
    const double qmax = max_storage(seg, bin_seconds);
    return qmax / vf * (1.0 - b) * vf / (vf - fd.wave_speed);
  }
  return jam_pseudo_density(seg, fd, bin_seconds) * (1.0 - b);
}

double speed_ratio_from_density(double rho, const Segment& seg, const FdParams& fd,
                                double bin_seconds) {
  const double vf = seg.free_flow_speed;
  const double qmax = max_storage(seg, bin_seconds);
  const double b_free = 1.0 - rho * (vf - fd.wave_speed) / qmax;
  if (b_free >= fd.crit_ratio) return std::min(b_free, 1.0);
  const double b_jam = 1.0 - rho / jam_pseudo_density(seg, fd, bin_seconds);
  if (b_jam < fd.crit_ratio) return std::max(b_jam, 0.0);
  return fd.crit_ratio;
}

double fd_discontinuity(const Segment& seg, const FdParams& fd, double bin_seconds) {
  const double b = fd.crit_ratio;
  const double vf = seg.free_flow_speed;
  const double free = max_storage(seg, bin_seconds) / vf * (1.0 - b) * vf / (vf - fd.wave_speed);
  const double jam = jam_pseudo_density(seg, fd, bin_seconds) * (1.0 - b);
  return jam - free;
}

double demand(double rho, const Segment& seg, const FdParams& /*fd*/, double bin_seconds) {
  return std::max(0.0, std::min(rho * seg.free_flow_speed, max_storage(seg, bin_seconds)));
}

double supply(double rho, const Segment& seg, const FdParams& fd, double bin_seconds) {
  const double s = fd.wave_speed * (jam_pseudo_density(seg, fd, bin_seconds) - rho);
  return std::max(0.0, std::min(s, max_storage(seg, bin_seconds)));
}

double link_flow(double demand_i, double supply_j, double beta_ij) {
  return std::min(demand_i * beta_ij, supply_j * beta_ij);
}

TurnRatios uniform_turn_ratios(const RoadNetwork& net) {
  return turn_ratios_from_weights(net, std::vector<double>(net.edges().size(), 1.0));
}

TurnRatios turn_ratios_from_weights(const RoadNetwork& net, const std::vector<double>& edge_weights) {
  if (edge_weights.size() != net.edges().size()) {
    throw DataError("edge weight count does not match edge count");
  }
  std::vector<double> row_sum(static_cast<std::size_t>(net.size()), 0.0);
  for (std::size_t e = 0; e < net.edges().size(); ++e) {
    if (edge_weights[e] < 0.0) throw DataError("negative turn weight");
    row_sum[static_cast<std::size_t>(net.edges()[e].from)] += edge_weights[e];
  }
  std::vector<Eigen::Triplet<double>> trip;
  for (std::size_t e = 0; e < net.edges().size(); ++e) {
    const auto& edge = net.edges()[e];
    const double total = row_sum[static_cast<std::size_t>(edge.from)];
    const double w = total > 0.0 ? edge_weights[e] / total
                                 : 1.0 / static_cast<double>(net.downstream(edge.from).size());
    trip.emplace_back(edge.from, edge.to, w);
  }
  TurnRatios tr;
  tr.beta.resize(net.size(), net.size());
  tr.beta.setFromTriplets(trip.begin(), trip.end());
  tr.beta.makeCompressed();
  return tr;
}

void validate_turn_ratios(const TurnRatios& tr, const RoadNetwork& net) {
  if (tr.beta.rows() != net.size() || tr.beta.cols() != net.size()) {
    throw ValidationError("turn ratio matrix shape does not match network");
  }
  for (int i = 0; i < net.size(); ++i) {
    double sum = 0.0;
    for (SparseMatrix::InnerIterator it(tr.beta, i); it; ++it) {
      if (it.value() < 0.0) throw ValidationError("negative turn ratio");
      if (it.value() != 0.0 && !net.has_edge(i, static_cast<int>(it.col()))) {
        throw ValidationError("turn ratio outside edge set");
      }
      sum += it.value();
    }
    if (!net.downstream(i).empty() && std::abs(sum - 1.0) > 1e-9) {
      throw ValidationError("turn ratios of segment '" + net.external_id(i) + "' sum to " +
                            csv::format(sum));
    }
  }
}

TrafficState make_state(Eigen::VectorXd counts, Eigen::VectorXd speeds, const RoadNetwork& net,
                        int time_index, Diagnostics* diag) {
  if (counts.size() != net.size() || speeds.size() != net.size()) {
    throw DataError("state vectors do not match network size");
  }
  for (int i = 0; i < net.size(); ++i) {
    if (counts[i] < 0.0) throw DataError("negative count in traffic state");
    const double vf = net.segment(i).free_flow_speed;
    if (speeds[i] < 0.0 || speeds[i] > vf) {
      if (diag) diag->count("speed_clamped");
      speeds[i] = std::clamp(speeds[i], 0.0, vf);
    }
  }
  return TrafficState{std::move(counts), std::move(speeds), time_index};
}

TrafficState ctm_step(const TrafficState& state, const RoadNetwork& net, const FdParams& fd,
                      const TurnRatios& tr, const Eigen::VectorXd& boundary_inflow,
                      const Eigen::VectorXd& boundary_outflow, double bin_seconds,
                      Diagnostics* diag, StepFlows* flows) {
  const int n = net.size();
  if (state.counts.size() != n || boundary_inflow.size() != n || boundary_outflow.size() != n) {
    throw DataError("ctm_step: vector sizes do not match network");
  }
  Eigen::VectorXd dem(n), sup(n);
  for (int i = 0; i < n; ++i) {
    const auto& seg = net.segment(i);
    const double rho = pseudo_density_from_count(state.counts[i], seg);
    dem[i] = demand(rho, seg, fd, bin_seconds);
    sup[i] = supply(rho, seg, fd, bin_seconds);
  }

  const auto& edges = net.edges();
  std::vector<double> f(edges.size());
  Eigen::VectorXd out = Eigen::VectorXd::Zero(n);
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const double b = tr.beta.coeff(edges[e].from, edges[e].to);
    f[e] = link_flow(dem[edges[e].from], sup[edges[e].to], b);
    out[edges[e].from] += f[e];
  }
  // No segment emits more than it holds.
  for (std::size_t e = 0; e < edges.size(); ++e) {
    const int i = edges[e].from;
    if (out[i] > state.counts[i] && out[i] > 0.0) f[e] *= state.counts[i] / out[i];
  }
  out.setZero();
  Eigen::VectorXd in = Eigen::VectorXd::Zero(n);
  for (std::size_t e = 0; e < edges.size(); ++e) {
    out[edges[e].from] += f[e];
    in[edges[e].to] += f[e];
  }

  Eigen::VectorXd exits = boundary_outflow;
  for (int i = 0; i < n; ++i) {
    if (boundary_inflow[i] < 0.0 || exits[i] < 0.0) throw DataError("negative boundary flow");
    const double room = std::max(0.0, state.counts[i] - out[i]);
    if (exits[i] > room) {
      if (diag && exits[i] - room > 1e-12 * std::max(1.0, exits[i])) {
        diag->count("boundary_outflow_clipped");
      }
      exits[i] = room;
    }
  }

  TrafficState next;
  next.time_index = state.time_index + 1;
  next.counts.resize(n);
  next.speeds.resize(n);
  for (int i = 0; i < n; ++i) {
    const double q = state.counts[i] + in[i] - out[i] + boundary_inflow[i] - exits[i];
    next.counts[i] = std::max(0.0, q);
    const auto& seg = net.segment(i);
    const double b = speed_ratio_from_density(pseudo_density_from_count(next.counts[i], seg), seg,
                                              fd, bin_seconds);
    next.speeds[i] = b * seg.free_flow_speed;
  }
  if (flows) {
    flows->edge_flow = std::move(f);
    flows->boundary_outflow = std::move(exits);
  }
  return next;
}

SimulationResult simulate(const RoadNetwork& net, const FdParams& fd, const TurnRatios& tr,
                          const Eigen::MatrixXd& inflow, int horizon,
                          const SimulationOptions& options) {
  if (horizon < 1) throw ParameterError("horizon must be >= 1");
  const int n = net.size();
  if (inflow.rows() != n || inflow.cols() < horizon) {
    throw DataError("inflow matrix must be N x horizon");
  }
  validate_fd(fd, net);
  const double dt = options.bin_seconds;
  SimulationResult res;
  for (const auto& s : net.segments()) {
    if (s.free_flow_speed * dt > s.length_m) res.diagnostics.count("cfl_exceeded");
    const double jump = fd_discontinuity(s, fd, dt);
    if (jump != 0.0) res.diagnostics.count("fd_discontinuity");
  }
  const auto bset = boundary_segments(net);
  std::vector<bool> is_boundary(static_cast<std::size_t>(n), false);
  for (int b : bset) is_boundary[static_cast<std::size_t>(b)] = true;
  for (int i = 0; i < n; ++i) {
    if (!is_boundary[static_cast<std::size_t>(i)] && (inflow.row(i).array() != 0.0).any()) {
      throw DataError("inflow on non-boundary segment '" + net.external_id(i) + "'");
    }
  }

  TrafficState state;
  state.counts = options.initial_counts.size() == n ? options.initial_counts
                                                    : Eigen::VectorXd::Zero(n);
  state.speeds.resize(n);
  for (int i = 0; i < n; ++i) state.speeds[i] = net.segment(i).free_flow_speed;

  res.counts.values.resize(n, horizon);
  res.counts.bin_seconds = dt;
  res.counts.start = options.start;
  res.speeds = res.counts;
  res.link_flows.resize(static_cast<Eigen::Index>(net.edges().size()), horizon);
  res.boundary_inflow = inflow.leftCols(horizon);
  res.boundary_outflow.resize(n, horizon);

  Eigen::VectorXd exits(n);
  StepFlows flows;
  for (int t = 0; t < horizon; ++t) {
    exits.setZero();
    for (int i = 0; i < n; ++i) {
      if (!net.downstream(i).empty()) continue;
      const auto& seg = net.segment(i);
      double d = demand(pseudo_density_from_count(state.counts[i], seg), seg, fd, dt);
      if (options.exit_capacity.size() == n) d = std::min(d, options.exit_capacity[i]);
      exits[i] = d;
    }
    state = ctm_step(state, net, fd, tr, inflow.col(t), exits, dt, &res.diagnostics, &flows);
    res.counts.values.col(t) = state.counts;
    res.speeds.values.col(t) = state.speeds;
    for (std::size_t e = 0; e < flows.edge_flow.size(); ++e) {
      res.link_flows(static_cast<Eigen::Index>(e), t) = flows.edge_flow[e];
    }
    res.boundary_outflow.col(t) = flows.boundary_outflow;
  }
  return res;
}

Eigen::MatrixXd load_demand_profile(const std::filesystem::path& path, const RoadNetwork& net,
                                    double* bin_seconds, EpochSeconds* start) {
  auto cm = load_count_matrix(path, net);
  const auto bset = boundary_segments(net);
  std::vector<bool> is_boundary(static_cast<std::size_t>(net.size()), false);
  for (int b : bset) is_boundary[static_cast<std::size_t>(b)] = true;
  for (int i = 0; i < net.size(); ++i) {
    for (int t = 0; t < cm.bins(); ++t) {
      double& v = cm.values(i, t);
      if (std::isnan(v)) {
        v = 0.0;
      } else if (v != 0.0 && !is_boundary[static_cast<std::size_t>(i)]) {
        throw DataError(path.string() + ": demand on non-boundary segment '" +
                        net.external_id(i) + "'");
      }
    }
  }
  if (bin_seconds) *bin_seconds = cm.bin_seconds;
  if (start) *start = cm.start;
  return cm.values;
}

}  // namespace trafficfuse
