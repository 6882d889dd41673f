#include "trafficfuse/twin.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "trafficfuse/csv.hpp"
#include "trafficfuse/error.hpp"

namespace trafficfuse {

namespace {

constexpr int kRows = 5;
constexpr int kCols = 10;
constexpr int kFreewayRow = 4;

int cell(int r, int c) { return r * kCols + c; }

double bump(double h, double centre, double width) {
  const double x = (h - centre) / width;
  return std::exp(-0.5 * x * x);
}

}  // namespace

double demand_shape(double hour, bool weekend) {
  double v = 0.0;
  if (weekend) {
    v = 0.1 + 0.6 * bump(hour, 13.0, 3.0);
  } else {
    v = 0.1 + 0.9 * bump(hour, 8.0, 1.0) + 0.8 * bump(hour, 17.5, 1.3) + 0.35 * bump(hour, 12.5, 2.5);
  }
  return std::clamp(v, 0.0, 1.0);
}

TwinScenario grid_twin(const GridTwinOptions& options, std::mt19937_64& rng) {
  if (options.bins < 1) throw ParameterError("twin horizon must be >= 1 bin");
  std::vector<Segment> segs;
  std::vector<std::string> ids;
  std::vector<int> group;
  for (int r = 0; r < kRows; ++r) {
    for (int c = 0; c < kCols; ++c) {
      Segment s;
      if (r == kFreewayRow) {
        s.length_m = 1000.0;
        s.free_flow_speed = 30.0;
        s.lanes = c == 6 ? 2 : 3;
        s.capacity_veh_per_hr = 2000.0 * s.lanes;
      } else if (c == 0) {
        s.length_m = 400.0;
        s.free_flow_speed = 13.9;
        s.lanes = r == 0 ? 4 : 3;
        s.capacity_veh_per_hr = 1800.0 * s.lanes;
      } else {
        s.length_m = 300.0;
        s.free_flow_speed = 13.9;
        s.lanes = 2;
        s.capacity_veh_per_hr = 1800.0 * s.lanes;
      }
      segs.push_back(s);
      ids.push_back("r" + std::to_string(r) + "c" + std::to_string(c));
      group.push_back(r == kFreewayRow ? 1 : 0);
    }
  }

  std::vector<Edge> edges;
  std::vector<double> weights;
  auto link = [&](int from, int to, double w) {
    edges.push_back({from, to});
    weights.push_back(w);
  };
  // Column-0 spine distributes the arterial source over the four rows.
  link(cell(0, 0), cell(0, 1), 0.4);
  link(cell(0, 0), cell(1, 0), 0.6);
  link(cell(1, 0), cell(1, 1), 0.5);
  link(cell(1, 0), cell(2, 0), 0.5);
  link(cell(2, 0), cell(2, 1), 0.5);
  link(cell(2, 0), cell(3, 0), 0.5);
  link(cell(3, 0), cell(3, 1), 1.0);
  for (int r = 0; r < kFreewayRow; ++r) {
    for (int c = 1; c + 1 < kCols; ++c) {
      link(cell(r, c), cell(r, c + 1), 0.6);
      if (r > 0) link(cell(r, c), cell(r - 1, c + 1), 0.2);
      if (r + 1 < kFreewayRow) link(cell(r, c), cell(r + 1, c + 1), 0.2);
    }
  }
  for (int c = 0; c + 1 < kCols; ++c) link(cell(kFreewayRow, c), cell(kFreewayRow, c + 1), 1.0);

  TwinScenario tw;
  tw.net = RoadNetwork(std::move(segs), std::move(edges), std::move(ids));
  tw.turns = turn_ratios_from_weights(tw.net, weights);
  tw.bin_seconds = options.bin_seconds;
  tw.start = options.start;
  tw.fd = default_fd_params(tw.net, options.bin_seconds);
  tw.group = std::move(group);
  tw.bottleneck = cell(kFreewayRow, 6);
  tw.calibration_cameras = {cell(0, 2), cell(1, 5), cell(2, 3), cell(3, 6), cell(4, 2)};
  tw.validation_cameras = {cell(0, 7), cell(1, 3), cell(2, 6), cell(4, 7)};

  const int n = tw.net.size();
  tw.inflow = Eigen::MatrixXd::Zero(n, options.bins);
  std::normal_distribution<double> z(0.0, 1.0);
  const int bins_per_day = static_cast<int>(std::lround(86400.0 / options.bin_seconds));
  double day_factor = 1.0;
  for (int t = 0; t < options.bins; ++t) {
    const EpochSeconds when = options.start + static_cast<EpochSeconds>(std::llround(t * options.bin_seconds));
    if (t % bins_per_day == 0) day_factor = std::exp(options.day_to_day_std * z(rng));
    const double hour = static_cast<double>(when % 86400) / 3600.0;
    const bool weekend = day_of_week(when) >= 5;
    const double shape = demand_shape(hour, weekend) * day_factor;
    const double art = options.arterial_peak * shape * std::exp(options.bin_noise_std * z(rng));
    const double fwy = options.freeway_peak * shape * std::exp(options.bin_noise_std * z(rng));
    tw.inflow(cell(0, 0), t) = std::max(0.0, art);
    tw.inflow(cell(kFreewayRow, 0), t) = std::max(0.0, fwy);
  }
  return tw;
}

TwinScenario chain_twin(int bins, double level, double bin_seconds) {
  if (bins < 1) throw ParameterError("twin horizon must be >= 1 bin");
  std::vector<Segment> segs(3);
  for (auto& s : segs) {
    s.length_m = 300.0;
    s.lanes = 1;
    s.capacity_veh_per_hr = 1800.0;
    s.free_flow_speed = 13.9;
  }
  TwinScenario tw;
  tw.net = RoadNetwork(std::move(segs), {{0, 1}, {1, 2}});
  tw.turns = uniform_turn_ratios(tw.net);
  tw.bin_seconds = bin_seconds;
  tw.fd = default_fd_params(tw.net, bin_seconds);
  tw.group.assign(3, 0);
  tw.inflow = Eigen::MatrixXd::Zero(3, bins);
  tw.inflow.row(0).setConstant(level);
  tw.calibration_cameras = {2};
  return tw;
}

}  // namespace trafficfuse
