#pragma once

// Synthetic ground-truth scenarios: a 3-segment chain for oracle checks and
// a 50-segment 5 x 10 grid with an arterial mesh, a separate freeway
// corridor, daily-periodic demand and one bottleneck.

#include <Eigen/Dense>
#include <random>
#include <vector>

#include "trafficfuse/ctm.hpp"
#include "trafficfuse/network.hpp"

namespace trafficfuse {

struct TwinScenario {
  RoadNetwork net;
  TurnRatios turns;
  FdParams fd;
  double bin_seconds = 900.0;
  EpochSeconds start = 0;
  Eigen::MatrixXd inflow;           // N x T
  Eigen::VectorXd exit_capacity;    // N, empty for unlimited
  std::vector<int> group;           // penetration group per segment
  std::vector<SegmentId> calibration_cameras;
  std::vector<SegmentId> validation_cameras;
  SegmentId bottleneck = -1;
};

/// Relative demand level in [0, 1] at fractional hour `hour` of a weekday
/// or weekend day: morning and evening peaks on weekdays, one midday hump
/// on weekends, low at night.
double demand_shape(double hour, bool weekend);

struct GridTwinOptions {
  int bins = 1344;
  double bin_seconds = 900.0;
  EpochSeconds start = 1704067200;  // Monday 2024-01-01T00:00:00
  double arterial_peak = 700.0;     // veh/bin entering the arterial source
  double freeway_peak = 1150.0;     // veh/bin entering the freeway
  double day_to_day_std = 0.05;     // lognormal daily demand factor
  double bin_noise_std = 0.04;      // multiplicative per-bin noise
};

/// Segment (r, c) has index r * 10 + c and external id "r<r>c<c>". Rows 0-3
/// form an arterial mesh fed from (0,0) down a column-0 spine, with straight
/// and diagonal links toward column 9; row 4 is a freeway fed at (4,0) and
/// unconnected to the mesh, with a lane drop at (4,6).
TwinScenario grid_twin(const GridTwinOptions& options, std::mt19937_64& rng);

/// 0 -> 1 -> 2 with constant inflow `level` at segment 0.
TwinScenario chain_twin(int bins, double level, double bin_seconds = 900.0);

}  // namespace trafficfuse
