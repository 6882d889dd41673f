#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "fixtures.hpp"
#include "trafficfuse/error.hpp"
#include "trafficfuse/features.hpp"

using namespace trafficfuse;

TEST(Manifest, WidthOrderAndHash) {
  const auto& m = feature_manifest();
  ASSERT_EQ(m.size(), 22u);
  EXPECT_EQ(m[kQTraj], "q_traj");
  EXPECT_EQ(m[kBoundaryFlow], "q_bc");
  EXPECT_EQ(m[kLos], "los");
  EXPECT_EQ(m[kUpstreamGradient], "upstream_gradient");
  std::set<std::string_view> unique(m.begin(), m.end());
  EXPECT_EQ(unique.size(), m.size());
  EXPECT_EQ(feature_manifest_hash(), feature_manifest_hash());
}

TEST(Temporal, KnownValues) {
  const auto f = temporal_features(6, 0);
  EXPECT_NEAR(f[0], 1.0, 1e-15);
  EXPECT_NEAR(f[1], 0.0, 1e-15);
  EXPECT_EQ(f[2], 0.0);
  EXPECT_EQ(f[3], 1.0);
  EXPECT_EQ(f[4], 0.0);
  EXPECT_EQ(f[5], 0.0);
  EXPECT_EQ(f[6], 0.0);
  const auto s = temporal_features(8, 5);
  EXPECT_EQ(s[4], 1.0);
  EXPECT_EQ(s[5], 1.0);
  EXPECT_NEAR(s[2], std::sin(2 * std::numbers::pi * 5 / 7), 1e-15);
  EXPECT_THROW(temporal_features(24, 0), ParameterError);
  EXPECT_THROW(temporal_features(0, 7), ParameterError);
}

TEST(Temporal, IndicatorSets) {
  int rush = 0, night = 0;
  for (int h = 0; h < 24; ++h) {
    rush += is_rush_hour(h);
    night += is_night(h);
    EXPECT_FALSE(is_rush_hour(h) && is_night(h));
  }
  EXPECT_EQ(rush, 6);
  EXPECT_EQ(night, 8);
  EXPECT_TRUE(is_night(23));
  EXPECT_TRUE(is_night(5));
  EXPECT_FALSE(is_night(6));
  EXPECT_TRUE(is_weekend(6));
  EXPECT_FALSE(is_weekend(4));
}

TEST(Temporal, CyclicEncodingOnUnitCircle) {
  for (int h = 0; h < 24; ++h)
    for (int d = 0; d < 7; ++d) {
      const auto f = temporal_features(h, d);
      EXPECT_NEAR(f[0] * f[0] + f[1] * f[1], 1.0, 1e-14);
      EXPECT_NEAR(f[2] * f[2] + f[3] * f[3], 1.0, 1e-14);
    }
}

TEST(LevelOfService, BandEdges) {
  EXPECT_EQ(level_of_service(0.0), 0.0);
  EXPECT_EQ(level_of_service(0.35), 0.0);
  EXPECT_EQ(level_of_service(0.36), 0.2);
  EXPECT_EQ(level_of_service(0.55), 0.2);
  EXPECT_EQ(level_of_service(0.75), 0.4);
  EXPECT_EQ(level_of_service(0.9), 0.6);
  EXPECT_EQ(level_of_service(1.0), 0.8);
  EXPECT_EQ(level_of_service(1.3), 1.0);
  double prev = -1.0;
  for (int k = 0; k <= 150; ++k) {
    const double v = level_of_service(k / 100.0);
    EXPECT_GE(v, prev);
    prev = v;
  }
}

TEST(StateDependent, HandComputed) {
  const auto seg = tf_test::segment(1800.0, 10.0);
  FdParams fd;
  fd.wave_speed = 4.0;
  fd.jam_density = 100.0 / 900.0;
  // b = 0.8: rho = 15, D = 150, S = 340, Q_max = 450.
  const auto f = sd_features(360.0, 0.8, seg, fd, 900.0, 400.0);
  EXPECT_DOUBLE_EQ(f[0], 0.8);
  EXPECT_NEAR(f[1], 0.2, 1e-15);
  EXPECT_NEAR(f[2], 150.0 / 450.0, 1e-12);
  EXPECT_NEAR(f[3], 340.0 / 450.0, 1e-12);
  EXPECT_DOUBLE_EQ(f[4], 0.8);
  EXPECT_EQ(f[5], 0.6);
  EXPECT_EQ(f[6], 0.0);
  EXPECT_EQ(f[7], 1.0);
  EXPECT_DOUBLE_EQ(f[8], 0.9);
  const auto j = sd_features(10.0, 0.3, seg, fd, 900.0, 400.0);
  EXPECT_EQ(j[6], 1.0);
  EXPECT_EQ(j[7], 0.0);
  EXPECT_THROW(sd_features(1.0, 0.5, seg, fd, 900.0, 0.0), ParameterError);
}

TEST(Spatial, NeighbourMeans) {
  std::vector<Segment> segs(4, tf_test::segment());
  RoadNetwork net(segs, {{0, 1}, {0, 2}, {1, 3}, {2, 3}});
  Eigen::VectorXd b(4);
  b << 0.9, 0.5, 0.7, 0.2;
  const auto s0 = sp_features(0, net, b);
  EXPECT_DOUBLE_EQ(s0[0], 0.6);
  EXPECT_DOUBLE_EQ(s0[1], 0.3);
  EXPECT_DOUBLE_EQ(s0[2], 0.9);  // no upstream
  EXPECT_DOUBLE_EQ(s0[3], 0.0);
  const auto s3 = sp_features(3, net, b);
  EXPECT_DOUBLE_EQ(s3[0], 0.2);
  EXPECT_DOUBLE_EQ(s3[2], 0.6);
  EXPECT_DOUBLE_EQ(s3[3], 0.2 - 0.6);
}

TEST(BoundaryFlow, OnlyBoundarySegments) {
  const auto net = tf_test::chain(3);
  Eigen::VectorXd in(3), out(3);
  in << 90.0, 50.0, 0.0;
  out << 0.0, 50.0, 45.0;
  EXPECT_DOUBLE_EQ(boundary_flow_feature(net, in, out, 0, 900.0), 0.2);
  EXPECT_EQ(boundary_flow_feature(net, in, out, 1, 900.0), 0.0);
  EXPECT_DOUBLE_EQ(boundary_flow_feature(net, in, out, 2, 900.0), -0.1);
}

namespace {

struct Inputs {
  RoadNetwork net = tf_test::chain(3);
  CountMatrix counts;
  CountMatrix speeds;
  Inputs(int bins = 8) {
    counts.values.resize(3, bins);
    speeds.values.resize(3, bins);
    for (int t = 0; t < bins; ++t)
      for (int i = 0; i < 3; ++i) {
        counts.values(i, t) = 10.0 * (t + 1) + i;
        speeds.values(i, t) = 10.0 - 0.5 * i - 0.1 * t;
      }
    counts.start = speeds.start = parse_iso8601("2024-01-01T00:00:00Z");  // a Monday
  }
};

}  // namespace

TEST(Tensor, LayoutAndMissingRules) {
  Inputs in;
  in.counts.values(1, 2) = std::nan("");
  in.speeds.values(2, 3) = std::nan("");
  Diagnostics diag;
  const auto fd = default_fd_params(in.net, 900.0);
  const auto x = build_tensor(in.counts, in.speeds, in.net, fd, {}, &diag);
  EXPECT_EQ(x.segments(), 3);
  EXPECT_EQ(x.bins(), 8);
  EXPECT_EQ(x.data().size(), 3u * 8u * 22u);
  EXPECT_EQ(x.at(0, 4, kQTraj), 50.0);
  EXPECT_EQ(x.at(1, 2, kQTraj), 0.0);
  EXPECT_EQ(x.at(2, 3, kSpeedRatio), 1.0);
  EXPECT_EQ(diag.count_of("count_missing"), 1u);
  EXPECT_EQ(diag.count_of("speed_missing"), 1u);
  // Bin 4 is 01:00 on a Monday.
  const auto temp = temporal_features(1, 0);
  for (int k = 0; k < 7; ++k) EXPECT_DOUBLE_EQ(x.at(0, 4, kHourSin + k), temp[static_cast<std::size_t>(k)]);
  // Entries default to the source's count: q_bc = q / Q_max.
  EXPECT_DOUBLE_EQ(x.at(0, 0, kBoundaryFlow), 10.0 / 450.0);
  EXPECT_EQ(x.at(1, 0, kBoundaryFlow), 0.0);
  EXPECT_DOUBLE_EQ(x.at(2, 0, kBoundaryFlow), -12.0 / 450.0);
  for (int i = 0; i < 3; ++i)
    for (int t = 0; t < 8; ++t) EXPECT_LE(x.at(i, t, kCountNorm), 1.0);
}

TEST(Tensor, NormalizationUsesTrainingWindowOnly) {
  Inputs a(8), b(8);
  for (int i = 0; i < 3; ++i) b.counts.values(i, 7) = 1e6;  // outside the window
  const auto fd = default_fd_params(a.net, 900.0);
  FeatureOptions opt;
  opt.train_bins = 4;
  const auto xa = build_tensor(a.counts, a.speeds, a.net, fd, opt);
  const auto xb = build_tensor(b.counts, b.speeds, b.net, fd, opt);
  for (int k = 0; k < kFeatureWidth; ++k) {
    EXPECT_EQ(xa.mean()[static_cast<std::size_t>(k)], xb.mean()[static_cast<std::size_t>(k)]) << k;
    EXPECT_EQ(xa.scale()[static_cast<std::size_t>(k)], xb.scale()[static_cast<std::size_t>(k)]) << k;
  }
  EXPECT_EQ(xa.mean()[kWeekend], 0.0);
  EXPECT_EQ(xa.scale()[kCongestedFlag], 1.0);
  double m = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int t = 0; t < 4; ++t) m += xa.normalized(i, t, kQTraj);
  EXPECT_NEAR(m, 0.0, 1e-12);
  EXPECT_NEAR(xa.denormalize(kQTraj, xa.normalized(2, 6, kQTraj)), xa.at(2, 6, kQTraj), 1e-12);
}

TEST(Tensor, SaveLoadRoundTrip) {
  Inputs in;
  const auto x = build_tensor(in.counts, in.speeds, in.net, default_fd_params(in.net, 900.0));
  tf_test::TempDir dir;
  x.save(dir / "features.bin");
  const auto y = FeatureTensor::load(dir / "features.bin");
  EXPECT_EQ(x.data(), y.data());
  EXPECT_EQ(x.mean(), y.mean());
  EXPECT_EQ(x.scale(), y.scale());
  EXPECT_EQ(x.start, y.start);
  auto side = tf_test::slurp(dir / "features.bin.json");
  const auto pos = side.find("\"manifest_hash\": ");
  ASSERT_NE(pos, std::string::npos);
  side.replace(pos + 17, 1, side[pos + 17] == '1' ? "2" : "1");
  dir.write("features.bin.json", side);
  EXPECT_THROW(FeatureTensor::load(dir / "features.bin"), ParseError);
}

TEST(Tensor, ShapeMismatchRejected) {
  Inputs in;
  in.speeds.values.conservativeResize(3, 7);
  EXPECT_THROW(build_tensor(in.counts, in.speeds, in.net, default_fd_params(in.net, 900.0)), DataError);
}
