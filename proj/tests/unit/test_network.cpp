#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "fixtures.hpp"
#include "trafficfuse/error.hpp"
#include "trafficfuse/network.hpp"

using namespace trafficfuse;
using tf_test::TempDir;

namespace {

const char* kChainSegments =
    "id,length_m,lanes,capacity_vph,free_flow_mps,is_boundary\n"
    "s1,300,1,1800,13.9,\n"
    "s2,300,1,1800,13.9,\n"
    "s3,300,1,1800,13.9,\n";
const char* kChainEdges = "from_id,to_id\ns1,s2\ns2,s3\n";

}  // namespace

TEST(Network, LoadsChain) {
  TempDir dir;
  const auto net = load_network(dir.write("segments.csv", kChainSegments), dir.write("edges.csv", kChainEdges));
  ASSERT_EQ(net.size(), 3);
  const auto s1 = *net.index_of("s1");
  const auto s2 = *net.index_of("s2");
  ASSERT_EQ(net.downstream(s1).size(), 1u);
  EXPECT_EQ(net.downstream(s1)[0], s2);
  EXPECT_EQ(net.external_id(s2), "s2");
}

TEST(Network, SelfLoopRejected) {
  TempDir dir;
  dir.write("segments.csv", kChainSegments);
  dir.write("edges.csv", "from_id,to_id\ns1,s2\ns2,s2\n");
  try {
    load_network(dir.path());
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("self-loop"), std::string::npos);
  }
}

TEST(Network, ParseErrorsCarryLocus) {
  TempDir dir;
  dir.write("segments.csv",
            "id,length_m,lanes,capacity_vph,free_flow_mps,is_boundary\n"
            "s1,300,1,abc,13.9,\n");
  dir.write("edges.csv", "from_id,to_id\n");
  try {
    load_network(dir.path());
    FAIL() << "expected a parse error";
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(":2"), std::string::npos) << e.what();
  }
}

TEST(Network, UnknownEdgeEndpointRejected) {
  TempDir dir;
  dir.write("segments.csv", kChainSegments);
  dir.write("edges.csv", "from_id,to_id\ns1,s9\n");
  EXPECT_THROW(load_network(dir.path()), Error);
}

TEST(Network, InvalidAttributesRejected) {
  auto s = tf_test::segment();
  s.capacity_veh_per_hr = 0.0;
  EXPECT_THROW(RoadNetwork({s}, {}), ValidationError);
  s = tf_test::segment();
  s.free_flow_speed = -1.0;
  EXPECT_THROW(RoadNetwork({s}, {}), ValidationError);
}

TEST(Network, LengthOutsideRangeIsOnlyDiagnosed) {
  Diagnostics diag;
  auto s = tf_test::segment();
  s.length_m = 20.0;
  RoadNetwork net({s, tf_test::segment()}, {{0, 1}}, {}, &diag);
  EXPECT_EQ(net.size(), 2);
  EXPECT_EQ(diag.count_of("segment_length"), 1u);
}

TEST(Network, MaxStorage) {
  EXPECT_DOUBLE_EQ(max_storage(tf_test::segment(1800.0), 900.0), 450.0);
  EXPECT_DOUBLE_EQ(max_storage(tf_test::segment(3600.0), 1.0), 1.0);
  EXPECT_DOUBLE_EQ(max_storage(tf_test::segment(1200.0), 900.0), 300.0);
}

TEST(Network, MaxStorageIsLinear) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(100.0, 5000.0);
  for (int k = 0; k < 100; ++k) {
    const double c = u(rng);
    const double dt = u(rng) / 10.0;
    EXPECT_NEAR(max_storage(tf_test::segment(2 * c), dt), 2 * max_storage(tf_test::segment(c), dt), 1e-9);
    EXPECT_NEAR(max_storage(tf_test::segment(c), 3 * dt), 3 * max_storage(tf_test::segment(c), dt), 1e-9);
  }
}

TEST(Network, BoundaryByDegree) {
  const auto chain = tf_test::chain(3);
  EXPECT_EQ(boundary_segments(chain), (std::vector<SegmentId>{0, 2}));
  EXPECT_TRUE(boundary_segments(tf_test::ring(5)).empty());
}

TEST(Network, BoundaryFlagsAreVerbatim) {
  std::vector<Segment> segs(3, tf_test::segment());
  segs[0].is_boundary = false;
  segs[1].is_boundary = true;
  segs[2].is_boundary = false;
  RoadNetwork net(segs, {{0, 1}, {1, 2}});
  EXPECT_EQ(boundary_segments(net), (std::vector<SegmentId>{1}));
}

TEST(Network, AdjacencySupportMatchesNeighbours) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto net = tf_test::random_network(15, 0.15, rng);
    const SparseMatrix& a = net.adjacency();
    for (int i = 0; i < net.size(); ++i) {
      std::vector<SegmentId> row;
      for (SparseMatrix::InnerIterator it(a, i); it; ++it) {
        if (it.value() > 0) row.push_back(static_cast<SegmentId>(it.col()));
      }
      const auto ds = net.downstream(i);
      EXPECT_EQ(row, std::vector<SegmentId>(ds.begin(), ds.end()));
      std::vector<SegmentId> col;
      for (int j = 0; j < net.size(); ++j) {
        if (a.coeff(j, i) > 0) col.push_back(j);
      }
      const auto us = net.upstream(i);
      EXPECT_EQ(col, std::vector<SegmentId>(us.begin(), us.end()));
    }
  }
}

TEST(Network, SaveLoadRoundTripIsByteIdentical) {
  TempDir dir;
  std::vector<Segment> segs{tf_test::segment(1800, 13.9, 250.5), tf_test::segment(3600, 30.0, 1000.0, 2),
                            tf_test::segment(900, 8.3, 75.0)};
  segs[0].is_boundary = true;
  segs[1].is_boundary = false;
  segs[2].is_boundary = true;
  RoadNetwork net(segs, {{0, 1}, {1, 2}}, {"a", "b", "c"});
  save_network(net, dir / "one");
  const auto reloaded = load_network(dir / "one");
  save_network(reloaded, dir / "two");
  EXPECT_EQ(tf_test::slurp(dir / "one/segments.csv"), tf_test::slurp(dir / "two/segments.csv"));
  EXPECT_EQ(tf_test::slurp(dir / "one/edges.csv"), tf_test::slurp(dir / "two/edges.csv"));
  EXPECT_EQ(reloaded.segment(1).lanes, 2);
  EXPECT_EQ(reloaded.segment(0).length_m, 250.5);
}

TEST(CountMatrix, RoundTripKeepsMissingCells) {
  TempDir dir;
  const auto net = tf_test::chain(2);
  CountMatrix m;
  m.values.resize(2, 3);
  m.values << 1.5, std::numeric_limits<double>::quiet_NaN(), 3, 0, 7.25, 1e6;
  m.bin_seconds = 900;
  m.start = 1704067200;
  save_count_matrix(m, net, dir / "c.csv", "seed=1");
  const auto back = load_count_matrix(dir / "c.csv", net);
  ASSERT_EQ(back.bins(), 3);
  EXPECT_EQ(back.start, m.start);
  EXPECT_TRUE(std::isnan(back.values(0, 1)));
  EXPECT_EQ(back.values(1, 2), 1e6);
  EXPECT_EQ(back.values(1, 1), 7.25);
  EXPECT_EQ(back.hour(2), 0);
  EXPECT_EQ(back.day(0), 0);  // 2024-01-01 is a Monday
}

TEST(CountMatrix, NegativeEntryRejected) {
  TempDir dir;
  const auto net = tf_test::chain(1);
  dir.write("c.csv", "segment_id,2024-01-01T00:00:00Z\n0,-3\n");
  EXPECT_THROW(load_count_matrix(dir / "c.csv", net), Error);
}
