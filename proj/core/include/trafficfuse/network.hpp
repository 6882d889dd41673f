#pragma once

#include <Eigen/Dense>
#include <Eigen/SparseCore>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "trafficfuse/csv.hpp"
#include "trafficfuse/diagnostics.hpp"

namespace trafficfuse {

using SegmentId = int;
using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

struct Segment {
  SegmentId id = 0;
  double length_m = 100.0;
  int lanes = 1;
  double capacity_veh_per_hr = 1800.0;
  double free_flow_speed = 13.9;  // m/s
  /// Explicit boundary flag; nullopt when the source did not specify one.
  std::optional<bool> is_boundary;
};

struct Edge {
  SegmentId from = 0;
  SegmentId to = 0;
  friend bool operator==(const Edge&, const Edge&) = default;
};

/// Directed segment graph. Immutable after construction; safe to share
/// between threads.
class RoadNetwork {
 public:
  RoadNetwork() = default;

  /// Validates and builds the network. Segment ids are reassigned to their
  /// position in `segments`. `external_ids` may be empty (ids become "0",
  /// "1", ...). Non-fatal findings go to `diag` when provided.
  RoadNetwork(std::vector<Segment> segments, std::vector<Edge> edges,
              std::vector<std::string> external_ids = {},
              Diagnostics* diag = nullptr);

  int size() const { return static_cast<int>(segments_.size()); }
  const Segment& segment(SegmentId i) const { return segments_.at(static_cast<std::size_t>(i)); }
  const std::vector<Segment>& segments() const { return segments_; }
  const std::vector<Edge>& edges() const { return edges_; }

  std::span<const SegmentId> downstream(SegmentId i) const;
  std::span<const SegmentId> upstream(SegmentId i) const;
  bool has_edge(SegmentId from, SegmentId to) const;

  /// Connectivity matrix with unit weights on edges.
  const SparseMatrix& adjacency() const { return adjacency_; }

  const std::string& external_id(SegmentId i) const { return external_ids_.at(static_cast<std::size_t>(i)); }
  std::optional<SegmentId> index_of(const std::string& external_id) const;

  /// True if at least one segment carries an explicit boundary flag.
  bool has_boundary_flags() const { return has_flags_; }

 private:
  std::vector<Segment> segments_;
  std::vector<Edge> edges_;
  std::vector<std::string> external_ids_;
  std::unordered_map<std::string, SegmentId> id_lookup_;
  std::vector<std::vector<SegmentId>> downstream_;
  std::vector<std::vector<SegmentId>> upstream_;
  SparseMatrix adjacency_;
  bool has_flags_ = false;
};

/// Loads segments.csv (id,length_m,lanes,capacity_vph,free_flow_mps,is_boundary)
/// and edges.csv (from_id,to_id).
RoadNetwork load_network(const std::filesystem::path& segments_csv,
                         const std::filesystem::path& edges_csv,
                         Diagnostics* diag = nullptr);
/// Loads `<dir>/segments.csv` and `<dir>/edges.csv`.
RoadNetwork load_network(const std::filesystem::path& dir, Diagnostics* diag = nullptr);

void save_network(const RoadNetwork& net, const std::filesystem::path& segments_csv,
                  const std::filesystem::path& edges_csv);
void save_network(const RoadNetwork& net, const std::filesystem::path& dir);

/// Maximum number of vehicles a segment can pass in one bin: C_i * dt.
double max_storage(const Segment& seg, double bin_seconds);

/// Flagged boundary segments, or the segments with no upstream or no
/// downstream neighbour when the network carries no flags. Sorted.
std::vector<SegmentId> boundary_segments(const RoadNetwork& net);
bool is_boundary_segment(const RoadNetwork& net, SegmentId i);

/// Segments x time-bins matrix of vehicle counts. NaN marks a missing cell.
struct CountMatrix {
  Eigen::MatrixXd values;
  double bin_seconds = 900.0;
  EpochSeconds start = 0;

  int segments() const { return static_cast<int>(values.rows()); }
  int bins() const { return static_cast<int>(values.cols()); }
  EpochSeconds time_at(int t) const {
    return start + static_cast<EpochSeconds>(t) * static_cast<EpochSeconds>(bin_seconds);
  }
  int hour(int t) const { return hour_of_day(time_at(t)); }
  int day(int t) const { return day_of_week(time_at(t)); }

  /// Throws DataError if any entry is negative or infinite.
  void validate() const;
};

CountMatrix load_count_matrix(const std::filesystem::path& path, const RoadNetwork& net);
/// `comment`, when non-empty, is written as a leading '#' line.
void save_count_matrix(const CountMatrix& counts, const RoadNetwork& net,
                       const std::filesystem::path& path, std::string_view comment = {});

}  // namespace trafficfuse
