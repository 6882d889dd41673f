#include "trafficfuse/network.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>

#include "trafficfuse/error.hpp"

namespace trafficfuse {

RoadNetwork::RoadNetwork(std::vector<Segment> segments, std::vector<Edge> edges,
                         std::vector<std::string> external_ids, Diagnostics* diag)
    : segments_(std::move(segments)), edges_(std::move(edges)) {
  const int n = size();
  if (external_ids.empty()) {
    external_ids.reserve(segments_.size());
    for (int i = 0; i < n; ++i) external_ids.push_back(std::to_string(i));
  }
  if (static_cast<int>(external_ids.size()) != n) {
    throw ValidationError("external id count does not match segment count");
  }
  external_ids_ = std::move(external_ids);

  for (int i = 0; i < n; ++i) {
    auto& s = segments_[static_cast<std::size_t>(i)];
    s.id = i;
    const auto& ext = external_ids_[static_cast<std::size_t>(i)];
    if (!id_lookup_.emplace(ext, i).second) {
      throw ValidationError("duplicate segment id '" + ext + "'");
    }
    if (!(s.capacity_veh_per_hr > 0.0) || !std::isfinite(s.capacity_veh_per_hr)) {
      throw ValidationError("segment '" + ext + "': capacity must be positive");
    }
    if (!(s.free_flow_speed > 0.0) || !std::isfinite(s.free_flow_speed)) {
      throw ValidationError("segment '" + ext + "': free-flow speed must be positive");
    }
    if (s.lanes < 1) {
      throw ValidationError("segment '" + ext + "': lanes must be a positive integer");
    }
    if (!(s.length_m > 0.0) || !std::isfinite(s.length_m)) {
      throw ValidationError("segment '" + ext + "': length must be positive");
    }
    if ((s.length_m < 50.0 || s.length_m > 2000.0) && diag) {
      diag->warn("segment_length", "segment '" + ext + "' length " +
                                       csv::format(s.length_m) + " m outside [50, 2000]");
    }
  }

  has_flags_ = std::any_of(segments_.begin(), segments_.end(),
                           [](const Segment& s) { return s.is_boundary.has_value(); });

  downstream_.assign(static_cast<std::size_t>(n), {});
  upstream_.assign(static_cast<std::size_t>(n), {});
  std::set<std::pair<int, int>> seen;
  std::vector<Eigen::Triplet<double>> triplets;
  triplets.reserve(edges_.size());
  for (const auto& e : edges_) {
    if (e.from < 0 || e.from >= n || e.to < 0 || e.to >= n) {
      throw ValidationError("edge references unknown segment");
    }
    if (e.from == e.to) {
      throw ValidationError("self-loop on segment '" +
                            external_ids_[static_cast<std::size_t>(e.from)] + "'");
    }
    if (!seen.emplace(e.from, e.to).second) {
      throw ValidationError("duplicate edge " + external_ids_[static_cast<std::size_t>(e.from)] +
                            " -> " + external_ids_[static_cast<std::size_t>(e.to)]);
    }
    downstream_[static_cast<std::size_t>(e.from)].push_back(e.to);
    upstream_[static_cast<std::size_t>(e.to)].push_back(e.from);
    triplets.emplace_back(e.from, e.to, 1.0);
  }
  for (auto& v : downstream_) std::sort(v.begin(), v.end());
  for (auto& v : upstream_) std::sort(v.begin(), v.end());
  adjacency_.resize(n, n);
  adjacency_.setFromTriplets(triplets.begin(), triplets.end());
  adjacency_.makeCompressed();
}

std::span<const SegmentId> RoadNetwork::downstream(SegmentId i) const {
  return downstream_.at(static_cast<std::size_t>(i));
}

std::span<const SegmentId> RoadNetwork::upstream(SegmentId i) const {
  return upstream_.at(static_cast<std::size_t>(i));
}

bool RoadNetwork::has_edge(SegmentId from, SegmentId to) const {
  const auto ds = downstream(from);
  return std::binary_search(ds.begin(), ds.end(), to);
}

std::optional<SegmentId> RoadNetwork::index_of(const std::string& external_id) const {
  auto it = id_lookup_.find(external_id);
  if (it == id_lookup_.end()) return std::nullopt;
  return it->second;
}


namespace {

std::optional<bool> parse_flag(const std::string& cell, const std::filesystem::path& path,
                               std::size_t line) {
  if (cell.empty()) return std::nullopt;
  if (cell == "1" || cell == "true" || cell == "TRUE" || cell == "True") return true;
  if (cell == "0" || cell == "false" || cell == "FALSE" || cell == "False") return false;
  throw ParseError(path.string() + ":" + std::to_string(line) +
                   ": column 'is_boundary': expected 0/1/true/false, got '" + cell + "'");
}

std::size_t column(const std::vector<std::string>& header, const std::string& name,
                   const std::filesystem::path& path) {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) {
    throw ParseError(path.string() + ":1: missing column '" + name + "'");
  }
  return static_cast<std::size_t>(it - header.begin());
}

}  // namespace

RoadNetwork load_network(const std::filesystem::path& segments_csv,
                         const std::filesystem::path& edges_csv, Diagnostics* diag) {
  const auto seg_rows = csv::read(segments_csv);
  if (seg_rows.empty()) throw ParseError(segments_csv.string() + ": empty file");
  const auto& header = seg_rows.front().cells;
  const auto c_id = column(header, "id", segments_csv);
  const auto c_len = column(header, "length_m", segments_csv);
  const auto c_lanes = column(header, "lanes", segments_csv);
  const auto c_cap = column(header, "capacity_vph", segments_csv);
  const auto c_ff = column(header, "free_flow_mps", segments_csv);
  const auto has_flag = std::find(header.begin(), header.end(), "is_boundary") != header.end();
  const auto c_flag = has_flag ? column(header, "is_boundary", segments_csv) : 0;

  std::vector<Segment> segments;
  std::vector<std::string> ids;
  for (std::size_t r = 1; r < seg_rows.size(); ++r) {
    const auto& row = seg_rows[r];
    auto cells = row.cells;
    if (cells.size() < header.size()) cells.resize(header.size());
    if (cells.size() > header.size()) {
      throw ParseError(segments_csv.string() + ":" + std::to_string(row.line) +
                       ": too many fields");
    }
    Segment s;
    if (cells[c_id].empty()) {
      throw ParseError(segments_csv.string() + ":" + std::to_string(row.line) + ": empty id");
    }
    ids.push_back(cells[c_id]);
    s.length_m = csv::to_double(cells[c_len], segments_csv, row.line, "length_m");
    s.lanes = static_cast<int>(csv::to_int(cells[c_lanes], segments_csv, row.line, "lanes"));
    s.capacity_veh_per_hr = csv::to_double(cells[c_cap], segments_csv, row.line, "capacity_vph");
    s.free_flow_speed = csv::to_double(cells[c_ff], segments_csv, row.line, "free_flow_mps");
    if (has_flag) s.is_boundary = parse_flag(cells[c_flag], segments_csv, row.line);
    segments.push_back(s);
  }

  std::unordered_map<std::string, int> lookup;
  for (std::size_t i = 0; i < ids.size(); ++i) lookup.emplace(ids[i], static_cast<int>(i));

  const auto edge_rows = csv::read(edges_csv);
  std::vector<Edge> edges;
  if (!edge_rows.empty()) {
    const auto& eh = edge_rows.front().cells;
    const auto c_from = column(eh, "from_id", edges_csv);
    const auto c_to = column(eh, "to_id", edges_csv);
    for (std::size_t r = 1; r < edge_rows.size(); ++r) {
      const auto& row = edge_rows[r];
      if (row.cells.size() != eh.size()) {
        throw ParseError(edges_csv.string() + ":" + std::to_string(row.line) +
                         ": expected " + std::to_string(eh.size()) + " fields");
      }
      auto f = lookup.find(row.cells[c_from]);
      auto t = lookup.find(row.cells[c_to]);
      if (f == lookup.end() || t == lookup.end()) {
        throw ParseError(edges_csv.string() + ":" + std::to_string(row.line) +
                         ": unknown segment id");
      }
      edges.push_back(Edge{f->second, t->second});
    }
  }
  return RoadNetwork(std::move(segments), std::move(edges), std::move(ids), diag);
}

RoadNetwork load_network(const std::filesystem::path& dir, Diagnostics* diag) {
  return load_network(dir / "segments.csv", dir / "edges.csv", diag);
}

void save_network(const RoadNetwork& net, const std::filesystem::path& segments_csv,
                  const std::filesystem::path& edges_csv) {
  std::ostringstream seg;
  seg << "id,length_m,lanes,capacity_vph,free_flow_mps,is_boundary\n";
  for (const auto& s : net.segments()) {
    seg << net.external_id(s.id) << ',' << csv::format(s.length_m) << ',' << s.lanes << ','
        << csv::format(s.capacity_veh_per_hr) << ',' << csv::format(s.free_flow_speed) << ',';
    if (s.is_boundary) seg << (*s.is_boundary ? 1 : 0);
    seg << '\n';
  }
  std::ostringstream edg;
  edg << "from_id,to_id\n";
  for (const auto& e : net.edges()) {
    edg << net.external_id(e.from) << ',' << net.external_id(e.to) << '\n';
  }
  csv::write_atomic(segments_csv, seg.str());
  csv::write_atomic(edges_csv, edg.str());
}

void save_network(const RoadNetwork& net, const std::filesystem::path& dir) {
  save_network(net, dir / "segments.csv", dir / "edges.csv");
}

double max_storage(const Segment& seg, double bin_seconds) {
  return seg.capacity_veh_per_hr / 3600.0 * bin_seconds;
}

bool is_boundary_segment(const RoadNetwork& net, SegmentId i) {
  if (net.has_boundary_flags()) return net.segment(i).is_boundary.value_or(false);
  return net.upstream(i).empty() || net.downstream(i).empty();
}

std::vector<SegmentId> boundary_segments(const RoadNetwork& net) {
  std::vector<SegmentId> out;
  for (int i = 0; i < net.size(); ++i) {
    if (is_boundary_segment(net, i)) out.push_back(i);
  }
  return out;
}

void CountMatrix::validate() const {
  for (Eigen::Index t = 0; t < values.cols(); ++t) {
    for (Eigen::Index i = 0; i < values.rows(); ++i) {
      const double v = values(i, t);
      if (std::isnan(v)) continue;
      if (v < 0.0 || !std::isfinite(v)) {
        throw DataError("count matrix entry (" + std::to_string(i) + ", " + std::to_string(t) +
                        ") is negative or infinite");
      }
    }
  }
}

CountMatrix load_count_matrix(const std::filesystem::path& path, const RoadNetwork& net) {
  const auto rows = csv::read(path);
  if (rows.empty()) throw ParseError(path.string() + ": empty file");
  const auto& header = rows.front().cells;
  if (header.size() < 2) throw ParseError(path.string() + ":1: no time columns");
  const auto bins = static_cast<int>(header.size() - 1);
  std::vector<EpochSeconds> stamps;
  for (std::size_t c = 1; c < header.size(); ++c) {
    try {
      stamps.push_back(parse_iso8601(header[c]));
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ":1: " + e.what());
    }
  }
  CountMatrix cm;
  cm.start = stamps.front();
  cm.bin_seconds = bins > 1 ? static_cast<double>(stamps[1] - stamps[0]) : 900.0;
  if (!(cm.bin_seconds > 0)) throw ParseError(path.string() + ":1: non-increasing bin starts");
  for (int t = 1; t < bins; ++t) {
    if (stamps[static_cast<std::size_t>(t)] != cm.time_at(t)) {
      throw ParseError(path.string() + ":1: irregular bin spacing at column " + std::to_string(t + 1));
    }
  }
  cm.values = Eigen::MatrixXd::Constant(net.size(), bins, std::numeric_limits<double>::quiet_NaN());
  std::vector<bool> filled(static_cast<std::size_t>(net.size()), false);
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.cells.size() != header.size()) {
      throw ParseError(path.string() + ":" + std::to_string(row.line) + ": expected " +
                       std::to_string(header.size()) + " fields");
    }
    auto idx = net.index_of(row.cells[0]);
    if (!idx) {
      throw ParseError(path.string() + ":" + std::to_string(row.line) + ": unknown segment id '" +
                       row.cells[0] + "'");
    }
    filled[static_cast<std::size_t>(*idx)] = true;
    for (int t = 0; t < bins; ++t) {
      const auto& cell = row.cells[static_cast<std::size_t>(t + 1)];
      if (cell.empty()) continue;
      cm.values(*idx, t) = csv::to_double(cell, path, row.line, header[static_cast<std::size_t>(t + 1)]);
    }
  }
  try {
    cm.validate();
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return cm;
}

void save_count_matrix(const CountMatrix& counts, const RoadNetwork& net,
                       const std::filesystem::path& path, std::string_view comment) {
  if (counts.segments() != net.size()) throw DataError("count matrix rows do not match network");
  std::ostringstream out;
  if (!comment.empty()) out << "# " << comment << '\n';
  out << "segment_id";
  for (int t = 0; t < counts.bins(); ++t) out << ',' << format_iso8601(counts.time_at(t));
  out << '\n';
  for (int i = 0; i < counts.segments(); ++i) {
    out << net.external_id(i);
    for (int t = 0; t < counts.bins(); ++t) {
      out << ',';
      const double v = counts.values(i, t);
      if (!std::isnan(v)) out << csv::format(v);
    }
    out << '\n';
  }
  csv::write_atomic(path, out.str());
}

}  // namespace trafficfuse
