#include "trafficfuse/features.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "json.hpp"
#include "trafficfuse/error.hpp"

namespace trafficfuse {

const std::array<std::string_view, kFeatureWidth>& feature_manifest() {
  static constexpr std::array<std::string_view, kFeatureWidth> names = {
      "q_traj",
      "hour_sin", "hour_cos", "day_sin", "day_cos", "is_weekend", "is_rush", "is_night",
      "q_bc",
      "speed_ratio", "congestion_level", "demand_norm", "supply_norm", "volume_capacity",
      "los", "congested_flag", "near_capacity_flag", "count_norm",
      "downstream_ratio", "downstream_gradient", "upstream_ratio", "upstream_gradient",
  };
  return names;
}

std::uint64_t feature_manifest_hash() {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](std::string_view s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    h ^= 0xff;
    h *= 1099511628211ULL;
  };
  mix(kFeatureManifestVersion);
  for (auto name : feature_manifest()) mix(name);
  return h;
}

bool is_indicator_feature(int k) {
  return k == kWeekend || k == kRush || k == kNight || k == kCongestedFlag ||
         k == kNearCapacityFlag;
}

bool is_weekend(int day) { return day == 5 || day == 6; }
bool is_rush_hour(int hour) { return (hour >= 7 && hour <= 9) || (hour >= 16 && hour <= 18); }
bool is_night(int hour) { return hour >= 22 || hour <= 5; }

std::array<double, 7> temporal_features(int hour, int day) {
  if (hour < 0 || hour > 23) throw ParameterError("hour out of range 0..23");
  if (day < 0 || day > 6) throw ParameterError("day out of range 0..6");
  constexpr double two_pi = 2.0 * std::numbers::pi;
  const double ah = two_pi * hour / 24.0;
  const double ad = two_pi * day / 7.0;
  return {std::sin(ah), std::cos(ah), std::sin(ad), std::cos(ad),
          is_weekend(day) ? 1.0 : 0.0, is_rush_hour(hour) ? 1.0 : 0.0, is_night(hour) ? 1.0 : 0.0};
}

double level_of_service(double x) {
  if (x <= 0.35) return 0.0;
  if (x <= 0.55) return 0.2;
  if (x <= 0.75) return 0.4;
  if (x <= 0.9) return 0.6;
  if (x <= 1.0) return 0.8;
  return 1.0;
}

std::array<double, 9> sd_features(double count, double b, const Segment& seg, const FdParams& fd,
                                  double bin_seconds, double n_max) {
  if (!(n_max > 0.0)) throw ParameterError("n_max must be positive");
  const double cap = max_storage(seg, bin_seconds);
  const double rho = density_from_speed(b, seg, fd, bin_seconds);
  const double d = demand(rho, seg, fd, bin_seconds);
  const double s = supply(rho, seg, fd, bin_seconds);
  const double vc = count / cap;
  return {b,
          1.0 - b,
          d / cap,
          s / cap,
          vc,
          level_of_service(vc),
          b < 0.5 ? 1.0 : 0.0,
          (vc > 0.7 && vc < 0.9) ? 1.0 : 0.0,
          count / n_max};
}

std::array<double, 4> sp_features(SegmentId i, const RoadNetwork& net,
                                  const Eigen::Ref<const Eigen::VectorXd>& b_all) {
  const double bi = b_all[i];
  auto mean_of = [&](std::span<const SegmentId> nb) {
    if (nb.empty()) return bi;
    double s = 0.0;
    for (int j : nb) s += b_all[j];
    return s / static_cast<double>(nb.size());
  };
  const double ds = mean_of(net.downstream(i));
  const double us = mean_of(net.upstream(i));
  return {ds, bi - ds, us, bi - us};
}

double boundary_flow_feature(const RoadNetwork& net, const Eigen::VectorXd& entries,
                             const Eigen::VectorXd& exits, SegmentId seg, double bin_seconds) {
  if (!is_boundary_segment(net, seg)) return 0.0;
  return (entries[seg] - exits[seg]) / max_storage(net.segment(seg), bin_seconds);
}

FeatureTensor::FeatureTensor(int segments, int bins)
    : segments_(segments),
      bins_(bins),
      data_(static_cast<std::size_t>(segments) * static_cast<std::size_t>(bins) * kFeatureWidth, 0.0) {
  mean_.fill(0.0);
  scale_.fill(1.0);
}

void FeatureTensor::fit_normalization(int train_bins) {
  if (train_bins <= 0 || train_bins > bins_) train_bins = bins_;
  train_bins_ = train_bins;
  const double n = static_cast<double>(segments_) * train_bins;
  for (int k = 0; k < kFeatureWidth; ++k) {
    if (is_indicator_feature(k) || n == 0) {
      mean_[k] = 0.0;
      scale_[k] = 1.0;
      continue;
    }
    double sum = 0.0;
    for (int i = 0; i < segments_; ++i)
      for (int t = 0; t < train_bins; ++t) sum += at(i, t, k);
    const double m = sum / n;
    double ss = 0.0;
    for (int i = 0; i < segments_; ++i)
      for (int t = 0; t < train_bins; ++t) {
        const double d = at(i, t, k) - m;
        ss += d * d;
      }
    const double sd = std::sqrt(ss / n);
    mean_[k] = m;
    scale_[k] = sd > 1e-12 ? sd : 1.0;
  }
}

void FeatureTensor::save(const std::filesystem::path& path) const {
  std::string bytes(data_.size() * sizeof(double), '\0');
  std::memcpy(bytes.data(), data_.data(), bytes.size());
  csv::write_atomic(path, bytes);

  nlohmann::json j;
  j["format"] = "trafficfuse.feature_tensor";
  j["version"] = std::string(kFeatureManifestVersion);
  j["manifest_hash"] = feature_manifest_hash();
  j["dtype"] = "float64-le";
  j["layout"] = "segment,time,feature";
  j["shape"] = {segments_, bins_, kFeatureWidth};
  auto& names = j["manifest"] = nlohmann::json::array();
  for (auto n : feature_manifest()) names.push_back(std::string(n));
  j["mean"] = mean_;
  j["scale"] = scale_;
  j["train_bins"] = train_bins_;
  j["bin_seconds"] = bin_seconds;
  j["start"] = format_iso8601(start);
  auto side = path;
  side += ".json";
  csv::write_atomic(side, j.dump(2) + "\n");
}

FeatureTensor FeatureTensor::load(const std::filesystem::path& path) {
  auto side = path;
  side += ".json";
  std::ifstream js(side);
  if (!js) throw ParseError("cannot open " + side.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(side.string() + ": " + e.what());
  }
  if (j.value("manifest_hash", std::uint64_t{0}) != feature_manifest_hash()) {
    throw ParseError(side.string() + ": feature manifest mismatch");
  }
  const auto shape = j.at("shape").get<std::vector<int>>();
  if (shape.size() != 3 || shape[2] != kFeatureWidth) {
    throw ParseError(side.string() + ": bad shape");
  }
  FeatureTensor t(shape[0], shape[1]);
  std::ifstream bin(path, std::ios::binary);
  if (!bin) throw ParseError("cannot open " + path.string());
  bin.read(reinterpret_cast<char*>(t.data_.data()),
           static_cast<std::streamsize>(t.data_.size() * sizeof(double)));
  if (bin.gcount() != static_cast<std::streamsize>(t.data_.size() * sizeof(double))) {
    throw ParseError(path.string() + ": truncated tensor data");
  }
  t.mean_ = j.at("mean").get<std::array<double, kFeatureWidth>>();
  t.scale_ = j.at("scale").get<std::array<double, kFeatureWidth>>();
  t.train_bins_ = j.at("train_bins").get<int>();
  t.bin_seconds = j.at("bin_seconds").get<double>();
  t.start = parse_iso8601(j.at("start").get<std::string>());
  return t;
}

Eigen::MatrixXd speed_ratios(const CountMatrix& speeds, const RoadNetwork& net, Diagnostics* diag) {
  Eigen::MatrixXd b(speeds.segments(), speeds.bins());
  for (int i = 0; i < speeds.segments(); ++i) {
    const double vf = net.segment(i).free_flow_speed;
    for (int t = 0; t < speeds.bins(); ++t) {
      const double v = speeds.values(i, t);
      if (std::isnan(v)) {
        if (diag) diag->count("speed_missing");
        b(i, t) = 1.0;
      } else {
        b(i, t) = speed_ratio(v, vf, diag);
      }
    }
  }
  return b;
}

FeatureTensor build_tensor(const CountMatrix& counts, const CountMatrix& speeds,
                           const RoadNetwork& net, const FdParams& fd,
                           const FeatureOptions& options, Diagnostics* diag) {
  const int n = net.size();
  const int bins = counts.bins();
  if (counts.segments() != n || speeds.segments() != n || speeds.bins() != bins) {
    throw DataError("build_tensor: counts and speeds must share shape with the network");
  }
  if (counts.start != speeds.start || counts.bin_seconds != speeds.bin_seconds) {
    throw DataError("build_tensor: counts and speeds have different time anchors");
  }
  const double dt = counts.bin_seconds;
  const int train = options.train_bins > 0 ? std::min(options.train_bins, bins) : bins;

  Eigen::MatrixXd q = counts.values;
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < bins; ++t)
      if (std::isnan(q(i, t))) {
        if (diag) diag->count("count_missing");
        q(i, t) = 0.0;
      }
  const Eigen::MatrixXd b = speed_ratios(speeds, net, diag);

  Eigen::MatrixXd entries = options.entries;
  Eigen::MatrixXd exits = options.exits;
  if (entries.size() == 0) {
    entries = Eigen::MatrixXd::Zero(n, bins);
    exits = Eigen::MatrixXd::Zero(n, bins);
    for (int i = 0; i < n; ++i) {
      if (net.upstream(i).empty()) entries.row(i) = q.row(i);
      if (net.downstream(i).empty()) exits.row(i) = q.row(i);
    }
  } else if (entries.rows() != n || entries.cols() != bins || exits.rows() != n ||
             exits.cols() != bins) {
    throw DataError("build_tensor: boundary entry/exit matrices must be N x T");
  }

  Eigen::VectorXd n_max(n);
  for (int i = 0; i < n; ++i) {
    double m = 1.0;
    for (int t = 0; t < train; ++t) m = std::max(m, q(i, t));
    n_max[i] = m;
  }

  FeatureTensor x(n, bins);
  x.bin_seconds = dt;
  x.start = counts.start;
  for (int t = 0; t < bins; ++t) {
    const auto temp = temporal_features(counts.hour(t), counts.day(t));
    const Eigen::VectorXd bcol = b.col(t);
    const Eigen::VectorXd ecol = entries.col(t);
    const Eigen::VectorXd xcol = exits.col(t);
    for (int i = 0; i < n; ++i) {
      const auto& seg = net.segment(i);
      x.at(i, t, kQTraj) = q(i, t);
      for (int k = 0; k < 7; ++k) x.at(i, t, kHourSin + k) = temp[static_cast<std::size_t>(k)];
      x.at(i, t, kBoundaryFlow) = boundary_flow_feature(net, ecol, xcol, i, dt);
      const auto sd = sd_features(q(i, t), bcol[i], seg, fd, dt, n_max[i]);
      for (int k = 0; k < 9; ++k) x.at(i, t, kSpeedRatio + k) = sd[static_cast<std::size_t>(k)];
      const auto sp = sp_features(i, net, bcol);
      for (int k = 0; k < 4; ++k) x.at(i, t, kDownstreamRatio + k) = sp[static_cast<std::size_t>(k)];
    }
  }
  x.fit_normalization(train);
  return x;
}

}  // namespace trafficfuse
