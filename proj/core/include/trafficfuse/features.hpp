#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "trafficfuse/ctm.hpp"
#include "trafficfuse/diagnostics.hpp"
#include "trafficfuse/network.hpp"

namespace trafficfuse {

inline constexpr int kFeatureWidth = 22;
inline constexpr std::string_view kFeatureManifestVersion = "trafficfuse-features-v1";

/// Feature slots of the per-segment vector, in manifest order.
enum FeatureIndex : int {
  kQTraj = 0,
  kHourSin, kHourCos, kDaySin, kDayCos, kWeekend, kRush, kNight,
  kBoundaryFlow,
  kSpeedRatio, kCongestion, kDemandNorm, kSupplyNorm, kVolumeCapacity, kLos,
  kCongestedFlag, kNearCapacityFlag, kCountNorm,
  kDownstreamRatio, kDownstreamGradient, kUpstreamRatio, kUpstreamGradient,
};

const std::array<std::string_view, kFeatureWidth>& feature_manifest();
/// FNV-1a over the manifest names and version; stable across runs.
std::uint64_t feature_manifest_hash();
bool is_indicator_feature(int k);

/// Weekend: Saturday/Sunday (d = 5, 6 with Monday = 0). Rush: 7-9 and 16-18.
/// Night: 22-23 and 0-5.
bool is_weekend(int day);
bool is_rush_hour(int hour);
bool is_night(int hour);

/// [sin, cos of hour; sin, cos of day; weekend, rush, night].
std::array<double, 7> temporal_features(int hour, int day);

/// Level-of-service grade from volume/capacity: A..F as 0, 0.2, ... 1.0 with
/// upper band edges 0.35, 0.55, 0.75, 0.9, 1.0.
double level_of_service(double volume_over_capacity);

/// [b, 1-b, D/C, S/C, q/C, LOS, 1[b<0.5], 1[0.7<q/C<0.9], q/n_max].
std::array<double, 9> sd_features(double count, double b, const Segment& seg, const FdParams& fd,
                                  double bin_seconds, double n_max);

/// [mean downstream b, b - that, mean upstream b, b - that]. An empty
/// neighbour set uses b itself.
std::array<double, 4> sp_features(SegmentId i, const RoadNetwork& net,
                                  const Eigen::Ref<const Eigen::VectorXd>& b_all);

/// (entries - exits) / Q_max on boundary segments, 0 elsewhere.
double boundary_flow_feature(const RoadNetwork& net, const Eigen::VectorXd& entries,
                             const Eigen::VectorXd& exits, SegmentId seg, double bin_seconds);

/// N x T x 22 raw feature array plus normalisation statistics.
class FeatureTensor {
 public:
  FeatureTensor() = default;
  FeatureTensor(int segments, int bins);

  int segments() const { return segments_; }
  int bins() const { return bins_; }

  double& at(int i, int t, int k) { return data_[index(i, t, k)]; }
  double at(int i, int t, int k) const { return data_[index(i, t, k)]; }
  std::span<const double> vector(int i, int t) const {
    return {data_.data() + index(i, t, 0), static_cast<std::size_t>(kFeatureWidth)};
  }
  const std::vector<double>& data() const { return data_; }

  double normalize(int k, double x) const { return (x - mean_[k]) / scale_[k]; }
  double denormalize(int k, double z) const { return z * scale_[k] + mean_[k]; }
  double normalized(int i, int t, int k) const { return normalize(k, at(i, t, k)); }

  /// Computes per-feature mean/scale over columns [0, train_bins). Indicator
  /// slots keep mean 0, scale 1.
  void fit_normalization(int train_bins);
  const std::array<double, kFeatureWidth>& mean() const { return mean_; }
  const std::array<double, kFeatureWidth>& scale() const { return scale_; }
  int train_bins() const { return train_bins_; }

  double bin_seconds = 900.0;
  EpochSeconds start = 0;

  /// Raw little-endian doubles to `path`, manifest and stats to `path`.json.
  void save(const std::filesystem::path& path) const;
  static FeatureTensor load(const std::filesystem::path& path);

 private:
  std::size_t index(int i, int t, int k) const {
    return (static_cast<std::size_t>(i) * static_cast<std::size_t>(bins_) +
            static_cast<std::size_t>(t)) * kFeatureWidth + static_cast<std::size_t>(k);
  }

  int segments_ = 0;
  int bins_ = 0;
  int train_bins_ = 0;
  std::vector<double> data_;
  std::array<double, kFeatureWidth> mean_{};
  std::array<double, kFeatureWidth> scale_{};
};

struct FeatureOptions {
  /// Columns used for n_max and normalisation statistics; all when <= 0.
  int train_bins = 0;
  /// Optional N x T boundary entry/exit counts. When empty they are taken
  /// from the counts of source (no upstream) and sink (no downstream) segments.
  Eigen::MatrixXd entries;
  Eigen::MatrixXd exits;
};

/// Missing speeds become free flow (b = 1, "speed_missing"); missing
/// counts become 0 ("count_missing").
FeatureTensor build_tensor(const CountMatrix& counts, const CountMatrix& speeds,
                           const RoadNetwork& net, const FdParams& fd,
                           const FeatureOptions& options = {}, Diagnostics* diag = nullptr);

/// Speed-ratio matrix b (N x T) from speeds, with the same missing rule.
Eigen::MatrixXd speed_ratios(const CountMatrix& speeds, const RoadNetwork& net,
                             Diagnostics* diag = nullptr);

}  // namespace trafficfuse
