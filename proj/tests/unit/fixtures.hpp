#pragma once

#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "trafficfuse/ctm.hpp"
#include "trafficfuse/features.hpp"
#include "trafficfuse/network.hpp"
#include "trafficfuse/stgnn.hpp"

namespace tf_test {

inline trafficfuse::Segment segment(double capacity = 1800.0, double v_free = 10.0, double length = 300.0,
                                    int lanes = 1) {
  trafficfuse::Segment s;
  s.capacity_veh_per_hr = capacity;
  s.free_flow_speed = v_free;
  s.length_m = length;
  s.lanes = lanes;
  return s;
}

/// 0 -> 1 -> ... -> n-1
inline trafficfuse::RoadNetwork chain(int n, double capacity = 1800.0, double v_free = 10.0) {
  std::vector<trafficfuse::Segment> segs(static_cast<std::size_t>(n), segment(capacity, v_free));
  std::vector<trafficfuse::Edge> edges;
  for (int i = 0; i + 1 < n; ++i) edges.push_back({i, i + 1});
  return trafficfuse::RoadNetwork(std::move(segs), std::move(edges));
}

inline trafficfuse::RoadNetwork ring(int n, double capacity = 1800.0, double v_free = 10.0) {
  std::vector<trafficfuse::Segment> segs(static_cast<std::size_t>(n), segment(capacity, v_free));
  std::vector<trafficfuse::Edge> edges;
  for (int i = 0; i < n; ++i) edges.push_back({i, (i + 1) % n});
  return trafficfuse::RoadNetwork(std::move(segs), std::move(edges));
}

/// Random connected-ish sparse digraph without self-loops or duplicate edges.
inline trafficfuse::RoadNetwork random_network(int n, double edge_prob, std::mt19937_64& rng) {
  std::vector<trafficfuse::Segment> segs(static_cast<std::size_t>(n), segment());
  std::vector<trafficfuse::Edge> edges;
  std::bernoulli_distribution coin(edge_prob);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i != j && (j == (i + 1) % n || coin(rng))) edges.push_back({i, j});
    }
  }
  return trafficfuse::RoadNetwork(std::move(segs), std::move(edges));
}

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("trafficfuse_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

  std::filesystem::path write(const std::string& name, const std::string& content) const {
    const auto p = path_ / name;
    std::ofstream(p) << content;
    return p;
  }

 private:
  std::filesystem::path path_;
};

/// Feature tensor with counts uniform in [lo, hi] and other slots in [0, 1].
inline trafficfuse::FeatureTensor random_tensor(int n, int bins, std::mt19937_64& rng, double lo = 20.0,
                                                double hi = 100.0) {
  trafficfuse::FeatureTensor x(n, bins);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < n; ++i)
    for (int t = 0; t < bins; ++t) {
      x.at(i, t, trafficfuse::kQTraj) = lo + (hi - lo) * u(rng);
      for (int k = 1; k < trafficfuse::kFeatureWidth; ++k) x.at(i, t, k) = u(rng);
    }
  x.fit_normalization(bins);
  return x;
}

/// Parameters drawn N(0, scale^2) so that no layer starts at zero.
inline trafficfuse::ModelParams random_params(const trafficfuse::ModelConfig& config, std::mt19937_64& rng,
                                              double scale = 0.5) {
  auto p = trafficfuse::ModelParams::init(config);
  std::normal_distribution<double> z(0.0, scale);
  for (std::size_t k = 0; k < p.size(); ++k)
    for (Eigen::Index e = 0; e < p.value(k).size(); ++e) p.value(k).data()[e] = z(rng);
  return p;
}

/// Largest |analytic - central difference| / max(|analytic|, |fd|, floor)
/// over every scalar parameter.
inline double gradient_check(const trafficfuse::Predictor& model, const trafficfuse::WindowBatch& batch,
                             const trafficfuse::LossConfig& weights, double step = 1e-5, double floor = 1e-6) {
  const auto analytic = model.gradients(batch, weights);
  trafficfuse::Predictor probe = model;
  double worst = 0.0;
  for (std::size_t k = 0; k < probe.params().size(); ++k) {
    auto& m = probe.params().value(k);
    for (Eigen::Index e = 0; e < m.size(); ++e) {
      const double keep = m.data()[e];
      m.data()[e] = keep + step;
      const double up = probe.loss(batch, weights).total;
      m.data()[e] = keep - step;
      const double down = probe.loss(batch, weights).total;
      m.data()[e] = keep;
      const double fd = (up - down) / (2.0 * step);
      const double g = analytic.grads[k].data()[e];
      const double denom = std::max({std::abs(g), std::abs(fd), floor});
      worst = std::max(worst, std::abs(g - fd) / denom);
    }
  }
  return worst;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace tf_test
