#include <benchmark/benchmark.h>

#include <random>

#include "trafficfuse/ctm.hpp"
#include "trafficfuse/ensrf.hpp"
#include "trafficfuse/observability.hpp"
#include "trafficfuse/propagation.hpp"
#include "trafficfuse/stgnn.hpp"
#include "trafficfuse/twin.hpp"

using namespace trafficfuse;

namespace {

const TwinScenario& grid() {
  static const TwinScenario tw = [] {
    std::mt19937_64 rng(1);
    GridTwinOptions o;
    o.bins = 96;
    return grid_twin(o, rng);
  }();
  return tw;
}

void BM_CtmStep(benchmark::State& state) {
  const auto& tw = grid();
  const int n = tw.net.size();
  TrafficState s = make_state(Eigen::VectorXd::Constant(n, 50.0), Eigen::VectorXd::Constant(n, 10.0), tw.net);
  const Eigen::VectorXd out = Eigen::VectorXd::Zero(n);
  for (auto _ : state) {
    s = ctm_step(s, tw.net, tw.fd, tw.turns, tw.inflow.col(40), out, tw.bin_seconds);
    benchmark::DoNotOptimize(s);
  }
}
BENCHMARK(BM_CtmStep);

void BM_Simulate(benchmark::State& state) {
  const auto& tw = grid();
  SimulationOptions o;
  o.bin_seconds = tw.bin_seconds;
  for (auto _ : state) {
    auto r = simulate(tw.net, tw.fd, tw.turns, tw.inflow, static_cast<int>(tw.inflow.cols()), o);
    benchmark::DoNotOptimize(r.counts.values.data());
  }
}
BENCHMARK(BM_Simulate)->Unit(benchmark::kMillisecond);

WindowBatch random_batch(int windows, int n, const ModelConfig& c, std::mt19937_64& rng) {
  std::normal_distribution<double> z(0.0, 1.0);
  WindowBatch b;
  b.windows = windows;
  b.segments = n;
  b.history = c.history;
  b.horizon = c.horizon;
  b.features = Eigen::MatrixXd::NullaryExpr(windows * c.history * n, kFeatureWidth, [&] { return z(rng); });
  b.last_counts = Eigen::VectorXd::Constant(windows * n, 10.0);
  b.targets = Eigen::MatrixXd::Constant(windows * n, c.horizon, 10.0);
  b.n_hist = Eigen::VectorXd::Constant(windows, 10.0 * n);
  b.n_b = Eigen::VectorXd::Zero(windows);
  b.q_max = Eigen::VectorXd::Constant(n, 100.0);
  return b;
}

void BM_PredictorGradients(benchmark::State& state) {
  const auto& tw = grid();
  ModelConfig c;
  c.d = static_cast<int>(state.range(0));
  c.heads = 2;
  c.temporal_blocks = 1;
  c.ffn_width = 2 * c.d;
  std::mt19937_64 rng(3);
  const Predictor model(c, tw.net, ModelParams::init(c));
  const WindowBatch b = random_batch(8, tw.net.size(), c, rng);
  for (auto _ : state) {
    auto g = model.gradients(b, LossConfig{});
    benchmark::DoNotOptimize(g.loss.total);
  }
}
BENCHMARK(BM_PredictorGradients)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_AnalysisStep(benchmark::State& state) {
  const auto& tw = grid();
  const int n = tw.net.size();
  FilterConfig fc;
  fc.members = static_cast<int>(state.range(0));
  std::mt19937_64 rng(5);
  const CalibrationEnsemble prior = CalibrationEnsemble::initialize(n, fc, 0.0, rng);
  const TransitionMatrix tm = build_transition(
      link_flow_stats(tw.net, {}), tw.net, PropagationConfig{});
  const auto rho = localization_matrix(tm, tw.calibration_cameras);
  std::vector<CameraObservation> obs;
  for (SegmentId c : tw.calibration_cameras) obs.push_back({c, 0, 120.0, false});
  const Eigen::VectorXd q = Eigen::VectorXd::Constant(n, 100.0);
  for (auto _ : state) {
    CalibrationEnsemble ens = prior;
    auto rep = analysis_step(ens, obs, q, TimeContext{}, &rho, fc);
    benchmark::DoNotOptimize(rep.assimilated);
  }
}
BENCHMARK(BM_AnalysisStep)->Arg(50)->Arg(200);

void BM_LyapunovGramian(benchmark::State& state) {
  const auto& tw = grid();
  const Eigen::VectorXd nominal = Eigen::VectorXd::Constant(tw.net.size(), 50.0);
  const LinearSystem sys =
      linearize(tw.net, tw.fd, tw.turns, nominal, LinearRegime::kFree, tw.calibration_cameras, tw.bin_seconds);
  for (auto _ : state) {
    auto w = lyapunov_gramian(sys);
    benchmark::DoNotOptimize(w.data());
  }
}
BENCHMARK(BM_LyapunovGramian)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
