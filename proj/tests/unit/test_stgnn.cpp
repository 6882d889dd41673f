#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numbers>
#include <random>

#include "fixtures.hpp"
#include "json.hpp"
#include "trafficfuse/error.hpp"
#include "trafficfuse/stgnn.hpp"

using namespace trafficfuse;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.d = 4;
  c.spatial_layers = 2;
  c.temporal_blocks = 1;
  c.heads = 2;
  c.history = 3;
  c.horizon = 2;
  c.ffn_width = 6;
  c.seed = 11;
  return c;
}

struct Problem {
  RoadNetwork net;
  FeatureTensor tensor;
  WindowSource source;
  // Counts of order one keep the loss of order one, so central differences
  // are not swamped by rounding in the gradient checks.
  Problem(RoadNetwork n, int bins, std::uint64_t seed, double lo = 1.0, double hi = 3.0) : net(std::move(n)) {
    std::mt19937_64 rng(seed);
    tensor = tf_test::random_tensor(net.size(), bins, rng, lo, hi);
    source.tensor = &tensor;
  }
  Problem(const Problem&) = delete;
};

std::vector<int> range(int first, int last) {
  std::vector<int> v;
  for (int t = first; t < last; ++t) v.push_back(t);
  return v;
}

LossConfig only(double mae, double nll, double cap, double cons) {
  LossConfig w;
  w.mae = mae;
  w.nll = nll;
  w.cap = cap;
  w.cons = cons;
  return w;
}

}  // namespace

TEST(ModelConfig, Validation) {
  ModelConfig c = tiny_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ParameterError);
  c = tiny_config();
  c.history = 0;
  EXPECT_THROW(c.validate(), ParameterError);
}

TEST(ModelParams, InitIsSeededAndNamed) {
  const auto a = ModelParams::init(tiny_config());
  const auto b = ModelParams::init(tiny_config());
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(a.value(k), b.value(k));
  EXPECT_EQ(a["input.W"].rows(), kFeatureWidth);
  EXPECT_EQ(a["out.W"].rows(), 3 * 4);
  EXPECT_THROW(a["nope"], ParameterError);
}

TEST(MakeBatch, LayoutAndTargets) {
  Problem p(tf_test::chain(3), 10, 1);
  const auto c = tiny_config();
  const auto b = make_batch(p.source, p.net, c, {2, 8});
  EXPECT_EQ(b.features.rows(), 2 * 3 * 3);
  // Row (w * H + tau) * N + i holds column t - H + 1 + tau.
  EXPECT_DOUBLE_EQ(b.features((1 * 3 + 2) * 3 + 1, kQTraj), p.tensor.normalized(1, 8, kQTraj));
  EXPECT_DOUBLE_EQ(b.features((0 * 3 + 0) * 3 + 2, kLos), p.tensor.normalized(2, 0, kLos));
  EXPECT_EQ(b.last_counts[3 + 2], p.tensor.at(2, 8, kQTraj));
  EXPECT_EQ(b.targets(0, 1), p.tensor.at(0, 4, kQTraj));
  EXPECT_EQ(b.targets(3, 0), p.tensor.at(0, 9, kQTraj));
  EXPECT_TRUE(std::isnan(b.targets(3, 1)));
  double total9 = 0.0, total8 = 0.0;
  for (int i = 0; i < 3; ++i) {
    total9 += p.tensor.at(i, 9, kQTraj);
    total8 += p.tensor.at(i, 8, kQTraj);
  }
  EXPECT_NEAR(b.n_b[1], total9 - total8, 1e-12);
  EXPECT_THROW(make_batch(p.source, p.net, c, {1}), ParameterError);
}

TEST(Forward, ZeroHeadsPersist) {
  Problem p(tf_test::chain(3), 10, 2);
  const Predictor model(tiny_config(), p.net, ModelParams::init(tiny_config()));
  const auto b = make_batch(p.source, p.net, model.config(), {4, 5, 6});
  const auto pred = model.forward(b);
  EXPECT_EQ(pred.mu.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(pred.sigma, Eigen::MatrixXd::Ones(9, 2));
  for (int r = 0; r < 9; ++r) EXPECT_EQ(pred.q_hat(r, 1), b.last_counts[r]);
}

TEST(Forward, SigmaPositiveUnderLargeWeights) {
  Problem p(tf_test::chain(3), 10, 3);
  std::mt19937_64 rng(3);
  const Predictor model(tiny_config(), p.net, tf_test::random_params(tiny_config(), rng, 2.0));
  const auto pred = model.forward(make_batch(p.source, p.net, model.config(), range(2, 10)));
  EXPECT_GT(pred.sigma.minCoeff(), 0.0);
}

TEST(Forward, PermutationEquivariance) {
  // Relabel segment i as perm[i] on a small branching network.
  const std::vector<int> perm = {2, 0, 3, 1};
  std::vector<Segment> segs(4, tf_test::segment());
  const std::vector<Edge> edges = {{0, 1}, {0, 2}, {1, 3}, {2, 3}, {3, 0}};
  std::vector<Edge> relabelled;
  for (const auto& e : edges) relabelled.push_back({perm[e.from], perm[e.to]});
  Problem a(RoadNetwork(segs, edges), 9, 4);
  Problem b(RoadNetwork(segs, relabelled), 9, 4);
  for (int i = 0; i < 4; ++i)
    for (int t = 0; t < 9; ++t)
      for (int k = 0; k < kFeatureWidth; ++k) b.tensor.at(perm[i], t, k) = a.tensor.at(i, t, k);
  b.tensor.fit_normalization(9);

  std::mt19937_64 rng(4);
  const auto params = tf_test::random_params(tiny_config(), rng);
  const Predictor ma(tiny_config(), a.net, params);
  const Predictor mb(tiny_config(), b.net, params);
  const auto pa = ma.forward(make_batch(a.source, a.net, ma.config(), {5, 7}));
  const auto pb = mb.forward(make_batch(b.source, b.net, mb.config(), {5, 7}));
  for (int w = 0; w < 2; ++w)
    for (int i = 0; i < 4; ++i)
      for (int f = 0; f < 2; ++f) {
        EXPECT_NEAR(pa.mu(w * 4 + i, f), pb.mu(w * 4 + perm[i], f), 1e-10);
        EXPECT_NEAR(pa.sigma(w * 4 + i, f), pb.sigma(w * 4 + perm[i], f), 1e-10);
        EXPECT_NEAR(pa.q_hat(w * 4 + i, f), pb.q_hat(w * 4 + perm[i], f), 1e-10);
      }
}

TEST(Forward, DuplicatedSegmentsPredictIdentically) {
  std::vector<Segment> segs(4, tf_test::segment());
  Problem p(RoadNetwork(segs, {{0, 1}, {0, 2}, {1, 3}, {2, 3}}), 8, 5);
  for (int t = 0; t < 8; ++t)
    for (int k = 0; k < kFeatureWidth; ++k) p.tensor.at(2, t, k) = p.tensor.at(1, t, k);
  p.tensor.fit_normalization(8);
  std::mt19937_64 rng(5);
  const Predictor model(tiny_config(), p.net, tf_test::random_params(tiny_config(), rng));
  const auto pred = model.forward(make_batch(p.source, p.net, model.config(), {4, 6}));
  for (int w = 0; w < 2; ++w) {
    EXPECT_EQ(pred.mu.row(w * 4 + 1), pred.mu.row(w * 4 + 2));
    EXPECT_EQ(pred.sigma.row(w * 4 + 1), pred.sigma.row(w * 4 + 2));
  }
}

TEST(Forward, GoldenSnapshot) {
  // Set TRAFFICFUSE_UPDATE_GOLDEN=1 to rewrite the snapshot after an
  // intentional model change.
  const auto path = std::filesystem::path(TRAFFICFUSE_TEST_DATA) / "stgnn_golden.json";
  ModelConfig c = tiny_config();
  c.history = 4;
  Problem p(tf_test::chain(3), 8, 6);
  std::mt19937_64 rng(6);
  const Predictor model(c, p.net, tf_test::random_params(c, rng));
  const auto pred = model.forward(make_batch(p.source, p.net, c, {3, 5}));
  if (std::getenv("TRAFFICFUSE_UPDATE_GOLDEN")) {
    nlohmann::json j;
    for (Eigen::Index r = 0; r < pred.q_hat.rows(); ++r)
      for (Eigen::Index f = 0; f < pred.q_hat.cols(); ++f) {
        j["q_hat"].push_back(pred.q_hat(r, f));
        j["sigma"].push_back(pred.sigma(r, f));
      }
    std::ofstream(path) << j.dump(1) << "\n";
  }
  std::ifstream in(path);
  ASSERT_TRUE(in) << path;
  const auto j = nlohmann::json::parse(in);
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < pred.q_hat.rows(); ++r)
    for (Eigen::Index f = 0; f < pred.q_hat.cols(); ++f, ++k) {
      EXPECT_NEAR(pred.q_hat(r, f), j["q_hat"][k].get<double>(), 1e-9 * std::abs(pred.q_hat(r, f)));
      EXPECT_NEAR(pred.sigma(r, f), j["sigma"][k].get<double>(), 1e-9 * pred.sigma(r, f));
    }
}

namespace {

WindowBatch hand_batch(int n, int f) {
  WindowBatch b;
  b.windows = 1;
  b.segments = n;
  b.history = 1;
  b.horizon = f;
  b.features = ad::Matrix::Zero(n, kFeatureWidth);
  b.last_counts = Eigen::VectorXd::Constant(n, 10.0);
  b.targets = Eigen::MatrixXd::Constant(n, f, 10.0);
  b.n_hist = Eigen::VectorXd::Constant(1, 10.0 * n);
  b.n_b = Eigen::VectorXd::Zero(1);
  b.q_max = Eigen::VectorXd::Constant(n, 100.0);
  return b;
}

}  // namespace

TEST(Loss, PerfectFitIsZero) {
  const auto b = hand_batch(3, 2);
  const auto l = composite_loss(Eigen::MatrixXd::Zero(3, 2), Eigen::MatrixXd::Zero(3, 2), b, LossConfig{});
  EXPECT_EQ(l.total, 0.0);
  EXPECT_EQ(l.mae, 0.0);
  EXPECT_EQ(l.nll, 0.0);
  EXPECT_EQ(l.cap, 0.0);
  EXPECT_EQ(l.cons, 0.0);
}

TEST(Loss, CapacityHingeArithmetic) {
  auto b = hand_batch(3, 2);
  b.targets.setConstant(std::nan(""));
  Eigen::MatrixXd mu = Eigen::MatrixXd::Zero(3, 2);
  mu(1, 1) = 100.0 + 3.0 - 10.0;  // q_hat = Q_max + 3, N F = 6
  const auto l = composite_loss(mu, Eigen::MatrixXd::Zero(3, 2), b, only(0, 0, 1, 0));
  EXPECT_DOUBLE_EQ(l.cap, 0.5);
}

TEST(Loss, ConservationBandEdge) {
  auto b = hand_batch(3, 2);
  LossConfig w = only(0, 0, 0, 1);
  w.tau_fraction = 0.125;
  const double tau = w.tau_fraction * 30.0;
  Eigen::MatrixXd mu = Eigen::MatrixXd::Zero(3, 2);
  mu(0, 0) = tau;  // 33.75 - 30 is exact
  EXPECT_EQ(composite_loss(mu, Eigen::MatrixXd::Zero(3, 2), b, w).cons, 0.0);
  mu(0, 0) = tau + 2.0;
  EXPECT_NEAR(composite_loss(mu, Eigen::MatrixXd::Zero(3, 2), b, w).cons, 2.0, 1e-12);
  mu(0, 1) = 50.0;  // p = 2 does not enter the totals
  EXPECT_NEAR(composite_loss(mu, Eigen::MatrixXd::Zero(3, 2), b, w).cons, 2.0, 1e-12);
}

TEST(Loss, NllFixedPointIsMeanSquaredResidual) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> z(0.0, 3.0);
  const int n = 200;
  auto b = hand_batch(n, 1);
  double ms = 0.0;
  for (int i = 0; i < n; ++i) {
    b.targets(i, 0) = 10.0 + z(rng);
    ms += std::pow(b.targets(i, 0) - 10.0, 2) / n;
  }
  b.q_max.setConstant(1e9);
  auto nll = [&](double lv) {
    return composite_loss(Eigen::MatrixXd::Zero(n, 1), Eigen::MatrixXd::Constant(n, 1, lv), b, only(0, 1, 0, 0)).nll;
  };
  // Golden-section search over log sigma^2.
  double lo = -5.0, hi = 6.0;
  const double g = (std::sqrt(5.0) - 1.0) / 2.0;
  for (int it = 0; it < 200; ++it) {
    const double x1 = hi - g * (hi - lo);
    const double x2 = lo + g * (hi - lo);
    (nll(x1) < nll(x2) ? hi : lo) = nll(x1) < nll(x2) ? x2 : x1;
  }
  EXPECT_NEAR(std::exp(0.5 * (lo + hi)) / ms, 1.0, 1e-3);
}

TEST(Gradients, MatchFiniteDifferences) {
  Problem p(tf_test::chain(3), 9, 9);
  std::mt19937_64 rng(9);
  const Predictor model(tiny_config(), p.net, tf_test::random_params(tiny_config(), rng));
  const auto batch = make_batch(p.source, p.net, model.config(), {2, 4, 6});
  EXPECT_LT(tf_test::gradient_check(model, batch, LossConfig{}), 1e-4);
}

TEST(Gradients, RawAdjacencyAndCountScale) {
  Problem p(tf_test::ring(3), 9, 10);
  ModelConfig c = tiny_config();
  c.raw_adjacency = true;
  c.temporal_blocks = 2;
  std::mt19937_64 rng(10);
  auto params = tf_test::random_params(c, rng);
  params.count_scale = 7.5;
  const Predictor model(c, p.net, params);
  const auto batch = make_batch(p.source, p.net, c, {3, 5});
  EXPECT_LT(tf_test::gradient_check(model, batch, only(1, 1, 1, 1)), 1e-4);
}

TEST(Gradients, PerfectFitMaeOnlyIsZero) {
  Problem p(tf_test::chain(3), 9, 11);
  const Predictor model(tiny_config(), p.net, ModelParams::init(tiny_config()));
  auto batch = make_batch(p.source, p.net, model.config(), {2, 5});
  for (Eigen::Index r = 0; r < batch.targets.rows(); ++r) batch.targets.row(r).setConstant(batch.last_counts[r]);
  const auto g = model.gradients(batch, only(1, 0, 0, 0));
  EXPECT_EQ(g.loss.mae, 0.0);
  for (const auto& m : g.grads) EXPECT_EQ(m.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Gradients, MaeWeightIsLinear) {
  Problem p(tf_test::chain(3), 9, 12);
  std::mt19937_64 rng(12);
  const Predictor model(tiny_config(), p.net, tf_test::random_params(tiny_config(), rng));
  const auto batch = make_batch(p.source, p.net, model.config(), {2, 5});
  const auto g1 = model.gradients(batch, only(1, 0, 0, 0));
  const auto g2 = model.gradients(batch, only(2, 0, 0, 0));
  for (std::size_t k = 0; k < g1.grads.size(); ++k) EXPECT_EQ(g2.grads[k], 2.0 * g1.grads[k]) << k;
}

TEST(Gradients, NonFiniteActivationNamesStage) {
  Problem p(tf_test::chain(3), 9, 13);
  auto params = ModelParams::init(tiny_config());
  params["input.W"](0, 0) = std::nan("");
  const Predictor model(tiny_config(), p.net, params);
  const auto batch = make_batch(p.source, p.net, model.config(), {2});
  try {
    model.gradients(batch, LossConfig{});
    FAIL();
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("input projection"), std::string::npos);
  }
}

namespace {

// Three-segment chain with a smooth daily cycle of `period` bins.
struct PeriodicProblem {
  RoadNetwork net = tf_test::chain(3);
  FeatureTensor tensor;
  WindowSource source;
  PeriodicProblem(int bins, int period, double amplitude) : tensor(3, bins) {
    for (int t = 0; t < bins; ++t) {
      const double phase = 2.0 * std::numbers::pi * t / period;
      for (int i = 0; i < 3; ++i) {
        tensor.at(i, t, kQTraj) = 60.0 + amplitude * std::sin(phase - 0.3 * i);
        tensor.at(i, t, kHourSin) = std::sin(phase);
        tensor.at(i, t, kHourCos) = std::cos(phase);
      }
    }
    tensor.fit_normalization(bins);
    source.tensor = &tensor;
  }
};

ModelConfig train_config() {
  ModelConfig c;
  c.d = 8;
  c.spatial_layers = 1;
  c.temporal_blocks = 1;
  c.heads = 2;
  c.history = 6;
  c.horizon = 4;
  c.ffn_width = 16;
  c.seed = 3;
  return c;
}

}  // namespace

TEST(Train, ConstantTrafficIsLearned) {
  PeriodicProblem p(60, 24, 0.0);
  TrainConfig opt;
  opt.learning_rate = 3e-3;
  opt.max_steps = 200;
  opt.max_epochs = 1000;
  opt.patience = 1000;
  const auto r = train(p.source, p.net, train_config(), opt);
  const Predictor model(train_config(), p.net, r.params);
  const auto b = make_batch(p.source, p.net, model.config(), range(45, 55));
  EXPECT_LT(model.loss(b, only(1, 0, 0, 0)).mae, 0.5);
}

TEST(Train, DeterministicLog) {
  PeriodicProblem p(80, 24, 30.0);
  TrainConfig opt;
  opt.max_epochs = 3;
  const auto a = train(p.source, p.net, train_config(), opt);
  const auto b = train(p.source, p.net, train_config(), opt);
  tf_test::TempDir dir;
  save_train_log(a.log, dir / "a.csv");
  save_train_log(b.log, dir / "b.csv");
  EXPECT_EQ(tf_test::slurp(dir / "a.csv"), tf_test::slurp(dir / "b.csv"));
  EXPECT_FALSE(a.log.empty());
  EXPECT_EQ(a.log.front().step, 1);
}

TEST(Train, PeriodicDemandBeatsPersistence) {
  PeriodicProblem p(24 * 12, 24, 40.0);
  TrainConfig opt;
  opt.learning_rate = 3e-3;
  opt.max_epochs = 40;
  opt.patience = 8;
  opt.bin_limit = 24 * 9;
  const auto r = train(p.source, p.net, train_config(), opt);
  const Predictor model(train_config(), p.net, r.params);
  const auto ends = range(24 * 9, 24 * 12 - 4);
  const auto b = make_batch(p.source, p.net, model.config(), ends);
  const auto pred = model.forward(b);
  double model_mae = 0.0, persist_mae = 0.0;
  for (Eigen::Index row = 0; row < b.targets.rows(); ++row) {
    model_mae += std::abs(pred.q_hat(row, 3) - b.targets(row, 3));
    persist_mae += std::abs(b.last_counts[row] - b.targets(row, 3));
  }
  EXPECT_LT(model_mae, persist_mae);
}

TEST(Train, ConservationWeightTightensTotals) {
  // Boundary totals claim 10% more traffic than the targets show, so the
  // MAE/NLL terms and the conservation hinge disagree; a larger weight must
  // not leave the totals further outside the tolerance band.
  PeriodicProblem p(24 * 6, 24, 30.0);
  p.source.n_b = Eigen::VectorXd::Zero(p.tensor.bins());
  for (int t = 0; t + 1 < p.tensor.bins(); ++t) {
    double now = 0.0, next = 0.0;
    for (int i = 0; i < 3; ++i) {
      now += p.tensor.at(i, t, kQTraj);
      next += p.tensor.at(i, t + 1, kQTraj);
    }
    p.source.n_b[t] = 1.1 * next - now;
  }
  auto excess = [&](double lambda) {
    TrainConfig opt;
    opt.learning_rate = 3e-3;
    opt.max_epochs = 30;
    opt.patience = 30;
    opt.loss.cons = lambda;
    const auto r = train(p.source, p.net, train_config(), opt);
    const Predictor model(train_config(), p.net, r.params);
    const auto b = make_batch(p.source, p.net, model.config(), range(5, 24 * 6 - 4));
    const auto pred = model.forward(b);
    double e = 0.0;
    for (int w = 0; w < b.windows; ++w) {
      double total = 0.0;
      for (int i = 0; i < 3; ++i) total += pred.q_hat(w * 3 + i, 0);
      const double n_tot = b.n_hist[w] + b.n_b[w];
      e += std::max(0.0, std::abs(total - n_tot) - opt.loss.tau_fraction * std::abs(n_tot)) / b.windows;
    }
    return e;
  };
  const double e0 = excess(0.0), e1 = excess(1.0), e10 = excess(10.0);
  EXPECT_LE(e1, e0) << e0 << " " << e1 << " " << e10;
  EXPECT_LE(e10, e1) << e0 << " " << e1 << " " << e10;
  EXPECT_GT(e0, 1.0);
}

TEST(Checkpoint, RoundTrip) {
  std::mt19937_64 rng(14);
  auto params = tf_test::random_params(tiny_config(), rng);
  params.count_scale = 12.25;
  tf_test::TempDir dir;
  save_checkpoint(tiny_config(), params, dir / "model.bin");
  const auto [c, q] = load_checkpoint(dir / "model.bin");
  EXPECT_EQ(c.d, 4);
  EXPECT_EQ(c.history, 3);
  EXPECT_EQ(q.count_scale, 12.25);
  for (std::size_t k = 0; k < q.size(); ++k) EXPECT_EQ(q.value(k), params.value(k));
  auto bytes = tf_test::slurp(dir / "model.bin");
  dir.write("model.bin", bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(load_checkpoint(dir / "model.bin"), ParseError);
}

TEST(PredictSeries, AlignsHorizons) {
  Problem p(tf_test::chain(3), 12, 15);
  std::mt19937_64 rng(15);
  const Predictor model(tiny_config(), p.net, tf_test::random_params(tiny_config(), rng));
  const auto s = predict_series(model, p.source, p.net, 4);
  ASSERT_EQ(s.q_hat.size(), 2u);
  EXPECT_TRUE(std::isnan(s.q_hat[0](0, 2)));
  EXPECT_FALSE(std::isnan(s.q_hat[0](0, 3)));
  EXPECT_TRUE(std::isnan(s.q_hat[1](0, 3)));
  const auto pred = model.forward(make_batch(p.source, p.net, model.config(), {6}));
  EXPECT_DOUBLE_EQ(s.q_hat[0](1, 7), pred.q_hat(1, 0));
  EXPECT_DOUBLE_EQ(s.q_hat[1](2, 8), pred.q_hat(2, 1));
  EXPECT_DOUBLE_EQ(s.sigma[1](2, 8), pred.sigma(2, 1));
}
