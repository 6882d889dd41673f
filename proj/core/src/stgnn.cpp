#include "trafficfuse/stgnn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "json.hpp"
#include "trafficfuse/csv.hpp"
#include "trafficfuse/error.hpp"

namespace trafficfuse {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr char kCheckpointMagic[8] = {'T', 'F', 'C', 'K', 'P', 'T', '0', '1'};

ad::Matrix xavier(int rows, int cols, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> u(-limit, limit);
  ad::Matrix m(rows, cols);
  for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = u(rng);
  return m;
}

ad::Matrix zeros(int rows, int cols) { return ad::Matrix::Zero(rows, cols); }
ad::Matrix ones(int rows, int cols) { return ad::Matrix::Ones(rows, cols); }

void check_finite(const ad::Var& v, const std::string& stage) {
  if (!v.value().allFinite()) throw TrainingError("non-finite activation in " + stage);
}

}  // namespace

void ModelConfig::validate() const {
  if (d < 1 || heads < 1 || d % heads != 0) {
    throw ParameterError("model width d=" + std::to_string(d) + " must be a positive multiple of heads=" +
                         std::to_string(heads));
  }
  if (history < 1) throw ParameterError("history length H must be >= 1");
  if (horizon < 1) throw ParameterError("forecast horizon F must be >= 1");
  if (spatial_layers < 0 || temporal_blocks < 0) throw ParameterError("layer counts must be >= 0");
  if (ffn_width < 1) throw ParameterError("ffn width must be >= 1");
}

ModelParams ModelParams::init(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  const int d = config.d;
  ModelParams p;
  p.add("input.W", xavier(kFeatureWidth, d, rng));
  p.add("input.b", zeros(1, d));
  for (int l = 0; l < config.spatial_layers; ++l) {
    const std::string pre = "spatial" + std::to_string(l) + ".";
    p.add(pre + "Wn", xavier(d, d, rng));
    p.add(pre + "Ws", xavier(d, d, rng));
    p.add(pre + "Wr", xavier(d, d, rng));
    p.add(pre + "ln.gamma", ones(1, d));
    p.add(pre + "ln.beta", zeros(1, d));
  }
  for (int b = 0; b < config.temporal_blocks; ++b) {
    const std::string pre = "temporal" + std::to_string(b) + ".";
    p.add(pre + "ln1.gamma", ones(1, d));
    p.add(pre + "ln1.beta", zeros(1, d));
    p.add(pre + "Wq", xavier(d, d, rng));
    p.add(pre + "Wk", xavier(d, d, rng));
    p.add(pre + "Wv", xavier(d, d, rng));
    p.add(pre + "Wo", xavier(d, d, rng));
    p.add(pre + "ln2.gamma", ones(1, d));
    p.add(pre + "ln2.beta", zeros(1, d));
    p.add(pre + "ffn.W1", xavier(d, config.ffn_width, rng));
    p.add(pre + "ffn.b1", zeros(1, config.ffn_width));
    p.add(pre + "ffn.W2", xavier(config.ffn_width, d, rng));
    p.add(pre + "ffn.b2", zeros(1, d));
  }
  p.add("out.W", xavier(config.history * d, d, rng));
  p.add("out.b", zeros(1, d));
  for (const char* head : {"mu", "logvar"}) {
    const std::string pre = std::string(head) + ".";
    p.add(pre + "W1", xavier(d, d, rng));
    p.add(pre + "b1", zeros(1, d));
    // Zero output layers start the model at persistence with unit sigma.
    p.add(pre + "W2", zeros(d, config.horizon));
    p.add(pre + "b2", zeros(1, config.horizon));
  }
  return p;
}

void ModelParams::add(std::string name, ad::Matrix value) {
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
}

std::size_t ModelParams::index(std::string_view name) const {
  for (std::size_t k = 0; k < names_.size(); ++k) {
    if (names_[k] == name) return k;
  }
  throw ParameterError("unknown model parameter '" + std::string(name) + "'");
}

ad::Matrix& ModelParams::operator[](std::string_view name) { return values_[index(name)]; }
const ad::Matrix& ModelParams::operator[](std::string_view name) const { return values_[index(name)]; }

std::size_t ModelParams::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

bool ModelParams::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](const ad::Matrix& m) { return m.allFinite(); });
}

void WindowBatch::validate() const {
  const auto rows = static_cast<Eigen::Index>(windows) * segments;
  if (windows < 1 || segments < 1) throw DataError("empty window batch");
  if (features.rows() != rows * history || features.cols() != kFeatureWidth) {
    throw DataError("window features have shape " + std::to_string(features.rows()) + "x" +
                    std::to_string(features.cols()) + ", expected " + std::to_string(rows * history) +
                    "x" + std::to_string(kFeatureWidth));
  }
  if (last_counts.size() != rows) throw DataError("last_counts length does not match the batch");
  if (targets.rows() != rows || targets.cols() != horizon) throw DataError("targets shape does not match the batch");
  if (n_hist.size() != windows || n_b.size() != windows) throw DataError("window totals length mismatch");
  if (q_max.size() != segments) throw DataError("q_max length does not match segments");
}

LossComponents composite_loss(const Eigen::MatrixXd& mu, const Eigen::MatrixXd& log_var,
                              const WindowBatch& batch, const LossConfig& weights,
                              Eigen::MatrixXd* d_mu, Eigen::MatrixXd* d_log_var) {
  const auto rows = mu.rows();
  const auto f = mu.cols();
  const int n = batch.segments;
  if (d_mu) d_mu->setZero(rows, f);
  if (d_log_var) d_log_var->setZero(rows, f);

  std::size_t valid = 0;
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index p = 0; p < f; ++p) valid += std::isnan(batch.targets(r, p)) ? 0 : 1;
  }
  const double inv_valid = valid > 0 ? 1.0 / static_cast<double>(valid) : 0.0;
  const double inv_all = 1.0 / static_cast<double>(rows * f);

  LossComponents out;
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double base = batch.last_counts[r];
    const double cap = batch.q_max[r % n];
    for (Eigen::Index p = 0; p < f; ++p) {
      const double q_hat = base + mu(r, p);
      const double y = batch.targets(r, p);
      double g_mu = 0.0;
      double g_lv = 0.0;
      if (!std::isnan(y)) {
        const double res = y - q_hat;
        const double sgn = res > 0 ? 1.0 : (res < 0 ? -1.0 : 0.0);
        // r / s^2 and r^2 / s^2 in log space: an exact fit drives log s^2
        // down without bound and exp(-log s^2) alone would overflow first.
        const double log_abs = std::log(std::abs(res));
        const double scaled = sgn * std::exp(log_abs - log_var(r, p));
        const double sq = std::exp(2.0 * log_abs - log_var(r, p));
        out.mae += std::abs(res) * inv_valid;
        out.nll += 0.5 * (log_var(r, p) + sq) * inv_valid;
        g_mu += weights.mae * (-sgn) * inv_valid + weights.nll * (-scaled) * inv_valid;
        g_lv += weights.nll * 0.5 * (1.0 - sq) * inv_valid;
      }
      if (q_hat > cap) {
        out.cap += (q_hat - cap) * inv_all;
        g_mu += weights.cap * inv_all;
      }
      if (d_mu) (*d_mu)(r, p) = g_mu;
      if (d_log_var) (*d_log_var)(r, p) = g_lv;
    }
  }
  const double inv_windows = 1.0 / static_cast<double>(batch.windows);
  for (int w = 0; w < batch.windows; ++w) {
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
      const auto r = static_cast<Eigen::Index>(w) * n + i;
      total += batch.last_counts[r] + mu(r, 0);
    }
    const double n_tot = batch.n_hist[w] + batch.n_b[w];
    const double tau = weights.tau_fraction * std::abs(n_tot);
    const double gap = total - n_tot;
    if (std::abs(gap) > tau) {
      out.cons += (std::abs(gap) - tau) * inv_windows;
      if (d_mu) {
        const double g = weights.cons * (gap > 0 ? 1.0 : -1.0) * inv_windows;
        for (int i = 0; i < n; ++i) (*d_mu)(static_cast<Eigen::Index>(w) * n + i, 0) += g;
      }
    }
  }
  out.total = weights.mae * out.mae + weights.nll * out.nll + weights.cap * out.cap + weights.cons * out.cons;
  return out;
}

LossComponents composite_loss(const Prediction& pred, const WindowBatch& batch, const LossConfig& weights) {
  Eigen::MatrixXd log_var = (2.0 * pred.sigma.array().log()).matrix();
  return composite_loss(pred.mu, log_var, batch, weights);
}

ad::SparseRowMatrix message_operator(const RoadNetwork& net, bool raw) {
  const int n = net.size();
  std::vector<Eigen::Triplet<double>> trip;
  for (int i = 0; i < n; ++i) {
    const auto down = net.downstream(i);
    const double w = raw || down.empty() ? 1.0 : 1.0 / static_cast<double>(down.size());
    for (int j : down) trip.emplace_back(i, j, w);
  }
  ad::SparseRowMatrix a(n, n);
  a.setFromTriplets(trip.begin(), trip.end());
  a.makeCompressed();
  return a;
}

ad::Var spatial_layer(ad::Var h, const ad::SparseRowMatrix& a, int blocks, const SpatialLayerVars& p) {
  ad::Var msg = ad::matmul(ad::graph_mix(a, h, blocks), p.wn);
  ad::Var pre = ad::add3(msg, ad::matmul(h, p.ws), ad::matmul(h, p.wr));
  return ad::gelu(ad::layer_norm(pre, p.gamma, p.beta));
}

ad::Var temporal_block(ad::Var z, int groups, int len, int heads, const TemporalBlockVars& p,
                       std::vector<ad::Matrix>* attention) {
  ad::Var x = ad::layer_norm(z, p.ln1_gamma, p.ln1_beta);
  std::vector<ad::Matrix> weights;
  ad::Var att = ad::grouped_attention(ad::matmul(x, p.wq), ad::matmul(x, p.wk), ad::matmul(x, p.wv), groups,
                                      len, heads, attention ? &weights : nullptr);
  if (attention) attention->insert(attention->end(), weights.begin(), weights.end());
  ad::Var z1 = ad::add(z, ad::matmul(att, p.wo));
  ad::Var y = ad::layer_norm(z1, p.ln2_gamma, p.ln2_beta);
  ad::Var hidden = ad::gelu(ad::add_row(ad::matmul(y, p.w1), p.b1));
  return ad::add(z1, ad::add_row(ad::matmul(hidden, p.w2), p.b2));
}

Predictor::Predictor(ModelConfig config, const RoadNetwork& net, ModelParams params)
    : config_(config),
      segments_(net.size()),
      adjacency_(message_operator(net, config.raw_adjacency)),
      params_(std::move(params)) {
  config_.validate();
  const ModelParams shape = ModelParams::init(config_);
  if (shape.size() != params_.size()) throw ParameterError("parameter set does not match the model config");
  for (std::size_t k = 0; k < shape.size(); ++k) {
    if (shape.name(k) != params_.name(k) || shape.value(k).rows() != params_.value(k).rows() ||
        shape.value(k).cols() != params_.value(k).cols()) {
      throw ParameterError("parameter '" + params_.name(k) + "' does not match the model config");
    }
  }
}

Predictor::Outputs Predictor::build(ad::Tape& tape, const WindowBatch& batch, bool trainable,
                                    std::vector<ad::Var>* param_vars,
                                    std::vector<ad::Matrix>* attention) const {
  batch.validate();
  if (batch.segments != segments_ || batch.history != config_.history || batch.horizon != config_.horizon) {
    throw DataError("window batch does not match the model (N, H, F)");
  }
  std::vector<ad::Var> vars;
  vars.reserve(params_.size());
  for (std::size_t k = 0; k < params_.size(); ++k) {
    vars.push_back(trainable ? tape.variable(params_.value(k)) : tape.constant(params_.value(k)));
  }
  auto var = [&](std::string_view name) { return vars[params_.index(name)]; };

  const int w = batch.windows;
  const int n = segments_;
  const int h_len = config_.history;

  ad::Var x = tape.constant(batch.features);
  ad::Var h = ad::add_row(ad::matmul(x, var("input.W")), var("input.b"));
  check_finite(h, "input projection");
  for (int l = 0; l < config_.spatial_layers; ++l) {
    const std::string pre = "spatial" + std::to_string(l) + ".";
    h = spatial_layer(h, adjacency_, w * h_len,
                      {var(pre + "Wn"), var(pre + "Ws"), var(pre + "Wr"), var(pre + "ln.gamma"),
                       var(pre + "ln.beta")});
    check_finite(h, "spatial layer " + std::to_string(l));
  }

  std::vector<int> perm(static_cast<std::size_t>(w) * n * h_len);
  for (int b = 0; b < w; ++b) {
    for (int i = 0; i < n; ++i) {
      for (int tau = 0; tau < h_len; ++tau) {
        perm[static_cast<std::size_t>((b * n + i) * h_len + tau)] = (b * h_len + tau) * n + i;
      }
    }
  }
  ad::Var z = ad::permute_rows(h, std::move(perm));
  for (int blk = 0; blk < config_.temporal_blocks; ++blk) {
    const std::string pre = "temporal" + std::to_string(blk) + ".";
    z = temporal_block(z, w * n, h_len, config_.heads,
                       {var(pre + "ln1.gamma"), var(pre + "ln1.beta"), var(pre + "Wq"), var(pre + "Wk"),
                        var(pre + "Wv"), var(pre + "Wo"), var(pre + "ln2.gamma"), var(pre + "ln2.beta"),
                        var(pre + "ffn.W1"), var(pre + "ffn.b1"), var(pre + "ffn.W2"), var(pre + "ffn.b2")},
                       attention);
    check_finite(z, "temporal block " + std::to_string(blk));
  }

  ad::Var flat = ad::flatten_groups(z, w * n);
  ad::Var emb = ad::gelu(ad::add_row(ad::matmul(flat, var("out.W")), var("out.b")));
  check_finite(emb, "output projection");
  auto head = [&](const std::string& pre) {
    ad::Var hid = ad::gelu(ad::add_row(ad::matmul(emb, var(pre + "W1")), var(pre + "b1")));
    return ad::add_row(ad::matmul(hid, var(pre + "W2")), var(pre + "b2"));
  };
  Outputs out{head("mu."), head("logvar.")};
  check_finite(out.mu_head, "mean head");
  check_finite(out.log_var, "log-variance head");
  if (param_vars) *param_vars = std::move(vars);
  return out;
}

Prediction Predictor::forward(const WindowBatch& batch, std::vector<ad::Matrix>* attention) const {
  ad::Tape tape;
  const Outputs out = build(tape, batch, false, nullptr, attention);
  Prediction pred;
  pred.mu = params_.count_scale * out.mu_head.value();
  pred.sigma = (0.5 * out.log_var.value().array()).exp().matrix();
  pred.q_hat = pred.mu.colwise() + batch.last_counts;
  return pred;
}

LossComponents Predictor::loss(const WindowBatch& batch, const LossConfig& weights) const {
  ad::Tape tape;
  const Outputs out = build(tape, batch, false, nullptr, nullptr);
  const Eigen::MatrixXd mu = params_.count_scale * out.mu_head.value();
  return composite_loss(mu, out.log_var.value(), batch, weights);
}

GradientResult Predictor::gradients(const WindowBatch& batch, const LossConfig& weights) const {
  ad::Tape tape;
  std::vector<ad::Var> vars;
  const Outputs out = build(tape, batch, true, &vars, nullptr);
  const double c = params_.count_scale;
  const Eigen::MatrixXd mu = c * out.mu_head.value();
  Eigen::MatrixXd d_mu;
  Eigen::MatrixXd d_lv;
  GradientResult result;
  result.loss = composite_loss(mu, out.log_var.value(), batch, weights, &d_mu, &d_lv);
  if (!std::isfinite(result.loss.total)) throw TrainingError("non-finite loss");

  ad::Matrix seed(1, 1);
  seed(0, 0) = result.loss.total;
  ad::Var total = tape.record(std::move(seed), {out.mu_head, out.log_var},
                              [&tape, mh = out.mu_head, lv = out.log_var, c, &d_mu, &d_lv](const ad::Matrix& g) {
                                tape.accumulate(mh, ad::Matrix(g(0, 0) * c * d_mu));
                                tape.accumulate(lv, ad::Matrix(g(0, 0) * d_lv));
                              });
  tape.backward(total);

  result.grads.reserve(vars.size());
  for (std::size_t k = 0; k < vars.size(); ++k) {
    const ad::Matrix& g = tape.node(vars[k].id()).grad;
    ad::Matrix grad = g.size() == 0 ? ad::Matrix::Zero(params_.value(k).rows(), params_.value(k).cols()) : g;
    if (!grad.allFinite()) throw TrainingError("non-finite gradient for parameter '" + params_.name(k) + "'");
    result.grads.push_back(std::move(grad));
  }
  return result;
}

WindowBatch make_batch(const WindowSource& source, const RoadNetwork& net, const ModelConfig& config,
                       const std::vector<int>& ends) {
  if (source.tensor == nullptr) throw ParameterError("window source has no feature tensor");
  const FeatureTensor& tensor = *source.tensor;
  const int n = tensor.segments();
  const int t_len = tensor.bins();
  const int h_len = config.history;
  const int f = config.horizon;
  if (n != net.size()) throw DataError("feature tensor segment count does not match the network");
  const bool have_counts = source.counts.size() > 0;
  if (have_counts && (source.counts.rows() != n || source.counts.cols() != t_len)) {
    throw DataError("count matrix shape does not match the feature tensor");
  }
  if (source.n_b.size() > 0 && source.n_b.size() != t_len) throw DataError("n_b length does not match bins");

  auto network_total = [&](int t) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += tensor.at(i, t, kQTraj);
    return s;
  };

  WindowBatch b;
  b.windows = static_cast<int>(ends.size());
  b.segments = n;
  b.history = h_len;
  b.horizon = f;
  const auto rows = static_cast<Eigen::Index>(b.windows) * n;
  b.features.resize(rows * h_len, kFeatureWidth);
  b.last_counts.resize(rows);
  b.targets.resize(rows, f);
  b.n_hist.resize(b.windows);
  b.n_b.resize(b.windows);
  b.q_max.resize(n);
  for (int i = 0; i < n; ++i) b.q_max[i] = max_storage(net.segment(i), tensor.bin_seconds);

  for (int w = 0; w < b.windows; ++w) {
    const int t = ends[static_cast<std::size_t>(w)];
    if (t < h_len - 1 || t >= t_len) {
      throw ParameterError("window ending at column " + std::to_string(t) + " lacks a full history");
    }
    for (int tau = 0; tau < h_len; ++tau) {
      const int col = t - h_len + 1 + tau;
      for (int i = 0; i < n; ++i) {
        const auto r = (static_cast<Eigen::Index>(w) * h_len + tau) * n + i;
        for (int k = 0; k < kFeatureWidth; ++k) b.features(r, k) = tensor.normalized(i, col, k);
      }
    }
    for (int i = 0; i < n; ++i) {
      const auto r = static_cast<Eigen::Index>(w) * n + i;
      b.last_counts[r] = tensor.at(i, t, kQTraj);
      for (int p = 1; p <= f; ++p) {
        const int col = t + p;
        double y = kNaN;
        if (col < t_len) y = have_counts ? source.counts(i, col) : tensor.at(i, col, kQTraj);
        b.targets(r, p - 1) = y;
      }
    }
    b.n_hist[w] = network_total(t);
    if (source.n_b.size() > 0) {
      b.n_b[w] = source.n_b[t];
    } else {
      b.n_b[w] = t + 1 < t_len ? network_total(t + 1) - b.n_hist[w] : 0.0;
    }
  }
  return b;
}

namespace {

struct Adam {
  explicit Adam(const ModelParams& p, double lr) : lr(lr) {
    for (std::size_t k = 0; k < p.size(); ++k) {
      m.push_back(ad::Matrix::Zero(p.value(k).rows(), p.value(k).cols()));
      v.push_back(m.back());
    }
  }

  void step(ModelParams& p, const std::vector<ad::Matrix>& g) {
    ++t;
    const double b1t = 1.0 - std::pow(beta1, t);
    const double b2t = 1.0 - std::pow(beta2, t);
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
      v[k] = beta2 * v[k] + (1.0 - beta2) * g[k].cwiseAbs2();
      p.value(k).array() -= lr * (m[k].array() / b1t) / ((v[k].array() / b2t).sqrt() + eps);
    }
  }

  double lr;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int t = 0;
  std::vector<ad::Matrix> m;
  std::vector<ad::Matrix> v;
};

double evaluate_windows(const Predictor& model, const WindowSource& source, const RoadNetwork& net,
                        const std::vector<int>& ends, const LossConfig& weights, int chunk) {
  double sum = 0.0;
  for (std::size_t s = 0; s < ends.size(); s += static_cast<std::size_t>(chunk)) {
    const std::size_t e = std::min(ends.size(), s + static_cast<std::size_t>(chunk));
    const std::vector<int> part(ends.begin() + static_cast<std::ptrdiff_t>(s),
                                ends.begin() + static_cast<std::ptrdiff_t>(e));
    const WindowBatch b = make_batch(source, net, model.config(), part);
    sum += model.loss(b, weights).total * static_cast<double>(part.size());
  }
  return sum / static_cast<double>(ends.size());
}

}  // namespace

TrainResult train(const WindowSource& source, const RoadNetwork& net, const ModelConfig& config,
                  const TrainConfig& options) {
  config.validate();
  if (source.tensor == nullptr) throw ParameterError("window source has no feature tensor");
  const FeatureTensor& tensor = *source.tensor;
  const int limit = options.bin_limit > 0 ? std::min(options.bin_limit, tensor.bins()) : tensor.bins();
  std::vector<int> ends;
  for (int t = config.history - 1; t + config.horizon < limit; ++t) ends.push_back(t);
  if (ends.empty()) {
    throw ParameterError("not enough columns (" + std::to_string(limit) + ") for one window with H=" +
                         std::to_string(config.history) + ", F=" + std::to_string(config.horizon));
  }
  if (options.batch_windows < 1) throw ParameterError("batch_windows must be >= 1");

  std::vector<int> train_ends = ends;
  std::vector<int> val_ends = ends;
  if (ends.size() >= 2) {
    auto n_val = static_cast<std::size_t>(std::lround(options.validation_fraction * static_cast<double>(ends.size())));
    n_val = std::clamp<std::size_t>(n_val, 1, ends.size() - 1);
    train_ends.assign(ends.begin(), ends.end() - static_cast<std::ptrdiff_t>(n_val));
    val_ends.assign(ends.end() - static_cast<std::ptrdiff_t>(n_val), ends.end());
  }

  ModelParams params = ModelParams::init(config);
  params.count_scale = tensor.scale()[kQTraj];
  Predictor model(config, net, std::move(params));
  Adam adam(model.params(), options.learning_rate);
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);

  TrainResult result;
  result.train_windows = train_ends.size();
  result.validation_windows = val_ends.size();
  result.best_validation = evaluate_windows(model, source, net, val_ends, options.loss, 32);
  result.params = model.params();
  int since_best = 0;
  int step = 0;
  for (int epoch = 1; epoch <= options.max_epochs; ++epoch) {
    std::vector<int> order = train_ends;
    std::shuffle(order.begin(), order.end(), rng);
    bool stop = false;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(options.batch_windows)) {
      const std::size_t e = std::min(order.size(), s + static_cast<std::size_t>(options.batch_windows));
      std::vector<int> part(order.begin() + static_cast<std::ptrdiff_t>(s),
                            order.begin() + static_cast<std::ptrdiff_t>(e));
      std::sort(part.begin(), part.end());
      const WindowBatch batch = make_batch(source, net, config, part);
      ++step;
      GradientResult g;
      try {
        g = model.gradients(batch, options.loss);
      } catch (const TrainingError& err) {
        throw TrainingError("step " + std::to_string(step) + ": " + err.what());
      }
      double norm2 = 0.0;
      for (const auto& m : g.grads) norm2 += m.squaredNorm();
      const double norm = std::sqrt(norm2);
      if (options.clip_norm > 0 && norm > options.clip_norm) {
        for (auto& m : g.grads) m *= options.clip_norm / norm;
      }
      adam.step(model.params(), g.grads);
      for (std::size_t k = 0; k < model.params().size(); ++k) {
        if (!model.params().value(k).allFinite()) {
          throw TrainingError("step " + std::to_string(step) + ": parameter '" + model.params().name(k) +
                              "' became non-finite");
        }
      }
      result.log.push_back({step, epoch, g.loss, kNaN});
      if (options.max_steps > 0 && step >= options.max_steps) {
        stop = true;
        break;
      }
    }
    const double val = evaluate_windows(model, source, net, val_ends, options.loss, 32);
    if (!std::isfinite(val)) throw TrainingError("epoch " + std::to_string(epoch) + ": validation loss is not finite");
    result.log.back().validation = val;
    if (val < result.best_validation) {
      result.best_validation = val;
      result.best_epoch = epoch;
      result.params = model.params();
      since_best = 0;
    } else if (++since_best >= options.patience) {
      stop = true;
    }
    if (stop) break;
  }
  return result;
}

void save_train_log(const std::vector<TrainLogRow>& log, const std::filesystem::path& path) {
  std::ostringstream out;
  out << "step,epoch,total,mae,nll,cap,cons,validation\n";
  for (const auto& r : log) {
    out << r.step << ',' << r.epoch << ',' << csv::format(r.train.total) << ',' << csv::format(r.train.mae) << ','
        << csv::format(r.train.nll) << ',' << csv::format(r.train.cap) << ',' << csv::format(r.train.cons) << ','
        << (std::isnan(r.validation) ? std::string() : csv::format(r.validation)) << '\n';
  }
  csv::write_atomic(path, out.str());
}

SeriesPrediction predict_series(const Predictor& model, const WindowSource& source, const RoadNetwork& net,
                                int chunk_windows) {
  if (source.tensor == nullptr) throw ParameterError("window source has no feature tensor");
  const int n = source.tensor->segments();
  const int t_len = source.tensor->bins();
  const int f = model.config().horizon;
  SeriesPrediction out;
  for (int p = 0; p < f; ++p) {
    out.q_hat.push_back(Eigen::MatrixXd::Constant(n, t_len, kNaN));
    out.sigma.push_back(Eigen::MatrixXd::Constant(n, t_len, kNaN));
  }
  std::vector<int> ends;
  for (int t = model.config().history - 1; t + 1 < t_len; ++t) ends.push_back(t);
  const auto chunk = static_cast<std::size_t>(std::max(1, chunk_windows));
  for (std::size_t s = 0; s < ends.size(); s += chunk) {
    const std::size_t e = std::min(ends.size(), s + chunk);
    const std::vector<int> part(ends.begin() + static_cast<std::ptrdiff_t>(s),
                                ends.begin() + static_cast<std::ptrdiff_t>(e));
    const WindowBatch batch = make_batch(source, net, model.config(), part);
    const Prediction pred = model.forward(batch);
    for (std::size_t w = 0; w < part.size(); ++w) {
      for (int p = 1; p <= f; ++p) {
        const int col = part[w] + p;
        if (col >= t_len) continue;
        for (int i = 0; i < n; ++i) {
          const auto r = static_cast<Eigen::Index>(w) * n + i;
          out.q_hat[static_cast<std::size_t>(p - 1)](i, col) = pred.q_hat(r, p - 1);
          out.sigma[static_cast<std::size_t>(p - 1)](i, col) = pred.sigma(r, p - 1);
        }
      }
    }
  }
  return out;
}

void save_checkpoint(const ModelConfig& config, const ModelParams& params, const std::filesystem::path& path) {
  std::string bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  auto put = [&bytes](const void* p, std::size_t n) { bytes.append(static_cast<const char*>(p), n); };
  const auto count = static_cast<std::uint64_t>(params.size());
  put(&count, sizeof count);
  for (std::size_t k = 0; k < params.size(); ++k) {
    const auto len = static_cast<std::uint32_t>(params.name(k).size());
    put(&len, sizeof len);
    put(params.name(k).data(), len);
    const auto rows = static_cast<std::uint64_t>(params.value(k).rows());
    const auto cols = static_cast<std::uint64_t>(params.value(k).cols());
    put(&rows, sizeof rows);
    put(&cols, sizeof cols);
    put(params.value(k).data(), static_cast<std::size_t>(params.value(k).size()) * sizeof(double));
  }
  csv::write_atomic(path, bytes);

  nlohmann::json j;
  j["format"] = "trafficfuse-checkpoint";
  j["version"] = 1;
  j["d"] = config.d;
  j["spatial_layers"] = config.spatial_layers;
  j["temporal_blocks"] = config.temporal_blocks;
  j["heads"] = config.heads;
  j["history"] = config.history;
  j["horizon"] = config.horizon;
  j["ffn_width"] = config.ffn_width;
  j["seed"] = config.seed;
  j["raw_adjacency"] = config.raw_adjacency;
  j["count_scale"] = params.count_scale;
  j["feature_manifest_hash"] = feature_manifest_hash();
  std::filesystem::path side = path;
  side += ".json";
  csv::write_atomic(side, j.dump(2) + "\n");
}

std::pair<ModelConfig, ModelParams> load_checkpoint(const std::filesystem::path& path) {
  std::filesystem::path side = path;
  side += ".json";
  std::ifstream js(side);
  if (!js) throw ParseError(side.string() + ": cannot open checkpoint sidecar");
  ModelConfig config;
  double count_scale = 1.0;
  try {
    const nlohmann::json j = nlohmann::json::parse(js);
    if (j.value("format", "") != "trafficfuse-checkpoint") throw ParseError(side.string() + ": not a checkpoint sidecar");
    config.d = j.at("d").get<int>();
    config.spatial_layers = j.at("spatial_layers").get<int>();
    config.temporal_blocks = j.at("temporal_blocks").get<int>();
    config.heads = j.at("heads").get<int>();
    config.history = j.at("history").get<int>();
    config.horizon = j.at("horizon").get<int>();
    config.ffn_width = j.at("ffn_width").get<int>();
    config.seed = j.at("seed").get<std::uint64_t>();
    config.raw_adjacency = j.at("raw_adjacency").get<bool>();
    count_scale = j.at("count_scale").get<double>();
    if (j.at("feature_manifest_hash").get<std::uint64_t>() != feature_manifest_hash()) {
      throw ParseError(side.string() + ": checkpoint was trained on a different feature manifest");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(side.string() + ": " + e.what());
  }
  config.validate();

  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path.string() + ": cannot open checkpoint");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::size_t pos = 0;
  auto get = [&](void* dst, std::size_t n) {
    if (pos + n > bytes.size()) throw ParseError(path.string() + ": truncated checkpoint at byte " + std::to_string(pos));
    std::memcpy(dst, bytes.data() + pos, n);
    pos += n;
  };
  char magic[sizeof kCheckpointMagic];
  get(magic, sizeof magic);
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw ParseError(path.string() + ": bad checkpoint magic");
  std::uint64_t count = 0;
  get(&count, sizeof count);
  const ModelParams shape = ModelParams::init(config);
  if (count != shape.size()) throw ParseError(path.string() + ": parameter count does not match the config");
  ModelParams params;
  for (std::uint64_t k = 0; k < count; ++k) {
    std::uint32_t len = 0;
    get(&len, sizeof len);
    std::string name(len, '\0');
    get(name.data(), len);
    std::uint64_t rows = 0;
    std::uint64_t cols = 0;
    get(&rows, sizeof rows);
    get(&cols, sizeof cols);
    const auto& ref = shape.value(static_cast<std::size_t>(k));
    if (name != shape.name(static_cast<std::size_t>(k)) || rows != static_cast<std::uint64_t>(ref.rows()) ||
        cols != static_cast<std::uint64_t>(ref.cols())) {
      throw ParseError(path.string() + ": parameter '" + name + "' does not match the config");
    }
    ad::Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    get(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
    params.add(std::move(name), std::move(m));
  }
  params.count_scale = count_scale;
  return {config, std::move(params)};
}

}  // namespace trafficfuse
