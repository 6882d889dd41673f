#pragma once

// Spatiotemporal graph predictor: input projection, graph convolution per
// time step, pre-norm temporal self-attention per segment, flatten and
// project, then mean and log-variance heads over an F-step horizon.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "trafficfuse/autodiff.hpp"
#include "trafficfuse/features.hpp"
#include "trafficfuse/network.hpp"

namespace trafficfuse {

struct ModelConfig {
  int d = 32;
  int spatial_layers = 2;
  int temporal_blocks = 2;
  int heads = 4;
  int history = 8;   // H
  int horizon = 4;   // F
  int ffn_width = 64;
  std::uint64_t seed = 0;
  /// Use the 0/1 adjacency instead of the out-degree normalised one.
  bool raw_adjacency = false;

  void validate() const;
};

/// Named parameter arrays in a fixed order.
class ModelParams {
 public:
  static ModelParams init(const ModelConfig& config);

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t k) const { return names_[k]; }
  ad::Matrix& value(std::size_t k) { return values_[k]; }
  const ad::Matrix& value(std::size_t k) const { return values_[k]; }
  ad::Matrix& operator[](std::string_view name);
  const ad::Matrix& operator[](std::string_view name) const;
  std::size_t index(std::string_view name) const;
  std::size_t scalar_count() const;
  bool all_finite() const;

  void add(std::string name, ad::Matrix value);

  /// Count units per unit of mean-head output. Not trained.
  double count_scale = 1.0;

 private:
  std::vector<std::string> names_;
  std::vector<ad::Matrix> values_;
};

/// One or more stacked windows. Row layout of `features` is
/// (w * H + tau) * N + i; per-segment outputs use row w * N + i.
struct WindowBatch {
  int windows = 0;
  int segments = 0;
  int history = 0;
  int horizon = 0;
  ad::Matrix features;           // (windows*H*N) x 22, normalised
  Eigen::VectorXd last_counts;   // windows*N, raw q_traj at the last history step
  Eigen::MatrixXd targets;       // (windows*N) x F raw future counts, NaN = missing
  Eigen::VectorXd n_hist;        // per window network total at the last history step
  Eigen::VectorXd n_b;           // per window boundary net flow over the next step
  Eigen::VectorXd q_max;         // N, per-bin capacity

  void validate() const;
};

struct Prediction {
  Eigen::MatrixXd mu;     // (windows*N) x F increments
  Eigen::MatrixXd sigma;  // (windows*N) x F, > 0
  Eigen::MatrixXd q_hat;  // last_counts + mu
};

struct LossConfig {
  double mae = 1.0;
  double nll = 1.0;
  double cap = 1.0;
  double cons = 1.0;
  /// tau_b = tau_fraction * |n_tot| per window.
  double tau_fraction = 0.01;
};

struct LossComponents {
  double total = 0.0;
  double mae = 0.0;
  double nll = 0.0;
  double cap = 0.0;
  double cons = 0.0;
};

/// Loss terms and their gradients with respect to mu and log-variance.
/// MAE and NLL average over non-missing targets; the capacity hinge over all
/// N*F outputs; the conservation hinge over windows using the p = 1 column.
/// NLL drops the constant: 0.5 * (log s^2 + r^2 / s^2).
LossComponents composite_loss(const Eigen::MatrixXd& mu, const Eigen::MatrixXd& log_var,
                              const WindowBatch& batch, const LossConfig& weights,
                              Eigen::MatrixXd* d_mu = nullptr, Eigen::MatrixXd* d_log_var = nullptr);

LossComponents composite_loss(const Prediction& pred, const WindowBatch& batch,
                              const LossConfig& weights);

/// Adjacency used for message passing: A_ij = 1 for an edge i -> j,
/// row-normalised unless `raw`.
ad::SparseRowMatrix message_operator(const RoadNetwork& net, bool raw);

/// GELU(LN(A H W_n + H W_s + H W_r)) applied to `blocks` stacked N-row blocks.
struct SpatialLayerVars {
  ad::Var wn, ws, wr, gamma, beta;
};
ad::Var spatial_layer(ad::Var h, const ad::SparseRowMatrix& a, int blocks, const SpatialLayerVars& p);

/// Z + MHA(LN(Z)), then + FFN(LN(.)), over `groups` sequences of `len` rows.
struct TemporalBlockVars {
  ad::Var ln1_gamma, ln1_beta, wq, wk, wv, wo;
  ad::Var ln2_gamma, ln2_beta, w1, b1, w2, b2;
};
ad::Var temporal_block(ad::Var z, int groups, int len, int heads, const TemporalBlockVars& p,
                       std::vector<ad::Matrix>* attention = nullptr);

struct GradientResult {
  LossComponents loss;
  std::vector<ad::Matrix> grads;  // aligned with ModelParams order
};

class Predictor {
 public:
  Predictor(ModelConfig config, const RoadNetwork& net, ModelParams params);

  const ModelConfig& config() const { return config_; }
  const ModelParams& params() const { return params_; }
  ModelParams& params() { return params_; }
  const ad::SparseRowMatrix& adjacency() const { return adjacency_; }
  int segments() const { return segments_; }

  Prediction forward(const WindowBatch& batch, std::vector<ad::Matrix>* attention = nullptr) const;
  LossComponents loss(const WindowBatch& batch, const LossConfig& weights) const;
  /// Exact reverse-mode gradients. Throws TrainingError naming the first
  /// non-finite activation stage or parameter.
  GradientResult gradients(const WindowBatch& batch, const LossConfig& weights) const;

 private:
  struct Outputs {
    ad::Var mu_head;
    ad::Var log_var;
  };
  Outputs build(ad::Tape& tape, const WindowBatch& batch, bool trainable,
                std::vector<ad::Var>* param_vars, std::vector<ad::Matrix>* attention) const;

  ModelConfig config_;
  int segments_;
  ad::SparseRowMatrix adjacency_;
  ModelParams params_;
};

/// Raw inputs the windows are cut from. `counts` holds raw probe counts
/// (N x T, NaN = missing) used for targets; `n_b`, if non-empty, gives the
/// boundary net flow between t and t+1 (length T). When empty it is the
/// realised change in the network total.
struct WindowSource {
  const FeatureTensor* tensor = nullptr;
  Eigen::MatrixXd counts;
  Eigen::VectorXd n_b;
};

/// Window ending at column t for each t in `ends`. Targets beyond the last
/// column are NaN.
WindowBatch make_batch(const WindowSource& source, const RoadNetwork& net, const ModelConfig& config,
                       const std::vector<int>& ends);

struct TrainConfig {
  double learning_rate = 1e-3;
  double clip_norm = 5.0;
  int batch_windows = 8;
  int max_epochs = 30;
  /// Early stopping patience in epochs.
  int patience = 5;
  double validation_fraction = 0.2;
  /// Only windows whose targets end before this column are used; all when <= 0.
  int bin_limit = 0;
  /// Stop after this many optimizer steps; unlimited when <= 0.
  int max_steps = 0;
  LossConfig loss;
};

struct TrainLogRow {
  int step = 0;
  int epoch = 0;
  LossComponents train;
  double validation = 0.0;  // NaN when not evaluated at this step
};

struct TrainResult {
  ModelParams params;
  std::vector<TrainLogRow> log;
  int best_epoch = 0;
  double best_validation = 0.0;
  std::size_t train_windows = 0;
  std::size_t validation_windows = 0;
};

/// Adam with global-norm clipping over chronologically split windows;
/// returns the parameters with the lowest validation loss.
TrainResult train(const WindowSource& source, const RoadNetwork& net, const ModelConfig& config,
                  const TrainConfig& options);

/// Writes the training log as CSV (step, epoch, total, mae, nll, cap, cons, validation).
void save_train_log(const std::vector<TrainLogRow>& log, const std::filesystem::path& path);

/// Predictions made at column t - p for column t, p in 1..F. Columns with no
/// complete history are NaN.
struct SeriesPrediction {
  std::vector<Eigen::MatrixXd> q_hat;  // per horizon p-1, N x T
  std::vector<Eigen::MatrixXd> sigma;
};
SeriesPrediction predict_series(const Predictor& model, const WindowSource& source,
                                const RoadNetwork& net, int chunk_windows = 32);

/// Binary named arrays to `path`, config and count scale to `path`.json.
void save_checkpoint(const ModelConfig& config, const ModelParams& params,
                     const std::filesystem::path& path);
std::pair<ModelConfig, ModelParams> load_checkpoint(const std::filesystem::path& path);

}  // namespace trafficfuse
