// trafficfuse <subcommand> --config <path> [--seed n] [--out dir]
//
// Stage subcommands read the artifacts of earlier stages from --out and
// write their own next to them; `run` does everything in one process.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "trafficfuse/csv.hpp"
#include "trafficfuse/error.hpp"
#include "trafficfuse/harness.hpp"

namespace fs = std::filesystem;
using namespace trafficfuse;

namespace {

struct Options {
  fs::path config;
  std::optional<std::uint64_t> seed;
  fs::path out = "out";
};

ExperimentConfig load(const Options& o) {
  ExperimentConfig c = load_config(o.config);
  if (o.seed) c.seed = *o.seed;
  return c;
}

Predictor load_model(const SimulationStage& sim, const fs::path& dir) {
  auto [config, params] = load_checkpoint(dir / "model.ckpt");
  return Predictor(config, sim.net, std::move(params));
}

void print_metrics(const MetricsReport& cal, const MetricsReport& raw) {
  auto show = [](const std::optional<double>& v) { return v ? std::to_string(*v) : std::string("n/a"); };
  std::printf("validation samples %d\n", cal.samples);
  std::printf("calibrated   MAE %.3f  RMSE %.3f  R2 %s  r %s  coverage %s\n", cal.mae, cal.rmse,
              show(cal.pooled_r2).c_str(), show(cal.pooled_r).c_str(), show(cal.coverage).c_str());
  std::printf("uncalibrated MAE %.3f  RMSE %.3f  R2 %s  r %s\n", raw.mae, raw.rmse, show(raw.pooled_r2).c_str(),
              show(raw.pooled_r).c_str());
}

int dispatch(const std::string& cmd, const Options& o) {
  const ExperimentConfig config = load(o);
  const fs::path& dir = o.out;
  fs::create_directories(dir);

  if (cmd == "run") {
    const auto t0 = std::chrono::steady_clock::now();
    const PipelineResult r = run_pipeline(config, dir);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    print_metrics(r.calibrated_metrics, r.predictor_metrics);
    std::printf("pipeline finished in %.1f s; artifacts in %s\n", secs, dir.string().c_str());
    return 0;
  }
  if (cmd == "simulate") {
    const SimulationStage sim = run_simulation(config);
    save_simulation(sim, config, dir);
    std::printf("simulated %d segments x %d bins\n", sim.net.size(), sim.truth.bins());
    return 0;
  }

  const SimulationStage sim = load_simulation(config, dir);
  if (cmd == "observability") {
    const SampleStage sample = load_sample(sim, dir);
    const ObservabilityReport rep = run_observability(config, sim, sample);
    save_observability(rep, sim.net, dir / "observability.json", dir / "observability.csv");
    for (const auto& reg : rep.regimes) {
      std::printf("%s: rank %d, gamma_rank %.3f, spectral radius %.4f\n", reg.regime.c_str(), reg.rank,
                  reg.gamma_rank, reg.spectral_radius);
    }
    return 0;
  }
  if (cmd == "evaluate") {
    const CalibrationStage cal = load_calibration(sim, dir);
    const MetricsReport calibrated = evaluate_calibrated(config, sim, cal);
    const MetricsReport raw = evaluate_predictor(config, sim, cal);
    csv::write_atomic(dir / "metrics.json", metrics_json(config, calibrated, raw));
    print_metrics(calibrated, raw);
    return 0;
  }
  if (cmd == "sample") {
    const SampleStage sample = run_sampling(config, sim);
    save_sample(sample, sim, config, dir);
    std::printf("probe share of truth %.4f\n", sample.probe_counts.values.sum() / sim.truth.values.sum());
    return 0;
  }

  const SampleStage sample = load_sample(sim, dir);
  if (cmd == "features") {
    const FeatureTensor tensor = run_features(config, sim, sample);
    tensor.save(dir / "features.bin");
    std::printf("feature tensor %d x %d x %d\n", tensor.segments(), tensor.bins(), kFeatureWidth);
    return 0;
  }

  const FeatureTensor tensor = FeatureTensor::load(dir / "features.bin");
  if (cmd == "train") {
    const TrainResult r = run_training(config, sim, sample, tensor);
    ModelConfig model = config.model;
    model.seed = stage_seed(config.seed, "model");
    save_checkpoint(model, r.params, dir / "model.ckpt");
    save_train_log(r.log, dir / "train_log.csv");
    std::printf("trained %zu steps; best epoch %d, validation loss %.5f\n", r.log.size(), r.best_epoch,
                r.best_validation);
    return 0;
  }
  if (cmd == "calibrate") {
    const Predictor model = load_model(sim, dir);
    const CalibrationStage cal = run_calibration(config, sim, sample, tensor, model);
    save_calibration(cal, sim, config, dir);
    std::printf("%d analysis steps; initial calibration level %.4f\n", cal.analysis_steps, std::exp(cal.log_alpha0));
    return 0;
  }
  throw ParameterError("unknown subcommand '" + cmd + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Camera-calibrated traffic volume estimation from probe data"};
  app.require_subcommand(1);
  Options opts;
  std::uint64_t seed = 0;

  const char* commands[][2] = {
      {"simulate", "Simulate ground-truth counts on the configured network"},
      {"sample", "Thin truth into probe data and record camera counts"},
      {"features", "Build the normalised feature tensor"},
      {"train", "Train the spatio-temporal predictor"},
      {"calibrate", "Run the ensemble calibration filter over the horizon"},
      {"observability", "Linearise the network and report camera observability"},
      {"evaluate", "Score calibrated counts on the validation cameras"},
      {"run", "Run the full pipeline"},
  };
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c[0], c[1]);
    sub->add_option("--config", opts.config, "Experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "Override the global seed");
    sub->add_option("--out", opts.out, "Artifact directory")->capture_default_str();
  }
  CLI11_PARSE(app, argc, argv);

  const CLI::App* chosen = app.get_subcommands().front();
  if (chosen->count("--seed") > 0) opts.seed = seed;
  try {
    return dispatch(chosen->get_name(), opts);
  } catch (const StageError& e) {
    std::cerr << "trafficfuse: stage " << e.stage() << " failed: " << e.what() << '\n';
    return 3;
  } catch (const ParseError& e) {
    std::cerr << "trafficfuse: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "trafficfuse: " << e.what() << '\n';
    return 1;
  }
}
