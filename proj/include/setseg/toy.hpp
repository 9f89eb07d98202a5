#pragma once

#include "setseg/config.hpp"
#include "setseg/train.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <memory>

namespace setseg {

/// Dataset, codec and initial parameters of a toy run, all derived from the
/// config alone.
struct ToySetup {
  Dataset dataset;
  MaskCodec codec;
  ad::ParamStore params;
  int empty_instances = 0;  // left out of the codec fit
};

/// Generated shapes, or the annotation file named in the config.
Dataset toy_dataset(const DataConfig& cfg);

/// Generates (or loads) the data, fits the codec on every instance mask and
/// initializes the model with Rng(seed + 1).
ToySetup make_toy(const ToyConfig& cfg);
std::unique_ptr<Trainer> make_trainer(const ToyConfig& cfg, const ToySetup& setup);

nlohmann::json metrics_to_json(const EvalMetrics& m);
nlohmann::json step_to_json(const StepMetrics& m);

struct ToyRunResult {
  EvalMetrics initial;
  EvalMetrics final;
  std::vector<StepMetrics> log;  // every log_every-th step and the last one
};

/// Trains for cfg.train.steps optimizer steps. `on_log` sees each logged step.
ToyRunResult run_toy(const ToyConfig& cfg, Trainer& trainer,
                     const std::function<void(const StepMetrics&)>& on_log = {});

}  // namespace setseg
