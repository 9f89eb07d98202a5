#include "setseg/toy.hpp"

namespace setseg {

Dataset toy_dataset(const DataConfig& cfg) {
  return cfg.annotations.empty() ? gen_shapes(cfg.shapes, cfg.num_images) : load_dataset(cfg.annotations, true);
}

ToySetup make_toy(const ToyConfig& cfg) {
  cfg.validate();
  ToySetup s;
  s.dataset = toy_dataset(cfg.data);
  if (static_cast<int>(s.dataset.categories.size()) > cfg.model.num_classes) {
    throw DataError("dataset has more categories than model.num_classes");
  }
  const std::vector<Mask> masks = instance_masks(s.dataset, cfg.codec.side, &s.empty_instances);
  if (masks.empty()) throw DataError("dataset has no non-empty instance masks");
  s.codec = fit_codec(masks, cfg.model.embedding_dim, cfg.codec.center);
  Rng rng(cfg.seed + 1);
  s.params = init_model_params(cfg.model, rng);
  return s;
}

std::unique_ptr<Trainer> make_trainer(const ToyConfig& cfg, const ToySetup& setup) {
  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  return std::make_unique<Trainer>(cfg.model, tc, setup.codec, setup.params, make_examples(setup.dataset, cfg.codec.side));
}

nlohmann::json metrics_to_json(const EvalMetrics& m) {
  return {{"mean_loss", m.mean_loss},
          {"stage_loss", m.stage_loss},
          {"mean_best_mask_iou", m.mean_best_mask_iou},
          {"mean_best_box_iou", m.mean_best_box_iou},
          {"stage_box_iou", m.stage_box_iou},
          {"num_gt", m.num_gt},
          {"max_high_score_per_gt", m.max_high_score_per_gt},
          {"mean_high_score_per_gt", m.mean_high_score_per_gt},
          {"min_predictions", m.min_predictions},
          {"max_predictions", m.max_predictions}};
}

nlohmann::json step_to_json(const StepMetrics& m) {
  return {{"step", m.step}, {"loss", m.loss}, {"stage_loss", m.stage_loss}, {"grad_norm", m.grad_norm}};
}

ToyRunResult run_toy(const ToyConfig& cfg, Trainer& trainer, const std::function<void(const StepMetrics&)>& on_log) {
  ToyRunResult r;
  r.initial = evaluate(trainer, cfg.eval);
  for (int s = 1; s <= cfg.train.steps; ++s) {
    const StepMetrics m = trainer.step();
    if (!std::isfinite(m.loss)) throw NumericalError("training loss became non-finite at step " + std::to_string(s));
    if (s % cfg.log_every == 0 || s == cfg.train.steps) {
      r.log.push_back(m);
      if (on_log) on_log(m);
    }
  }
  r.final = evaluate(trainer, cfg.eval);
  return r;
}

}  // namespace setseg
