#pragma once

#include "setseg/autograd.hpp"
#include "setseg/dataset.hpp"
#include "setseg/refine.hpp"

#include <functional>
#include <string>
#include <vector>

namespace setseg {

struct OptimizerConfig {
  double lr = 2.5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double clip_norm = 1.0;  // global gradient norm; <= 0 disables clipping
};

double global_norm(const ad::ParamStore& grads);

/// Adam with decoupled weight decay and global-norm gradient clipping.
class AdamW {
 public:
  explicit AdamW(OptimizerConfig cfg = {}) : cfg_(cfg) {}

  /// Updates every parameter that has a gradient entry and is not frozen.
  /// Returns the gradient norm before clipping.
  double step(ad::ParamStore& params, const ad::ParamStore& grads,
              const std::function<bool(const std::string&)>& frozen = {});

  int steps() const { return t_; }
  const OptimizerConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

 private:
  OptimizerConfig cfg_;
  int t_ = 0;
  ad::ParamStore m_, v_;
};

/// One training image with cached ground truth.
struct TrainExample {
  Raster image;
  GroundTruthSet gt;              // codec frame
  std::vector<Raster> gt_masks;   // image space, aligned with gt
  std::vector<FeatureMap> pyramid;  // cached when the backbone is frozen
};

std::vector<TrainExample> make_examples(const Dataset& ds, int mask_side);

struct TrainConfig {
  OptimizerConfig optimizer{1e-3, 0.9, 0.999, 1e-8, 1e-4, 1.0};
  int steps = 2000;
  // Step decay: the learning rate is multiplied by lr_decay once each of
  // these fractions of `steps` has passed (27/36 and 33/36 of the schedule).
  std::vector<double> lr_milestones{0.75, 33.0 / 36.0};
  double lr_decay = 0.1;
  int batch_size = 4;
  std::uint64_t seed = 0;
  int threads = 1;
  bool train_backbone = false;
  bool train_queries = true;
  // Start the mask-head bias at the mean ground-truth embedding.
  bool init_mask_bias = true;
  SetLossConfig loss;
};

struct StepMetrics {
  int step = 0;
  double loss = 0.0;  // batch mean of the stage-summed loss
  std::vector<double> stage_loss;
  double grad_norm = 0.0;
};

class Trainer {
 public:
  Trainer(ModelConfig model, TrainConfig cfg, MaskCodec codec, ad::ParamStore params, std::vector<TrainExample> data);

  /// One optimizer step on the next mini-batch of the shuffled order.
  StepMetrics step();
  /// Steps until every example has been visited once.
  std::vector<StepMetrics> train_epoch();

  const ad::ParamStore& params() const { return params_; }
  const std::vector<TrainExample>& examples() const { return data_; }
  const ModelConfig& model() const { return model_; }
  const MaskCodec& codec() const { return codec_; }
  const TrainConfig& config() const { return cfg_; }
  int steps_done() const { return optimizer_.steps(); }
  /// Learning rate applied at 1-based optimizer step `step`.
  double scheduled_lr(int step) const;

  /// Pyramid of one example under the current backbone.
  std::vector<FeatureMap> pyramid(size_t index) const;

 private:
  struct ImageResult {
    double loss = 0.0;
    std::vector<double> stage_loss;
    ad::ParamStore grads;
  };
  ImageResult run_image(size_t index) const;
  std::vector<size_t> next_batch();

  ModelConfig model_;
  TrainConfig cfg_;
  MaskCodec codec_;
  ad::ParamStore params_;
  std::vector<TrainExample> data_;
  AdamW optimizer_;
  Rng rng_;
  std::vector<size_t> order_;
  size_t cursor_ = 0;
};

struct EvalConfig {
  double score_threshold = 0.5;  // predictions below are ignored by the best-IoU metrics
  double high_score = 0.5;       // duplicate count: predictions above this score...
  double duplicate_iou = 0.5;    // ...whose box IoU with a ground truth reaches this
};

struct EvalMetrics {
  double mean_loss = 0.0;  // stage-summed set loss averaged over images
  std::vector<double> stage_loss;
  double mean_best_mask_iou = 0.0;
  double mean_best_box_iou = 0.0;
  std::vector<double> stage_box_iou;  // mean matched-box IoU per stage
  int num_gt = 0;
  int max_high_score_per_gt = 0;
  double mean_high_score_per_gt = 0.0;
  int min_predictions = 0;  // fewest predictions emitted for any image
  int max_predictions = 0;
};

EvalMetrics evaluate(const std::vector<TrainExample>& data, const std::function<std::vector<FeatureMap>(size_t)>& pyramid,
                     const ad::ParamStore& params, const ModelConfig& model, const MaskCodec& codec,
                     const SetLossConfig& loss, const EvalConfig& eval = {});
EvalMetrics evaluate(const Trainer& trainer, const EvalConfig& eval = {});

}  // namespace setseg
