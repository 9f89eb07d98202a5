#pragma once

#include "setseg/attention.hpp"
#include "setseg/autograd.hpp"
#include "setseg/features.hpp"
#include "setseg/geometry.hpp"
#include "setseg/losses.hpp"
#include "setseg/mask_codec.hpp"
#include "setseg/matching.hpp"

#include <vector>

namespace setseg {

enum class QueryInit {
  kFullImage,  // every query covers the whole image
  kGrid,       // queries tile the image in a near-square grid
};

struct ModelConfig {
  int num_queries = 10;  // k
  int stages = 2;        // N
  int num_classes = 3;   // C; the class head emits C + 1 logits
  int embedding_dim = 20;
  EncoderConfig encoder;  // d and t live here
  BackboneConfig backbone;
  int sampling_ratio = 2;
  LevelRule level_rule{64.0, 32.0, 1};
  Pooling pooling = Pooling::kAvg;
  bool position_embedding = true;
  int box_hidden_layers = 3;
  double delta_clamp = kDefaultDeltaClamp;
  QueryInit query_init = QueryInit::kFullImage;
  // Query coordinates are stored as logits; exact 0/1 extents are pulled in
  // by this margin so their logits stay finite.
  double query_logit_eps = 1e-3;

  RoiAlignOptions roi() const { return {encoder.roi_size, sampling_ratio, true}; }
  /// Throws std::invalid_argument on inconsistent sizes.
  void validate() const;
};

std::string stage_prefix(int stage);

std::vector<BBox> init_queries(int k, QueryInit mode = QueryInit::kFullImage);

/// Every parameter of the model, including "queries" (k x 4 center-form
/// logits), "pos_embed" (k x d), the backbone and one encoder plus heads per
/// stage under "stage<i>.". Box-head output layers start at zero so the
/// initial deltas vanish.
ad::ParamStore init_model_params(const ModelConfig& cfg, Rng& rng);

/// Sets every stage's mask-head bias (e.g. to the mean training embedding).
void set_mask_bias(ad::ParamStore& params, const ModelConfig& cfg, const Vector& bias);

/// Inverse of the query parameterization: center-form logits of the boxes.
Matrix query_logits(const std::vector<BBox>& boxes, double eps);
/// Current query boxes B^0 decoded from the stored logits.
std::vector<BBox> query_boxes(const ad::ParamStore& params);

Matrix boxes_to_matrix(const std::vector<BBox>& boxes);
std::vector<BBox> matrix_to_boxes(const Matrix& m);

namespace ad {

/// k x 4 corner boxes from the "queries" logits: sigmoid, center to corner,
/// clamp to the unit square.
Var query_boxes(ParamBinder& params);

/// Row-wise apply_box_delta with its analytic Jacobian.
Var apply_box_delta(Var boxes, Var deltas, double clamp);

/// Set loss of one stage as a scalar node; gradients flow into the boxes,
/// class probabilities and embeddings.
Var set_loss(Var boxes, Var probs, Var embeddings, const GroundTruthSet& gt, const Assignment& assignment,
             const MaskCodec& codec, const SetLossConfig& cfg, LossBreakdown* breakdown = nullptr);

struct StageOutput {
  Var boxes_in;    // B^{i-1}
  Var logits;      // k x (C+1)
  Var probs;       // softmax of logits
  Var deltas;      // k x 4 (d_cx, d_cy, d_w, d_h)
  Var embeddings;  // k x l
  Var boxes;       // B^i
};

/// RoIAlign at B^{i-1}, encoder, heads and the box update. RoI sampling
/// positions are treated as constants: gradients reach B^{i-1} through the
/// box update only.
StageOutput refine_step(int stage, Var boxes_prev, const PyramidVars& pyramid, ParamBinder& params,
                        const ModelConfig& cfg);

struct TrainForward {
  Var loss;  // sum of the stage losses
  std::vector<StageOutput> stages;
  std::vector<LossBreakdown> losses;
  std::vector<Assignment> assignments;
};

/// All stages with per-stage matching and unit-weight loss summation.
TrainForward forward_train(const PyramidVars& pyramid, const GroundTruthSet& gt, ParamBinder& params,
                           const ModelConfig& cfg, const MaskCodec& codec, const SetLossConfig& loss_cfg);

PyramidVars constant_pyramid(Tape& tape, const std::vector<FeatureMap>& pyramid);

}  // namespace ad

PredictionSet to_prediction_set(const ad::StageOutput& out);

struct StepResult {
  PredictionSet predictions;
  std::vector<BBox> boxes;  // B^i
};

StepResult refine_step(int stage, const std::vector<BBox>& boxes, const std::vector<FeatureMap>& pyramid,
                       const ad::ParamStore& params, const ModelConfig& cfg);

struct StageTrace {
  std::vector<std::vector<BBox>> query_boxes;  // input boxes of each stage
  std::vector<PredictionSet> predictions;
  std::vector<LossBreakdown> losses;  // filled by evaluation with ground truth
};

struct InferenceResult {
  PredictionSet predictions;  // final stage, exactly k entries
  std::vector<double> scores; // max foreground probability
  std::vector<int> labels;    // argmax foreground class
  std::vector<Raster> masks;  // decoded and pasted soft masks (empty when not requested)
  StageTrace trace;
};

/// Runs `stages` refinement steps (cfg.stages when <= 0) from the stored
/// queries and returns every prediction of the last stage.
InferenceResult run_inference(const std::vector<FeatureMap>& pyramid, const ad::ParamStore& params,
                              const ModelConfig& cfg, const MaskCodec& codec, int image_height, int image_width,
                              int stages = 0, bool paste_masks = true);

}  // namespace setseg
