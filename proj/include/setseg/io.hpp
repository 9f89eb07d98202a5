#pragma once

#include "setseg/autograd.hpp"
#include "setseg/mask_codec.hpp"
#include "setseg/matching.hpp"
#include "setseg/tensor_io.hpp"

#include <nlohmann/json.hpp>

#include <string>

namespace setseg {

/// Tensors: "basis" [s*s, l], "spectrum" [r], "side" scalar and, for a
/// centered codec, "mean" [s*s]. All f64.
TensorContainer codec_to_container(const MaskCodec& codec);
MaskCodec codec_from_container(const TensorContainer& c);
void save_codec(const std::string& path, const MaskCodec& codec);
MaskCodec load_codec(const std::string& path);

/// One f64 tensor per parameter, named after it.
TensorContainer params_to_container(const ad::ParamStore& params);
ad::ParamStore params_from_container(const TensorContainer& c);

/// Checkpoint directory: params.bin, codec.bin and manifest.json (the
/// config, the optimizer step count and every parameter's shape).
void save_checkpoint(const std::string& dir, const ad::ParamStore& params, const MaskCodec& codec,
                     const nlohmann::json& config, int steps);
struct Checkpoint {
  ad::ParamStore params;
  MaskCodec codec;
  nlohmann::json manifest;
};
Checkpoint load_checkpoint(const std::string& dir);

/// Ground truth: "boxes" [n, 4], "classes" [n] and "masks" [n, s, s].
TensorContainer ground_truth_to_container(const GroundTruthSet& gt);
GroundTruthSet ground_truth_from_container(const TensorContainer& c);

/// Predictions: "boxes" [k, 4], "probs" [k, C+1] and "embeddings" [k, l].
TensorContainer predictions_to_container(const PredictionSet& pred);
PredictionSet predictions_from_container(const TensorContainer& c);

}  // namespace setseg
