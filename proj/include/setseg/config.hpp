#pragma once

#include "setseg/dataset.hpp"
#include "setseg/losses.hpp"
#include "setseg/refine.hpp"
#include "setseg/train.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>

namespace setseg {

struct CodecConfig {
  int side = kDefaultMaskSide;  // s
  bool center = false;
};

struct DataConfig {
  ShapesConfig shapes{7};
  int num_images = 20;
  // When set, annotations are loaded from this file instead of generated.
  std::string annotations;
};

/// Everything a toy run depends on. The embedding dimension l lives in
/// model.embedding_dim and the token width d in model.encoder.dim; the
/// backbone width always follows d.
struct ToyConfig {
  std::uint64_t seed = 0;  // training shuffle; model init uses seed + 1
  ModelConfig model;
  CodecConfig codec;
  TrainConfig train;
  DataConfig data;
  EvalConfig eval;
  int log_every = 50;  // metrics.jsonl cadence in optimizer steps

  void validate() const;
};

/// Reads a config document. Every key is optional; unknown keys and values
/// of the wrong type throw DataError naming the offending key.
ToyConfig parse_config(const nlohmann::json& doc);
ToyConfig load_config(const std::string& path);
/// Complete document with every key, accepted back by parse_config.
nlohmann::json config_to_json(const ToyConfig& cfg);

}  // namespace setseg
