#pragma once

#include "setseg/attention.hpp"
#include "setseg/autograd.hpp"
#include "setseg/geometry.hpp"
#include "setseg/mask_codec.hpp"

#include <string>
#include <vector>

namespace setseg {

/// Small convolutional stack standing in for a pretrained backbone:
///   stem:    3x3 conv, 1 -> stem_channels, stride 1, GELU
///   level 0: 3x3 conv, stem_channels -> channels, stride 2, GELU
///   level i: 3x3 conv, channels -> channels, stride 2, GELU (i >= 1)
/// Parameters live under "backbone." in the model store.
struct BackboneConfig {
  int channels = 64;
  int stem_channels = 16;
  int levels = 2;
};

void init_backbone_params(ad::ParamStore& store, const BackboneConfig& cfg, Rng& rng);

/// `image` is (height*width) x 1.
ad::PyramidVars backbone_forward(ad::Var image, int height, int width, ad::ParamBinder& params,
                                 const BackboneConfig& cfg);

std::vector<FeatureMap> backbone_pyramid(const Raster& image, const ad::ParamStore& params, const BackboneConfig& cfg);

/// Source of feature pyramids for the refinement loop.
class FeatureProvider {
 public:
  virtual ~FeatureProvider() = default;
  virtual std::vector<FeatureMap> pyramid(size_t image_index, const Raster& image) const = 0;
};

class ConvFeatureProvider : public FeatureProvider {
 public:
  ConvFeatureProvider(ad::ParamStore params, BackboneConfig cfg) : params_(std::move(params)), cfg_(cfg) {}
  std::vector<FeatureMap> pyramid(size_t image_index, const Raster& image) const override;

 private:
  ad::ParamStore params_;
  BackboneConfig cfg_;
};

/// Precomputed pyramids, one container file per image.
class FileFeatureProvider : public FeatureProvider {
 public:
  explicit FileFeatureProvider(std::vector<std::string> paths) : paths_(std::move(paths)) {}
  std::vector<FeatureMap> pyramid(size_t image_index, const Raster& image) const override;

 private:
  std::vector<std::string> paths_;
};

/// Tensors "level0", "level1", ... of shape [height, width, channels], f64.
void save_pyramid(const std::string& path, const std::vector<FeatureMap>& pyramid);
std::vector<FeatureMap> load_pyramid(const std::string& path);

}  // namespace setseg
