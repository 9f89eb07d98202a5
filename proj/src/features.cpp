#include "setseg/features.hpp"

#include "setseg/tensor_io.hpp"

namespace setseg {

namespace {

std::string conv_name(int i) { return "backbone.conv" + std::to_string(i); }

void add_conv(ad::ParamStore& store, const std::string& name, int in, int out, Rng& rng) {
  const int fan_in = 9 * in;
  store[name + ".w"] = rng.normal_matrix(fan_in, out, std::sqrt(2.0 / fan_in));
  store[name + ".b"] = Matrix::Zero(1, out);
}

}  // namespace

void init_backbone_params(ad::ParamStore& store, const BackboneConfig& cfg, Rng& rng) {
  if (cfg.levels < 1 || cfg.channels < 1 || cfg.stem_channels < 1) throw std::invalid_argument("backbone: bad config");
  add_conv(store, conv_name(0), 1, cfg.stem_channels, rng);
  add_conv(store, conv_name(1), cfg.stem_channels, cfg.channels, rng);
  for (int l = 1; l < cfg.levels; ++l) add_conv(store, conv_name(l + 1), cfg.channels, cfg.channels, rng);
}

ad::PyramidVars backbone_forward(ad::Var image, int height, int width, ad::ParamBinder& p, const BackboneConfig& cfg) {
  ad::PyramidVars out;
  ad::ConvShape shape{height, width, 3, 1, 1};
  ad::Var x = ad::gelu(ad::conv2d(image, p(conv_name(0) + ".w"), p(conv_name(0) + ".b"), shape));
  for (int l = 0; l < cfg.levels; ++l) {
    shape = {shape.out_height(), shape.out_width(), 3, 2, 1};
    x = ad::gelu(ad::conv2d(x, p(conv_name(l + 1) + ".w"), p(conv_name(l + 1) + ".b"), shape));
    out.levels.push_back(x);
    out.shapes.emplace_back(shape.out_height(), shape.out_width());
  }
  return out;
}

std::vector<FeatureMap> backbone_pyramid(const Raster& image, const ad::ParamStore& params, const BackboneConfig& cfg) {
  ad::Tape tape;
  ad::ParamBinder binder(tape, params, false);
  Matrix pixels = Eigen::Map<const Matrix>(image.data.data(), static_cast<Eigen::Index>(image.data.size()), 1);
  ad::PyramidVars vars = backbone_forward(tape.constant(pixels), image.height, image.width, binder, cfg);
  std::vector<FeatureMap> levels;
  for (size_t i = 0; i < vars.levels.size(); ++i) {
    levels.emplace_back(vars.shapes[i].first, vars.shapes[i].second, vars.levels[i].value());
  }
  return levels;
}

std::vector<FeatureMap> ConvFeatureProvider::pyramid(size_t, const Raster& image) const {
  return backbone_pyramid(image, params_, cfg_);
}

std::vector<FeatureMap> FileFeatureProvider::pyramid(size_t image_index, const Raster&) const {
  if (image_index >= paths_.size()) throw DataError("no precomputed pyramid for image " + std::to_string(image_index));
  return load_pyramid(paths_[image_index]);
}

void save_pyramid(const std::string& path, const std::vector<FeatureMap>& pyramid) {
  TensorContainer c;
  for (size_t i = 0; i < pyramid.size(); ++i) {
    const FeatureMap& fm = pyramid[i];
    c.set("level" + std::to_string(i), Tensor::from_f64({fm.height, fm.width, fm.channels}, fm.values.data()));
  }
  c.save(path);
}

std::vector<FeatureMap> load_pyramid(const std::string& path) {
  const TensorContainer c = TensorContainer::load(path);
  std::vector<FeatureMap> out;
  for (size_t i = 0;; ++i) {
    const std::string name = "level" + std::to_string(i);
    if (!c.contains(name)) break;
    const Tensor& t = c.get(name);
    if (t.shape.size() != 3) throw DataError("pyramid level '" + name + "' must have shape [h, w, d]");
    out.emplace_back(static_cast<int>(t.shape[0]), static_cast<int>(t.shape[1]), t.to_matrix());
  }
  if (out.empty()) throw DataError("'" + path + "' holds no pyramid levels");
  return out;
}

}  // namespace setseg
