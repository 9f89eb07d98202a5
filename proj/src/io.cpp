#include "setseg/io.hpp"

#include <filesystem>
#include <fstream>

namespace setseg {

namespace {

namespace fs = std::filesystem;

Matrix get_matrix(const TensorContainer& c, const std::string& name, int rank) {
  const Tensor& t = c.get(name);
  if (static_cast<int>(t.shape.size()) != rank) {
    throw DataError("tensor '" + name + "' must have rank " + std::to_string(rank));
  }
  return t.to_matrix();
}

Tensor vector_tensor(const Vector& v) { return Tensor::from_f64({v.size()}, v.data()); }

Vector get_vector(const TensorContainer& c, const std::string& name) {
  const Tensor& t = c.get(name);
  if (t.shape.size() != 1) throw DataError("tensor '" + name + "' must have rank 1");
  const std::vector<double> v = t.to_f64();
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

TensorContainer codec_to_container(const MaskCodec& codec) {
  TensorContainer c;
  c.set("basis", Tensor::from_matrix(codec.basis()));
  c.set("spectrum", vector_tensor(codec.spectrum()));
  c.set("side", Tensor::scalar(codec.side()));
  if (codec.mean()) c.set("mean", vector_tensor(*codec.mean()));
  return c;
}

MaskCodec codec_from_container(const TensorContainer& c) {
  const double side = c.get("side").to_scalar();
  if (side < 1.0 || side != std::floor(side)) throw DataError("codec: bad side");
  std::optional<Vector> mean;
  if (c.contains("mean")) mean = get_vector(c, "mean");
  return MaskCodec(static_cast<int>(side), get_matrix(c, "basis", 2), std::move(mean), get_vector(c, "spectrum"));
}

void save_codec(const std::string& path, const MaskCodec& codec) { codec_to_container(codec).save(path); }

MaskCodec load_codec(const std::string& path) { return codec_from_container(TensorContainer::load(path)); }

TensorContainer params_to_container(const ad::ParamStore& params) {
  TensorContainer c;
  for (const auto& [name, m] : params) c.set(name, Tensor::from_matrix(m));
  return c;
}

ad::ParamStore params_from_container(const TensorContainer& c) {
  ad::ParamStore params;
  for (const auto& [name, t] : c.tensors()) {
    if (t.shape.size() != 2) throw DataError("parameter '" + name + "' must have rank 2");
    params[name] = t.to_matrix();
    if (params[name].size() == 0) params[name].resize(t.shape[0], t.shape[1]);
  }
  return params;
}

void save_checkpoint(const std::string& dir, const ad::ParamStore& params, const MaskCodec& codec,
                     const nlohmann::json& config, int steps) {
  fs::create_directories(dir);
  params_to_container(params).save((fs::path(dir) / "params.bin").string());
  save_codec((fs::path(dir) / "codec.bin").string(), codec);
  nlohmann::json shapes = nlohmann::json::object();
  for (const auto& [name, m] : params) shapes[name] = {m.rows(), m.cols()};
  const nlohmann::json manifest{{"steps", steps}, {"config", config}, {"parameters", shapes}};
  std::ofstream out(fs::path(dir) / "manifest.json");
  if (!out) throw DataError("cannot write checkpoint manifest in '" + dir + "'");
  out << manifest.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::string& dir) {
  Checkpoint ck;
  ck.params = params_from_container(TensorContainer::load((fs::path(dir) / "params.bin").string()));
  ck.codec = load_codec((fs::path(dir) / "codec.bin").string());
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw DataError("checkpoint '" + dir + "' has no manifest.json");
  try {
    ck.manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint manifest: " + std::string(e.what()));
  }
  return ck;
}

TensorContainer ground_truth_to_container(const GroundTruthSet& gt) {
  const auto n = static_cast<int64_t>(gt.size());
  const int side = gt.masks.empty() ? 0 : gt.masks.front().side();
  std::vector<double> boxes, classes, masks;
  for (size_t i = 0; i < gt.size(); ++i) {
    for (double v : gt.boxes[i].as_array()) boxes.push_back(v);
    classes.push_back(gt.classes[i]);
    if (gt.masks[i].side() != side) throw DataError("ground-truth masks differ in size");
    masks.insert(masks.end(), gt.masks[i].values().begin(), gt.masks[i].values().end());
  }
  TensorContainer c;
  c.set("boxes", Tensor::from_f64({n, 4}, boxes.data()));
  c.set("classes", Tensor::from_f64({n}, classes.data()));
  c.set("masks", Tensor::from_f64({n, side, side}, masks.data()));
  return c;
}

GroundTruthSet ground_truth_from_container(const TensorContainer& c) {
  const Tensor& bt = c.get("boxes");
  const Tensor& ct = c.get("classes");
  const Tensor& mt = c.get("masks");
  if (bt.shape.size() != 2 || bt.shape[1] != 4) throw DataError("ground truth 'boxes' must be [n, 4]");
  const int64_t n = bt.shape[0];
  if (ct.shape != std::vector<int64_t>{n}) throw DataError("ground truth 'classes' must be [n]");
  if (mt.shape.size() != 3 || mt.shape[0] != n || mt.shape[1] != mt.shape[2]) {
    throw DataError("ground truth 'masks' must be [n, s, s]");
  }
  const std::vector<double> b = bt.to_f64(), cls = ct.to_f64(), m = mt.to_f64();
  const int side = static_cast<int>(mt.shape[1]);
  const size_t area = static_cast<size_t>(side) * side;
  GroundTruthSet gt;
  for (int64_t i = 0; i < n; ++i) {
    const auto u = static_cast<size_t>(i);
    gt.boxes.push_back(BBox::from_array({b.data() + 4 * u, 4}));
    if (cls[u] != std::floor(cls[u])) throw DataError("ground truth classes must be integers");
    gt.classes.push_back(static_cast<int>(cls[u]));
    gt.masks.emplace_back(side, Eigen::Map<const Vector>(m.data() + u * area, static_cast<Eigen::Index>(area)));
  }
  return gt;
}

TensorContainer predictions_to_container(const PredictionSet& pred) {
  const auto k = static_cast<int64_t>(pred.size());
  std::vector<double> boxes;
  for (const BBox& b : pred.boxes) {
    for (double v : b.as_array()) boxes.push_back(v);
  }
  TensorContainer c;
  c.set("boxes", Tensor::from_f64({k, 4}, boxes.data()));
  c.set("probs", Tensor::from_f64({k, pred.probs.cols()}, pred.probs.data()));
  c.set("embeddings", Tensor::from_f64({k, pred.embeddings.cols()}, pred.embeddings.data()));
  return c;
}

PredictionSet predictions_from_container(const TensorContainer& c) {
  const Tensor& bt = c.get("boxes");
  const Tensor& pt = c.get("probs");
  const Tensor& et = c.get("embeddings");
  if (bt.shape.size() != 2 || bt.shape[1] != 4) throw DataError("prediction 'boxes' must be [k, 4]");
  const int64_t k = bt.shape[0];
  if (pt.shape.size() != 2 || pt.shape[0] != k || pt.shape[1] < 2) throw DataError("prediction 'probs' must be [k, C+1]");
  if (et.shape.size() != 2 || et.shape[0] != k) throw DataError("prediction 'embeddings' must be [k, l]");
  PredictionSet pred;
  const Matrix boxes = bt.to_matrix();
  for (int64_t j = 0; j < k; ++j) pred.boxes.push_back({boxes(j, 0), boxes(j, 1), boxes(j, 2), boxes(j, 3)});
  pred.probs = pt.to_matrix();
  pred.embeddings = et.to_matrix();
  pred.validate();
  return pred;
}

}  // namespace setseg
