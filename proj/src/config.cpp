#include "setseg/config.hpp"

#include <fstream>
#include <set>

namespace setseg {

namespace {

using nlohmann::json;

// Typed, strict access to one JSON object: keys not read by the time
// finish() runs are reported as unknown.
class Section {
 public:
  Section(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
    if (!doc_.is_object()) throw DataError("config: '" + label() + "' must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = doc_.find(key);
    if (it == doc_.end()) return;
    try {
      out = it->get<T>();
    } catch (const json::exception&) {
      throw DataError("config: '" + name(key) + "' has the wrong type");
    }
  }

  void get(const char* key, int& out) {
    seen_.insert(key);
    auto it = doc_.find(key);
    if (it == doc_.end()) return;
    if (!it->is_number_integer()) throw DataError("config: '" + name(key) + "' must be an integer");
    out = it->get<int>();
  }

  void get(const char* key, std::uint64_t& out) {
    seen_.insert(key);
    auto it = doc_.find(key);
    if (it == doc_.end()) return;
    if (!it->is_number_unsigned()) throw DataError("config: '" + name(key) + "' must be a non-negative integer");
    out = it->get<std::uint64_t>();
  }

  void get(const char* key, double& out) {
    seen_.insert(key);
    auto it = doc_.find(key);
    if (it == doc_.end()) return;
    if (!it->is_number()) throw DataError("config: '" + name(key) + "' must be a number");
    out = it->get<double>();
  }

  void get(const char* key, bool& out) {
    seen_.insert(key);
    auto it = doc_.find(key);
    if (it == doc_.end()) return;
    if (!it->is_boolean()) throw DataError("config: '" + name(key) + "' must be a boolean");
    out = it->get<bool>();
  }

  template <typename E, size_t N>
  void get_enum(const char* key, E& out, const std::pair<const char*, E> (&names)[N]) {
    std::string s;
    for (const auto& [n, v] : names) {
      if (v == out) s = n;
    }
    get(key, s);
    for (const auto& [n, v] : names) {
      if (s == n) {
        out = v;
        return;
      }
    }
    throw DataError("config: '" + name(key) + "' has unknown value '" + s + "'");
  }

  bool has(const char* key) const { return doc_.contains(key); }

  Section child(const char* key) {
    seen_.insert(key);
    static const json kEmpty = json::object();
    auto it = doc_.find(key);
    return Section(it == doc_.end() ? kEmpty : *it, name(key));
  }

  void finish() const {
    for (const auto& [key, value] : doc_.items()) {
      if (seen_.count(key) == 0) throw DataError("config: unknown key '" + name(key.c_str()) + "'");
    }
  }

 private:
  std::string label() const { return path_.empty() ? "<root>" : path_; }
  std::string name(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  const json& doc_;
  std::string path_;
  std::set<std::string> seen_;
};

constexpr std::pair<const char*, AttentionKind> kAttentionNames[] = {{"multi_head", AttentionKind::kMultiHead},
                                                                     {"single_head", AttentionKind::kSingleHead}};
constexpr std::pair<const char*, Activation> kActivationNames[] = {{"gelu", Activation::kGelu},
                                                                   {"identity", Activation::kIdentity}};
constexpr std::pair<const char*, Pooling> kPoolingNames[] = {{"avg", Pooling::kAvg}, {"max", Pooling::kMax}};
constexpr std::pair<const char*, QueryInit> kQueryInitNames[] = {{"full_image", QueryInit::kFullImage},
                                                                 {"grid", QueryInit::kGrid}};
constexpr std::pair<const char*, ShapeKind> kShapeNames[] = {
    {"disk", ShapeKind::kDisk}, {"rectangle", ShapeKind::kRectangle}, {"triangle", ShapeKind::kTriangle}};

template <typename E, size_t N>
const char* enum_name(E v, const std::pair<const char*, E> (&names)[N]) {
  for (const auto& [n, e] : names) {
    if (e == v) return n;
  }
  return "?";
}

void read_model(Section s, ModelConfig& m) {
  s.get("num_queries", m.num_queries);
  s.get("stages", m.stages);
  s.get("num_classes", m.num_classes);
  s.get("embedding_dim", m.embedding_dim);
  s.get("dim", m.encoder.dim);
  s.get("heads", m.encoder.heads);
  s.get("dynamic_dim", m.encoder.dynamic_dim);
  s.get("roi_size", m.encoder.roi_size);
  s.get("ffn_dim", m.encoder.ffn_dim);
  s.get_enum("attention", m.encoder.attention, kAttentionNames);
  s.get_enum("activation", m.encoder.activation, kActivationNames);
  s.get("dynamic_norm", m.encoder.dynamic_norm);
  s.get("sampling_ratio", m.sampling_ratio);
  s.get_enum("pooling", m.pooling, kPoolingNames);
  s.get("position_embedding", m.position_embedding);
  s.get("box_hidden_layers", m.box_hidden_layers);
  s.get("delta_clamp", m.delta_clamp);
  s.get_enum("query_init", m.query_init, kQueryInitNames);
  s.get("query_logit_eps", m.query_logit_eps);
  Section lr = s.child("level_rule");
  lr.get("image_size", m.level_rule.image_size);
  lr.get("canonical_size", m.level_rule.canonical_size);
  lr.get("canonical_level", m.level_rule.canonical_level);
  lr.finish();
  Section bb = s.child("backbone");
  bb.get("stem_channels", m.backbone.stem_channels);
  bb.get("levels", m.backbone.levels);
  bb.finish();
  m.backbone.channels = m.encoder.dim;
  s.finish();
}

void read_loss(Section s, SetLossConfig& l) {
  s.get("l1", l.weights.l1);
  s.get("giou", l.weights.giou);
  s.get("cls", l.weights.cls);
  s.get("mask", l.weights.mask);
  s.get("focal_alpha", l.focal.alpha);
  s.get("focal_gamma", l.focal.gamma);
  s.get("dice_eps", l.dice_eps);
  s.finish();
}

void read_train(Section s, TrainConfig& t, int& log_every) {
  s.get("steps", t.steps);
  s.get("lr", t.optimizer.lr);
  s.get("beta1", t.optimizer.beta1);
  s.get("beta2", t.optimizer.beta2);
  s.get("eps", t.optimizer.eps);
  s.get("weight_decay", t.optimizer.weight_decay);
  s.get("clip_norm", t.optimizer.clip_norm);
  s.get("lr_milestones", t.lr_milestones);
  s.get("lr_decay", t.lr_decay);
  s.get("batch_size", t.batch_size);
  s.get("threads", t.threads);
  s.get("train_backbone", t.train_backbone);
  s.get("train_queries", t.train_queries);
  s.get("init_mask_bias", t.init_mask_bias);
  s.get("log_every", log_every);
  s.finish();
}

void read_data(Section s, DataConfig& d) {
  ShapesConfig& sh = d.shapes;
  s.get("seed", sh.seed);
  s.get("num_images", d.num_images);
  s.get("annotations", d.annotations);
  s.get("image_size", sh.image_size);
  s.get("min_objects", sh.min_objects);
  s.get("max_objects", sh.max_objects);
  s.get("min_size", sh.min_size);
  s.get("max_size", sh.max_size);
  s.get("min_intensity", sh.min_intensity);
  s.get("max_intensity", sh.max_intensity);
  s.get("gap", sh.gap);
  s.get("max_attempts", sh.max_attempts);
  if (s.has("kinds")) {
    std::vector<std::string> names;
    s.get("kinds", names);
    sh.kinds.clear();
    for (const std::string& n : names) {
      ShapeKind kind{};
      bool found = false;
      for (const auto& [label, v] : kShapeNames) {
        if (n == label) {
          kind = v;
          found = true;
        }
      }
      if (!found) throw DataError("config: 'data.kinds' has unknown shape '" + n + "'");
      sh.kinds.push_back(kind);
    }
  }
  s.finish();
}

void read_eval(Section s, EvalConfig& e) {
  s.get("score_threshold", e.score_threshold);
  s.get("high_score", e.high_score);
  s.get("duplicate_iou", e.duplicate_iou);
  s.finish();
}

}  // namespace

void ToyConfig::validate() const {
  try {
    model.validate();
    data.shapes.validate();
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("config: ") + e.what());
  }
  if (codec.side < 1) throw DataError("config: codec.side must be >= 1");
  if (model.embedding_dim > codec.side * codec.side) throw DataError("config: model.embedding_dim exceeds codec.side^2");
  if (data.num_images < 1) throw DataError("config: data.num_images must be >= 1");
  if (train.steps < 0 || train.batch_size < 1 || train.threads < 1) throw DataError("config: bad train sizes");
  if (train.optimizer.lr < 0.0) throw DataError("config: train.lr must be >= 0");
  if (log_every < 1) throw DataError("config: train.log_every must be >= 1");
  for (double m : train.lr_milestones) {
    if (!(m >= 0.0 && m <= 1.0)) throw DataError("config: train.lr_milestones must lie in [0, 1]");
  }
}

ToyConfig parse_config(const nlohmann::json& doc) {
  ToyConfig cfg;
  Section root(doc, "");
  root.get("seed", cfg.seed);
  read_model(root.child("model"), cfg.model);
  Section codec = root.child("codec");
  codec.get("side", cfg.codec.side);
  codec.get("center", cfg.codec.center);
  codec.finish();
  read_loss(root.child("loss"), cfg.train.loss);
  read_train(root.child("train"), cfg.train, cfg.log_every);
  read_data(root.child("data"), cfg.data);
  read_eval(root.child("eval"), cfg.eval);
  root.finish();
  cfg.train.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

ToyConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config '" + path + "'");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("config '" + path + "': " + e.what());
  }
  return parse_config(doc);
}

nlohmann::json config_to_json(const ToyConfig& cfg) {
  const ModelConfig& m = cfg.model;
  const TrainConfig& t = cfg.train;
  const ShapesConfig& sh = cfg.data.shapes;
  nlohmann::json kinds = nlohmann::json::array();
  for (ShapeKind k : sh.kinds) kinds.push_back(enum_name(k, kShapeNames));
  return {
      {"seed", cfg.seed},
      {"model",
       {{"num_queries", m.num_queries},
        {"stages", m.stages},
        {"num_classes", m.num_classes},
        {"embedding_dim", m.embedding_dim},
        {"dim", m.encoder.dim},
        {"heads", m.encoder.heads},
        {"dynamic_dim", m.encoder.dynamic_dim},
        {"roi_size", m.encoder.roi_size},
        {"ffn_dim", m.encoder.ffn_dim},
        {"attention", enum_name(m.encoder.attention, kAttentionNames)},
        {"activation", enum_name(m.encoder.activation, kActivationNames)},
        {"dynamic_norm", m.encoder.dynamic_norm},
        {"sampling_ratio", m.sampling_ratio},
        {"pooling", enum_name(m.pooling, kPoolingNames)},
        {"position_embedding", m.position_embedding},
        {"box_hidden_layers", m.box_hidden_layers},
        {"delta_clamp", m.delta_clamp},
        {"query_init", enum_name(m.query_init, kQueryInitNames)},
        {"query_logit_eps", m.query_logit_eps},
        {"level_rule",
         {{"image_size", m.level_rule.image_size},
          {"canonical_size", m.level_rule.canonical_size},
          {"canonical_level", m.level_rule.canonical_level}}},
        {"backbone", {{"stem_channels", m.backbone.stem_channels}, {"levels", m.backbone.levels}}}}},
      {"codec", {{"side", cfg.codec.side}, {"center", cfg.codec.center}}},
      {"loss",
       {{"l1", t.loss.weights.l1},
        {"giou", t.loss.weights.giou},
        {"cls", t.loss.weights.cls},
        {"mask", t.loss.weights.mask},
        {"focal_alpha", t.loss.focal.alpha},
        {"focal_gamma", t.loss.focal.gamma},
        {"dice_eps", t.loss.dice_eps}}},
      {"train",
       {{"steps", t.steps},
        {"lr", t.optimizer.lr},
        {"beta1", t.optimizer.beta1},
        {"beta2", t.optimizer.beta2},
        {"eps", t.optimizer.eps},
        {"weight_decay", t.optimizer.weight_decay},
        {"clip_norm", t.optimizer.clip_norm},
        {"lr_milestones", t.lr_milestones},
        {"lr_decay", t.lr_decay},
        {"batch_size", t.batch_size},
        {"threads", t.threads},
        {"train_backbone", t.train_backbone},
        {"train_queries", t.train_queries},
        {"init_mask_bias", t.init_mask_bias},
        {"log_every", cfg.log_every}}},
      {"data",
       {{"seed", sh.seed},
        {"num_images", cfg.data.num_images},
        {"annotations", cfg.data.annotations},
        {"image_size", sh.image_size},
        {"kinds", kinds},
        {"min_objects", sh.min_objects},
        {"max_objects", sh.max_objects},
        {"min_size", sh.min_size},
        {"max_size", sh.max_size},
        {"min_intensity", sh.min_intensity},
        {"max_intensity", sh.max_intensity},
        {"gap", sh.gap},
        {"max_attempts", sh.max_attempts}}},
      {"eval",
       {{"score_threshold", cfg.eval.score_threshold},
        {"high_score", cfg.eval.high_score},
        {"duplicate_iou", cfg.eval.duplicate_iou}}},
  };
}

}  // namespace setseg
