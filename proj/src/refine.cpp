#include "setseg/refine.hpp"

#include <algorithm>
#include <memory>

namespace setseg {

void ModelConfig::validate() const {
  if (num_queries < 1) throw std::invalid_argument("model: num_queries must be >= 1");
  if (stages < 1) throw std::invalid_argument("model: stages must be >= 1");
  if (num_classes < 1) throw std::invalid_argument("model: num_classes must be >= 1");
  if (embedding_dim < 1) throw std::invalid_argument("model: embedding_dim must be >= 1");
  if (encoder.dim < 1 || encoder.roi_size < 1) throw std::invalid_argument("model: bad encoder size");
  if (encoder.attention == AttentionKind::kMultiHead && (encoder.heads < 1 || encoder.dim % encoder.heads != 0)) {
    throw std::invalid_argument("model: dim must be divisible by heads");
  }
  if (backbone.channels != encoder.dim) throw std::invalid_argument("model: backbone channels must equal dim");
  if (box_hidden_layers < 0) throw std::invalid_argument("model: box_hidden_layers must be >= 0");
}

std::string stage_prefix(int stage) { return "stage" + std::to_string(stage) + "."; }

std::vector<BBox> init_queries(int k, QueryInit mode) {
  if (k < 1) throw std::invalid_argument("init_queries: k must be >= 1");
  std::vector<BBox> out;
  out.reserve(static_cast<size_t>(k));
  if (mode == QueryInit::kFullImage) {
    out.assign(static_cast<size_t>(k), BBox{0.0, 0.0, 1.0, 1.0});
    return out;
  }
  const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(k))));
  const int rows = (k + cols - 1) / cols;
  for (int i = 0; i < k; ++i) {
    const int r = i / cols, c = i % cols;
    out.push_back({static_cast<double>(c) / cols, static_cast<double>(r) / rows, static_cast<double>(c + 1) / cols,
                   static_cast<double>(r + 1) / rows});
  }
  return out;
}

Matrix boxes_to_matrix(const std::vector<BBox>& boxes) {
  Matrix m(static_cast<Eigen::Index>(boxes.size()), 4);
  for (size_t j = 0; j < boxes.size(); ++j) {
    const auto a = boxes[j].as_array();
    for (int c = 0; c < 4; ++c) m(static_cast<Eigen::Index>(j), c) = a[static_cast<size_t>(c)];
  }
  return m;
}

std::vector<BBox> matrix_to_boxes(const Matrix& m) {
  if (m.cols() != 4) throw DataError("box matrix must have 4 columns");
  std::vector<BBox> out;
  out.reserve(static_cast<size_t>(m.rows()));
  for (Eigen::Index j = 0; j < m.rows(); ++j) out.push_back({m(j, 0), m(j, 1), m(j, 2), m(j, 3)});
  return out;
}

Matrix query_logits(const std::vector<BBox>& boxes, double eps) {
  Matrix m(static_cast<Eigen::Index>(boxes.size()), 4);
  for (size_t j = 0; j < boxes.size(); ++j) {
    const CenterBox c = boxes[j].to_center();
    const double v[4] = {c.cx, c.cy, c.w, c.h};
    for (int i = 0; i < 4; ++i) {
      const double p = std::clamp(v[i], eps, 1.0 - eps);
      m(static_cast<Eigen::Index>(j), i) = std::log(p / (1.0 - p));
    }
  }
  return m;
}

namespace {

// Center form (cx, cy, w, h) row times this gives corners (x0, y0, x1, y1).
Matrix center_to_corner_matrix() {
  Matrix m(4, 4);
  m << 1.0, 0.0, 1.0, 0.0,
       0.0, 1.0, 0.0, 1.0,
      -0.5, 0.0, 0.5, 0.0,
       0.0, -0.5, 0.0, 0.5;
  return m;
}

void add_linear(ad::ParamStore& store, const std::string& name, int in, int out, double stddev, Rng& rng) {
  store[name + ".w"] = stddev > 0.0 ? rng.normal_matrix(in, out, stddev) : Matrix::Zero(in, out);
  store[name + ".b"] = Matrix::Zero(1, out);
}

ad::Var linear(ad::Var x, ad::ParamBinder& p, const std::string& name) {
  return ad::add_row(ad::matmul(x, p(name + ".w")), p(name + ".b"));
}

}  // namespace

ad::ParamStore init_model_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  ad::ParamStore store;
  const int d = cfg.encoder.dim;
  const int k = cfg.num_queries;
  store["queries"] = query_logits(init_queries(k, cfg.query_init), cfg.query_logit_eps);
  store["pos_embed"] = rng.normal_matrix(k, d, 1.0);
  init_backbone_params(store, cfg.backbone, rng);
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  for (int s = 0; s < cfg.stages; ++s) {
    const std::string pre = stage_prefix(s);
    init_encoder_params(store, pre + "enc.", cfg.encoder, rng);
    add_linear(store, pre + "cls", d, cfg.num_classes + 1, 0.01, rng);
    for (int h = 0; h < cfg.box_hidden_layers; ++h) add_linear(store, pre + "box.h" + std::to_string(h), d, d, sd, rng);
    add_linear(store, pre + "box.out", d, 4, 0.0, rng);
    add_linear(store, pre + "mask", d, cfg.embedding_dim, sd, rng);
  }
  return store;
}

void set_mask_bias(ad::ParamStore& params, const ModelConfig& cfg, const Vector& bias) {
  if (bias.size() != cfg.embedding_dim) throw std::invalid_argument("set_mask_bias: wrong embedding length");
  for (int s = 0; s < cfg.stages; ++s) params.at(stage_prefix(s) + "mask.b") = bias.transpose();
}

std::vector<BBox> query_boxes(const ad::ParamStore& params) {
  ad::Tape tape;
  ad::ParamBinder binder(tape, params, false);
  return matrix_to_boxes(ad::query_boxes(binder).value());
}

namespace ad {

Var query_boxes(ParamBinder& p) {
  Var logits = p("queries");
  Var corners = matmul(sigmoid(logits), logits.tape->constant(center_to_corner_matrix()));
  return clamp(corners, 0.0, 1.0);
}

Var apply_box_delta(Var boxes, Var deltas, double clamp_value) {
  if (boxes.cols() != 4 || deltas.cols() != 4 || boxes.rows() != deltas.rows()) {
    throw std::invalid_argument("apply_box_delta: expected matching k x 4 inputs");
  }
  Tape& t = *boxes.tape;
  const Eigen::Index k = boxes.rows();
  auto jac = std::make_shared<std::vector<BoxDeltaJacobian>>(static_cast<size_t>(k));
  Matrix out(k, 4);
  for (Eigen::Index j = 0; j < k; ++j) {
    const Matrix& b = boxes.value();
    const Matrix& d = deltas.value();
    const BBox nb = setseg::apply_box_delta(BBox{b(j, 0), b(j, 1), b(j, 2), b(j, 3)},
                                            BoxDelta{d(j, 0), d(j, 1), d(j, 2), d(j, 3)}, clamp_value,
                                            &(*jac)[static_cast<size_t>(j)]);
    out.row(j) << nb.x0, nb.y0, nb.x1, nb.y1;
  }
  const int ib = boxes.id, id = deltas.id;
  return t.push(std::move(out), t.needs_grad(boxes) || t.needs_grad(deltas), [ib, id, jac, k](Tape& tp, const Matrix& g) {
    Matrix gb(k, 4), gd(k, 4);
    for (Eigen::Index j = 0; j < k; ++j) {
      const auto& J = (*jac)[static_cast<size_t>(j)];
      const Eigen::RowVector4d gr = g.row(j);
      gb.row(j) = gr * J.wrt_box;
      gd.row(j) = gr * J.wrt_delta;
    }
    if (tp.needs_grad(ib)) tp.accumulate(ib, gb);
    if (tp.needs_grad(id)) tp.accumulate(id, gd);
  });
}

Var set_loss(Var boxes, Var probs, Var embeddings, const GroundTruthSet& gt, const Assignment& assignment,
             const MaskCodec& codec, const SetLossConfig& cfg, LossBreakdown* breakdown) {
  PredictionSet pred;
  pred.boxes = matrix_to_boxes(boxes.value());
  pred.probs = probs.value();
  pred.embeddings = embeddings.value();
  auto grad = std::make_shared<SetLossGradient>();
  const LossBreakdown lb = setseg::set_loss(gt, pred, assignment, codec, cfg, grad.get());
  if (breakdown != nullptr) *breakdown = lb;
  Tape& t = *boxes.tape;
  const int ib = boxes.id, ip = probs.id, ie = embeddings.id;
  Matrix value(1, 1);
  value(0, 0) = lb.total;
  const bool needs = t.needs_grad(boxes) || t.needs_grad(probs) || t.needs_grad(embeddings);
  return t.push(std::move(value), needs, [ib, ip, ie, grad](Tape& tp, const Matrix& g) {
    const double s = g(0, 0);
    if (tp.needs_grad(ib)) tp.accumulate(ib, s * grad->boxes);
    if (tp.needs_grad(ip)) tp.accumulate(ip, s * grad->probs);
    if (tp.needs_grad(ie)) tp.accumulate(ie, s * grad->embeddings);
  });
}

PyramidVars constant_pyramid(Tape& tape, const std::vector<FeatureMap>& pyramid) {
  PyramidVars vars;
  for (const FeatureMap& fm : pyramid) {
    vars.levels.push_back(tape.constant(fm.values));
    vars.shapes.emplace_back(fm.height, fm.width);
  }
  return vars;
}

StageOutput refine_step(int stage, Var boxes_prev, const PyramidVars& pyramid, ParamBinder& p, const ModelConfig& cfg) {
  const int k = cfg.num_queries;
  if (boxes_prev.rows() != k || boxes_prev.cols() != 4) throw std::invalid_argument("refine_step: expected k x 4 boxes");
  if (pyramid.levels.empty()) throw std::invalid_argument("refine_step: empty pyramid");
  Tape& tape = *boxes_prev.tape;
  const std::string pre = stage_prefix(stage);
  const RoiAlignOptions roi = cfg.roi();
  const int levels = static_cast<int>(pyramid.levels.size());

  std::vector<Var> rois;
  rois.reserve(static_cast<size_t>(k));
  const Matrix bv = boxes_prev.value();
  for (int j = 0; j < k; ++j) {
    const BBox b{bv(j, 0), bv(j, 1), bv(j, 2), bv(j, 3)};
    const int level = pyramid_level_for_box(b, levels, cfg.level_rule);
    const auto [h, w] = pyramid.shapes[static_cast<size_t>(level)];
    auto taps = std::make_shared<const Taps>(roi_align_taps(h, w, b, roi).bins);
    rois.push_back(gather_weighted(pyramid.levels[static_cast<size_t>(level)], std::move(taps)));
  }

  StageOutput out;
  out.boxes_in = boxes_prev;
  Var image = image_features(pyramid, cfg.pooling, k);
  Var pos = cfg.position_embedding ? p("pos_embed") : tape.constant(Matrix::Zero(k, cfg.encoder.dim));
  Var o = encoder_forward(image, pos, rois, p, pre + "enc.", cfg.encoder);

  out.logits = linear(o, p, pre + "cls");
  out.probs = softmax_rows(out.logits);
  Var h = o;
  for (int i = 0; i < cfg.box_hidden_layers; ++i) h = gelu(linear(h, p, pre + "box.h" + std::to_string(i)));
  out.deltas = linear(h, p, pre + "box.out");
  out.embeddings = linear(o, p, pre + "mask");
  out.boxes = apply_box_delta(boxes_prev, out.deltas, cfg.delta_clamp);
  return out;
}

TrainForward forward_train(const PyramidVars& pyramid, const GroundTruthSet& gt, ParamBinder& p, const ModelConfig& cfg,
                           const MaskCodec& codec, const SetLossConfig& loss_cfg) {
  TrainForward fwd;
  Var boxes = query_boxes(p);
  std::vector<Var> stage_losses;
  for (int s = 0; s < cfg.stages; ++s) {
    StageOutput out = refine_step(s, boxes, pyramid, p, cfg);
    const PredictionSet pred = to_prediction_set(out);
    Assignment a = match(gt, pred, codec, loss_cfg.weights);
    LossBreakdown lb;
    stage_losses.push_back(set_loss(out.boxes, out.probs, out.embeddings, gt, a, codec, loss_cfg, &lb));
    fwd.losses.push_back(lb);
    fwd.assignments.push_back(std::move(a));
    boxes = out.boxes;
    fwd.stages.push_back(out);
  }
  fwd.loss = sum(stage_losses);
  return fwd;
}

}  // namespace ad

PredictionSet to_prediction_set(const ad::StageOutput& out) {
  PredictionSet pred;
  pred.boxes = matrix_to_boxes(out.boxes.value());
  pred.probs = out.probs.value();
  pred.embeddings = out.embeddings.value();
  return pred;
}

StepResult refine_step(int stage, const std::vector<BBox>& boxes, const std::vector<FeatureMap>& pyramid,
                       const ad::ParamStore& params, const ModelConfig& cfg) {
  ad::Tape tape;
  ad::ParamBinder binder(tape, params, false);
  const ad::PyramidVars vars = ad::constant_pyramid(tape, pyramid);
  const ad::StageOutput out = ad::refine_step(stage, tape.constant(boxes_to_matrix(boxes)), vars, binder, cfg);
  StepResult r;
  r.predictions = to_prediction_set(out);
  r.boxes = r.predictions.boxes;
  return r;
}

InferenceResult run_inference(const std::vector<FeatureMap>& pyramid, const ad::ParamStore& params,
                              const ModelConfig& cfg, const MaskCodec& codec, int image_height, int image_width,
                              int stages, bool paste_masks) {
  const int n = stages > 0 ? stages : cfg.stages;
  if (n > cfg.stages) throw std::invalid_argument("run_inference: more stages requested than the model has");
  ad::Tape tape;
  ad::ParamBinder binder(tape, params, false);
  const ad::PyramidVars vars = ad::constant_pyramid(tape, pyramid);
  ad::Var boxes = ad::query_boxes(binder);

  InferenceResult result;
  for (int s = 0; s < n; ++s) {
    result.trace.query_boxes.push_back(matrix_to_boxes(boxes.value()));
    const ad::StageOutput out = ad::refine_step(s, boxes, vars, binder, cfg);
    result.trace.predictions.push_back(to_prediction_set(out));
    boxes = out.boxes;
  }
  result.predictions = result.trace.predictions.back();

  const PredictionSet& pred = result.predictions;
  const int c = pred.num_classes();
  for (size_t j = 0; j < pred.size(); ++j) {
    const auto row = pred.probs.row(static_cast<Eigen::Index>(j));
    Eigen::Index best = 0;
    const double score = row.head(c).maxCoeff(&best);
    result.scores.push_back(score);
    result.labels.push_back(static_cast<int>(best));
    if (paste_masks) {
      const Mask soft = codec.decode(pred.embeddings.row(static_cast<Eigen::Index>(j)).transpose());
      result.masks.push_back(pred.boxes[j].degenerate() ? Raster(image_height, image_width, 0.0)
                                                        : paste_mask(soft, pred.boxes[j], image_height, image_width));
    }
  }
  return result;
}

}  // namespace setseg
