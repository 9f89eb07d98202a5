#include "setseg/gradcheck.hpp"

#include "setseg/attention.hpp"
#include "setseg/autograd.hpp"
#include "setseg/refine.hpp"

#include <functional>
#include <map>

namespace setseg {

namespace {

constexpr double kKinkMargin = 1e-3;
// Step for the deep tape blocks, where the generated dynamic filters make the
// O(h^2) truncation term of a 1e-4 step visible.
constexpr double kTapeStep = 1e-5;

struct PointResult {
  GradCheckResult check;
  Eigen::Index coordinates = 0;
};

using PointCheck = std::function<PointResult(Rng&, const GradSuiteOptions&)>;

struct Block {
  std::string scope;
  std::string name;
  PointCheck check;
};

Vector softmax(const Vector& z) {
  const Vector e = (z.array() - z.maxCoeff()).exp();
  return e / e.sum();
}

// Chain rule through softmax: dL/dz = p * (g - <g, p>).
Vector softmax_backward(const Vector& p, const Vector& g) { return p.cwiseProduct((g.array() - g.dot(p)).matrix()); }

void maybe_corrupt(Vector& analytic, const GradSuiteOptions& opt) {
  if (opt.corrupt && analytic.size() > 0) analytic[0] += 0.1 * (std::abs(analytic[0]) + 1.0);
}

// Components below 1e-6 of the largest one are compared absolutely.
PointResult finish(const ScalarFunction& f, Vector analytic, const Vector& x, const GradSuiteOptions& opt) {
  GradCheckOptions fd = opt.fd;
  if (analytic.size() > 0) fd.floor = std::max(fd.floor, fd.floor * analytic.cwiseAbs().maxCoeff());
  maybe_corrupt(analytic, opt);
  return {grad_check(f, analytic, x, fd), x.size()};
}

BBox random_box(Rng& rng, double lo = 0.05, double hi = 0.95) {
  const double w = rng.uniform(0.15, 0.5), h = rng.uniform(0.15, 0.5);
  const double x0 = rng.uniform(lo, hi - w), y0 = rng.uniform(lo, hi - h);
  return {x0, y0, x0 + w, y0 + h};
}

BBox jitter_box(const BBox& b, Rng& rng, double scale) {
  BBox o{b.x0 + rng.uniform(-scale, scale), b.y0 + rng.uniform(-scale, scale), b.x1 + rng.uniform(-scale, scale),
         b.y1 + rng.uniform(-scale, scale)};
  if (o.x1 - o.x0 < 0.05) o.x1 = o.x0 + 0.05;
  if (o.y1 - o.y0 < 0.05) o.y1 = o.y0 + 0.05;
  return o;
}

// Every quantity at which the L1 or IoU terms switch branches must be away
// from zero for central differences to be meaningful.
bool box_pair_smooth(const BBox& a, const BBox& b) {
  const CenterBox ca = a.to_center(), cb = b.to_center();
  const double v[] = {a.x0 - b.x0,
                      a.y0 - b.y0,
                      a.x1 - b.x1,
                      a.y1 - b.y1,
                      std::min(a.x1, b.x1) - std::max(a.x0, b.x0),
                      std::min(a.y1, b.y1) - std::max(a.y0, b.y0),
                      ca.cx - cb.cx,
                      ca.cy - cb.cy,
                      ca.w - cb.w,
                      ca.h - cb.h};
  for (double d : v) {
    if (std::abs(d) < kKinkMargin) return false;
  }
  return true;
}

bool decode_smooth(const MaskCodec& codec, const Vector& r) {
  const Vector lin = codec.decode_linear(r);
  for (Eigen::Index i = 0; i < lin.size(); ++i) {
    if (std::abs(lin[i]) < kKinkMargin || std::abs(lin[i] - 1.0) < kKinkMargin) return false;
  }
  return true;
}

Mask random_binary_mask(Rng& rng, int side, double p) {
  Mask m(side);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) m.set(y, x, rng.uniform() < p ? 1.0 : 0.0);
  }
  return m;
}

MaskCodec random_codec(Rng& rng, int side, int dim) {
  std::vector<Mask> masks;
  for (int i = 0; i < 4 * dim; ++i) masks.push_back(random_binary_mask(rng, side, rng.uniform(0.2, 0.8)));
  return fit_codec(masks, dim, false);
}

// ---- tape blocks -------------------------------------------------------------

Vector flatten(const ad::ParamStore& store) {
  Eigen::Index n = 0;
  for (const auto& [name, m] : store) n += m.size();
  Vector v(n);
  Eigen::Index off = 0;
  for (const auto& [name, m] : store) {
    v.segment(off, m.size()) = Eigen::Map<const Vector>(m.data(), m.size());
    off += m.size();
  }
  return v;
}

void unflatten(const Vector& v, ad::ParamStore& store) {
  Eigen::Index off = 0;
  for (auto& [name, m] : store) {
    Eigen::Map<Vector>(m.data(), m.size()) = v.segment(off, m.size());
    off += m.size();
  }
}

using TapeScalar = std::function<ad::Var(ad::Tape&, ad::ParamBinder&)>;

PointResult check_tape(const ad::ParamStore& point, const TapeScalar& build, const GradSuiteOptions& opt) {
  ad::Tape tape;
  ad::ParamBinder binder(tape, point, true);
  const ad::Var out = build(tape, binder);
  tape.backward(out);
  const Vector analytic = flatten(binder.gradients());

  ad::ParamStore probe = point;
  const ScalarFunction f = [&](const Vector& x) {
    unflatten(x, probe);
    ad::Tape t;
    ad::ParamBinder b(t, probe, false);
    return build(t, b).scalar();
  };
  GradCheckOptions fd = opt.fd;
  fd.step = kTapeStep;
  GradSuiteOptions o = opt;
  o.fd = fd;
  return finish(f, analytic, flatten(point), o);
}

// Scalar readout sum(out .* weights) with fixed random weights.
ad::Var readout(ad::Tape& tape, ad::Var out, const Matrix& weights) {
  return ad::sum(ad::hadamard(out, tape.constant(weights)));
}

// Moves every tensor off its initial value: weights by `scale` times their own
// RMS, zero-initialized tensors (biases, shifts) by `scale` in absolute terms.
void randomize(ad::ParamStore& store, Rng& rng, double scale) {
  for (auto& [name, m] : store) {
    const double rms = std::sqrt(m.squaredNorm() / static_cast<double>(m.size()));
    const bool is_gamma = name.size() >= 6 && name.compare(name.size() - 6, 6, ".gamma") == 0;
    const double sigma = is_gamma || rms == 0.0 ? scale : scale * rms;
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] += sigma * rng.normal();
  }
}

// ---- blocks ------------------------------------------------------------------

PointResult focal_point(Rng& rng, const GradSuiteOptions& opt) {
  const int classes = 4;
  const Vector z = 1.5 * Vector::NullaryExpr(classes, [&] { return rng.normal(); });
  const int target = rng.uniform_int(0, classes - 1);
  const FocalParams fp;
  const Vector p = softmax(z);
  const Vector analytic = focal_loss_grad_logits({p.data(), static_cast<size_t>(p.size())}, target, fp);
  const ScalarFunction f = [&](const Vector& x) {
    const Vector q = softmax(x);
    return focal_loss({q.data(), static_cast<size_t>(q.size())}, target, fp);
  };
  return finish(f, analytic, z, opt);
}

PointResult dice_point(Rng& rng, const GradSuiteOptions& opt) {
  const int n = 36;
  const Vector pred = Vector::NullaryExpr(n, [&] { return rng.uniform(0.05, 0.95); });
  const Vector gt = Vector::NullaryExpr(n, [&] { return rng.uniform() < 0.5 ? 1.0 : 0.0; });
  const std::span<const double> g{gt.data(), static_cast<size_t>(n)};
  const Vector analytic = dice_loss_grad({pred.data(), static_cast<size_t>(n)}, g);
  const ScalarFunction f = [&](const Vector& x) { return dice_loss({x.data(), static_cast<size_t>(x.size())}, g); };
  return finish(f, analytic, pred, opt);
}

PointResult l2_point(Rng& rng, const GradSuiteOptions& opt) {
  const int n = 8;
  const Vector target = Vector::NullaryExpr(n, [&] { return rng.normal(); });
  const Vector x0 = Vector::NullaryExpr(n, [&] { return rng.normal(); });
  const ScalarFunction f = [&](const Vector& x) { return l2_embedding_loss(x, target); };
  return finish(f, 2.0 * (x0 - target), x0, opt);
}

PointResult box_point(Rng& rng, const GradSuiteOptions& opt) {
  const CostWeights w;
  BBox gt, pred;
  do {
    gt = random_box(rng);
    pred = jitter_box(gt, rng, 0.2);
  } while (!box_pair_smooth(pred, gt));
  std::array<double, 4> g{};
  box_loss(gt, pred, w, &g);
  const Vector analytic = Eigen::Map<const Vector>(g.data(), 4);
  const ScalarFunction f = [&](const Vector& x) { return box_loss(gt, BBox{x[0], x[1], x[2], x[3]}, w); };
  return finish(f, analytic, Vector{{pred.x0, pred.y0, pred.x1, pred.y1}}, opt);
}

PointResult mask_point(Rng& rng, const GradSuiteOptions& opt) {
  const MaskCodec codec = random_codec(rng, 6, 5);
  const Mask m = random_binary_mask(rng, 6, 0.5);
  Vector r;
  do {
    r = codec.encode(m) + 0.7 * Vector::NullaryExpr(codec.dim(), [&] { return rng.normal(); });
  } while (!decode_smooth(codec, r));
  Vector analytic;
  mask_loss(m, r, codec, 2.0, kDefaultDiceEps, &analytic);
  const ScalarFunction f = [&](const Vector& x) { return mask_loss(m, x, codec, 2.0); };
  return finish(f, analytic, r, opt);
}

PointResult set_loss_point(Rng& rng, const GradSuiteOptions& opt) {
  const int k = 4, n = 2, c = 3, side = 6, dim = 5;
  const MaskCodec codec = random_codec(rng, side, dim);
  GroundTruthSet gt;
  for (int i = 0; i < n; ++i) {
    gt.boxes.push_back(random_box(rng));
    gt.classes.push_back(rng.uniform_int(0, c - 1));
    gt.masks.push_back(random_binary_mask(rng, side, 0.5));
  }
  PredictionSet pred;
  Matrix logits(k, c + 1);
  Assignment a;
  for (;;) {
    pred.boxes.clear();
    for (int j = 0; j < k; ++j) pred.boxes.push_back(jitter_box(gt.boxes[static_cast<size_t>(j % n)], rng, 0.2));
    logits = rng.normal_matrix(k, c + 1, 1.5);
    pred.probs.resize(k, c + 1);
    for (int j = 0; j < k; ++j) pred.probs.row(j) = softmax(logits.row(j).transpose()).transpose();
    pred.embeddings = rng.normal_matrix(k, dim, 1.0);
    a = match(gt, pred, codec, CostWeights{});
    bool smooth = true;
    for (int i = 0; i < n; ++i) {
      const auto j = static_cast<size_t>(a.prediction_for_gt[static_cast<size_t>(i)]);
      smooth = smooth && box_pair_smooth(pred.boxes[j], gt.boxes[static_cast<size_t>(i)]) &&
               decode_smooth(codec, pred.embeddings.row(static_cast<Eigen::Index>(j)).transpose());
    }
    if (smooth) break;
  }

  // x = [boxes (k*4), logits (k*(c+1)), embeddings (k*dim)], row-major.
  const Eigen::Index nb = 4 * k, nl = k * (c + 1), ne = k * dim;
  auto unpack = [&](const Vector& x) {
    PredictionSet p;
    for (int j = 0; j < k; ++j) p.boxes.push_back({x[4 * j], x[4 * j + 1], x[4 * j + 2], x[4 * j + 3]});
    p.probs.resize(k, c + 1);
    for (int j = 0; j < k; ++j) p.probs.row(j) = softmax(x.segment(nb + j * (c + 1), c + 1)).transpose();
    p.embeddings = Eigen::Map<const Matrix>(x.data() + nb + nl, k, dim);
    return p;
  };
  Vector x(nb + nl + ne);
  for (int j = 0; j < k; ++j) {
    const auto b = pred.boxes[static_cast<size_t>(j)].as_array();
    for (int q = 0; q < 4; ++q) x[4 * j + q] = b[static_cast<size_t>(q)];
  }
  x.segment(nb, nl) = Eigen::Map<const Vector>(logits.data(), nl);
  x.segment(nb + nl, ne) = Eigen::Map<const Vector>(pred.embeddings.data(), ne);

  SetLossGradient g;
  set_loss(gt, pred, a, codec, SetLossConfig{}, &g);
  Vector analytic(x.size());
  analytic.segment(0, nb) = Eigen::Map<const Vector>(g.boxes.data(), nb);
  for (int j = 0; j < k; ++j) {
    analytic.segment(nb + j * (c + 1), c + 1) =
        softmax_backward(pred.probs.row(j).transpose(), g.probs.row(j).transpose());
  }
  analytic.segment(nb + nl, ne) = Eigen::Map<const Vector>(g.embeddings.data(), ne);
  const ScalarFunction f = [&](const Vector& v) { return set_loss(gt, unpack(v), a, codec).total; };
  return finish(f, analytic, x, opt);
}

PointResult self_attention_point(Rng& rng, const GradSuiteOptions& opt) {
  const int k = 3, d = 4;
  ad::ParamStore s{{"x", rng.normal_matrix(k, d, 1.0)},
                   {"wq", rng.normal_matrix(d, d, 0.7)},
                   {"wk", rng.normal_matrix(d, d, 0.7)},
                   {"wv", rng.normal_matrix(d, d, 0.7)}};
  const Matrix r = rng.normal_matrix(k, d, 1.0);
  return check_tape(
      s,
      [&](ad::Tape& t, ad::ParamBinder& p) {
        return readout(t, ad::self_attention(p("x"), p("wq"), p("wk"), p("wv")), r);
      },
      opt);
}

PointResult multi_head_point(Rng& rng, const GradSuiteOptions& opt) {
  const int k = 3, d = 4, heads = 2;
  ad::ParamStore s{{"x", rng.normal_matrix(k, d, 1.0)},     {"wq", rng.normal_matrix(d, d, 0.7)},
                   {"wk", rng.normal_matrix(d, d, 0.7)},    {"wv", rng.normal_matrix(d, d, 0.7)},
                   {"wo", rng.normal_matrix(d, d, 0.7)},    {"bo", rng.normal_matrix(1, d, 0.5)}};
  const Matrix r = rng.normal_matrix(k, d, 1.0);
  return check_tape(
      s,
      [&](ad::Tape& t, ad::ParamBinder& p) {
        return readout(t, ad::multi_head_attention(p("x"), p("wq"), p("wk"), p("wv"), p("wo"), p("bo"), heads), r);
      },
      opt);
}

EncoderConfig small_encoder(int dim, int mid, int roi, int heads) {
  EncoderConfig cfg;
  cfg.dim = dim;
  cfg.dynamic_dim = mid;
  cfg.roi_size = roi;
  cfg.heads = heads;
  return cfg;
}

PointResult dynamic_point(Rng& rng, const GradSuiteOptions& opt) {
  const int k = 2;
  const EncoderConfig cfg = small_encoder(8, 8, 2, 2);
  const int t2 = cfg.roi_size * cfg.roi_size;
  ad::ParamStore s;
  init_encoder_params(s, "", cfg, rng);
  ad::ParamStore dyn;
  for (const auto& [name, m] : s) {
    if (name.rfind("dyn.", 0) == 0) dyn[name] = m;
  }
  randomize(dyn, rng, 0.5);
  dyn["z"] = rng.normal_matrix(k, cfg.dim, 1.0);
  for (int j = 0; j < k; ++j) dyn["u" + std::to_string(j)] = rng.normal_matrix(t2, cfg.dim, 1.0);
  const Matrix r = rng.normal_matrix(k, cfg.dim, 1.0);
  return check_tape(
      dyn,
      [&](ad::Tape& t, ad::ParamBinder& p) {
        std::vector<ad::Var> rois;
        for (int j = 0; j < k; ++j) rois.push_back(p("u" + std::to_string(j)));
        return readout(t, ad::dynamic_attention(rois, p("z"), p, "dyn.", cfg), r);
      },
      opt);
}

PointResult encoder_point(Rng& rng, const GradSuiteOptions& opt) {
  const int k = 3;
  const EncoderConfig cfg = small_encoder(8, 8, 2, 2);
  const int t2 = cfg.roi_size * cfg.roi_size;
  ad::ParamStore s;
  init_encoder_params(s, "enc.", cfg, rng);
  randomize(s, rng, 0.4);
  s["P"] = rng.normal_matrix(k, cfg.dim, 1.0);
  s["E"] = rng.normal_matrix(k, cfg.dim, 1.0);
  for (int j = 0; j < k; ++j) s["u" + std::to_string(j)] = rng.normal_matrix(t2, cfg.dim, 1.0);
  const Matrix r = rng.normal_matrix(k, cfg.dim, 1.0);
  return check_tape(
      s,
      [&](ad::Tape& t, ad::ParamBinder& p) {
        std::vector<ad::Var> rois;
        for (int j = 0; j < k; ++j) rois.push_back(p("u" + std::to_string(j)));
        return readout(t, ad::encoder_forward(p("P"), p("E"), rois, p, "enc.", cfg), r);
      },
      opt);
}

ModelConfig small_model() {
  ModelConfig cfg;
  cfg.num_queries = 3;
  cfg.stages = 1;
  cfg.num_classes = 2;
  cfg.embedding_dim = 3;
  cfg.encoder = small_encoder(8, 8, 2, 2);
  cfg.backbone.channels = 8;
  cfg.backbone.stem_channels = 2;
  cfg.backbone.levels = 2;
  return cfg;
}

PointResult heads_point(Rng& rng, const GradSuiteOptions& opt) {
  const ModelConfig cfg = small_model();
  const int k = cfg.num_queries;
  ad::ParamStore all = init_model_params(cfg, rng);
  ad::ParamStore s;
  for (const auto& [name, m] : all) {
    if (name.rfind("stage0.", 0) == 0 || name == "pos_embed") s[name] = m;
  }
  randomize(s, rng, 0.4);
  for (const char* name : {"stage0.box.out.w", "stage0.box.out.b"}) s[name] *= 0.25;

  const std::vector<FeatureMap> pyramid{FeatureMap(4, 4, rng.normal_matrix(16, cfg.encoder.dim, 1.0)),
                                        FeatureMap(2, 2, rng.normal_matrix(4, cfg.encoder.dim, 1.0))};
  std::vector<BBox> boxes;
  // Redraw until no refined coordinate sits on the unit-square clip or the
  // delta clamp.
  for (bool smooth = false; !smooth;) {
    boxes.clear();
    for (int j = 0; j < k; ++j) boxes.push_back(random_box(rng, 0.2, 0.8));
    ad::Tape t;
    ad::ParamBinder p(t, s, false);
    const ad::StageOutput out = ad::refine_step(0, t.constant(boxes_to_matrix(boxes)), ad::constant_pyramid(t, pyramid), p, cfg);
    const Matrix refined = out.boxes.value();
    const Matrix deltas = out.deltas.value();
    smooth = (refined.array() > kKinkMargin).all() && (refined.array() < 1.0 - kKinkMargin).all() &&
             (deltas.array().abs() < cfg.delta_clamp - kKinkMargin).all();
  }
  const Matrix r_probs = rng.normal_matrix(k, cfg.num_classes + 1, 1.0);
  const Matrix r_boxes = rng.normal_matrix(k, 4, 1.0);
  const Matrix r_emb = rng.normal_matrix(k, cfg.embedding_dim, 1.0);
  const TapeScalar build = [&](ad::Tape& t, ad::ParamBinder& p) {
    const ad::PyramidVars vars = ad::constant_pyramid(t, pyramid);
    const ad::StageOutput out = ad::refine_step(0, t.constant(boxes_to_matrix(boxes)), vars, p, cfg);
    return ad::sum(std::vector<ad::Var>{readout(t, out.probs, r_probs), readout(t, out.boxes, r_boxes),
                                        readout(t, out.embeddings, r_emb)});
  };
  return check_tape(s, build, opt);
}

PointResult box_update_point(Rng& rng, const GradSuiteOptions& opt) {
  const int k = 3;
  Matrix boxes(k, 4), deltas(k, 4);
  for (;;) {
    bool smooth = true;
    for (int j = 0; j < k; ++j) {
      const BBox b = random_box(rng, 0.2, 0.8);
      boxes.row(j) << b.x0, b.y0, b.x1, b.y1;
      deltas.row(j) << rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5);
      const BBox o = apply_box_delta(b, {deltas(j, 0), deltas(j, 1), deltas(j, 2), deltas(j, 3)});
      for (double v : o.as_array()) smooth = smooth && v > kKinkMargin && v < 1.0 - kKinkMargin;
    }
    if (smooth) break;
  }
  ad::ParamStore s{{"boxes", boxes}, {"deltas", deltas}};
  const Matrix r = rng.normal_matrix(k, 4, 1.0);
  return check_tape(
      s,
      [&](ad::Tape& t, ad::ParamBinder& p) {
        return readout(t, ad::apply_box_delta(p("boxes"), p("deltas"), kDefaultDeltaClamp), r);
      },
      opt);
}

PointResult query_point(Rng& rng, const GradSuiteOptions& opt) {
  const int k = 3;
  Matrix logits(k, 4);
  for (;;) {
    logits = rng.normal_matrix(k, 4, 1.0);
    bool smooth = true;
    for (int j = 0; j < k; ++j) {
      const double cx = 1.0 / (1.0 + std::exp(-logits(j, 0))), cy = 1.0 / (1.0 + std::exp(-logits(j, 1)));
      const double w = 1.0 / (1.0 + std::exp(-logits(j, 2))), h = 1.0 / (1.0 + std::exp(-logits(j, 3)));
      for (double v : {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h}) {
        smooth = smooth && std::abs(v) > kKinkMargin && std::abs(v - 1.0) > kKinkMargin;
      }
    }
    if (smooth) break;
  }
  ad::ParamStore s{{"queries", logits}};
  const Matrix r = rng.normal_matrix(k, 4, 1.0);
  return check_tape(s, [&](ad::Tape& t, ad::ParamBinder& p) { return readout(t, ad::query_boxes(p), r); }, opt);
}

std::vector<Block> all_blocks() {
  return {
      {"losses", "focal", focal_point},
      {"losses", "dice", dice_point},
      {"losses", "l2_embedding", l2_point},
      {"losses", "box", box_point},
      {"losses", "mask", mask_point},
      {"losses", "set_loss", set_loss_point},
      {"attention", "self_attention", self_attention_point},
      {"attention", "multi_head_attention", multi_head_point},
      {"attention", "dynamic_attention", dynamic_point},
      {"attention", "encoder", encoder_point},
      {"heads", "heads", heads_point},
      {"heads", "box_update", box_update_point},
      {"heads", "query_boxes", query_point},
  };
}

}  // namespace

std::vector<std::string> grad_scopes() { return {"losses", "attention", "heads"}; }

std::vector<GradBlockResult> run_grad_suite(const std::string& scope, const GradSuiteOptions& opt) {
  const auto scopes = grad_scopes();
  if (scope != "all" && std::find(scopes.begin(), scopes.end(), scope) == scopes.end()) {
    throw std::invalid_argument("unknown gradient-check scope '" + scope + "'");
  }
  if (opt.points < 1) throw std::invalid_argument("gradient check needs at least one point");
  std::vector<GradBlockResult> results;
  std::uint64_t block_index = 0;
  for (const Block& b : all_blocks()) {
    ++block_index;
    if (scope != "all" && b.scope != scope) continue;
    // Each block has its own stream so selecting a scope does not change the
    // points drawn for the others.
    Rng rng(opt.seed * 1000003ULL + block_index);
    GradBlockResult r;
    r.scope = b.scope;
    r.name = b.name;
    for (int i = 0; i < opt.points; ++i) {
      const PointResult g = b.check(rng, opt);
      r.max_rel_error = std::max(r.max_rel_error, g.check.max_rel_error);
      r.coordinates += g.coordinates;
      ++r.points;
    }
    r.passed = r.max_rel_error <= opt.tolerance;
    results.push_back(r);
  }
  return results;
}

}  // namespace setseg
