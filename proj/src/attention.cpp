#include "setseg/attention.hpp"

#include <algorithm>
#include <cmath>

namespace setseg {

namespace {

void add_norm(ad::ParamStore& store, const std::string& name, int width) {
  store[name + ".gamma"] = Matrix::Ones(1, width);
  store[name + ".beta"] = Matrix::Zero(1, width);
}

}  // namespace

void init_encoder_params(ad::ParamStore& store, const std::string& prefix, const EncoderConfig& cfg, Rng& rng) {
  const int d = cfg.dim;
  const int m = cfg.mid();
  const int t2 = cfg.roi_size * cfg.roi_size;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));

  store[prefix + "attn.wq"] = rng.normal_matrix(d, d, sd);
  store[prefix + "attn.wk"] = rng.normal_matrix(d, d, sd);
  store[prefix + "attn.wv"] = rng.normal_matrix(d, d, sd);
  store[prefix + "attn.wo"] = rng.normal_matrix(d, d, sd);
  store[prefix + "attn.bo"] = Matrix::Zero(1, d);
  add_norm(store, prefix + "norm1", d);

  // Generated blocks should come out with entries of order 1/sqrt(fan-in):
  // z_j is layer-normalized (unit scale per entry), so the generator is
  // scaled by a further 1/sqrt(d).
  store[prefix + "dyn.gen.w"] = rng.normal_matrix(d, 2 * d * m, sd * sd);
  store[prefix + "dyn.gen.b"] = Matrix::Zero(1, 2 * d * m);
  add_norm(store, prefix + "dyn.norm1", m);
  add_norm(store, prefix + "dyn.norm2", d);
  store[prefix + "dyn.out.w"] = rng.normal_matrix(static_cast<Eigen::Index>(t2) * d, d, 1.0 / std::sqrt(static_cast<double>(t2 * d)));
  store[prefix + "dyn.out.b"] = Matrix::Zero(1, d);
  add_norm(store, prefix + "dyn.norm3", d);
  add_norm(store, prefix + "norm2", d);

  const int f = cfg.ffn();
  store[prefix + "ffn.w1"] = rng.normal_matrix(d, f, sd);
  store[prefix + "ffn.b1"] = Matrix::Zero(1, f);
  store[prefix + "ffn.w2"] = rng.normal_matrix(f, d, 1.0 / std::sqrt(static_cast<double>(f)));
  store[prefix + "ffn.b2"] = Matrix::Zero(1, d);
  add_norm(store, prefix + "norm3", d);
}

ad::Taps resample_taps(int height, int width, int out_height, int out_width) {
  ad::Taps taps(static_cast<size_t>(out_height) * out_width);
  for (int oy = 0; oy < out_height; ++oy) {
    double y = (oy + 0.5) * height / out_height - 0.5;
    y = std::clamp(y, 0.0, static_cast<double>(height - 1));
    const int ylo = static_cast<int>(std::floor(y));
    const int yhi = std::min(ylo + 1, height - 1);
    const double ly = y - ylo;
    for (int ox = 0; ox < out_width; ++ox) {
      double x = (ox + 0.5) * width / out_width - 0.5;
      x = std::clamp(x, 0.0, static_cast<double>(width - 1));
      const int xlo = static_cast<int>(std::floor(x));
      const int xhi = std::min(xlo + 1, width - 1);
      const double lx = x - xlo;
      auto& bin = taps[static_cast<size_t>(oy) * out_width + ox];
      bin = {{ylo * width + xlo, (1 - ly) * (1 - lx)},
             {ylo * width + xhi, (1 - ly) * lx},
             {yhi * width + xlo, ly * (1 - lx)},
             {yhi * width + xhi, ly * lx}};
    }
  }
  return taps;
}

namespace ad {

Var activate(Var x, Activation act) { return act == Activation::kGelu ? gelu(x) : x; }

Var image_features(const PyramidVars& pyramid, Pooling pooling, int k) {
  if (pyramid.levels.empty()) throw std::invalid_argument("image_features: empty pyramid");
  if (pyramid.levels.size() != pyramid.shapes.size()) throw std::invalid_argument("image_features: level shapes missing");
  size_t coarsest = 0;
  for (size_t i = 1; i < pyramid.shapes.size(); ++i) {
    const auto [h, w] = pyramid.shapes[i];
    const auto [ch, cw] = pyramid.shapes[coarsest];
    if (static_cast<long>(h) * w < static_cast<long>(ch) * cw) coarsest = i;
  }
  const auto [oh, ow] = pyramid.shapes[coarsest];
  const Eigen::Index d = pyramid.levels.front().cols();

  std::vector<Var> resampled;
  for (size_t i = 0; i < pyramid.levels.size(); ++i) {
    if (pyramid.levels[i].cols() != d) throw std::invalid_argument("image_features: levels differ in channel count");
    const auto [h, w] = pyramid.shapes[i];
    if (i == coarsest) {
      resampled.push_back(pyramid.levels[i]);
    } else {
      resampled.push_back(gather_weighted(pyramid.levels[i], std::make_shared<const Taps>(resample_taps(h, w, oh, ow))));
    }
  }
  Var summed = resampled.front();
  for (size_t i = 1; i < resampled.size(); ++i) summed = add(summed, resampled[i]);
  Var pooled = pooling == Pooling::kAvg ? mean_rows(summed) : max_rows(summed);
  return repeat_rows(pooled, k);
}

Var self_attention(Var x, Var wq, Var wk, Var wv) {
  Var q = matmul(x, wq);
  Var kk = matmul(x, wk);
  Var v = matmul(x, wv);
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Var weights = softmax_rows(scale(matmul_nt(q, kk), inv));
  return matmul(weights, v);
}

Var multi_head_attention(Var x, Var wq, Var wk, Var wv, Var wo, Var bo, int heads) {
  const Eigen::Index d = x.cols();
  if (heads < 1 || d % heads != 0) throw std::invalid_argument("multi_head_attention: dim must be divisible by heads");
  const Eigen::Index dh = d / heads;
  Var q = matmul(x, wq);
  Var kk = matmul(x, wk);
  Var v = matmul(x, wv);
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outs;
  for (int h = 0; h < heads; ++h) {
    Var qh = slice_cols(q, h * dh, dh);
    Var kh = slice_cols(kk, h * dh, dh);
    Var vh = slice_cols(v, h * dh, dh);
    Var weights = softmax_rows(scale(matmul_nt(qh, kh), inv));
    outs.push_back(matmul(weights, vh));
  }
  Var joined = heads == 1 ? outs.front() : concat_cols(outs);
  return add_row(matmul(joined, wo), bo);
}

Var dynamic_attention(const std::vector<Var>& rois, Var z, ParamBinder& p, const std::string& prefix,
                      const EncoderConfig& cfg) {
  const Eigen::Index k = z.rows();
  const Eigen::Index d = cfg.dim;
  const Eigen::Index m = cfg.mid();
  const Eigen::Index t2 = static_cast<Eigen::Index>(cfg.roi_size) * cfg.roi_size;
  if (static_cast<Eigen::Index>(rois.size()) != k) throw std::invalid_argument("dynamic_attention: one RoI per instance required");
  if (z.cols() != d) throw std::invalid_argument("dynamic_attention: instance features have the wrong width");

  Var generated = add_row(matmul(z, p(prefix + "gen.w")), p(prefix + "gen.b"));  // k x 2dm
  std::vector<Var> flat;
  flat.reserve(static_cast<size_t>(k));
  for (Eigen::Index j = 0; j < k; ++j) {
    const Var& u = rois[static_cast<size_t>(j)];
    if (u.rows() != t2 || u.cols() != d) throw std::invalid_argument("dynamic_attention: RoI feature has the wrong shape");
    Var row = slice_rows(generated, j, 1);
    Var w1 = reshape(slice_cols(row, 0, d * m), d, m);
    Var w2 = reshape(slice_cols(row, d * m, m * d), m, d);
    Var f1 = matmul(u, w1);
    if (cfg.dynamic_norm) f1 = layer_norm_rows(f1, p(prefix + "norm1.gamma"), p(prefix + "norm1.beta"), cfg.norm_eps);
    f1 = activate(f1, cfg.activation);
    Var f2 = matmul(f1, w2);
    if (cfg.dynamic_norm) f2 = layer_norm_rows(f2, p(prefix + "norm2.gamma"), p(prefix + "norm2.beta"), cfg.norm_eps);
    f2 = activate(f2, cfg.activation);
    flat.push_back(reshape(f2, 1, t2 * d));
  }
  Var stacked = concat_rows(flat);  // k x t2*d
  Var out = add_row(matmul(stacked, p(prefix + "out.w")), p(prefix + "out.b"));
  if (cfg.dynamic_norm) out = layer_norm_rows(out, p(prefix + "norm3.gamma"), p(prefix + "norm3.beta"), cfg.norm_eps);
  return activate(out, cfg.activation);
}

Var encoder_forward(Var image_feats, Var pos_embed, const std::vector<Var>& rois, ParamBinder& p,
                    const std::string& prefix, const EncoderConfig& cfg) {
  Var x = add(image_feats, pos_embed);
  Var attended;
  if (cfg.attention == AttentionKind::kMultiHead) {
    attended = multi_head_attention(x, p(prefix + "attn.wq"), p(prefix + "attn.wk"), p(prefix + "attn.wv"),
                                    p(prefix + "attn.wo"), p(prefix + "attn.bo"), cfg.heads);
  } else {
    attended = self_attention(x, p(prefix + "attn.wq"), p(prefix + "attn.wk"), p(prefix + "attn.wv"));
  }
  Var z = layer_norm_rows(add(x, attended), p(prefix + "norm1.gamma"), p(prefix + "norm1.beta"), cfg.norm_eps);
  Var dyn = dynamic_attention(rois, z, p, prefix + "dyn.", cfg);
  Var y = layer_norm_rows(add(z, dyn), p(prefix + "norm2.gamma"), p(prefix + "norm2.beta"), cfg.norm_eps);
  Var hidden = activate(add_row(matmul(y, p(prefix + "ffn.w1")), p(prefix + "ffn.b1")), cfg.activation);
  Var ffn = add_row(matmul(hidden, p(prefix + "ffn.w2")), p(prefix + "ffn.b2"));
  return layer_norm_rows(add(y, ffn), p(prefix + "norm3.gamma"), p(prefix + "norm3.beta"), cfg.norm_eps);
}

}  // namespace ad

Matrix image_features(const std::vector<FeatureMap>& pyramid, Pooling pooling, int k) {
  ad::Tape tape;
  ad::PyramidVars vars;
  for (const FeatureMap& fm : pyramid) {
    vars.levels.push_back(tape.constant(fm.values));
    vars.shapes.emplace_back(fm.height, fm.width);
  }
  return ad::image_features(vars, pooling, k).value();
}

Matrix self_attention(const Matrix& x, const Matrix& wq, const Matrix& wk, const Matrix& wv) {
  ad::Tape tape;
  return ad::self_attention(tape.constant(x), tape.constant(wq), tape.constant(wk), tape.constant(wv)).value();
}

Matrix attention_weights(const Matrix& x, const Matrix& wq, const Matrix& wk) {
  ad::Tape tape;
  ad::Var q = ad::matmul(tape.constant(x), tape.constant(wq));
  ad::Var k = ad::matmul(tape.constant(x), tape.constant(wk));
  return ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(wq.cols())))).value();
}

Matrix multi_head_attention(const Matrix& x, const Matrix& wq, const Matrix& wk, const Matrix& wv, const Matrix& wo,
                            const Matrix& bo, int heads) {
  ad::Tape tape;
  return ad::multi_head_attention(tape.constant(x), tape.constant(wq), tape.constant(wk), tape.constant(wv),
                                  tape.constant(wo), tape.constant(bo), heads)
      .value();
}

Matrix dynamic_attention(const std::vector<Matrix>& rois, const Matrix& z, const ad::ParamStore& params,
                         const std::string& prefix, const EncoderConfig& cfg) {
  ad::Tape tape;
  ad::ParamBinder binder(tape, params, false);
  std::vector<ad::Var> vars;
  for (const Matrix& u : rois) vars.push_back(tape.constant(u));
  return ad::dynamic_attention(vars, tape.constant(z), binder, prefix, cfg).value();
}

Matrix encoder_forward(const Matrix& image_feats, const Matrix& pos_embed, const std::vector<Matrix>& rois,
                       const ad::ParamStore& params, const std::string& prefix, const EncoderConfig& cfg) {
  ad::Tape tape;
  ad::ParamBinder binder(tape, params, false);
  std::vector<ad::Var> vars;
  for (const Matrix& u : rois) vars.push_back(tape.constant(u));
  return ad::encoder_forward(tape.constant(image_feats), tape.constant(pos_embed), vars, binder, prefix, cfg).value();
}

}  // namespace setseg
