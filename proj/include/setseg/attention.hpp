#pragma once

#include "setseg/autograd.hpp"
#include "setseg/geometry.hpp"

#include <string>
#include <vector>

namespace setseg {

enum class Pooling { kAvg, kMax };
enum class Activation { kGelu, kIdentity };
enum class AttentionKind { kSingleHead, kMultiHead };

struct EncoderConfig {
  int dim = 64;         // d
  int heads = 8;        // multi-head attention only
  int dynamic_dim = 0;  // d_mid; 0 selects dim / 4
  int roi_size = 7;     // t
  int ffn_dim = 0;      // 0 selects 2 * dim
  AttentionKind attention = AttentionKind::kMultiHead;
  Activation activation = Activation::kGelu;
  bool dynamic_norm = true;
  double norm_eps = 1e-5;

  int mid() const { return dynamic_dim > 0 ? dynamic_dim : std::max(1, dim / 4); }
  int ffn() const { return ffn_dim > 0 ? ffn_dim : 2 * dim; }
};

/// Registers every encoder tensor under `prefix` with seeded initial values.
/// Layer-norm scales start at 1, all shifts and biases at 0.
void init_encoder_params(ad::ParamStore& store, const std::string& prefix, const EncoderConfig& cfg, Rng& rng);

// ---- tape versions ---------------------------------------------------------

namespace ad {

/// Level shapes accompany the level variables (each (h*w) x d).
struct PyramidVars {
  std::vector<Var> levels;
  std::vector<std::pair<int, int>> shapes;  // (height, width)
};

/// Levels resampled onto the coarsest grid, summed, globally pooled and
/// replicated into k rows.
Var image_features(const PyramidVars& pyramid, Pooling pooling, int k);

/// softmax(Q K^T / sqrt(d)) V with Q = x Wq, K = x Wk, V = x Wv.
Var self_attention(Var x, Var wq, Var wk, Var wv);

/// Heads attend over dim/heads-wide column blocks of the projections; the
/// concatenated result is mapped by wo and shifted by bo.
Var multi_head_attention(Var x, Var wq, Var wk, Var wv, Var wo, Var bo, int heads);

/// Instance-conditioned interaction. For every instance j, a fully connected
/// generator maps z_j to two parameter blocks W1 (d x d_mid) and W2 (d_mid x d):
///   F1 = act(LN(U_j W1)),  F2 = act(LN(F1 W2)),
///   O_j = act(LN(flatten(F2) Wout + bout)).
/// With dynamic_norm off the three LN steps are skipped.
/// Parameters under `prefix`: gen.w, gen.b, norm1.*, norm2.*, out.w, out.b, norm3.*.
Var dynamic_attention(const std::vector<Var>& rois, Var z, ParamBinder& params, const std::string& prefix,
                      const EncoderConfig& cfg);

/// One encoder block:
///   X = P + E;  Z = LN1(X + Attn(X));  Y = LN2(Z + Dyn(U, Z));  O = LN3(Y + FFN(Y)).
Var encoder_forward(Var image_feats, Var pos_embed, const std::vector<Var>& rois, ParamBinder& params,
                    const std::string& prefix, const EncoderConfig& cfg);

Var activate(Var x, Activation act);

}  // namespace ad

// ---- value versions ----------------------------------------------------------

Matrix image_features(const std::vector<FeatureMap>& pyramid, Pooling pooling, int k);
Matrix self_attention(const Matrix& x, const Matrix& wq, const Matrix& wk, const Matrix& wv);
/// Row-stochastic k x k matrix softmax(Q K^T / sqrt(d)).
Matrix attention_weights(const Matrix& x, const Matrix& wq, const Matrix& wk);
Matrix multi_head_attention(const Matrix& x, const Matrix& wq, const Matrix& wk, const Matrix& wv, const Matrix& wo,
                            const Matrix& bo, int heads);
Matrix dynamic_attention(const std::vector<Matrix>& rois, const Matrix& z, const ad::ParamStore& params,
                         const std::string& prefix, const EncoderConfig& cfg);
Matrix encoder_forward(const Matrix& image_feats, const Matrix& pos_embed, const std::vector<Matrix>& rois,
                       const ad::ParamStore& params, const std::string& prefix, const EncoderConfig& cfg);

/// Bilinear (half-pixel aligned) resampling taps from an h x w grid onto an
/// out_h x out_w grid covering the same extent.
ad::Taps resample_taps(int height, int width, int out_height, int out_width);

}  // namespace setseg
