#include "setseg/losses.hpp"

#include <algorithm>
#include <cmath>

namespace setseg {

namespace {

void check_target(std::span<const double> probs, int target) {
  if (target < 0 || static_cast<size_t>(target) >= probs.size()) throw DataError("focal loss target index out of range");
}

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

std::span<const double> as_span(const Vector& v) { return {v.data(), static_cast<size_t>(v.size())}; }

}  // namespace

double focal_loss(std::span<const double> probs, int target, const FocalParams& fp) {
  check_target(probs, target);
  const double p = std::max(probs[static_cast<size_t>(target)], kProbabilityFloor);
  const double q = std::max(0.0, 1.0 - p);
  return -fp.alpha * std::pow(q, fp.gamma) * std::log(p);
}

double focal_loss_dprob(std::span<const double> probs, int target, const FocalParams& fp) {
  check_target(probs, target);
  const double raw = probs[static_cast<size_t>(target)];
  if (raw < kProbabilityFloor) return 0.0;
  const double p = raw;
  const double q = std::max(0.0, 1.0 - p);
  double d = -fp.alpha * std::pow(q, fp.gamma) / p;
  if (q > 0.0 && fp.gamma != 0.0) d += fp.alpha * fp.gamma * std::pow(q, fp.gamma - 1.0) * std::log(p);
  return d;
}

Vector focal_loss_grad_logits(std::span<const double> probs, int target, const FocalParams& fp) {
  const double dp = focal_loss_dprob(probs, target, fp);
  const double pt = probs[static_cast<size_t>(target)];
  Vector g(static_cast<Eigen::Index>(probs.size()));
  for (size_t j = 0; j < probs.size(); ++j) {
    g[static_cast<Eigen::Index>(j)] = dp * pt * ((static_cast<int>(j) == target ? 1.0 : 0.0) - probs[j]);
  }
  return g;
}

double dice_loss(std::span<const double> pred, std::span<const double> gt, double eps) {
  if (pred.size() != gt.size()) throw DataError("dice_loss: mask sizes differ");
  double inter = 0.0, sp = 0.0, sg = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    inter += pred[i] * gt[i];
    sp += pred[i];
    sg += gt[i];
  }
  const double denom = sp + sg + eps;
  if (denom <= 0.0) return 0.0;
  return 1.0 - (2.0 * inter + eps) / denom;
}

Vector dice_loss_grad(std::span<const double> pred, std::span<const double> gt, double eps) {
  if (pred.size() != gt.size()) throw DataError("dice_loss: mask sizes differ");
  double inter = 0.0, sp = 0.0, sg = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    inter += pred[i] * gt[i];
    sp += pred[i];
    sg += gt[i];
  }
  Vector g = Vector::Zero(static_cast<Eigen::Index>(pred.size()));
  const double denom = sp + sg + eps;
  if (denom <= 0.0) return g;
  const double num = 2.0 * inter + eps;
  for (size_t i = 0; i < pred.size(); ++i) {
    g[static_cast<Eigen::Index>(i)] = -(2.0 * gt[i] * denom - num) / (denom * denom);
  }
  return g;
}

double l2_embedding_loss(const Vector& pred, const Vector& target) {
  if (pred.size() != target.size()) throw DataError("l2_embedding_loss: dimensions differ");
  return (pred - target).squaredNorm();
}

std::array<double, 4> giou_grad(const BBox& p, const BBox& g) {
  std::array<double, 4> out{};
  const double pw = p.x1 - p.x0, ph = p.y1 - p.y0;
  const double area_p = std::max(0.0, pw) * std::max(0.0, ph);
  const double area_g = g.area();
  // d(area_p): positive-extent boxes only; a collapsed side has no gradient.
  std::array<double, 4> d_area{};
  if (pw > 0.0 && ph > 0.0) d_area = {-ph, -pw, ph, pw};

  double iw = std::min(p.x1, g.x1) - std::max(p.x0, g.x0);
  double ih = std::min(p.y1, g.y1) - std::max(p.y0, g.y0);
  std::array<double, 4> d_inter{};
  if (iw > 0.0 && ih > 0.0) {
    d_inter[0] = p.x0 > g.x0 ? -ih : 0.0;
    d_inter[2] = p.x1 < g.x1 ? ih : 0.0;
    d_inter[1] = p.y0 > g.y0 ? -iw : 0.0;
    d_inter[3] = p.y1 < g.y1 ? iw : 0.0;
  } else {
    iw = std::max(iw, 0.0);
    ih = std::max(ih, 0.0);
  }
  const double inter = iw * ih;
  const double uni = area_p + area_g - inter;

  const double ew = std::max(p.x1, g.x1) - std::min(p.x0, g.x0);
  const double eh = std::max(p.y1, g.y1) - std::min(p.y0, g.y0);
  const double enc = std::max(0.0, ew) * std::max(0.0, eh);
  std::array<double, 4> d_enc{};
  if (ew > 0.0 && eh > 0.0) {
    d_enc[0] = p.x0 < g.x0 ? -eh : 0.0;
    d_enc[2] = p.x1 > g.x1 ? eh : 0.0;
    d_enc[1] = p.y0 < g.y0 ? -ew : 0.0;
    d_enc[3] = p.y1 > g.y1 ? ew : 0.0;
  }

  for (int c = 0; c < 4; ++c) {
    const double d_uni = d_area[c] - d_inter[c];
    double d = 0.0;
    if (uni > 0.0) d += (d_inter[c] * uni - inter * d_uni) / (uni * uni);
    if (enc > 0.0 && uni > 0.0) d += (d_uni * enc - uni * d_enc[c]) / (enc * enc);
    out[c] = d;
  }
  return out;
}

double box_loss(const BBox& gt, const BBox& pred, const CostWeights& w, std::array<double, 4>* grad) {
  const double value = box_cost(gt, pred, w);
  if (grad != nullptr) {
    const CenterBox p = pred.to_center(), g = gt.to_center();
    const double scx = sign(p.cx - g.cx), scy = sign(p.cy - g.cy);
    const double sw = sign(p.w - g.w), sh = sign(p.h - g.h);
    const std::array<double, 4> l1 = {0.5 * scx - sw, 0.5 * scy - sh, 0.5 * scx + sw, 0.5 * scy + sh};
    const std::array<double, 4> dg = giou_grad(pred, gt);
    for (int c = 0; c < 4; ++c) (*grad)[c] = w.l1 * l1[c] - w.giou * dg[c];
  }
  return value;
}

double mask_loss(const Mask& m, const Vector& pred_embedding, const MaskCodec& codec, double lambda_mask,
                 double dice_eps, Vector* grad) {
  const Vector target = codec.encode(m);
  const Vector linear = codec.decode_linear(pred_embedding);
  const Vector soft = linear.cwiseMax(0.0).cwiseMin(1.0);
  const double l2 = l2_embedding_loss(pred_embedding, target);
  const double dice = dice_loss(as_span(soft), as_span(m.values()), dice_eps);
  if (grad != nullptr) {
    Vector d_soft = dice_loss_grad(as_span(soft), as_span(m.values()), dice_eps);
    for (Eigen::Index i = 0; i < d_soft.size(); ++i) {
      if (linear[i] < 0.0 || linear[i] > 1.0) d_soft[i] = 0.0;
    }
    *grad = lambda_mask * (2.0 * (pred_embedding - target) + codec.basis().transpose() * d_soft);
  }
  return lambda_mask * (l2 + dice);
}

LossBreakdown set_loss(const GroundTruthSet& gt, const PredictionSet& pred, const Assignment& assignment,
                       const MaskCodec& codec, const SetLossConfig& cfg, SetLossGradient* grad) {
  const int n = static_cast<int>(gt.size());
  const int k = static_cast<int>(pred.size());
  const int background = pred.num_classes();
  const auto& w = cfg.weights;
  if (static_cast<int>(assignment.prediction_for_gt.size()) != n) throw DataError("assignment does not cover every ground truth");
  std::vector<char> matched(static_cast<size_t>(k), 0);
  for (int j : assignment.prediction_for_gt) {
    if (j < 0 || j >= k) throw DataError("assignment index out of range");
    if (matched[static_cast<size_t>(j)]) throw DataError("assignment repeats a prediction");
    matched[static_cast<size_t>(j)] = 1;
  }

  if (grad != nullptr) {
    grad->boxes = Matrix::Zero(k, 4);
    grad->probs = Matrix::Zero(pred.probs.rows(), pred.probs.cols());
    grad->embeddings = Matrix::Zero(pred.embeddings.rows(), pred.embeddings.cols());
  }

  LossBreakdown out;
  out.matched = n;
  const double inv_n = n > 0 ? 1.0 / n : 0.0;
  for (int i = 0; i < n; ++i) {
    const int j = assignment.prediction_for_gt[static_cast<size_t>(i)];
    const BBox& gb = gt.boxes[static_cast<size_t>(i)];
    const BBox& pb = pred.boxes[static_cast<size_t>(j)];
    out.box_l1 += inv_n * box_l1_distance(gb, pb);
    out.box_giou += inv_n * (1.0 - giou(gb, pb));

    const Eigen::RowVectorXd p = pred.probs.row(j);
    const std::span<const double> ps(p.data(), static_cast<size_t>(p.size()));
    const int c = gt.classes[static_cast<size_t>(i)];
    out.cls += inv_n * focal_loss(ps, c, cfg.focal);

    const Mask& m = gt.masks[static_cast<size_t>(i)];
    const Vector r = pred.embeddings.row(j).transpose();
    const Vector target = codec.encode(m);
    const Vector linear = codec.decode_linear(r);
    const Vector soft = linear.cwiseMax(0.0).cwiseMin(1.0);
    out.mask_l2 += inv_n * l2_embedding_loss(r, target);
    out.mask_dice += inv_n * dice_loss(as_span(soft), as_span(m.values()), cfg.dice_eps);

    if (grad != nullptr) {
      std::array<double, 4> gbx{};
      box_loss(gb, pb, w, &gbx);
      for (int q = 0; q < 4; ++q) grad->boxes(j, q) += inv_n * gbx[static_cast<size_t>(q)];
      grad->probs(j, c) += inv_n * w.cls * focal_loss_dprob(ps, c, cfg.focal);
      Vector d_soft = dice_loss_grad(as_span(soft), as_span(m.values()), cfg.dice_eps);
      for (Eigen::Index t = 0; t < d_soft.size(); ++t) {
        if (linear[t] < 0.0 || linear[t] > 1.0) d_soft[t] = 0.0;
      }
      const Vector de = w.mask * (2.0 * (r - target) + codec.basis().transpose() * d_soft);
      grad->embeddings.row(j) += inv_n * de.transpose();
    }
  }

  const int unmatched = k - n;
  if (unmatched > 0) {
    const double inv_u = 1.0 / unmatched;
    for (int j = 0; j < k; ++j) {
      if (matched[static_cast<size_t>(j)]) continue;
      const Eigen::RowVectorXd p = pred.probs.row(j);
      const std::span<const double> ps(p.data(), static_cast<size_t>(p.size()));
      out.cls_background += inv_u * focal_loss(ps, background, cfg.focal);
      if (grad != nullptr) grad->probs(j, background) += inv_u * w.cls * focal_loss_dprob(ps, background, cfg.focal);
    }
  }

  out.total = w.l1 * out.box_l1 + w.giou * out.box_giou + w.cls * (out.cls + out.cls_background) +
              w.mask * (out.mask_l2 + out.mask_dice);
  if (!std::isfinite(out.total)) throw NumericalError("set loss is not finite");
  return out;
}

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult grad_check(const ScalarFunction& f, const Vector& analytic, const Vector& x, const GradCheckOptions& opt) {
  if (analytic.size() != x.size()) throw std::invalid_argument("grad_check: gradient and point differ in size");
  GradCheckResult result;
  Vector probe = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double saved = probe[i];
    probe[i] = saved + opt.step;
    const double fp = f(probe);
    probe[i] = saved - opt.step;
    const double fm = f(probe);
    probe[i] = saved;
    const double numeric = (fp - fm) / (2.0 * opt.step);
    const double err = relative_error(analytic[i], numeric, opt.floor);
    if (err > result.max_rel_error || result.worst_index < 0) {
      result.max_rel_error = err;
      result.worst_index = i;
      result.analytic = analytic[i];
      result.numeric = numeric;
    }
  }
  return result;
}

}  // namespace setseg
