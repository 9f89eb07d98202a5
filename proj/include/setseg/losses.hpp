#pragma once

#include "setseg/common.hpp"
#include "setseg/matching.hpp"

#include <array>
#include <functional>
#include <span>

namespace setseg {

struct FocalParams {
  double alpha = 0.25;
  double gamma = 2.0;
};

inline constexpr double kProbabilityFloor = 1e-12;

/// -alpha (1 - p_t)^gamma log(p_t) on a probability vector; p_t is floored
/// at 1e-12 before the logarithm.
double focal_loss(std::span<const double> probs, int target, const FocalParams& fp = {});
/// d focal / d p_t (the only nonzero probability derivative).
double focal_loss_dprob(std::span<const double> probs, int target, const FocalParams& fp = {});
/// Gradient with respect to the logits that produced `probs` through softmax.
Vector focal_loss_grad_logits(std::span<const double> probs, int target, const FocalParams& fp = {});

inline constexpr double kDefaultDiceEps = 1.0;

/// 1 - (2 sum(pred*gt) + eps) / (sum(pred) + sum(gt) + eps).
double dice_loss(std::span<const double> pred, std::span<const double> gt, double eps = kDefaultDiceEps);
Vector dice_loss_grad(std::span<const double> pred, std::span<const double> gt, double eps = kDefaultDiceEps);

/// Sum of squared differences.
double l2_embedding_loss(const Vector& pred, const Vector& target);

/// Same expression as box_cost; `grad` receives d/d(pred corners) when given.
double box_loss(const BBox& gt, const BBox& pred, const CostWeights& w, std::array<double, 4>* grad = nullptr);
/// d giou(pred, gt) / d(pred corners).
std::array<double, 4> giou_grad(const BBox& pred, const BBox& gt);

/// lambda_mask * (||r - g(m)||^2 + dice(m, clamp(D r + mu))). `grad`
/// receives d/dr when given (the clamp passes gradient only inside [0, 1]).
double mask_loss(const Mask& m, const Vector& pred_embedding, const MaskCodec& codec, double lambda_mask,
                 double dice_eps = kDefaultDiceEps, Vector* grad = nullptr);

struct SetLossConfig {
  CostWeights weights;
  FocalParams focal;
  double dice_eps = kDefaultDiceEps;
};

/// Components are unweighted averages: matched terms over n, the background
/// focal term over the k - n unmatched predictions. total is the weighted sum
/// l1*box_l1 + giou*box_giou + cls*(cls + cls_background) + mask*(mask_l2 + mask_dice).
struct LossBreakdown {
  double total = 0.0;
  double box_l1 = 0.0;
  double box_giou = 0.0;
  double cls = 0.0;
  double cls_background = 0.0;
  double mask_l2 = 0.0;
  double mask_dice = 0.0;
  int matched = 0;
};

/// Gradients of LossBreakdown::total with respect to the prediction set.
struct SetLossGradient {
  Matrix boxes;       // k x 4, corner order
  Matrix probs;       // k x (C+1)
  Matrix embeddings;  // k x l
};

LossBreakdown set_loss(const GroundTruthSet& gt, const PredictionSet& pred, const Assignment& assignment,
                       const MaskCodec& codec, const SetLossConfig& cfg = {}, SetLossGradient* grad = nullptr);

struct GradCheckOptions {
  double step = 1e-4;
  // Denominator floor of the relative error, so components that are zero up
  // to rounding compare absolutely.
  double floor = 1e-6;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  Eigen::Index worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Relative error between the analytic gradient and central differences
/// (f(x+h) - f(x-h)) / 2h, maximized over coordinates.
using ScalarFunction = std::function<double(const Vector&)>;
GradCheckResult grad_check(const ScalarFunction& f, const Vector& analytic, const Vector& x,
                           const GradCheckOptions& opt = {});
double relative_error(double analytic, double numeric, double floor);

}  // namespace setseg
