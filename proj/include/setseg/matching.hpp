#pragma once

#include "setseg/common.hpp"
#include "setseg/geometry.hpp"
#include "setseg/mask_codec.hpp"

#include <vector>

namespace setseg {

/// Labeled instances of one image: boxes, category indices in [0, C) and
/// masks in the codec frame.
struct GroundTruthSet {
  std::vector<BBox> boxes;
  std::vector<int> classes;
  std::vector<Mask> masks;

  size_t size() const { return boxes.size(); }
  /// Throws DataError on length mismatch or class index outside [0, num_classes).
  void validate(int num_classes) const;
};

/// k predictions: boxes, (C+1)-way class distributions whose last slot is
/// background, and mask embeddings.
struct PredictionSet {
  std::vector<BBox> boxes;
  Matrix probs;       // k x (C+1)
  Matrix embeddings;  // k x l

  size_t size() const { return boxes.size(); }
  int num_classes() const { return static_cast<int>(probs.cols()) - 1; }
  void validate() const;
};

struct CostWeights {
  double l1 = 5.0;
  double giou = 2.0;
  double cls = 2.0;
  double mask = 2.0;
};

struct Assignment {
  std::vector<int> prediction_for_gt;  // sigma: gt i -> prediction index
  double total_cost = 0.0;
};

/// -w_cls * p[c]
double class_cost(int gt_class, std::span<const double> probs, const CostWeights& w);

/// w_l1 * sum |center-form differences| + w_giou * (1 - giou).
double box_cost(const BBox& gt, const BBox& pred, const CostWeights& w);
double box_l1_distance(const BBox& a, const BBox& b);

/// -w_mask/2 * (cos(pred, gt_embedding) + 1). A zero-norm vector counts as
/// cosine 0.
double mask_cost(const Vector& gt_embedding, const Vector& pred_embedding, const CostWeights& w);
double mask_cost(const Mask& gt_mask, const Vector& pred_embedding, const MaskCodec& codec, const CostWeights& w);

/// n x k matrix of box + class + mask costs. Throws DataError when k < n.
Matrix build_cost_matrix(const GroundTruthSet& gt, const PredictionSet& pred, const MaskCodec& codec,
                         const CostWeights& w);

/// Minimum-cost injection of rows into columns (rows <= cols) by the
/// shortest augmenting path method with potentials, O(n^2 k). Ties resolve to
/// the lowest column index. Throws NumericalError on NaN/inf entries.
Assignment hungarian(const Matrix& cost);

Assignment match(const GroundTruthSet& gt, const PredictionSet& pred, const MaskCodec& codec, const CostWeights& w);

}  // namespace setseg
