#include "setseg/matching.hpp"

#include <cmath>
#include <limits>

namespace setseg {

void GroundTruthSet::validate(int num_classes) const {
  if (classes.size() != boxes.size() || masks.size() != boxes.size()) {
    throw DataError("ground truth boxes, classes and masks differ in length");
  }
  for (int c : classes) {
    if (c < 0 || c >= num_classes) throw DataError("ground truth class index out of range");
  }
  for (const BBox& b : boxes) {
    if (!b.valid()) throw DataError("ground truth box is not valid");
  }
}

void PredictionSet::validate() const {
  const auto k = static_cast<Eigen::Index>(boxes.size());
  if (k < 1) throw DataError("prediction set is empty");
  if (probs.rows() != k || embeddings.rows() != k) throw DataError("prediction boxes, classes and embeddings differ in length");
  if (probs.cols() < 2) throw DataError("class distributions need at least one foreground slot and background");
  for (Eigen::Index i = 0; i < k; ++i) {
    if ((probs.row(i).array() < 0.0).any() || std::abs(probs.row(i).sum() - 1.0) > 1e-6) {
      throw DataError("class distribution is not a probability vector");
    }
  }
  if (!embeddings.allFinite()) throw DataError("prediction embeddings are not finite");
  for (const BBox& b : boxes) {
    if (!b.finite()) throw DataError("prediction box is not finite");
  }
}

double class_cost(int gt_class, std::span<const double> probs, const CostWeights& w) {
  if (gt_class < 0 || static_cast<size_t>(gt_class) >= probs.size()) throw DataError("class index out of range");
  return -w.cls * probs[static_cast<size_t>(gt_class)];
}

double box_l1_distance(const BBox& a, const BBox& b) {
  const CenterBox ca = a.to_center(), cb = b.to_center();
  return std::abs(ca.cx - cb.cx) + std::abs(ca.cy - cb.cy) + std::abs(ca.w - cb.w) + std::abs(ca.h - cb.h);
}

double box_cost(const BBox& gt, const BBox& pred, const CostWeights& w) {
  return w.l1 * box_l1_distance(gt, pred) + w.giou * (1.0 - giou(gt, pred));
}

double mask_cost(const Vector& gt_embedding, const Vector& pred_embedding, const CostWeights& w) {
  if (gt_embedding.size() != pred_embedding.size()) throw DataError("mask_cost: embedding dimensions differ");
  const double na = gt_embedding.norm();
  const double nb = pred_embedding.norm();
  double cosine = 0.0;
  if (na > 0.0 && nb > 0.0) cosine = std::clamp(gt_embedding.dot(pred_embedding) / (na * nb), -1.0, 1.0);
  return -0.5 * w.mask * (cosine + 1.0);
}

double mask_cost(const Mask& gt_mask, const Vector& pred_embedding, const MaskCodec& codec, const CostWeights& w) {
  return mask_cost(codec.encode(gt_mask), pred_embedding, w);
}

Matrix build_cost_matrix(const GroundTruthSet& gt, const PredictionSet& pred, const MaskCodec& codec,
                         const CostWeights& w) {
  const auto n = static_cast<Eigen::Index>(gt.size());
  const auto k = static_cast<Eigen::Index>(pred.size());
  if (k < n) throw DataError("more ground truths than predictions");
  Matrix cost(n, k);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vector target = codec.encode(gt.masks[static_cast<size_t>(i)]);
    for (Eigen::Index j = 0; j < k; ++j) {
      const Eigen::RowVectorXd p = pred.probs.row(j);
      cost(i, j) = box_cost(gt.boxes[static_cast<size_t>(i)], pred.boxes[static_cast<size_t>(j)], w) +
                   class_cost(gt.classes[static_cast<size_t>(i)], std::span(p.data(), static_cast<size_t>(p.size())), w) +
                   mask_cost(target, pred.embeddings.row(j).transpose(), w);
    }
  }
  if (!cost.allFinite()) throw NumericalError("cost matrix contains non-finite entries");
  return cost;
}

Assignment hungarian(const Matrix& cost) {
  const int n = static_cast<int>(cost.rows());
  const int k = static_cast<int>(cost.cols());
  Assignment out;
  if (n == 0) return out;
  if (k < n) throw DataError("more ground truths than predictions");
  if (!cost.allFinite()) throw NumericalError("hungarian: cost matrix contains NaN or infinite entries");

  // 1-based potentials formulation; column 0 is a virtual start node.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(k) + 1, 0.0);
  std::vector<int> row_of_col(static_cast<size_t>(k) + 1, 0), way(static_cast<size_t>(k) + 1, 0);
  std::vector<double> minv(static_cast<size_t>(k) + 1);
  std::vector<char> used(static_cast<size_t>(k) + 1);

  for (int i = 1; i <= n; ++i) {
    row_of_col[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = row_of_col[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= k; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= k; ++j) {
        if (used[j]) {
          u[row_of_col[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (row_of_col[j0] != 0);
    do {
      const int j1 = way[j0];
      row_of_col[j0] = row_of_col[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  out.prediction_for_gt.assign(static_cast<size_t>(n), -1);
  for (int j = 1; j <= k; ++j) {
    if (row_of_col[j] != 0) out.prediction_for_gt[static_cast<size_t>(row_of_col[j] - 1)] = j - 1;
  }
  for (int i = 0; i < n; ++i) out.total_cost += cost(i, out.prediction_for_gt[static_cast<size_t>(i)]);
  return out;
}

Assignment match(const GroundTruthSet& gt, const PredictionSet& pred, const MaskCodec& codec, const CostWeights& w) {
  if (gt.size() == 0) return {};
  return hungarian(build_cost_matrix(gt, pred, codec, w));
}

}  // namespace setseg
