#pragma once

#include "setseg/common.hpp"

#include <array>
#include <span>
#include <vector>

namespace setseg {

enum class BoxFormat { kCorner, kCenter };

struct CenterBox {
  double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;
};

/// Axis-aligned box in canonical corner form. Coordinates are image
/// fractions for everything the pipeline produces, but iou/giou accept any
/// common unit.
struct BBox {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;

  static BBox from_center(const CenterBox& c) {
    return {c.cx - 0.5 * c.w, c.cy - 0.5 * c.h, c.cx + 0.5 * c.w, c.cy + 0.5 * c.h};
  }
  CenterBox to_center() const { return {0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0}; }

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }

  bool finite() const {
    return std::isfinite(x0) && std::isfinite(y0) && std::isfinite(x1) && std::isfinite(y1);
  }
  bool valid() const { return finite() && x0 <= x1 && y0 <= y1; }
  bool degenerate() const { return !(width() > 0.0 && height() > 0.0); }

  /// Reorders swapped corners so that x0 <= x1 and y0 <= y1.
  BBox normalized() const;
  BBox clipped_unit() const;

  std::array<double, 4> as_array() const { return {x0, y0, x1, y1}; }
  static BBox from_array(std::span<const double> v) { return {v[0], v[1], v[2], v[3]}; }

  bool operator==(const BBox&) const = default;
};

/// Converts four coordinates between the corner and center parameterizations.
std::array<double, 4> box_convert(const std::array<double, 4>& v, BoxFormat from, BoxFormat to);

/// Intersection over union. Two zero-area boxes give 0.
double iou(const BBox& a, const BBox& b);

/// Generalized IoU: iou - (enclosing - union) / enclosing. A degenerate
/// enclosing box falls back to plain iou.
double giou(const BBox& a, const BBox& b);

/// Width/height-scaled center offsets plus log-scale size residuals.
struct BoxDelta {
  double d_cx = 0.0, d_cy = 0.0, d_w = 0.0, d_h = 0.0;
};

inline constexpr double kDefaultDeltaClamp = 4.0;
// Widths below this are lifted before a delta is applied so a box that was
// clipped to a line can still move on the next refinement stage.
inline constexpr double kMinBoxExtent = 1e-4;

/// cx' = cx + d_cx*w, w' = w*exp(d_w) (same for y/h), clipped to the unit
/// square. Log-size residuals are clamped to +-clamp before exponentiation.
BBox apply_box_delta(const BBox& b, const BoxDelta& delta, double clamp = kDefaultDeltaClamp);

/// Delta that maps `from` onto `to` when no clipping occurs.
BoxDelta box_delta_between(const BBox& from, const BBox& to);

/// Partial derivatives of apply_box_delta. Row r of each 4x4 block holds
/// d(out[r]) / d(in[c]) for out/in in corner order (x0, y0, x1, y1) and
/// delta order (d_cx, d_cy, d_w, d_h).
struct BoxDeltaJacobian {
  Eigen::Matrix4d wrt_box = Eigen::Matrix4d::Zero();
  Eigen::Matrix4d wrt_delta = Eigen::Matrix4d::Zero();
};
BBox apply_box_delta(const BBox& b, const BoxDelta& delta, double clamp, BoxDeltaJacobian* jacobian);

/// Dense feature grid stored pixel-major: row (y * width + x) holds the
/// `channels` values of that pixel.
struct FeatureMap {
  int height = 0;
  int width = 0;
  int channels = 0;
  Matrix values;  // (height*width) x channels

  FeatureMap() = default;
  FeatureMap(int h, int w, int c) : height(h), width(w), channels(c), values(Matrix::Zero(h * w, c)) {}
  FeatureMap(int h, int w, Matrix v);

  double at(int y, int x, int c) const { return values(static_cast<Eigen::Index>(y) * width + x, c); }
  double& at(int y, int x, int c) { return values(static_cast<Eigen::Index>(y) * width + x, c); }
};

struct RoiAlignOptions {
  int output_size = 7;
  int sampling_ratio = 2;  // <= 0 selects ceil(bin extent) samples per axis
  bool aligned = true;     // continuous coordinate c samples pixel position c - 0.5
};

/// One bilinear tap list for a single output bin: pixel indices and weights
/// whose weighted sum gives the bin value. Shared by the forward pass and the
/// gradient scatter.
struct RoiTaps {
  std::vector<std::vector<std::pair<int, double>>> bins;  // output_size^2 entries
};

/// Sampling taps of RoIAlign for a normalized box on a height x width grid.
/// Sample positions outside the grid are clamped to the border.
RoiTaps roi_align_taps(int height, int width, const BBox& box, const RoiAlignOptions& opt);

/// (t*t) x channels patch: each bin averages sampling_ratio^2 bilinear samples.
Matrix roi_align(const FeatureMap& fm, const BBox& box, const RoiAlignOptions& opt = {});
Matrix roi_align_apply(const Matrix& values, const RoiTaps& taps);

/// FPN-style level assignment:
/// level = clamp(floor(canonical_level + log2(sqrt(area_px) / canonical_size)), 0, levels-1)
/// where area_px is the box area in pixels of an image_size x image_size input.
struct LevelRule {
  double image_size = 800.0;
  double canonical_size = 224.0;
  int canonical_level = 2;  // index of the canonical level inside the pyramid
};
int pyramid_level_for_box(const BBox& b, int levels, const LevelRule& rule = {});

}  // namespace setseg
