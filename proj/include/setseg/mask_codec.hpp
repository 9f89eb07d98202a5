#pragma once

#include "setseg/common.hpp"
#include "setseg/geometry.hpp"

#include <optional>
#include <span>
#include <vector>

namespace setseg {

/// Image-space grid of reals, row-major. Used for instance masks in image
/// coordinates, grayscale images and pasted soft masks.
struct Raster {
  int height = 0;
  int width = 0;
  std::vector<double> data;

  Raster() = default;
  Raster(int h, int w, double fill = 0.0) : height(h), width(w), data(static_cast<size_t>(h) * w, fill) {}

  double at(int y, int x) const { return data[static_cast<size_t>(y) * width + x]; }
  double& at(int y, int x) { return data[static_cast<size_t>(y) * width + x]; }
  bool empty() const { return data.empty(); }
  bool operator==(const Raster&) const = default;
};

inline constexpr int kDefaultMaskSide = 28;
inline constexpr int kDefaultEmbeddingDim = 60;

/// Fixed-resolution s x s mask with values in [0, 1], flattened row-major.
class Mask {
 public:
  Mask() = default;
  explicit Mask(int side, double fill = 0.0);
  Mask(int side, Vector values);

  int side() const { return side_; }
  const Vector& values() const { return values_; }
  double at(int y, int x) const { return values_[static_cast<Eigen::Index>(y) * side_ + x]; }
  void set(int y, int x, double v);

  bool is_binary() const;
  /// Values >= 0.5 become 1, the rest 0.
  Mask thresholded(double threshold = 0.5) const;
  double area() const { return values_.sum(); }

 private:
  int side_ = 0;
  Vector values_;
};

/// Crops the raster under `box` (image fractions), resamples it to side x side
/// with area-averaged bilinear sampling and thresholds at 0.5. The box is
/// clipped to the image first; a box with no overlap throws DataError.
Mask crop_resize_mask(const Raster& raster, const BBox& box, int side = kDefaultMaskSide);

/// Inverse of crop_resize_mask: bilinear resize of the mask onto the pixels
/// whose centers lie inside `box`, zero elsewhere. Returns a soft raster.
Raster paste_mask(const Mask& soft, const BBox& box, int image_height, int image_width);

/// Full eigendecomposition of the (optionally centered) mask scatter matrix.
/// Components are sorted by energy, largest first.
struct PrincipalDecomposition {
  int side = 0;
  bool centered = false;
  Vector mean;       // zero vector when not centered
  Matrix components; // s^2 x s^2, column j is component j
  Vector energy;     // s^2 entries, nonincreasing, >= 0
};

PrincipalDecomposition decompose_masks(std::span<const Mask> masks, bool center);

/// Linear mask encoder/decoder: r = D^T (m - mu), m_hat = clamp(D r + mu, 0, 1).
class MaskCodec {
 public:
  MaskCodec() = default;
  MaskCodec(int side, Matrix basis, std::optional<Vector> mean, Vector spectrum);

  /// Keeps the leading `dim` components of a decomposition.
  static MaskCodec from_decomposition(const PrincipalDecomposition& dec, int dim);

  int side() const { return side_; }
  int dim() const { return static_cast<int>(basis_.cols()); }
  bool centered() const { return mean_.has_value(); }
  const Matrix& basis() const { return basis_; }
  const std::optional<Vector>& mean() const { return mean_; }
  /// Energies of every component of the fitted decomposition (s^2 entries
  /// when produced by fit), nonincreasing.
  const Vector& spectrum() const { return spectrum_; }

  Vector encode(const Mask& m) const;
  /// Pre-clamp reconstruction D r + mu.
  Vector decode_linear(const Vector& r) const;
  Mask decode(const Vector& r) const;

 private:
  int side_ = 0;
  Matrix basis_;  // s^2 x l
  std::optional<Vector> mean_;
  Vector spectrum_;
};

/// Fits the rank-`dim` codec minimizing sum ||m - D D^T m||^2 (plus the mean
/// when `center`). Rank-deficient data gets an arbitrary orthonormal
/// completion with zero spectrum entries.
MaskCodec fit_codec(std::span<const Mask> masks, int dim, bool center = false);

/// Sum over masks of ||m - mu - D D^T (m - mu)||^2, evaluated explicitly.
double reconstruction_error(const MaskCodec& codec, std::span<const Mask> masks);

struct SpectrumEntry {
  int component = 0;
  double ratio = 0.0;
};

/// Per-component energy ratios of the full decomposition, largest first,
/// truncated to `top` entries. All-zero data yields zero ratios.
std::vector<SpectrumEntry> energy_spectrum(std::span<const Mask> masks, int top, bool center = false);
std::vector<SpectrumEntry> energy_spectrum(const PrincipalDecomposition& dec, int top);

/// IoU between a binary mask and its thresholded reconstruction. Empty mask
/// and empty reconstruction count as 1.
double reconstruction_iou(const MaskCodec& codec, const Mask& m);

/// IoU of two binary rasters/masks given as flat values (>= 0.5 is foreground).
double binary_iou(std::span<const double> a, std::span<const double> b);

}  // namespace setseg
