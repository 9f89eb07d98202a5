#include "setseg/mask_codec.hpp"

#include "setseg/linalg.hpp"

#include <algorithm>
#include <cmath>

namespace setseg {

Mask::Mask(int side, double fill) : side_(side), values_(Vector::Constant(static_cast<Eigen::Index>(side) * side, fill)) {
  if (side < 1) throw std::invalid_argument("mask side must be positive");
  if (fill < 0.0 || fill > 1.0) throw std::invalid_argument("mask values must lie in [0, 1]");
}

Mask::Mask(int side, Vector values) : side_(side), values_(std::move(values)) {
  if (side < 1) throw std::invalid_argument("mask side must be positive");
  if (values_.size() != static_cast<Eigen::Index>(side) * side) throw DataError("mask value count does not match side^2");
  for (double v : values_) {
    if (!(v >= 0.0 && v <= 1.0)) throw DataError("mask values must lie in [0, 1]");
  }
}

void Mask::set(int y, int x, double v) {
  if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("mask values must lie in [0, 1]");
  values_[static_cast<Eigen::Index>(y) * side_ + x] = v;
}

bool Mask::is_binary() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return v == 0.0 || v == 1.0; });
}

Mask Mask::thresholded(double threshold) const {
  Vector out = values_.unaryExpr([threshold](double v) { return v >= threshold ? 1.0 : 0.0; });
  return Mask(side_, std::move(out));
}

Mask crop_resize_mask(const Raster& raster, const BBox& box, int side) {
  if (raster.empty()) throw DataError("crop_resize_mask: empty raster");
  if (side < 1) throw std::invalid_argument("crop_resize_mask: side must be positive");
  const BBox clipped = box.normalized().clipped_unit();
  if (clipped.degenerate()) throw DataError("empty crop");

  Eigen::Map<const Matrix> values(raster.data.data(), static_cast<Eigen::Index>(raster.data.size()), 1);
  RoiAlignOptions opt;
  opt.output_size = side;
  opt.sampling_ratio = 0;
  const Matrix sampled = roi_align_apply(values, roi_align_taps(raster.height, raster.width, clipped, opt));
  Vector out(sampled.rows());
  for (Eigen::Index i = 0; i < sampled.rows(); ++i) out[i] = sampled(i, 0) >= 0.5 ? 1.0 : 0.0;
  return Mask(side, std::move(out));
}

Raster paste_mask(const Mask& soft, const BBox& box, int image_height, int image_width) {
  Raster out(image_height, image_width, 0.0);
  const BBox b = box.normalized().clipped_unit();
  if (box.normalized().degenerate()) throw std::invalid_argument("paste_mask: degenerate box");
  if (b.degenerate()) return out;

  // Mask coordinates are taken relative to the unclipped box so clipping
  // does not stretch the content.
  const BBox full = box.normalized();
  const double bx0 = full.x0 * image_width, bx1 = full.x1 * image_width;
  const double by0 = full.y0 * image_height, by1 = full.y1 * image_height;
  const int s = soft.side();
  const int xs = std::max(0, static_cast<int>(std::floor(b.x0 * image_width)));
  const int xe = std::min(image_width, static_cast<int>(std::ceil(b.x1 * image_width)));
  const int ys = std::max(0, static_cast<int>(std::floor(b.y0 * image_height)));
  const int ye = std::min(image_height, static_cast<int>(std::ceil(b.y1 * image_height)));

  for (int y = ys; y < ye; ++y) {
    const double py = y + 0.5;
    if (py < by0 || py >= by1) continue;
    double v = (py - by0) / (by1 - by0) * s - 0.5;
    v = std::clamp(v, 0.0, static_cast<double>(s - 1));
    const int vlo = static_cast<int>(std::floor(v));
    const int vhi = std::min(vlo + 1, s - 1);
    const double lv = v - vlo;
    for (int x = xs; x < xe; ++x) {
      const double px = x + 0.5;
      if (px < bx0 || px >= bx1) continue;
      double u = (px - bx0) / (bx1 - bx0) * s - 0.5;
      u = std::clamp(u, 0.0, static_cast<double>(s - 1));
      const int ulo = static_cast<int>(std::floor(u));
      const int uhi = std::min(ulo + 1, s - 1);
      const double lu = u - ulo;
      out.at(y, x) = (1 - lv) * ((1 - lu) * soft.at(vlo, ulo) + lu * soft.at(vlo, uhi)) +
                     lv * ((1 - lu) * soft.at(vhi, ulo) + lu * soft.at(vhi, uhi));
    }
  }
  return out;
}

namespace {

int common_side(std::span<const Mask> masks) {
  if (masks.empty()) throw std::invalid_argument("need at least one mask");
  const int s = masks.front().side();
  for (const Mask& m : masks) {
    if (m.side() != s) throw DataError("masks do not share a common side");
  }
  return s;
}

// Largest-magnitude entry of every column made positive (first index wins ties).
void fix_signs(Eigen::MatrixXd& v) {
  for (Eigen::Index j = 0; j < v.cols(); ++j) {
    Eigen::Index arg = 0;
    double best = -1.0;
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      if (std::abs(v(i, j)) > best) {
        best = std::abs(v(i, j));
        arg = i;
      }
    }
    if (v(arg, j) < 0) v.col(j) *= -1.0;
  }
}

}  // namespace

PrincipalDecomposition decompose_masks(std::span<const Mask> masks, bool center) {
  const int s = common_side(masks);
  const Eigen::Index dim = static_cast<Eigen::Index>(s) * s;
  const Eigen::Index n = static_cast<Eigen::Index>(masks.size());

  Eigen::MatrixXd x(n, dim);
  for (Eigen::Index i = 0; i < n; ++i) x.row(i) = masks[static_cast<size_t>(i)].values().transpose();

  PrincipalDecomposition dec;
  dec.side = s;
  dec.centered = center;
  dec.mean = Vector::Zero(dim);
  if (center) {
    dec.mean = x.colwise().mean().transpose();
    x.rowwise() -= dec.mean.transpose();
  }
  Eigen::MatrixXd scatter = Eigen::MatrixXd::Zero(dim, dim);
  scatter.selfadjointView<Eigen::Lower>().rankUpdate(x.transpose());

  SymmetricEigen eig = symmetric_eigen(scatter);
  fix_signs(eig.vectors);
  dec.components = eig.vectors;
  dec.energy = eig.values.cwiseMax(0.0);
  return dec;
}

MaskCodec::MaskCodec(int side, Matrix basis, std::optional<Vector> mean, Vector spectrum)
    : side_(side), basis_(std::move(basis)), mean_(std::move(mean)), spectrum_(std::move(spectrum)) {
  const Eigen::Index d = static_cast<Eigen::Index>(side) * side;
  if (side < 1 || basis_.rows() != d || basis_.cols() < 1 || basis_.cols() > d) {
    throw DataError("mask codec basis must be side^2 x l with 1 <= l <= side^2");
  }
  if (mean_ && mean_->size() != d) throw DataError("mask codec mean must have side^2 entries");
  if (!basis_.allFinite()) throw DataError("mask codec basis is not finite");
}

MaskCodec MaskCodec::from_decomposition(const PrincipalDecomposition& dec, int dim) {
  const int full = static_cast<int>(dec.components.cols());
  if (dim < 1 || dim > full) throw std::invalid_argument("embedding dimension must lie in [1, side^2]");
  Matrix basis = dec.components.leftCols(dim);
  std::optional<Vector> mean;
  if (dec.centered) mean = dec.mean;
  return MaskCodec(dec.side, std::move(basis), std::move(mean), dec.energy);
}

Vector MaskCodec::encode(const Mask& m) const {
  if (m.side() != side_) throw DataError("encode: mask side does not match codec");
  if (mean_) return basis_.transpose() * (m.values() - *mean_);
  return basis_.transpose() * m.values();
}

Vector MaskCodec::decode_linear(const Vector& r) const {
  if (r.size() != basis_.cols()) throw DataError("decode: embedding dimension does not match codec");
  Vector out = basis_ * r;
  if (mean_) out += *mean_;
  return out;
}

Mask MaskCodec::decode(const Vector& r) const {
  return Mask(side_, decode_linear(r).cwiseMax(0.0).cwiseMin(1.0));
}

MaskCodec fit_codec(std::span<const Mask> masks, int dim, bool center) {
  const int s = common_side(masks);
  if (dim < 1 || dim > s * s) throw std::invalid_argument("embedding dimension must lie in [1, side^2]");
  return MaskCodec::from_decomposition(decompose_masks(masks, center), dim);
}

double reconstruction_error(const MaskCodec& codec, std::span<const Mask> masks) {
  double total = 0.0;
  for (const Mask& m : masks) {
    Vector centered = m.values();
    if (codec.mean()) centered -= *codec.mean();
    const Vector r = codec.basis().transpose() * centered;
    total += (centered - codec.basis() * r).squaredNorm();
  }
  return total;
}

std::vector<SpectrumEntry> energy_spectrum(const PrincipalDecomposition& dec, int top) {
  const double total = dec.energy.sum();
  const int count = std::clamp(top, 0, static_cast<int>(dec.energy.size()));
  std::vector<SpectrumEntry> out;
  out.reserve(static_cast<size_t>(count));
  for (int j = 0; j < count; ++j) out.push_back({j, total > 0.0 ? dec.energy[j] / total : 0.0});
  return out;
}

std::vector<SpectrumEntry> energy_spectrum(std::span<const Mask> masks, int top, bool center) {
  return energy_spectrum(decompose_masks(masks, center), top);
}

double binary_iou(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DataError("binary_iou: size mismatch");
  size_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const bool fa = a[i] >= 0.5, fb = b[i] >= 0.5;
    inter += (fa && fb) ? 1 : 0;
    uni += (fa || fb) ? 1 : 0;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double reconstruction_iou(const MaskCodec& codec, const Mask& m) {
  const Mask rec = codec.decode(codec.encode(m)).thresholded();
  return binary_iou(std::span(m.values().data(), static_cast<size_t>(m.values().size())),
                    std::span(rec.values().data(), static_cast<size_t>(rec.values().size())));
}

}  // namespace setseg
