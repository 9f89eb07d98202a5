#include "setseg/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace setseg {

BBox BBox::normalized() const {
  return {std::min(x0, x1), std::min(y0, y1), std::max(x0, x1), std::max(y0, y1)};
}

BBox BBox::clipped_unit() const {
  auto c = [](double v) { return std::clamp(v, 0.0, 1.0); };
  return {c(x0), c(y0), c(x1), c(y1)};
}

std::array<double, 4> box_convert(const std::array<double, 4>& v, BoxFormat from, BoxFormat to) {
  if (from == to) return v;
  if (from == BoxFormat::kCorner) {
    const CenterBox c = BBox::from_array(v).to_center();
    return {c.cx, c.cy, c.w, c.h};
  }
  return BBox::from_center({v[0], v[1], v[2], v[3]}).as_array();
}

namespace {

struct Overlap {
  double inter = 0.0;
  double uni = 0.0;
  double enclosing = 0.0;
};

Overlap overlap(const BBox& a, const BBox& b) {
  const double iw = std::max(0.0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
  const double ih = std::max(0.0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
  Overlap o;
  o.inter = iw * ih;
  o.uni = a.area() + b.area() - o.inter;
  const double ew = std::max(a.x1, b.x1) - std::min(a.x0, b.x0);
  const double eh = std::max(a.y1, b.y1) - std::min(a.y0, b.y0);
  o.enclosing = std::max(0.0, ew) * std::max(0.0, eh);
  return o;
}

}  // namespace

double iou(const BBox& a, const BBox& b) {
  const Overlap o = overlap(a, b);
  if (o.uni <= 0.0) return 0.0;
  return o.inter / o.uni;
}

double giou(const BBox& a, const BBox& b) {
  const Overlap o = overlap(a, b);
  const double plain = o.uni > 0.0 ? o.inter / o.uni : 0.0;
  if (o.enclosing <= 0.0) return plain;
  return plain - (o.enclosing - o.uni) / o.enclosing;
}

BBox apply_box_delta(const BBox& b, const BoxDelta& delta, double clamp) {
  return apply_box_delta(b, delta, clamp, nullptr);
}

BBox apply_box_delta(const BBox& b, const BoxDelta& delta, double clamp, BoxDeltaJacobian* jac) {
  const double raw_w = b.x1 - b.x0;
  const double raw_h = b.y1 - b.y0;
  const bool lift_w = raw_w < kMinBoxExtent;
  const bool lift_h = raw_h < kMinBoxExtent;
  const double w = lift_w ? kMinBoxExtent : raw_w;
  const double h = lift_h ? kMinBoxExtent : raw_h;
  const double cx = 0.5 * (b.x0 + b.x1);
  const double cy = 0.5 * (b.y0 + b.y1);

  const bool clamp_w = std::abs(delta.d_w) > clamp;
  const bool clamp_h = std::abs(delta.d_h) > clamp;
  const double ew = std::exp(std::clamp(delta.d_w, -clamp, clamp));
  const double eh = std::exp(std::clamp(delta.d_h, -clamp, clamp));

  const double ncx = cx + delta.d_cx * w;
  const double ncy = cy + delta.d_cy * h;
  const double nw = w * ew;
  const double nh = h * eh;
  const double raw[4] = {ncx - 0.5 * nw, ncy - 0.5 * nh, ncx + 0.5 * nw, ncy + 0.5 * nh};

  BBox out{std::clamp(raw[0], 0.0, 1.0), std::clamp(raw[1], 0.0, 1.0), std::clamp(raw[2], 0.0, 1.0),
           std::clamp(raw[3], 0.0, 1.0)};

  if (jac != nullptr) {
    // Derivatives of (center, size) with respect to the input corners and the
    // residuals; the lifted extents are constants.
    const double dw_dx0 = lift_w ? 0.0 : -1.0;
    const double dw_dx1 = lift_w ? 0.0 : 1.0;
    const double dh_dy0 = lift_h ? 0.0 : -1.0;
    const double dh_dy1 = lift_h ? 0.0 : 1.0;

    // x axis: coordinates 0 (x0) and 2 (x1); y axis: 1 (y0) and 3 (y1).
    auto fill_axis = [&](int lo, int hi, double d, double e, double dsz_dlo, double dsz_dhi, double size,
                         bool clamped, int dcenter_idx, int dsize_idx) {
      const double dc_dlo = 0.5 + d * dsz_dlo;
      const double dc_dhi = 0.5 + d * dsz_dhi;
      const double dn_dlo = e * dsz_dlo;
      const double dn_dhi = e * dsz_dhi;
      const double dn_dsize_delta = clamped ? 0.0 : size * e;
      // out_lo = c - n/2, out_hi = c + n/2
      jac->wrt_box(lo, lo) = dc_dlo - 0.5 * dn_dlo;
      jac->wrt_box(lo, hi) = dc_dhi - 0.5 * dn_dhi;
      jac->wrt_box(hi, lo) = dc_dlo + 0.5 * dn_dlo;
      jac->wrt_box(hi, hi) = dc_dhi + 0.5 * dn_dhi;
      jac->wrt_delta(lo, dcenter_idx) = size;
      jac->wrt_delta(hi, dcenter_idx) = size;
      jac->wrt_delta(lo, dsize_idx) = -0.5 * dn_dsize_delta;
      jac->wrt_delta(hi, dsize_idx) = 0.5 * dn_dsize_delta;
    };
    *jac = BoxDeltaJacobian{};
    fill_axis(0, 2, delta.d_cx, ew, dw_dx0, dw_dx1, w, clamp_w, 0, 2);
    fill_axis(1, 3, delta.d_cy, eh, dh_dy0, dh_dy1, h, clamp_h, 1, 3);
    for (int r = 0; r < 4; ++r) {
      if (raw[r] < 0.0 || raw[r] > 1.0) {
        jac->wrt_box.row(r).setZero();
        jac->wrt_delta.row(r).setZero();
      }
    }
  }
  return out;
}

BoxDelta box_delta_between(const BBox& from, const BBox& to) {
  const CenterBox a = from.to_center();
  const CenterBox b = to.to_center();
  return {(b.cx - a.cx) / a.w, (b.cy - a.cy) / a.h, std::log(b.w / a.w), std::log(b.h / a.h)};
}

FeatureMap::FeatureMap(int h, int w, Matrix v) : height(h), width(w), channels(static_cast<int>(v.cols())), values(std::move(v)) {
  if (values.rows() != static_cast<Eigen::Index>(h) * w) throw DataError("feature map row count does not match height*width");
}

RoiTaps roi_align_taps(int height, int width, const BBox& box, const RoiAlignOptions& opt) {
  if (opt.output_size < 1) throw std::invalid_argument("roi_align: output size must be >= 1");
  if (height < 1 || width < 1) throw std::invalid_argument("roi_align: empty feature map");

  const double offset = opt.aligned ? 0.5 : 0.0;
  const double x0 = box.x0 * width - offset;
  const double y0 = box.y0 * height - offset;
  double roi_w = (box.x1 - box.x0) * width;
  double roi_h = (box.y1 - box.y0) * height;
  if (!opt.aligned) {
    roi_w = std::max(roi_w, 1.0);
    roi_h = std::max(roi_h, 1.0);
  }
  const int t = opt.output_size;
  const double bin_w = roi_w / t;
  const double bin_h = roi_h / t;
  const int sr_x = opt.sampling_ratio > 0 ? opt.sampling_ratio : std::max(1, static_cast<int>(std::ceil(bin_w)));
  const int sr_y = opt.sampling_ratio > 0 ? opt.sampling_ratio : std::max(1, static_cast<int>(std::ceil(bin_h)));
  const double norm = 1.0 / (sr_x * sr_y);

  RoiTaps taps;
  taps.bins.resize(static_cast<size_t>(t) * t);
  for (int by = 0; by < t; ++by) {
    for (int bx = 0; bx < t; ++bx) {
      auto& bin = taps.bins[static_cast<size_t>(by) * t + bx];
      bin.reserve(static_cast<size_t>(4 * sr_x * sr_y));
      for (int iy = 0; iy < sr_y; ++iy) {
        double y = y0 + bin_h * (by + (iy + 0.5) / sr_y);
        y = std::clamp(y, 0.0, static_cast<double>(height - 1));
        const int ylo = static_cast<int>(std::floor(y));
        const int yhi = std::min(ylo + 1, height - 1);
        const double ly = y - ylo;
        for (int ix = 0; ix < sr_x; ++ix) {
          double x = x0 + bin_w * (bx + (ix + 0.5) / sr_x);
          x = std::clamp(x, 0.0, static_cast<double>(width - 1));
          const int xlo = static_cast<int>(std::floor(x));
          const int xhi = std::min(xlo + 1, width - 1);
          const double lx = x - xlo;
          bin.emplace_back(ylo * width + xlo, norm * (1.0 - ly) * (1.0 - lx));
          bin.emplace_back(ylo * width + xhi, norm * (1.0 - ly) * lx);
          bin.emplace_back(yhi * width + xlo, norm * ly * (1.0 - lx));
          bin.emplace_back(yhi * width + xhi, norm * ly * lx);
        }
      }
    }
  }
  return taps;
}

Matrix roi_align_apply(const Matrix& values, const RoiTaps& taps) {
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(taps.bins.size()), values.cols());
  for (size_t b = 0; b < taps.bins.size(); ++b) {
    auto row = out.row(static_cast<Eigen::Index>(b));
    for (const auto& [idx, w] : taps.bins[b]) {
      if (w != 0.0) row.noalias() += w * values.row(idx);
    }
  }
  return out;
}

Matrix roi_align(const FeatureMap& fm, const BBox& box, const RoiAlignOptions& opt) {
  return roi_align_apply(fm.values, roi_align_taps(fm.height, fm.width, box, opt));
}

int pyramid_level_for_box(const BBox& b, int levels, const LevelRule& rule) {
  if (levels < 1) throw std::invalid_argument("pyramid_level_for_box: need at least one level");
  if (levels == 1) return 0;
  const double side_px = std::sqrt(std::max(b.area(), 1e-12)) * rule.image_size;
  const double level = std::floor(rule.canonical_level + std::log2(side_px / rule.canonical_size));
  return static_cast<int>(std::clamp(level, 0.0, static_cast<double>(levels - 1)));
}

}  // namespace setseg
