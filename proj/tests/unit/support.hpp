#pragma once

#include "setseg/common.hpp"
#include "setseg/geometry.hpp"
#include "setseg/mask_codec.hpp"

#include <vector>

namespace setseg::testing {

inline BBox random_box(Rng& rng, double min_extent = 0.05) {
  const double w = rng.uniform(min_extent, 0.9), h = rng.uniform(min_extent, 0.9);
  const double x0 = rng.uniform(0.0, 1.0 - w), y0 = rng.uniform(0.0, 1.0 - h);
  return {x0, y0, x0 + w, y0 + h};
}

inline Mask random_mask(Rng& rng, int side, double p = 0.5) {
  Mask m(side);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) m.set(y, x, rng.uniform() < p ? 1.0 : 0.0);
  }
  return m;
}

/// Filled axis-aligned rectangle plus a random disk, binary.
inline Mask random_shape_mask(Rng& rng, int side) {
  Mask m(side);
  const int x0 = rng.uniform_int(0, side / 2), y0 = rng.uniform_int(0, side / 2);
  const int x1 = rng.uniform_int(x0 + 1, side), y1 = rng.uniform_int(y0 + 1, side);
  const double cx = rng.uniform(0, side), cy = rng.uniform(0, side), r = rng.uniform(2, side / 3.0);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const bool rect = x >= x0 && x < x1 && y >= y0 && y < y1;
      const bool disk = (x + 0.5 - cx) * (x + 0.5 - cx) + (y + 0.5 - cy) * (y + 0.5 - cy) <= r * r;
      m.set(y, x, rect || disk ? 1.0 : 0.0);
    }
  }
  return m;
}

}  // namespace setseg::testing
