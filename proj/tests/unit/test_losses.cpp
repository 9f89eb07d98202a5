#include "setseg/losses.hpp"

#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace setseg;
using doctest::Approx;

namespace {

std::span<const double> span_of(const Vector& v) { return {v.data(), static_cast<size_t>(v.size())}; }

Vector softmax(const Vector& z) {
  const Vector e = (z.array() - z.maxCoeff()).exp().matrix();
  return e / e.sum();
}

// Side-2 codec whose basis is the identity: encode and decode are exact.
MaskCodec identity_codec() {
  return MaskCodec(2, Matrix::Identity(4, 4), std::nullopt, Vector::Ones(4));
}

// Side-2 codec spanning the first two pixels only.
MaskCodec two_pixel_codec() {
  return MaskCodec(2, Matrix::Identity(4, 2), std::nullopt, Vector::Ones(4));
}

Mask mask_of(std::initializer_list<double> v) {
  Vector x(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double e : v) x[i++] = e;
  return Mask(2, x);
}

MaskCodec shape_codec(int side, int dim) {
  Rng rng(23);
  std::vector<Mask> masks;
  for (int i = 0; i < 60; ++i) masks.push_back(testing::random_shape_mask(rng, side));
  return fit_codec(masks, dim);
}

// True when every coordinate comparison inside box_loss is at least `margin`
// away from its switching point.
bool box_pair_smooth(const BBox& g, const BBox& p, double margin) {
  const CenterBox a = g.to_center(), b = p.to_center();
  const double d[] = {a.cx - b.cx, a.cy - b.cy, a.w - b.w, a.h - b.h,
                      g.x0 - p.x0, g.y0 - p.y0, g.x1 - p.x1, g.y1 - p.y1,
                      std::min(g.x1, p.x1) - std::max(g.x0, p.x0), std::min(g.y1, p.y1) - std::max(g.y0, p.y0)};
  for (double v : d) {
    if (std::abs(v) < margin) return false;
  }
  return true;
}

bool decode_smooth(const MaskCodec& codec, const Vector& r, double margin) {
  const Vector lin = codec.decode_linear(r);
  for (Eigen::Index i = 0; i < lin.size(); ++i) {
    if (std::abs(lin[i]) < margin || std::abs(lin[i] - 1.0) < margin) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("focal_loss examples") {
  const std::vector<double> p{0.5, 0.3, 0.2};
  CHECK(focal_loss(p, 0, {1.0, 0.0}) == Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(focal_loss(p, 1, {1.0, 0.0}) == Approx(-std::log(0.3)).epsilon(1e-15));
  const std::vector<double> certain{0.0, 1.0, 0.0};
  CHECK(focal_loss(certain, 1) == 0.0);
  CHECK(focal_loss(p, 0) == Approx(0.25 * 0.25 * std::log(2.0)).epsilon(1e-14));
  CHECK(focal_loss(p, 0) == Approx(0.04332).epsilon(1e-4));

  // Zero probability is floored before the logarithm.
  CHECK(focal_loss(certain, 0, {1.0, 0.0}) == Approx(-std::log(kProbabilityFloor)).epsilon(1e-14));
  CHECK(std::isfinite(focal_loss(certain, 0)));

  CHECK_THROWS_AS(focal_loss(p, 3), DataError);
  CHECK_THROWS_AS(focal_loss(p, -1), DataError);
}

TEST_CASE("focal_loss decreases in p_t") {
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const FocalParams fp{rng.uniform(0.05, 1.0), rng.uniform(0.0, 4.0)};
    double prev = std::numeric_limits<double>::infinity();
    for (int i = 1; i <= 100; ++i) {
      const double pt = i / 100.0;
      const std::vector<double> p{pt, 1.0 - pt};
      const double v = focal_loss(p, 0, fp);
      CHECK(v <= prev);
      prev = v;
    }
  }
}

TEST_CASE("focal_loss derivatives") {
  const GradCheckOptions opt;
  SUBCASE("logits at p_t = 0.5") {
    Vector z(3);
    z << std::log(2.0), std::log(1.0), std::log(1.0);  // softmax = (0.5, 0.25, 0.25)
    const Vector p = softmax(z);
    REQUIRE(p[0] == Approx(0.5).epsilon(1e-15));
    const Vector g = focal_loss_grad_logits(span_of(p), 0);
    const auto f = [](const Vector& x) {
      const Vector q = softmax(x);
      return focal_loss(span_of(q), 0);
    };
    CHECK(grad_check(f, g, z, opt).max_rel_error <= 1e-5);
  }
  SUBCASE("random logits and parameters") {
    Rng rng(2);
    for (int t = 0; t < 100; ++t) {
      Vector z(5);
      for (int i = 0; i < 5; ++i) z[i] = rng.uniform(-2.0, 2.0);
      const int target = rng.uniform_int(0, 4);
      const FocalParams fp{rng.uniform(0.1, 1.0), rng.uniform(0.0, 3.0)};
      const Vector p = softmax(z);
      const auto f = [&](const Vector& x) {
        const Vector q = softmax(x);
        return focal_loss(span_of(q), target, fp);
      };
      CHECK(grad_check(f, focal_loss_grad_logits(span_of(p), target, fp), z, opt).max_rel_error <= 1e-4);

      const double h = 1e-6;
      std::vector<double> hi(p.data(), p.data() + 5), lo = hi;
      hi[static_cast<size_t>(target)] += h;
      lo[static_cast<size_t>(target)] -= h;
      const double numeric = (focal_loss(hi, target, fp) - focal_loss(lo, target, fp)) / (2 * h);
      CHECK(relative_error(focal_loss_dprob(span_of(p), target, fp), numeric, 1e-6) <= 1e-4);
    }
  }
}

TEST_CASE("dice_loss examples") {
  const std::vector<double> m{1, 0, 1, 1};
  CHECK(dice_loss(m, m) == 0.0);
  const std::vector<double> zero(4, 0.0);
  CHECK(dice_loss(zero, zero) == 0.0);

  const int s = 8;
  std::vector<double> ones(s * s, 1.0), half(s * s, 0.0);
  for (int i = 0; i < s * s / 2; ++i) half[static_cast<size_t>(i)] = 1.0;
  CHECK(dice_loss(ones, half, 0.0) == Approx(1.0 / 3.0).epsilon(1e-15));
  // eps = 1: 1 - (64 + 1) / (96 + 1)
  CHECK(dice_loss(ones, half) == Approx(1.0 - 65.0 / 97.0).epsilon(1e-15));

  CHECK_THROWS_AS(dice_loss(ones, m), DataError);
}

TEST_CASE("dice_loss range, symmetry and gradient") {
  Rng rng(3);
  for (int t = 0; t < 200; ++t) {
    const Mask a = testing::random_mask(rng, 6, rng.uniform(0.0, 1.0));
    const Mask b = testing::random_mask(rng, 6, rng.uniform(0.0, 1.0));
    const double eps = rng.uniform(0.0, 2.0) < 0.2 ? 0.0 : rng.uniform(0.1, 2.0);
    if (eps == 0.0 && a.area() + b.area() == 0.0) continue;
    const double d = dice_loss(span_of(a.values()), span_of(b.values()), eps);
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
    CHECK(d == Approx(dice_loss(span_of(b.values()), span_of(a.values()), eps)).epsilon(1e-15));
  }
  for (int t = 0; t < 100; ++t) {
    Vector soft(25);
    for (int i = 0; i < 25; ++i) soft[i] = rng.uniform(0.0, 1.0);
    const Mask gt = testing::random_mask(rng, 5);
    const double eps = rng.uniform(0.1, 2.0);
    const auto f = [&](const Vector& x) { return dice_loss(span_of(x), span_of(gt.values()), eps); };
    CHECK(grad_check(f, dice_loss_grad(span_of(soft), span_of(gt.values()), eps), soft).max_rel_error <= 1e-4);
  }
}

TEST_CASE("l2_embedding_loss examples") {
  Vector a(3), b(3);
  a << 0.3, -1.2, 2.0;
  CHECK(l2_embedding_loss(a, a) == 0.0);
  a << 1, 0, 0;
  b << 0, 0, 0;
  CHECK(l2_embedding_loss(a, b) == 1.0);
  b = Vector::Zero(3);
  b[1] = 1.0;
  a = Vector::Zero(3);
  a[1] = 2.0;
  CHECK(l2_embedding_loss(a, b) == 1.0);
  CHECK_THROWS_AS(l2_embedding_loss(a, Vector::Zero(2)), DataError);
}

TEST_CASE("box_loss matches box_cost and its gradient") {
  Rng rng(4);
  const CostWeights w;
  int checked = 0;
  while (checked < 200) {
    const BBox g = testing::random_box(rng), p = testing::random_box(rng);
    if (!box_pair_smooth(g, p, 1e-3)) continue;
    ++checked;
    std::array<double, 4> grad{};
    CHECK(box_loss(g, p, w, &grad) == box_cost(g, p, w));
    const Vector x = Eigen::Map<const Vector>(p.as_array().data(), 4);
    const Vector analytic = Eigen::Map<const Vector>(grad.data(), 4);
    const auto f = [&](const Vector& v) { return box_loss(g, BBox::from_array(std::span<const double>(v.data(), 4)), w); };
    CHECK(grad_check(f, analytic, x).max_rel_error <= 1e-4);
  }
  SUBCASE("disjoint boxes") {
    const BBox g{0.1, 0.1, 0.3, 0.3}, p{0.55, 0.6, 0.9, 0.85};
    REQUIRE(box_pair_smooth(g, p, 1e-3));
    std::array<double, 4> grad{};
    box_loss(g, p, w, &grad);
    const Vector x = Eigen::Map<const Vector>(p.as_array().data(), 4);
    const auto f = [&](const Vector& v) { return box_loss(g, BBox::from_array(std::span<const double>(v.data(), 4)), w); };
    CHECK(grad_check(f, Eigen::Map<const Vector>(grad.data(), 4), x).max_rel_error <= 1e-4);
  }
}

TEST_CASE("mask_loss examples") {
  const MaskCodec codec = two_pixel_codec();
  const Mask in_span = mask_of({1, 1, 0, 0});
  CHECK(mask_loss(in_span, codec.encode(in_span), codec, 2.0) == 0.0);

  // r = 0: embedding term ||g||^2 = 1, decoded mask is all zero.
  const Mask m = mask_of({1, 0, 0, 1});
  const double l2 = 1.0;
  const double dice = 1.0 - 1.0 / (2.0 + 1.0);
  CHECK(mask_loss(m, Vector::Zero(2), codec, 2.0) == Approx(2.0 * (l2 + dice)).epsilon(1e-15));

  const MaskCodec shapes = shape_codec(10, 8);
  Rng rng(5);
  for (int t = 0; t < 50; ++t) {
    const Mask mm = testing::random_shape_mask(rng, 10);
    Vector r(8);
    for (int i = 0; i < 8; ++i) r[i] = rng.normal();
    const Vector soft = shapes.decode_linear(r).cwiseMax(0.0).cwiseMin(1.0);
    const double a = l2_embedding_loss(r, shapes.encode(mm));
    const double b = dice_loss(span_of(soft), span_of(mm.values()));
    const double lambda = rng.uniform(0.5, 3.0);
    CHECK(mask_loss(mm, r, shapes, lambda) == Approx(lambda * (a + b)).epsilon(1e-13));
  }
}

TEST_CASE("mask_loss gradient") {
  Rng rng(6);
  for (bool center : {false, true}) {
    std::vector<Mask> masks;
    for (int i = 0; i < 60; ++i) masks.push_back(testing::random_shape_mask(rng, 10));
    const MaskCodec codec = fit_codec(masks, 12, center);
    int checked = 0;
    while (checked < 60) {
      const Mask m = testing::random_shape_mask(rng, 10);
      Vector r = codec.encode(m);
      for (int i = 0; i < r.size(); ++i) r[i] += rng.normal() * 0.5;
      if (!decode_smooth(codec, r, 1e-3)) continue;
      ++checked;
      Vector grad;
      mask_loss(m, r, codec, 2.0, 1.0, &grad);
      const auto f = [&](const Vector& x) { return mask_loss(m, x, codec, 2.0); };
      CHECK(grad_check(f, grad, r).max_rel_error <= 1e-4);
    }
  }
}

TEST_CASE("mask_loss decreases toward the target embedding") {
  const MaskCodec codec = shape_codec(12, 16);
  Rng rng(7);
  for (int t = 0; t < 100; ++t) {
    const Mask m = testing::random_shape_mask(rng, 12);
    const Vector g = codec.encode(m);
    Vector u(g.size());
    for (int i = 0; i < u.size(); ++i) u[i] = rng.normal();
    u *= rng.uniform(1.0, 3.0) / u.norm();
    double prev = mask_loss(m, g + u, codec, 2.0);
    for (double step : {0.5, 0.25, 0.125}) {
      const double cur = mask_loss(m, g + step * u, codec, 2.0);
      CHECK(cur < prev);
      prev = cur;
    }
  }
}

TEST_CASE("set_loss hand-built instance") {
  const MaskCodec codec = two_pixel_codec();
  GroundTruthSet gt;
  gt.boxes = {{0.0, 0.0, 0.5, 0.5}, {0.5, 0.5, 1.0, 1.0}};
  gt.classes = {0, 1};
  gt.masks = {mask_of({1, 0, 0, 0}), mask_of({0, 1, 0, 0})};

  PredictionSet pred;
  pred.boxes = {{0.0, 0.0, 0.5, 0.5}, {0.5, 0.5, 1.0, 0.9}, {0.1, 0.1, 0.2, 0.2}, {0.3, 0.3, 0.9, 0.9}};
  pred.probs.resize(4, 3);
  pred.probs << 0.5, 0.25, 0.25,  //
      0.2, 0.6, 0.2,              //
      0.1, 0.1, 0.8,              //
      0.25, 0.25, 0.5;
  pred.embeddings.resize(4, 2);
  pred.embeddings << 1, 0,  //
      0, 0.5,               //
      0.3, 0.3,             //
      -1, 2;
  const Assignment sigma{{0, 1}, 0.0};

  // Pair 1: centers (0.75,0.75,0.5,0.5) vs (0.75,0.7,0.5,0.4): L1 0.15; giou 0.2/0.25.
  // Decoded soft mask (0,0.5,0,0): dice 1 - 2/2.5.
  const double box_l1 = 0.15 / 2;
  const double box_giou = (1.0 - 0.8) / 2;
  const double cls = (0.0625 * std::log(2.0) - 0.25 * 0.16 * std::log(0.6)) / 2;
  const double cls_bg = (-0.25 * 0.04 * std::log(0.8) + 0.0625 * std::log(2.0)) / 2;
  const double mask_l2 = 0.25 / 2;
  const double mask_dice = 0.2 / 2;
  const double total = 5 * box_l1 + 2 * box_giou + 2 * (cls + cls_bg) + 2 * (mask_l2 + mask_dice);

  const LossBreakdown b = set_loss(gt, pred, sigma, codec);
  CHECK(b.matched == 2);
  CHECK(b.box_l1 == Approx(box_l1).epsilon(1e-13));
  CHECK(b.box_giou == Approx(box_giou).epsilon(1e-13));
  CHECK(b.cls == Approx(cls).epsilon(1e-13));
  CHECK(b.cls_background == Approx(cls_bg).epsilon(1e-13));
  CHECK(b.mask_l2 == Approx(mask_l2).epsilon(1e-13));
  CHECK(b.mask_dice == Approx(mask_dice).epsilon(1e-13));
  CHECK(b.total == Approx(total).epsilon(1e-13));
  CHECK(std::abs(b.total - (5 * b.box_l1 + 2 * b.box_giou + 2 * (b.cls + b.cls_background) +
                            2 * (b.mask_l2 + b.mask_dice))) <= 1e-9);

  SUBCASE("components equal standalone evaluations") {
    double l1 = 0, gi = 0, c = 0, mk = 0;
    for (int i = 0; i < 2; ++i) {
      const int j = sigma.prediction_for_gt[static_cast<size_t>(i)];
      l1 += box_l1_distance(gt.boxes[static_cast<size_t>(i)], pred.boxes[static_cast<size_t>(j)]);
      gi += 1.0 - giou(gt.boxes[static_cast<size_t>(i)], pred.boxes[static_cast<size_t>(j)]);
      const Vector p = pred.probs.row(j).transpose();
      c += focal_loss(span_of(p), gt.classes[static_cast<size_t>(i)]);
      mk += mask_loss(gt.masks[static_cast<size_t>(i)], pred.embeddings.row(j).transpose(), codec, 1.0);
    }
    CHECK(b.box_l1 == Approx(l1 / 2).epsilon(1e-14));
    CHECK(b.box_giou == Approx(gi / 2).epsilon(1e-14));
    CHECK(b.cls == Approx(c / 2).epsilon(1e-14));
    CHECK(b.mask_l2 + b.mask_dice == Approx(mk / 2).epsilon(1e-14));
  }

  SUBCASE("no ground truth leaves only the background term") {
    const LossBreakdown e = set_loss(GroundTruthSet{}, pred, Assignment{}, codec);
    CHECK(e.matched == 0);
    CHECK(e.box_l1 == 0.0);
    CHECK(e.mask_l2 == 0.0);
    double bg = 0.0;
    for (int j = 0; j < 4; ++j) {
      const Vector p = pred.probs.row(j).transpose();
      bg += focal_loss(span_of(p), 2);
    }
    CHECK(e.cls_background == Approx(bg / 4).epsilon(1e-14));
    CHECK(e.total == Approx(2.0 * bg / 4).epsilon(1e-14));
  }

  SUBCASE("invalid assignments") {
    CHECK_THROWS_AS(set_loss(gt, pred, Assignment{{0, 4}, 0.0}, codec), DataError);
    CHECK_THROWS_AS(set_loss(gt, pred, Assignment{{1, 1}, 0.0}, codec), DataError);
    CHECK_THROWS_AS(set_loss(gt, pred, Assignment{{0}, 0.0}, codec), DataError);
  }
}

TEST_CASE("set_loss vanishes for perfect predictions and is nonnegative") {
  const MaskCodec codec = identity_codec();
  Rng rng(8);
  for (int t = 0; t < 50; ++t) {
    const int n = rng.uniform_int(0, 3), k = n + rng.uniform_int(1, 3);
    GroundTruthSet gt;
    PredictionSet pred;
    pred.probs = Matrix::Zero(k, 4);
    pred.embeddings = Matrix::Zero(k, 4);
    for (int j = 0; j < k; ++j) {
      pred.boxes.push_back(testing::random_box(rng));
      pred.probs(j, 3) = 1.0;
    }
    Assignment sigma;
    for (int i = 0; i < n; ++i) {
      const Mask m = testing::random_mask(rng, 2);
      gt.boxes.push_back(testing::random_box(rng));
      gt.classes.push_back(rng.uniform_int(0, 2));
      gt.masks.push_back(m);
      const int j = k - 1 - i;
      pred.boxes[static_cast<size_t>(j)] = gt.boxes.back();
      pred.probs.row(j).setZero();
      pred.probs(j, gt.classes.back()) = 1.0;
      pred.embeddings.row(j) = m.values().transpose();
      sigma.prediction_for_gt.push_back(j);
    }
    CHECK(std::abs(set_loss(gt, pred, sigma, codec).total) <= 1e-12);

    // Any perturbation keeps the loss nonnegative.
    PredictionSet noisy = pred;
    for (int j = 0; j < k; ++j) {
      noisy.probs.row(j) = softmax(Vector::Random(4) * 3.0).transpose();
      noisy.embeddings.row(j) += Vector::Random(4).transpose();
    }
    CHECK(set_loss(gt, noisy, sigma, codec).total >= 0.0);
  }
}

TEST_CASE("set_loss gradient on random instances") {
  Rng rng(9);
  const MaskCodec codec = shape_codec(10, 8);
  const SetLossConfig cfg;
  int checked = 0;
  while (checked < 20) {
    const int n = rng.uniform_int(1, 3), k = n + rng.uniform_int(1, 3);
    GroundTruthSet gt;
    for (int i = 0; i < n; ++i) {
      gt.boxes.push_back(testing::random_box(rng));
      gt.classes.push_back(rng.uniform_int(0, 2));
      gt.masks.push_back(testing::random_shape_mask(rng, 10));
    }
    PredictionSet pred;
    pred.probs.resize(k, 4);
    pred.embeddings.resize(k, 8);
    for (int j = 0; j < k; ++j) {
      pred.boxes.push_back(testing::random_box(rng));
      Vector z(4);
      for (int c = 0; c < 4; ++c) z[c] = rng.uniform(-2.0, 2.0);
      pred.probs.row(j) = softmax(z).transpose();
      for (int c = 0; c < 8; ++c) pred.embeddings(j, c) = rng.normal();
    }
    const Assignment sigma = match(gt, pred, codec, cfg.weights);
    bool smooth = true;
    for (int i = 0; i < n; ++i) {
      const int j = sigma.prediction_for_gt[static_cast<size_t>(i)];
      smooth = smooth && box_pair_smooth(gt.boxes[static_cast<size_t>(i)], pred.boxes[static_cast<size_t>(j)], 1e-3) &&
               decode_smooth(codec, pred.embeddings.row(j).transpose(), 1e-3);
    }
    if (!smooth) continue;
    ++checked;

    SetLossGradient grad;
    set_loss(gt, pred, sigma, codec, cfg, &grad);

    // Boxes, probabilities and embeddings flattened into one point.
    const Eigen::Index nb = k * 4, np = k * 4, ne = k * 8;
    Vector x(nb + np + ne), analytic(nb + np + ne);
    for (int j = 0; j < k; ++j) {
      for (int c = 0; c < 4; ++c) {
        x[j * 4 + c] = pred.boxes[static_cast<size_t>(j)].as_array()[static_cast<size_t>(c)];
        analytic[j * 4 + c] = grad.boxes(j, c);
        x[nb + j * 4 + c] = pred.probs(j, c);
        analytic[nb + j * 4 + c] = grad.probs(j, c);
      }
      for (int c = 0; c < 8; ++c) {
        x[nb + np + j * 8 + c] = pred.embeddings(j, c);
        analytic[nb + np + j * 8 + c] = grad.embeddings(j, c);
      }
    }
    const auto f = [&](const Vector& v) {
      PredictionSet p = pred;
      for (int j = 0; j < k; ++j) {
        p.boxes[static_cast<size_t>(j)] = BBox::from_array(std::span<const double>(v.data() + j * 4, 4));
        for (int c = 0; c < 4; ++c) p.probs(j, c) = v[nb + j * 4 + c];
        for (int c = 0; c < 8; ++c) p.embeddings(j, c) = v[nb + np + j * 8 + c];
      }
      return set_loss(gt, p, sigma, codec, cfg).total;
    };
    CHECK(grad_check(f, analytic, x).max_rel_error <= 1e-4);
  }
}

TEST_CASE("grad_check reference behavior") {
  Vector c(5), x(5);
  c << 1.5, -2.0, 0.25, 3.0, -0.75;
  x << 0.1, 0.2, -0.3, 0.4, 0.5;
  const auto linear = [&](const Vector& v) { return c.dot(v); };
  const GradCheckResult exact = grad_check(linear, c, x);
  CHECK(exact.max_rel_error <= 1e-10);

  Vector wrong = c;
  wrong[3] += 0.1;
  const GradCheckResult bad = grad_check(linear, wrong, x);
  CHECK(bad.worst_index == 3);
  CHECK(bad.max_rel_error > 1e-2);
  CHECK(bad.numeric == Approx(3.0).epsilon(1e-9));

  CHECK(relative_error(1.0, 1.0, 1e-6) == 0.0);
  CHECK(relative_error(1e-9, 0.0, 1e-6) == Approx(1e-3));
  CHECK_THROWS_AS(grad_check(linear, Vector::Zero(4), x), std::invalid_argument);
}
