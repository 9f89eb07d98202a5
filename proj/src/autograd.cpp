#include "setseg/autograd.hpp"

#include <cmath>

namespace setseg::ad {

Var Tape::push(Matrix value, bool needs_grad, Backward backward) {
  Node node;
  node.value = std::move(value);
  node.needs_grad = needs_grad;
  if (needs_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::accumulate(int id, const Matrix& g) {
  Node& node = nodes_[static_cast<size_t>(id)];
  if (!node.needs_grad) return;
  if (node.grad.size() == 0) {
    node.grad = g;
  } else {
    node.grad += g;
  }
}

void Tape::backward(Var root) {
  if (root.rows() != 1 || root.cols() != 1) throw std::invalid_argument("backward: root must be a 1x1 scalar");
  for (Node& node : nodes_) node.grad.resize(0, 0);
  accumulate(root.id, Matrix::Ones(1, 1));
  for (int i = root.id; i >= 0; --i) {
    Node& node = nodes_[static_cast<size_t>(i)];
    if (!node.needs_grad || node.grad.size() == 0 || !node.backward) continue;
    node.backward(*this, node.grad);
  }
}

Matrix Tape::grad(Var v) const {
  const Node& node = nodes_[static_cast<size_t>(v.id)];
  if (node.grad.size() == 0) return Matrix::Zero(node.value.rows(), node.value.cols());
  return node.grad;
}

Var ParamBinder::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  auto found = store_.find(name);
  if (found == store_.end()) throw std::out_of_range("unknown parameter: " + name);
  Var v = trainable_ ? tape_.variable(found->second) : tape_.constant(found->second);
  bound_.emplace(name, v);
  return v;
}

ParamStore ParamBinder::gradients() const {
  ParamStore out;
  for (const auto& [name, value] : store_) {
    auto it = bound_.find(name);
    out[name] = it == bound_.end() ? Matrix::Zero(value.rows(), value.cols()) : tape_.grad(it->second);
  }
  return out;
}

namespace {

Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw std::invalid_argument("variable is not attached to a tape");
  return *a.tape;
}

void require_same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw std::invalid_argument("variables belong to different tapes");
}

void require_shape(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(std::string("shape mismatch in ") + what);
}

}  // namespace

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  require_shape(a.cols() == b.rows(), "matmul");
  Tape& t = tape_of(a);
  const int ia = a.id, ib = b.id;
  Matrix out = a.value() * b.value();
  return t.push(std::move(out), t.needs_grad(a) || t.needs_grad(b), [ia, ib](Tape& tp, const Matrix& g) {
    if (tp.needs_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
    if (tp.needs_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  require_same_tape(a, b);
  require_shape(a.cols() == b.cols(), "matmul_nt");
  Tape& t = tape_of(a);
  const int ia = a.id, ib = b.id;
  Matrix out = a.value() * b.value().transpose();
  return t.push(std::move(out), t.needs_grad(a) || t.needs_grad(b), [ia, ib](Tape& tp, const Matrix& g) {
    if (tp.needs_grad(ia)) tp.accumulate(ia, g * tp.value(ib));
    if (tp.needs_grad(ib)) tp.accumulate(ib, g.transpose() * tp.value(ia));
  });
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.id;
  Matrix out = a.value().transpose();
  return t.push(std::move(out), t.needs_grad(a), [ia](Tape& tp, const Matrix& g) { tp.accumulate(ia, g.transpose()); });
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add");
  Tape& t = tape_of(a);
  const int ia = a.id, ib = b.id;
  Matrix out = a.value() + b.value();
  return t.push(std::move(out), t.needs_grad(a) || t.needs_grad(b), [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    tp.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "sub");
  Tape& t = tape_of(a);
  const int ia = a.id, ib = b.id;
  Matrix out = a.value() - b.value();
  return t.push(std::move(out), t.needs_grad(a) || t.needs_grad(b), [ia, ib](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    if (tp.needs_grad(ib)) tp.accumulate(ib, -g);
  });
}

Var add_row(Var a, Var row) {
  require_same_tape(a, row);
  require_shape(row.rows() == 1 && row.cols() == a.cols(), "add_row");
  Tape& t = tape_of(a);
  const int ia = a.id, ir = row.id;
  Matrix out = a.value().rowwise() + row.value().row(0);
  return t.push(std::move(out), t.needs_grad(a) || t.needs_grad(row), [ia, ir](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g);
    if (tp.needs_grad(ir)) tp.accumulate(ir, g.colwise().sum());
  });
}

Var scale(Var a, double c) {
  Tape& t = tape_of(a);
  const int ia = a.id;
  Matrix out = c * a.value();
  return t.push(std::move(out), t.needs_grad(a), [ia, c](Tape& tp, const Matrix& g) { tp.accumulate(ia, c * g); });
}

Var hadamard(Var a, Var b) {
  require_same_tape(a, b);
  require_shape(a.rows() == b.rows() && a.cols() == b.cols(), "hadamard");
  Tape& t = tape_of(a);
  const int ia = a.id, ib = b.id;
  Matrix out = a.value().cwiseProduct(b.value());
  return t.push(std::move(out), t.needs_grad(a) || t.needs_grad(b), [ia, ib](Tape& tp, const Matrix& g) {
    if (tp.needs_grad(ia)) tp.accumulate(ia, g.cwiseProduct(tp.value(ib)));
    if (tp.needs_grad(ib)) tp.accumulate(ib, g.cwiseProduct(tp.value(ia)));
  });
}

Var sum(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.id;
  const Eigen::Index r = a.rows(), c = a.cols();
  Matrix out = Matrix::Constant(1, 1, a.value().sum());
  return t.push(std::move(out), t.needs_grad(a), [ia, r, c](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, Matrix::Constant(r, c, g(0, 0)));
  });
}

Var sum(const std::vector<Var>& scalars) {
  if (scalars.empty()) throw std::invalid_argument("sum of an empty list");
  Tape& t = tape_of(scalars.front());
  std::vector<int> ids;
  bool needs = false;
  double total = 0.0;
  for (Var v : scalars) {
    require_shape(v.rows() == 1 && v.cols() == 1, "sum(scalars)");
    ids.push_back(v.id);
    needs = needs || t.needs_grad(v);
    total += v.scalar();
  }
  return t.push(Matrix::Constant(1, 1, total), needs, [ids](Tape& tp, const Matrix& g) {
    for (int id : ids) tp.accumulate(id, g);
  });
}

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Var gelu(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.id;
  Matrix out = a.value().unaryExpr([](double x) { return gelu_value(x); });
  return t.push(std::move(out), t.needs_grad(a), [ia](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, g.cwiseProduct(tp.value(ia).unaryExpr([](double x) { return gelu_derivative(x); })));
  });
}

Var sigmoid(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.id;
  Matrix out = a.value().unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  const int io = static_cast<int>(t.size());
  return t.push(std::move(out), t.needs_grad(a), [ia, io](Tape& tp, const Matrix& g) {
    const Matrix& y = tp.value(io);
    tp.accumulate(ia, g.cwiseProduct(y.cwiseProduct((1.0 - y.array()).matrix())));
  });
}

Var clamp(Var a, double lo, double hi) {
  Tape& t = tape_of(a);
  const int ia = a.id;
  Matrix out = a.value().cwiseMax(lo).cwiseMin(hi);
  return t.push(std::move(out), t.needs_grad(a), [ia, lo, hi](Tape& tp, const Matrix& g) {
    const Matrix& x = tp.value(ia);
    Matrix d = g;
    for (Eigen::Index i = 0; i < d.size(); ++i) {
      if (x.data()[i] < lo || x.data()[i] > hi) d.data()[i] = 0.0;
    }
    tp.accumulate(ia, d);
  });
}

Var softmax_rows(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.id;
  Matrix out = a.value();
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    row.array() -= row.maxCoeff();
    row = row.array().exp().matrix();
    row /= row.sum();
  }
  const int io = static_cast<int>(t.size());
  return t.push(std::move(out), t.needs_grad(a), [ia, io](Tape& tp, const Matrix& g) {
    const Matrix& y = tp.value(io);
    Matrix d(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = g.row(r).dot(y.row(r));
      d.row(r) = y.row(r).cwiseProduct((g.row(r).array() - dot).matrix());
    }
    tp.accumulate(ia, d);
  });
}

Var layer_norm_rows(Var a, Var gamma, Var beta, double eps) {
  require_same_tape(a, gamma);
  require_same_tape(a, beta);
  require_shape(gamma.rows() == 1 && gamma.cols() == a.cols() && beta.rows() == 1 && beta.cols() == a.cols(),
                "layer_norm_rows");
  Tape& t = tape_of(a);
  const Matrix& x = a.value();
  const Eigen::Index n = x.cols();
  auto normalized = std::make_shared<Matrix>(x.rows(), n);
  auto inv_std = std::make_shared<Vector>(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    const double var = (x.row(r).array() - mean).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    normalized->row(r) = (x.row(r).array() - mean) * is;
  }
  Matrix out = (normalized->array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  const int ia = a.id, ig = gamma.id, ib = beta.id;
  const bool needs = t.needs_grad(a) || t.needs_grad(gamma) || t.needs_grad(beta);
  return t.push(std::move(out), needs, [ia, ig, ib, normalized, inv_std](Tape& tp, const Matrix& g) {
    const Matrix& xh = *normalized;
    if (tp.needs_grad(ig)) tp.accumulate(ig, g.cwiseProduct(xh).colwise().sum());
    if (tp.needs_grad(ib)) tp.accumulate(ib, g.colwise().sum());
    if (tp.needs_grad(ia)) {
      const Eigen::RowVectorXd gam = tp.value(ig).row(0);
      Matrix d(xh.rows(), xh.cols());
      for (Eigen::Index r = 0; r < xh.rows(); ++r) {
        const Eigen::RowVectorXd dy = g.row(r).cwiseProduct(gam);
        const double m1 = dy.mean();
        const double m2 = dy.dot(xh.row(r)) / static_cast<double>(xh.cols());
        d.row(r) = (*inv_std)[r] * (dy.array() - m1 - xh.row(r).array() * m2).matrix();
      }
      tp.accumulate(ia, d);
    }
  });
}

Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  require_shape(rows * cols == a.rows() * a.cols(), "reshape");
  Tape& t = tape_of(a);
  const int ia = a.id;
  const Eigen::Index r0 = a.rows(), c0 = a.cols();
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return t.push(std::move(out), t.needs_grad(a), [ia, r0, c0](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, Eigen::Map<const Matrix>(g.data(), r0, c0));
  });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  require_shape(start >= 0 && count >= 0 && start + count <= a.rows(), "slice_rows");
  Tape& t = tape_of(a);
  const int ia = a.id;
  const Eigen::Index r0 = a.rows(), c0 = a.cols();
  Matrix out = a.value().middleRows(start, count);
  return t.push(std::move(out), t.needs_grad(a), [ia, r0, c0, start, count](Tape& tp, const Matrix& g) {
    Matrix d = Matrix::Zero(r0, c0);
    d.middleRows(start, count) = g;
    tp.accumulate(ia, d);
  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
  require_shape(start >= 0 && count >= 0 && start + count <= a.cols(), "slice_cols");
  Tape& t = tape_of(a);
  const int ia = a.id;
  const Eigen::Index r0 = a.rows(), c0 = a.cols();
  Matrix out = a.value().middleCols(start, count);
  return t.push(std::move(out), t.needs_grad(a), [ia, r0, c0, start, count](Tape& tp, const Matrix& g) {
    Matrix d = Matrix::Zero(r0, c0);
    d.middleCols(start, count) = g;
    tp.accumulate(ia, d);
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows of an empty list");
  Tape& t = tape_of(parts.front());
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  bool needs = false;
  std::vector<std::pair<int, Eigen::Index>> ids;
  for (Var p : parts) {
    require_shape(p.cols() == cols, "concat_rows");
    ids.emplace_back(p.id, p.rows());
    rows += p.rows();
    needs = needs || t.needs_grad(p);
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (Var p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return t.push(std::move(out), needs, [ids](Tape& tp, const Matrix& g) {
    Eigen::Index offset = 0;
    for (const auto& [id, r] : ids) {
      if (tp.needs_grad(id)) tp.accumulate(id, g.middleRows(offset, r));
      offset += r;
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols of an empty list");
  Tape& t = tape_of(parts.front());
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  bool needs = false;
  std::vector<std::pair<int, Eigen::Index>> ids;
  for (Var p : parts) {
    require_shape(p.rows() == rows, "concat_cols");
    ids.emplace_back(p.id, p.cols());
    cols += p.cols();
    needs = needs || t.needs_grad(p);
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (Var p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return t.push(std::move(out), needs, [ids](Tape& tp, const Matrix& g) {
    Eigen::Index offset = 0;
    for (const auto& [id, c] : ids) {
      if (tp.needs_grad(id)) tp.accumulate(id, g.middleCols(offset, c));
      offset += c;
    }
  });
}

Var repeat_rows(Var row, Eigen::Index count) {
  require_shape(row.rows() == 1, "repeat_rows");
  Tape& t = tape_of(row);
  const int ir = row.id;
  Matrix out = row.value().replicate(count, 1);
  return t.push(std::move(out), t.needs_grad(row), [ir](Tape& tp, const Matrix& g) { tp.accumulate(ir, g.colwise().sum()); });
}

Var mean_rows(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.id;
  const Eigen::Index r = a.rows();
  Matrix out = a.value().colwise().mean();
  return t.push(std::move(out), t.needs_grad(a), [ia, r](Tape& tp, const Matrix& g) {
    tp.accumulate(ia, (g / static_cast<double>(r)).replicate(r, 1));
  });
}

Var max_rows(Var a) {
  Tape& t = tape_of(a);
  const int ia = a.id;
  const Matrix& x = a.value();
  Matrix out(1, x.cols());
  std::vector<Eigen::Index> arg(static_cast<size_t>(x.cols()));
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    Eigen::Index best = 0;
    for (Eigen::Index r = 1; r < x.rows(); ++r) {
      if (x(r, c) > x(best, c)) best = r;
    }
    arg[static_cast<size_t>(c)] = best;
    out(0, c) = x(best, c);
  }
  const Eigen::Index rows = x.rows();
  return t.push(std::move(out), t.needs_grad(a), [ia, arg, rows](Tape& tp, const Matrix& g) {
    Matrix d = Matrix::Zero(rows, g.cols());
    for (Eigen::Index c = 0; c < g.cols(); ++c) d(arg[static_cast<size_t>(c)], c) = g(0, c);
    tp.accumulate(ia, d);
  });
}

Var gather_weighted(Var a, std::shared_ptr<const Taps> taps) {
  Tape& t = tape_of(a);
  const int ia = a.id;
  const Matrix& x = a.value();
  Matrix out = Matrix::Zero(static_cast<Eigen::Index>(taps->size()), x.cols());
  for (size_t b = 0; b < taps->size(); ++b) {
    auto row = out.row(static_cast<Eigen::Index>(b));
    for (const auto& [idx, w] : (*taps)[b]) {
      if (w != 0.0) row.noalias() += w * x.row(idx);
    }
  }
  const Eigen::Index r0 = x.rows(), c0 = x.cols();
  return t.push(std::move(out), t.needs_grad(a), [ia, taps, r0, c0](Tape& tp, const Matrix& g) {
    Matrix d = Matrix::Zero(r0, c0);
    for (size_t b = 0; b < taps->size(); ++b) {
      for (const auto& [idx, w] : (*taps)[b]) {
        if (w != 0.0) d.row(idx).noalias() += w * g.row(static_cast<Eigen::Index>(b));
      }
    }
    tp.accumulate(ia, d);
  });
}

namespace {

Matrix im2col(const Matrix& x, const ConvShape& s) {
  const int oh = s.out_height(), ow = s.out_width();
  const Eigen::Index cin = x.cols();
  Matrix cols = Matrix::Zero(static_cast<Eigen::Index>(oh) * ow, s.kernel * s.kernel * cin);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const Eigen::Index r = static_cast<Eigen::Index>(oy) * ow + ox;
      for (int ky = 0; ky < s.kernel; ++ky) {
        const int iy = oy * s.stride - s.pad + ky;
        if (iy < 0 || iy >= s.height) continue;
        for (int kx = 0; kx < s.kernel; ++kx) {
          const int ix = ox * s.stride - s.pad + kx;
          if (ix < 0 || ix >= s.width) continue;
          cols.row(r).segment((ky * s.kernel + kx) * cin, cin) = x.row(static_cast<Eigen::Index>(iy) * s.width + ix);
        }
      }
    }
  }
  return cols;
}

Matrix col2im(const Matrix& cols, const ConvShape& s, Eigen::Index cin) {
  const int oh = s.out_height(), ow = s.out_width();
  Matrix x = Matrix::Zero(static_cast<Eigen::Index>(s.height) * s.width, cin);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const Eigen::Index r = static_cast<Eigen::Index>(oy) * ow + ox;
      for (int ky = 0; ky < s.kernel; ++ky) {
        const int iy = oy * s.stride - s.pad + ky;
        if (iy < 0 || iy >= s.height) continue;
        for (int kx = 0; kx < s.kernel; ++kx) {
          const int ix = ox * s.stride - s.pad + kx;
          if (ix < 0 || ix >= s.width) continue;
          x.row(static_cast<Eigen::Index>(iy) * s.width + ix) += cols.row(r).segment((ky * s.kernel + kx) * cin, cin);
        }
      }
    }
  }
  return x;
}

}  // namespace

Var conv2d(Var input, Var weight, Var bias, const ConvShape& shape) {
  require_same_tape(input, weight);
  require_same_tape(input, bias);
  const Eigen::Index cin = input.cols();
  require_shape(input.rows() == static_cast<Eigen::Index>(shape.height) * shape.width, "conv2d input");
  require_shape(weight.rows() == shape.kernel * shape.kernel * cin, "conv2d weight");
  require_shape(bias.rows() == 1 && bias.cols() == weight.cols(), "conv2d bias");
  Tape& t = tape_of(input);
  auto cols = std::make_shared<Matrix>(im2col(input.value(), shape));
  Matrix out = (*cols * weight.value()).rowwise() + bias.value().row(0);
  const int ii = input.id, iw = weight.id, ib = bias.id;
  const bool needs = t.needs_grad(input) || t.needs_grad(weight) || t.needs_grad(bias);
  return t.push(std::move(out), needs, [ii, iw, ib, cols, shape, cin](Tape& tp, const Matrix& g) {
    if (tp.needs_grad(iw)) tp.accumulate(iw, cols->transpose() * g);
    if (tp.needs_grad(ib)) tp.accumulate(ib, g.colwise().sum());
    if (tp.needs_grad(ii)) tp.accumulate(ii, col2im(g * tp.value(iw).transpose(), shape, cin));
  });
}

}  // namespace setseg::ad
