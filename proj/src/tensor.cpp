#include "dbp/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include <Eigen/Dense>

namespace dbp {

namespace {

std::atomic<std::uint64_t> g_seq{1};
thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<RowMat> view(double* p, std::size_t r, std::size_t c) {
  return {p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}
Eigen::Map<const RowMat> cview(const double* p, std::size_t r, std::size_t c) {
  return {p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}

// Zero-padded k x k patches: row (i, ky, kx), column (y, x).
std::vector<double> im2col(const double* x, std::size_t ci, std::size_t h, std::size_t w, std::size_t k) {
  const long pad = static_cast<long>(k / 2), H = static_cast<long>(h), W = static_cast<long>(w);
  std::vector<double> cols(ci * k * k * h * w, 0.0);
  double* row = cols.data();
  for (std::size_t i = 0; i < ci; ++i)
    for (long ky = 0; ky < static_cast<long>(k); ++ky)
      for (long kx = 0; kx < static_cast<long>(k); ++kx, row += h * w) {
        const long dy = ky - pad, dx = kx - pad;
        const long x0 = std::max(0L, -dx), x1 = std::min(W, W - dx);
        for (long yy = std::max(0L, -dy); yy < std::min(H, H - dy); ++yy) {
          const double* src = x + i * h * w + (yy + dy) * W + dx;
          std::copy(src + x0, src + x1, row + yy * W + x0);
        }
      }
  return cols;
}

void col2im(const double* cols, double* gx, std::size_t ci, std::size_t h, std::size_t w, std::size_t k) {
  const long pad = static_cast<long>(k / 2), H = static_cast<long>(h), W = static_cast<long>(w);
  const double* row = cols;
  for (std::size_t i = 0; i < ci; ++i)
    for (long ky = 0; ky < static_cast<long>(k); ++ky)
      for (long kx = 0; kx < static_cast<long>(k); ++kx, row += h * w) {
        const long dy = ky - pad, dx = kx - pad;
        const long x0 = std::max(0L, -dx), x1 = std::min(W, W - dx);
        for (long yy = std::max(0L, -dy); yy < std::min(H, H - dy); ++yy) {
          double* dst = gx + i * h * w + (yy + dy) * W + dx;
          const double* src = row + yy * W;
          for (long xx = x0; xx < x1; ++xx) dst[xx] += src[xx];
        }
      }
}

std::shared_ptr<Node> new_node(Shape shape, std::vector<double> value, const char* op) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
  n->op = op;
  return n;
}

template <class F>
Tensor make_op(const char* op, Shape shape, std::vector<double> value,
               const std::vector<const Tensor*>& inputs, F&& bw) {
  auto n = new_node(std::move(shape), std::move(value), op);
  bool rg = false;
  if (g_grad_enabled) {
    for (const Tensor* t : inputs) rg = rg || t->requires_grad();
  }
  if (rg) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (const Tensor* t : inputs) n->parents.push_back(t->node());
    n->backward_fn = std::forward<F>(bw);
  }
  return Tensor(std::move(n));
}

// Grad buffer of parent i, or nullptr when it does not want gradients.
double* pgrad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  return p.ensure_grad().data();
}

const std::vector<double>& pval(const Node& self, std::size_t i) { return self.parents[i]->value; }

std::size_t norm_axis(const char* op, const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    std::ostringstream os;
    os << op << ": axis " << axis << " out of range for shape " << shape_str(s);
    throw ShapeError(os.str());
  }
  return axis;
}

// outer * n * inner decomposition around one axis.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) throw ShapeError(op, a, b);
    out[i] = std::max(da, db);
  }
  return out;
}

// Operand offset for every element of the broadcast result.
std::vector<std::size_t> broadcast_offsets(const Shape& out, const Shape& in) {
  const std::size_t r = out.size();
  std::vector<std::size_t> stride(r, 0);
  std::size_t s = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t i = in.size() - 1 - k;
    const std::size_t o = r - 1 - k;
    stride[o] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  const std::size_t total = shape_numel(out);
  std::vector<std::size_t> offs(total);
  std::vector<std::size_t> idx(r, 0);
  std::size_t cur = 0;
  for (std::size_t e = 0; e < total; ++e) {
    offs[e] = cur;
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < out[d]) {
        cur += stride[d];
        break;
      }
      cur -= stride[d] * (out[d] - 1);
      idx[d] = 0;
    }
  }
  return offs;
}

struct Broadcast {
  Shape out;
  bool a_same = true, b_same = true;
  std::vector<std::size_t> ao, bo;
  std::size_t a_at(std::size_t e) const { return a_same ? e : ao[e]; }
  std::size_t b_at(std::size_t e) const { return b_same ? e : bo[e]; }
};

Broadcast make_broadcast(const char* op, const Shape& a, const Shape& b) {
  Broadcast bc;
  bc.out = broadcast_shape(op, a, b);
  bc.a_same = a == bc.out;
  bc.b_same = b == bc.out;
  if (!bc.a_same) bc.ao = broadcast_offsets(bc.out, a);
  if (!bc.b_same) bc.bo = broadcast_offsets(bc.out, b);
  return bc;
}

template <class Fwd, class DA, class DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd f, DA da, DB db) {
  auto bc = std::make_shared<Broadcast>(make_broadcast(op, a.shape(), b.shape()));
  const std::size_t total = shape_numel(bc->out);
  std::vector<double> v(total);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t e = 0; e < total; ++e) v[e] = f(av[bc->a_at(e)], bv[bc->b_at(e)]);
  return make_op(op, bc->out, std::move(v), {&a, &b}, [bc, da, db](Node& self) {
    const auto& x = pval(self, 0);
    const auto& y = pval(self, 1);
    double* ga = pgrad(self, 0);
    double* gb = pgrad(self, 1);
    const auto& g = self.grad;
    for (std::size_t e = 0; e < g.size(); ++e) {
      const std::size_t i = bc->a_at(e), j = bc->b_at(e);
      if (ga) ga[i] += g[e] * da(x[i], y[j], self.value[e]);
      if (gb) gb[j] += g[e] * db(x[i], y[j], self.value[e]);
    }
  });
}

template <class Fwd, class D>
Tensor unary(const char* op, const Tensor& a, Fwd f, D d) {
  const auto av = a.data();
  std::vector<double> v(av.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = f(av[i]);
  return make_op(op, a.shape(), std::move(v), {&a}, [d](Node& self) {
    double* ga = pgrad(self, 0);
    if (!ga) return;
    const auto& x = pval(self, 0);
    for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * d(x[i], self.value[i]);
  });
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

ShapeError::ShapeError(const std::string& op, const Shape& a, const Shape& b)
    : std::invalid_argument(op + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b)) {}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  auto node = new_node(std::move(shape), std::vector<double>(n, v), "leaf");
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("Tensor::from: " + std::to_string(data.size()) + " values for shape " + shape_str(shape));
  }
  auto node = new_node(std::move(shape), std::move(data), "leaf");
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({}, {v}, requires_grad); }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor is not scalar, shape " + shape_str(shape()));
  return node_->value[0];
}

Tensor Tensor::detach() const { return Tensor(new_node(node_->shape, node_->value, "detach")); }

Tensor Tensor::clone_leaf() const {
  auto n = new_node(node_->shape, node_->value, "leaf");
  n->requires_grad = node_->requires_grad;
  return Tensor(std::move(n));
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{loss.node().get()};
  seen.insert(stack.back());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->seq > b->seq; });

  for (Node* n : order) {
    if (n->backward_fn) n->grad.clear();
  }
  loss.node()->ensure_grad()[0] += 1.0;
  for (Node* n : order) {
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Interior gradients are scratch; leaves keep theirs.
  for (Node* n : order) {
    if (n->backward_fn && n != loss.node().get()) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double o) { return -o / y; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(
      "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary(
      "mul_scalar", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) throw ShapeError("matmul", a.shape(), b.shape());
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> v(m * n);
  view(v.data(), m, n).noalias() = cview(a.data().data(), m, k) * cview(b.data().data(), k, n);
  return make_op("matmul", {m, n}, std::move(v), {&a, &b}, [m, k, n](Node& self) {
    const auto G = cview(self.grad.data(), m, n);
    if (double* ga = pgrad(self, 0)) view(ga, m, k).noalias() += G * cview(pval(self, 1).data(), k, n).transpose();
    if (double* gb = pgrad(self, 1)) view(gb, k, n).noalias() += cview(pval(self, 0).data(), m, k).transpose() * G;
  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw ShapeError("bmm", a.shape(), b.shape());
  }
  const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<double> v(bs * m * n);
  for (std::size_t q = 0; q < bs; ++q) {
    view(v.data() + q * m * n, m, n).noalias() =
        cview(a.data().data() + q * m * k, m, k) * cview(b.data().data() + q * k * n, k, n);
  }
  return make_op("bmm", {bs, m, n}, std::move(v), {&a, &b}, [bs, m, k, n](Node& self) {
    const double* A = pval(self, 0).data();
    const double* B = pval(self, 1).data();
    double* ga = pgrad(self, 0);
    double* gb = pgrad(self, 1);
    for (std::size_t q = 0; q < bs; ++q) {
      const auto G = cview(self.grad.data() + q * m * n, m, n);
      if (ga) view(ga + q * m * k, m, k).noalias() += G * cview(B + q * k * n, k, n).transpose();
      if (gb) view(gb + q * k * n, k, n).noalias() += cview(A + q * m * k, m, k).transpose() * G;
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) throw ShapeError("reshape", a.shape(), shape);
  std::vector<double> v(a.data().begin(), a.data().end());
  return make_op("reshape", std::move(shape), std::move(v), {&a}, [](Node& self) {
    if (double* ga = pgrad(self, 0))
      for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const Shape& s = a.shape();
  const std::size_t r = s.size();
  std::vector<bool> used(r, false);
  if (axes.size() != r) throw ShapeError("permute: axes " + std::to_string(axes.size()) + " for " + shape_str(s));
  for (std::size_t ax : axes) {
    if (ax >= r || used[ax]) throw ShapeError("permute: invalid axes for shape " + shape_str(s));
    used[ax] = true;
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t d = r; d-- > 1;) in_stride[d - 1] = in_stride[d] * s[d];
  Shape out(r);
  for (std::size_t d = 0; d < r; ++d) out[d] = s[axes[d]];
  const std::size_t total = a.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(total);
  std::vector<std::size_t> idx(r, 0);
  std::size_t cur = 0;
  for (std::size_t e = 0; e < total; ++e) {
    (*src)[e] = cur;
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < out[d]) {
        cur += in_stride[axes[d]];
        break;
      }
      cur -= in_stride[axes[d]] * (out[d] - 1);
      idx[d] = 0;
    }
  }
  std::vector<double> v(total);
  const auto av = a.data();
  for (std::size_t e = 0; e < total; ++e) v[e] = av[(*src)[e]];
  return make_op("permute", std::move(out), std::move(v), {&a}, [src](Node& self) {
    if (double* ga = pgrad(self, 0))
      for (std::size_t e = 0; e < self.grad.size(); ++e) ga[(*src)[e]] += self.grad[e];
  });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) throw ShapeError("transpose: need rank >= 2, got " + shape_str(a.shape()));
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[a.rank() - 1], axes[a.rank() - 2]);
  return permute(a, axes);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  norm_axis("concat", s0, axis);
  Shape out = s0;
  out[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == s0[d];
    if (!ok) throw ShapeError("concat", s0, s);
    out[axis] += s[axis];
  }
  const AxisSplit sp = split_axis(out, axis);
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.shape()[axis] * sp.inner);
  const std::size_t row = out[axis] * sp.inner;
  std::vector<double> v(shape_numel(out));
  std::size_t off = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto pv = parts[pi].data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy_n(pv.data() + o * widths[pi], widths[pi], v.data() + o * row + off);
    off += widths[pi];
  }
  std::vector<const Tensor*> ins;
  for (const auto& p : parts) ins.push_back(&p);
  const std::size_t outer = sp.outer;
  return make_op("concat", std::move(out), std::move(v), ins, [widths, row, outer](Node& self) {
    std::size_t off = 0;
    for (std::size_t pi = 0; pi < widths.size(); ++pi) {
      if (double* gp = pgrad(self, pi)) {
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < widths[pi]; ++i) gp[o * widths[pi] + i] += self.grad[o * row + off + i];
      }
      off += widths[pi];
    }
  });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
  norm_axis("slice", a.shape(), axis);
  if (begin > end || end > a.shape()[axis]) {
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " of " + shape_str(a.shape()));
  }
  const AxisSplit sp = split_axis(a.shape(), axis);
  Shape out = a.shape();
  out[axis] = end - begin;
  const std::size_t w = (end - begin) * sp.inner;
  const std::size_t row = sp.n * sp.inner;
  const std::size_t start = begin * sp.inner;
  std::vector<double> v(sp.outer * w);
  const auto av = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o) std::copy_n(av.data() + o * row + start, w, v.data() + o * w);
  const std::size_t outer = sp.outer;
  return make_op("slice", std::move(out), std::move(v), {&a}, [outer, w, row, start](Node& self) {
    if (double* ga = pgrad(self, 0))
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < w; ++i) ga[o * row + start + i] += self.grad[o * w + i];
  });
}

Tensor take_rows(const Tensor& a, const std::vector<std::size_t>& rows) {
  if (a.rank() == 0) throw ShapeError("take_rows: scalar input");
  const std::size_t n = a.dim(0);
  const std::size_t inner = n ? a.numel() / n : 0;
  for (std::size_t r : rows) {
    if (r >= n) throw ShapeError("take_rows: row " + std::to_string(r) + " out of range for " + shape_str(a.shape()));
  }
  Shape out = a.shape();
  out[0] = rows.size();
  std::vector<double> v(rows.size() * inner);
  const auto av = a.data();
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(av.data() + rows[i] * inner, inner, v.data() + i * inner);
  return make_op("take_rows", std::move(out), std::move(v), {&a}, [rows, inner](Node& self) {
    if (double* ga = pgrad(self, 0))
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < inner; ++j) ga[rows[i] * inner + j] += self.grad[i * inner + j];
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return make_op("sum", {}, {s}, {&a}, [](Node& self) {
    if (double* ga = pgrad(self, 0)) {
      const std::size_t n = self.parents[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[0];
    }
  });
}

Tensor sum(const Tensor& a, std::size_t axis) {
  norm_axis("sum", a.shape(), axis);
  const AxisSplit sp = split_axis(a.shape(), axis);
  Shape out = a.shape();
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> v(sp.outer * sp.inner, 0.0);
  const auto av = a.data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.n; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i) v[o * sp.inner + i] += av[(o * sp.n + k) * sp.inner + i];
  return make_op("sum_axis", std::move(out), std::move(v), {&a}, [sp](Node& self) {
    if (double* ga = pgrad(self, 0))
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t k = 0; k < sp.n; ++k)
          for (std::size_t i = 0; i < sp.inner; ++i) ga[(o * sp.n + k) * sp.inner + i] += self.grad[o * sp.inner + i];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean: empty tensor");
  return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor mean(const Tensor& a, std::size_t axis) {
  norm_axis("mean", a.shape(), axis);
  if (a.shape()[axis] == 0) throw ShapeError("mean: empty axis in " + shape_str(a.shape()));
  return mul_scalar(sum(a, axis), 1.0 / static_cast<double>(a.shape()[axis]));
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary(
      "sqrt", a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor tanh(const Tensor& a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sin(const Tensor& a) {
  return unary(
      "sin", a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

Tensor cos(const Tensor& a) {
  return unary(
      "cos", a, [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}

Tensor abs(const Tensor& a) {
  return unary(
      "abs", a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor square(const Tensor& a) {
  return unary(
      "square", a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  norm_axis("softmax", a.shape(), axis);
  const AxisSplit sp = split_axis(a.shape(), axis);
  const auto av = a.data();
  std::vector<double> v(av.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      double mx = -INFINITY;
      for (std::size_t k = 0; k < sp.n; ++k) mx = std::max(mx, av[base + k * sp.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) z += (v[base + k * sp.inner] = std::exp(av[base + k * sp.inner] - mx));
      for (std::size_t k = 0; k < sp.n; ++k) v[base + k * sp.inner] /= z;
    }
  return make_op("softmax", a.shape(), std::move(v), {&a}, [sp](Node& self) {
    double* ga = pgrad(self, 0);
    if (!ga) return;
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < sp.n; ++k) dot += g[base + k * sp.inner] * y[base + k * sp.inner];
        for (std::size_t k = 0; k < sp.n; ++k) {
          const std::size_t e = base + k * sp.inner;
          ga[e] += y[e] * (g[e] - dot);
        }
      }
  });
}

Tensor log_softmax(const Tensor& a, std::size_t axis) {
  norm_axis("log_softmax", a.shape(), axis);
  const AxisSplit sp = split_axis(a.shape(), axis);
  const auto av = a.data();
  std::vector<double> v(av.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      double mx = -INFINITY;
      for (std::size_t k = 0; k < sp.n; ++k) mx = std::max(mx, av[base + k * sp.inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) z += std::exp(av[base + k * sp.inner] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t k = 0; k < sp.n; ++k) v[base + k * sp.inner] = av[base + k * sp.inner] - lse;
    }
  return make_op("log_softmax", a.shape(), std::move(v), {&a}, [sp](Node& self) {
    double* ga = pgrad(self, 0);
    if (!ga) return;
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        double gs = 0.0;
        for (std::size_t k = 0; k < sp.n; ++k) gs += g[base + k * sp.inner];
        for (std::size_t k = 0; k < sp.n; ++k) {
          const std::size_t e = base + k * sp.inner;
          ga[e] += g[e] - std::exp(y[e]) * gs;
        }
      }
  });
}

Tensor layer_norm(const Tensor& a, std::size_t axis, double eps) {
  norm_axis("layer_norm", a.shape(), axis);
  const AxisSplit sp = split_axis(a.shape(), axis);
  const auto av = a.data();
  std::vector<double> v(av.size());
  auto rstd = std::make_shared<std::vector<double>>(sp.outer * sp.inner);
  const double n = static_cast<double>(sp.n);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      double mu = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) mu += av[base + k * sp.inner];
      mu /= n;
      double var = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) {
        const double d = av[base + k * sp.inner] - mu;
        var += d * d;
      }
      var /= n;
      const double r = 1.0 / std::sqrt(var + eps);
      (*rstd)[o * sp.inner + i] = r;
      for (std::size_t k = 0; k < sp.n; ++k) v[base + k * sp.inner] = (av[base + k * sp.inner] - mu) * r;
    }
  return make_op("layer_norm", a.shape(), std::move(v), {&a}, [sp, rstd, n](Node& self) {
    double* ga = pgrad(self, 0);
    if (!ga) return;
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        const std::size_t base = o * sp.n * sp.inner + i;
        double gm = 0.0, gym = 0.0;
        for (std::size_t k = 0; k < sp.n; ++k) {
          const std::size_t e = base + k * sp.inner;
          gm += g[e];
          gym += g[e] * y[e];
        }
        gm /= n;
        gym /= n;
        const double r = (*rstd)[o * sp.inner + i];
        for (std::size_t k = 0; k < sp.n; ++k) {
          const std::size_t e = base + k * sp.inner;
          ga[e] += r * (g[e] - gm - y[e] * gym);
        }
      }
  });
}

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 3 || weight.rank() != 4 || weight.dim(1) != x.dim(0) || weight.dim(2) != weight.dim(3) ||
      weight.dim(2) % 2 == 0) {
    throw ShapeError("conv2d", x.shape(), weight.shape());
  }
  if (bias.rank() != 1 || bias.dim(0) != weight.dim(0)) throw ShapeError("conv2d(bias)", weight.shape(), bias.shape());
  const std::size_t ci = x.dim(0), h = x.dim(1), w = x.dim(2), co = weight.dim(0), k = weight.dim(2);
  const std::size_t hw = h * w, taps = ci * k * k;
  std::vector<double> cols = im2col(x.data().data(), ci, h, w, k);
  std::vector<double> v(co * hw);
  auto out = view(v.data(), co, hw);
  out.noalias() = cview(weight.data().data(), co, taps) * cview(cols.data(), taps, hw);
  out.colwise() += Eigen::Map<const Eigen::VectorXd>(bias.data().data(), static_cast<Eigen::Index>(co));
  return make_op("conv2d", {co, h, w}, std::move(v), {&x, &weight, &bias},
                 [ci, co, k, h, w, hw, taps, cols = std::move(cols)](Node& self) {
                   const auto G = cview(self.grad.data(), co, hw);
                   if (double* gb = pgrad(self, 2)) {
                     Eigen::Map<Eigen::VectorXd>(gb, static_cast<Eigen::Index>(co)) += G.rowwise().sum();
                   }
                   if (double* gw = pgrad(self, 1)) {
                     view(gw, co, taps).noalias() += G * cview(cols.data(), taps, hw).transpose();
                   }
                   if (double* gx = pgrad(self, 0)) {
                     std::vector<double> gcols(taps * hw);
                     view(gcols.data(), taps, hw).noalias() = cview(pval(self, 1).data(), co, taps).transpose() * G;
                     col2im(gcols.data(), gx, ci, h, w, k);
                   }
                 });
}

Tensor grid_sample(const Tensor& grid, const Tensor& points) {
  if (grid.rank() != 3 || points.rank() != 2 || points.dim(1) != 2) {
    throw ShapeError("grid_sample", grid.shape(), points.shape());
  }
  const std::size_t c = grid.dim(0), h = grid.dim(1), w = grid.dim(2), np = points.dim(0);
  const std::size_t hw = h * w;
  const auto G = grid.data();
  const auto P = points.data();
  std::vector<double> v(np * c, 0.0);
  auto cell = [h, w](long yy, long xx) -> long {
    if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) return -1;
    return yy * static_cast<long>(w) + xx;
  };
  for (std::size_t p = 0; p < np; ++p) {
    const double gx = P[2 * p], gy = P[2 * p + 1];
    const double fx0 = std::floor(gx), fy0 = std::floor(gy);
    const long x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
    const double fx = gx - fx0, fy = gy - fy0;
    const long idx[4] = {cell(y0, x0), cell(y0, x0 + 1), cell(y0 + 1, x0), cell(y0 + 1, x0 + 1)};
    const double wt[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
    for (int q = 0; q < 4; ++q) {
      if (idx[q] < 0) continue;
      for (std::size_t ch = 0; ch < c; ++ch) v[p * c + ch] += wt[q] * G[ch * hw + static_cast<std::size_t>(idx[q])];
    }
  }
  return make_op("grid_sample", {np, c}, std::move(v), {&grid, &points}, [c, h, w, np, hw, cell](Node& self) {
    const auto& G = pval(self, 0);
    const auto& P = pval(self, 1);
    double* gg = pgrad(self, 0);
    double* gp = pgrad(self, 1);
    const auto& up = self.grad;
    for (std::size_t p = 0; p < np; ++p) {
      const double gx = P[2 * p], gy = P[2 * p + 1];
      const double fx0 = std::floor(gx), fy0 = std::floor(gy);
      const long x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
      const double fx = gx - fx0, fy = gy - fy0;
      const long idx[4] = {cell(y0, x0), cell(y0, x0 + 1), cell(y0 + 1, x0), cell(y0 + 1, x0 + 1)};
      const double wt[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
      double dgx = 0.0, dgy = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double u = up[p * c + ch];
        double val[4];
        for (int q = 0; q < 4; ++q) val[q] = idx[q] < 0 ? 0.0 : G[ch * hw + static_cast<std::size_t>(idx[q])];
        if (gg) {
          for (int q = 0; q < 4; ++q)
            if (idx[q] >= 0) gg[ch * hw + static_cast<std::size_t>(idx[q])] += wt[q] * u;
        }
        dgx += u * ((val[1] - val[0]) * (1 - fy) + (val[3] - val[2]) * fy);
        dgy += u * ((val[2] - val[0]) * (1 - fx) + (val[3] - val[1]) * fx);
      }
      if (gp) {
        gp[2 * p] += dgx;
        gp[2 * p + 1] += dgy;
      }
    }
    (void)w;
  });
}

}  // namespace dbp
