#include "partleak/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

namespace partleak::ad {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;
using StridedC = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using Strided = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

[[noreturn]] void shape_error(const char* op, const std::string& what) {
  throw ValidationError(std::string(op) + ": " + what);
}

void require_same_tape(const char* op, const Tensor& a, const Tensor& b) {
  if (&a.tape() != &b.tape()) shape_error(op, "tensors live on different tapes");
}

// ---- broadcasting --------------------------------------------------------

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;  // per output axis, 0 when broadcast
};

std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

Broadcast broadcast_shapes(const char* op, const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Broadcast bc;
  bc.out.resize(r);
  bc.stride_a.assign(r, 0);
  bc.stride_b.assign(r, 0);
  auto sa = contiguous_strides(a), sb = contiguous_strides(b);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ia = i + a.size(), ib = i + b.size();
    const std::size_t da = ia >= r ? a[ia - r] : 1;
    const std::size_t db = ib >= r ? b[ib - r] : 1;
    if (da != db && da != 1 && db != 1) {
      shape_error(op, "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    bc.out[i] = std::max(da, db);
    if (ia >= r && da != 1) bc.stride_a[i] = sa[ia - r];
    if (ib >= r && db != 1) bc.stride_b[i] = sb[ib - r];
  }
  return bc;
}

// Calls fn(out_index, a_index, b_index) over every output element in order.
template <typename Fn>
void for_each_broadcast(const Broadcast& bc, Fn&& fn) {
  const std::size_t n = numel(bc.out);
  const std::size_t r = bc.out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < n; ++o) {
    fn(o, ia, ib);
    for (std::size_t ax = r; ax-- > 0;) {
      if (++idx[ax] < bc.out[ax]) {
        ia += bc.stride_a[ax];
        ib += bc.stride_b[ax];
        break;
      }
      ia -= bc.stride_a[ax] * (bc.out[ax] - 1);
      ib -= bc.stride_b[ax] * (bc.out[ax] - 1);
      idx[ax] = 0;
    }
  }
}

// Elementwise binary op. Partials take (a, b, out) and return d out / d a
// and d out / d b respectively.
template <typename F, typename Da, typename Db>
Tensor binary(const char* name, const Tensor& a, const Tensor& b, F f, Da da, Db db) {
  require_same_tape(name, a, b);
  Tape& tape = a.tape();
  const std::size_t ida = a.node_id(), idb = b.node_id();
  if (a.shape() == b.shape()) {
    auto x = a.data(), y = b.data();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(x[i], y[i]);
    return tape.record(name, a.shape(), std::move(out), {a, b}, [ida, idb, da, db](Tape& t, std::size_t self) {
      auto g = t.grad_view(self);
      auto x = t.value(ida), y = t.value(idb), o = t.value(self);
      if (t.requires_grad(ida)) {
        auto& ga = t.grad_buffer(ida);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * da(x[i], y[i], o[i]);
      }
      if (t.requires_grad(idb)) {
        auto& gb = t.grad_buffer(idb);
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * db(x[i], y[i], o[i]);
      }
    });
  }
  Broadcast bc = broadcast_shapes(name, a.shape(), b.shape());
  auto x = a.data(), y = b.data();
  std::vector<double> out(numel(bc.out));
  for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = f(x[i], y[j]); });
  return tape.record(name, bc.out, std::move(out), {a, b}, [ida, idb, bc, da, db](Tape& t, std::size_t self) {
    auto g = t.grad_view(self);
    auto x = t.value(ida), y = t.value(idb), o = t.value(self);
    const bool need_a = t.requires_grad(ida), need_b = t.requires_grad(idb);
    std::vector<double>* ga = need_a ? &t.grad_buffer(ida) : nullptr;
    std::vector<double>* gb = need_b ? &t.grad_buffer(idb) : nullptr;
    for_each_broadcast(bc, [&](std::size_t k, std::size_t i, std::size_t j) {
      if (ga) (*ga)[i] += g[k] * da(x[i], y[j], o[k]);
      if (gb) (*gb)[j] += g[k] * db(x[i], y[j], o[k]);
    });
  });
}

// Elementwise unary op. The partial takes (x, out).
template <typename F, typename D>
Tensor unary(const char* name, const Tensor& x, F f, D d) {
  Tape& tape = x.tape();
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  const std::size_t id = x.node_id();
  return tape.record(name, x.shape(), std::move(out), {x}, [id, d](Tape& t, std::size_t self) {
    auto g = t.grad_view(self);
    auto xv = t.value(id), o = t.value(self);
    auto& gx = t.grad_buffer(id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * d(xv[i], o[i]);
  });
}

// View a tensor as [outer, n, inner] around `axis`.
struct AxisView {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisView axis_view(const char* op, const Shape& s, std::size_t axis) {
  if (axis >= s.size()) shape_error(op, "axis out of range for " + shape_str(s));
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= s[i];
  v.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) v.inner *= s[i];
  return v;
}

Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape r;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) r.push_back(s[i]);
  }
  if (r.empty()) r.push_back(1);
  return r;
}

// exp over a buffer. Inputs are staged in an aligned scratch padded to a
// whole number of packets so every element takes the same vector path and
// the result does not depend on its position in the row.
void vexp_inplace(double* v, std::size_t n) {
  using Aligned = Eigen::Map<Eigen::ArrayXd, Eigen::Aligned64>;
  constexpr std::size_t kPad = 16;
  thread_local Eigen::ArrayXd scratch;
  const std::size_t m = (n + kPad - 1) / kPad * kPad;
  if (static_cast<std::size_t>(scratch.size()) < m) scratch.resize(static_cast<Eigen::Index>(m));
  Aligned buf(scratch.data(), static_cast<Eigen::Index>(m));
  std::copy(v, v + n, scratch.data());
  std::fill(scratch.data() + n, scratch.data() + m, 0.0);
  buf = buf.exp();
  // The vector kernel clamps its argument; deep underflow goes through libm.
  for (std::size_t i = 0; i < n; ++i) v[i] = v[i] < -700.0 ? std::exp(v[i]) : scratch[static_cast<Eigen::Index>(i)];
}

// Row softmax over `rows` rows of length n; entries with allowed == 0 are
// excluded and set to 0.
void softmax_rows(const double* x, const std::uint8_t* allowed, double* out, std::size_t rows, std::size_t n) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x + r * n;
    const std::uint8_t* ar = allowed ? allowed + r * n : nullptr;
    double m = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (ar && !ar[j]) continue;
      any = true;
      m = std::max(m, xr[j]);
    }
    if (!any) throw ValidationError("masked_softmax: row with no allowed entries");
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = (ar && !ar[j]) ? 0.0 : xr[j] - m;
  }
  vexp_inplace(out, rows * n);
  for (std::size_t r = 0; r < rows; ++r) {
    double* o = out + r * n;
    const std::uint8_t* ar = allowed ? allowed + r * n : nullptr;
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (!ar || ar[j]) s += o[j];
    for (std::size_t j = 0; j < n; ++j) o[j] = (ar && !ar[j]) ? 0.0 : o[j] / s;
  }
}

// dx = p * (dp - <p, dp>) for one row.
void softmax_row_backward(const double* p, const double* dp, double* dx, std::size_t n) {
  double dot = 0.0;
  for (std::size_t j = 0; j < n; ++j) dot += p[j] * dp[j];
  for (std::size_t j = 0; j < n; ++j) dx[j] += p[j] * (dp[j] - dot);
}

}  // namespace

// ---- elementwise ----------------------------------------------------------

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

Tensor add_scalar(const Tensor& x, double c) {
  return unary("add_scalar", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double c) {
  return unary("mul_scalar", x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

Tensor neg(const Tensor& x) { return mul_scalar(x, -1.0); }

Tensor exp(const Tensor& x) {
  return unary("exp", x, [](double v) { return std::exp(v); }, [](double, double o) { return o; });
}

Tensor log(const Tensor& x) {
  return unary("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      "sigmoid", x,
      [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double o) { return o * (1.0 - o); });
}

// Tanh form: x * sigmoid(2c (x + 0.044715 x^3)), c = sqrt(2 / pi).
Tensor gelu(const Tensor& x) {
  static constexpr double kC = 2.0 * 0.7978845608028654, kA = 0.044715;
  using Arr = Eigen::Map<const Eigen::ArrayXd>;
  auto in = x.data();
  const auto n = static_cast<Eigen::Index>(in.size());
  Arr v(in.data(), n);
  const Eigen::ArrayXd u = kC * (v + kA * v.cube());
  const Eigen::ArrayXd e = (-u.abs()).exp();
  const Eigen::ArrayXd sig = (u >= 0).select(1.0 / (1.0 + e), e / (1.0 + e));
  std::vector<double> out(in.size()), d(in.size());
  Eigen::Map<Eigen::ArrayXd>(out.data(), n) = v * sig;
  Eigen::Map<Eigen::ArrayXd>(d.data(), n) = sig + v * sig * (1.0 - sig) * kC * (1.0 + 3.0 * kA * v.square());
  const std::size_t id = x.node_id();
  return x.tape().record("gelu", x.shape(), std::move(out), {x}, [id, d = std::move(d)](Tape& t, std::size_t self) {
    auto g = t.grad_view(self);
    auto& gx = t.grad_buffer(id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * d[i];
  });
}

Tensor abs(const Tensor& x) {
  return unary(
      "abs", x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

Tensor square(const Tensor& x) {
  return unary("square", x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

Tensor sqrt(const Tensor& x) {
  return unary("sqrt", x, [](double v) { return std::sqrt(v); }, [](double, double o) { return 0.5 / o; });
}

Tensor clamp_min(const Tensor& x, double floor) {
  return unary(
      "clamp_min", x, [floor](double v) { return v < floor ? floor : v; },
      [floor](double v, double) { return v < floor ? 0.0 : 1.0; });
}

Tensor neg_xlogx(const Tensor& x) {
  static constexpr double kTiny = 1e-300;
  return unary(
      "neg_xlogx", x, [](double v) { return v > 0 ? -v * std::log(v) : 0.0; },
      [](double v, double) { return -(std::log(std::max(v, kTiny)) + 1.0); });
}

// ---- reductions -------------------------------------------------------------

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const std::size_t id = x.node_id();
  return x.tape().record("sum", {1}, {s}, {x}, [id](Tape& t, std::size_t self) {
    const double g = t.grad_view(self)[0];
    for (auto& v : t.grad_buffer(id)) v += g;
  });
}

Tensor mean(const Tensor& x) { return mul_scalar(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor sum_axis(const Tensor& x, std::size_t axis) {
  const AxisView av = axis_view("sum_axis", x.shape(), axis);
  auto in = x.data();
  std::vector<double> out(av.outer * av.inner, 0.0);
  for (std::size_t o = 0; o < av.outer; ++o)
    for (std::size_t j = 0; j < av.n; ++j)
      for (std::size_t i = 0; i < av.inner; ++i) out[o * av.inner + i] += in[(o * av.n + j) * av.inner + i];
  const std::size_t id = x.node_id();
  return x.tape().record("sum_axis", drop_axis(x.shape(), axis), std::move(out), {x},
                         [id, av](Tape& t, std::size_t self) {
                           auto g = t.grad_view(self);
                           auto& gx = t.grad_buffer(id);
                           for (std::size_t o = 0; o < av.outer; ++o)
                             for (std::size_t j = 0; j < av.n; ++j)
                               for (std::size_t i = 0; i < av.inner; ++i)
                                 gx[(o * av.n + j) * av.inner + i] += g[o * av.inner + i];
                         });
}

Tensor mean_axis(const Tensor& x, std::size_t axis) {
  const double n = static_cast<double>(x.shape().at(axis));
  return mul_scalar(sum_axis(x, axis), 1.0 / n);
}

Tensor max_axis(const Tensor& x, std::size_t axis) {
  const AxisView av = axis_view("max_axis", x.shape(), axis);
  auto in = x.data();
  std::vector<double> out(av.outer * av.inner);
  std::vector<std::size_t> arg(out.size());
  for (std::size_t o = 0; o < av.outer; ++o)
    for (std::size_t i = 0; i < av.inner; ++i) {
      std::size_t best = 0;
      double bv = in[o * av.n * av.inner + i];
      for (std::size_t j = 1; j < av.n; ++j) {
        const double v = in[(o * av.n + j) * av.inner + i];
        if (v > bv) {
          bv = v;
          best = j;
        }
      }
      out[o * av.inner + i] = bv;
      arg[o * av.inner + i] = (o * av.n + best) * av.inner + i;
    }
  const std::size_t id = x.node_id();
  return x.tape().record("max_axis", drop_axis(x.shape(), axis), std::move(out), {x},
                         [id, arg = std::move(arg)](Tape& t, std::size_t self) {
                           auto g = t.grad_view(self);
                           auto& gx = t.grad_buffer(id);
                           for (std::size_t k = 0; k < g.size(); ++k) gx[arg[k]] += g[k];
                         });
}

// ---- shape ----------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) shape_error("reshape", shape_str(x.shape()) + " -> " + shape_str(shape));
  const std::size_t id = x.node_id();
  return x.tape().record("reshape", std::move(shape), x.to_vector(), {x}, [id](Tape& t, std::size_t self) {
    auto g = t.grad_view(self);
    auto& gx = t.grad_buffer(id);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const Shape& s = x.shape();
  if (perm.size() != s.size()) shape_error("permute", "rank mismatch");
  std::vector<bool> seen(s.size(), false);
  Shape out_shape(s.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= s.size() || seen[perm[i]]) shape_error("permute", "invalid permutation");
    seen[perm[i]] = true;
    out_shape[i] = s[perm[i]];
  }
  const auto in_strides = contiguous_strides(s);
  // gather map: output flat index -> input flat index
  Broadcast bc;
  bc.out = out_shape;
  bc.stride_a.resize(s.size());
  bc.stride_b.assign(s.size(), 0);
  for (std::size_t i = 0; i < perm.size(); ++i) bc.stride_a[i] = in_strides[perm[i]];
  std::vector<std::size_t> src(x.size());
  for_each_broadcast(bc, [&](std::size_t o, std::size_t i, std::size_t) { src[o] = i; });
  auto in = x.data();
  std::vector<double> out(src.size());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = in[src[o]];
  const std::size_t id = x.node_id();
  return x.tape().record("permute", out_shape, std::move(out), {x},
                         [id, src = std::move(src)](Tape& t, std::size_t self) {
                           auto g = t.grad_view(self);
                           auto& gx = t.grad_buffer(id);
                           for (std::size_t o = 0; o < g.size(); ++o) gx[src[o]] += g[o];
                         });
}

Tensor transpose_last2(const Tensor& x) {
  const std::size_t r = x.rank();
  if (r < 2) shape_error("transpose_last2", "rank < 2");
  std::vector<std::size_t> perm(r);
  for (std::size_t i = 0; i < r; ++i) perm[i] = i;
  std::swap(perm[r - 1], perm[r - 2]);
  return permute(x, perm);
}

Tensor narrow(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const AxisView av = axis_view("narrow", x.shape(), axis);
  if (start + length > av.n || length == 0) shape_error("narrow", "range out of bounds");
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  auto in = x.data();
  std::vector<double> out;
  out.reserve(av.outer * length * av.inner);
  for (std::size_t o = 0; o < av.outer; ++o) {
    const double* base = in.data() + (o * av.n + start) * av.inner;
    out.insert(out.end(), base, base + length * av.inner);
  }
  const std::size_t id = x.node_id();
  return x.tape().record("narrow", std::move(out_shape), std::move(out), {x},
                         [id, av, start, length](Tape& t, std::size_t self) {
                           auto g = t.grad_view(self);
                           auto& gx = t.grad_buffer(id);
                           std::size_t k = 0;
                           for (std::size_t o = 0; o < av.outer; ++o) {
                             double* base = gx.data() + (o * av.n + start) * av.inner;
                             for (std::size_t i = 0; i < length * av.inner; ++i) base[i] += g[k++];
                           }
                         });
}

Tensor concat(const std::vector<Tensor>& xs, std::size_t axis) {
  if (xs.empty()) shape_error("concat", "no inputs");
  const Shape& s0 = xs[0].shape();
  if (axis >= s0.size()) shape_error("concat", "axis out of range");
  Shape out_shape = s0;
  out_shape[axis] = 0;
  std::vector<AxisView> views;
  for (const auto& x : xs) {
    require_same_tape("concat", xs[0], x);
    const Shape& s = x.shape();
    if (s.size() != s0.size()) shape_error("concat", "rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != s0[i]) shape_error("concat", shape_str(s) + " vs " + shape_str(s0));
    }
    out_shape[axis] += s[axis];
    views.push_back(axis_view("concat", s, axis));
  }
  const std::size_t outer = views[0].outer, inner = views[0].inner;
  std::vector<double> out;
  out.reserve(numel(out_shape));
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < xs.size(); ++k) {
      auto d = xs[k].data();
      const double* base = d.data() + o * views[k].n * inner;
      out.insert(out.end(), base, base + views[k].n * inner);
    }
  }
  std::vector<std::size_t> ids;
  for (const auto& x : xs) ids.push_back(x.node_id());
  return xs[0].tape().record("concat", out_shape, std::move(out), std::span<const Tensor>(xs),
                     [ids, views, outer, inner](Tape& t, std::size_t self) {
                       auto g = t.grad_view(self);
                       std::size_t pos = 0;
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t k = 0; k < ids.size(); ++k) {
                           const std::size_t len = views[k].n * inner;
                           if (t.requires_grad(ids[k])) {
                             auto& gx = t.grad_buffer(ids[k]);
                             double* base = gx.data() + o * len;
                             for (std::size_t i = 0; i < len; ++i) base[i] += g[pos + i];
                           }
                           pos += len;
                         }
                       }
                     });
}

Tensor expand(const Tensor& x, const Shape& shape) {
  Tensor zeros = x.tape().zeros(shape);
  Tensor r = add(x, zeros);
  if (r.shape() != shape) shape_error("expand", shape_str(x.shape()) + " -> " + shape_str(shape));
  return r;
}

// ---- linear algebra -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_same_tape("matmul", a, b);
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    shape_error("matmul", shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  Map(out.data(), m, n).noalias() = MapC(a.data().data(), m, k) * MapC(b.data().data(), k, n);
  const std::size_t ida = a.node_id(), idb = b.node_id();
  return a.tape().record("matmul", {m, n}, std::move(out), {a, b}, [=](Tape& t, std::size_t self) {
    MapC g(t.grad_view(self).data(), m, n);
    if (t.requires_grad(ida)) {
      Map(t.grad_buffer(ida).data(), m, k).noalias() += g * MapC(t.value(idb).data(), k, n).transpose();
    }
    if (t.requires_grad(idb)) {
      Map(t.grad_buffer(idb).data(), k, n).noalias() += MapC(t.value(ida).data(), m, k).transpose() * g;
    }
  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  require_same_tape("bmm", a, b);
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    shape_error("bmm", shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<double> out(B * m * n);
  auto ad = a.data(), bd = b.data();
  for (std::size_t i = 0; i < B; ++i) {
    Map(out.data() + i * m * n, m, n).noalias() =
        MapC(ad.data() + i * m * k, m, k) * MapC(bd.data() + i * k * n, k, n);
  }
  const std::size_t ida = a.node_id(), idb = b.node_id();
  return a.tape().record("bmm", {B, m, n}, std::move(out), {a, b}, [=](Tape& t, std::size_t self) {
    auto g = t.grad_view(self);
    auto av = t.value(ida), bv = t.value(idb);
    const bool need_a = t.requires_grad(ida), need_b = t.requires_grad(idb);
    double* ga = need_a ? t.grad_buffer(ida).data() : nullptr;
    double* gb = need_b ? t.grad_buffer(idb).data() : nullptr;
    for (std::size_t i = 0; i < B; ++i) {
      MapC gi(g.data() + i * m * n, m, n);
      if (ga) Map(ga + i * m * k, m, k).noalias() += gi * MapC(bv.data() + i * k * n, k, n).transpose();
      if (gb) Map(gb + i * k * n, k, n).noalias() += MapC(av.data() + i * m * k, m, k).transpose() * gi;
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require_same_tape("linear", x, w);
  if (w.rank() != 2 || x.shape().back() != w.dim(0)) {
    shape_error("linear", shape_str(x.shape()) + " x " + shape_str(w.shape()));
  }
  const std::size_t in = w.dim(0), outd = w.dim(1), rows = x.size() / in;
  if (bias.defined() && (bias.size() != outd)) shape_error("linear", "bias size mismatch");
  std::vector<double> out(rows * outd);
  Map o(out.data(), rows, outd);
  o.noalias() = MapC(x.data().data(), rows, in) * MapC(w.data().data(), in, outd);
  if (bias.defined()) {
    o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), static_cast<Eigen::Index>(outd));
  }
  Shape out_shape = x.shape();
  out_shape.back() = outd;
  const std::size_t idx = x.node_id(), idw = w.node_id();
  const bool has_bias = bias.defined();
  const std::size_t idb = has_bias ? bias.node_id() : 0;
  Tape& tape = x.tape();
  auto fn = [=](Tape& t, std::size_t self) {
    MapC g(t.grad_view(self).data(), rows, outd);
    if (t.requires_grad(idx)) {
      Map(t.grad_buffer(idx).data(), rows, in).noalias() += g * MapC(t.value(idw).data(), in, outd).transpose();
    }
    if (t.requires_grad(idw)) {
      Map(t.grad_buffer(idw).data(), in, outd).noalias() += MapC(t.value(idx).data(), rows, in).transpose() * g;
    }
    if (has_bias && t.requires_grad(idb)) {
      // Row by row: colwise().sum() picks its reduction order from the
      // buffer alignment, which breaks run-to-run bit equality.
      Eigen::Map<Eigen::RowVectorXd> gb(t.grad_buffer(idb).data(), static_cast<Eigen::Index>(outd));
      for (Eigen::Index r = 0; r < g.rows(); ++r) gb += g.row(r);
    }
  };
  if (has_bias) return tape.record("linear", std::move(out_shape), std::move(out), {x, w, bias}, fn);
  return tape.record("linear", std::move(out_shape), std::move(out), {x, w}, fn);
}

// ---- neural-net primitives ---------------------------------------------

Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> allowed) {
  if (!allowed.empty() && allowed.size() != x.size()) shape_error("masked_softmax", "mask size mismatch");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.size() / n;
  auto in = x.data();
  std::vector<double> out(x.size());
  softmax_rows(in.data(), allowed.empty() ? nullptr : allowed.data(), out.data(), rows, n);
  const std::size_t id = x.node_id();
  return x.tape().record("masked_softmax", x.shape(), std::move(out), {x}, [id, n, rows](Tape& t, std::size_t self) {
    auto g = t.grad_view(self);
    auto p = t.value(self);
    auto& gx = t.grad_buffer(id);
    for (std::size_t r = 0; r < rows; ++r) softmax_row_backward(p.data() + r * n, g.data() + r * n, gx.data() + r * n, n);
  });
}

Tensor softmax(const Tensor& x) { return masked_softmax(x, {}); }

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = x.shape().back();
  if (gamma.size() != d || beta.size() != d) shape_error("layer_norm", "affine size mismatch");
  if (!(eps > 0)) shape_error("layer_norm", "eps must be positive");
  const std::size_t rows = x.size() / d;
  auto in = x.data();
  auto gv = gamma.data(), bv = beta.data();
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = in.data() + r * d;
    double m = 0.0;
    for (std::size_t j = 0; j < d; ++j) m += xr[j];
    m /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - m) * (xr[j] - m);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (xr[j] - m) * rstd[r];
      out[r * d + j] = gv[j] * xhat[r * d + j] + bv[j];
    }
  }
  const std::size_t idx = x.node_id(), idg = gamma.node_id(), idb = beta.node_id();
  return x.tape().record(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& t, std::size_t self) {
        auto g = t.grad_view(self);
        auto gam = t.value(idg);
        if (t.requires_grad(idg) || t.requires_grad(idb)) {
          const bool ng = t.requires_grad(idg), nb = t.requires_grad(idb);
          double* gg = ng ? t.grad_buffer(idg).data() : nullptr;
          double* gb = nb ? t.grad_buffer(idb).data() : nullptr;
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) {
              if (gg) gg[j] += g[r * d + j] * xhat[r * d + j];
              if (gb) gb[j] += g[r * d + j];
            }
        }
        if (t.requires_grad(idx)) {
          auto& gx = t.grad_buffer(idx);
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = g[r * d + j] * gam[j];
              s1 += dxh;
              s2 += dxh * xhat[r * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const double dxh = g[r * d + j] * gam[j];
              gx[r * d + j] += rstd[r] * (dxh - inv_d * s1 - xhat[r * d + j] * inv_d * s2);
            }
          }
        }
      });
}

Tensor bce_with_logits(const Tensor& logits, std::span<const double> targets) {
  if (targets.size() != logits.size()) shape_error("bce_with_logits", "target size mismatch");
  auto x = logits.data();
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    s += std::max(x[i], 0.0) - x[i] * targets[i] + std::log1p(std::exp(-std::fabs(x[i])));
  }
  const double n = static_cast<double>(x.size());
  const std::size_t id = logits.node_id();
  std::vector<double> y(targets.begin(), targets.end());
  return logits.tape().record("bce_with_logits", {1}, {s / n}, {logits},
                              [id, n, y = std::move(y)](Tape& t, std::size_t self) {
                                const double g = t.grad_view(self)[0] / n;
                                auto x = t.value(id);
                                auto& gx = t.grad_buffer(id);
                                for (std::size_t i = 0; i < x.size(); ++i) {
                                  const double sig = x[i] >= 0 ? 1.0 / (1.0 + std::exp(-x[i]))
                                                               : std::exp(x[i]) / (1.0 + std::exp(x[i]));
                                  gx[i] += g * (sig - y[i]);
                                }
                              });
}

Tensor cosine(const Tensor& a, const Tensor& b, double eps) {
  require_same_tape("cosine", a, b);
  if (a.shape() != b.shape()) shape_error("cosine", shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t d = a.shape().back(), rows = a.size() / d;
  auto av = a.data(), bv = b.data();
  std::vector<double> out(rows), na(rows), nb(rows), dots(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0.0, sa = 0.0, sb = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dot += av[r * d + j] * bv[r * d + j];
      sa += av[r * d + j] * av[r * d + j];
      sb += bv[r * d + j] * bv[r * d + j];
    }
    na[r] = std::sqrt(sa);
    nb[r] = std::sqrt(sb);
    dots[r] = dot;
    const double den = na[r] * nb[r] + eps;
    if (!(den > 0)) throw NumericalError("cosine: zero-norm vector with eps = 0");
    out[r] = dot / den;
  }
  Shape out_shape = a.shape();
  out_shape.pop_back();
  if (out_shape.empty()) out_shape.push_back(1);
  const std::size_t ida = a.node_id(), idb = b.node_id();
  return a.tape().record("cosine", std::move(out_shape), std::move(out), {a, b},
                         [=, na = std::move(na), nb = std::move(nb), dots = std::move(dots)](Tape& t, std::size_t self) {
                           auto g = t.grad_view(self);
                           auto x = t.value(ida), y = t.value(idb);
                           const bool need_a = t.requires_grad(ida), need_b = t.requires_grad(idb);
                           double* ga = need_a ? t.grad_buffer(ida).data() : nullptr;
                           double* gb = need_b ? t.grad_buffer(idb).data() : nullptr;
                           for (std::size_t r = 0; r < rows; ++r) {
                             const double den = na[r] * nb[r] + eps;
                             const double c1 = g[r] / den;
                             const double c2 = g[r] * dots[r] / (den * den);
                             for (std::size_t j = 0; j < d; ++j) {
                               const double xa = x[r * d + j], yb = y[r * d + j];
                               if (ga) ga[r * d + j] += c1 * yb - (na[r] > 0 ? c2 * nb[r] * xa / na[r] : 0.0);
                               if (gb) gb[r * d + j] += c1 * xa - (nb[r] > 0 ? c2 * na[r] * yb / nb[r] : 0.0);
                             }
                           }
                         });
}

Tensor stop_gradient(const Tensor& x) { return x.tape().constant(x.shape(), x.to_vector()); }

Tensor straight_through(const Tensor& forward, const Tensor& gradient_path) {
  require_same_tape("straight_through", forward, gradient_path);
  if (forward.shape() != gradient_path.shape()) {
    shape_error("straight_through", shape_str(forward.shape()) + " vs " + shape_str(gradient_path.shape()));
  }
  const std::size_t id = gradient_path.node_id();
  return forward.tape().record("straight_through", forward.shape(), forward.to_vector(), {gradient_path},
                               [id](Tape& t, std::size_t self) {
                                 auto g = t.grad_view(self);
                                 auto& gx = t.grad_buffer(id);
                                 for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                               });
}

Tensor one_hot_argmax(const Tensor& x) {
  const std::size_t n = x.shape().back(), rows = x.size() / n;
  auto in = x.data();
  std::vector<double> out(x.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < n; ++j) {
      if (in[r * n + j] > in[r * n + best]) best = j;
    }
    out[r * n + best] = 1.0;
  }
  return x.tape().constant(x.shape(), std::move(out));
}

Tensor gumbel_softmax(const Tensor& logits, double temperature, Rng& rng, bool hard) {
  if (!(temperature > 0)) throw ValidationError("gumbel_softmax: temperature must be positive");
  std::vector<double> noise(logits.size());
  for (auto& g : noise) g = -std::log(-std::log(rng.uniform_open()));
  Tensor perturbed = add(logits, logits.tape().constant(logits.shape(), std::move(noise)));
  Tensor y = softmax(mul_scalar(perturbed, 1.0 / temperature));
  if (!hard) return y;
  return straight_through(one_hot_argmax(y), y);
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 std::span<const std::uint8_t> allowed, const Tensor& bias) {
  require_same_tape("attention", q, k);
  require_same_tape("attention", q, v);
  if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
    shape_error("attention", "q/k/v must share a [B,T,D] shape");
  }
  const std::size_t B = q.dim(0), T = q.dim(1), D = q.dim(2);
  if (heads == 0 || D % heads != 0) shape_error("attention", "embed dim not divisible by heads");
  if (!allowed.empty() && allowed.size() != B * T * T) shape_error("attention", "mask size mismatch");
  const bool has_bias = bias.defined();
  if (has_bias) {
    require_same_tape("attention", q, bias);
    if (bias.shape() != Shape{B, T, T}) shape_error("attention", "bias must be [B,T,T]");
  }
  const std::size_t dh = D / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  auto qd = q.data(), kd = k.data(), vd = v.data();
  std::vector<double> out(B * T * D, 0.0);
  std::vector<double> probs(B * heads * T * T);
  RowMat scores(T, T);
  for (std::size_t b = 0; b < B; ++b) {
    const std::uint8_t* mask_b = allowed.empty() ? nullptr : allowed.data() + b * T * T;
    const double* bias_b = has_bias ? bias.data().data() + b * T * T : nullptr;
    for (std::size_t h = 0; h < heads; ++h) {
      StridedC qh(qd.data() + b * T * D + h * dh, T, dh, Eigen::OuterStride<>(D));
      StridedC kh(kd.data() + b * T * D + h * dh, T, dh, Eigen::OuterStride<>(D));
      StridedC vh(vd.data() + b * T * D + h * dh, T, dh, Eigen::OuterStride<>(D));
      scores.noalias() = qh * kh.transpose();
      scores *= scale;
      if (bias_b) scores += MapC(bias_b, T, T);
      double* p = probs.data() + (b * heads + h) * T * T;
      softmax_rows(scores.data(), mask_b, p, T, T);
      Strided(out.data() + b * T * D + h * dh, T, dh, Eigen::OuterStride<>(D)).noalias() = MapC(p, T, T) * vh;
    }
  }
  const std::size_t idq = q.node_id(), idk = k.node_id(), idv = v.node_id();
  const std::size_t idb = has_bias ? bias.node_id() : 0;
  auto fn = [=, probs = std::move(probs)](Tape& t, std::size_t self) {
    auto g = t.grad_view(self);
    auto qv = t.value(idq), kv = t.value(idk), vv = t.value(idv);
    double* gq = t.requires_grad(idq) ? t.grad_buffer(idq).data() : nullptr;
    double* gk = t.requires_grad(idk) ? t.grad_buffer(idk).data() : nullptr;
    double* gv = t.requires_grad(idv) ? t.grad_buffer(idv).data() : nullptr;
    double* gb = (has_bias && t.requires_grad(idb)) ? t.grad_buffer(idb).data() : nullptr;
    RowMat dp(T, T), ds(T, T);
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = b * T * D + h * dh;
        StridedC go(g.data() + off, T, dh, Eigen::OuterStride<>(D));
        MapC p(probs.data() + (b * heads + h) * T * T, T, T);
        if (gv) Strided(gv + off, T, dh, Eigen::OuterStride<>(D)).noalias() += p.transpose() * go;
        if (!gq && !gk && !gb) continue;
        dp.noalias() = go * StridedC(vv.data() + off, T, dh, Eigen::OuterStride<>(D)).transpose();
        ds.setZero();
        for (std::size_t i = 0; i < T; ++i) softmax_row_backward(p.data() + i * T, dp.data() + i * T, ds.data() + i * T, T);
        if (gb) Map(gb + b * T * T, T, T) += ds;
        if (gq) {
          Strided(gq + off, T, dh, Eigen::OuterStride<>(D)).noalias() +=
              scale * (ds * StridedC(kv.data() + off, T, dh, Eigen::OuterStride<>(D)));
        }
        if (gk) {
          Strided(gk + off, T, dh, Eigen::OuterStride<>(D)).noalias() +=
              scale * (ds.transpose() * StridedC(qv.data() + off, T, dh, Eigen::OuterStride<>(D)));
        }
      }
    }
  };
  if (has_bias) return q.tape().record("attention", q.shape(), std::move(out), {q, k, v, bias}, fn);
  return q.tape().record("attention", q.shape(), std::move(out), {q, k, v}, fn);
}

Tensor affine_transform(const Tensor& maps, std::span<const double> theta) {
  if (maps.rank() != 4) shape_error("affine_transform", "maps must be [N,C,H,W]");
  const std::size_t N = maps.dim(0), C = maps.dim(1), H = maps.dim(2), W = maps.dim(3);
  if (theta.size() != 6 * N) shape_error("affine_transform", "need one 2x3 matrix per map");
  // For each output pixel: four source taps with bilinear weights.
  struct Tap {
    std::size_t src[4];
    double w[4];
  };
  std::vector<Tap> taps(N * H * W);
  for (std::size_t n = 0; n < N; ++n) {
    const double* th = theta.data() + 6 * n;
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j) {
        const double xn = (2.0 * j + 1.0) / W - 1.0;
        const double yn = (2.0 * i + 1.0) / H - 1.0;
        const double xs = th[0] * xn + th[1] * yn + th[2];
        const double ys = th[3] * xn + th[4] * yn + th[5];
        const double px = ((xs + 1.0) * W - 1.0) / 2.0;
        const double py = ((ys + 1.0) * H - 1.0) / 2.0;
        const double fx = std::floor(px), fy = std::floor(py);
        const double ax = px - fx, ay = py - fy;
        Tap tap{};
        const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
        const long xs4[4] = {x0, x0 + 1, x0, x0 + 1};
        const long ys4[4] = {y0, y0, y0 + 1, y0 + 1};
        const double ws4[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
        for (int c = 0; c < 4; ++c) {
          const bool inside = xs4[c] >= 0 && ys4[c] >= 0 && xs4[c] < static_cast<long>(W) && ys4[c] < static_cast<long>(H);
          tap.src[c] = inside ? static_cast<std::size_t>(ys4[c]) * W + static_cast<std::size_t>(xs4[c]) : 0;
          tap.w[c] = inside ? ws4[c] : 0.0;
        }
        taps[(n * H + i) * W + j] = tap;
      }
  }
  auto in = maps.data();
  std::vector<double> out(maps.size(), 0.0);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const double* plane = in.data() + (n * C + c) * H * W;
      double* dst = out.data() + (n * C + c) * H * W;
      for (std::size_t p = 0; p < H * W; ++p) {
        const Tap& tp = taps[n * H * W + p];
        double s = 0.0;
        for (int q = 0; q < 4; ++q) s += tp.w[q] * plane[tp.src[q]];
        dst[p] = s;
      }
    }
  const std::size_t id = maps.node_id();
  return maps.tape().record("affine_transform", maps.shape(), std::move(out), {maps},
                            [=, taps = std::move(taps)](Tape& t, std::size_t self) {
                              auto g = t.grad_view(self);
                              auto& gx = t.grad_buffer(id);
                              for (std::size_t n = 0; n < N; ++n)
                                for (std::size_t c = 0; c < C; ++c) {
                                  double* plane = gx.data() + (n * C + c) * H * W;
                                  const double* gp = g.data() + (n * C + c) * H * W;
                                  for (std::size_t p = 0; p < H * W; ++p) {
                                    const Tap& tp = taps[n * H * W + p];
                                    for (int q = 0; q < 4; ++q) plane[tp.src[q]] += tp.w[q] * gp[p];
                                  }
                                }
                            });
}

}  // namespace partleak::ad
