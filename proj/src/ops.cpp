#include "matnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace matnet {

namespace {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapMat = Eigen::Map<RowMat<S>>;
template <typename S>
using ConstMapMat = Eigen::Map<const RowMat<S>>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
void require_same(Var<S> a, Var<S> b, const char* op) {
  if (a.tape != b.tape) throw std::logic_error(std::string(op) + ": operands on different tapes");
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                     b.shape().str());
  }
}

template <typename S>
Var<S> self_of(Tape<S>& t) {
  return Var<S>{&t, static_cast<int>(t.size())};
}

// Elementwise op whose derivative is a function of (input, output).
template <typename S, typename F, typename D>
Var<S> unary(const char* op, Var<S> a, F f, D d) {
  Tape<S>& t = *a.tape;
  const Var<S> self = self_of(t);
  Tensor<S> out(a.shape(), a.value().array().unaryExpr(f));
  return t.record(op, std::move(out), {a}, [a, self, d](Tape<S>& tp, const Tensor<S>& g) {
    const auto& x = tp.value(a).array();
    const auto& y = tp.value(self).array();
    tp.accumulate(a, g.array() * x.binaryExpr(y, d));
  });
}

// Copies a (C, H, W) image patch grid into a (C*k*k, Ho*Wo) column block
// whose rows are `ld` apart.
// Output columns [lo, hi) whose input column ow * stride - pad + kj is in range.
inline std::pair<Index, Index> valid_span(Index kj, Index stride, Index pad, Index width, Index out_w) {
  const Index first = pad - kj;  // smallest ow * stride allowed
  Index lo = first <= 0 ? 0 : (first + stride - 1) / stride;
  Index hi = (width - 1 + pad - kj) < 0 ? 0 : (width - 1 + pad - kj) / stride + 1;
  lo = std::min(lo, out_w);
  hi = std::clamp(hi, lo, out_w);
  return {lo, hi};
}

template <typename S>
void im2col(const S* img, Index channels, Index height, Index width, Index k, Index stride,
            Index pad, Index out_h, Index out_w, S* col, Index ld) {
  for (Index c = 0; c < channels; ++c) {
    for (Index ki = 0; ki < k; ++ki) {
      for (Index kj = 0; kj < k; ++kj) {
        S* dst = col + ((c * k + ki) * k + kj) * ld;
        const auto [lo, hi] = valid_span(kj, stride, pad, width, out_w);
        for (Index oh = 0; oh < out_h; ++oh) {
          const Index iy = oh * stride - pad + ki;
          S* row = dst + oh * out_w;
          if (iy < 0 || iy >= height) {
            std::fill(row, row + out_w, S(0));
            continue;
          }
          const S* src = img + (c * height + iy) * width - pad + kj;
          std::fill(row, row + lo, S(0));
          if (stride == 1) {
            std::copy(src + lo, src + hi, row + lo);
          } else {
            for (Index ow = lo; ow < hi; ++ow) row[ow] = src[ow * stride];
          }
          std::fill(row + hi, row + out_w, S(0));
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates a column block back into an image.
template <typename S>
void col2im(const S* col, Index ld, Index channels, Index height, Index width, Index k,
            Index stride, Index pad, Index out_h, Index out_w, S* img) {
  for (Index c = 0; c < channels; ++c) {
    for (Index ki = 0; ki < k; ++ki) {
      for (Index kj = 0; kj < k; ++kj) {
        const S* src = col + ((c * k + ki) * k + kj) * ld;
        const auto [lo, hi] = valid_span(kj, stride, pad, width, out_w);
        for (Index oh = 0; oh < out_h; ++oh) {
          const Index iy = oh * stride - pad + ki;
          if (iy < 0 || iy >= height) continue;
          S* dst = img + (c * height + iy) * width - pad + kj;
          const S* row = src + oh * out_w;
          for (Index ow = lo; ow < hi; ++ow) dst[ow * stride] += row[ow];
        }
      }
    }
  }
}

template <typename S>
S sigmoid_scalar(S x) {
  return x >= 0 ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
}

}  // namespace

// Arithmetic

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  require_same(a, b, "add");
  Tensor<S> out(a.shape(), a.value().array() + b.value().array());
  return a.tape->record("add", std::move(out), {a, b}, [a, b](Tape<S>& t, const Tensor<S>& g) {
    t.accumulate(a, g.array());
    t.accumulate(b, g.array());
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  require_same(a, b, "sub");
  Tensor<S> out(a.shape(), a.value().array() - b.value().array());
  return a.tape->record("sub", std::move(out), {a, b}, [a, b](Tape<S>& t, const Tensor<S>& g) {
    t.accumulate(a, g.array());
    t.accumulate(b, -g.array());
  });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  require_same(a, b, "mul");
  Tensor<S> out(a.shape(), a.value().array() * b.value().array());
  return a.tape->record("mul", std::move(out), {a, b}, [a, b](Tape<S>& t, const Tensor<S>& g) {
    if (t.requires_grad(a)) t.accumulate(a, g.array() * t.value(b).array());
    if (t.requires_grad(b)) t.accumulate(b, g.array() * t.value(a).array());
  });
}

template <typename S>
Var<S> add_scalar(Var<S> a, S value) {
  Tensor<S> out(a.shape(), a.value().array() + value);
  return a.tape->record("add_scalar", std::move(out), {a},
                        [a](Tape<S>& t, const Tensor<S>& g) { t.accumulate(a, g.array()); });
}

template <typename S>
Var<S> scale(Var<S> a, S factor) {
  Tensor<S> out(a.shape(), a.value().array() * factor);
  return a.tape->record("scale", std::move(out), {a}, [a, factor](Tape<S>& t, const Tensor<S>& g) {
    t.accumulate(a, g.array() * factor);
  });
}

template <typename S>
Var<S> square(Var<S> a) {
  return unary("square", a, [](S x) { return x * x; }, [](S x, S) { return S(2) * x; });
}

template <typename S>
Var<S> exp(Var<S> a) {
  return unary("exp", a, [](S x) { return std::exp(x); }, [](S, S y) { return y; });
}

template <typename S>
Var<S> log(Var<S> a, S floor) {
  return unary(
      "log", a, [floor](S x) { return std::log(std::max(x, floor)); },
      [floor](S x, S) { return x > floor ? S(1) / x : S(0); });
}

template <typename S>
Var<S> tanh(Var<S> a) {
  return unary("tanh", a, [](S x) { return std::tanh(x); }, [](S, S y) { return S(1) - y * y; });
}

template <typename S>
Var<S> sigmoid(Var<S> a) {
  return unary("sigmoid", a, [](S x) { return sigmoid_scalar(x); },
               [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
Var<S> lrelu(Var<S> a, S slope) {
  return unary(
      "lrelu", a, [slope](S x) { return x >= 0 ? x : slope * x; },
      [slope](S x, S) { return x >= 0 ? S(1) : slope; });
}

template <typename S>
Var<S> clamp(Var<S> a, S lo, S hi) {
  return unary(
      "clamp", a, [lo, hi](S x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](S x, S) { return (x >= lo && x <= hi) ? S(1) : S(0); });
}

template <typename S>
Var<S> blend(Var<S> a, Var<S> b, const Tensor<S>& mask) {
  require_same(a, b, "blend");
  if (mask.shape() != a.shape()) throw ShapeError("blend: mask shape mismatch");
  const auto keep = (mask.array() != S(0));
  Tensor<S> out(a.shape(), keep.select(a.value().array(), b.value().array()));
  return a.tape->record("blend", std::move(out), {a, b},
                        [a, b, mask](Tape<S>& t, const Tensor<S>& g) {
                          const auto on = (mask.array() != S(0));
                          t.accumulate(a, on.select(g.array(), S(0)));
                          t.accumulate(b, on.select(S(0), g.array()));
                        });
}

template <typename S>
Var<S> detach(Var<S> a) {
  return a.tape->constant(a.value());
}

// Reductions

template <typename S>
Var<S> sum(Var<S> a) {
  Tensor<S> out = Tensor<S>::constant(Shape{1}, a.value().array().sum());
  return a.tape->record("sum", std::move(out), {a}, [a](Tape<S>& t, const Tensor<S>& g) {
    t.grad_buffer(a) += g[0];
  });
}

template <typename S>
Var<S> mean(Var<S> a) {
  const S inv = S(1) / static_cast<S>(a.value().size());
  return scale(sum(a), inv);
}

template <typename S>
Var<S> sum_per_example(Var<S> a) {
  const Index batch = a.shape()[0];
  const Index inner = a.shape().inner();
  ConstMapMat<S> m(a.value().data(), batch, inner);
  Tensor<S> out(Shape{batch});
  Eigen::Map<Vec<S>>(out.data(), batch) = m.rowwise().sum();
  return a.tape->record("sum_per_example", std::move(out), {a},
                        [a, batch, inner](Tape<S>& t, const Tensor<S>& g) {
                          MapMat<S> dst(t.grad_buffer(a).data(), batch, inner);
                          dst.colwise() += Eigen::Map<const Vec<S>>(g.data(), batch);
                        });
}

// Structural

template <typename S>
Var<S> reshape(Var<S> a, const Shape& shape) {
  if (shape.numel() != a.value().size()) {
    throw ShapeError("reshape: " + a.shape().str() + " to " + shape.str());
  }
  return a.tape->record("reshape", a.value().reshaped(shape), {a},
                        [a](Tape<S>& t, const Tensor<S>& g) { t.accumulate(a, g.array()); });
}

template <typename S>
Var<S> concat_features(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_features: no inputs");
  if (parts.size() == 1) return parts.front();
  const Shape& first = parts.front().shape();
  const Index batch = first[0];
  const Index per_feature = first.inner() / first[1];
  Index features = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.rank() != first.rank() || s[0] != batch || s.inner() / s[1] != per_feature ||
        (s.rank() == 4 && (s[2] != first[2] || s[3] != first[3]))) {
      throw ShapeError("concat_features: incompatible " + s.str() + " vs " + first.str());
    }
    features += s[1];
  }
  Tensor<S> out(first.with_dim(1, features));
  const Index out_row = features * per_feature;
  Index offset = 0;
  for (const auto& p : parts) {
    const Index width = p.shape()[1] * per_feature;
    for (Index n = 0; n < batch; ++n) {
      std::memcpy(out.data() + n * out_row + offset, p.value().data() + n * width,
                  sizeof(S) * width);
    }
    offset += width;
  }
  return parts.front().tape->record(
      "concat_features", std::move(out), parts,
      [parts, batch, per_feature, out_row](Tape<S>& t, const Tensor<S>& g) {
        Index off = 0;
        for (const auto& p : parts) {
          const Index width = t.value(p).shape()[1] * per_feature;
          if (t.requires_grad(p)) {
            MapMat<S> dst(t.grad_buffer(p).data(), batch, width);
            dst += ConstMapMat<S>(g.data(), batch, out_row).middleCols(off, width);
          }
          off += width;
        }
      });
}

template <typename S>
Var<S> slice_features(Var<S> a, Index start, Index count) {
  const Shape& s = a.shape();
  if (start < 0 || count <= 0 || start + count > s[1]) {
    throw ShapeError("slice_features: range out of bounds for " + s.str());
  }
  const Index batch = s[0];
  const Index per_feature = s.inner() / s[1];
  const Index row = s.inner();
  Tensor<S> out(s.with_dim(1, count));
  MapMat<S>(out.data(), batch, count * per_feature) =
      ConstMapMat<S>(a.value().data(), batch, row).middleCols(start * per_feature, count * per_feature);
  return a.tape->record("slice_features", std::move(out), {a},
                        [a, batch, row, start, count, per_feature](Tape<S>& t, const Tensor<S>& g) {
                          MapMat<S> dst(t.grad_buffer(a).data(), batch, row);
                          dst.middleCols(start * per_feature, count * per_feature) +=
                              ConstMapMat<S>(g.data(), batch, count * per_feature);
                        });
}

template <typename S>
Var<S> broadcast_batch(Var<S> a, Index batch) {
  const Shape& s = a.shape();
  if (s[0] != 1) throw ShapeError("broadcast_batch: leading dim must be 1, got " + s.str());
  const Index inner = s.inner();
  Tensor<S> out(s.with_dim(0, batch));
  MapMat<S>(out.data(), batch, inner).rowwise() =
      ConstMapMat<S>(a.value().data(), 1, inner).row(0);
  return a.tape->record("broadcast_batch", std::move(out), {a},
                        [a, batch, inner](Tape<S>& t, const Tensor<S>& g) {
                          MapMat<S> dst(t.grad_buffer(a).data(), 1, inner);
                          dst += ConstMapMat<S>(g.data(), batch, inner).colwise().sum();
                        });
}

template <typename S>
Var<S> repeat_examples(Var<S> a, Index times) {
  const Shape& s = a.shape();
  const Index batch = s[0];
  const Index inner = s.inner();
  Tensor<S> out(s.with_dim(0, batch * times));
  for (Index n = 0; n < batch; ++n) {
    for (Index r = 0; r < times; ++r) {
      std::memcpy(out.data() + (n * times + r) * inner, a.value().data() + n * inner,
                  sizeof(S) * inner);
    }
  }
  return a.tape->record("repeat_examples", std::move(out), {a},
                        [a, batch, inner, times](Tape<S>& t, const Tensor<S>& g) {
                          auto& dst = t.grad_buffer(a);
                          for (Index n = 0; n < batch; ++n) {
                            for (Index r = 0; r < times; ++r) {
                              dst.segment(n * inner, inner) +=
                                  g.array().segment((n * times + r) * inner, inner);
                            }
                          }
                        });
}

template <typename S>
Var<S> stack_columns(const std::vector<Var<S>>& columns) {
  if (columns.empty()) throw ShapeError("stack_columns: no inputs");
  const Index batch = columns.front().value().size();
  const Index k = static_cast<Index>(columns.size());
  Tensor<S> out(Shape{batch, k});
  for (Index j = 0; j < k; ++j) {
    const auto& col = columns[static_cast<std::size_t>(j)];
    if (col.shape() != Shape{batch}) throw ShapeError("stack_columns: columns must be (b)");
    for (Index n = 0; n < batch; ++n) out[n * k + j] = col.value()[n];
  }
  return columns.front().tape->record(
      "stack_columns", std::move(out), columns, [columns, batch, k](Tape<S>& t, const Tensor<S>& g) {
        for (Index j = 0; j < k; ++j) {
          const auto& col = columns[static_cast<std::size_t>(j)];
          if (!t.requires_grad(col)) continue;
          auto& dst = t.grad_buffer(col);
          for (Index n = 0; n < batch; ++n) dst[n] += g[n * k + j];
        }
      });
}

template <typename S>
Var<S> column(Var<S> a, Index col) {
  const Index batch = a.shape()[0];
  const Index k = a.shape()[1];
  Tensor<S> out(Shape{batch});
  for (Index n = 0; n < batch; ++n) out[n] = a.value()[n * k + col];
  return a.tape->record("column", std::move(out), {a},
                        [a, batch, k, col](Tape<S>& t, const Tensor<S>& g) {
                          auto& dst = t.grad_buffer(a);
                          for (Index n = 0; n < batch; ++n) dst[n * k + col] += g[n];
                        });
}

template <typename S>
Var<S> logsumexp_rows(Var<S> a) {
  if (a.shape().rank() != 2) throw ShapeError("logsumexp_rows: expected (b, k)");
  const Index batch = a.shape()[0];
  const Index k = a.shape()[1];
  ConstMapMat<S> x(a.value().data(), batch, k);
  const Vec<S> mx = x.rowwise().maxCoeff();
  RowMat<S> w = (x.colwise() - mx).array().exp().matrix();
  Tensor<S> out(Shape{batch});
  for (Index n = 0; n < batch; ++n) out[n] = mx[n] + std::log(w.row(n).sum());
  const Var<S> self = self_of(*a.tape);
  return a.tape->record("logsumexp_rows", std::move(out), {a},
                        [a, self, batch, k](Tape<S>& t, const Tensor<S>& g) {
                          ConstMapMat<S> xv(t.value(a).data(), batch, k);
                          const auto& lse = t.value(self);
                          MapMat<S> dst(t.grad_buffer(a).data(), batch, k);
                          for (Index n = 0; n < batch; ++n) {
                            dst.row(n).array() +=
                                g[n] * (xv.row(n).array() - lse[n]).exp();
                          }
                        });
}

template <typename S>
Var<S> softmax_rows(Var<S> a) {
  if (a.shape().rank() != 2) throw ShapeError("softmax_rows: expected (b, k)");
  const Index batch = a.shape()[0];
  const Index k = a.shape()[1];
  ConstMapMat<S> x(a.value().data(), batch, k);
  Tensor<S> out(a.shape());
  MapMat<S> y(out.data(), batch, k);
  y = (x.colwise() - x.rowwise().maxCoeff()).array().exp().matrix();
  y.array().colwise() /= y.rowwise().sum().array();
  const Var<S> self = self_of(*a.tape);
  return a.tape->record("softmax_rows", std::move(out), {a},
                        [a, self, batch, k](Tape<S>& t, const Tensor<S>& g) {
                          ConstMapMat<S> yv(t.value(self).data(), batch, k);
                          ConstMapMat<S> gv(g.data(), batch, k);
                          const Vec<S> dot = (gv.array() * yv.array()).rowwise().sum();
                          MapMat<S> dst(t.grad_buffer(a).data(), batch, k);
                          dst.array() += yv.array() * (gv.colwise() - dot).array();
                        });
}

// Linear maps

template <typename S>
Var<S> linear(Var<S> input, Var<S> weight, Var<S> bias) {
  const Shape& xs = input.shape();
  const Shape& ws = weight.shape();
  if (xs.rank() != 2 || ws.rank() != 2 || ws[1] != xs[1] || bias.shape() != Shape{ws[0]}) {
    throw ShapeError("linear: input " + xs.str() + ", weight " + ws.str() + ", bias " +
                     bias.shape().str());
  }
  const Index batch = xs[0];
  const Index n = xs[1];
  const Index m = ws[0];
  Tensor<S> out(Shape{batch, m});
  MapMat<S> y(out.data(), batch, m);
  y.noalias() = ConstMapMat<S>(input.value().data(), batch, n) *
                ConstMapMat<S>(weight.value().data(), m, n).transpose();
  y.rowwise() += Eigen::Map<const Vec<S>>(bias.value().data(), m).transpose();
  return input.tape->record(
      "linear", std::move(out), {input, weight, bias},
      [input, weight, bias, batch, n, m](Tape<S>& t, const Tensor<S>& g) {
        ConstMapMat<S> gy(g.data(), batch, m);
        if (t.requires_grad(input)) {
          MapMat<S>(t.grad_buffer(input).data(), batch, n).noalias() +=
              gy * ConstMapMat<S>(t.value(weight).data(), m, n);
        }
        if (t.requires_grad(weight)) {
          MapMat<S>(t.grad_buffer(weight).data(), m, n).noalias() +=
              gy.transpose() * ConstMapMat<S>(t.value(input).data(), batch, n);
        }
        if (t.requires_grad(bias)) {
          Eigen::Map<Vec<S>>(t.grad_buffer(bias).data(), m) += gy.colwise().sum().transpose();
        }
      });
}

template <typename S>
Var<S> conv2d(Var<S> input, Var<S> kernel, Var<S> bias, Index stride, Index pad) {
  const Shape& xs = input.shape();
  const Shape& ks = kernel.shape();
  if (xs.rank() != 4 || ks.rank() != 4 || ks[2] != ks[3]) {
    throw ShapeError("conv2d: input " + xs.str() + ", kernel " + ks.str());
  }
  if (ks[1] != xs[1]) {
    throw ShapeError("conv2d: channel mismatch, input has " + std::to_string(xs[1]) +
                     " features, kernel expects " + std::to_string(ks[1]));
  }
  if (bias.shape() != Shape{ks[0]}) throw ShapeError("conv2d: bias must be (c_out)");
  const Index batch = xs[0], cin = xs[1], h = xs[2], w = xs[3];
  const Index cout = ks[0], k = ks[2];
  const Index oh = (h + 2 * pad - k) / stride + 1;
  const Index ow = (w + 2 * pad - k) / stride + 1;
  if (oh <= 0 || ow <= 0) throw ShapeError("conv2d: kernel larger than padded input");
  const Index pix = oh * ow;
  const Index rows = cin * k * k;
  const Index in_size = cin * h * w;
  const Index out_size = cout * pix;

  // One image at a time keeps the column buffer cache-resident and lets
  // each (c_out, pixels) product land directly in NCHW order.
  RowMat<S> col(rows, pix);
  ConstMapMat<S> kmat(kernel.value().data(), cout, rows);
  const auto bias_vec = Eigen::Map<const Vec<S>>(bias.value().data(), cout);
  Tensor<S> out(Shape{batch, cout, oh, ow});
  for (Index n = 0; n < batch; ++n) {
    im2col(input.value().data() + n * in_size, cin, h, w, k, stride, pad, oh, ow, col.data(), pix);
    MapMat<S> y(out.data() + n * out_size, cout, pix);
    y.noalias() = kmat * col;
    y.colwise() += bias_vec;
  }

  return input.tape->record(
      "conv2d", std::move(out), {input, kernel, bias},
      [=](Tape<S>& t, const Tensor<S>& g) {
        const bool need_k = t.requires_grad(kernel);
        const bool need_x = t.requires_grad(input);
        if (t.requires_grad(bias)) {
          auto db = Eigen::Map<Vec<S>>(t.grad_buffer(bias).data(), cout);
          for (Index n = 0; n < batch; ++n) db += ConstMapMat<S>(g.data() + n * out_size, cout, pix).rowwise().sum();
        }
        if (!need_k && !need_x) return;
        ConstMapMat<S> km(t.value(kernel).data(), cout, rows);
        RowMat<S> cols(rows, pix);
        RowMat<S> gcol(rows, pix);
        S* dk = need_k ? t.grad_buffer(kernel).data() : nullptr;
        S* dx = need_x ? t.grad_buffer(input).data() : nullptr;
        for (Index n = 0; n < batch; ++n) {
          ConstMapMat<S> gy(g.data() + n * out_size, cout, pix);
          if (need_k) {
            im2col(t.value(input).data() + n * in_size, cin, h, w, k, stride, pad, oh, ow, cols.data(), pix);
            MapMat<S>(dk, cout, rows).noalias() += gy * cols.transpose();
          }
          if (need_x) {
            gcol.noalias() = km.transpose() * gy;
            col2im(gcol.data(), pix, cin, h, w, k, stride, pad, oh, ow, dx + n * in_size);
          }
        }
      });
}

template <typename S>
Var<S> conv2d_same(Var<S> input, Var<S> kernel, Var<S> bias) {
  const Shape& ks = kernel.shape();
  if (ks.rank() != 4 || ks[2] % 2 == 0) {
    throw ShapeError("conv2d_same: kernel size must be odd, got " + ks.str());
  }
  return conv2d(input, kernel, bias, 1, (ks[2] - 1) / 2);
}

template <typename S>
Var<S> conv_transpose2d(Var<S> input, Var<S> kernel, Var<S> bias, Index stride, Index pad) {
  const Shape& xs = input.shape();
  const Shape& ks = kernel.shape();
  if (xs.rank() != 4 || ks.rank() != 4 || ks[2] != ks[3] || ks[0] != xs[1]) {
    throw ShapeError("conv_transpose2d: input " + xs.str() + ", kernel " + ks.str());
  }
  if (bias.shape() != Shape{ks[1]}) throw ShapeError("conv_transpose2d: bias must be (c_out)");
  const Index batch = xs[0], cin = xs[1], h = xs[2], w = xs[3];
  const Index cout = ks[1], k = ks[2];
  const Index oh = (h - 1) * stride - 2 * pad + k;
  const Index ow = (w - 1) * stride - 2 * pad + k;
  if (oh <= 0 || ow <= 0) throw ShapeError("conv_transpose2d: empty output");
  const Index in_pix = h * w;
  const Index out_pix = oh * ow;
  const Index rows = cout * k * k;
  const Index in_size = cin * in_pix;
  const Index out_size = cout * out_pix;

  ConstMapMat<S> kmat(kernel.value().data(), cin, rows);
  RowMat<S> col(rows, in_pix);
  Tensor<S> out(Shape{batch, cout, oh, ow});
  for (Index n = 0; n < batch; ++n) {
    col.noalias() = kmat.transpose() * ConstMapMat<S>(input.value().data() + n * in_size, cin, in_pix);
    S* dst = out.data() + n * out_size;
    col2im(col.data(), in_pix, cout, oh, ow, k, stride, pad, h, w, dst);
    MapMat<S>(dst, cout, out_pix).colwise() += Eigen::Map<const Vec<S>>(bias.value().data(), cout);
  }

  return input.tape->record(
      "conv_transpose2d", std::move(out), {input, kernel, bias},
      [=](Tape<S>& t, const Tensor<S>& g) {
        const bool need_k = t.requires_grad(kernel);
        const bool need_x = t.requires_grad(input);
        if (t.requires_grad(bias)) {
          auto db = Eigen::Map<Vec<S>>(t.grad_buffer(bias).data(), cout);
          for (Index n = 0; n < batch; ++n) {
            db += ConstMapMat<S>(g.data() + n * out_size, cout, out_pix).rowwise().sum();
          }
        }
        if (!need_k && !need_x) return;
        ConstMapMat<S> km(t.value(kernel).data(), cin, rows);
        RowMat<S> gcol(rows, in_pix);
        S* dk = need_k ? t.grad_buffer(kernel).data() : nullptr;
        S* dx = need_x ? t.grad_buffer(input).data() : nullptr;
        for (Index n = 0; n < batch; ++n) {
          im2col(g.data() + n * out_size, cout, oh, ow, k, stride, pad, h, w, gcol.data(), in_pix);
          if (need_k) {
            MapMat<S>(dk, cin, rows).noalias() +=
                ConstMapMat<S>(t.value(input).data() + n * in_size, cin, in_pix) * gcol.transpose();
          }
          if (need_x) MapMat<S>(dx + n * in_size, cin, in_pix).noalias() += km * gcol;
        }
      });
}

template <typename S>
Var<S> strided_resample(Var<S> input, Resample direction, Var<S> kernel, Var<S> bias) {
  const Shape& xs = input.shape();
  if (xs.rank() != 4) throw ShapeError("strided_resample: expected rank-4 input");
  if (kernel.shape().rank() != 4 || kernel.shape()[2] != 4 || kernel.shape()[3] != 4) {
    throw ShapeError("strided_resample: kernel must be 4x4, got " + kernel.shape().str());
  }
  if (direction == Resample::kDown) {
    if (xs[2] % 2 != 0 || xs[3] % 2 != 0) {
      throw ShapeError("strided_resample: spatial dims " + xs.str() + " not divisible by 2");
    }
    return conv2d(input, kernel, bias, 2, 1);
  }
  return conv_transpose2d(input, kernel, bias, 2, 1);
}

// Likelihood kernels

template <typename S>
Var<S> bernoulli_nll(Var<S> logits, Var<S> x) {
  require_same(logits, x, "bernoulli_nll");
  const S cap = -std::log(S(1e-12));
  const auto& l = logits.value().array();
  const auto& xv = x.value().array();
  typename Tensor<S>::Array raw =
      l.max(S(0)) - l * xv + (-(l.abs())).exp().log1p();
  Tensor<S> out(logits.shape(), raw.min(cap));
  return logits.tape->record(
      "bernoulli_nll", std::move(out), {logits, x}, [logits, x, cap](Tape<S>& t, const Tensor<S>& g) {
        const auto& lv = t.value(logits).array();
        const auto& xx = t.value(x).array();
        const auto live =
            ((lv.max(S(0)) - lv * xx + (-(lv.abs())).exp().log1p()) < cap).template cast<S>();
        if (t.requires_grad(logits)) {
          const auto p = lv.unaryExpr([](S v) { return sigmoid_scalar(v); });
          t.accumulate(logits, g.array() * live * (p - xx));
        }
        if (t.requires_grad(x)) t.accumulate(x, g.array() * live * (-lv));
      });
}

namespace {

constexpr double kHalfBin = 1.0 / 512.0;

template <typename S>
struct BinTerms {
  S prob;
  S d_mean;
  S d_log_scale;
};

// Mass of the quantisation bin containing x under Logistic(mean, exp(log_scale)).
template <typename S>
BinTerms<S> logistic_bin(S mean, S log_scale, S x) {
  const S s = std::exp(log_scale);
  const long k = std::clamp(static_cast<long>(std::floor(x * S(256))), 0L, 255L);
  const S centre = (static_cast<S>(k) + S(0.5)) / S(256);
  const bool open_lo = (k == 0);
  const bool open_hi = (k == 255);
  const S a = open_hi ? std::numeric_limits<S>::infinity() : (centre + S(kHalfBin) - mean) / s;
  const S b = open_lo ? -std::numeric_limits<S>::infinity() : (centre - S(kHalfBin) - mean) / s;
  // sigma(a) - sigma(b) without cancellation.
  const S prob = sigmoid_scalar(a) * sigmoid_scalar(-b) * -std::expm1(b - a);
  auto dsig = [](S v) { return std::isinf(v) ? S(0) : sigmoid_scalar(v) * sigmoid_scalar(-v); };
  auto dsig_t = [&](S v) { return std::isinf(v) ? S(0) : dsig(v) * v; };
  return {prob, -(dsig(a) - dsig(b)) / s, -(dsig_t(a) - dsig_t(b))};
}

}  // namespace

template <typename S>
Var<S> logistic_bin_nll(Var<S> mean, Var<S> log_scale, Var<S> x) {
  require_same(mean, log_scale, "logistic_bin_nll");
  require_same(mean, x, "logistic_bin_nll");
  const S floor = S(1e-12);
  Tensor<S> out(mean.shape());
  for (Index i = 0; i < out.size(); ++i) {
    const auto terms = logistic_bin(mean.value()[i], log_scale.value()[i], x.value()[i]);
    out[i] = -std::log(std::max(terms.prob, floor));
  }
  return mean.tape->record(
      "logistic_bin_nll", std::move(out), {mean, log_scale, x},
      [mean, log_scale, x, floor](Tape<S>& t, const Tensor<S>& g) {
        const Index n = t.value(mean).size();
        typename Tensor<S>::Array dm(n), ds(n);
        for (Index i = 0; i < n; ++i) {
          const auto terms =
              logistic_bin(t.value(mean)[i], t.value(log_scale)[i], t.value(x)[i]);
          const S coeff = terms.prob > floor ? -g[i] / terms.prob : S(0);
          dm[i] = coeff * terms.d_mean;
          ds[i] = coeff * terms.d_log_scale;
        }
        t.accumulate(mean, dm);
        t.accumulate(log_scale, ds);
      });
}

#define MATNET_INSTANTIATE_OPS(S)                                                          \
  template Var<S> add(Var<S>, Var<S>);                                                     \
  template Var<S> sub(Var<S>, Var<S>);                                                     \
  template Var<S> mul(Var<S>, Var<S>);                                                     \
  template Var<S> add_scalar(Var<S>, S);                                                   \
  template Var<S> scale(Var<S>, S);                                                        \
  template Var<S> square(Var<S>);                                                          \
  template Var<S> exp(Var<S>);                                                             \
  template Var<S> log(Var<S>, S);                                                          \
  template Var<S> tanh(Var<S>);                                                            \
  template Var<S> sigmoid(Var<S>);                                                         \
  template Var<S> lrelu(Var<S>, S);                                                        \
  template Var<S> clamp(Var<S>, S, S);                                                     \
  template Var<S> blend(Var<S>, Var<S>, const Tensor<S>&);                                 \
  template Var<S> detach(Var<S>);                                                          \
  template Var<S> sum(Var<S>);                                                             \
  template Var<S> mean(Var<S>);                                                            \
  template Var<S> sum_per_example(Var<S>);                                                 \
  template Var<S> reshape(Var<S>, const Shape&);                                           \
  template Var<S> concat_features(const std::vector<Var<S>>&);                             \
  template Var<S> slice_features(Var<S>, Index, Index);                                    \
  template Var<S> broadcast_batch(Var<S>, Index);                                          \
  template Var<S> repeat_examples(Var<S>, Index);                                          \
  template Var<S> stack_columns(const std::vector<Var<S>>&);                               \
  template Var<S> column(Var<S>, Index);                                                   \
  template Var<S> logsumexp_rows(Var<S>);                                                  \
  template Var<S> softmax_rows(Var<S>);                                                    \
  template Var<S> linear(Var<S>, Var<S>, Var<S>);                                          \
  template Var<S> conv2d(Var<S>, Var<S>, Var<S>, Index, Index);                            \
  template Var<S> conv2d_same(Var<S>, Var<S>, Var<S>);                                     \
  template Var<S> conv_transpose2d(Var<S>, Var<S>, Var<S>, Index, Index);                  \
  template Var<S> strided_resample(Var<S>, Resample, Var<S>, Var<S>);                      \
  template Var<S> bernoulli_nll(Var<S>, Var<S>);                                           \
  template Var<S> logistic_bin_nll(Var<S>, Var<S>, Var<S>);

MATNET_INSTANTIATE_OPS(float)
MATNET_INSTANTIATE_OPS(double)

}  // namespace matnet
