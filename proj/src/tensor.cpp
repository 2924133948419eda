#include "awmf/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace awmf {

namespace {

using MatrixRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixCM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;
using MapRM = Eigen::Map<const MatrixRM>;
using MapCM = Eigen::Map<const MatrixCM>;
using MutMapRM = Eigen::Map<MatrixRM>;
using MutMapCM = Eigen::Map<MatrixCM>;

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

void require_rank4(const Tensor& t, const char* what) {
  require(t.rank() == 4, std::string(what) + " expects a rank-4 tensor, got " +
                             shape_str(t.shape()));
}

// Mirror reflection with the edge pixel repeated: -1 -> 0, n -> n-1.
inline int reflect(int i, int n) {
  if (i < 0) i = -i - 1;
  if (i >= n) i = 2 * n - i - 1;
  return i;
}

}  // namespace

// --- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool track_grad) {
  Tensor t;
  t.node_ = std::make_shared<Node>();
  t.node_->shape = std::move(shape);
  t.node_->values.assign(shape_numel(t.node_->shape), 0.0);
  t.node_->tracked = track_grad;
  if (track_grad) t.node_->grad.assign(t.node_->values.size(), 0.0);
  return t;
}

Tensor Tensor::full(Shape shape, double value, bool track_grad) {
  Tensor t = zeros(std::move(shape), track_grad);
  std::fill(t.node_->values.begin(), t.node_->values.end(), value);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool track_grad) {
  if (values.size() != shape_numel(shape)) {
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not match shape " + shape_str(shape));
  }
  Tensor t;
  t.node_ = std::make_shared<Node>();
  t.node_->shape = std::move(shape);
  t.node_->values = std::move(values);
  t.node_->tracked = track_grad;
  if (track_grad) t.node_->grad.assign(t.node_->values.size(), 0.0);
  return t;
}

Tensor Tensor::scalar_value(double value, bool track_grad) {
  return from({1}, {value}, track_grad);
}

std::span<const double> Tensor::grad() const {
  if (!node_->tracked) throw Error("tensor is not gradient-tracked");
  return node_->grad;
}

std::span<double> Tensor::grad_mut() {
  if (!node_->tracked) throw Error("tensor is not gradient-tracked");
  return node_->grad;
}

double Tensor::scalar() const {
  if (size() != 1) {
    throw ShapeError("scalar() on tensor of shape " + shape_str(shape()));
  }
  return node_->values[0];
}

std::size_t Tensor::flat_index(std::initializer_list<int> idx) const {
  const Shape& s = node_->shape;
  require(idx.size() == s.size(), "index rank mismatch");
  std::size_t flat = 0;
  std::size_t d = 0;
  for (int i : idx) {
    flat = flat * static_cast<std::size_t>(s[d]) + static_cast<std::size_t>(i);
    ++d;
  }
  return flat;
}

double Tensor::at(std::initializer_list<int> idx) const {
  return node_->values[flat_index(idx)];
}

void Tensor::set(std::initializer_list<int> idx, double v) {
  node_->values[flat_index(idx)] = v;
}

void Tensor::zero_grad() {
  if (node_->tracked) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

void Tensor::fill(double v) {
  std::fill(node_->values.begin(), node_->values.end(), v);
}

void Tape::zero_gradients() {
  for (Tensor& t : outputs_) t.zero_grad();
}

void Tape::backward(Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ShapeError("backward requires a scalar loss, got " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("<empty>")));
  }
  if (!loss.tracked()) throw Error("backward: loss is not gradient-tracked");
  loss.grad_mut()[0] += 1.0;
  for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
}

void check_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw DivergenceError(std::string(what) + " produced a non-finite value");
    }
  }
}

namespace {

bool want_grad(Tape* tape, std::initializer_list<const Tensor*> inputs) {
  if (!tape) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->tracked()) return true;
  }
  return false;
}

Tensor make_output(Shape shape, Tape* tape, std::initializer_list<const Tensor*> inputs) {
  Tensor out = Tensor::zeros(std::move(shape), want_grad(tape, inputs));
  if (out.tracked()) tape->note(out);
  return out;
}

// Per-sample im2col, row-major: row r = (ci, ky, kx), column = oy*ow + ox.
// Row fills are contiguous copies with only the padded border handled
// element-wise. Out-of-image taps are zero for kSameZero and reflected for
// kSameMirror.
void im2col_sample(const double* plane_base, int ci, int h, int w, int kh, int kw,
                   int stride, int pad_h, int pad_w, bool mirror, int oh, int ow,
                   MatrixRM& cols) {
  const std::size_t rows = static_cast<std::size_t>(ci) * kh * kw;
  cols.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(oh) * ow);
  std::size_t r = 0;
  for (int c = 0; c < ci; ++c) {
    const double* plane = plane_base + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx, ++r) {
        double* dst = cols.data() + r * static_cast<std::size_t>(oh) * ow;
        for (int oy = 0; oy < oh; ++oy, dst += ow) {
          int iy = oy * stride + ky - pad_h;
          if (mirror) iy = reflect(iy, h);
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, 0.0);
            continue;
          }
          const double* src = plane + static_cast<std::size_t>(iy) * w;
          if (stride == 1) {
            const int ix0 = kx - pad_w;
            // Split into left border, contiguous middle, right border.
            const int lead = std::max(0, -ix0);
            const int tail = std::max(0, ix0 + ow - w);
            for (int i = 0; i < lead; ++i) {
              dst[i] = mirror ? src[reflect(ix0 + i, w)] : 0.0;
            }
            const int mid = ow - lead - tail;
            if (mid > 0) std::memcpy(dst + lead, src + ix0 + lead, static_cast<std::size_t>(mid) * sizeof(double));
            for (int i = ow - tail; i < ow; ++i) {
              dst[i] = mirror ? src[reflect(ix0 + i, w)] : 0.0;
            }
          } else {
            for (int ox = 0; ox < ow; ++ox) {
              int ix = ox * stride + kx - pad_w;
              if (mirror) ix = reflect(ix, w);
              dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
            }
          }
        }
      }
    }
  }
}

// Transposed counterpart: accumulates column gradients back into the input
// plane gradient.
void col2im_sample_add(const MatrixRM& gcols, double* gplane_base, int ci, int h, int w,
                       int kh, int kw, int stride, int pad_h, int pad_w, bool mirror,
                       int oh, int ow) {
  std::size_t r = 0;
  for (int c = 0; c < ci; ++c) {
    double* plane = gplane_base + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx, ++r) {
        const double* src = gcols.data() + r * static_cast<std::size_t>(oh) * ow;
        for (int oy = 0; oy < oh; ++oy, src += ow) {
          int iy = oy * stride + ky - pad_h;
          if (mirror) iy = reflect(iy, h);
          if (iy < 0 || iy >= h) continue;
          double* dst = plane + static_cast<std::size_t>(iy) * w;
          if (stride == 1) {
            const int ix0 = kx - pad_w;
            const int lead = std::max(0, -ix0);
            const int tail = std::max(0, ix0 + ow - w);
            if (mirror) {
              for (int i = 0; i < lead; ++i) dst[reflect(ix0 + i, w)] += src[i];
              for (int i = ow - tail; i < ow; ++i) dst[reflect(ix0 + i, w)] += src[i];
            }
            const int mid = ow - lead - tail;
            double* out = dst + ix0 + lead;
            for (int i = 0; i < mid; ++i) out[i] += src[lead + i];
          } else {
            for (int ox = 0; ox < ow; ++ox) {
              int ix = ox * stride + kx - pad_w;
              if (mirror) ix = reflect(ix, w);
              if (ix >= 0 && ix < w) dst[ix] += src[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias,
              int stride, Pad pad, Tape* tape) {
  require_rank4(input, "conv2d input");
  require_rank4(kernel, "conv2d kernel");
  require(bias.rank() == 1, "conv2d bias must be rank 1, got " + shape_str(bias.shape()));
  require(stride >= 1, "conv2d stride must be >= 1");
  const int n = input.dim(0), ci = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int co = kernel.dim(0), kci = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kci != ci) {
    throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) +
                     " expects " + std::to_string(kci) + " input channels but input is " +
                     shape_str(input.shape()));
  }
  require(bias.dim(0) == co, "conv2d: bias length " + std::to_string(bias.dim(0)) +
                                 " != output channels " + std::to_string(co));
  const bool same = pad != Pad::kValid;
  if (same && (kh % 2 == 0 || kw % 2 == 0)) {
    throw ShapeError("conv2d: same padding requires odd kernel extents, got " +
                     shape_str(kernel.shape()));
  }
  const int pad_h = same ? (kh - 1) / 2 : 0;
  const int pad_w = same ? (kw - 1) / 2 : 0;
  const int oh = (h + 2 * pad_h - kh) / stride + 1;
  const int ow = (w + 2 * pad_w - kw) / stride + 1;
  require(oh >= 1 && ow >= 1, "conv2d: kernel " + shape_str(kernel.shape()) +
                                  " larger than padded input " + shape_str(input.shape()));
  const bool mirror = pad == Pad::kSameMirror;

  Tensor out = make_output({n, co, oh, ow}, tape, {&input, &kernel, &bias});
  const std::size_t rows = static_cast<std::size_t>(ci) * kh * kw;
  const std::size_t out_plane = static_cast<std::size_t>(oh) * ow;
  {
    // Sample-wise GEMMs write straight into the (N,Co,oH,oW) layout.
    MapRM kmat(kernel.values().data(), co, static_cast<Eigen::Index>(rows));
    auto y = out.values_mut();
    const auto xv = input.values();
    const auto b = bias.values();
    MatrixRM cols;
    for (int in = 0; in < n; ++in) {
      im2col_sample(xv.data() + static_cast<std::size_t>(in) * ci * h * w, ci, h, w, kh,
                    kw, stride, pad_h, pad_w, mirror, oh, ow, cols);
      MutMapRM dst(y.data() + static_cast<std::size_t>(in) * co * out_plane, co,
                   static_cast<Eigen::Index>(out_plane));
      dst.noalias() = kmat * cols;
      for (int c = 0; c < co; ++c) dst.row(c).array() += b[static_cast<std::size_t>(c)];
    }
  }
  check_finite(out.values(), "conv2d");

  if (out.tracked()) {
    Tensor in_t = input, k_t = kernel, b_t = bias, out_t = out;
    tape->record([in_t, k_t, b_t, out_t, stride, pad_h, pad_w, mirror, n, ci, h, w, co,
                  kh, kw, oh, ow, rows, out_plane]() mutable {
      const auto g = out_t.grad();
      MatrixRM gk_acc;
      if (k_t.tracked()) gk_acc = MatrixRM::Zero(co, static_cast<Eigen::Index>(rows));
      MatrixRM cols;
      MatrixRM gcols;
      for (int in = 0; in < n; ++in) {
        MapRM gout(g.data() + static_cast<std::size_t>(in) * co * out_plane, co,
                   static_cast<Eigen::Index>(out_plane));
        if (k_t.tracked()) {
          // Columns are recomputed rather than retained across the tape.
          im2col_sample(in_t.values().data() + static_cast<std::size_t>(in) * ci * h * w,
                        ci, h, w, kh, kw, stride, pad_h, pad_w, mirror, oh, ow, cols);
          gk_acc.noalias() += gout * cols.transpose();
        }
        if (in_t.tracked()) {
          MapRM kmat(k_t.values().data(), co, static_cast<Eigen::Index>(rows));
          gcols.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(out_plane));
          gcols.noalias() = kmat.transpose() * gout;
          col2im_sample_add(gcols,
                            in_t.grad_mut().data() + static_cast<std::size_t>(in) * ci * h * w,
                            ci, h, w, kh, kw, stride, pad_h, pad_w, mirror, oh, ow);
        }
      }
      if (k_t.tracked()) {
        auto gkr = k_t.grad_mut();
        for (Eigen::Index i = 0; i < gk_acc.size(); ++i) {
          gkr[static_cast<std::size_t>(i)] += gk_acc.data()[i];
        }
      }
      if (b_t.tracked()) {
        auto gb = b_t.grad_mut();
        for (int in = 0; in < n; ++in) {
          for (int c = 0; c < co; ++c) {
            const double* src = g.data() + (static_cast<std::size_t>(in) * co + c) * out_plane;
            double s = 0.0;
            for (std::size_t p = 0; p < out_plane; ++p) s += src[p];
            gb[static_cast<std::size_t>(c)] += s;
          }
        }
      }
    });
  }
  return out;
}

Tensor max_pool2d(const Tensor& input, int window, int stride, Tape* tape) {
  require_rank4(input, "max_pool2d");
  require(window >= 1 && stride >= 1, "max_pool2d window/stride must be >= 1");
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h < window || w < window || (h - window) % stride != 0 || (w - window) % stride != 0) {
    throw ShapeError("max_pool2d: extents " + shape_str(input.shape()) +
                     " not divisible by stride " + std::to_string(stride) +
                     " under window " + std::to_string(window));
  }
  const int oh = (h - window) / stride + 1;
  const int ow = (w - window) / stride + 1;
  Tensor out = make_output({n, c, oh, ow}, tape, {&input});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  const auto x = input.values();
  auto y = out.values_mut();
  std::size_t o = 0;
  for (int in = 0; in < n; ++in) {
    for (int ch = 0; ch < c; ++ch) {
      const double* plane = x.data() + (static_cast<std::size_t>(in) * c + ch) * h * w;
      const std::size_t base = (static_cast<std::size_t>(in) * c + ch) * h * w;
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox, ++o) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_at = 0;
          // First occurrence in row-major order wins ties.
          for (int ky = 0; ky < window; ++ky) {
            for (int kx = 0; kx < window; ++kx) {
              const std::size_t at =
                  static_cast<std::size_t>(oy * stride + ky) * w + (ox * stride + kx);
              if (plane[at] > best) {
                best = plane[at];
                best_at = at;
              }
            }
          }
          y[o] = best;
          (*argmax)[o] = base + best_at;
        }
      }
    }
  }
  check_finite(out.values(), "max_pool2d");
  if (out.tracked()) {
    Tensor in_t = input, out_t = out;
    tape->record([in_t, out_t, argmax]() mutable {
      if (!in_t.tracked()) return;
      auto gx = in_t.grad_mut();
      const auto g = out_t.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
    });
  }
  return out;
}

Tensor upsample(const Tensor& input, int factor, Resample mode, Tape* tape) {
  require_rank4(input, "upsample");
  if (factor < 1) throw ShapeError("upsample factor must be >= 1, got " + std::to_string(factor));
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int oh = h * factor, ow = w * factor;
  Tensor out = make_output({n, c, oh, ow}, tape, {&input});

  // Per-axis source taps; align-corners-false for bilinear.
  struct Tap {
    int i0, i1;
    double w0, w1;
  };
  auto make_taps = [&](int in_extent, int out_extent) {
    std::vector<Tap> taps(static_cast<std::size_t>(out_extent));
    for (int d = 0; d < out_extent; ++d) {
      if (mode == Resample::kNearest) {
        taps[static_cast<std::size_t>(d)] = {d / factor, d / factor, 1.0, 0.0};
      } else {
        double src = (d + 0.5) / factor - 0.5;
        double f = std::floor(src);
        int i0 = static_cast<int>(f);
        double a = src - f;
        int i1 = i0 + 1;
        i0 = std::clamp(i0, 0, in_extent - 1);
        i1 = std::clamp(i1, 0, in_extent - 1);
        taps[static_cast<std::size_t>(d)] = {i0, i1, 1.0 - a, a};
      }
    }
    return taps;
  };
  auto ty = make_taps(h, oh);
  auto tx = make_taps(w, ow);

  const auto x = input.values();
  auto y = out.values_mut();
  for (int in = 0; in < n; ++in) {
    for (int ch = 0; ch < c; ++ch) {
      const double* sp = x.data() + (static_cast<std::size_t>(in) * c + ch) * h * w;
      double* dp = y.data() + (static_cast<std::size_t>(in) * c + ch) * oh * ow;
      for (int oy = 0; oy < oh; ++oy) {
        const Tap& a = ty[static_cast<std::size_t>(oy)];
        for (int ox = 0; ox < ow; ++ox) {
          const Tap& b = tx[static_cast<std::size_t>(ox)];
          dp[static_cast<std::size_t>(oy) * ow + ox] =
              a.w0 * (b.w0 * sp[static_cast<std::size_t>(a.i0) * w + b.i0] +
                      b.w1 * sp[static_cast<std::size_t>(a.i0) * w + b.i1]) +
              a.w1 * (b.w0 * sp[static_cast<std::size_t>(a.i1) * w + b.i0] +
                      b.w1 * sp[static_cast<std::size_t>(a.i1) * w + b.i1]);
        }
      }
    }
  }
  check_finite(out.values(), "upsample");
  if (out.tracked()) {
    Tensor in_t = input, out_t = out;
    tape->record([in_t, out_t, ty, tx, n, c, h, w, oh, ow]() mutable {
      if (!in_t.tracked()) return;
      auto gx = in_t.grad_mut();
      const auto g = out_t.grad();
      for (int in = 0; in < n; ++in) {
        for (int ch = 0; ch < c; ++ch) {
          double* sp = gx.data() + (static_cast<std::size_t>(in) * c + ch) * h * w;
          const double* dp = g.data() + (static_cast<std::size_t>(in) * c + ch) * oh * ow;
          for (int oy = 0; oy < oh; ++oy) {
            const auto& a = ty[static_cast<std::size_t>(oy)];
            for (int ox = 0; ox < ow; ++ox) {
              const auto& b = tx[static_cast<std::size_t>(ox)];
              const double gv = dp[static_cast<std::size_t>(oy) * ow + ox];
              sp[static_cast<std::size_t>(a.i0) * w + b.i0] += a.w0 * b.w0 * gv;
              sp[static_cast<std::size_t>(a.i0) * w + b.i1] += a.w0 * b.w1 * gv;
              sp[static_cast<std::size_t>(a.i1) * w + b.i0] += a.w1 * b.w0 * gv;
              sp[static_cast<std::size_t>(a.i1) * w + b.i1] += a.w1 * b.w1 * gv;
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor activation(const Tensor& input, Activation kind, Tape* tape) {
  Tensor out = make_output(input.shape(), tape, {&input});
  const auto x = input.values();
  auto y = out.values_mut();
  switch (kind) {
    case Activation::kElu:
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] >= 0.0 ? x[i] : std::expm1(x[i]);
      break;
    case Activation::kRelu:
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
      break;
    case Activation::kSigmoid:
      for (std::size_t i = 0; i < x.size(); ++i) y[i] = 1.0 / (1.0 + std::exp(-x[i]));
      break;
  }
  check_finite(out.values(), "activation");
  if (out.tracked()) {
    Tensor in_t = input, out_t = out;
    tape->record([in_t, out_t, kind]() mutable {
      if (!in_t.tracked()) return;
      auto gx = in_t.grad_mut();
      const auto g = out_t.grad();
      const auto x = in_t.values();
      const auto y = out_t.values();
      switch (kind) {
        case Activation::kElu:
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (x[i] >= 0.0 ? 1.0 : y[i] + 1.0);
          break;
        case Activation::kRelu:
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += x[i] > 0.0 ? g[i] : 0.0;
          break;
        case Activation::kSigmoid:
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
          break;
      }
    });
  }
  return out;
}

Tensor softmax_channels(const Tensor& input, Tape* tape) {
  require_rank4(input, "softmax_channels");
  const int n = input.dim(0), m = input.dim(1), h = input.dim(2), w = input.dim(3);
  Tensor out = make_output(input.shape(), tape, {&input});
  const auto x = input.values();
  auto y = out.values_mut();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  // Plane-wise sweeps keep the memory access contiguous.
  std::vector<double> mx(plane), z(plane);
  for (int in = 0; in < n; ++in) {
    const std::size_t base = static_cast<std::size_t>(in) * m * plane;
    std::copy(x.begin() + static_cast<std::ptrdiff_t>(base),
              x.begin() + static_cast<std::ptrdiff_t>(base + plane), mx.begin());
    for (int c = 1; c < m; ++c) {
      const double* p = x.data() + base + static_cast<std::size_t>(c) * plane;
      for (std::size_t i = 0; i < plane; ++i) mx[i] = std::max(mx[i], p[i]);
    }
    std::fill(z.begin(), z.end(), 0.0);
    for (int c = 0; c < m; ++c) {
      const double* p = x.data() + base + static_cast<std::size_t>(c) * plane;
      double* q = y.data() + base + static_cast<std::size_t>(c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        q[i] = std::exp(p[i] - mx[i]);
        z[i] += q[i];
      }
    }
    for (int c = 0; c < m; ++c) {
      double* q = y.data() + base + static_cast<std::size_t>(c) * plane;
      for (std::size_t i = 0; i < plane; ++i) q[i] /= z[i];
    }
  }
  check_finite(out.values(), "softmax_channels");
  if (out.tracked()) {
    Tensor in_t = input, out_t = out;
    tape->record([in_t, out_t, n, m, plane]() mutable {
      if (!in_t.tracked()) return;
      auto gx = in_t.grad_mut();
      const auto g = out_t.grad();
      const auto y = out_t.values();
      std::vector<double> dot(plane);
      for (int in = 0; in < n; ++in) {
        const std::size_t base = static_cast<std::size_t>(in) * m * plane;
        std::fill(dot.begin(), dot.end(), 0.0);
        for (int c = 0; c < m; ++c) {
          const double* gp = g.data() + base + static_cast<std::size_t>(c) * plane;
          const double* yp = y.data() + base + static_cast<std::size_t>(c) * plane;
          for (std::size_t i = 0; i < plane; ++i) dot[i] += gp[i] * yp[i];
        }
        for (int c = 0; c < m; ++c) {
          const std::size_t off = base + static_cast<std::size_t>(c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            gx[off + i] += y[off + i] * (g[off + i] - dot[i]);
          }
        }
      }
    });
  }
  return out;
}

BatchNormState::BatchNormState(int channels) {
  if (channels > 0) {
    running_mean = Tensor::zeros({channels});
    running_var = Tensor::full({channels}, 1.0);
    initialized = Tensor::zeros({1});
  }
}

Tensor batch_norm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, Mode mode, Tape* tape) {
  require_rank4(input, "batch_norm");
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  require(gamma.rank() == 1 && gamma.dim(0) == c && beta.rank() == 1 && beta.dim(0) == c,
          "batch_norm: gamma/beta must have length " + std::to_string(c) +
              ", got " + shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  constexpr double kEps = 1e-5;
  constexpr double kMomentum = 0.9;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const double m_count = static_cast<double>(n) * static_cast<double>(plane);

  Tensor out = make_output(input.shape(), tape, {&input, &gamma, &beta});
  const auto x = input.values();
  auto y = out.values_mut();
  const auto gm = gamma.values();
  const auto bt = beta.values();

  std::vector<double> mean(static_cast<std::size_t>(c), 0.0);
  std::vector<double> var(static_cast<std::size_t>(c), 0.0);

  if (mode == Mode::kTrain) {
    for (int ch = 0; ch < c; ++ch) {
      double s = 0.0;
      for (int in = 0; in < n; ++in) {
        const double* p = x.data() + (static_cast<std::size_t>(in) * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      mean[static_cast<std::size_t>(ch)] = s / m_count;
      double v = 0.0;
      for (int in = 0; in < n; ++in) {
        const double* p = x.data() + (static_cast<std::size_t>(in) * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = p[i] - mean[static_cast<std::size_t>(ch)];
          v += d * d;
        }
      }
      var[static_cast<std::size_t>(ch)] = v / m_count;
    }
    auto rm = state.running_mean.values_mut();
    auto rv = state.running_var.values_mut();
    for (int ch = 0; ch < c; ++ch) {
      rm[static_cast<std::size_t>(ch)] =
          kMomentum * rm[static_cast<std::size_t>(ch)] + (1.0 - kMomentum) * mean[static_cast<std::size_t>(ch)];
      rv[static_cast<std::size_t>(ch)] =
          kMomentum * rv[static_cast<std::size_t>(ch)] + (1.0 - kMomentum) * var[static_cast<std::size_t>(ch)];
    }
    state.initialized.fill(1.0);
  } else {
    if (!state.is_initialized()) {
      throw Error("batch_norm: eval mode before any train-mode update (running stats uninitialized)");
    }
    const auto rm = state.running_mean.values();
    const auto rv = state.running_var.values();
    mean.assign(rm.begin(), rm.end());
    var.assign(rv.begin(), rv.end());
  }

  std::vector<double> invstd(static_cast<std::size_t>(c));
  for (int ch = 0; ch < c; ++ch) {
    invstd[static_cast<std::size_t>(ch)] = 1.0 / std::sqrt(var[static_cast<std::size_t>(ch)] + kEps);
  }
  for (int in = 0; in < n; ++in) {
    for (int ch = 0; ch < c; ++ch) {
      const double* p = x.data() + (static_cast<std::size_t>(in) * c + ch) * plane;
      double* q = y.data() + (static_cast<std::size_t>(in) * c + ch) * plane;
      const double mu = mean[static_cast<std::size_t>(ch)];
      const double is = invstd[static_cast<std::size_t>(ch)];
      const double g = gm[static_cast<std::size_t>(ch)];
      const double b = bt[static_cast<std::size_t>(ch)];
      for (std::size_t i = 0; i < plane; ++i) q[i] = (p[i] - mu) * is * g + b;
    }
  }
  check_finite(out.values(), "batch_norm");

  if (out.tracked()) {
    Tensor in_t = input, g_t = gamma, b_t = beta, out_t = out;
    const bool train = mode == Mode::kTrain;
    tape->record([in_t, g_t, b_t, out_t, mean, invstd, n, c, plane, m_count, train]() mutable {
      const auto gy = out_t.grad();
      const auto x = in_t.values();
      const auto gm = g_t.values();
      for (int ch = 0; ch < c; ++ch) {
        const double mu = mean[static_cast<std::size_t>(ch)];
        const double is = invstd[static_cast<std::size_t>(ch)];
        double sum_gy = 0.0, sum_gy_xhat = 0.0;
        for (int in = 0; in < n; ++in) {
          const std::size_t base = (static_cast<std::size_t>(in) * c + ch) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            sum_gy += gy[base + i];
            sum_gy_xhat += gy[base + i] * (x[base + i] - mu) * is;
          }
        }
        if (g_t.tracked()) g_t.grad_mut()[static_cast<std::size_t>(ch)] += sum_gy_xhat;
        if (b_t.tracked()) b_t.grad_mut()[static_cast<std::size_t>(ch)] += sum_gy;
        if (!in_t.tracked()) continue;
        auto gx = in_t.grad_mut();
        const double g = gm[static_cast<std::size_t>(ch)];
        if (train) {
          // d/dx of batch statistics included.
          for (int in = 0; in < n; ++in) {
            const std::size_t base = (static_cast<std::size_t>(in) * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              const double xhat = (x[base + i] - mu) * is;
              gx[base + i] += g * is / m_count *
                              (m_count * gy[base + i] - sum_gy - xhat * sum_gy_xhat);
            }
          }
        } else {
          for (int in = 0; in < n; ++in) {
            const std::size_t base = (static_cast<std::size_t>(in) * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) gx[base + i] += gy[base + i] * g * is;
          }
        }
      }
    });
  }
  return out;
}

Tensor global_avg_pool(const Tensor& input, Tape* tape) {
  require_rank4(input, "global_avg_pool");
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  Tensor out = make_output({n, c}, tape, {&input});
  const auto x = input.values();
  auto y = out.values_mut();
  for (int in = 0; in < n; ++in) {
    for (int ch = 0; ch < c; ++ch) {
      const double* p = x.data() + (static_cast<std::size_t>(in) * c + ch) * plane;
      double s = 0.0;
      for (std::size_t i = 0; i < plane; ++i) s += p[i];
      y[static_cast<std::size_t>(in) * c + ch] = s / static_cast<double>(plane);
    }
  }
  check_finite(out.values(), "global_avg_pool");
  if (out.tracked()) {
    Tensor in_t = input, out_t = out;
    tape->record([in_t, out_t, n, c, plane]() mutable {
      if (!in_t.tracked()) return;
      auto gx = in_t.grad_mut();
      const auto g = out_t.grad();
      for (int in = 0; in < n; ++in) {
        for (int ch = 0; ch < c; ++ch) {
          const double gv = g[static_cast<std::size_t>(in) * c + ch] / static_cast<double>(plane);
          double* p = gx.data() + (static_cast<std::size_t>(in) * c + ch) * plane;
          for (std::size_t i = 0; i < plane; ++i) p[i] += gv;
        }
      }
    });
  }
  return out;
}

Tensor fully_connected(const Tensor& input, const Tensor& weight, const Tensor& bias,
                       Tape* tape) {
  require(input.rank() == 2, "fully_connected input must be rank 2, got " +
                                 shape_str(input.shape()));
  require(weight.rank() == 2, "fully_connected weight must be rank 2, got " +
                                  shape_str(weight.shape()));
  const int n = input.dim(0), f = input.dim(1);
  const int o = weight.dim(0);
  if (weight.dim(1) != f) {
    throw ShapeError("fully_connected: weight " + shape_str(weight.shape()) +
                     " does not match input " + shape_str(input.shape()));
  }
  require(bias.rank() == 1 && bias.dim(0) == o,
          "fully_connected: bias " + shape_str(bias.shape()) + " must have length " +
              std::to_string(o));
  Tensor out = make_output({n, o}, tape, {&input, &weight, &bias});
  {
    MapRM in(input.values().data(), n, f);
    MapRM wm(weight.values().data(), o, f);
    MutMapRM y(out.values_mut().data(), n, o);
    y.noalias() = in * wm.transpose();
    const auto b = bias.values();
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < o; ++c) y(r, c) += b[static_cast<std::size_t>(c)];
    }
  }
  check_finite(out.values(), "fully_connected");
  if (out.tracked()) {
    Tensor in_t = input, w_t = weight, b_t = bias, out_t = out;
    tape->record([in_t, w_t, b_t, out_t, n, f, o]() mutable {
      MapRM g(out_t.grad().data(), n, o);
      if (in_t.tracked()) {
        MapRM wm(w_t.values().data(), o, f);
        MutMapRM gx(in_t.grad_mut().data(), n, f);
        gx.noalias() += g * wm;
      }
      if (w_t.tracked()) {
        MapRM in(in_t.values().data(), n, f);
        MutMapRM gw(w_t.grad_mut().data(), o, f);
        gw.noalias() += g.transpose() * in;
      }
      if (b_t.tracked()) {
        auto gb = b_t.grad_mut();
        for (int c = 0; c < o; ++c) {
          double s = 0.0;
          for (int r = 0; r < n; ++r) s += g(r, c);
          gb[static_cast<std::size_t>(c)] += s;
        }
      }
    });
  }
  return out;
}

Tensor concat_channels(const std::vector<Tensor>& inputs, Tape* tape) {
  require(!inputs.empty(), "concat_channels: no inputs");
  const int n = inputs[0].dim(0), h = inputs[0].dim(2), w = inputs[0].dim(3);
  int total_c = 0;
  bool track = false;
  for (const Tensor& t : inputs) {
    require(t.rank() == 4, "concat_channels expects rank-4 tensors");
    if (t.dim(0) != n || t.dim(2) != h || t.dim(3) != w) {
      throw ShapeError("concat_channels: extent mismatch between " +
                       shape_str(inputs[0].shape()) + " and " + shape_str(t.shape()));
    }
    total_c += t.dim(1);
    track = track || t.tracked();
  }
  Tensor out = Tensor::zeros({n, total_c, h, w}, tape != nullptr && track);
  if (out.tracked()) tape->note(out);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  auto y = out.values_mut();
  for (int in = 0; in < n; ++in) {
    std::size_t coff = 0;
    for (const Tensor& t : inputs) {
      const int tc = t.dim(1);
      const double* src = t.values().data() + static_cast<std::size_t>(in) * tc * plane;
      double* dst = y.data() + (static_cast<std::size_t>(in) * total_c + coff) * plane;
      std::memcpy(dst, src, static_cast<std::size_t>(tc) * plane * sizeof(double));
      coff += static_cast<std::size_t>(tc);
    }
  }
  if (out.tracked()) {
    std::vector<Tensor> ins = inputs;
    Tensor out_t = out;
    tape->record([ins, out_t, n, total_c, plane]() mutable {
      const auto g = out_t.grad();
      for (int in = 0; in < n; ++in) {
        std::size_t coff = 0;
        for (Tensor& t : ins) {
          const int tc = t.dim(1);
          if (t.tracked()) {
            double* dst = t.grad_mut().data() + static_cast<std::size_t>(in) * tc * plane;
            const double* src =
                g.data() + (static_cast<std::size_t>(in) * total_c + coff) * plane;
            for (std::size_t i = 0; i < static_cast<std::size_t>(tc) * plane; ++i) dst[i] += src[i];
          }
          coff += static_cast<std::size_t>(tc);
        }
      }
    });
  }
  return out;
}

Tensor scale_by_scalar(const Tensor& input, const Tensor& s, Tape* tape) {
  require(s.size() == 1, "scale_by_scalar: s must be a single element, got " +
                             shape_str(s.shape()));
  Tensor out = make_output(input.shape(), tape, {&input, &s});
  const double sv = s.values()[0];
  const auto x = input.values();
  auto y = out.values_mut();
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * sv;
  check_finite(out.values(), "scale_by_scalar");
  if (out.tracked()) {
    Tensor in_t = input, s_t = s, out_t = out;
    tape->record([in_t, s_t, out_t]() mutable {
      const auto g = out_t.grad();
      if (in_t.tracked()) {
        auto gx = in_t.grad_mut();
        const double sv = s_t.values()[0];
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * sv;
      }
      if (s_t.tracked()) {
        const auto x = in_t.values();
        double acc = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * x[i];
        s_t.grad_mut()[0] += acc;
      }
    });
  }
  return out;
}

Tensor scale_rows(const Tensor& input, const Tensor& s, Tape* tape) {
  require_rank4(input, "scale_rows");
  const int n = input.dim(0);
  require(s.rank() == 1 && s.dim(0) == n,
          "scale_rows: s " + shape_str(s.shape()) + " must have length " + std::to_string(n));
  Tensor out = make_output(input.shape(), tape, {&input, &s});
  const std::size_t per = input.size() / static_cast<std::size_t>(n);
  const auto x = input.values();
  const auto sv = s.values();
  auto y = out.values_mut();
  for (int in = 0; in < n; ++in) {
    const double f = sv[static_cast<std::size_t>(in)];
    for (std::size_t i = 0; i < per; ++i) {
      y[static_cast<std::size_t>(in) * per + i] = x[static_cast<std::size_t>(in) * per + i] * f;
    }
  }
  check_finite(out.values(), "scale_rows");
  if (out.tracked()) {
    Tensor in_t = input, s_t = s, out_t = out;
    tape->record([in_t, s_t, out_t, n, per]() mutable {
      const auto g = out_t.grad();
      if (in_t.tracked()) {
        auto gx = in_t.grad_mut();
        const auto sv = s_t.values();
        for (int in = 0; in < n; ++in) {
          const double f = sv[static_cast<std::size_t>(in)];
          for (std::size_t i = 0; i < per; ++i) {
            gx[static_cast<std::size_t>(in) * per + i] += g[static_cast<std::size_t>(in) * per + i] * f;
          }
        }
      }
      if (s_t.tracked()) {
        auto gs = s_t.grad_mut();
        const auto x = in_t.values();
        for (int in = 0; in < n; ++in) {
          double acc = 0.0;
          for (std::size_t i = 0; i < per; ++i) {
            acc += g[static_cast<std::size_t>(in) * per + i] * x[static_cast<std::size_t>(in) * per + i];
          }
          gs[static_cast<std::size_t>(in)] += acc;
        }
      }
    });
  }
  return out;
}

Tensor crop_center(const Tensor& input, int crop_h, int crop_w, Tape* tape) {
  require_rank4(input, "crop_center");
  const int n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (crop_h > h || crop_w > w || (h - crop_h) % 2 != 0 || (w - crop_w) % 2 != 0) {
    throw ShapeError("crop_center: cannot center a " + std::to_string(crop_h) + "x" +
                     std::to_string(crop_w) + " crop in " + shape_str(input.shape()));
  }
  const int y0 = (h - crop_h) / 2, x0 = (w - crop_w) / 2;
  Tensor out = make_output({n, c, crop_h, crop_w}, tape, {&input});
  const auto x = input.values();
  auto y = out.values_mut();
  for (int in = 0; in < n; ++in) {
    for (int ch = 0; ch < c; ++ch) {
      const double* sp = x.data() + (static_cast<std::size_t>(in) * c + ch) * h * w;
      double* dp = y.data() + (static_cast<std::size_t>(in) * c + ch) * crop_h * crop_w;
      for (int r = 0; r < crop_h; ++r) {
        std::memcpy(dp + static_cast<std::size_t>(r) * crop_w,
                    sp + static_cast<std::size_t>(y0 + r) * w + x0,
                    static_cast<std::size_t>(crop_w) * sizeof(double));
      }
    }
  }
  if (out.tracked()) {
    Tensor in_t = input, out_t = out;
    tape->record([in_t, out_t, n, c, h, w, crop_h, crop_w, y0, x0]() mutable {
      if (!in_t.tracked()) return;
      auto gx = in_t.grad_mut();
      const auto g = out_t.grad();
      for (int in = 0; in < n; ++in) {
        for (int ch = 0; ch < c; ++ch) {
          double* sp = gx.data() + (static_cast<std::size_t>(in) * c + ch) * h * w;
          const double* dp = g.data() + (static_cast<std::size_t>(in) * c + ch) * crop_h * crop_w;
          for (int r = 0; r < crop_h; ++r) {
            for (int cc = 0; cc < crop_w; ++cc) {
              sp[static_cast<std::size_t>(y0 + r) * w + (x0 + cc)] +=
                  dp[static_cast<std::size_t>(r) * crop_w + cc];
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor out = make_output(a.shape(), tape, {&a, &b});
  const auto av = a.values();
  const auto bv = b.values();
  auto y = out.values_mut();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  check_finite(out.values(), "add");
  if (out.tracked()) {
    Tensor a_t = a, b_t = b, out_t = out;
    tape->record([a_t, b_t, out_t]() mutable {
      const auto g = out_t.grad();
      if (a_t.tracked()) {
        auto ga = a_t.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b_t.tracked()) {
        auto gb = b_t.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b, Tape* tape) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  Tensor out = make_output(a.shape(), tape, {&a, &b});
  const auto av = a.values();
  const auto bv = b.values();
  auto y = out.values_mut();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  check_finite(out.values(), "mul");
  if (out.tracked()) {
    Tensor a_t = a, b_t = b, out_t = out;
    tape->record([a_t, b_t, out_t]() mutable {
      const auto g = out_t.grad();
      if (a_t.tracked()) {
        auto ga = a_t.grad_mut();
        const auto bv = b_t.values();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
      }
      if (b_t.tracked()) {
        auto gb = b_t.grad_mut();
        const auto av = a_t.values();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
      }
    });
  }
  return out;
}

Tensor sum(const Tensor& input, Tape* tape) {
  Tensor out = make_output({1}, tape, {&input});
  double s = 0.0;
  for (double v : input.values()) s += v;
  out.values_mut()[0] = s;
  check_finite(out.values(), "sum");
  if (out.tracked()) {
    Tensor in_t = input, out_t = out;
    tape->record([in_t, out_t]() mutable {
      if (!in_t.tracked()) return;
      const double g = out_t.grad()[0];
      auto gx = in_t.grad_mut();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

// --- parameters -------------------------------------------------------------

Parameter& ParameterStore::add(const std::string& name, Tensor t) {
  if (params_.count(name)) throw Error("duplicate parameter name: " + name);
  if (!t.tracked()) throw Error("parameter " + name + " must be gradient-tracked");
  auto [it, ok] = params_.emplace(name, Parameter(name, std::move(t)));
  (void)ok;
  return it->second;
}

Parameter& ParameterStore::get(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw Error("unknown parameter: " + name);
  return it->second;
}

const Parameter& ParameterStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw Error("unknown parameter: " + name);
  return it->second;
}

Tensor& ParameterStore::add_buffer(const std::string& name, Tensor t) {
  if (buffers_.count(name)) throw Error("duplicate buffer name: " + name);
  auto [it, ok] = buffers_.emplace(name, std::move(t));
  (void)ok;
  return it->second;
}

Tensor& ParameterStore::buffer(const std::string& name) {
  auto it = buffers_.find(name);
  if (it == buffers_.end()) throw Error("unknown buffer: " + name);
  return it->second;
}

const Tensor& ParameterStore::buffer(const std::string& name) const {
  auto it = buffers_.find(name);
  if (it == buffers_.end()) throw Error("unknown buffer: " + name);
  return it->second;
}

void ParameterStore::zero_grads() {
  for (auto& [name, p] : params_) p.tensor.zero_grad();
}

std::uint64_t ParameterStore::state_hash(bool include_buffers) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, p] : params_) {
    h = fnv1a(name.data(), name.size(), h);
    h = fnv1a(p.tensor.values().data(), p.tensor.size() * sizeof(double), h);
  }
  if (include_buffers) {
    for (const auto& [name, b] : buffers_) {
      h = fnv1a(name.data(), name.size(), h);
      h = fnv1a(b.values().data(), b.size() * sizeof(double), h);
    }
  }
  return h;
}

void nadam_step(std::vector<Parameter*>& params, const NadamConfig& cfg) {
  for (Parameter* p : params) {
    auto theta = p->tensor.values_mut();
    auto g = p->tensor.grad_mut();
    const std::int64_t t = p->step + 1;
    const double bias1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bias2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      if (!std::isfinite(g[i])) {
        throw DivergenceError("non-finite gradient in parameter " + p->name);
      }
      double& m = p->moment1[i];
      double& v = p->moment2[i];
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * g[i];
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = m / bias1;
      const double v_hat = v / bias2;
      // Nesterov lookahead applied to the bias-corrected first moment.
      const double dir = cfg.beta1 * m_hat + (1.0 - cfg.beta1) * g[i] / bias1;
      theta[i] -= cfg.lr * dir / (std::sqrt(v_hat) + cfg.eps);
      g[i] = 0.0;
    }
    p->step = t;
  }
}

void nadam_step(ParameterStore& store, const NadamConfig& cfg) {
  std::vector<Parameter*> ps;
  ps.reserve(store.params().size());
  for (auto& [name, p] : store.params()) ps.push_back(&p);
  nadam_step(ps, cfg);
}

}  // namespace awmf
