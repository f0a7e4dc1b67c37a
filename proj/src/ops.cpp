#include "distnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "distnet/error.hpp"

namespace distnet {

using detail::make_result;
using detail::Node;

Tensor init_params(const Shape& shape, std::size_t fan_in, Rng& rng) {
  if (fan_in < 1) fail(ErrorKind::Config, "init_params: fan_in must be >= 1");
  Tensor t = Tensor::zeros(shape, true);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (float& v : t.data()) v = static_cast<float>(rng.uniform(-bound, bound));
  return t;
}

namespace ops {

namespace {

void require(bool ok, const char* op, const std::string& detail) {
  if (!ok) fail(ErrorKind::Shape, std::string(op) + ": " + detail);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), op,
          "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

Node& parent(Node& self, std::size_t i) { return *self.parents[i]; }

template <typename F>
Tensor unary(const Tensor& a, F&& fwd) {
  Tensor out = make_result(a.shape(), {&a});
  auto in = a.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = fwd(in[i]);
  return out;
}

}  // namespace

// Elementwise and structural --------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = make_result(a.shape(), {&a, &b});
  auto x = a.data(), y = b.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  if (out.requires_grad()) {
    out.node()->backward_fn = [](Node& self) {
      for (std::size_t p = 0; p < 2; ++p) {
        Node& in = parent(self, p);
        if (!in.requires_grad) continue;
        auto g = in.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    };
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0f)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = make_result(a.shape(), {&a, &b});
  auto x = a.data(), y = b.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  if (out.requires_grad()) {
    out.node()->backward_fn = [](Node& self) {
      Node& a = parent(self, 0);
      Node& b = parent(self, 1);
      if (a.requires_grad) {
        auto g = a.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b.data[i];
      }
      if (b.requires_grad) {
        auto g = b.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a.data[i];
      }
    };
  }
  return out;
}

Tensor scale(const Tensor& a, float factor) {
  Tensor out = unary(a, [factor](float v) { return v * factor; });
  if (out.requires_grad()) {
    out.node()->backward_fn = [factor](Node& self) {
      auto g = parent(self, 0).ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
    };
  }
  return out;
}

Tensor sum(const Tensor& a) {
  Tensor out = make_result({1}, {&a});
  double acc = 0.0;
  for (float v : a.data()) acc += v;
  out.data()[0] = static_cast<float>(acc);
  if (out.requires_grad()) {
    out.node()->backward_fn = [](Node& self) {
      auto g = parent(self, 0).ensure_grad();
      for (float& v : g) v += self.grad[0];
    };
  }
  return out;
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0f / static_cast<float>(a.numel())); }

Tensor reshape(const Tensor& a, Shape shape) {
  require(shape_numel(shape) == a.numel(), "reshape",
          shape_str(a.shape()) + " cannot become " + shape_str(shape));
  Tensor out = make_result(std::move(shape), {&a});
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  if (out.requires_grad()) {
    out.node()->backward_fn = [](Node& self) {
      auto g = parent(self, 0).ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    };
  }
  return out;
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& perm) {
  const Shape& in_shape = a.shape();
  const std::size_t rank = in_shape.size();
  require(perm.size() == rank, "permute", "permutation rank mismatch");
  std::vector<bool> used(rank, false);
  for (auto p : perm) {
    require(p < rank && !used[p], "permute", "invalid permutation");
    used[p] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = in_shape[perm[i]];

  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * in_shape[i];
  // gather[j] = flat input offset of flat output element j
  auto gather = std::make_shared<std::vector<std::size_t>>(a.numel());
  std::vector<std::size_t> idx(rank, 0);
  for (std::size_t j = 0; j < gather->size(); ++j) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < rank; ++i) off += idx[i] * in_strides[perm[i]];
    (*gather)[j] = off;
    for (std::size_t i = rank; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }

  Tensor out = make_result(out_shape, {&a});
  auto in = a.data();
  auto o = out.data();
  for (std::size_t j = 0; j < o.size(); ++j) o[j] = in[(*gather)[j]];
  if (out.requires_grad()) {
    out.node()->backward_fn = [gather](Node& self) {
      auto g = parent(self, 0).ensure_grad();
      for (std::size_t j = 0; j < self.grad.size(); ++j) g[(*gather)[j]] += self.grad[j];
    };
  }
  return out;
}

namespace {

// Splits a shape around `axis` into (outer, axis_len, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  require(!parts.empty(), "concat", "no inputs");
  const Shape& first = parts.front().shape();
  require(axis < first.size(), "concat", "axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    require(s.size() == first.size(), "concat", "rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis) {
        require(s[i] == first[i], "concat",
                "shape mismatch " + shape_str(s) + " vs " + shape_str(first));
      }
    }
    out_shape[axis] += s[axis];
  }

  Tensor out = make_result(out_shape, parts);
  const AxisSplit o = split_at(out_shape, axis);
  auto dst = out.data();
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t len = p.shape()[axis];
    auto src = p.data();
    for (std::size_t a = 0; a < o.outer; ++a) {
      std::copy_n(src.begin() + a * len * o.inner, len * o.inner,
                  dst.begin() + (a * o.len + offset) * o.inner);
    }
    offset += len;
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [o, offsets, axis](Node& self) {
      for (std::size_t p = 0; p < self.parents.size(); ++p) {
        Node& in = parent(self, p);
        if (!in.requires_grad) continue;
        const std::size_t len = in.shape[axis];
        auto g = in.ensure_grad();
        for (std::size_t a = 0; a < o.outer; ++a) {
          const float* src = self.grad.data() + (a * o.len + offsets[p]) * o.inner;
          float* d = g.data() + a * len * o.inner;
          for (std::size_t i = 0; i < len * o.inner; ++i) d[i] += src[i];
        }
      }
    };
  }
  return out;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& s = a.shape();
  require(axis < s.size(), "slice", "axis out of range");
  require(length > 0 && start + length <= s[axis], "slice",
          "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
              ") exceeds " + shape_str(s));
  Shape out_shape = s;
  out_shape[axis] = length;
  Tensor out = make_result(out_shape, {&a});
  const AxisSplit in = split_at(s, axis);
  auto src = a.data();
  auto dst = out.data();
  for (std::size_t o = 0; o < in.outer; ++o) {
    std::copy_n(src.begin() + (o * in.len + start) * in.inner, length * in.inner,
                dst.begin() + o * length * in.inner);
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [in, start, length](Node& self) {
      auto g = parent(self, 0).ensure_grad();
      for (std::size_t o = 0; o < in.outer; ++o) {
        float* d = g.data() + (o * in.len + start) * in.inner;
        const float* src = self.grad.data() + o * length * in.inner;
        for (std::size_t i = 0; i < length * in.inner; ++i) d[i] += src[i];
      }
    };
  }
  return out;
}

Tensor straight_through(const Tensor& hard, const Tensor& soft) {
  require_same_shape(hard, soft, "straight_through");
  Tensor out = make_result(hard.shape(), {&hard, &soft});
  std::copy(hard.data().begin(), hard.data().end(), out.data().begin());
  if (out.requires_grad()) {
    out.node()->backward_fn = [](Node& self) {
      Node& soft = parent(self, 1);
      if (!soft.requires_grad) return;
      auto g = soft.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    };
  }
  return out;
}

// Convolution -------------------------------------------------------------------

std::size_t conv_out_len(std::size_t n, std::size_t k, std::size_t stride, Padding padding) {
  if (stride == 0) fail(ErrorKind::Config, "conv stride must be >= 1");
  if (padding == Padding::Same) return (n + stride - 1) / stride;
  if (k > n) return 0;
  return (n - k) / stride + 1;
}

std::size_t same_pad_before(std::size_t n, std::size_t k, std::size_t stride) {
  const std::size_t out = (n + stride - 1) / stride;
  const std::size_t needed = (out - 1) * stride + k;
  const std::size_t total = needed > n ? needed - n : 0;
  return total / 2;
}

namespace {

struct ConvGeom {
  std::size_t B, Cin, H, W, Cout, Kh, Kw, sh, sw, ph, pw, Ho, Wo;
};

// Output index range [lo, hi) for which in = out * stride + k - pad lies in [0, n).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t n, std::size_t out_len,
                                                       std::size_t k, std::size_t stride,
                                                       std::size_t pad) {
  const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(pad);
  const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(stride);
  std::ptrdiff_t lo = 0;
  if (shift < 0) lo = (-shift + s - 1) / s;
  const std::ptrdiff_t last_in = static_cast<std::ptrdiff_t>(n) - 1 - shift;
  if (last_in < 0) return {0, 0};
  std::ptrdiff_t hi = last_in / s + 1;
  hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(out_len));
  if (hi <= lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

// out[t] += sum_k w[k] * xp[t + k] for t < n; xp holds n + K - 1 values.
inline void correlate_accumulate(const float* xp, const float* w, std::size_t K, float* out,
                                 std::size_t n) {
  constexpr std::size_t kBlock = 16;
  std::size_t t0 = 0;
  for (; t0 + kBlock <= n; t0 += kBlock) {
    float acc[kBlock];
    for (std::size_t j = 0; j < kBlock; ++j) acc[j] = out[t0 + j];
    for (std::size_t k = 0; k < K; ++k) {
      const float wv = w[k];
      const float* x = xp + t0 + k;
#pragma omp simd
      for (std::size_t j = 0; j < kBlock; ++j) acc[j] += wv * x[j];
    }
    for (std::size_t j = 0; j < kBlock; ++j) out[t0 + j] = acc[j];
  }
  for (; t0 < n; ++t0) {
    float acc = out[t0];
    for (std::size_t k = 0; k < K; ++k) acc += w[k] * xp[t0 + k];
    out[t0] = acc;
  }
}

// dw[k] += sum_t xp[t + k] * dout[t] for k < K.
inline void correlate_weight_grad(const float* xp, const float* dout, std::size_t n, float* dw,
                                  std::size_t K) {
  constexpr std::size_t kBlock = 8;
  std::size_t k0 = 0;
  for (; k0 + kBlock <= K; k0 += kBlock) {
    float acc[kBlock] = {};
    for (std::size_t t = 0; t < n; ++t) {
      const float d = dout[t];
      const float* x = xp + t + k0;
#pragma omp simd
      for (std::size_t j = 0; j < kBlock; ++j) acc[j] += d * x[j];
    }
    for (std::size_t j = 0; j < kBlock; ++j) dw[k0 + j] += acc[j];
  }
  for (; k0 < K; ++k0) {
    float acc = 0.0f;
#pragma omp simd reduction(+ : acc)
    for (std::size_t t = 0; t < n; ++t) acc += xp[t + k0] * dout[t];
    dw[k0] += acc;
  }
}

// The three conv kernels share one index map:
//   out[b, co, oh, ow] <- in[b, ci, oh*sh + kh - ph, ow*sw + kw - pw] * w[co, ci, kh, kw]
// mode 0: out += in * w, mode 1: din += dout * w, mode 2: dw += in * dout.
// The fast path covers kernels of width 1 with unit width stride, where every
// (b, co, ci, kh) tap is a contiguous run when sh == 1.
// Height-only correlation of single-column planes at unit stride. Each input
// row is zero-padded once so the inner loops carry no bounds checks.
template <int kMode>
void conv_kernel_1d(const ConvGeom& g, const float* in, const float* w, float* out) {
  const std::size_t K = g.Kh, H = g.H, Ho = g.Ho;
  const std::size_t span = Ho + K - 1;
  std::vector<float> padded(span + K, 0.0f);
  std::vector<float> flipped(K);
  for (std::size_t b = 0; b < g.B; ++b) {
    for (std::size_t ci = 0; ci < g.Cin; ++ci) {
      float* plane_in = const_cast<float*>(in) + (b * g.Cin + ci) * H;
      if constexpr (kMode == 1) {
        std::fill(padded.begin(), padded.end(), 0.0f);
        std::vector<float> dpad(Ho + 2 * (K - 1), 0.0f);
        for (std::size_t co = 0; co < g.Cout; ++co) {
          const float* dout = out + (b * g.Cout + co) * Ho;
          const float* wk = w + (co * g.Cin + ci) * K;
          std::copy_n(dout, Ho, dpad.begin() + (K - 1));
          for (std::size_t k = 0; k < K; ++k) flipped[k] = wk[K - 1 - k];
          correlate_accumulate(dpad.data(), flipped.data(), K, padded.data(), span);
        }
        for (std::size_t h = 0; h < H; ++h) plane_in[h] += padded[h + g.ph];
        continue;
      }
      std::fill(padded.begin(), padded.end(), 0.0f);
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t j = h + g.ph;
        if (j < span) padded[j] = plane_in[h];
      }
      for (std::size_t co = 0; co < g.Cout; ++co) {
        float* plane_out = out + (b * g.Cout + co) * Ho;
        const std::size_t widx = (co * g.Cin + ci) * K;
        if constexpr (kMode == 0) {
          correlate_accumulate(padded.data(), w + widx, K, plane_out, Ho);
        } else {
          correlate_weight_grad(padded.data(), plane_out, Ho, const_cast<float*>(w) + widx, K);
        }
      }
    }
  }
}

template <int kMode>
void conv_kernel(const ConvGeom& g, const float* in, const float* w, float* out) {
  if (g.W == 1 && g.Wo == 1 && g.Kw == 1 && g.sh == 1) {
    conv_kernel_1d<kMode>(g, in, w, out);
    return;
  }
  const bool rowwise = g.Kw == 1 && g.sw == 1 && g.pw == 0 && g.Wo == g.W;
  for (std::size_t b = 0; b < g.B; ++b) {
    for (std::size_t co = 0; co < g.Cout; ++co) {
      for (std::size_t ci = 0; ci < g.Cin; ++ci) {
        float* plane_out = out + ((b * g.Cout + co) * g.Ho) * g.Wo;
        const float* plane_in = in + ((b * g.Cin + ci) * g.H) * g.W;
        for (std::size_t kh = 0; kh < g.Kh; ++kh) {
          const auto [oh_lo, oh_hi] = valid_range(g.H, g.Ho, kh, g.sh, g.ph);
          if (oh_lo >= oh_hi) continue;
          if (rowwise) {
            const std::size_t widx = (co * g.Cin + ci) * g.Kh + kh;
            if (g.sh == 1) {
              const std::size_t n = (oh_hi - oh_lo) * g.W;
              float* o = plane_out + oh_lo * g.W;
              const float* x = plane_in + (oh_lo + kh - g.ph) * g.W;
              if constexpr (kMode == 0) {
                const float wv = w[widx];
#pragma omp simd
                for (std::size_t i = 0; i < n; ++i) o[i] += wv * x[i];
              } else if constexpr (kMode == 1) {
                // here `out` is dout (read) and `in` is din (written)
                const float wv = w[widx];
                float* dx = const_cast<float*>(x);
#pragma omp simd
                for (std::size_t i = 0; i < n; ++i) dx[i] += wv * o[i];
              } else {
                float acc = 0.0f;
#pragma omp simd reduction(+ : acc)
                for (std::size_t i = 0; i < n; ++i) acc += x[i] * o[i];
                const_cast<float*>(w)[widx] += acc;
              }
            } else {
              const float wv = w[widx];
              float acc = 0.0f;
              for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                float* o = plane_out + oh * g.W;
                const float* x = plane_in + (oh * g.sh + kh - g.ph) * g.W;
                for (std::size_t i = 0; i < g.W; ++i) {
                  if constexpr (kMode == 0) {
                    o[i] += wv * x[i];
                  } else if constexpr (kMode == 1) {
                    const_cast<float*>(x)[i] += wv * o[i];
                  } else {
                    acc += x[i] * o[i];
                  }
                }
              }
              if constexpr (kMode == 2) const_cast<float*>(w)[widx] += acc;
            }
            continue;
          }
          for (std::size_t kw = 0; kw < g.Kw; ++kw) {
            const auto [ow_lo, ow_hi] = valid_range(g.W, g.Wo, kw, g.sw, g.pw);
            if (ow_lo >= ow_hi) continue;
            const std::size_t widx = ((co * g.Cin + ci) * g.Kh + kh) * g.Kw + kw;
            const float wv = w[widx];
            float acc = 0.0f;
            for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
              float* o = plane_out + oh * g.Wo;
              const float* x = plane_in + (oh * g.sh + kh - g.ph) * g.W + kw - g.pw;
              for (std::size_t ow = ow_lo; ow < ow_hi; ++ow) {
                if constexpr (kMode == 0) {
                  o[ow] += wv * x[ow * g.sw];
                } else if constexpr (kMode == 1) {
                  const_cast<float*>(x)[ow * g.sw] += wv * o[ow];
                } else {
                  acc += x[ow * g.sw] * o[ow];
                }
              }
            }
            if constexpr (kMode == 2) const_cast<float*>(w)[widx] += acc;
          }
        }
      }
    }
  }
}

ConvGeom make_geom(const Shape& in, const Shape& kernel, Stride2 stride, std::size_t ph,
                   std::size_t pw, std::size_t ho, std::size_t wo) {
  return ConvGeom{in[0],     in[1],     in[2], in[3], kernel[0], kernel[2], kernel[3],
                  stride.h,  stride.w,  ph,    pw,    ho,        wo};
}

void check_conv_operands(const Tensor& input, const Tensor& kernel, Stride2 stride,
                         const char* op) {
  require(input.rank() == 4, op, "input must be [B,C,H,W], got " + shape_str(input.shape()));
  require(kernel.rank() == 4, op,
          "kernel must be [Cout,Cin,Kh,Kw], got " + shape_str(kernel.shape()));
  require(stride.h >= 1 && stride.w >= 1, op, "strides must be >= 1");
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, Stride2 stride, Padding padding) {
  check_conv_operands(input, kernel, stride, "conv2d");
  const Shape& is = input.shape();
  const Shape& ks = kernel.shape();
  require(ks[1] == is[1], "conv2d",
          "kernel expects " + std::to_string(ks[1]) + " input channels, input has " +
              std::to_string(is[1]));
  const std::size_t H = is[2], W = is[3], Kh = ks[2], Kw = ks[3];
  std::size_t ph = 0, pw = 0;
  if (padding == Padding::Valid) {
    require(Kh <= H && Kw <= W, "conv2d",
            "kernel " + shape_str(ks) + " larger than input " + shape_str(is));
  } else {
    ph = same_pad_before(H, Kh, stride.h);
    pw = same_pad_before(W, Kw, stride.w);
  }
  const std::size_t Ho = conv_out_len(H, Kh, stride.h, padding);
  const std::size_t Wo = conv_out_len(W, Kw, stride.w, padding);
  const ConvGeom g = make_geom(is, ks, stride, ph, pw, Ho, Wo);

  Tensor out = make_result({is[0], ks[0], Ho, Wo}, {&input, &kernel});
  conv_kernel<0>(g, input.data().data(), kernel.data().data(), out.data().data());
  if (out.requires_grad()) {
    out.node()->backward_fn = [g](Node& self) {
      Node& x = parent(self, 0);
      Node& k = parent(self, 1);
      if (x.requires_grad) conv_kernel<1>(g, x.ensure_grad().data(), k.data.data(), self.grad.data());
      if (k.requires_grad) conv_kernel<2>(g, x.data.data(), k.ensure_grad().data(), self.grad.data());
    };
  }
  return out;
}

Tensor conv2d_transposed(const Tensor& input, const Tensor& kernel, Stride2 stride,
                         std::size_t output_len) {
  check_conv_operands(input, kernel, stride, "conv2d_transposed");
  const Shape& is = input.shape();
  const Shape& ks = kernel.shape();
  // kernel is laid out as for the forward conv it mirrors: [Cfwd_out, Cfwd_in, Kh, Kw]
  require(ks[0] == is[1], "conv2d_transposed",
          "kernel expects " + std::to_string(ks[0]) + " input channels, input has " +
              std::to_string(is[1]));
  require(output_len >= 1 && (output_len + stride.h - 1) / stride.h == is[2],
          "conv2d_transposed",
          "output length " + std::to_string(output_len) + " inconsistent with input length " +
              std::to_string(is[2]) + " at stride " + std::to_string(stride.h));
  require(stride.w == 1 && ks[3] == 1, "conv2d_transposed",
          "only height-axis strides with kernel width 1 are supported");
  const std::size_t ph = same_pad_before(output_len, ks[2], stride.h);
  const Shape fwd_in{is[0], ks[1], output_len, is[3]};
  const ConvGeom g = make_geom(fwd_in, ks, stride, ph, 0, is[2], is[3]);

  Tensor out = make_result(fwd_in, {&input, &kernel});
  conv_kernel<1>(g, out.data().data(), kernel.data().data(), const_cast<float*>(input.data().data()));
  if (out.requires_grad()) {
    out.node()->backward_fn = [g](Node& self) {
      Node& y = parent(self, 0);
      Node& k = parent(self, 1);
      // adjoint of the adjoint is the forward conv
      if (y.requires_grad) conv_kernel<0>(g, self.grad.data(), k.data.data(), y.ensure_grad().data());
      if (k.requires_grad) conv_kernel<2>(g, self.grad.data(), k.ensure_grad().data(), y.data.data());
    };
  }
  return out;
}

Tensor add_channel_bias(const Tensor& input, const Tensor& bias) {
  require(input.rank() == 4, "add_channel_bias", "input must be [B,C,H,W]");
  const Shape& s = input.shape();
  require(bias.numel() == s[1], "add_channel_bias", "bias length must equal channel count");
  Tensor out = make_result(s, {&input, &bias});
  const std::size_t plane = s[2] * s[3];
  auto x = input.data();
  auto bv = bias.data();
  auto o = out.data();
  for (std::size_t b = 0; b < s[0]; ++b)
    for (std::size_t c = 0; c < s[1]; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        const std::size_t idx = (b * s[1] + c) * plane + i;
        o[idx] = x[idx] + bv[c];
      }
  if (out.requires_grad()) {
    out.node()->backward_fn = [s, plane](Node& self) {
      Node& x = parent(self, 0);
      Node& bias = parent(self, 1);
      if (x.requires_grad) {
        auto g = x.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
      if (bias.requires_grad) {
        auto g = bias.ensure_grad();
        for (std::size_t b = 0; b < s[0]; ++b)
          for (std::size_t c = 0; c < s[1]; ++c) {
            double acc = 0.0;
            const float* src = self.grad.data() + (b * s[1] + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) acc += src[i];
            g[c] += static_cast<float>(acc);
          }
      }
    };
  }
  return out;
}

// Normalization, pooling, regularization -----------------------------------------

Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta, Mode mode,
                 BatchNormStats& stats) {
  require(input.rank() == 4, "batchnorm", "input must be [B,C,H,W], got " + shape_str(input.shape()));
  const Shape& s = input.shape();
  const std::size_t B = s[0], C = s[1], plane = s[2] * s[3];
  require(gamma.numel() == C && beta.numel() == C, "batchnorm",
          "gamma/beta length must equal channel count " + std::to_string(C));
  require(stats.running_mean.defined() && stats.running_mean.numel() == C &&
              stats.running_var.numel() == C,
          "batchnorm", "running statistics have the wrong length");

  Tensor out = make_result(s, {&input, &gamma, &beta});
  auto x = input.data();
  auto o = out.data();
  auto gm = gamma.data();
  auto bt = beta.data();
  const double n = static_cast<double>(B * plane);

  std::vector<float> inv_std(C);
  if (mode == Mode::Train) {
    auto rm = stats.running_mean.data();
    auto rv = stats.running_var.data();
    for (std::size_t c = 0; c < C; ++c) {
      double acc = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const float* p = x.data() + (b * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      }
      const double mu = acc / n;
      double var = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        const float* p = x.data() + (b * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = p[i] - mu;
          var += d * d;
        }
      }
      var /= n;
      const double istd = 1.0 / std::sqrt(var + stats.eps);
      inv_std[c] = static_cast<float>(istd);
      for (std::size_t b = 0; b < B; ++b) {
        const float* p = x.data() + (b * C + c) * plane;
        float* q = o.data() + (b * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          q[i] = static_cast<float>((p[i] - mu) * istd) * gm[c] + bt[c];
        }
      }
      const double unbiased = n > 1 ? var * n / (n - 1) : var;
      rm[c] = static_cast<float>((1.0 - stats.momentum) * rm[c] + stats.momentum * mu);
      rv[c] = static_cast<float>((1.0 - stats.momentum) * rv[c] + stats.momentum * unbiased);
    }
  } else {
    auto rm = stats.running_mean.data();
    auto rv = stats.running_var.data();
    for (std::size_t c = 0; c < C; ++c) {
      inv_std[c] = static_cast<float>(1.0 / std::sqrt(static_cast<double>(rv[c]) + stats.eps));
      for (std::size_t b = 0; b < B; ++b) {
        const float* p = x.data() + (b * C + c) * plane;
        float* q = o.data() + (b * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) q[i] = (p[i] - rm[c]) * inv_std[c] * gm[c] + bt[c];
      }
    }
  }

  if (out.requires_grad()) {
    std::vector<float> shift(C);
    if (mode == Mode::Eval) {
      auto rm = stats.running_mean.data();
      std::copy(rm.begin(), rm.end(), shift.begin());
    }
    out.node()->backward_fn = [B, C, plane, n, mode, inv_std = std::move(inv_std),
                               shift = std::move(shift)](Node& self) {
      Node& x = parent(self, 0);
      Node& gamma = parent(self, 1);
      Node& beta = parent(self, 2);
      const float* dy = self.grad.data();
      std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
      std::vector<double> mu(C, 0.0);
      for (std::size_t c = 0; c < C; ++c) {
        if (mode == Mode::Train) {
          // recover the batch mean from the input (cheaper than storing xhat)
          double acc = 0.0;
          for (std::size_t b = 0; b < B; ++b) {
            const float* p = x.data.data() + (b * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) acc += p[i];
          }
          mu[c] = acc / n;
        } else {
          mu[c] = shift[c];
        }
        for (std::size_t b = 0; b < B; ++b) {
          const float* p = x.data.data() + (b * C + c) * plane;
          const float* g = dy + (b * C + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            const double xhat = (p[i] - mu[c]) * inv_std[c];
            sum_dy[c] += g[i];
            sum_dy_xhat[c] += g[i] * xhat;
          }
        }
      }
      if (gamma.requires_grad) {
        auto g = gamma.ensure_grad();
        for (std::size_t c = 0; c < C; ++c) g[c] += static_cast<float>(sum_dy_xhat[c]);
      }
      if (beta.requires_grad) {
        auto g = beta.ensure_grad();
        for (std::size_t c = 0; c < C; ++c) g[c] += static_cast<float>(sum_dy[c]);
      }
      if (!x.requires_grad) return;
      auto dx = x.ensure_grad();
      for (std::size_t c = 0; c < C; ++c) {
        const double gm = gamma.data[c];
        const double istd = inv_std[c];
        for (std::size_t b = 0; b < B; ++b) {
          const float* p = x.data.data() + (b * C + c) * plane;
          const float* g = dy + (b * C + c) * plane;
          float* d = dx.data() + (b * C + c) * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            if (mode == Mode::Train) {
              const double xhat = (p[i] - mu[c]) * istd;
              d[i] += static_cast<float>(gm * istd / n *
                                         (n * g[i] - sum_dy[c] - xhat * sum_dy_xhat[c]));
            } else {
              d[i] += static_cast<float>(gm * istd * g[i]);
            }
          }
        }
      }
    };
  }
  return out;
}

std::pair<std::size_t, std::size_t> avgpool_table_padding(std::size_t len, std::size_t kernel,
                                                           std::size_t stride) {
  const std::size_t out = (len + stride - 1) / stride;
  const std::size_t needed = (out - 1) * stride + kernel;
  const std::size_t total = needed > len ? needed - len : 0;
  return {total / 2, total - total / 2};
}

Tensor avgpool2d(const Tensor& input, std::size_t kernel, std::size_t stride, bool pad_to_table) {
  require(input.rank() == 4, "avgpool2d", "input must be [B,C,H,W], got " + shape_str(input.shape()));
  require(kernel >= 1 && stride >= 1, "avgpool2d", "kernel and stride must be positive");
  const Shape& s = input.shape();
  const std::size_t H = s[2], W = s[3];
  std::size_t pad = 0, Ho = 0;
  if (pad_to_table) {
    pad = avgpool_table_padding(H, kernel, stride).first;
    Ho = (H + stride - 1) / stride;
  } else {
    require(H >= kernel, "avgpool2d",
            "input length " + std::to_string(H) + " shorter than window " + std::to_string(kernel));
    Ho = (H - kernel) / stride + 1;
  }
  const std::size_t planes = s[0] * s[1];
  const float inv = 1.0f / static_cast<float>(kernel);

  Tensor out = make_result({s[0], s[1], Ho, W}, {&input});
  auto x = input.data();
  auto o = out.data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t oh = 0; oh < Ho; ++oh) {
      const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(oh * stride) - static_cast<std::ptrdiff_t>(pad);
      const std::size_t h0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(start, 0));
      const std::size_t h1 = static_cast<std::size_t>(
          std::min<std::ptrdiff_t>(start + static_cast<std::ptrdiff_t>(kernel), static_cast<std::ptrdiff_t>(H)));
      for (std::size_t w = 0; w < W; ++w) {
        double acc = 0.0;
        for (std::size_t h = h0; h < h1; ++h) acc += x[(p * H + h) * W + w];
        o[(p * Ho + oh) * W + w] = static_cast<float>(acc) * inv;
      }
    }
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [planes, H, W, Ho, pad, kernel, stride, inv](Node& self) {
      auto g = parent(self, 0).ensure_grad();
      for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t oh = 0; oh < Ho; ++oh) {
          const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(oh * stride) - static_cast<std::ptrdiff_t>(pad);
          const std::size_t h0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(start, 0));
          const std::size_t h1 = static_cast<std::size_t>(std::min<std::ptrdiff_t>(
              start + static_cast<std::ptrdiff_t>(kernel), static_cast<std::ptrdiff_t>(H)));
          for (std::size_t w = 0; w < W; ++w) {
            const float d = self.grad[(p * Ho + oh) * W + w] * inv;
            for (std::size_t h = h0; h < h1; ++h) g[(p * H + h) * W + w] += d;
          }
        }
      }
    };
  }
  return out;
}

Tensor dropout(const Tensor& input, float rate, const ForwardContext& ctx) {
  if (!(rate >= 0.0f && rate < 1.0f)) fail(ErrorKind::Config, "dropout: rate must be in [0, 1)");
  if (!ctx.training() || rate == 0.0f) return input;
  if (!ctx.rng) fail(ErrorKind::State, "dropout: Train mode requires an rng");
  auto mask = std::make_shared<std::vector<float>>(input.numel());
  const float keep_scale = 1.0f / (1.0f - rate);
  for (float& m : *mask) m = ctx.rng->uniform() < rate ? 0.0f : keep_scale;
  Tensor out = make_result(input.shape(), {&input});
  auto x = input.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * (*mask)[i];
  if (out.requires_grad()) {
    out.node()->backward_fn = [mask](Node& self) {
      auto g = parent(self, 0).ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*mask)[i];
    };
  }
  return out;
}

// Activations --------------------------------------------------------------------

Tensor relu(const Tensor& a) {
  Tensor out = unary(a, [](float v) { return v > 0.0f ? v : 0.0f; });
  if (out.requires_grad()) {
    out.node()->backward_fn = [](Node& self) {
      Node& x = parent(self, 0);
      auto g = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x.data[i] > 0.0f) g[i] += self.grad[i];
      }
    };
  }
  return out;
}

Tensor square(const Tensor& a) {
  Tensor out = unary(a, [](float v) { return v * v; });
  if (out.requires_grad()) {
    out.node()->backward_fn = [](Node& self) {
      Node& x = parent(self, 0);
      auto g = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0f * x.data[i] * self.grad[i];
    };
  }
  return out;
}

Tensor safe_log(const Tensor& a) {
  Tensor out = unary(a, [](float v) { return std::log(std::max(v, kSafeLogFloor)); });
  if (out.requires_grad()) {
    out.node()->backward_fn = [](Node& self) {
      Node& x = parent(self, 0);
      auto g = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x.data[i] > kSafeLogFloor) g[i] += self.grad[i] / x.data[i];
      }
    };
  }
  return out;
}

Tensor exp(const Tensor& a) {
  Tensor out = unary(a, [](float v) { return std::exp(v); });
  if (out.requires_grad()) {
    out.node()->backward_fn = [](Node& self) {
      auto g = parent(self, 0).ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * self.data[i];
    };
  }
  return out;
}

namespace {

void require_matrix(const Tensor& a, const char* op) {
  require(a.rank() == 2, op, "expects [rows, classes], got " + shape_str(a.shape()));
}

}  // namespace

Tensor softmax(const Tensor& a) {
  require_matrix(a, "softmax");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  Tensor out = make_result(a.shape(), {&a});
  auto x = a.data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = x.data() + r * cols;
    float* orow = o.data() + r * cols;
    const float mx = *std::max_element(xr, xr + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(static_cast<double>(xr[c]) - mx);
    for (std::size_t c = 0; c < cols; ++c) {
      orow[c] = static_cast<float>(std::exp(static_cast<double>(xr[c]) - mx) / z);
    }
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [rows, cols](Node& self) {
      auto g = parent(self, 0).ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const float* s = self.data.data() + r * cols;
        const float* dy = self.grad.data() + r * cols;
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += static_cast<double>(dy[c]) * s[c];
        for (std::size_t c = 0; c < cols; ++c) {
          g[r * cols + c] += static_cast<float>(s[c] * (dy[c] - dot));
        }
      }
    };
  }
  return out;
}

Tensor log_softmax(const Tensor& a) {
  require_matrix(a, "log_softmax");
  const std::size_t rows = a.dim(0), cols = a.dim(1);
  Tensor out = make_result(a.shape(), {&a});
  auto x = a.data();
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const float* xr = x.data() + r * cols;
    const float mx = *std::max_element(xr, xr + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(static_cast<double>(xr[c]) - mx);
    const double lz = std::log(z) + mx;
    for (std::size_t c = 0; c < cols; ++c) o[r * cols + c] = static_cast<float>(xr[c] - lz);
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [rows, cols](Node& self) {
      auto g = parent(self, 0).ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const float* lp = self.data.data() + r * cols;
        const float* dy = self.grad.data() + r * cols;
        double total = 0.0;
        for (std::size_t c = 0; c < cols; ++c) total += dy[c];
        for (std::size_t c = 0; c < cols; ++c) {
          g[r * cols + c] += static_cast<float>(dy[c] - std::exp(static_cast<double>(lp[c])) * total);
        }
      }
    };
  }
  return out;
}

Tensor activation(Activation kind, const Tensor& a) {
  switch (kind) {
    case Activation::ReLU: return relu(a);
    case Activation::Square: return square(a);
    case Activation::SafeLog: return safe_log(a);
    case Activation::Softmax: return softmax(a);
    case Activation::LogSoftmax: return log_softmax(a);
  }
  fail(ErrorKind::Config, "unknown activation");
}

// Dense and losses -----------------------------------------------------------------

Tensor dense(const Tensor& input, const Tensor& weight, const Tensor* bias) {
  require(input.rank() == 2 && weight.rank() == 2, "dense",
          "expects input [B,F] and weight [F,O], got " + shape_str(input.shape()) + " and " +
              shape_str(weight.shape()));
  const std::size_t B = input.dim(0), F = input.dim(1), O = weight.dim(1);
  require(weight.dim(0) == F, "dense",
          "inner dims differ: input " + shape_str(input.shape()) + ", weight " +
              shape_str(weight.shape()));
  if (bias) require(bias->numel() == O, "dense", "bias length must be " + std::to_string(O));

  Tensor out = make_result({B, O}, {&input, &weight, bias});
  auto x = input.data();
  auto w = weight.data();
  auto o = out.data();
  for (std::size_t b = 0; b < B; ++b) {
    float* orow = o.data() + b * O;
    if (bias) std::copy(bias->data().begin(), bias->data().end(), orow);
    for (std::size_t f = 0; f < F; ++f) {
      const float xv = x[b * F + f];
      const float* wrow = w.data() + f * O;
#pragma omp simd
      for (std::size_t k = 0; k < O; ++k) orow[k] += xv * wrow[k];
    }
  }
  if (out.requires_grad()) {
    out.node()->backward_fn = [B, F, O](Node& self) {
      Node& x = parent(self, 0);
      Node& w = parent(self, 1);
      const float* dy = self.grad.data();
      if (x.requires_grad) {
        auto g = x.ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t f = 0; f < F; ++f) {
            float acc = 0.0f;
            const float* wrow = w.data.data() + f * O;
            for (std::size_t k = 0; k < O; ++k) acc += dy[b * O + k] * wrow[k];
            g[b * F + f] += acc;
          }
      }
      if (w.requires_grad) {
        auto g = w.ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t f = 0; f < F; ++f) {
            const float xv = x.data[b * F + f];
            float* grow = g.data() + f * O;
#pragma omp simd
            for (std::size_t k = 0; k < O; ++k) grow[k] += xv * dy[b * O + k];
          }
      }
      if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
        auto g = self.parents[2]->ensure_grad();
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t k = 0; k < O; ++k) g[k] += dy[b * O + k];
      }
    };
  }
  return out;
}

Tensor cross_entropy(const Tensor& logprobs, std::span<const int> labels) {
  require_matrix(logprobs, "cross_entropy");
  const std::size_t B = logprobs.dim(0), K = logprobs.dim(1);
  require(labels.size() == B, "cross_entropy",
          "got " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(B));
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= K) {
      fail(ErrorKind::Config, "cross_entropy: label " + std::to_string(y) + " outside [0, " +
                                  std::to_string(K) + ")");
    }
  }
  Tensor out = make_result({1}, {&logprobs});
  double acc = 0.0;
  auto lp = logprobs.data();
  for (std::size_t b = 0; b < B; ++b) acc -= lp[b * K + static_cast<std::size_t>(labels[b])];
  out.data()[0] = static_cast<float>(acc / static_cast<double>(B));
  if (out.requires_grad()) {
    std::vector<int> ys(labels.begin(), labels.end());
    out.node()->backward_fn = [ys = std::move(ys), B, K](Node& self) {
      auto g = parent(self, 0).ensure_grad();
      const float d = -self.grad[0] / static_cast<float>(B);
      for (std::size_t b = 0; b < B; ++b) g[b * K + static_cast<std::size_t>(ys[b])] += d;
    };
  }
  return out;
}

Tensor mse(const Tensor& prediction, const Tensor& target) {
  require_same_shape(prediction, target, "mse");
  Tensor out = make_result({1}, {&prediction, &target});
  auto p = prediction.data();
  auto t = target.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = static_cast<double>(p[i]) - t[i];
    acc += d * d;
  }
  const double n = static_cast<double>(p.size());
  out.data()[0] = static_cast<float>(acc / n);
  if (out.requires_grad()) {
    out.node()->backward_fn = [n](Node& self) {
      Node& p = parent(self, 0);
      Node& t = parent(self, 1);
      const float scale = static_cast<float>(2.0 / n) * self.grad[0];
      if (p.requires_grad) {
        auto g = p.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * (p.data[i] - t.data[i]);
      }
      if (t.requires_grad) {
        auto g = t.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] -= scale * (p.data[i] - t.data[i]);
      }
    };
  }
  return out;
}

}  // namespace ops

}  // namespace distnet
