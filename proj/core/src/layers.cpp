#include "mitodet/layers.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "mitodet/rng.hpp"

namespace mitodet {

namespace {

// Convolutions run as matrix products: rows of W are (rotation, out-channel)
// pairs, columns of the im2col panel are output pixels. Fixed 4x64 tiles keep
// the accumulators in registers; panels are split over output rows so the
// column buffer stays a few MB at most.
constexpr int kTileM = 4;
constexpr int kTileN = 64;
constexpr int kPanelCols = 2048;

// C tile = A(4 rows) x B panel, overwrite.
void gemm_tile(int K, const float* A, size_t lda, const float* B, size_t ldb,
               float* C, size_t ldc) {
  float acc[kTileM][kTileN] = {};
  for (int k = 0; k < K; ++k) {
    const float* b = B + size_t(k) * ldb;
    const float a0 = A[k];
    const float a1 = A[lda + k];
    const float a2 = A[2 * lda + k];
    const float a3 = A[3 * lda + k];
    for (int j = 0; j < kTileN; ++j) {
      const float bj = b[j];
      acc[0][j] += a0 * bj;
      acc[1][j] += a1 * bj;
      acc[2][j] += a2 * bj;
      acc[3][j] += a3 * bj;
    }
  }
  for (int i = 0; i < kTileM; ++i)
    std::copy(acc[i], acc[i] + kTileN, C + size_t(i) * ldc);
}

void gemm_edge(int mr, int nr, int K, const float* A, size_t lda,
               const float* B, size_t ldb, float* C, size_t ldc) {
  for (int i = 0; i < mr; ++i) {
    float tmp[kTileN] = {};
    const float* a = A + size_t(i) * lda;
    for (int k = 0; k < K; ++k) {
      const float av = a[k];
      const float* b = B + size_t(k) * ldb;
      for (int j = 0; j < nr; ++j) tmp[j] += av * b[j];
    }
    std::copy(tmp, tmp + nr, C + size_t(i) * ldc);
  }
}

// C[M][N] = A[M][K] * B[K][N], row-major with leading strides, C overwritten.
void gemm_nn(int M, int N, int K, const float* A, size_t lda, const float* B,
             size_t ldb, float* C, size_t ldc) {
  int m0 = 0;
  for (; m0 + kTileM <= M; m0 += kTileM) {
    int n0 = 0;
    for (; n0 + kTileN <= N; n0 += kTileN)
      gemm_tile(K, A + size_t(m0) * lda, lda, B + n0, ldb,
                C + size_t(m0) * ldc + n0, ldc);
    if (n0 < N)
      gemm_edge(kTileM, N - n0, K, A + size_t(m0) * lda, lda, B + n0, ldb,
                C + size_t(m0) * ldc + n0, ldc);
  }
  for (; m0 < M; ++m0) {
    for (int n0 = 0; n0 < N; n0 += kTileN)
      gemm_edge(1, std::min(kTileN, N - n0), K, A + size_t(m0) * lda, lda,
                B + n0, ldb, C + size_t(m0) * ldc + n0, ldc);
  }
}

constexpr int kDotJ = 8;
constexpr int kLanes = 16;

// c[j] += dot(a, B row j) for 8 rows at once; lane accumulators so the
// reductions stay independent.
void dot8(int N, const float* a, const float* B, size_t ldb, float* c) {
  float acc[kDotJ][kLanes] = {};
  int n = 0;
  for (; n + kLanes <= N; n += kLanes) {
    for (int j = 0; j < kDotJ; ++j) {
      const float* b = B + size_t(j) * ldb + n;
      for (int l = 0; l < kLanes; ++l) acc[j][l] += a[n + l] * b[l];
    }
  }
  for (int j = 0; j < kDotJ; ++j) {
    float s = 0.0f;
    for (int l = 0; l < kLanes; ++l) s += acc[j][l];
    const float* b = B + size_t(j) * ldb;
    for (int t = n; t < N; ++t) s += a[t] * b[t];
    c[j] += s;
  }
}

void dot1(int N, const float* a, const float* b, float* c) {
  float acc[kLanes] = {};
  int n = 0;
  for (; n + kLanes <= N; n += kLanes)
    for (int l = 0; l < kLanes; ++l) acc[l] += a[n + l] * b[n + l];
  float s = 0.0f;
  for (int l = 0; l < kLanes; ++l) s += acc[l];
  for (; n < N; ++n) s += a[n] * b[n];
  *c += s;
}

// C[M][Kd] += A[M][N] * B[Kd][N]^T (contraction over the pixel axis).
void gemm_nt_acc(int M, int Kd, int N, const float* A, size_t lda,
                 const float* B, size_t ldb, float* C, size_t ldc) {
  for (int i = 0; i < M; ++i) {
    const float* a = A + size_t(i) * lda;
    float* crow = C + size_t(i) * ldc;
    int j0 = 0;
    for (; j0 + kDotJ <= Kd; j0 += kDotJ)
      dot8(N, a, B + size_t(j0) * ldb, ldb, crow + j0);
    for (; j0 < Kd; ++j0) dot1(N, a, B + size_t(j0) * ldb, crow + j0);
  }
}

// Rotated, orientation-cycled kernels laid out as a (R*oc) x (io*ic*kh*kw)
// matrix; row (r, oc), column (s, ic, ky, kx) holds rot_r(K)[(s-r)%4][oc][ic].
std::vector<float> weight_matrix(const KernelTensor& k, ConvKind kind, int R) {
  const size_t kplane = size_t(k.kh) * k.kw;
  const size_t cols = size_t(k.io) * k.ic * kplane;
  std::vector<float> wm(size_t(R) * k.oc * cols);
  for (int r = 0; r < R; ++r) {
    const KernelTensor kr = rot90(k, r);
    for (int s = 0; s < k.io; ++s) {
      const int ks = (kind == ConvKind::Group) ? ((s - r) & 3) : s;
      for (int oc = 0; oc < k.oc; ++oc) {
        for (int ic = 0; ic < k.ic; ++ic) {
          const float* src =
              kr.v.data() + ((size_t(ks) * k.oc + oc) * k.ic + ic) * kplane;
          float* dst = wm.data() + (size_t(r) * k.oc + oc) * cols +
                       (size_t(s) * k.ic + ic) * kplane;
          std::copy(src, src + kplane, dst);
        }
      }
    }
  }
  return wm;
}

std::vector<float> transpose_matrix(const std::vector<float>& a, size_t rows,
                                    size_t cols) {
  std::vector<float> t(a.size());
  for (size_t i = 0; i < rows; ++i)
    for (size_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  return t;
}

// Fill col[(sc,ky,kx)][(y-y0)*ow + x] = planes[sc][y*S+ky][x*S+kx] for output
// rows [y0, y1). planes = io*ic contiguous h*w planes of one batch item.
void im2col_rows(const float* planes, int sc_count, int h, int w, int kh,
                 int kw, int stride, int ow, int y0, int y1, float* col) {
  const size_t np = size_t(y1 - y0) * ow;
  for (int sc = 0; sc < sc_count; ++sc) {
    const float* pl = planes + size_t(sc) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        float* crow = col + ((size_t(sc) * kh + ky) * kw + kx) * np;
        for (int y = y0; y < y1; ++y) {
          const float* src = pl + (size_t(y) * stride + ky) * w + kx;
          float* dst = crow + size_t(y - y0) * ow;
          if (stride == 1) {
            std::memcpy(dst, src, size_t(ow) * sizeof(float));
          } else {
            for (int x = 0; x < ow; ++x) dst[x] = src[size_t(x) * stride];
          }
        }
      }
    }
  }
}

// Scatter-accumulate transpose of im2col_rows.
void col2im_rows(const float* col, int sc_count, int h, int w, int kh, int kw,
                 int stride, int ow, int y0, int y1, float* planes) {
  const size_t np = size_t(y1 - y0) * ow;
  for (int sc = 0; sc < sc_count; ++sc) {
    float* pl = planes + size_t(sc) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const float* crow = col + ((size_t(sc) * kh + ky) * kw + kx) * np;
        for (int y = y0; y < y1; ++y) {
          float* dst = pl + (size_t(y) * stride + ky) * w + kx;
          const float* src = crow + size_t(y - y0) * ow;
          if (stride == 1) {
            for (int x = 0; x < ow; ++x) dst[x] += src[x];
          } else {
            for (int x = 0; x < ow; ++x) dst[size_t(x) * stride] += src[x];
          }
        }
      }
    }
  }
}

void check_conv_shapes(const GTensor& x, const KernelTensor& k, ConvKind kind,
                       int stride) {
  const int want_io = (kind == ConvKind::Group) ? 4 : 1;
  if (x.o != want_io)
    throw ValidationError("conv: input has " + std::to_string(x.o) +
                          " orientations, expected " + std::to_string(want_io));
  if (k.io != want_io)
    throw ValidationError("conv: kernel has " + std::to_string(k.io) +
                          " in-orientations, expected " +
                          std::to_string(want_io));
  if (x.c != k.ic)
    throw ValidationError("conv: channel mismatch (input " +
                          std::to_string(x.c) + ", kernel " +
                          std::to_string(k.ic) + ")");
  if (kind != ConvKind::Plain && k.kh != k.kw)
    throw ValidationError("conv: P4 kernels must be square");
  if (x.h < k.kh || x.w < k.kw)
    throw ValidationError("conv: input " + std::to_string(x.h) + "x" +
                          std::to_string(x.w) + " smaller than kernel " +
                          std::to_string(k.kh) + "x" + std::to_string(k.kw));
  if (stride < 1) throw ValidationError("conv: stride must be >= 1");
}

}  // namespace

GTensor conv_forward(const GTensor& x, const KernelTensor& k, ConvKind kind,
                     int stride, const std::vector<float>* bias) {
  check_conv_shapes(x, k, kind, stride);
  const int R = (kind == ConvKind::Plain) ? 1 : 4;
  const int oh = (x.h - k.kh) / stride + 1;
  const int ow = (x.w - k.kw) / stride + 1;
  GTensor y(x.n, R, k.oc, oh, ow);
  const size_t kplane = size_t(k.kh) * k.kw;
  const int M = R * k.oc;
  const int kd = x.o * x.c * int(kplane);
  const std::vector<float> wm = weight_matrix(k, kind, R);
  const int yb = std::max(1, kPanelCols / ow);
  std::vector<float> col(size_t(kd) * yb * ow);
  for (int b = 0; b < x.n; ++b) {
    for (int y0 = 0; y0 < oh; y0 += yb) {
      const int y1 = std::min(oh, y0 + yb);
      const int np = (y1 - y0) * ow;
      im2col_rows(x.plane_ptr(b, 0, 0), x.o * x.c, x.h, x.w, k.kh, k.kw,
                  stride, ow, y0, y1, col.data());
      gemm_nn(M, np, kd, wm.data(), kd, col.data(), np,
              y.plane_ptr(b, 0, 0) + size_t(y0) * ow, size_t(oh) * ow);
    }
  }
  if (bias) {
    for (int b = 0; b < x.n; ++b) {
      for (int r = 0; r < R; ++r) {
        for (int oc = 0; oc < k.oc; ++oc) {
          float* out = y.plane_ptr(b, r, oc);
          const float bv = (*bias)[oc];
          for (size_t i = 0; i < y.plane(); ++i) out[i] += bv;
        }
      }
    }
  }
  return y;
}

GTensor conv_backward_input(const GTensor& dy, const KernelTensor& k,
                            ConvKind kind, int stride, int in_h, int in_w,
                            int in_o) {
  GTensor dx(dy.n, in_o, k.ic, in_h, in_w);
  const size_t kplane = size_t(k.kh) * k.kw;
  const int R = dy.o;
  const int M = R * k.oc;
  const int kd = in_o * k.ic * int(kplane);
  const std::vector<float> wt =
      transpose_matrix(weight_matrix(k, kind, R), size_t(M), size_t(kd));
  const int yb = std::max(1, kPanelCols / dy.w);
  std::vector<float> dcol(size_t(kd) * yb * dy.w);
  for (int b = 0; b < dy.n; ++b) {
    for (int y0 = 0; y0 < dy.h; y0 += yb) {
      const int y1 = std::min(dy.h, y0 + yb);
      const int np = (y1 - y0) * dy.w;
      gemm_nn(kd, np, M, wt.data(), M,
              dy.plane_ptr(b, 0, 0) + size_t(y0) * dy.w, dy.plane(),
              dcol.data(), np);
      col2im_rows(dcol.data(), in_o * k.ic, in_h, in_w, k.kh, k.kw, stride,
                  dy.w, y0, y1, dx.plane_ptr(b, 0, 0));
    }
  }
  return dx;
}

void conv_backward_params(const GTensor& dy, const GTensor& x, ConvKind kind,
                          int stride, KernelTensor& dk,
                          std::vector<float>* dbias) {
  const size_t kplane = size_t(dk.kh) * dk.kw;
  const int R = dy.o;
  const int M = R * dk.oc;
  const int kd = x.o * dk.ic * int(kplane);
  std::vector<float> dwm(size_t(M) * kd, 0.0f);
  const int yb = std::max(1, kPanelCols / dy.w);
  std::vector<float> col(size_t(kd) * yb * dy.w);
  for (int b = 0; b < x.n; ++b) {
    for (int y0 = 0; y0 < dy.h; y0 += yb) {
      const int y1 = std::min(dy.h, y0 + yb);
      const int np = (y1 - y0) * dy.w;
      im2col_rows(x.plane_ptr(b, 0, 0), x.o * dk.ic, x.h, x.w, dk.kh, dk.kw,
                  stride, dy.w, y0, y1, col.data());
      gemm_nt_acc(M, kd, np, dy.plane_ptr(b, 0, 0) + size_t(y0) * dy.w,
                  dy.plane(), col.data(), np, dwm.data(), kd);
    }
  }
  // dwm rows hold gradients w.r.t. the rotated kernels; rotate back before
  // accumulating into dk.
  for (int r = 0; r < R; ++r) {
    KernelTensor g(dk.io, dk.oc, dk.ic, dk.kh, dk.kw);
    for (int s = 0; s < x.o; ++s) {
      const int ks = (kind == ConvKind::Group) ? ((s - r) & 3) : s;
      for (int oc = 0; oc < dk.oc; ++oc) {
        for (int ic = 0; ic < dk.ic; ++ic) {
          const float* src = dwm.data() + (size_t(r) * dk.oc + oc) * kd +
                             (size_t(s) * dk.ic + ic) * kplane;
          float* gp =
              g.v.data() + ((size_t(ks) * dk.oc + oc) * dk.ic + ic) * kplane;
          std::copy(src, src + kplane, gp);
        }
      }
    }
    const KernelTensor gback = rot90(g, (4 - r) & 3);
    for (size_t i = 0; i < dk.v.size(); ++i) dk.v[i] += gback.v[i];
  }
  if (dbias) {
    for (int oc = 0; oc < dk.oc; ++oc) {
      double acc = 0.0;
      for (int b = 0; b < dy.n; ++b) {
        for (int r = 0; r < dy.o; ++r) {
          const float* p = dy.plane_ptr(b, r, oc);
          for (size_t i = 0; i < dy.plane(); ++i) acc += p[i];
        }
      }
      (*dbias)[oc] += static_cast<float>(acc);
    }
  }
}

GTensor center_crop(const GTensor& x, int margin) {
  if (margin == 0) return x;
  if (2 * margin >= x.h || 2 * margin >= x.w)
    throw ValidationError("center_crop: margin too large for input");
  GTensor y(x.n, x.o, x.c, x.h - 2 * margin, x.w - 2 * margin);
  const size_t planes = size_t(x.n) * x.o * x.c;
  for (size_t p = 0; p < planes; ++p) {
    const float* src = x.data() + p * x.plane();
    float* dst = y.data() + p * y.plane();
    for (int yy = 0; yy < y.h; ++yy) {
      std::memcpy(dst + size_t(yy) * y.w,
                  src + size_t(yy + margin) * x.w + margin,
                  sizeof(float) * y.w);
    }
  }
  return y;
}

GTensor orientation_max_pool(const GTensor& x, std::vector<uint8_t>* argmax) {
  GTensor y(x.n, 1, x.c, x.h, x.w);
  if (argmax) argmax->assign(y.size(), 0);
  const size_t plane = x.plane();
  for (int b = 0; b < x.n; ++b) {
    for (int c = 0; c < x.c; ++c) {
      float* out = y.plane_ptr(b, 0, c);
      uint8_t* am = argmax ? argmax->data() + (size_t(b) * x.c + c) * plane : nullptr;
      const float* o0 = x.plane_ptr(b, 0, c);
      std::memcpy(out, o0, sizeof(float) * plane);
      for (int o = 1; o < x.o; ++o) {
        const float* op = x.plane_ptr(b, o, c);
        for (size_t i = 0; i < plane; ++i) {
          if (op[i] > out[i]) {
            out[i] = op[i];
            if (am) am[i] = static_cast<uint8_t>(o);
          }
        }
      }
    }
  }
  return y;
}

GTensor softmax2_map(const GTensor& logits) {
  if (logits.c != 2 || logits.o != 1)
    throw ValidationError("softmax2_map: expected [1][2][h][w] logits");
  GTensor p(logits.n, 1, 1, logits.h, logits.w);
  for (int b = 0; b < logits.n; ++b) {
    const float* l0 = logits.plane_ptr(b, 0, 0);
    const float* l1 = logits.plane_ptr(b, 0, 1);
    float* out = p.plane_ptr(b, 0, 0);
    for (size_t i = 0; i < p.plane(); ++i) {
      out[i] = 1.0f / (1.0f + std::exp(l0[i] - l1[i]));
    }
  }
  return p;
}

// ---- ConvLayer ----

ConvLayer::ConvLayer(ConvKind kind, int in_channels, int out_channels,
                     int kernel, int stride, bool with_bias, std::string name)
    : kind_(kind),
      stride_(stride),
      name_(std::move(name)),
      kernel_((kind == ConvKind::Group) ? 4 : 1, out_channels, in_channels,
              kernel, kernel),
      kgrad_(kernel_.io, out_channels, in_channels, kernel, kernel),
      with_bias_(with_bias) {
  if (with_bias_) {
    bias_.assign(out_channels, 0.0f);
    bgrad_.assign(out_channels, 0.0f);
  }
}

GTensor ConvLayer::forward(const GTensor& x, Mode mode) {
  if (mode == Mode::Train) {
    cached_x_ = x;
    has_cache_ = true;
  }
  return conv_forward(x, kernel_, kind_, stride_,
                      with_bias_ ? &bias_ : nullptr);
}

GTensor ConvLayer::backward(const GTensor& dy) {
  if (!has_cache_)
    throw ValidationError("ConvLayer::backward without cached forward");
  conv_backward_params(dy, cached_x_, kind_, stride_, kgrad_,
                       with_bias_ ? &bgrad_ : nullptr);
  return conv_backward_input(dy, kernel_, kind_, stride_, cached_x_.h,
                             cached_x_.w, cached_x_.o);
}

void ConvLayer::collect_params(const std::string& prefix,
                               std::vector<ParamRef>& out) {
  ParamRef k;
  k.name = prefix + name_ + ".kernel";
  k.value = &kernel_.v;
  k.grad = &kgrad_.v;
  k.shape = {kernel_.io, kernel_.oc, kernel_.ic, kernel_.kh, kernel_.kw};
  k.decay = true;
  k.trainable = true;
  out.push_back(std::move(k));
  if (with_bias_) {
    ParamRef b;
    b.name = prefix + name_ + ".bias";
    b.value = &bias_;
    b.grad = &bgrad_;
    b.shape = {static_cast<int>(bias_.size())};
    b.decay = false;
    b.trainable = true;
    out.push_back(std::move(b));
  }
}

// ---- BatchNormLayer ----

BatchNormLayer::BatchNormLayer(int channels, std::string name, float momentum,
                               float eps)
    : channels_(channels),
      name_(std::move(name)),
      momentum_(momentum),
      eps_(eps),
      scale_(channels, 1.0f),
      shift_(channels, 0.0f),
      run_mean_(channels, 0.0f),
      run_var_(channels, 1.0f),
      sgrad_(channels, 0.0f),
      bgrad_(channels, 0.0f) {}

GTensor BatchNormLayer::forward(const GTensor& x, Mode mode) {
  if (x.c != channels_)
    throw ValidationError("batchnorm: expected " + std::to_string(channels_) +
                          " channels, got " + std::to_string(x.c));
  GTensor y(x.n, x.o, x.c, x.h, x.w);
  const size_t plane = x.plane();
  const size_t m = size_t(x.n) * x.o * plane;  // samples per channel
  if (mode == Mode::Train) {
    xhat_ = GTensor(x.n, x.o, x.c, x.h, x.w);
    inv_std_.assign(channels_, 0.0f);
    has_cache_ = true;
  }
  for (int c = 0; c < channels_; ++c) {
    float mean, var;
    if (mode == Mode::Train) {
      double sum = 0.0, sum2 = 0.0;
      for (int b = 0; b < x.n; ++b) {
        for (int o = 0; o < x.o; ++o) {
          const float* p = x.plane_ptr(b, o, c);
          for (size_t i = 0; i < plane; ++i) {
            sum += p[i];
            sum2 += double(p[i]) * p[i];
          }
        }
      }
      const double dm = sum / double(m);
      const double dv = std::max(0.0, sum2 / double(m) - dm * dm);
      mean = static_cast<float>(dm);
      var = static_cast<float>(dv);
      run_mean_[c] = (1.0f - momentum_) * run_mean_[c] + momentum_ * mean;
      run_var_[c] = (1.0f - momentum_) * run_var_[c] + momentum_ * var;
    } else {
      mean = run_mean_[c];
      var = run_var_[c];
    }
    const float inv = 1.0f / std::sqrt(var + eps_);
    const float g = scale_[c], sh = shift_[c];
    for (int b = 0; b < x.n; ++b) {
      for (int o = 0; o < x.o; ++o) {
        const float* p = x.plane_ptr(b, o, c);
        float* q = y.plane_ptr(b, o, c);
        float* xh = has_cache_ && mode == Mode::Train ? xhat_.plane_ptr(b, o, c)
                                                      : nullptr;
        for (size_t i = 0; i < plane; ++i) {
          const float h = (p[i] - mean) * inv;
          if (xh) xh[i] = h;
          q[i] = g * h + sh;
        }
      }
    }
    if (mode == Mode::Train) inv_std_[c] = inv;
  }
  return y;
}

GTensor BatchNormLayer::backward(const GTensor& dy) {
  if (!has_cache_)
    throw ValidationError("BatchNormLayer::backward without cached forward");
  GTensor dx(dy.n, dy.o, dy.c, dy.h, dy.w);
  const size_t plane = dy.plane();
  const double m = double(dy.n) * dy.o * plane;
  for (int c = 0; c < channels_; ++c) {
    double dsum = 0.0, dxhsum = 0.0;
    for (int b = 0; b < dy.n; ++b) {
      for (int o = 0; o < dy.o; ++o) {
        const float* dp = dy.plane_ptr(b, o, c);
        const float* xh = xhat_.plane_ptr(b, o, c);
        for (size_t i = 0; i < plane; ++i) {
          dsum += dp[i];
          dxhsum += double(dp[i]) * xh[i];
        }
      }
    }
    bgrad_[c] += static_cast<float>(dsum);
    sgrad_[c] += static_cast<float>(dxhsum);
    const float g = scale_[c];
    const float inv = inv_std_[c];
    const float mean_dy = static_cast<float>(dsum / m);
    const float mean_dyxh = static_cast<float>(dxhsum / m);
    for (int b = 0; b < dy.n; ++b) {
      for (int o = 0; o < dy.o; ++o) {
        const float* dp = dy.plane_ptr(b, o, c);
        const float* xh = xhat_.plane_ptr(b, o, c);
        float* dq = dx.plane_ptr(b, o, c);
        for (size_t i = 0; i < plane; ++i) {
          dq[i] = g * inv * (dp[i] - mean_dy - xh[i] * mean_dyxh);
        }
      }
    }
  }
  return dx;
}

void BatchNormLayer::collect_params(const std::string& prefix,
                                    std::vector<ParamRef>& out) {
  auto push = [&](const char* suffix, std::vector<float>* val,
                  std::vector<float>* grad, bool trainable) {
    ParamRef p;
    p.name = prefix + name_ + suffix;
    p.value = val;
    p.grad = grad;
    p.shape = {channels_};
    p.decay = false;  // batch-norm parameters are excluded from weight decay
    p.trainable = trainable;
    out.push_back(std::move(p));
  };
  push(".scale", &scale_, &sgrad_, true);
  push(".shift", &shift_, &bgrad_, true);
  push(".run_mean", &run_mean_, nullptr, false);
  push(".run_var", &run_var_, nullptr, false);
}

// ---- ReluLayer ----

GTensor ReluLayer::forward(const GTensor& x, Mode mode) {
  GTensor y(x.n, x.o, x.c, x.h, x.w);
  if (mode == Mode::Train) {
    mask_.assign(x.size(), 0);
    has_cache_ = true;
  }
  for (size_t i = 0; i < x.size(); ++i) {
    const bool pos = x.v[i] > 0.0f;
    y.v[i] = pos ? x.v[i] : 0.0f;
    if (mode == Mode::Train && pos) mask_[i] = 1;
  }
  return y;
}

GTensor ReluLayer::backward(const GTensor& dy) {
  if (!has_cache_)
    throw ValidationError("ReluLayer::backward without cached forward");
  GTensor dx(dy.n, dy.o, dy.c, dy.h, dy.w);
  for (size_t i = 0; i < dy.size(); ++i) dx.v[i] = mask_[i] ? dy.v[i] : 0.0f;
  return dx;
}

// ---- OrientMaxPoolLayer ----

GTensor OrientMaxPoolLayer::forward(const GTensor& x, Mode mode) {
  GTensor y = orientation_max_pool(x, mode == Mode::Train ? &argmax_ : nullptr);
  if (mode == Mode::Train) {
    in_n_ = x.n;
    in_o_ = x.o;
    in_c_ = x.c;
    in_h_ = x.h;
    in_w_ = x.w;
    has_cache_ = true;
  }
  return y;
}

GTensor OrientMaxPoolLayer::backward(const GTensor& dy) {
  if (!has_cache_)
    throw ValidationError("OrientMaxPoolLayer::backward without cached forward");
  GTensor dx(in_n_, in_o_, in_c_, in_h_, in_w_);
  const size_t plane = dx.plane();
  for (int b = 0; b < dx.n; ++b) {
    for (int c = 0; c < dx.c; ++c) {
      const float* dp = dy.plane_ptr(b, 0, c);
      const uint8_t* am = argmax_.data() + (size_t(b) * dx.c + c) * plane;
      for (size_t i = 0; i < plane; ++i) {
        dx.plane_ptr(b, am[i], c)[i] = dp[i];
      }
    }
  }
  return dx;
}

// ---- ResidualBlock ----

ResidualBlock::ResidualBlock(int channels, bool bottleneck, std::string name)
    : name_(std::move(name)), crop_(bottleneck ? 1 : 2) {
  if (bottleneck) {
    const int inner = std::max(1, channels / 4);
    path_.push_back(std::make_unique<BatchNormLayer>(channels, "bn1"));
    path_.push_back(std::make_unique<ReluLayer>());
    path_.push_back(std::make_unique<ConvLayer>(ConvKind::Group, channels,
                                                inner, 1, 1, false, "conv1"));
    path_.push_back(std::make_unique<BatchNormLayer>(inner, "bn2"));
    path_.push_back(std::make_unique<ReluLayer>());
    path_.push_back(std::make_unique<ConvLayer>(ConvKind::Group, inner, inner,
                                                3, 1, false, "conv2"));
    path_.push_back(std::make_unique<BatchNormLayer>(inner, "bn3"));
    path_.push_back(std::make_unique<ReluLayer>());
    path_.push_back(std::make_unique<ConvLayer>(ConvKind::Group, inner,
                                                channels, 1, 1, false, "conv3"));
  } else {
    path_.push_back(std::make_unique<BatchNormLayer>(channels, "bn1"));
    path_.push_back(std::make_unique<ReluLayer>());
    path_.push_back(std::make_unique<ConvLayer>(ConvKind::Group, channels,
                                                channels, 3, 1, false, "conv1"));
    path_.push_back(std::make_unique<BatchNormLayer>(channels, "bn2"));
    path_.push_back(std::make_unique<ReluLayer>());
    path_.push_back(std::make_unique<ConvLayer>(ConvKind::Group, channels,
                                                channels, 3, 1, false, "conv2"));
  }
}

GTensor ResidualBlock::forward(const GTensor& x, Mode mode) {
  GTensor t = x;
  for (auto& l : path_) t = l->forward(t, mode);
  const GTensor sc = center_crop(x, crop_);
  if (!t.same_shape(sc))
    throw ValidationError("residual block: path/shortcut shape mismatch");
  for (size_t i = 0; i < t.size(); ++i) t.v[i] += sc.v[i];
  return t;
}

GTensor ResidualBlock::backward(const GTensor& dy) {
  GTensor d = dy;
  for (auto it = path_.rbegin(); it != path_.rend(); ++it) {
    d = (*it)->backward(d);
  }
  // Shortcut gradient: embed dy back into the uncropped interior.
  for (int b = 0; b < dy.n; ++b) {
    for (int o = 0; o < dy.o; ++o) {
      for (int c = 0; c < dy.c; ++c) {
        const float* sp = dy.plane_ptr(b, o, c);
        float* dp = d.plane_ptr(b, o, c);
        for (int y = 0; y < dy.h; ++y) {
          float* drow = dp + size_t(y + crop_) * d.w + crop_;
          const float* srow = sp + size_t(y) * dy.w;
          for (int x = 0; x < dy.w; ++x) drow[x] += srow[x];
        }
      }
    }
  }
  return d;
}

void ResidualBlock::collect_params(const std::string& prefix,
                                   std::vector<ParamRef>& out) {
  const std::string p = prefix + name_ + ".";
  for (auto& l : path_) l->collect_params(p, out);
}

}  // namespace mitodet
