#pragma once

#include <cstddef>
#include <vector>

namespace mitodet {

// Orientation-structured feature tensor. Logical layout is
// [orientations][channels][height][width] (f32); an additional leading batch
// axis `n` is carried for mini-batch processing. Single feature maps use
// n = 1. orientations is 1 for plain images / pooled maps and 4 for P4 maps.
struct GTensor {
  int n = 0, o = 0, c = 0, h = 0, w = 0;
  std::vector<float> v;

  GTensor() = default;
  GTensor(int n_, int o_, int c_, int h_, int w_)
      : n(n_), o(o_), c(c_), h(h_), w(w_),
        v(size_t(n_) * o_ * c_ * h_ * w_, 0.0f) {}

  static GTensor map(int orientations, int channels, int height, int width) {
    return GTensor(1, orientations, channels, height, width);
  }

  size_t size() const { return v.size(); }
  size_t plane() const { return size_t(h) * w; }

  float* data() { return v.data(); }
  const float* data() const { return v.data(); }

  size_t idx(int bi, int oi, int ci, int yi, int xi) const {
    return (((size_t(bi) * o + oi) * c + ci) * h + yi) * w + xi;
  }
  float& at(int bi, int oi, int ci, int yi, int xi) {
    return v[idx(bi, oi, ci, yi, xi)];
  }
  float at(int bi, int oi, int ci, int yi, int xi) const {
    return v[idx(bi, oi, ci, yi, xi)];
  }
  // Pointer to the start of one (orientation, channel) spatial plane.
  float* plane_ptr(int bi, int oi, int ci) {
    return v.data() + ((size_t(bi) * o + oi) * c + ci) * plane();
  }
  const float* plane_ptr(int bi, int oi, int ci) const {
    return v.data() + ((size_t(bi) * o + oi) * c + ci) * plane();
  }

  bool same_shape(const GTensor& other) const {
    return n == other.n && o == other.o && c == other.c && h == other.h &&
           w == other.w;
  }
};

// Convolution kernel bank. Layout
// [in_orientations][out_channels][in_channels][kh][kw]; in_orientations is 1
// for lifting kernels (plain image input) and 4 for P4->P4 kernels.
struct KernelTensor {
  int io = 0, oc = 0, ic = 0, kh = 0, kw = 0;
  std::vector<float> v;

  KernelTensor() = default;
  KernelTensor(int io_, int oc_, int ic_, int kh_, int kw_)
      : io(io_), oc(oc_), ic(ic_), kh(kh_), kw(kw_),
        v(size_t(io_) * oc_ * ic_ * kh_ * kw_, 0.0f) {}

  size_t size() const { return v.size(); }

  size_t idx(int s, int ocm, int icm, int ky, int kx) const {
    return (((size_t(s) * oc + ocm) * ic + icm) * kh + ky) * kw + kx;
  }
  float& at(int s, int ocm, int icm, int ky, int kx) {
    return v[idx(s, ocm, icm, ky, kx)];
  }
  float at(int s, int ocm, int icm, int ky, int kx) const {
    return v[idx(s, ocm, icm, ky, kx)];
  }
};

// Spatial 90-degree CCW rotation applied to every (.., h, w) plane,
// repeated k times.
GTensor rot90(const GTensor& t, int k);
KernelTensor rot90(const KernelTensor& t, int k);

// Cyclic shift of the orientation axis: out[o] = in[(o - shift) mod 4].
// With shift=+1 this is the orientation relabeling matching a spatial
// CCW rotation of a P4 feature map.
GTensor orientation_roll(const GTensor& t, int shift);

}  // namespace mitodet
