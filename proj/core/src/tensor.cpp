#include "mitodet/tensor.hpp"

namespace mitodet {

namespace {

// One CCW rotation of an h x w plane into a w x h plane.
void rot_plane(const float* src, int h, int w, float* dst) {
  // dst(r, c) = src(c, w-1-r), dst is w x h
  for (int r = 0; r < w; ++r) {
    for (int c = 0; c < h; ++c) {
      dst[size_t(r) * h + c] = src[size_t(c) * w + (w - 1 - r)];
    }
  }
}

}  // namespace

GTensor rot90(const GTensor& t, int k) {
  k = ((k % 4) + 4) % 4;
  if (k == 0) return t;
  GTensor cur = t;
  for (int i = 0; i < k; ++i) {
    GTensor next(cur.n, cur.o, cur.c, cur.w, cur.h);
    size_t planes = size_t(cur.n) * cur.o * cur.c;
    for (size_t p = 0; p < planes; ++p) {
      rot_plane(cur.data() + p * cur.plane(), cur.h, cur.w,
                next.data() + p * next.plane());
    }
    cur = std::move(next);
  }
  return cur;
}

KernelTensor rot90(const KernelTensor& t, int k) {
  k = ((k % 4) + 4) % 4;
  if (k == 0) return t;
  KernelTensor cur = t;
  for (int i = 0; i < k; ++i) {
    KernelTensor next(cur.io, cur.oc, cur.ic, cur.kw, cur.kh);
    size_t planes = size_t(cur.io) * cur.oc * cur.ic;
    size_t pl = size_t(cur.kh) * cur.kw;
    for (size_t p = 0; p < planes; ++p) {
      rot_plane(cur.v.data() + p * pl, cur.kh, cur.kw, next.v.data() + p * pl);
    }
    cur = std::move(next);
  }
  return cur;
}

GTensor orientation_roll(const GTensor& t, int shift) {
  GTensor out(t.n, t.o, t.c, t.h, t.w);
  size_t block = size_t(t.c) * t.h * t.w;
  for (int b = 0; b < t.n; ++b) {
    for (int o = 0; o < t.o; ++o) {
      int src = ((o - shift) % t.o + t.o) % t.o;
      const float* sp = t.data() + (size_t(b) * t.o + src) * block;
      float* dp = out.data() + (size_t(b) * t.o + o) * block;
      std::copy(sp, sp + block, dp);
    }
  }
  return out;
}

}  // namespace mitodet
