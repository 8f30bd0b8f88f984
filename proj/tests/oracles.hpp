#pragma once

// Brute-force reference implementations used across the test suites. Each
// one is transcribed directly from the documented contract with naive loops
// and double accumulation, sharing no code with the library internals.

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "mitodet/detect.hpp"
#include "mitodet/layers.hpp"
#include "mitodet/metrics.hpp"
#include "mitodet/rng.hpp"
#include "mitodet/tensor.hpp"

namespace oracle {

// One counter-clockwise quarter turn of a square n x n plane:
// out(r, c) = in(c, n-1-r).
inline std::vector<double> rot_ccw(const std::vector<double>& p, int n) {
  std::vector<double> out(p.size());
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c)
      out[size_t(r) * n + c] = p[size_t(c) * n + (n - 1 - r)];
  return out;
}

inline std::vector<double> rot_ccw_n(std::vector<double> p, int n, int times) {
  for (int i = 0; i < (times & 3); ++i) p = rot_ccw(p, n);
  return p;
}

// Naive correlation covering all three conv kinds. For R = 4 output
// orientations, out[r] correlates with the kernel rotated r quarter turns;
// group kernels additionally read input orientation s from slice (s-r) mod 4.
inline mitodet::GTensor conv_ref(const mitodet::GTensor& x,
                                 const mitodet::KernelTensor& k,
                                 const std::vector<float>* bias,
                                 mitodet::ConvKind kind, int stride) {
  using mitodet::ConvKind;
  const int R = kind == ConvKind::Plain ? 1 : 4;
  const int oh = (x.h - k.kh) / stride + 1;
  const int ow = (x.w - k.kw) / stride + 1;
  mitodet::GTensor y(x.n, R, k.oc, oh, ow);
  std::vector<double> plane(size_t(k.kh) * k.kw);
  for (int b = 0; b < x.n; ++b)
    for (int r = 0; r < R; ++r)
      for (int oc = 0; oc < k.oc; ++oc)
        for (int s = 0; s < x.o; ++s)
          for (int ic = 0; ic < x.c; ++ic) {
            const int ks = kind == ConvKind::Group ? ((s - r) & 3) : s;
            for (int i = 0; i < k.kh * k.kw; ++i)
              plane[i] = k.at(ks, oc, ic, i / k.kw, i % k.kw);
            plane = rot_ccw_n(plane, k.kh, r);
            for (int yo = 0; yo < oh; ++yo)
              for (int xo = 0; xo < ow; ++xo) {
                double acc = 0;
                for (int ky = 0; ky < k.kh; ++ky)
                  for (int kx = 0; kx < k.kw; ++kx)
                    acc += double(x.at(b, s, ic, yo * stride + ky,
                                       xo * stride + kx)) *
                           plane[size_t(ky) * k.kw + kx];
                y.at(b, r, oc, yo, xo) += float(acc);
              }
          }
  if (bias)
    for (int b = 0; b < x.n; ++b)
      for (int r = 0; r < R; ++r)
        for (int oc = 0; oc < k.oc; ++oc)
          for (int i = 0; i < oh * ow; ++i)
            y.plane_ptr(b, r, oc)[i] += (*bias)[oc];
  return y;
}

inline double max_abs_diff(const mitodet::GTensor& a, const mitodet::GTensor& b) {
  double worst = (a.size() == b.size()) ? 0.0 : 1e30;
  for (size_t i = 0; i < a.size() && i < b.size(); ++i)
    worst = std::max(worst, double(std::fabs(a.v[i] - b.v[i])));
  return worst;
}

// Central-difference gradient check of one layer: random linear loss over the
// output, `probes` random parameter slots and input slots each. Returns the
// worst relative error, normalized by max(1, |fd|, |analytic|).
inline double fd_worst(mitodet::Layer& layer, mitodet::GTensor x,
                       uint64_t seed, int probes = 8) {
  using namespace mitodet;
  Rng rc(seed);
  GTensor y0 = layer.forward(x, Mode::Train);
  std::vector<float> c(y0.size());
  for (auto& v : c) v = float(rc.normal());
  auto loss = [&](const GTensor& y) {
    double s = 0;
    for (size_t i = 0; i < y.size(); ++i) s += double(c[i]) * y.v[i];
    return s;
  };
  GTensor dy = y0;
  for (size_t i = 0; i < dy.size(); ++i) dy.v[i] = c[i];
  std::vector<ParamRef> ps;
  layer.collect_params("", ps);
  for (auto& p : ps)
    if (p.grad) std::fill(p.grad->begin(), p.grad->end(), 0.f);
  GTensor dx = layer.backward(dy);
  double worst = 0;
  auto fd_at = [&](float* slot, double analytic) {
    const float eps = 1e-2f;
    const float orig = *slot;
    *slot = orig + eps;
    const double lp = loss(layer.forward(x, Mode::Train));
    *slot = orig - eps;
    const double lm = loss(layer.forward(x, Mode::Train));
    *slot = orig;
    const double fd = (lp - lm) / (2.0 * eps);
    const double rel = std::fabs(fd - analytic) /
                       std::max(1.0, std::max(std::fabs(fd), std::fabs(analytic)));
    worst = std::max(worst, rel);
  };
  Rng rp(seed ^ 0x5eedull);
  for (auto& p : ps) {
    if (!p.grad) continue;
    for (int t = 0; t < probes; ++t) {
      const size_t i = size_t(rp.uniform_int(0, int64_t(p.value->size()) - 1));
      fd_at(&(*p.value)[i], (*p.grad)[i]);
    }
  }
  for (int t = 0; t < probes; ++t) {
    const size_t i = size_t(rp.uniform_int(0, int64_t(x.size()) - 1));
    fd_at(&x.v[i], dx.v[i]);
  }
  return worst;
}

// Plateau maxima by union-find over the full adjacency relation instead of
// seeded flood fill.
inline std::vector<mitodet::Detection> brute_local_maxima(
    const mitodet::PredictionMap& map, double threshold) {
  const int w = map.width, h = map.height;
  const int n = w * h;
  std::vector<int> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  std::function<int(int)> find = [&](int i) {
    while (parent[i] != i) i = parent[i] = parent[parent[i]];
    return i;
  };
  auto unite = [&](int a, int b) { parent[find(a)] = find(b); };
  auto val = [&](int i) { return map.values[size_t(i)]; };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int ny = y + dy, nx = x + dx;
          if ((dy == 0 && dx == 0) || ny < 0 || ny >= h || nx < 0 || nx >= w)
            continue;
          if (val(y * w + x) == val(ny * w + nx))
            unite(y * w + x, ny * w + nx);
        }
  std::vector<char> bad(n, 0), bordered(n, 0);
  std::vector<int> rep(n, -1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int root = find(y * w + x);
      if (rep[root] < 0) rep[root] = y * w + x;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int ny = y + dy, nx = x + dx;
          if ((dy == 0 && dx == 0) || ny < 0 || ny >= h || nx < 0 || nx >= w)
            continue;
          const float nv = val(ny * w + nx);
          if (nv == val(root)) continue;
          bordered[root] = 1;
          if (nv > val(root)) bad[root] = 1;
        }
    }
  std::vector<mitodet::Detection> out;
  for (int i = 0; i < n; ++i) {
    if (find(i) != i) continue;
    if (bad[i] || !bordered[i] || double(val(i)) < threshold) continue;
    mitodet::Detection d;
    d.x = double(rep[i] % w) * map.stride + map.offset;
    d.y = double(rep[i] / w) * map.stride + map.offset;
    d.score = val(i);
    out.push_back(d);
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.y != b.y) return a.y < b.y;
    return a.x < b.x;
  });
  return out;
}

// Literal transcription of the greedy matcher: detections by score (ties:
// lower y, then lower x, then original order), each claims the nearest free
// ground truth within radius, distance ties to the lowest index.
struct BruteMatch {
  int64_t tp = 0, fp = 0, fn = 0;
};
inline BruteMatch brute_match(const std::vector<mitodet::Detection>& dets,
                              const std::vector<mitodet::Point>& gts,
                              double radius) {
  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    if (dets[a].y != dets[b].y) return dets[a].y < dets[b].y;
    return dets[a].x < dets[b].x;
  });
  std::vector<char> taken(gts.size(), 0);
  BruteMatch m;
  for (int di : order) {
    int best = -1;
    double best_d = 0;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double d =
          std::hypot(dets[di].x - gts[g].x, dets[di].y - gts[g].y);
      if (d > radius) continue;
      if (best < 0 || d < best_d) {
        best = int(g);
        best_d = d;
      }
    }
    if (best >= 0) {
      taken[best] = 1;
      ++m.tp;
    } else {
      ++m.fp;
    }
  }
  m.fn = int64_t(gts.size()) - m.tp;
  return m;
}

// AP by re-matching from scratch at every distinct score threshold, then the
// same right-continuous step integration.
inline double brute_ap(const std::vector<mitodet::DetectionSet>& dets,
                       const std::vector<mitodet::ImageGroundTruth>& gts,
                       double radius) {
  std::vector<float> thresholds;
  size_t total_gt = 0;
  for (const auto& g : gts) total_gt += g.points.size();
  for (const auto& s : dets)
    for (const auto& d : s.detections) thresholds.push_back(d.score);
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()),
                   thresholds.end());
  double ap = 0, prev_recall = 0;
  for (float t : thresholds) {
    int64_t tp = 0, fp = 0;
    size_t kept = 0;
    for (const auto& g : gts) {
      std::vector<mitodet::Detection> sub;
      for (const auto& s : dets)
        if (s.image_id == g.image_id)
          for (const auto& d : s.detections)
            if (d.score >= t) sub.push_back(d);
      kept += sub.size();
      const BruteMatch m = brute_match(sub, g.points, radius);
      tp += m.tp;
      fp += m.fp;
    }
    const double precision = double(tp) / double(kept);
    const double recall = double(tp) / double(total_gt);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

// Agreement pairing by repeated argmax over all remaining cross pairs
// instead of one sort.
inline std::vector<mitodet::Detection> brute_agreement(
    const mitodet::DetectionSet& a, const mitodet::DetectionSet& b,
    double radius) {
  struct Cand {
    int i, j;
    double sum, dist;
    double lo_y, lo_x, hi_y, hi_x;
    bool alive = true;
  };
  std::vector<Cand> cands;
  for (size_t i = 0; i < a.detections.size(); ++i)
    for (size_t j = 0; j < b.detections.size(); ++j) {
      const auto& da = a.detections[i];
      const auto& db = b.detections[j];
      const double dist = std::hypot(da.x - db.x, da.y - db.y);
      if (dist > radius) continue;
      Cand c{int(i), int(j), double(da.score) + db.score, dist, 0, 0, 0, 0, true};
      const bool a_first = da.y < db.y || (da.y == db.y && da.x < db.x);
      const auto& lo = a_first ? da : db;
      const auto& hi = a_first ? db : da;
      c.lo_y = lo.y;
      c.lo_x = lo.x;
      c.hi_y = hi.y;
      c.hi_x = hi.x;
      cands.push_back(c);
    }
  auto better = [](const Cand& p, const Cand& q) {
    if (p.sum != q.sum) return p.sum > q.sum;
    if (p.dist != q.dist) return p.dist < q.dist;
    if (p.lo_y != q.lo_y) return p.lo_y < q.lo_y;
    if (p.lo_x != q.lo_x) return p.lo_x < q.lo_x;
    if (p.hi_y != q.hi_y) return p.hi_y < q.hi_y;
    return p.hi_x < q.hi_x;
  };
  std::vector<mitodet::Detection> out;
  for (;;) {
    int pick = -1;
    for (size_t c = 0; c < cands.size(); ++c)
      if (cands[c].alive && (pick < 0 || better(cands[c], cands[size_t(pick)])))
        pick = int(c);
    if (pick < 0) break;
    const Cand chosen = cands[size_t(pick)];
    for (auto& c : cands)
      if (c.i == chosen.i || c.j == chosen.j) c.alive = false;
    mitodet::Detection d;
    d.x = 0.5 * (a.detections[size_t(chosen.i)].x + b.detections[size_t(chosen.j)].x);
    d.y = 0.5 * (a.detections[size_t(chosen.i)].y + b.detections[size_t(chosen.j)].y);
    d.score = 0.5f * (a.detections[size_t(chosen.i)].score +
                      b.detections[size_t(chosen.j)].score);
    out.push_back(d);
  }
  std::sort(out.begin(), out.end(), [](const auto& p, const auto& q) {
    if (p.score != q.score) return p.score > q.score;
    if (p.y != q.y) return p.y < q.y;
    return p.x < q.x;
  });
  return out;
}

// Scratch directory under the system temp root, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("mitodet-" + tag + "-" + std::to_string(::getpid()));
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
};

}  // namespace oracle
