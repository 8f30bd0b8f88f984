#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <memory>

#include "mitodet/layers.hpp"
#include "mitodet/model.hpp"
#include "mitodet/rng.hpp"
#include "oracles.hpp"

using namespace mitodet;

namespace {

GTensor rand_tensor(Rng& r, int n, int o, int c, int h, int w) {
  GTensor t(n, o, c, h, w);
  for (auto& v : t.v) v = float(r.normal());
  return t;
}

KernelTensor rand_kernel(Rng& r, int io, int oc, int ic, int k) {
  KernelTensor kt(io, oc, ic, k, k);
  for (auto& v : kt.v) v = float(r.normal());
  return kt;
}

// Orientation relabel + spatial rotation: the action of one CCW quarter
// turn of the network input on a P4 feature map.
GTensor p4_rotate(const GTensor& t) { return orientation_roll(rot90(t, 1), 1); }

// Double-precision transcriptions of the two backward contracts, sharing
// only the kernel-slice convention with conv_ref.
struct BackwardRef {
  GTensor dx;
  std::vector<double> dk;
  std::vector<double> dbias;
};

BackwardRef conv_backward_ref(const GTensor& dy, const GTensor& x,
                              const KernelTensor& k, ConvKind kind,
                              int stride) {
  const int R = kind == ConvKind::Plain ? 1 : 4;
  BackwardRef ref;
  ref.dx = GTensor(x.n, x.o, x.c, x.h, x.w);
  std::vector<double> dxa(x.size(), 0.0);
  ref.dk.assign(k.size(), 0.0);
  ref.dbias.assign(size_t(k.oc), 0.0);
  const int n2 = k.kh;
  for (int b = 0; b < x.n; ++b)
    for (int r = 0; r < R; ++r)
      for (int oc = 0; oc < k.oc; ++oc) {
        for (int y = 0; y < dy.h; ++y)
          for (int xo = 0; xo < dy.w; ++xo)
            ref.dbias[size_t(oc)] += dy.at(b, r, oc, y, xo);
        for (int s = 0; s < x.o; ++s)
          for (int ic = 0; ic < x.c; ++ic) {
            const int ks = kind == ConvKind::Group ? ((s - r) & 3) : s;
            std::vector<double> plane(size_t(n2) * n2);
            for (int i = 0; i < n2 * n2; ++i)
              plane[i] = k.at(ks, oc, ic, i / n2, i % n2);
            plane = oracle::rot_ccw_n(plane, n2, r);
            std::vector<double> dplane(size_t(n2) * n2, 0.0);
            for (int y = 0; y < dy.h; ++y)
              for (int xo = 0; xo < dy.w; ++xo) {
                const double g = dy.at(b, r, oc, y, xo);
                for (int ky = 0; ky < n2; ++ky)
                  for (int kx = 0; kx < n2; ++kx) {
                    dxa[x.idx(b, s, ic, y * stride + ky, xo * stride + kx)] +=
                        g * plane[size_t(ky) * n2 + kx];
                    dplane[size_t(ky) * n2 + kx] +=
                        g * x.at(b, s, ic, y * stride + ky, xo * stride + kx);
                  }
              }
            // The loss saw the plane rotated r times CCW, so rotate the
            // gradient back.
            dplane = oracle::rot_ccw_n(dplane, n2, (4 - r) & 3);
            for (int i = 0; i < n2 * n2; ++i)
              ref.dk[k.idx(ks, oc, ic, i / n2, i % n2)] += dplane[i];
          }
      }
  for (size_t i = 0; i < dxa.size(); ++i) ref.dx.v[i] = float(dxa[i]);
  return ref;
}

struct ConvCase {
  ConvKind kind;
  int io, xo;
};

const ConvCase kConvCases[] = {
    {ConvKind::Lift, 1, 1}, {ConvKind::Group, 4, 4}, {ConvKind::Plain, 1, 1}};

}  // namespace

TEST_CASE("conv_forward matches the naive double oracle") {
  Rng r(101);
  for (const auto& cc : kConvCases)
    for (int kernel : {1, 2, 3})
      for (int stride : {1, 2}) {
        const int h = 3 * stride + kernel;  // 4 output rows at stride 1
        const GTensor x = rand_tensor(r, 2, cc.xo, 3, h, h + stride);
        KernelTensor k = rand_kernel(r, cc.io, 2, 3, kernel);
        std::vector<float> bias = {0.3f, -1.1f};
        const GTensor got = conv_forward(x, k, cc.kind, stride, &bias);
        const GTensor want = oracle::conv_ref(x, k, &bias, cc.kind, stride);
        CHECK(got.same_shape(want));
        CHECK(oracle::max_abs_diff(got, want) < 1e-4);
        const GTensor nobias = conv_forward(x, k, cc.kind, stride);
        const GTensor nobias_want = oracle::conv_ref(x, k, nullptr, cc.kind, stride);
        CHECK(oracle::max_abs_diff(nobias, nobias_want) < 1e-4);
      }
}

TEST_CASE("conv backward matches the transcribed gradient oracle") {
  Rng r(102);
  for (const auto& cc : kConvCases)
    for (int kernel : {2, 3})
      for (int stride : {1, 2}) {
        const int h = 2 * stride + kernel;
        const GTensor x = rand_tensor(r, 2, cc.xo, 2, h, h);
        KernelTensor k = rand_kernel(r, cc.io, 3, 2, kernel);
        const GTensor y = conv_forward(x, k, cc.kind, stride);
        GTensor dy = y;
        for (auto& v : dy.v) v = float(r.normal());

        const GTensor dx = conv_backward_input(dy, k, cc.kind, stride, x.h, x.w, x.o);
        KernelTensor dk(k.io, k.oc, k.ic, k.kh, k.kw);
        std::vector<float> dbias(size_t(k.oc), 0.0f);
        conv_backward_params(dy, x, cc.kind, stride, dk, &dbias);

        const BackwardRef ref = conv_backward_ref(dy, x, k, cc.kind, stride);
        CHECK(oracle::max_abs_diff(dx, ref.dx) < 1e-4);
        for (size_t i = 0; i < dk.size(); ++i)
          CHECK(std::fabs(double(dk.v[i]) - ref.dk[i]) < 1e-4);
        for (size_t i = 0; i < dbias.size(); ++i)
          CHECK(std::fabs(double(dbias[i]) - ref.dbias[i]) < 1e-4);

        // Parameter gradients accumulate across calls.
        conv_backward_params(dy, x, cc.kind, stride, dk, &dbias);
        for (size_t i = 0; i < dk.size(); ++i)
          CHECK(std::fabs(double(dk.v[i]) - 2.0 * ref.dk[i]) < 2e-4);
      }
}

TEST_CASE("lift and group convs are P4 equivariant") {
  Rng r(103);
  for (int trial = 0; trial < 10; ++trial) {
    const GTensor img = rand_tensor(r, 1, 1, 3, 11, 11);
    KernelTensor lk = rand_kernel(r, 1, 4, 3, 3);
    const GTensor y = conv_forward(img, lk, ConvKind::Lift, 1);
    const GTensor y_rot = conv_forward(rot90(img, 1), lk, ConvKind::Lift, 1);
    CHECK(oracle::max_abs_diff(y_rot, p4_rotate(y)) < 1e-4);

    KernelTensor gk = rand_kernel(r, 4, 4, 4, 3);
    for (auto& v : gk.v) v *= 0.1f;  // fan-in scale keeps activations O(1)
    const GTensor z = conv_forward(y, gk, ConvKind::Group, 1);
    const GTensor z_rot = conv_forward(p4_rotate(y), gk, ConvKind::Group, 1);
    CHECK(oracle::max_abs_diff(z_rot, p4_rotate(z)) < 1e-4);
  }
}

TEST_CASE("strided group conv stays equivariant when the stride divides") {
  Rng r(104);
  const GTensor x = rand_tensor(r, 1, 4, 2, 10, 10);  // (10-2) % 2 == 0
  KernelTensor k = rand_kernel(r, 4, 3, 2, 2);
  const GTensor y = conv_forward(x, k, ConvKind::Group, 2);
  const GTensor y_rot = conv_forward(p4_rotate(x), k, ConvKind::Group, 2);
  CHECK(oracle::max_abs_diff(y_rot, p4_rotate(y)) < 1e-4);
}

TEST_CASE("orientation pool, bn and relu commute with the P4 action") {
  Rng r(105);
  const GTensor x = rand_tensor(r, 2, 4, 3, 7, 7);

  const GTensor pooled = orientation_max_pool(x);
  const GTensor pooled_rot = orientation_max_pool(p4_rotate(x));
  CHECK(oracle::max_abs_diff(pooled_rot, rot90(pooled, 1)) == 0.0);

  BatchNormLayer bn(3, "bn");
  for (auto& v : bn.scale()) v = 1.3f;
  for (auto& v : bn.shift()) v = -0.2f;
  const GTensor bn_then_rot = p4_rotate(bn.forward(x, Mode::Train));
  const GTensor rot_then_bn = bn.forward(p4_rotate(x), Mode::Train);
  CHECK(oracle::max_abs_diff(rot_then_bn, bn_then_rot) < 1e-5);

  ReluLayer relu;
  const GTensor a = p4_rotate(relu.forward(x, Mode::Train));
  const GTensor b = relu.forward(p4_rotate(x), Mode::Train);
  CHECK(oracle::max_abs_diff(a, b) == 0.0);
}

TEST_CASE("center_crop keeps the interior") {
  Rng r(106);
  const GTensor x = rand_tensor(r, 2, 4, 2, 8, 9);
  const GTensor c = center_crop(x, 2);
  CHECK(c.h == 4);
  CHECK(c.w == 5);
  for (int b = 0; b < 2; ++b)
    for (int o = 0; o < 4; ++o)
      for (int ch = 0; ch < 2; ++ch)
        for (int y = 0; y < 4; ++y)
          for (int xo = 0; xo < 5; ++xo)
            CHECK(c.at(b, o, ch, y, xo) == x.at(b, o, ch, y + 2, xo + 2));
}

TEST_CASE("orientation_max_pool takes the max with lowest-index ties") {
  GTensor x(1, 4, 1, 1, 2);
  x.at(0, 0, 0, 0, 0) = 1.0f;
  x.at(0, 1, 0, 0, 0) = 3.0f;
  x.at(0, 2, 0, 0, 0) = 3.0f;
  x.at(0, 3, 0, 0, 0) = -1.0f;
  for (int o = 0; o < 4; ++o) x.at(0, o, 0, 0, 1) = 2.0f;
  std::vector<uint8_t> argmax;
  const GTensor y = orientation_max_pool(x, &argmax);
  CHECK(y.o == 1);
  CHECK(y.at(0, 0, 0, 0, 0) == 3.0f);
  CHECK(y.at(0, 0, 0, 0, 1) == 2.0f);
  REQUIRE(argmax.size() == 2);
  CHECK(argmax[0] == 1);  // first of the tied orientations
  CHECK(argmax[1] == 0);
}

TEST_CASE("softmax2_map returns the positive-class probability") {
  GTensor logits(1, 1, 2, 1, 3);
  const float l0[3] = {0.0f, 2.0f, -30.0f};
  const float l1[3] = {0.0f, -1.0f, 30.0f};
  for (int i = 0; i < 3; ++i) {
    logits.at(0, 0, 0, 0, i) = l0[i];
    logits.at(0, 0, 1, 0, i) = l1[i];
  }
  const GTensor p = softmax2_map(logits);
  CHECK(p.c == 1);
  for (int i = 0; i < 3; ++i) {
    const double want = 1.0 / (1.0 + std::exp(double(l0[i]) - l1[i]));
    CHECK(double(p.at(0, 0, 0, 0, i)) == doctest::Approx(want).epsilon(1e-6));
  }
}

TEST_CASE("finite differences validate every primitive layer") {
  Rng r(107);
  auto fill = [&](KernelTensor& k) { for (auto& v : k.v) v = float(r.normal()); };

  {
    ConvLayer L(ConvKind::Lift, 3, 4, 3, 1, false, "k");
    fill(L.kernel());
    CHECK(oracle::fd_worst(L, rand_tensor(r, 2, 1, 3, 7, 7), 11) < 1e-3);
  }
  {
    ConvLayer L(ConvKind::Group, 3, 4, 3, 1, true, "k");
    fill(L.kernel());
    CHECK(oracle::fd_worst(L, rand_tensor(r, 2, 4, 3, 7, 7), 12) < 1e-3);
  }
  {
    ConvLayer L(ConvKind::Group, 3, 4, 2, 2, false, "k");
    fill(L.kernel());
    CHECK(oracle::fd_worst(L, rand_tensor(r, 2, 4, 3, 8, 8), 13) < 1e-3);
  }
  {
    ConvLayer L(ConvKind::Plain, 3, 4, 1, 1, true, "k");
    fill(L.kernel());
    CHECK(oracle::fd_worst(L, rand_tensor(r, 2, 1, 3, 5, 5), 14) < 1e-3);
  }
  {
    BatchNormLayer L(3, "bn");
    for (auto& v : L.scale()) v = 0.5f + float(r.uniform());
    for (auto& v : L.shift()) v = float(r.normal());
    CHECK(oracle::fd_worst(L, rand_tensor(r, 3, 4, 3, 5, 5), 15) < 1e-3);
  }
  {
    ReluLayer L;
    CHECK(oracle::fd_worst(L, rand_tensor(r, 2, 4, 3, 5, 5), 16) < 1e-3);
  }
  {
    OrientMaxPoolLayer L;
    CHECK(oracle::fd_worst(L, rand_tensor(r, 2, 4, 3, 5, 5), 17) < 1e-3);
  }
}

namespace {

// Rebuilds a residual block from primitive layers sharing its parameters;
// forward/backward must agree bit for bit.
struct MirrorBlock {
  std::vector<std::unique_ptr<Layer>> path;
  int crop;

  explicit MirrorBlock(int channels, bool bottleneck)
      : crop(bottleneck ? 1 : 2) {
    if (bottleneck) {
      const int inner = std::max(1, channels / 4);
      path.push_back(std::make_unique<BatchNormLayer>(channels, "bn1"));
      path.push_back(std::make_unique<ReluLayer>());
      path.push_back(std::make_unique<ConvLayer>(ConvKind::Group, channels,
                                                 inner, 1, 1, false, "conv1"));
      path.push_back(std::make_unique<BatchNormLayer>(inner, "bn2"));
      path.push_back(std::make_unique<ReluLayer>());
      path.push_back(std::make_unique<ConvLayer>(ConvKind::Group, inner, inner,
                                                 3, 1, false, "conv2"));
      path.push_back(std::make_unique<BatchNormLayer>(inner, "bn3"));
      path.push_back(std::make_unique<ReluLayer>());
      path.push_back(std::make_unique<ConvLayer>(ConvKind::Group, inner,
                                                 channels, 1, 1, false, "conv3"));
    } else {
      path.push_back(std::make_unique<BatchNormLayer>(channels, "bn1"));
      path.push_back(std::make_unique<ReluLayer>());
      path.push_back(std::make_unique<ConvLayer>(ConvKind::Group, channels,
                                                 channels, 3, 1, false, "conv1"));
      path.push_back(std::make_unique<BatchNormLayer>(channels, "bn2"));
      path.push_back(std::make_unique<ReluLayer>());
      path.push_back(std::make_unique<ConvLayer>(ConvKind::Group, channels,
                                                 channels, 3, 1, false, "conv2"));
    }
  }

  GTensor forward(const GTensor& x, Mode mode) {
    GTensor t = x;
    for (auto& l : path) t = l->forward(t, mode);
    const GTensor sc = center_crop(x, crop);
    for (size_t i = 0; i < t.size(); ++i) t.v[i] += sc.v[i];
    return t;
  }

  GTensor backward(const GTensor& dy) {
    GTensor d = dy;
    for (auto it = path.rbegin(); it != path.rend(); ++it) d = (*it)->backward(d);
    for (int b = 0; b < dy.n; ++b)
      for (int o = 0; o < dy.o; ++o)
        for (int c = 0; c < dy.c; ++c)
          for (int y = 0; y < dy.h; ++y)
            for (int x = 0; x < dy.w; ++x)
              d.at(b, o, c, y + crop, x + crop) += dy.at(b, o, c, y, x);
    return d;
  }

  std::vector<ParamRef> params() {
    std::vector<ParamRef> ps;
    for (auto& l : path) l->collect_params("m.", ps);
    return ps;
  }
};

void check_block_against_mirror(bool bottleneck) {
  const int channels = 8;
  ResidualBlock block(channels, bottleneck, "b");
  MirrorBlock mirror(channels, bottleneck);

  std::vector<ParamRef> bp, mp;
  block.collect_params("", bp);
  mp = mirror.params();
  REQUIRE(bp.size() == mp.size());
  Rng ri(9);
  for (size_t i = 0; i < bp.size(); ++i) {
    REQUIRE(bp[i].shape == mp[i].shape);
    if (bp[i].shape.size() == 5)
      for (auto& v : *bp[i].value) v = float(ri.normal() * 0.2);
    *mp[i].value = *bp[i].value;
  }

  Rng r(77);
  const int side = bottleneck ? 7 : 9;
  const GTensor x = rand_tensor(r, 2, 4, channels, side, side);
  const GTensor yb = block.forward(x, Mode::Train);
  const GTensor ym = mirror.forward(x, Mode::Train);
  CHECK(yb.v == ym.v);

  GTensor dy = yb;
  for (auto& v : dy.v) v = float(r.normal());
  for (auto& p : bp)
    if (p.grad) std::fill(p.grad->begin(), p.grad->end(), 0.0f);
  for (auto& p : mp)
    if (p.grad) std::fill(p.grad->begin(), p.grad->end(), 0.0f);
  const GTensor dxb = block.backward(dy);
  const GTensor dxm = mirror.backward(dy);
  CHECK(dxb.v == dxm.v);
  for (size_t i = 0; i < bp.size(); ++i)
    if (bp[i].grad) CHECK(*bp[i].grad == *mp[i].grad);
}

}  // namespace

TEST_CASE("basic residual block equals its primitive mirror") {
  check_block_against_mirror(false);
}

TEST_CASE("bottleneck residual block equals its primitive mirror") {
  check_block_against_mirror(true);
}

TEST_CASE("presets report the published geometry") {
  const ModelConfig desk = desk_config();
  CHECK(desk.receptive_field == 78);
  CHECK(desk.output_stride == 8);
  desk.validate();

  const ModelConfig paper = paper_config();
  CHECK(paper.receptive_field == 78);
  CHECK(paper.output_stride == 8);
  paper.validate();
  CHECK(int(layer_chain(paper).size()) == 70);
}

TEST_CASE("receptive_field matches hand-expanded chains") {
  // rf = 1 + sum (k-1) * prod of earlier strides; stride = prod of strides.
  using Chain = std::vector<std::pair<int, int>>;
  struct Case {
    Chain chain;
    int rf, stride;
  };
  const Case cases[] = {
      {{{3, 1}}, 3, 1},
      {{{1, 1}}, 1, 1},
      {{{3, 1}, {3, 1}}, 5, 1},
      {{{3, 2}}, 3, 2},
      {{{3, 2}, {3, 1}}, 7, 2},
      {{{2, 2}, {2, 2}}, 4, 4},
      {{{3, 1}, {2, 2}, {3, 1}}, 8, 2},
      {{{5, 1}, {3, 3}, {3, 1}}, 13, 3},
      {{{7, 2}, {3, 2}, {3, 2}, {3, 1}}, 35, 8},
      {{{3, 1}, {3, 1}, {2, 2}, {3, 1}, {3, 1}, {2, 2}, {3, 1}}, 24, 4},
  };
  for (const auto& c : cases) {
    const auto [rf, stride] = receptive_field(c.chain);
    CHECK(rf == c.rf);
    CHECK(stride == c.stride);
  }
}

TEST_CASE("model config json and fingerprint round trip") {
  const ModelConfig cfg = desk_config();
  const ModelConfig back = ModelConfig::from_json_text(cfg.to_json_text());
  CHECK(back.to_json_text() == cfg.to_json_text());
  CHECK(back.fingerprint() == cfg.fingerprint());
  CHECK(back.fingerprint() != paper_config().fingerprint());
}

TEST_CASE("patch logits are invariant under quarter turns") {
  Model model(desk_config());
  Rng r(301);
  model.init_params(r);
  const int rf = model.config().receptive_field;
  ImageU8 patch(rf, rf);
  for (auto& p : patch.pixels) p = uint8_t(r.uniform_int(0, 255));

  const auto base = model.forward_patch(patch);
  ImageU8 turned = patch;
  for (int k = 1; k <= 3; ++k) {
    turned = rot90_ccw(turned);
    const auto got = model.forward_patch(turned);
    CHECK(std::fabs(got[0] - base[0]) < 1e-4);
    CHECK(std::fabs(got[1] - base[1]) < 1e-4);
  }
}

TEST_CASE("whole-model dense output rotates with the image") {
  ModelConfig cfg = desk_config();
  Model model(cfg);
  Rng r(302);
  model.init_params(r);
  const int rf = cfg.receptive_field;
  const int side = rf + 2 * cfg.output_stride;  // 3x3 output map
  ImageU8 img(side, side);
  for (auto& p : img.pixels) p = uint8_t(r.uniform_int(0, 255));

  const GTensor y = model.forward(image_to_tensor(img), Mode::Eval);
  const GTensor y_rot =
      model.forward(image_to_tensor(rot90_ccw(img)), Mode::Eval);
  CHECK(oracle::max_abs_diff(y_rot, rot90(y, 1)) < 1e-4);
}

TEST_CASE("image_to_tensor scales to unit range") {
  ImageU8 img(2, 1);
  img.px(0, 0)[0] = 0;
  img.px(0, 0)[1] = 255;
  img.px(0, 0)[2] = 51;
  const GTensor t = image_to_tensor(img);
  CHECK(t.n == 1);
  CHECK(t.o == 1);
  CHECK(t.c == 3);
  CHECK(t.at(0, 0, 0, 0, 0) == 0.0f);
  CHECK(t.at(0, 0, 1, 0, 0) == 1.0f);
  CHECK(t.at(0, 0, 2, 0, 0) == doctest::Approx(0.2).epsilon(1e-6));

  std::vector<ImageU8> batch = {img, img};
  const GTensor b = patches_to_tensor(batch);
  CHECK(b.n == 2);
  CHECK(b.at(1, 0, 1, 0, 0) == 1.0f);
}

TEST_CASE("model init is seed-deterministic and forward is repeatable") {
  const ModelConfig cfg = desk_config();
  Model a(cfg), b(cfg);
  Rng ra(9), rb(9);
  a.init_params(ra);
  b.init_params(rb);
  REQUIRE(a.params().size() == b.params().size());
  for (size_t i = 0; i < a.params().size(); ++i)
    CHECK(*a.params()[i].value == *b.params()[i].value);

  Rng r(10);
  const GTensor x = rand_tensor(r, 1, 1, 3, 78, 78);
  const GTensor y1 = a.forward(x, Mode::Eval);
  const GTensor y2 = a.forward(x, Mode::Eval);
  CHECK(y1.v == y2.v);
}
