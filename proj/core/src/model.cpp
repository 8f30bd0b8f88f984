#include "mitodet/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json_detail.hpp"

namespace mitodet {

void ModelConfig::validate() const {
  if (stem_kernel < 1 || stem_channels < 1)
    throw ValidationError("model config: invalid stem");
  if (stages.empty()) throw ValidationError("model config: no stages");
  for (const auto& s : stages) {
    if (s.blocks < 0 || s.channels < 1 || s.down_kernel < 1 || s.down_stride < 1)
      throw ValidationError("model config: invalid stage");
    if (bottleneck && s.channels < 4)
      throw ValidationError("model config: bottleneck stages need >= 4 channels");
  }
  if (head_channels < 1) throw ValidationError("model config: invalid head");
  const auto [rf, stride] = mitodet::receptive_field(layer_chain(*this));
  if (receptive_field != 0 && receptive_field != rf)
    throw ValidationError("model config: declared receptive_field " +
                          std::to_string(receptive_field) +
                          " but layer chain yields " + std::to_string(rf));
  if (output_stride != 0 && output_stride != stride)
    throw ValidationError("model config: declared output_stride " +
                          std::to_string(output_stride) +
                          " but layer chain yields " + std::to_string(stride));
}

void to_json(json& j, const StageConfig& s) {
  j = json{{"blocks", s.blocks},
           {"channels", s.channels},
           {"down_kernel", s.down_kernel},
           {"down_stride", s.down_stride}};
}

void from_json(const json& j, StageConfig& s) {
  s.blocks = j.at("blocks").get<int>();
  s.channels = j.at("channels").get<int>();
  s.down_kernel = j.at("down_kernel").get<int>();
  s.down_stride = j.at("down_stride").get<int>();
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"stem_kernel", c.stem_kernel},
           {"stem_channels", c.stem_channels},
           {"stages", c.stages},
           {"bottleneck", c.bottleneck},
           {"head_channels", c.head_channels}};
  const auto [rf, stride] = mitodet::receptive_field(layer_chain(c));
  j["receptive_field"] = rf;
  j["output_stride"] = stride;
}

void from_json(const json& j, ModelConfig& c) {
  c.stem_kernel = j.at("stem_kernel").get<int>();
  c.stem_channels = j.at("stem_channels").get<int>();
  c.stages = j.at("stages").get<std::vector<StageConfig>>();
  c.bottleneck = j.value("bottleneck", false);
  c.head_channels = j.at("head_channels").get<int>();
  c.receptive_field = j.value("receptive_field", 0);
  c.output_stride = j.value("output_stride", 0);
  c.validate();
}

std::string ModelConfig::to_json_text() const {
  return json(*this).dump(2) + "\n";
}

ModelConfig ModelConfig::from_json_text(const std::string& text) {
  return json::parse(text).get<ModelConfig>();
}

std::string ModelConfig::fingerprint() const {
  const std::string s = json(*this).dump();
  // FNV-1a, 64 bit
  uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

ModelConfig desk_config() {
  ModelConfig c;
  c.stem_kernel = 3;
  c.stem_channels = 8;
  c.stages = {{0, 8, 2, 2}, {0, 12, 4, 2}, {2, 20, 2, 2}};
  c.bottleneck = false;
  c.head_channels = 16;
  c.receptive_field = 78;
  c.output_stride = 8;
  c.validate();
  return c;
}

ModelConfig paper_config() {
  ModelConfig c;
  c.stem_kernel = 3;
  c.stem_channels = 16;
  c.stages = {{16, 32, 1, 1}, {3, 64, 2, 2}, {1, 128, 2, 2}, {1, 256, 2, 2}};
  c.bottleneck = true;
  c.head_channels = 64;
  c.receptive_field = 78;
  c.output_stride = 8;
  c.validate();
  return c;
}

std::vector<std::pair<int, int>> layer_chain(const ModelConfig& cfg) {
  std::vector<std::pair<int, int>> chain;
  chain.emplace_back(cfg.stem_kernel, 1);
  for (const auto& s : cfg.stages) {
    chain.emplace_back(s.down_kernel, s.down_stride);
    for (int b = 0; b < s.blocks; ++b) {
      if (cfg.bottleneck) {
        chain.emplace_back(1, 1);
        chain.emplace_back(3, 1);
        chain.emplace_back(1, 1);
      } else {
        chain.emplace_back(3, 1);
        chain.emplace_back(3, 1);
      }
    }
  }
  chain.emplace_back(1, 1);  // head conv 1
  chain.emplace_back(1, 1);  // head conv 2
  return chain;
}

std::pair<int, int> receptive_field(
    const std::vector<std::pair<int, int>>& chain) {
  long rf = 1;
  long stride = 1;
  for (const auto& [k, s] : chain) {
    rf += long(k - 1) * stride;
    stride *= s;
  }
  return {static_cast<int>(rf), static_cast<int>(stride)};
}

GTensor image_to_tensor(const ImageU8& img) {
  GTensor t(1, 1, 3, img.height, img.width);
  const size_t plane = t.plane();
  for (int c = 0; c < 3; ++c) {
    float* p = t.plane_ptr(0, 0, c);
    for (size_t i = 0; i < plane; ++i) {
      p[i] = float(img.pixels[i * 3 + c]) / 255.0f;
    }
  }
  return t;
}

GTensor patches_to_tensor(const std::vector<ImageU8>& patches) {
  if (patches.empty()) throw ValidationError("patches_to_tensor: empty batch");
  const int h = patches[0].height, w = patches[0].width;
  GTensor t(static_cast<int>(patches.size()), 1, 3, h, w);
  for (size_t b = 0; b < patches.size(); ++b) {
    const ImageU8& img = patches[b];
    if (img.height != h || img.width != w)
      throw ValidationError("patches_to_tensor: mixed patch sizes");
    for (int c = 0; c < 3; ++c) {
      float* p = t.plane_ptr(static_cast<int>(b), 0, c);
      for (size_t i = 0; i < t.plane(); ++i) {
        p[i] = float(img.pixels[i * 3 + c]) / 255.0f;
      }
    }
  }
  return t;
}

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  layers_.push_back(std::make_unique<ConvLayer>(ConvKind::Lift, 3,
                                                cfg_.stem_channels,
                                                cfg_.stem_kernel, 1, false,
                                                "stem"));
  int ch = cfg_.stem_channels;
  for (size_t i = 0; i < cfg_.stages.size(); ++i) {
    const StageConfig& s = cfg_.stages[i];
    const std::string sp = "s" + std::to_string(i);
    layers_.push_back(std::make_unique<ConvLayer>(ConvKind::Group, ch,
                                                  s.channels, s.down_kernel,
                                                  s.down_stride, false,
                                                  sp + ".down"));
    ch = s.channels;
    for (int b = 0; b < s.blocks; ++b) {
      layers_.push_back(std::make_unique<ResidualBlock>(
          ch, cfg_.bottleneck, sp + ".b" + std::to_string(b)));
    }
  }
  layers_.push_back(std::make_unique<BatchNormLayer>(ch, "final_bn"));
  layers_.push_back(std::make_unique<ReluLayer>());
  layers_.push_back(std::make_unique<OrientMaxPoolLayer>());
  layers_.push_back(std::make_unique<ConvLayer>(ConvKind::Plain, ch,
                                                cfg_.head_channels, 1, 1, true,
                                                "head.conv1"));
  layers_.push_back(std::make_unique<ReluLayer>());
  layers_.push_back(std::make_unique<ConvLayer>(ConvKind::Plain,
                                                cfg_.head_channels, 2, 1, 1,
                                                true, "head.conv2"));
  for (auto& l : layers_) l->collect_params("", params_);
}

void Model::init_params(Rng& rng) {
  for (ParamRef& p : params_) {
    if (p.shape.size() == 5) {
      // Kernel [io][oc][ic][kh][kw]: He fan-in over io*ic*kh*kw.
      const double fan_in =
          double(p.shape[0]) * p.shape[2] * p.shape[3] * p.shape[4];
      const double std = std::sqrt(2.0 / fan_in);
      for (float& v : *p.value) v = static_cast<float>(rng.normal(0.0, std));
    }
    // Biases and batch-norm state keep their constructed values.
  }
}

GTensor Model::forward(const GTensor& x, Mode mode) {
  GTensor t = x;
  for (auto& l : layers_) t = l->forward(t, mode);
  return t;
}

GTensor Model::backward(const GTensor& dlogits) {
  GTensor d = dlogits;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
    d = (*it)->backward(d);
  }
  return d;
}

std::array<float, 2> Model::forward_patch(const ImageU8& patch) {
  if (patch.width != cfg_.receptive_field ||
      patch.height != cfg_.receptive_field)
    throw ValidationError("forward_patch: patch is " +
                          std::to_string(patch.width) + "x" +
                          std::to_string(patch.height) + ", model expects " +
                          std::to_string(cfg_.receptive_field));
  const GTensor y = forward(image_to_tensor(patch), Mode::Eval);
  if (y.h != 1 || y.w != 1)
    throw ValidationError("forward_patch: network output is not 1x1");
  return {y.at(0, 0, 0, 0, 0), y.at(0, 0, 1, 0, 0)};
}

void Model::zero_grads() {
  for (ParamRef& p : params_) {
    if (p.grad) std::fill(p.grad->begin(), p.grad->end(), 0.0f);
  }
}

}  // namespace mitodet
