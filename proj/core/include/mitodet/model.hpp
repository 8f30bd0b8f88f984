#pragma once

#include <array>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "mitodet/image.hpp"
#include "mitodet/layers.hpp"
#include "mitodet/rng.hpp"
#include "mitodet/tensor.hpp"

namespace mitodet {

struct StageConfig {
  int blocks = 0;       // residual blocks after the downsampling conv
  int channels = 0;     // stage width
  int down_kernel = 2;  // downsampling group conv
  int down_stride = 2;
};

struct ModelConfig {
  int stem_kernel = 3;
  int stem_channels = 8;
  std::vector<StageConfig> stages;
  bool bottleneck = false;  // bottleneck (1x1-3x3-1x1) vs basic (3x3-3x3) blocks
  int head_channels = 16;
  int receptive_field = 0;  // declared; validate() checks it against the chain
  int output_stride = 0;

  void validate() const;
  std::string to_json_text() const;
  static ModelConfig from_json_text(const std::string& text);
  // Stable hex digest of the canonical config JSON, stored in weights files.
  std::string fingerprint() const;
};

// Compact desk-scale preset: rf 78, stride 8, cheap enough to train in
// minutes on one core.
ModelConfig desk_config();
// Preset matching the published constraints: 70 parameterized conv layers
// and rf 78. Channel widths are chosen, not published.
ModelConfig paper_config();

// (kernel, stride) chain of every conv in the assembled network, in order.
std::vector<std::pair<int, int>> layer_chain(const ModelConfig& cfg);
// rf = 1 + sum_i (k_i - 1) * prod_{j<i} s_j; stride = prod_i s_i.
std::pair<int, int> receptive_field(const std::vector<std::pair<int, int>>& chain);

// u8 RGB image -> [1][1][3][h][w] tensor, values scaled to [0,1].
GTensor image_to_tensor(const ImageU8& img);
// Batch of equally sized patches -> [n][1][3][h][w].
GTensor patches_to_tensor(const std::vector<ImageU8>& patches);

class Model {
 public:
  explicit Model(ModelConfig cfg);

  // He fan-in initialization (kernels scaled by 1/sqrt(in_orientations)).
  void init_params(Rng& rng);

  // Input [n][1][3][h][w] in [0,1]; output logits [n][1][2][oh][ow].
  GTensor forward(const GTensor& x, Mode mode);
  // Upstream gradient w.r.t. logits; returns input gradient. Requires a
  // preceding forward(Mode::Train).
  GTensor backward(const GTensor& dlogits);

  // Patch with side = receptive field; eval mode; returns the 2 logits.
  std::array<float, 2> forward_patch(const ImageU8& patch);

  std::vector<ParamRef>& params() { return params_; }
  const std::vector<ParamRef>& params() const { return params_; }
  void zero_grads();
  const ModelConfig& config() const { return cfg_; }

 private:
  ModelConfig cfg_;
  std::vector<std::unique_ptr<Layer>> layers_;
  std::vector<ParamRef> params_;
};

}  // namespace mitodet
