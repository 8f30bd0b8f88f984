#pragma once

#include <array>
#include <memory>
#include <string>
#include <vector>

#include "mitodet/tensor.hpp"

namespace mitodet {

enum class Mode { Train, Eval };

enum class ConvKind {
  Lift,   // plain image (1 orientation) -> P4 map (4 orientations)
  Group,  // P4 -> P4
  Plain   // 1 -> 1 (used after orientation pooling)
};

// Named view of one parameter tensor plus its gradient buffer.
struct ParamRef {
  std::string name;
  std::vector<float>* value = nullptr;
  std::vector<float>* grad = nullptr;  // null for non-trainable state
  std::vector<int> shape;
  bool decay = false;      // weight decay applies
  bool trainable = false;  // false for batch-norm running stats
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual GTensor forward(const GTensor& x, Mode mode) = 0;
  // Valid only after a forward(Mode::Train) call; accumulates parameter
  // gradients into the layer's grad buffers and returns the input gradient.
  virtual GTensor backward(const GTensor& dy) = 0;
  virtual void collect_params(const std::string& prefix,
                              std::vector<ParamRef>& out) {
    (void)prefix;
    (void)out;
  }
};

// ---- functional primitives (stateless entry points used by tests) ----

// Valid cross-correlation. Lift: output orientation r is the correlation of
// the input with the kernel rotated by r*90 deg. Group: output orientation r
// sums over input orientations s the correlation of input[s] with kernel
// slice (s-r) mod 4 rotated by r*90 deg. No padding anywhere.
GTensor conv_forward(const GTensor& x, const KernelTensor& k, ConvKind kind,
                     int stride, const std::vector<float>* bias = nullptr);

// Gradients of conv_forward; dk/dbias are accumulated (+=).
GTensor conv_backward_input(const GTensor& dy, const KernelTensor& k,
                            ConvKind kind, int stride, int in_h, int in_w,
                            int in_o);
void conv_backward_params(const GTensor& dy, const GTensor& x, ConvKind kind,
                          int stride, KernelTensor& dk,
                          std::vector<float>* dbias);

GTensor center_crop(const GTensor& x, int margin);
// out[c] = max over orientations of in[o][c]; argmax (lowest index wins)
// optionally recorded for backward routing.
GTensor orientation_max_pool(const GTensor& x, std::vector<uint8_t>* argmax = nullptr);

// Mitosis probability per spatial site: softmax over the 2 logit channels,
// returning channel 1.
GTensor softmax2_map(const GTensor& logits);

// ---- layers ----

class ConvLayer : public Layer {
 public:
  ConvLayer(ConvKind kind, int in_channels, int out_channels, int kernel,
            int stride, bool with_bias, std::string name);

  GTensor forward(const GTensor& x, Mode mode) override;
  GTensor backward(const GTensor& dy) override;
  void collect_params(const std::string& prefix,
                      std::vector<ParamRef>& out) override;

  KernelTensor& kernel() { return kernel_; }
  ConvKind kind() const { return kind_; }
  int stride() const { return stride_; }
  int kernel_size() const { return kernel_.kh; }

 private:
  ConvKind kind_;
  int stride_;
  std::string name_;
  KernelTensor kernel_;
  KernelTensor kgrad_;
  bool with_bias_;
  std::vector<float> bias_, bgrad_;
  GTensor cached_x_;
  bool has_cache_ = false;
};

class BatchNormLayer : public Layer {
 public:
  BatchNormLayer(int channels, std::string name, float momentum = 0.1f,
                 float eps = 1e-5f);

  // Normalizes per channel over (batch, orientation, height, width) jointly;
  // orientation pooling in the statistics preserves P4 equivariance.
  GTensor forward(const GTensor& x, Mode mode) override;
  GTensor backward(const GTensor& dy) override;
  void collect_params(const std::string& prefix,
                      std::vector<ParamRef>& out) override;

  std::vector<float>& scale() { return scale_; }
  std::vector<float>& shift() { return shift_; }
  std::vector<float>& running_mean() { return run_mean_; }
  std::vector<float>& running_var() { return run_var_; }

 private:
  int channels_;
  std::string name_;
  float momentum_, eps_;
  std::vector<float> scale_, shift_, run_mean_, run_var_;
  std::vector<float> sgrad_, bgrad_;
  GTensor xhat_;
  std::vector<float> inv_std_;
  bool has_cache_ = false;
};

class ReluLayer : public Layer {
 public:
  GTensor forward(const GTensor& x, Mode mode) override;
  GTensor backward(const GTensor& dy) override;

 private:
  std::vector<uint8_t> mask_;
  bool has_cache_ = false;
};

class OrientMaxPoolLayer : public Layer {
 public:
  GTensor forward(const GTensor& x, Mode mode) override;
  GTensor backward(const GTensor& dy) override;

 private:
  std::vector<uint8_t> argmax_;
  int in_n_ = 0, in_o_ = 0, in_c_ = 0, in_h_ = 0, in_w_ = 0;
  bool has_cache_ = false;
};

// Pre-activation residual block with identity (center-crop) shortcut.
// basic:      BN-ReLU-3x3 - BN-ReLU-3x3, shortcut crops 2 px per side
// bottleneck: BN-ReLU-1x1 - BN-ReLU-3x3 - BN-ReLU-1x1, crops 1 px per side
class ResidualBlock : public Layer {
 public:
  ResidualBlock(int channels, bool bottleneck, std::string name);

  GTensor forward(const GTensor& x, Mode mode) override;
  GTensor backward(const GTensor& dy) override;
  void collect_params(const std::string& prefix,
                      std::vector<ParamRef>& out) override;

  int crop() const { return crop_; }

 private:
  std::string name_;
  int crop_;
  std::vector<std::unique_ptr<Layer>> path_;
};

}  // namespace mitodet
