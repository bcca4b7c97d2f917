#pragma once

#include <map>
#include <string>
#include <vector>

#include "ccseg/tensor.hpp"

namespace ccseg {

class Rng;

/// Named learnable tensors of one block plus its channel/stride geometry.
/// The map is ordered, so iteration (and therefore checkpoint layout) is stable.
struct BlockParams {
  std::map<std::string, Tensor> tensors;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t stride = 1;

  /// Throws ShapeError if `name` is missing or does not have `shape`.
  const Tensor& get(const std::string& name, const Shape& shape) const;
  const Tensor& get(const std::string& name) const;
  void set(const std::string& name, Tensor value);
  std::size_t parameter_count() const;
};

struct SimamConfig {
  double lambda = 1e-4;
  void validate() const;
};

/// Groups used by every group normalisation: the largest divisor of
/// `channels` not exceeding 8.
std::size_t norm_groups(std::size_t channels);

/// Uniform in [-sqrt(1/fan_in), sqrt(1/fan_in)], requires_grad set.
Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng);

/// Parameter-free attention. Per channel, with mu the spatial mean,
/// d_t = (x_t - mu)^2, v = sum(d) / (HW - 1):
///   a_t = sigmoid(d_t / (4 (v + lambda)) + 0.5),  out_t = x_t * a_t.
Tensor simam(const Tensor& x, const SimamConfig& cfg = {});
/// The coefficients a_t of simam(), without gradient tracking.
Tensor simam_coefficients(const Tensor& x, const SimamConfig& cfg = {});

/// Plain k x k convolution parameters "w" (out x in x k x k) and "b".
BlockParams init_conv(std::size_t in, std::size_t out, std::size_t kernel, Rng& rng);
Tensor conv_forward(const Tensor& x, const BlockParams& params, std::size_t kernel, std::size_t stride,
                    std::size_t padding);

/// 3x3 stride-2 convolution (pad 1) + bias, group normalisation, ReLU.
BlockParams init_cnn_down(std::size_t in, std::size_t out, Rng& rng);
Tensor cnn_down(const Tensor& x, const BlockParams& params);

inline constexpr std::size_t kMbconvExpansion = 4;

/// Inverted residual: 1x1 expansion (x4) + norm + ReLU, depthwise 3x3 at
/// `stride` + norm + ReLU, 1x1 linear projection + norm. The input is added
/// back when stride == 1 and in == out.
BlockParams init_mbconv(std::size_t in, std::size_t out, std::size_t stride, Rng& rng);
Tensor mbconv(const Tensor& x, const BlockParams& params, std::size_t stride);

struct TransformerConfig {
  std::size_t patch = 4;
  std::size_t heads = 2;
  std::size_t layers = 1;
};

/// Parameters for a block over C x height x width feature maps. Model width is C.
BlockParams init_transformer(std::size_t channels, std::size_t height, std::size_t width,
                             const TransformerConfig& cfg, Rng& rng);
/// Patchify -> pre-norm encoder layer(s) -> un-patchify. Returns x plus the
/// projected sum of the attention and MLP updates, so zero attention/MLP
/// weights give back x exactly.
Tensor transformer_block(const Tensor& x, const BlockParams& params, const TransformerConfig& cfg,
                         std::vector<Tensor>* attention = nullptr);

/// Upsample x2 (nearest) -> concat skip on channels -> 3x3 conv + bias -> norm -> ReLU.
BlockParams init_decoder(std::size_t in, std::size_t skip, std::size_t out, Rng& rng);
Tensor decoder_block(const Tensor& x, const Tensor& skip, const BlockParams& params);

}  // namespace ccseg
