#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ccseg/dac.hpp"
#include "ccseg/nn.hpp"

namespace ccseg {

struct ModelConfig {
  std::size_t input_channels = 3;
  std::size_t num_levels = 5;
  std::vector<std::size_t> channels_per_level{16, 32, 64, 96, 128};
  TransformerConfig transformer;
  double simam_lambda = 1e-4;
  std::size_t image_size = 64;
  /// false replaces every fusion by a 1x1 convolution of the branch sum.
  bool dac_enabled = true;

  void validate() const;
};

struct EncoderLevel {
  BlockParams cnn;
  BlockParams mbconv;
  std::optional<DacLayer> dac;
  /// 1x1 convolution used instead of `dac` when fusion is disabled.
  BlockParams merge;
};

/// Encoder of five (cnn_down | mbconv) -> fuse levels, a transformer that
/// enriches the level-1 CNN features, a decoder back to full resolution and a
/// 1x1 softmax head.
struct Model {
  ModelConfig cfg;
  std::vector<EncoderLevel> levels;
  BlockParams transformer;
  /// Deepest stage first; the last stage takes the input image as its skip.
  std::vector<BlockParams> decoder;
  BlockParams head;

  using NamedTensor = std::pair<std::string, Tensor>;
  /// Every learnable tensor, in a fixed order. The tensors share storage with
  /// the model, so writing into them updates the model.
  std::vector<NamedTensor> named_parameters() const;
  std::size_t parameter_count() const;
};

Model build_model(const ModelConfig& cfg, std::uint64_t seed);

struct ForwardResult {
  Tensor probs;  // N x 2 x S x S, softmax over axis 1
  Tensor f5;     // deepest fused features, N x C5 x S/32 x S/32
};

ForwardResult forward(const Model& model, const Tensor& images);

}  // namespace ccseg
