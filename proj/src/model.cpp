#include "ccseg/model.hpp"

#include <string>

#include "ccseg/random.hpp"

namespace ccseg {

void ModelConfig::validate() const {
  if (input_channels == 0) throw ConfigError("model: input_channels must be positive");
  if (num_levels != 5) throw ConfigError("model: num_levels must be 5, got " + std::to_string(num_levels));
  if (channels_per_level.size() != num_levels) {
    throw ConfigError("model: channels_per_level needs " + std::to_string(num_levels) + " entries");
  }
  for (std::size_t i = 0; i < channels_per_level.size(); ++i) {
    if (channels_per_level[i] == 0) throw ConfigError("model: channel counts must be positive");
    if (i > 0 && channels_per_level[i] <= channels_per_level[i - 1]) {
      throw ConfigError("model: channels_per_level must be strictly increasing");
    }
  }
  const std::size_t factor = std::size_t{1} << num_levels;
  if (image_size == 0 || image_size % factor != 0) {
    throw ConfigError("model: image_size " + std::to_string(image_size) + " is not divisible by " +
                      std::to_string(factor));
  }
  if (image_size / factor < 2) throw ConfigError("model: deepest level would be 1x1; use image_size >= 64");
  const std::size_t level1 = image_size / 2;
  if (transformer.patch == 0 || level1 % transformer.patch != 0) {
    throw ConfigError("model: level-1 size " + std::to_string(level1) + " is not divisible by patch " +
                      std::to_string(transformer.patch));
  }
  if (transformer.heads == 0 || channels_per_level[0] % transformer.heads != 0) {
    throw ConfigError("model: level-1 channels must be divisible by the transformer heads");
  }
  if (transformer.layers == 0) throw ConfigError("model: transformer needs at least one layer");
  if (!(simam_lambda > 0.0)) throw ConfigError("model: simam_lambda must be positive");
}

Model build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(mix64(seed, 0x30DE1u));
  Model model;
  model.cfg = cfg;
  const auto& ch = cfg.channels_per_level;
  std::size_t in = cfg.input_channels;
  for (std::size_t i = 0; i < cfg.num_levels; ++i) {
    EncoderLevel level;
    level.cnn = init_cnn_down(in, ch[i], rng);
    level.mbconv = init_mbconv(in, ch[i], 2, rng);
    if (cfg.dac_enabled) {
      level.dac = init_dac(i + 1, ch[i], ch[i], ch[i], rng);
    } else {
      level.merge = init_conv(ch[i], ch[i], 1, rng);
    }
    model.levels.push_back(std::move(level));
    in = ch[i];
  }
  const std::size_t level1 = cfg.image_size / 2;
  model.transformer = init_transformer(ch[0], level1, level1, cfg.transformer, rng);
  for (std::size_t i = cfg.num_levels - 1; i > 0; --i) {
    model.decoder.push_back(init_decoder(ch[i], ch[i - 1], ch[i - 1], rng));
  }
  model.decoder.push_back(init_decoder(ch[0], cfg.input_channels, ch[0], rng));
  model.head = init_conv(ch[0], 2, 1, rng);
  return model;
}

std::vector<Model::NamedTensor> Model::named_parameters() const {
  std::vector<NamedTensor> out;
  auto add_block = [&](const std::string& prefix, const BlockParams& p) {
    for (const auto& [name, t] : p.tensors) out.emplace_back(prefix + "." + name, t);
  };
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const std::string pre = "enc" + std::to_string(i + 1);
    const EncoderLevel& level = levels[i];
    add_block(pre + ".cnn", level.cnn);
    add_block(pre + ".mbconv", level.mbconv);
    if (level.dac) {
      out.emplace_back(pre + ".dac.k1", level.dac->k1);
      out.emplace_back(pre + ".dac.k2", level.dac->k2);
      add_block(pre + ".dac.fuse", level.dac->fuse);
    } else {
      add_block(pre + ".merge", level.merge);
    }
  }
  add_block("transformer", transformer);
  for (std::size_t i = 0; i < decoder.size(); ++i) add_block("dec" + std::to_string(decoder.size() - 1 - i), decoder[i]);
  add_block("head", head);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t total = 0;
  for (const auto& [name, t] : named_parameters()) total += t.numel();
  return total;
}

ForwardResult forward(const Model& model, const Tensor& images) {
  const ModelConfig& cfg = model.cfg;
  if (images.rank() != 4 || images.dim(1) != cfg.input_channels || images.dim(2) != cfg.image_size ||
      images.dim(3) != cfg.image_size) {
    throw ShapeError("forward: expected N x " + std::to_string(cfg.input_channels) + " x " +
                     std::to_string(cfg.image_size) + " x " + std::to_string(cfg.image_size) + " images, got " +
                     format_shape(images.shape()));
  }
  const SimamConfig simam_cfg{cfg.simam_lambda};
  std::vector<Tensor> skips;
  Tensor f = images;
  for (std::size_t i = 0; i < model.levels.size(); ++i) {
    const EncoderLevel& level = model.levels[i];
    Tensor f1 = cnn_down(f, level.cnn);
    if (i == 0) f1 = transformer_block(f1, model.transformer, cfg.transformer);
    Tensor f2 = mbconv(f, level.mbconv, 2);
    f = level.dac ? dac_fuse(f1, f2, *level.dac, simam_cfg) : conv_forward(add(f1, f2), level.merge, 1, 1, 0);
    skips.push_back(f);
  }
  ForwardResult result;
  result.f5 = skips.back();
  Tensor x = skips.back();
  for (std::size_t s = 0; s + 1 < model.decoder.size(); ++s) {
    x = decoder_block(x, skips[skips.size() - 2 - s], model.decoder[s]);
  }
  x = decoder_block(x, images, model.decoder.back());
  result.probs = softmax(conv_forward(x, model.head, 1, 1, 0), 1);
  return result;
}

}  // namespace ccseg
