#include "ccseg/nn.hpp"

#include <cmath>
#include <string>

#include "ccseg/random.hpp"

namespace ccseg {

const Tensor& BlockParams::get(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ShapeError("block parameter '" + name + "' is missing");
  return it->second;
}

const Tensor& BlockParams::get(const std::string& name, const Shape& shape) const {
  const Tensor& t = get(name);
  if (t.shape() != shape) {
    throw ShapeError("block parameter '" + name + "' expected " + format_shape(shape) + ", got " +
                     format_shape(t.shape()));
  }
  return t;
}

void BlockParams::set(const std::string& name, Tensor value) { tensors[name] = std::move(value); }

std::size_t BlockParams::parameter_count() const {
  std::size_t total = 0;
  for (const auto& [name, t] : tensors) total += t.numel();
  return total;
}

void SimamConfig::validate() const {
  if (!(lambda > 0.0)) throw ConfigError("simam lambda must be positive");
}

std::size_t norm_groups(std::size_t channels) {
  for (std::size_t g = std::min<std::size_t>(8, channels); g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(1.0 / static_cast<double>(fan_in));
  Tensor t = Tensor::uniform(std::move(shape), -bound, bound, rng);
  t.set_requires_grad(true);
  return t;
}

namespace {

Tensor norm_scale(std::size_t c) { return Tensor::ones({c}).set_requires_grad(true); }
Tensor norm_shift(std::size_t c) { return Tensor::zeros({c}).set_requires_grad(true); }

Tensor normalize(const Tensor& x, const BlockParams& p, const std::string& prefix) {
  const std::size_t c = x.dim(1);
  return group_norm(x, norm_groups(c), p.get(prefix + ".g", {c}), p.get(prefix + ".b", {c}));
}

// Computes a_t and, per channel, the statistics the backward pass needs.
struct SimamForward {
  std::vector<double> coeff;
  std::vector<double> mean;
  std::vector<double> denom;  // 4 (v + lambda)
};

SimamForward simam_forward(const Tensor& x, double lambda) {
  if (x.rank() != 4) throw ShapeError("simam: expected NCHW input, got " + format_shape(x.shape()));
  const std::size_t planes = x.dim(0) * x.dim(1);
  const std::size_t m = x.dim(2) * x.dim(3);
  if (m < 2) throw DegenerateError("simam: channel with H*W = " + std::to_string(m) + " < 2 has no variance");
  SimamForward f;
  f.coeff.resize(x.numel());
  f.mean.resize(planes);
  f.denom.resize(planes);
  auto xv = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    const double* xs = xv.data() + p * m;
    double mu = 0.0;
    for (std::size_t t = 0; t < m; ++t) mu += xs[t];
    mu /= static_cast<double>(m);
    double v = 0.0;
    for (std::size_t t = 0; t < m; ++t) v += (xs[t] - mu) * (xs[t] - mu);
    v /= static_cast<double>(m - 1);
    const double denom = 4.0 * (v + lambda);
    for (std::size_t t = 0; t < m; ++t) {
      const double d = (xs[t] - mu) * (xs[t] - mu);
      f.coeff[p * m + t] = 1.0 / (1.0 + std::exp(-(d / denom + 0.5)));
    }
    f.mean[p] = mu;
    f.denom[p] = denom;
  }
  return f;
}

}  // namespace

Tensor simam_coefficients(const Tensor& x, const SimamConfig& cfg) {
  cfg.validate();
  return Tensor(x.shape(), simam_forward(x, cfg.lambda).coeff);
}

Tensor simam(const Tensor& x, const SimamConfig& cfg) {
  cfg.validate();
  SimamForward f = simam_forward(x, cfg.lambda);
  auto xv = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * f.coeff[i];
  Tensor result(x.shape(), std::move(out));
  if (autograd::recording({&x})) {
    autograd::record(result, [x, f = std::move(f)](std::span<const double> g) {
      auto gx = autograd::grad_buffer(x);
      auto xv = x.data();
      const std::size_t m = x.dim(2) * x.dim(3);
      const double md = static_cast<double>(m);
      for (std::size_t p = 0; p < f.mean.size(); ++p) {
        const std::size_t base = p * m;
        const double mu = f.mean[p];
        const double denom = f.denom[p];
        // h_t = g_t x_t a_t (1 - a_t) is the upstream gradient of the energy e_t.
        double sum_hc = 0.0;
        double sum_hd = 0.0;
        for (std::size_t t = 0; t < m; ++t) {
          const double a = f.coeff[base + t];
          const double c = xv[base + t] - mu;
          const double h = g[base + t] * xv[base + t] * a * (1.0 - a);
          sum_hc += h * c;
          sum_hd += h * c * c;
        }
        const double var_term = 8.0 * sum_hd / (denom * denom * (md - 1.0));
        for (std::size_t t = 0; t < m; ++t) {
          const double a = f.coeff[base + t];
          const double c = xv[base + t] - mu;
          const double h = g[base + t] * xv[base + t] * a * (1.0 - a);
          gx[base + t] += g[base + t] * a + (2.0 / denom) * (h * c - sum_hc / md) - var_term * c;
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Convolutional blocks
// ---------------------------------------------------------------------------

BlockParams init_conv(std::size_t in, std::size_t out, std::size_t kernel, Rng& rng) {
  BlockParams p;
  p.in_channels = in;
  p.out_channels = out;
  p.set("w", init_uniform({out, in, kernel, kernel}, in * kernel * kernel, rng));
  p.set("b", init_uniform({out}, in * kernel * kernel, rng));
  return p;
}

Tensor conv_forward(const Tensor& x, const BlockParams& params, std::size_t kernel, std::size_t stride,
                    std::size_t padding) {
  const Tensor& w = params.get("w", {params.out_channels, params.in_channels, kernel, kernel});
  return add_bias(conv2d(x, w, stride, padding), params.get("b", {params.out_channels}), 1);
}

BlockParams init_cnn_down(std::size_t in, std::size_t out, Rng& rng) {
  BlockParams p = init_conv(in, out, 3, rng);
  p.stride = 2;
  p.set("norm.g", norm_scale(out));
  p.set("norm.b", norm_shift(out));
  return p;
}

Tensor cnn_down(const Tensor& x, const BlockParams& params) {
  if (x.rank() != 4) throw ShapeError("cnn_down: expected NCHW input, got " + format_shape(x.shape()));
  if (x.dim(2) < 2 || x.dim(3) < 2) {
    throw ShapeError("cnn_down: spatial extent below 2 in " + format_shape(x.shape()));
  }
  return relu(normalize(conv_forward(x, params, 3, 2, 1), params, "norm"));
}

BlockParams init_mbconv(std::size_t in, std::size_t out, std::size_t stride, Rng& rng) {
  const std::size_t hidden = in * kMbconvExpansion;
  BlockParams p;
  p.in_channels = in;
  p.out_channels = out;
  p.stride = stride;
  p.set("expand.w", init_uniform({hidden, in, 1, 1}, in, rng));
  p.set("expand.norm.g", norm_scale(hidden));
  p.set("expand.norm.b", norm_shift(hidden));
  p.set("depthwise.w", init_uniform({hidden, 1, 3, 3}, 9, rng));
  p.set("depthwise.norm.g", norm_scale(hidden));
  p.set("depthwise.norm.b", norm_shift(hidden));
  p.set("project.w", init_uniform({out, hidden, 1, 1}, hidden, rng));
  p.set("project.norm.g", norm_scale(out));
  p.set("project.norm.b", norm_shift(out));
  return p;
}

Tensor mbconv(const Tensor& x, const BlockParams& params, std::size_t stride) {
  if (stride != 1 && stride != 2) throw ShapeError("mbconv: stride must be 1 or 2");
  if (x.rank() != 4 || x.dim(1) != params.in_channels) {
    throw ShapeError("mbconv: input " + format_shape(x.shape()) + " does not have " +
                     std::to_string(params.in_channels) + " channels");
  }
  const std::size_t in = params.in_channels;
  const std::size_t hidden = in * kMbconvExpansion;
  const std::size_t out = params.out_channels;
  Tensor h = conv2d(x, params.get("expand.w", {hidden, in, 1, 1}), 1, 0);
  h = relu(normalize(h, params, "expand.norm"));
  h = depthwise_conv2d(h, params.get("depthwise.w", {hidden, 1, 3, 3}), stride, 1);
  h = relu(normalize(h, params, "depthwise.norm"));
  h = conv2d(h, params.get("project.w", {out, hidden, 1, 1}), 1, 0);
  h = normalize(h, params, "project.norm");
  if (stride == 1 && in == out) h = add(h, x);
  return h;
}

// ---------------------------------------------------------------------------
// Transformer enrichment
// ---------------------------------------------------------------------------

namespace {

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_bias(matmul(x, w), b, 1); }

Tensor patchify(const Tensor& x, std::size_t patch) {
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor t = reshape(x, {n, c, h / patch, patch, w / patch, patch});
  t = permute(t, {0, 2, 4, 1, 3, 5});
  return reshape(t, {n * (h / patch) * (w / patch), c * patch * patch});
}

Tensor unpatchify(const Tensor& tokens, const Shape& shape, std::size_t patch) {
  const auto n = shape[0], c = shape[1], h = shape[2], w = shape[3];
  Tensor t = reshape(tokens, {n, h / patch, w / patch, c, patch, patch});
  t = permute(t, {0, 3, 1, 4, 2, 5});
  return reshape(t, {n, c, h, w});
}

}  // namespace

BlockParams init_transformer(std::size_t channels, std::size_t height, std::size_t width,
                             const TransformerConfig& cfg, Rng& rng) {
  if (cfg.patch == 0 || height % cfg.patch != 0 || width % cfg.patch != 0) {
    throw ShapeError("transformer: " + std::to_string(height) + "x" + std::to_string(width) +
                     " is not divisible by patch " + std::to_string(cfg.patch));
  }
  if (cfg.heads == 0 || channels % cfg.heads != 0) {
    throw ShapeError("transformer: width " + std::to_string(channels) + " not divisible by heads");
  }
  const std::size_t d = channels;
  const std::size_t pd = channels * cfg.patch * cfg.patch;
  const std::size_t tokens = (height / cfg.patch) * (width / cfg.patch);
  BlockParams p;
  p.in_channels = channels;
  p.out_channels = channels;
  p.set("embed.w", init_uniform({pd, d}, pd, rng));
  p.set("embed.b", init_uniform({d}, pd, rng));
  p.set("pos", init_uniform({tokens, d}, d, rng));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    p.set(pre + "ln1.g", norm_scale(d));
    p.set(pre + "ln1.b", norm_shift(d));
    for (const char* name : {"q", "k", "v", "o"}) {
      p.set(pre + "attn.w" + name, init_uniform({d, d}, d, rng));
      p.set(pre + "attn.b" + name, init_uniform({d}, d, rng));
    }
    p.set(pre + "ln2.g", norm_scale(d));
    p.set(pre + "ln2.b", norm_shift(d));
    p.set(pre + "mlp.w1", init_uniform({d, 2 * d}, d, rng));
    p.set(pre + "mlp.b1", init_uniform({2 * d}, d, rng));
    p.set(pre + "mlp.w2", init_uniform({2 * d, d}, 2 * d, rng));
    p.set(pre + "mlp.b2", init_uniform({d}, 2 * d, rng));
  }
  p.set("out.w", init_uniform({d, pd}, d, rng));
  return p;
}

Tensor transformer_block(const Tensor& x, const BlockParams& params, const TransformerConfig& cfg,
                         std::vector<Tensor>* attention) {
  if (x.rank() != 4) throw ShapeError("transformer_block: expected NCHW input, got " + format_shape(x.shape()));
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t patch = cfg.patch;
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw ShapeError("transformer_block: " + format_shape(x.shape()) + " is not divisible by patch " +
                     std::to_string(patch));
  }
  if (c != params.in_channels) {
    throw ShapeError("transformer_block: input has " + std::to_string(c) + " channels, block expects " +
                     std::to_string(params.in_channels));
  }
  const std::size_t d = c;
  const std::size_t heads = cfg.heads;
  const std::size_t dh = d / heads;
  const std::size_t pd = c * patch * patch;
  const std::size_t tokens = (h / patch) * (w / patch);

  Tensor stream = linear(patchify(x, patch), params.get("embed.w", {pd, d}), params.get("embed.b", {d}));
  stream = reshape(add_bias(reshape(stream, {n, tokens * d}), reshape(params.get("pos", {tokens, d}), {tokens * d}), 1),
                   {n * tokens, d});
  const Tensor start = stream;

  auto split_heads = [&](const Tensor& t, bool transposed) {
    Tensor r = reshape(t, {n, tokens, heads, dh});
    if (transposed) return reshape(permute(r, {0, 2, 3, 1}), {n * heads, dh, tokens});
    return reshape(permute(r, {0, 2, 1, 3}), {n * heads, tokens, dh});
  };

  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    auto W = [&](const std::string& name, const Shape& shape) -> const Tensor& { return params.get(pre + name, shape); };

    Tensor normed = layer_norm(stream, W("ln1.g", {d}), W("ln1.b", {d}));
    Tensor q = split_heads(linear(normed, W("attn.wq", {d, d}), W("attn.bq", {d})), false);
    Tensor k = split_heads(linear(normed, W("attn.wk", {d, d}), W("attn.bk", {d})), true);
    Tensor v = split_heads(linear(normed, W("attn.wv", {d, d}), W("attn.bv", {d})), false);
    Tensor weights = softmax(mul(bmm(q, k), Tensor::scalar(1.0 / std::sqrt(static_cast<double>(dh)))), 2);
    if (attention) attention->push_back(weights);
    Tensor mixed = bmm(weights, v);
    mixed = reshape(permute(reshape(mixed, {n, heads, tokens, dh}), {0, 2, 1, 3}), {n * tokens, d});
    stream = add(stream, linear(mixed, W("attn.wo", {d, d}), W("attn.bo", {d})));

    Tensor hidden = relu(linear(layer_norm(stream, W("ln2.g", {d}), W("ln2.b", {d})), W("mlp.w1", {d, 2 * d}),
                                W("mlp.b1", {2 * d})));
    stream = add(stream, linear(hidden, W("mlp.w2", {2 * d, d}), W("mlp.b2", {d})));
  }
  Tensor update = matmul(sub(stream, start), params.get("out.w", {d, pd}));
  return add(x, unpatchify(update, x.shape(), patch));
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

BlockParams init_decoder(std::size_t in, std::size_t skip, std::size_t out, Rng& rng) {
  BlockParams p = init_conv(in + skip, out, 3, rng);
  p.set("norm.g", norm_scale(out));
  p.set("norm.b", norm_shift(out));
  return p;
}

Tensor decoder_block(const Tensor& x, const Tensor& skip, const BlockParams& params) {
  if (x.rank() != 4 || skip.rank() != 4) throw ShapeError("decoder_block: expected NCHW inputs");
  if (x.dim(0) != skip.dim(0) || 2 * x.dim(2) != skip.dim(2) || 2 * x.dim(3) != skip.dim(3)) {
    throw ShapeError("decoder_block: upsampled " + format_shape(x.shape()) + " does not match skip " +
                     format_shape(skip.shape()));
  }
  Tensor merged = concat({upsample_nearest2x(x), skip}, 1);
  return relu(normalize(conv_forward(merged, params, 3, 1, 1), params, "norm"));
}

}  // namespace ccseg
