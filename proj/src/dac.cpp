#include "ccseg/dac.hpp"

namespace ccseg {

DacLayer init_dac(std::size_t level, std::size_t c1, std::size_t c2, std::size_t out, Rng& rng) {
  DacLayer layer;
  layer.k1 = Tensor::scalar(1.0).set_requires_grad(true);
  layer.k2 = Tensor::scalar(1.0).set_requires_grad(true);
  layer.fuse = init_conv(c1 + c2, out, 3, rng);
  layer.level = level;
  return layer;
}

Tensor concat_stage(const Tensor& f1, const Tensor& f2, const Tensor& k1, const Tensor& k2) {
  if (f1.rank() != 4 || f2.rank() != 4) throw ShapeError("dac: branch features must be NCHW");
  if (f1.dim(0) != f2.dim(0) || f1.dim(2) != f2.dim(2) || f1.dim(3) != f2.dim(3)) {
    throw ShapeError("dac: branch features disagree on batch/spatial extents: " + format_shape(f1.shape()) +
                     " vs " + format_shape(f2.shape()));
  }
  if (k1.numel() != 1 || k2.numel() != 1) throw ShapeError("dac: branch weights must be scalars");
  return concat({mul(k1, f1), mul(k2, f2)}, 1);
}

Tensor dac_fuse(const Tensor& f1, const Tensor& f2, const DacLayer& layer, const SimamConfig& simam_cfg) {
  if (layer.fuse.in_channels != f1.dim(1) + f2.dim(1)) {
    throw ShapeError("dac: fusion expects " + std::to_string(layer.fuse.in_channels) + " channels, branches give " +
                     std::to_string(f1.dim(1) + f2.dim(1)));
  }
  return conv_forward(simam(concat_stage(f1, f2, layer.k1, layer.k2), simam_cfg), layer.fuse, 3, 1, 1);
}

}  // namespace ccseg
