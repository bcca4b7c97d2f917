#pragma once

#include "ccseg/nn.hpp"

namespace ccseg {

/// Learned branch weights of one encoder level plus the trailing fusion
/// convolution (3x3, stride 1, pad 1).
struct DacLayer {
  Tensor k1;
  Tensor k2;
  BlockParams fuse;
  std::size_t level = 1;
};

/// Branch weights start at exactly 1.0; `fuse` maps c1 + c2 channels to `out`.
DacLayer init_dac(std::size_t level, std::size_t c1, std::size_t c2, std::size_t out, Rng& rng);

/// [k1 * f1, k2 * f2] concatenated on the channel axis.
Tensor concat_stage(const Tensor& f1, const Tensor& f2, const Tensor& k1, const Tensor& k2);

/// conv(simam(concat_stage(f1, f2, k1, k2))).
Tensor dac_fuse(const Tensor& f1, const Tensor& f2, const DacLayer& layer, const SimamConfig& simam_cfg = {});

}  // namespace ccseg
