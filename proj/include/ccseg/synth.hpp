#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace ccseg {

struct DomainSpec {
  std::array<double, 3> tint{1.0, 1.0, 1.0};
  double noise_sigma = 0.02;
};

struct SpuriousSpec {
  std::string confound = "tint-density";
  double strength = 0.8;
};

struct SyntheticConfig {
  std::size_t image_size = 64;
  std::array<int, 2> nuclei_count_range{3, 8};
  std::array<double, 2> radius_range{3.0, 7.0};
  bool overlap_allowed = true;
  double blur_sigma = 1.0;
  std::vector<DomainSpec> domains{{{0.95, 0.85, 0.95}, 0.02}, {{0.85, 0.80, 1.00}, 0.03}, {{1.00, 0.90, 0.80}, 0.04}};
  std::optional<SpuriousSpec> spurious;
  std::uint64_t seed = 0;

  void validate() const;
  /// Domain whose tint-density coupling is reversed, when a confound is planted.
  std::optional<int> held_out_domain() const;
};

struct Ellipse {
  double cx = 0.0;
  double cy = 0.0;
  double a = 0.0;
  double b = 0.0;
  double angle = 0.0;
};

struct Sample {
  std::size_t size = 0;
  std::vector<double> image;        // 3 x size x size in [0, 1]
  std::vector<std::uint8_t> mask;   // size x size in {0, 1}
  int domain_id = 0;
  std::size_t sample_id = 0;
  /// Background tint level in [0, 1] and the number of ellipses drawn.
  double tint_level = 0.0;
  int nuclei_count = 0;
  /// Geometry of the drawn nuclei, in pixel coordinates (pixel centres at integers).
  std::vector<Ellipse> ellipses;
};

/// Sample `sample_id` of the dataset described by cfg; depends only on
/// (cfg, sample_id).
Sample gen_sample(const SyntheticConfig& cfg, std::size_t sample_id);
std::vector<Sample> gen_dataset(const SyntheticConfig& cfg, std::size_t count);

/// Rasterised ellipse membership of pixel (x, y): (u / a)^2 + (v / b)^2 <= 1
/// with (u, v) the offset from the centre rotated by -angle.
bool inside_ellipse(double x, double y, double cx, double cy, double a, double b, double angle);

/// Separable Gaussian blur of one size x size plane, edges clamped.
void gaussian_blur(std::vector<double>& plane, std::size_t size, double sigma);

enum class AugKind { hflip, rotate, blur, intensity, crop, pad_crop };

struct Augmentation {
  AugKind kind = AugKind::hflip;
  /// rotate: degrees (0, 90, 180, 270); blur: sigma; intensity: jitter half-width
  /// (factors in [1 - p, 1 + p]); crop: output size; pad_crop: padding.
  double param = 0.0;
};

/// Applies `ops` in order. Geometric ops move image and mask together;
/// photometric ops touch the image only. Random choices come from `seed`.
Sample augment(const Sample& s, const std::vector<Augmentation>& ops, std::uint64_t seed);

/// The training pipeline: random flip, random axis rotation, occasional blur,
/// intensity jitter in [0.8, 1.2] and a pad-4 random crop, all drawn from `seed`.
Sample random_augment(const Sample& s, std::uint64_t seed);

struct Split {
  std::vector<Sample> train;
  std::vector<Sample> val;
  std::vector<Sample> test;
};

/// Seeded shuffle then partition by `fractions` (train, val, test). When
/// `held_out_domain` is set, test is exactly that domain's samples and the
/// others are split between train and val in proportion to the first two
/// fractions.
Split split(const std::vector<Sample>& dataset, const std::array<double, 3>& fractions, std::uint64_t seed,
            std::optional<int> held_out_domain = std::nullopt);

/// Pearson correlation of tint level and nucleus count over `samples`.
double tint_density_correlation(const std::vector<Sample>& samples);

}  // namespace ccseg
