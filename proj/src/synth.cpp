#include "ccseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "ccseg/error.hpp"
#include "ccseg/random.hpp"

namespace ccseg {

namespace {

constexpr std::array<double, 3> kNucleusHue{0.9, 0.6, 1.0};

std::size_t plane(std::size_t size) { return size * size; }

}  // namespace

void SyntheticConfig::validate() const {
  if (image_size < 2) throw ConfigError("synthetic: image_size must be at least 2");
  if (nuclei_count_range[0] < 0 || nuclei_count_range[1] < nuclei_count_range[0]) {
    throw ConfigError("synthetic: nuclei_count_range must satisfy 0 <= min <= max");
  }
  if (!(radius_range[0] > 0.0) || radius_range[1] < radius_range[0]) {
    throw ConfigError("synthetic: radius_range must satisfy 0 < min <= max");
  }
  if (2.0 * radius_range[1] >= static_cast<double>(image_size) - 1.0) {
    throw ConfigError("synthetic: radius " + std::to_string(radius_range[1]) + " does not fit a " +
                      std::to_string(image_size) + " pixel image");
  }
  if (!(blur_sigma >= 0.0)) throw ConfigError("synthetic: blur_sigma must be non-negative");
  if (domains.empty()) throw ConfigError("synthetic: at least one domain is required");
  for (const auto& d : domains) {
    for (double t : d.tint) {
      if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("synthetic: tint multipliers must lie in [0, 1]");
    }
    if (!(d.noise_sigma >= 0.0)) throw ConfigError("synthetic: noise_sigma must be non-negative");
  }
  if (spurious) {
    if (spurious->confound != "tint-density") {
      throw ConfigError("synthetic: unknown confound '" + spurious->confound + "'");
    }
    if (!(spurious->strength >= 0.0 && spurious->strength <= 1.0)) {
      throw ConfigError("synthetic: spurious strength must lie in [0, 1]");
    }
    if (domains.size() < 2) throw ConfigError("synthetic: a planted confound needs at least two domains");
  }
}

std::optional<int> SyntheticConfig::held_out_domain() const {
  if (!spurious) return std::nullopt;
  return static_cast<int>(domains.size()) - 1;
}

bool inside_ellipse(double x, double y, double cx, double cy, double a, double b, double angle) {
  const double dx = x - cx;
  const double dy = y - cy;
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  const double u = (dx * c + dy * s) / a;
  const double v = (-dx * s + dy * c) / b;
  return u * u + v * v <= 1.0;
}

void gaussian_blur(std::vector<double>& img, std::size_t size, double sigma) {
  if (sigma <= 0.0) return;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  for (int k = -radius; k <= radius; ++k) kernel[static_cast<std::size_t>(k + radius)] = std::exp(-0.5 * k * k / (sigma * sigma));
  const double total = std::accumulate(kernel.begin(), kernel.end(), 0.0);
  for (double& k : kernel) k /= total;
  const int n = static_cast<int>(size);
  auto clampi = [n](int i) { return std::clamp(i, 0, n - 1); };
  std::vector<double> tmp(img.size());
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) acc += kernel[static_cast<std::size_t>(k + radius)] * img[static_cast<std::size_t>(y * n + clampi(x + k))];
      tmp[static_cast<std::size_t>(y * n + x)] = acc;
    }
  }
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) acc += kernel[static_cast<std::size_t>(k + radius)] * tmp[static_cast<std::size_t>(clampi(y + k) * n + x)];
      img[static_cast<std::size_t>(y * n + x)] = acc;
    }
  }
}

Sample gen_sample(const SyntheticConfig& cfg, std::size_t sample_id) {
  const std::size_t n = cfg.image_size;
  const std::size_t m = plane(n);
  Rng rng(mix64(cfg.seed, sample_id));
  Sample s;
  s.size = n;
  s.sample_id = sample_id;
  s.domain_id = static_cast<int>(sample_id % cfg.domains.size());
  const DomainSpec& domain = cfg.domains[static_cast<std::size_t>(s.domain_id)];

  const double u_density = rng.uniform();
  const double u_tint = rng.uniform();
  const int lo = cfg.nuclei_count_range[0];
  const int hi = cfg.nuclei_count_range[1];
  s.nuclei_count = std::min(hi, lo + static_cast<int>(u_density * (hi - lo + 1)));
  if (cfg.spurious) {
    const double k = cfg.spurious->strength;
    const bool reversed = cfg.held_out_domain() == s.domain_id;
    s.tint_level = k * (reversed ? 1.0 - u_density : u_density) + (1.0 - k) * u_tint;
  } else {
    s.tint_level = u_tint;
  }

  const double rmax = cfg.radius_range[1];
  const double lo_c = rmax;
  const double hi_c = static_cast<double>(n) - 1.0 - rmax;
  for (int e = 0; e < s.nuclei_count; ++e) {
    Ellipse el;
    bool placed = false;
    for (int attempt = 0; attempt < 500 && !placed; ++attempt) {
      el.a = rng.uniform(cfg.radius_range[0], cfg.radius_range[1]);
      el.b = rng.uniform(cfg.radius_range[0], cfg.radius_range[1]);
      el.angle = rng.uniform(0.0, std::numbers::pi);
      el.cx = rng.uniform(lo_c, hi_c);
      el.cy = rng.uniform(lo_c, hi_c);
      placed = cfg.overlap_allowed || std::none_of(s.ellipses.begin(), s.ellipses.end(), [&](const Ellipse& o) {
                 return std::hypot(o.cx - el.cx, o.cy - el.cy) <= std::max(o.a, o.b) + std::max(el.a, el.b);
               });
    }
    if (!placed) {
      throw ConfigError("synthetic: cannot place " + std::to_string(s.nuclei_count) +
                        " non-overlapping nuclei in sample " + std::to_string(sample_id));
    }
    s.ellipses.push_back(el);
  }

  // Nucleus index per pixel (-1 for background); later ellipses paint over earlier ones.
  std::vector<int> owner(m, -1);
  for (std::size_t e = 0; e < s.ellipses.size(); ++e) {
    const Ellipse& el = s.ellipses[e];
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        if (inside_ellipse(static_cast<double>(x), static_cast<double>(y), el.cx, el.cy, el.a, el.b, el.angle)) {
          owner[y * n + x] = static_cast<int>(e);
        }
      }
    }
  }
  s.mask.resize(m);
  for (std::size_t t = 0; t < m; ++t) s.mask[t] = owner[t] >= 0 ? 1 : 0;

  std::vector<double> darkness(s.ellipses.size());
  for (double& d : darkness) d = rng.uniform(0.15, 0.35);
  const double background = 0.45 + 0.45 * s.tint_level;
  s.image.resize(3 * m);
  for (std::size_t c = 0; c < 3; ++c) {
    std::vector<double> ch(m);
    for (std::size_t t = 0; t < m; ++t) {
      ch[t] = owner[t] >= 0 ? domain.tint[c] * kNucleusHue[c] * darkness[static_cast<std::size_t>(owner[t])]
                            : domain.tint[c] * background;
    }
    gaussian_blur(ch, n, cfg.blur_sigma);
    for (std::size_t t = 0; t < m; ++t) {
      const double noisy = domain.noise_sigma > 0.0 ? ch[t] + rng.normal(0.0, domain.noise_sigma) : ch[t];
      s.image[c * m + t] = std::clamp(noisy, 0.0, 1.0);
    }
  }
  return s;
}

std::vector<Sample> gen_dataset(const SyntheticConfig& cfg, std::size_t count) {
  cfg.validate();
  if (count == 0) throw ConfigError("synthetic: count must be at least 1");
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(gen_sample(cfg, i));
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

namespace {

// Builds a new sample of extent `out` whose pixel (y, x) comes from source
// pixel src(y, x), or is zero when src returns nullopt.
template <typename F>
Sample remap(const Sample& s, std::size_t out, F src) {
  Sample r = s;
  r.size = out;
  const std::size_t m_in = plane(s.size);
  const std::size_t m_out = plane(out);
  r.image.assign(3 * m_out, 0.0);
  r.mask.assign(m_out, 0);
  for (std::size_t y = 0; y < out; ++y) {
    for (std::size_t x = 0; x < out; ++x) {
      const auto from = src(y, x);
      if (!from) continue;
      const std::size_t j = from->first * s.size + from->second;
      r.mask[y * out + x] = s.mask[j];
      for (std::size_t c = 0; c < 3; ++c) r.image[c * m_out + y * out + x] = s.image[c * m_in + j];
    }
  }
  return r;
}

using Pixel = std::optional<std::pair<std::size_t, std::size_t>>;

Sample rotate90(const Sample& s) {
  const std::size_t n = s.size;
  return remap(s, n, [n](std::size_t y, std::size_t x) -> Pixel { return std::pair{x, n - 1 - y}; });
}

}  // namespace

Sample augment(const Sample& s, const std::vector<Augmentation>& ops, std::uint64_t seed) {
  Rng rng(seed);
  Sample r = s;
  for (const Augmentation& op : ops) {
    const std::size_t n = r.size;
    switch (op.kind) {
      case AugKind::hflip:
        r = remap(r, n, [n](std::size_t y, std::size_t x) -> Pixel { return std::pair{y, n - 1 - x}; });
        break;
      case AugKind::rotate: {
        const double deg = op.param;
        if (deg != 0.0 && deg != 90.0 && deg != 180.0 && deg != 270.0) {
          throw ConfigError("augment: rotation must be 0, 90, 180 or 270 degrees, got " + std::to_string(deg));
        }
        for (int k = 0; k < static_cast<int>(deg / 90.0); ++k) r = rotate90(r);
        break;
      }
      case AugKind::blur:
        if (!(op.param >= 0.0)) throw ConfigError("augment: blur sigma must be non-negative");
        for (std::size_t c = 0; c < 3; ++c) {
          std::vector<double> ch(r.image.begin() + static_cast<std::ptrdiff_t>(c * plane(n)),
                                 r.image.begin() + static_cast<std::ptrdiff_t>((c + 1) * plane(n)));
          gaussian_blur(ch, n, op.param);
          std::copy(ch.begin(), ch.end(), r.image.begin() + static_cast<std::ptrdiff_t>(c * plane(n)));
        }
        break;
      case AugKind::intensity: {
        if (!(op.param >= 0.0 && op.param < 1.0)) throw ConfigError("augment: intensity jitter must lie in [0, 1)");
        for (std::size_t c = 0; c < 3; ++c) {
          const double factor = rng.uniform(1.0 - op.param, 1.0 + op.param);
          for (std::size_t t = 0; t < plane(n); ++t) {
            double& v = r.image[c * plane(n) + t];
            v = std::clamp(v * factor, 0.0, 1.0);
          }
        }
        break;
      }
      case AugKind::crop: {
        const auto size = static_cast<std::size_t>(op.param);
        if (op.param < 1.0 || static_cast<double>(size) != op.param || size > n) {
          throw ShapeError("augment: crop size " + std::to_string(op.param) + " invalid for a " + std::to_string(n) +
                           " pixel image");
        }
        const std::size_t top = rng.index(n - size + 1);
        const std::size_t left = rng.index(n - size + 1);
        r = remap(r, size, [=](std::size_t y, std::size_t x) -> Pixel { return std::pair{y + top, x + left}; });
        break;
      }
      case AugKind::pad_crop: {
        const auto pad = static_cast<std::size_t>(op.param);
        if (op.param < 0.0 || static_cast<double>(pad) != op.param) {
          throw ShapeError("augment: padding must be a non-negative integer");
        }
        const std::size_t top = rng.index(2 * pad + 1);
        const std::size_t left = rng.index(2 * pad + 1);
        r = remap(r, n, [=](std::size_t y, std::size_t x) -> Pixel {
          const std::size_t sy = y + top, sx = x + left;
          if (sy < pad || sx < pad || sy - pad >= n || sx - pad >= n) return std::nullopt;
          return std::pair{sy - pad, sx - pad};
        });
        break;
      }
    }
  }
  return r;
}

Sample random_augment(const Sample& s, std::uint64_t seed) {
  Rng rng(mix64(seed, 0xA6u));
  std::vector<Augmentation> ops;
  if (rng.uniform() < 0.5) ops.push_back({AugKind::hflip, 0.0});
  ops.push_back({AugKind::rotate, 90.0 * static_cast<double>(rng.index(4))});
  if (rng.uniform() < 0.25) ops.push_back({AugKind::blur, rng.uniform(0.5, 1.0)});
  ops.push_back({AugKind::intensity, 0.2});
  ops.push_back({AugKind::pad_crop, 4.0});
  return augment(s, ops, rng.next());
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

Split split(const std::vector<Sample>& dataset, const std::array<double, 3>& fractions, std::uint64_t seed,
            std::optional<int> held_out_domain) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw ConfigError("split: fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split: fractions sum to " + std::to_string(total) + ", not 1");

  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix64(seed, 0x5117u));
  rng.shuffle(std::span<std::size_t>(order));

  Split out;
  std::vector<std::size_t> rest;
  if (held_out_domain) {
    for (std::size_t i : order) {
      if (dataset[i].domain_id == *held_out_domain) {
        out.test.push_back(dataset[i]);
      } else {
        rest.push_back(i);
      }
    }
    const double share = fractions[0] / (fractions[0] + fractions[1]);
    const auto n_train = static_cast<std::size_t>(std::llround(share * static_cast<double>(rest.size())));
    for (std::size_t k = 0; k < rest.size(); ++k) (k < n_train ? out.train : out.val).push_back(dataset[rest[k]]);
    return out;
  }
  const double n = static_cast<double>(dataset.size());
  const auto n_train = std::min(dataset.size(), static_cast<std::size_t>(std::llround(fractions[0] * n)));
  const auto n_val = std::min(dataset.size() - n_train, static_cast<std::size_t>(std::llround(fractions[1] * n)));
  for (std::size_t k = 0; k < order.size(); ++k) {
    auto& bucket = k < n_train ? out.train : (k < n_train + n_val ? out.val : out.test);
    bucket.push_back(dataset[order[k]]);
  }
  return out;
}

double tint_density_correlation(const std::vector<Sample>& samples) {
  const double n = static_cast<double>(samples.size());
  if (samples.size() < 2) throw DegenerateError("tint_density_correlation: need at least two samples");
  double mt = 0.0, md = 0.0;
  for (const auto& s : samples) {
    mt += s.tint_level;
    md += s.nuclei_count;
  }
  mt /= n;
  md /= n;
  double stt = 0.0, sdd = 0.0, std_ = 0.0;
  for (const auto& s : samples) {
    const double a = s.tint_level - mt, b = s.nuclei_count - md;
    stt += a * a;
    sdd += b * b;
    std_ += a * b;
  }
  if (stt == 0.0 || sdd == 0.0) return 0.0;
  return std_ / std::sqrt(stt * sdd);
}

}  // namespace ccseg
