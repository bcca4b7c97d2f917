#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ccseg/synth.hpp"

namespace ccseg {

/// Writes `contents` to a sibling temporary file, then renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);
std::string read_file(const std::filesystem::path& path);

/// Binary P6 with maxval 255 from a 3 x h x w planar image in [0, 1].
std::string encode_ppm(const std::vector<double>& image, std::size_t h, std::size_t w);
/// Binary P5 with maxval 255; labels map 0 -> 0 and 1 -> 255.
std::string encode_pgm(const std::vector<std::uint8_t>& mask, std::size_t h, std::size_t w);

struct RasterImage {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> values;  // planar, channel-major
};

/// Parses P5 or P6 (maxval 255) into planar bytes.
RasterImage decode_pnm(const std::string& bytes);

struct ManifestEntry {
  std::size_t sample_id = 0;
  int domain_id = 0;
  std::string image_path;  // relative to the manifest directory
  std::string mask_path;
};

inline constexpr const char* kManifestName = "manifest.jsonl";

/// Writes images/, masks/ and the manifest under `dir`. The manifest is
/// written last, so an interrupted run never leaves one behind.
void write_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir);
/// Loads every sample listed in the manifest (pixel values quantised to 1/255).
std::vector<Sample> read_dataset(const std::filesystem::path& dir);

}  // namespace ccseg
