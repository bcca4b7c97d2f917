#include "ccseg/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ccseg/error.hpp"

namespace ccseg {

namespace fs = std::filesystem;

void write_file_atomic(const fs::path& path, const std::string& contents) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot move " + tmp.string() + " to " + path.string());
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace {

std::uint8_t quantize(double v) {
  if (!std::isfinite(v)) throw NumericalError("image value is not finite");
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

std::string header(const char* magic, std::size_t h, std::size_t w) {
  return std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
}

std::string sample_stem(std::size_t id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%05zu", id);
  return buf;
}

}  // namespace

std::string encode_ppm(const std::vector<double>& image, std::size_t h, std::size_t w) {
  const std::size_t m = h * w;
  if (image.size() != 3 * m) throw ShapeError("encode_ppm: expected 3 x " + std::to_string(h) + " x " + std::to_string(w));
  std::string out = header("P6", h, w);
  for (std::size_t t = 0; t < m; ++t) {
    for (std::size_t c = 0; c < 3; ++c) out.push_back(static_cast<char>(quantize(image[c * m + t])));
  }
  return out;
}

std::string encode_pgm(const std::vector<std::uint8_t>& mask, std::size_t h, std::size_t w) {
  if (mask.size() != h * w) throw ShapeError("encode_pgm: expected " + std::to_string(h) + " x " + std::to_string(w));
  std::string out = header("P5", h, w);
  for (std::uint8_t v : mask) {
    if (v > 1) throw DomainError("encode_pgm: mask value " + std::to_string(v) + " is not binary");
    out.push_back(static_cast<char>(v ? 255 : 0));
  }
  return out;
}

RasterImage decode_pnm(const std::string& bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw IoError("PNM header truncated");
    return bytes.substr(start, pos - start);
  };
  auto number = [&]() {
    const std::string t = token();
    if (t.find_first_not_of("0123456789") != std::string::npos) throw IoError("PNM header field '" + t + "' is not a number");
    return static_cast<std::size_t>(std::stoull(t));
  };
  RasterImage img;
  const std::string magic = token();
  if (magic == "P6") {
    img.channels = 3;
  } else if (magic == "P5") {
    img.channels = 1;
  } else {
    throw IoError("unsupported PNM magic '" + magic + "'");
  }
  img.width = number();
  img.height = number();
  if (number() != 255) throw IoError("only maxval 255 is supported");
  ++pos;  // single whitespace byte after maxval
  const std::size_t m = img.width * img.height;
  if (bytes.size() < pos + img.channels * m) throw IoError("PNM payload truncated");
  img.values.resize(img.channels * m);
  for (std::size_t t = 0; t < m; ++t) {
    for (std::size_t c = 0; c < img.channels; ++c) {
      img.values[c * m + t] = static_cast<std::uint8_t>(bytes[pos + t * img.channels + c]);
    }
  }
  return img;
}

void write_dataset(const fs::path& dir, const std::vector<Sample>& samples) {
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  fs::create_directories(dir / "masks", ec);
  if (ec) throw IoError("cannot create dataset directories under " + dir.string());
  std::string manifest;
  for (const Sample& s : samples) {
    const std::string stem = sample_stem(s.sample_id);
    const std::string image_rel = "images/" + stem + ".ppm";
    const std::string mask_rel = "masks/" + stem + ".pgm";
    write_file_atomic(dir / image_rel, encode_ppm(s.image, s.size, s.size));
    write_file_atomic(dir / mask_rel, encode_pgm(s.mask, s.size, s.size));
    nlohmann::ordered_json line;
    line["sample_id"] = s.sample_id;
    line["domain_id"] = s.domain_id;
    line["image_path"] = image_rel;
    line["mask_path"] = mask_rel;
    manifest += line.dump() + "\n";
  }
  write_file_atomic(dir / kManifestName, manifest);
}

std::vector<ManifestEntry> read_manifest(const fs::path& dir) {
  const fs::path path = dir / kManifestName;
  if (!fs::exists(path)) throw IoError("no " + std::string(kManifestName) + " in " + dir.string());
  std::istringstream in(read_file(path));
  std::vector<ManifestEntry> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ManifestEntry e;
      e.sample_id = j.at("sample_id").get<std::size_t>();
      e.domain_id = j.at("domain_id").get<int>();
      e.image_path = j.at("image_path").get<std::string>();
      e.mask_path = j.at("mask_path").get<std::string>();
      entries.push_back(std::move(e));
    } catch (const nlohmann::json::exception& ex) {
      throw IoError("manifest line " + std::to_string(lineno) + ": " + ex.what());
    }
  }
  if (entries.empty()) throw IoError("manifest in " + dir.string() + " lists no samples");
  return entries;
}

std::vector<Sample> read_dataset(const fs::path& dir) {
  std::vector<Sample> samples;
  for (const ManifestEntry& e : read_manifest(dir)) {
    const RasterImage img = decode_pnm(read_file(dir / e.image_path));
    const RasterImage mask = decode_pnm(read_file(dir / e.mask_path));
    if (img.channels != 3 || mask.channels != 1) throw IoError("sample " + std::to_string(e.sample_id) + ": wrong channel count");
    if (img.width != img.height || mask.width != img.width || mask.height != img.height) {
      throw IoError("sample " + std::to_string(e.sample_id) + ": image and mask must be square and equal in size");
    }
    Sample s;
    s.size = img.width;
    s.sample_id = e.sample_id;
    s.domain_id = e.domain_id;
    s.image.resize(img.values.size());
    for (std::size_t i = 0; i < img.values.size(); ++i) s.image[i] = img.values[i] / 255.0;
    s.mask.resize(mask.values.size());
    for (std::size_t i = 0; i < mask.values.size(); ++i) s.mask[i] = mask.values[i] > 127 ? 1 : 0;
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace ccseg
