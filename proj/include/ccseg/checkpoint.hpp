#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "ccseg/model.hpp"

namespace ccseg {

inline constexpr char kCheckpointMagic[4] = {'C', 'S', 'E', 'G'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Little-endian layout: magic "CSEG", u32 version, u32 entry count, then per
/// entry: u32 name length, name bytes, u32 rank, u64 extents, f64 payload.
std::string encode_checkpoint(const std::vector<Model::NamedTensor>& entries);
std::vector<Model::NamedTensor> decode_checkpoint(const std::string& bytes);

/// Written to a temporary file and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const Model& model);
std::vector<Model::NamedTensor> read_checkpoint(const std::filesystem::path& path);
/// Copies checkpoint values into `model`; names and shapes must match exactly.
void load_checkpoint(const std::filesystem::path& path, Model& model);
void load_parameters(const std::vector<Model::NamedTensor>& entries, Model& model);

}  // namespace ccseg
