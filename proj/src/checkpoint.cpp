#include "ccseg/checkpoint.hpp"

#include <bit>
#include <map>

#include "ccseg/image_io.hpp"

namespace ccseg {

namespace {

template <typename T>
void put(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFFu));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    T value = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      value |= static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return value;
  }

  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const std::vector<Model::NamedTensor>& entries) {
  std::string out(kCheckpointMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) put<std::uint64_t>(out, e);
    for (double v : t.data()) put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

std::vector<Model::NamedTensor> decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.take(4, "magic") != std::string(kCheckpointMagic, 4)) throw CheckpointError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const auto count = r.get<std::uint32_t>("entry count");
  std::vector<Model::NamedTensor> entries;
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name = r.take(r.get<std::uint32_t>("name length"), "name");
    const auto rank = r.get<std::uint32_t>("rank");
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(r.get<std::uint64_t>("extent"));
    std::vector<double> values(shape_numel(shape));
    for (double& v : values) v = std::bit_cast<double>(r.get<std::uint64_t>("payload"));
    entries.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (!r.done()) throw CheckpointError("checkpoint has trailing bytes");
  return entries;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  write_file_atomic(path, encode_checkpoint(model.named_parameters()));
}

std::vector<Model::NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

void load_parameters(const std::vector<Model::NamedTensor>& entries, Model& model) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : entries) by_name[name] = &t;
  auto params = model.named_parameters();
  if (params.size() != entries.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(entries.size()) + " tensors, model expects " +
                          std::to_string(params.size()));
  }
  for (auto& [name, p] : params) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointError("checkpoint lacks parameter '" + name + "'");
    if (it->second->shape() != p.shape()) {
      throw CheckpointError("checkpoint parameter '" + name + "' has shape " + format_shape(it->second->shape()) +
                            ", model expects " + format_shape(p.shape()));
    }
    auto src = it->second->data();
    std::copy(src.begin(), src.end(), p.mutable_data().begin());
  }
}

void load_checkpoint(const std::filesystem::path& path, Model& model) { load_parameters(read_checkpoint(path), model); }

}  // namespace ccseg
