#include "ccseg/config.hpp"

#include <cmath>
#include <set>
#include <type_traits>

#include <json.hpp>

#include "ccseg/image_io.hpp"
#include "ccseg/random.hpp"

namespace ccseg {

using nlohmann::json;
using ordered = nlohmann::ordered_json;

namespace {

// Reads typed fields from one JSON object and rejects keys nobody asked for.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be a JSON object");
  }

  void read(const char* key, double& out) {
    if (const json* v = take(key)) {
      if (!v->is_number()) throw ConfigError(where(key) + " must be a number");
      out = v->get<double>();
    }
  }
  template <typename T>
    requires(std::is_unsigned_v<T> && !std::is_same_v<T, bool>)
  void read(const char* key, T& out) {
    if (const json* v = take(key)) out = static_cast<T>(as_unsigned(*v, where(key)));
  }
  void read(const char* key, int& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_integer()) throw ConfigError(where(key) + " must be an integer");
      out = v->get<int>();
    }
  }
  void read(const char* key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) throw ConfigError(where(key) + " must be true or false");
      out = v->get<bool>();
    }
  }
  void read(const char* key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) throw ConfigError(where(key) + " must be a string");
      out = v->get<std::string>();
    }
  }
  template <typename T, std::size_t N>
  void read(const char* key, std::array<T, N>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array() || v->size() != N) {
        throw ConfigError(where(key) + " must be an array of " + std::to_string(N) + " numbers");
      }
      for (std::size_t i = 0; i < N; ++i) {
        const json& e = (*v)[i];
        if constexpr (std::is_integral_v<T>) {
          if (!e.is_number_integer()) throw ConfigError(where(key) + " must hold integers");
        } else if (!e.is_number()) {
          throw ConfigError(where(key) + " must hold numbers");
        }
        out[i] = e.get<T>();
      }
    }
  }
  void read(const char* key, std::vector<std::size_t>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) throw ConfigError(where(key) + " must be an array");
      out.clear();
      for (const json& e : *v) out.push_back(as_unsigned(e, where(key)));
    }
  }

  const json* take(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string where(const std::string& key = "") const { return key.empty() ? path_ : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown configuration key '" + where(it.key()) + "'");
    }
  }

 private:
  static std::uint64_t as_unsigned(const json& v, const std::string& where) {
    if (!v.is_number_unsigned()) throw ConfigError(where + " must be a non-negative integer");
    return v.get<std::uint64_t>();
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void parse_model(const json& j, ModelConfig& m) {
  Fields f(j, "model");
  f.read("input_channels", m.input_channels);
  f.read("num_levels", m.num_levels);
  f.read("channels_per_level", m.channels_per_level);
  f.read("simam_lambda", m.simam_lambda);
  f.read("image_size", m.image_size);
  f.read("dac_enabled", m.dac_enabled);
  if (const json* t = f.take("transformer")) {
    Fields tf(*t, "model.transformer");
    tf.read("patch", m.transformer.patch);
    tf.read("heads", m.transformer.heads);
    tf.read("layers", m.transformer.layers);
    tf.finish();
  }
  f.finish();
}

void parse_train(const json& j, TrainConfig& t) {
  Fields f(j, "train");
  f.read("lr_max", t.lr_max);
  f.read("lr_min", t.lr_min);
  f.read("batch_size", t.batch_size);
  f.read("epochs", t.epochs);
  f.read("weight_decay", t.weight_decay);
  f.read("early_stop_patience", t.early_stop_patience);
  f.read("beta1", t.beta1);
  f.read("beta2", t.beta2);
  f.read("adam_eps", t.adam_eps);
  f.read("cim_enabled", t.cim_enabled);
  f.read("augment", t.augment);
  f.finish();
}

void parse_loss(const json& j, LossConfig& l) {
  Fields f(j, "loss");
  f.read("alpha_t", l.alpha_t);
  f.read("gamma", l.gamma);
  f.read("lambda", l.lambda);
  f.read("dice_smooth", l.dice_smooth);
  f.finish();
}

void parse_cim(const json& j, CimConfig& c) {
  Fields f(j, "cim");
  f.read("n_f", c.n_f);
  f.read("m_features", c.m_features);
  f.read("inner_steps", c.inner_steps);
  f.read("inner_lr", c.inner_lr);
  f.finish();
}

void parse_data(const json& j, SyntheticConfig& d) {
  Fields f(j, "data");
  f.read("image_size", d.image_size);
  f.read("nuclei_count_range", d.nuclei_count_range);
  f.read("radius_range", d.radius_range);
  f.read("overlap_allowed", d.overlap_allowed);
  f.read("blur_sigma", d.blur_sigma);
  if (const json* domains = f.take("domains")) {
    if (!domains->is_array()) throw ConfigError("data.domains must be an array");
    d.domains.clear();
    for (std::size_t i = 0; i < domains->size(); ++i) {
      Fields df((*domains)[i], "data.domains[" + std::to_string(i) + "]");
      DomainSpec spec;
      df.read("tint", spec.tint);
      df.read("noise_sigma", spec.noise_sigma);
      df.finish();
      d.domains.push_back(spec);
    }
  }
  if (const json* s = f.take("spurious")) {
    if (s->is_null()) {
      d.spurious.reset();
    } else {
      Fields sf(*s, "data.spurious");
      SpuriousSpec spec;
      sf.read("confound", spec.confound);
      sf.read("strength", spec.strength);
      sf.finish();
      d.spurious = spec;
    }
  }
  f.finish();
}

}  // namespace

void RunConfig::derive_seeds() {
  data.seed = mix64(seed, 0xDA7Au);
  train.seed = mix64(seed, 0x7EA1u);
  train.cim.seed = mix64(seed, 0xC13Cu);
}

std::uint64_t RunConfig::model_seed() const { return mix64(seed, 0x30DEu); }
std::uint64_t RunConfig::split_seed() const { return mix64(seed, 0x5B1Eu); }

void RunConfig::validate() const {
  if (name.empty()) throw ConfigError("name must not be empty");
  model.validate();
  train.validate();
  data.validate();
  if (data.image_size != model.image_size) {
    throw ConfigError("data.image_size (" + std::to_string(data.image_size) + ") differs from model.image_size (" +
                      std::to_string(model.image_size) + ")");
  }
  double total = 0.0;
  for (double s : split) {
    if (!(s > 0.0)) throw ConfigError("split fractions must be positive");
    total += s;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
}

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("configuration is not valid JSON: ") + e.what());
  }
  RunConfig cfg;
  Fields f(j, "config");
  f.read("name", cfg.name);
  f.read("output_dir", cfg.output_dir);
  f.read("seed", cfg.seed);
  f.read("split", cfg.split);
  if (const json* s = f.take("model")) parse_model(*s, cfg.model);
  if (const json* s = f.take("train")) parse_train(*s, cfg.train);
  if (const json* s = f.take("loss")) parse_loss(*s, cfg.train.loss);
  if (const json* s = f.take("cim")) parse_cim(*s, cfg.train.cim);
  if (const json* s = f.take("data")) parse_data(*s, cfg.data);
  f.finish();
  cfg.derive_seeds();
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  return parse_run_config(text);
}

std::string dump_run_config(const RunConfig& cfg) {
  ordered j;
  j["name"] = cfg.name;
  j["output_dir"] = cfg.output_dir;
  j["seed"] = cfg.seed;
  j["split"] = cfg.split;
  const ModelConfig& m = cfg.model;
  j["model"] = {{"input_channels", m.input_channels},
                {"num_levels", m.num_levels},
                {"channels_per_level", m.channels_per_level},
                {"transformer", {{"patch", m.transformer.patch}, {"heads", m.transformer.heads}, {"layers", m.transformer.layers}}},
                {"simam_lambda", m.simam_lambda},
                {"image_size", m.image_size},
                {"dac_enabled", m.dac_enabled}};
  const TrainConfig& t = cfg.train;
  j["train"] = {{"lr_max", t.lr_max},
                {"lr_min", t.lr_min},
                {"batch_size", t.batch_size},
                {"epochs", t.epochs},
                {"weight_decay", t.weight_decay},
                {"early_stop_patience", t.early_stop_patience},
                {"beta1", t.beta1},
                {"beta2", t.beta2},
                {"adam_eps", t.adam_eps},
                {"cim_enabled", t.cim_enabled},
                {"augment", t.augment}};
  j["loss"] = {{"alpha_t", t.loss.alpha_t}, {"gamma", t.loss.gamma}, {"lambda", t.loss.lambda},
               {"dice_smooth", t.loss.dice_smooth}};
  j["cim"] = {{"n_f", t.cim.n_f}, {"m_features", t.cim.m_features}, {"inner_steps", t.cim.inner_steps},
              {"inner_lr", t.cim.inner_lr}};
  const SyntheticConfig& d = cfg.data;
  ordered domains = ordered::array();
  for (const auto& spec : d.domains) domains.push_back({{"tint", spec.tint}, {"noise_sigma", spec.noise_sigma}});
  j["data"] = {{"image_size", d.image_size},
               {"nuclei_count_range", d.nuclei_count_range},
               {"radius_range", d.radius_range},
               {"overlap_allowed", d.overlap_allowed},
               {"blur_sigma", d.blur_sigma},
               {"domains", domains}};
  if (d.spurious) {
    j["data"]["spurious"] = {{"confound", d.spurious->confound}, {"strength", d.spurious->strength}};
  } else {
    j["data"]["spurious"] = nullptr;
  }
  return j.dump(2) + "\n";
}

}  // namespace ccseg
