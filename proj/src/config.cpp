#include "gmic/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace gmic {

namespace {

[[noreturn]] void fail(const std::string& field, const std::string& what) { throw ConfigError(field + ": " + what); }

// Reads known keys out of one JSON object and rejects the rest.
class Section {
 public:
  Section(const Json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) fail(name_, "expected a JSON object");
  }

  template <typename T>
  void read(const std::string& key, T& field) {
    known_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    field = convert<T>(*it, name_ + "." + key);
  }

  template <typename F>
  void read_with(const std::string& key, F&& apply) {
    known_.insert(key);
    auto it = j_.find(key);
    if (it != j_.end()) apply(*it, name_ + "." + key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!known_.count(it.key())) fail(name_ + "." + it.key(), "unknown key");
  }

  template <typename T>
  static T convert(const Json& v, const std::string& field) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) fail(field, "expected true or false");
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) fail(field, "expected an integer");
      if constexpr (std::is_unsigned_v<T>)
        if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0)
          fail(field, "expected a nonnegative integer");
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) fail(field, "expected a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) fail(field, "expected a string");
      return v.get<std::string>();
    } else {
      // vectors of numbers
      if (!v.is_array()) fail(field, "expected an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i)
        out.push_back(convert<typename T::value_type>(v[i], field + "[" + std::to_string(i) + "]"));
      return out;
    }
  }

 private:
  const Json& j_;
  std::string name_;
  std::set<std::string> known_;
};

Json conv_json(const ConvSpec& c) { return Json::array({c.kernel, c.stride, c.padding}); }

ConvSpec conv_from_json(const Json& v, const std::string& field) {
  const auto xs = Section::convert<std::vector<int>>(v, field);
  if (xs.size() != 3) fail(field, "expected [kernel, stride, padding]");
  return {xs[0], xs[1], xs[2]};
}

}  // namespace

AttentionMode attention_from_string(const std::string& name) {
  if (name == "gated") return AttentionMode::gated;
  if (name == "uniform") return AttentionMode::uniform;
  throw ConfigError("attention: unknown mode '" + name + "' (expected gated or uniform)");
}

std::string to_string(AttentionMode m) { return m == AttentionMode::gated ? "gated" : "uniform"; }

PatchSelection selection_from_string(const std::string& name) {
  if (name == "saliency") return PatchSelection::saliency;
  if (name == "random") return PatchSelection::random;
  throw ConfigError("selection: unknown mode '" + name + "' (expected saliency or random)");
}

std::string to_string(PatchSelection s) { return s == PatchSelection::saliency ? "saliency" : "random"; }

Json to_json(const NetworkConfig& c) {
  Json j;
  j["input_height"] = c.input_height;
  j["input_width"] = c.input_width;
  j["downsample_factor"] = c.downsample_factor;
  j["global_channels"] = c.global_channels;
  j["global_blocks"] = c.global_blocks;
  j["global_strides"] = c.global_strides;
  j["global_first_conv"] = conv_json(c.global_first_conv);
  j["global_first_pool"] = conv_json(c.global_first_pool);
  j["local_variant"] = to_string(c.local_variant);
  j["local_channels"] = c.local_channels;
  j["local_strides"] = c.local_strides;
  j["local_first_conv"] = conv_json(c.local_first_conv);
  j["local_first_pool"] = conv_json(c.local_first_pool);
  j["patch_size"] = c.patch_size;
  j["num_patches"] = c.num_patches;
  j["embedding_dim"] = c.embedding_dim;
  j["attention_dim"] = c.attention_dim;
  return j;
}

NetworkConfig network_from_json(const Json& j, NetworkConfig c) {
  Section s(j, "network");
  s.read("input_height", c.input_height);
  s.read("input_width", c.input_width);
  s.read("downsample_factor", c.downsample_factor);
  s.read("global_channels", c.global_channels);
  s.read("global_blocks", c.global_blocks);
  s.read("global_strides", c.global_strides);
  s.read_with("global_first_conv", [&](const Json& v, const std::string& f) { c.global_first_conv = conv_from_json(v, f); });
  s.read_with("global_first_pool", [&](const Json& v, const std::string& f) { c.global_first_pool = conv_from_json(v, f); });
  s.read_with("local_variant", [&](const Json& v, const std::string& f) {
    c.local_variant = local_variant_from_string(Section::convert<std::string>(v, f));
  });
  s.read("local_channels", c.local_channels);
  s.read("local_strides", c.local_strides);
  s.read_with("local_first_conv", [&](const Json& v, const std::string& f) { c.local_first_conv = conv_from_json(v, f); });
  s.read_with("local_first_pool", [&](const Json& v, const std::string& f) { c.local_first_pool = conv_from_json(v, f); });
  s.read("patch_size", c.patch_size);
  s.read("num_patches", c.num_patches);
  s.read("embedding_dim", c.embedding_dim);
  s.read("attention_dim", c.attention_dim);
  s.finish();
  return c;
}

Json to_json(const TrainConfig& c) {
  Json j;
  j["learning_rate"] = c.learning_rate;
  j["reg_weight"] = c.reg_weight;
  j["pool_fraction"] = c.pool_fraction;
  j["epochs"] = c.epochs;
  j["patience"] = c.patience;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["augment"] = c.augment;
  j["max_translation"] = c.augmentation.max_translation;
  j["max_scale"] = c.augmentation.max_scale;
  j["rotate_patches"] = c.rotate_patches;
  j["attention"] = to_string(c.attention);
  j["selection"] = to_string(c.selection);
  j["threads"] = c.threads;
  return j;
}

TrainConfig train_from_json(const Json& j, TrainConfig c) {
  Section s(j, "train");
  s.read("learning_rate", c.learning_rate);
  s.read("reg_weight", c.reg_weight);
  s.read("pool_fraction", c.pool_fraction);
  s.read("epochs", c.epochs);
  s.read("patience", c.patience);
  s.read("batch_size", c.batch_size);
  s.read("seed", c.seed);
  s.read("augment", c.augment);
  s.read("max_translation", c.augmentation.max_translation);
  s.read("max_scale", c.augmentation.max_scale);
  s.read("rotate_patches", c.rotate_patches);
  s.read_with("attention", [&](const Json& v, const std::string& f) {
    c.attention = attention_from_string(Section::convert<std::string>(v, f));
  });
  s.read_with("selection", [&](const Json& v, const std::string& f) {
    c.selection = selection_from_string(Section::convert<std::string>(v, f));
  });
  s.read("threads", c.threads);
  s.finish();
  return c;
}

Json to_json(const SynthConfig& c) {
  Json j;
  j["height"] = c.height;
  j["width"] = c.width;
  j["n_train"] = c.n_train;
  j["n_val"] = c.n_val;
  j["n_test"] = c.n_test;
  j["prevalence_benign"] = c.prevalence_benign;
  j["prevalence_malignant"] = c.prevalence_malignant;
  j["benign_radius_min"] = c.benign_radius_min;
  j["benign_radius_max"] = c.benign_radius_max;
  j["malignant_radius_min"] = c.malignant_radius_min;
  j["malignant_radius_max"] = c.malignant_radius_max;
  j["noise_octaves"] = c.noise_octaves;
  j["texture_contrast"] = c.texture_contrast;
  j["pixel_noise"] = c.pixel_noise;
  j["benign_contrast"] = c.benign_contrast;
  j["malignant_contrast"] = c.malignant_contrast;
  j["seed"] = c.seed;
  return j;
}

SynthConfig synth_from_json(const Json& j, SynthConfig c) {
  Section s(j, "synth");
  s.read("height", c.height);
  s.read("width", c.width);
  s.read("n_train", c.n_train);
  s.read("n_val", c.n_val);
  s.read("n_test", c.n_test);
  s.read("prevalence_benign", c.prevalence_benign);
  s.read("prevalence_malignant", c.prevalence_malignant);
  s.read("benign_radius_min", c.benign_radius_min);
  s.read("benign_radius_max", c.benign_radius_max);
  s.read("malignant_radius_min", c.malignant_radius_min);
  s.read("malignant_radius_max", c.malignant_radius_max);
  s.read("noise_octaves", c.noise_octaves);
  s.read("texture_contrast", c.texture_contrast);
  s.read("pixel_noise", c.pixel_noise);
  s.read("benign_contrast", c.benign_contrast);
  s.read("malignant_contrast", c.malignant_contrast);
  s.read("seed", c.seed);
  s.finish();
  return c;
}

Json to_json(const RunConfig& c) {
  Json j;
  j["network"] = to_json(c.network);
  j["train"] = to_json(c.train);
  j["synth"] = to_json(c.synth);
  return j;
}

void RunConfig::validate() const {
  auto prefixed = [](const char* section, auto&& check) {
    try {
      check();
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      // TrainConfig/SynthConfig messages already carry a type prefix
      throw ConfigError(msg.rfind("TrainConfig.", 0) == 0 || msg.rfind("SynthConfig", 0) == 0
                            ? msg
                            : std::string(section) + "." + msg);
    }
  };
  prefixed("network", [&] { network.validate(); });
  prefixed("train", [&] { train.validate(); });
  prefixed("synth", [&] { synth.validate(); });
  if (synth.height != network.input_height || synth.width != network.input_width)
    throw ConfigError("synth.height/width: images are " + std::to_string(synth.height) + "x" +
                      std::to_string(synth.width) + " but the network expects " +
                      std::to_string(network.input_height) + "x" + std::to_string(network.input_width));
}

RunConfig run_config_from_json(const Json& j) {
  if (!j.is_object()) fail("config", "expected a JSON object");
  RunConfig c;
  Section s(j, "config");
  s.read_with("preset", [&](const Json& v, const std::string& f) {
    const auto name = Section::convert<std::string>(v, f);
    if (name == "desk")
      c.network = NetworkConfig::desk();
    else if (name == "paper-scale") {
      c.network = NetworkConfig::paper_scale();
      c.synth.height = c.network.input_height;
      c.synth.width = c.network.input_width;
    } else
      fail(f, "unknown preset '" + name + "' (expected desk or paper-scale)");
  });
  s.read_with("network", [&](const Json& v, const std::string&) { c.network = network_from_json(v, c.network); });
  s.read_with("train", [&](const Json& v, const std::string&) { c.train = train_from_json(v, c.train); });
  s.read_with("synth", [&](const Json& v, const std::string&) { c.synth = synth_from_json(v, c.synth); });
  s.finish();
  c.validate();
  return c;
}

void apply_override(Json& doc, const std::string& dotted, const std::string& value) {
  Json* node = &doc;
  std::stringstream parts(dotted);
  std::string part;
  std::vector<std::string> keys;
  while (std::getline(parts, part, '.')) keys.push_back(part);
  if (keys.empty() || dotted.empty()) fail("override", "empty key");
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
    if (!node->is_object()) fail(dotted, "cannot descend into a non-object");
    node = &(*node)[keys[i]];
    if (node->is_null()) *node = Json::object();
  }
  Json parsed = Json::parse(value, nullptr, false);
  (*node)[keys.back()] = parsed.is_discarded() ? Json(value) : parsed;
}

Json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  Json j = Json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config '" + path.string() + "' is not valid JSON");
  return j;
}

void write_json(const std::filesystem::path& path, const Json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

}  // namespace gmic
