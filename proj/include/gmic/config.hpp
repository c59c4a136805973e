// JSON form of the network, training and data configs, with dotted-key
// overrides ("train.learning_rate=1e-4").
#pragma once

#include "gmic/synthetic.hpp"
#include "gmic/training.hpp"

#include "json.hpp"

#include <filesystem>
#include <string>

namespace gmic {

using Json = nlohmann::ordered_json;

struct RunConfig {
  NetworkConfig network;
  TrainConfig train;
  SynthConfig synth;

  /// Throws ConfigError naming the first invalid field.
  void validate() const;
  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

Json to_json(const NetworkConfig& cfg);
Json to_json(const TrainConfig& cfg);
Json to_json(const SynthConfig& cfg);
Json to_json(const RunConfig& cfg);

/// Keys absent from `j` keep the value in `base`; unknown keys and values of
/// the wrong type raise ConfigError naming the field.
NetworkConfig network_from_json(const Json& j, NetworkConfig base = {});
TrainConfig train_from_json(const Json& j, TrainConfig base = {});
SynthConfig synth_from_json(const Json& j, SynthConfig base = {});
/// Top-level keys: "preset" ("desk" or "paper-scale"), "network", "train", "synth".
RunConfig run_config_from_json(const Json& j);

/// Sets `dotted` (e.g. "synth.n_train") in `doc`. The value is parsed as JSON
/// when possible and taken as a string otherwise.
void apply_override(Json& doc, const std::string& dotted, const std::string& value);

Json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const Json& j);

AttentionMode attention_from_string(const std::string& name);
std::string to_string(AttentionMode m);
PatchSelection selection_from_string(const std::string& name);
std::string to_string(PatchSelection s);

}  // namespace gmic
