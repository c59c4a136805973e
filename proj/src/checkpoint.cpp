#include "gmic/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <unordered_map>

namespace gmic {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'G', 'M', 'I', 'C', 'C', 'K', 'P', 'T'};

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const std::filesystem::path& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw ConfigError("checkpoint " + path.string() + " is truncated");
  return v;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const StateDict& state) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(state.size()));
  for (const auto& [name, t] : state) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) put<std::int64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

StateDict read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw ConfigError(path.string() + " is not a checkpoint file");
  const auto version = get<std::uint32_t>(in, path);
  if (version != kCheckpointVersion)
    throw ConfigError("checkpoint " + path.string() + " has version " + std::to_string(version) + ", expected " +
                      std::to_string(kCheckpointVersion));
  const auto count = get<std::uint32_t>(in, path);
  StateDict state;
  state.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(get<std::uint32_t>(in, path), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    const auto rank = get<std::uint32_t>(in, path);
    Shape shape(rank);
    for (auto& d : shape) {
      d = get<std::int64_t>(in, path);
      if (d < 0) throw ConfigError("checkpoint " + path.string() + ": negative dimension in '" + name + "'");
    }
    Tensor<float> t(shape);
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!in) throw ConfigError("checkpoint " + path.string() + " is truncated");
    state.emplace_back(std::move(name), std::move(t));
  }
  return state;
}

const Tensor<float>* find_entry(const StateDict& state, const std::string& name) {
  for (const auto& [n, t] : state)
    if (n == name) return &t;
  return nullptr;
}

template <typename Scalar>
StateDict state_dict(const NamedParameters<Scalar>& params) {
  StateDict out;
  for (const auto& [name, p] : params.parameters) out.emplace_back(name, p.value().template cast<float>());
  for (const auto& [name, s] : params.norm_states) {
    out.emplace_back(name + ".running_mean", s->running_mean.template cast<float>());
    out.emplace_back(name + ".running_var", s->running_var.template cast<float>());
  }
  return out;
}

template <typename Scalar>
void load_state_dict(NamedParameters<Scalar>& params, const StateDict& state) {
  std::unordered_map<std::string, const Tensor<float>*> index;
  for (const auto& [n, t] : state) index.emplace(n, &t);
  auto fetch = [&](const std::string& name, const Shape& shape) -> const Tensor<float>& {
    const auto it = index.find(name);
    if (it == index.end()) throw ConfigError("checkpoint lacks '" + name + "'");
    if (it->second->shape() != shape)
      throw ConfigError("checkpoint entry '" + name + "' has shape " + shape_string(it->second->shape()) +
                        ", model expects " + shape_string(shape));
    return *it->second;
  };
  for (auto& [name, p] : params.parameters) p.mutable_value() = fetch(name, p.shape()).template cast<Scalar>();
  for (auto& [name, s] : params.norm_states) {
    s->running_mean = fetch(name + ".running_mean", s->running_mean.shape()).template cast<Scalar>();
    s->running_var = fetch(name + ".running_var", s->running_var.shape()).template cast<Scalar>();
  }
}

template StateDict state_dict(const NamedParameters<float>&);
template StateDict state_dict(const NamedParameters<double>&);
template void load_state_dict(NamedParameters<float>&, const StateDict&);
template void load_state_dict(NamedParameters<double>&, const StateDict&);

}  // namespace gmic
