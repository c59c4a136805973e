#include "gmic/networks.hpp"

#include <cmath>
#include <numeric>

namespace gmic {

std::string to_string(LocalVariant v) {
  switch (v) {
    case LocalVariant::tiny18: return "tiny-18";
    case LocalVariant::tiny34: return "tiny-34";
    case LocalVariant::tiny50: return "tiny-50";
  }
  return "?";
}

LocalVariant local_variant_from_string(const std::string& name) {
  if (name == "tiny-18" || name == "tiny18") return LocalVariant::tiny18;
  if (name == "tiny-34" || name == "tiny34") return LocalVariant::tiny34;
  if (name == "tiny-50" || name == "tiny50") return LocalVariant::tiny50;
  throw ConfigError("local_variant: unknown variant '" + name + "' (expected tiny-18, tiny-34 or tiny-50)");
}

NetworkConfig NetworkConfig::desk() { return NetworkConfig{}; }

NetworkConfig NetworkConfig::paper_scale() {
  NetworkConfig cfg;
  cfg.input_height = 2944;
  cfg.input_width = 1920;
  cfg.downsample_factor = 64;
  cfg.global_channels = {16, 32, 64, 128, 256};
  cfg.global_blocks = {2, 2, 2, 2, 2};
  cfg.global_strides = {1, 2, 2, 2, 2};
  cfg.global_first_conv = {7, 2, 3};
  cfg.global_first_pool = {3, 2, 1};
  cfg.local_variant = LocalVariant::tiny18;
  cfg.local_channels = {64, 128, 256, 512};
  cfg.local_strides = {1, 2, 2, 2};
  cfg.local_first_conv = {7, 2, 3};
  cfg.local_first_pool = {3, 2, 1};
  cfg.patch_size = 256;
  cfg.num_patches = 6;
  cfg.embedding_dim = 512;
  cfg.attention_dim = 128;
  return cfg;
}

std::vector<int> NetworkConfig::local_blocks() const {
  const std::size_t stages = local_channels.size();
  std::vector<int> base = local_variant == LocalVariant::tiny18 ? std::vector<int>{2, 2, 2, 2}
                                                                 : std::vector<int>{3, 4, 6, 3};
  base.resize(stages, base.back());
  return base;
}

namespace {

void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw ConfigError(field + ": " + what);
}

int stride_product(const std::vector<int>& strides) {
  return std::accumulate(strides.begin(), strides.end(), 1, std::multiplies<>());
}

}  // namespace

void NetworkConfig::validate() const {
  require(input_height > 0 && input_width > 0, "input_height/input_width", "must be positive");
  require(downsample_factor >= 1, "downsample_factor", "must be >= 1");
  require(input_height % downsample_factor == 0, "input_height",
          std::to_string(input_height) + " is not a multiple of downsample_factor " + std::to_string(downsample_factor));
  require(input_width % downsample_factor == 0, "input_width",
          std::to_string(input_width) + " is not a multiple of downsample_factor " + std::to_string(downsample_factor));
  require(!global_channels.empty(), "global_channels", "must not be empty");
  require(global_blocks.size() == global_channels.size(), "global_blocks", "needs one entry per global stage");
  require(global_strides.size() == global_channels.size(), "global_strides", "needs one entry per global stage");
  for (int b : global_blocks) require(b >= 1, "global_blocks", "every stage needs at least one block");
  for (int s : global_strides) require(s >= 1, "global_strides", "strides must be >= 1");
  const int pool_stride = global_first_pool.kernel > 0 ? global_first_pool.stride : 1;
  require(global_first_conv.stride * pool_stride * stride_product(global_strides) == downsample_factor,
          "global_strides", "cumulative stride does not equal downsample_factor " + std::to_string(downsample_factor));
  require(!local_channels.empty(), "local_channels", "must not be empty");
  require(local_strides.size() == local_channels.size(), "local_strides", "needs one entry per local stage");
  require(patch_size > 0, "patch_size", "must be positive");
  require(patch_size % downsample_factor == 0, "patch_size",
          std::to_string(patch_size) + " is not a multiple of downsample_factor " + std::to_string(downsample_factor));
  require(patch_size <= input_height && patch_size <= input_width, "patch_size", "exceeds the image");
  require(num_patches >= 1, "num_patches", "K must be >= 1");
  require(embedding_dim >= 1, "embedding_dim", "L must be >= 1");
  require(attention_dim >= 1, "attention_dim", "M must be >= 1");
}

template <typename Scalar>
Tensor<Scalar> he_normal(Shape shape, Index fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  Tensor<Scalar> t(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t[i] = static_cast<Scalar>(dist(rng));
  return t;
}

template <typename Scalar>
Conv<Scalar>::Conv(Index in, Index out, ConvSpec s, std::mt19937_64& rng)
    : weight(parameter(he_normal<Scalar>({out, in, s.kernel, s.kernel}, in * s.kernel * s.kernel, rng))), spec(s) {}

template <typename Scalar>
Norm<Scalar>::Norm(Index channels)
    : gamma(parameter(Tensor<Scalar>(Shape{channels}, Scalar(1)))),
      beta(parameter(Tensor<Scalar>(Shape{channels}, Scalar(0)))),
      state(channels) {}

template <typename Scalar>
ResidualBlock<Scalar>::ResidualBlock(Index in, Index out, int stride, bool bottleneck, std::mt19937_64& rng)
    : out_channels_(out) {
  if (bottleneck) {
    const Index mid = std::max<Index>(1, out / 4);
    norms_ = {Norm<Scalar>(in), Norm<Scalar>(mid), Norm<Scalar>(mid)};
    convs_.emplace_back(in, mid, ConvSpec{1, 1, 0}, rng);
    convs_.emplace_back(mid, mid, ConvSpec{3, stride, 1}, rng);
    convs_.emplace_back(mid, out, ConvSpec{1, 1, 0}, rng);
  } else {
    norms_ = {Norm<Scalar>(in), Norm<Scalar>(out)};
    convs_.emplace_back(in, out, ConvSpec{3, stride, 1}, rng);
    convs_.emplace_back(out, out, ConvSpec{3, 1, 1}, rng);
  }
  if (stride != 1 || in != out) shortcut_.emplace(in, out, ConvSpec{1, stride, 0}, rng);
}

template <typename Scalar>
Var<Scalar> ResidualBlock<Scalar>::forward(const Var<Scalar>& x, NormMode mode) {
  Var<Scalar> pre = relu(norms_[0](x, mode));
  Var<Scalar> skip = shortcut_ ? (*shortcut_)(pre) : x;
  Var<Scalar> h = convs_[0](pre);
  for (std::size_t i = 1; i < convs_.size(); ++i) h = convs_[i](relu(norms_[i](h, mode)));
  return add(h, skip);
}

template <typename Scalar>
void ResidualBlock<Scalar>::collect(const std::string& prefix, NamedParameters<Scalar>& out) {
  for (std::size_t i = 0; i < convs_.size(); ++i) {
    const std::string idx = std::to_string(i + 1);
    out.parameters.emplace_back(prefix + ".bn" + idx + ".gamma", norms_[i].gamma);
    out.parameters.emplace_back(prefix + ".bn" + idx + ".beta", norms_[i].beta);
    out.norm_states.emplace_back(prefix + ".bn" + idx, &norms_[i].state);
    out.parameters.emplace_back(prefix + ".conv" + idx + ".weight", convs_[i].weight);
  }
  if (shortcut_) out.parameters.emplace_back(prefix + ".shortcut.weight", shortcut_->weight);
}

template <typename Scalar>
ResidualTrunk<Scalar>::ResidualTrunk(ConvSpec first_conv, ConvSpec first_pool, const std::vector<Index>& channels,
                                     const std::vector<int>& blocks, const std::vector<int>& strides, bool bottleneck,
                                     std::mt19937_64& rng)
    : stem_(1, channels.front(), first_conv, rng), pool_(first_pool), out_channels_(channels.back()) {
  Index in = channels.front();
  for (std::size_t s = 0; s < channels.size(); ++s)
    for (int b = 0; b < blocks[s]; ++b) {
      blocks_.emplace_back(in, channels[s], b == 0 ? strides[s] : 1, bottleneck, rng);
      in = channels[s];
    }
  final_norm_ = Norm<Scalar>(out_channels_);
}

template <typename Scalar>
Var<Scalar> ResidualTrunk<Scalar>::forward(const Var<Scalar>& x, NormMode mode) {
  Var<Scalar> h = stem_(x);
  if (pool_.kernel > 0) h = max_pool2d(h, pool_.kernel, pool_.stride, pool_.padding);
  for (auto& block : blocks_) h = block.forward(h, mode);
  return relu(final_norm_(h, mode));
}

template <typename Scalar>
void ResidualTrunk<Scalar>::collect(const std::string& prefix, NamedParameters<Scalar>& out) {
  out.parameters.emplace_back(prefix + ".stem.weight", stem_.weight);
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(prefix + ".block" + std::to_string(i), out);
  out.parameters.emplace_back(prefix + ".final_bn.gamma", final_norm_.gamma);
  out.parameters.emplace_back(prefix + ".final_bn.beta", final_norm_.beta);
  out.norm_states.emplace_back(prefix + ".final_bn", &final_norm_.state);
}

template <typename Scalar>
GlobalNetwork<Scalar>::GlobalNetwork(const NetworkConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg),
      trunk_(cfg.global_first_conv, cfg.global_first_pool, cfg.global_channels, cfg.global_blocks,
             cfg.global_strides, false, rng) {
  cfg_.validate();
}

template <typename Scalar>
Var<Scalar> GlobalNetwork<Scalar>::forward(const Var<Scalar>& x, NormMode mode) {
  if (x.value().rank() != 4 || x.dim(1) != 1 || x.dim(2) != cfg_.input_height || x.dim(3) != cfg_.input_width)
    throw DimensionError("global network expects [N,1," + std::to_string(cfg_.input_height) + "," +
                         std::to_string(cfg_.input_width) + "], got " + shape_string(x.shape()));
  Var<Scalar> h = trunk_.forward(x, mode);
  if (h.dim(2) != cfg_.saliency_height() || h.dim(3) != cfg_.saliency_width())
    throw DimensionError("global network produced " + shape_string(h.shape()) + ", expected a " +
                         std::to_string(cfg_.saliency_height()) + "x" + std::to_string(cfg_.saliency_width()) +
                         " grid");
  return h;
}

template <typename Scalar>
LocalNetwork<Scalar>::LocalNetwork(const NetworkConfig& cfg, std::mt19937_64& rng)
    : cfg_(cfg),
      trunk_(cfg.local_first_conv, cfg.local_first_pool, cfg.local_channels, cfg.local_blocks(), cfg.local_strides,
             cfg.local_variant == LocalVariant::tiny50, rng) {
  cfg_.validate();
  const Index feat = trunk_.out_channels();
  proj_weight_ = parameter(he_normal<Scalar>({feat, cfg.embedding_dim}, feat, rng));
  proj_bias_ = parameter(Tensor<Scalar>(Shape{cfg.embedding_dim}, Scalar(0)));
}

template <typename Scalar>
Var<Scalar> LocalNetwork<Scalar>::forward(const Var<Scalar>& patches, NormMode mode) {
  if (patches.value().rank() != 4 || patches.dim(1) != 1 || patches.dim(2) != cfg_.patch_size ||
      patches.dim(3) != cfg_.patch_size)
    throw DimensionError("local network expects [N*K,1," + std::to_string(cfg_.patch_size) + "," +
                         std::to_string(cfg_.patch_size) + "], got " + shape_string(patches.shape()));
  return linear(global_avg_pool(trunk_.forward(patches, mode)), proj_weight_, proj_bias_);
}

template <typename Scalar>
void LocalNetwork<Scalar>::collect(const std::string& prefix, NamedParameters<Scalar>& out) {
  trunk_.collect(prefix, out);
  out.parameters.emplace_back(prefix + ".proj.weight", proj_weight_);
  out.parameters.emplace_back(prefix + ".proj.bias", proj_bias_);
}

#define GMIC_INSTANTIATE_NETWORKS(T)                                       \
  template Tensor<T> he_normal<T>(Shape, Index, std::mt19937_64&);         \
  template struct Conv<T>;                                                 \
  template struct Norm<T>;                                                 \
  template class ResidualBlock<T>;                                         \
  template class ResidualTrunk<T>;                                         \
  template class GlobalNetwork<T>;                                         \
  template class LocalNetwork<T>;

GMIC_INSTANTIATE_NETWORKS(float)
GMIC_INSTANTIATE_NETWORKS(double)

}  // namespace gmic
