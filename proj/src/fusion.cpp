#include "gmic/fusion.hpp"

#include <cmath>

namespace gmic {

template <typename Scalar>
FusionHead<Scalar>::FusionHead(Index global_channels, Index embedding_dim, std::mt19937_64& rng) {
  const Index fan_in = global_channels + embedding_dim;
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + 2));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<Scalar> w(Shape{fan_in, 2});
  for (Index i = 0; i < w.size(); ++i) w[i] = static_cast<Scalar>(dist(rng));
  weight = parameter(std::move(w));
  bias = parameter(Tensor<Scalar>(Shape{2}, Scalar(0)));
}

template <typename Scalar>
Var<Scalar> fusion_head(const Var<Scalar>& global_features, const Var<Scalar>& z, const FusionHead<Scalar>& head) {
  Var<Scalar> joint = concat_columns(global_max_pool(global_features), z);
  if (joint.dim(1) != head.weight.dim(0))
    throw DimensionError("fusion_head: concatenated features " + shape_string(joint.shape()) +
                         " do not match weight " + shape_string(head.weight.shape()));
  return sigmoid(linear(joint, head.weight, head.bias));
}

template <typename Scalar>
GmicModel<Scalar>::GmicModel(const NetworkConfig& cfg, std::uint64_t seed)
    : cfg_(cfg),
      init_rng_(seed),
      global_(cfg, init_rng_),
      saliency_(cfg.global_feature_dim(), init_rng_),
      local_(cfg, init_rng_),
      attention_(cfg.embedding_dim, cfg.attention_dim, init_rng_),
      local_head_(cfg.embedding_dim, init_rng_),
      fusion_(cfg.global_feature_dim(), cfg.embedding_dim, init_rng_) {}

template <typename Scalar>
ModelOutputs<Scalar> GmicModel<Scalar>::forward(const Tensor<Scalar>& images, const ForwardOptions<Scalar>& options) {
  if (images.rank() != 4)
    throw DimensionError("gmic forward: expected [N,1,H,W] images, got " + shape_string(images.shape()));
  const Index N = images.dim(0), H = cfg_.input_height, W = cfg_.input_width;
  const Index h = cfg_.saliency_height(), w = cfg_.saliency_width();
  const Index K = cfg_.num_patches, P = cfg_.patch_size;

  ModelOutputs<Scalar> out;
  out.global_features = global_.forward(constant(images), options.mode);
  out.saliency = saliency_head(out.global_features, saliency_);
  out.y_global = topk_mean_pool(out.saliency, options.pool_fraction);

  Tensor<Scalar> patches(Shape{N * K, 1, P, P});
  const Tensor<Scalar>& sal = out.saliency.value();
  for (Index n = 0; n < N; ++n) {
    PatchSet<Scalar> set;
    if (options.selection == PatchSelection::random) {
      if (!options.rng) throw ConfigError("random patch selection needs an rng");
      set.windows = random_windows(H, W, P, cfg_.downsample_factor, static_cast<int>(K), *options.rng);
    } else {
      Tensor<Scalar> maps(Shape{2, h, w}, Eigen::Map<const ArrayX<Scalar>>(sal.data() + n * 2 * h * w, 2 * h * w));
      set.windows = retrieve_roi(maps, cfg_.window_cells(), cfg_.window_cells(), static_cast<int>(K));
      map_to_pixels(set.windows, cfg_.downsample_factor, P, H, W);
    }
    Tensor<Scalar> image(Shape{H, W}, Eigen::Map<const ArrayX<Scalar>>(images.data() + n * H * W, H * W));
    set.patches = crop_patches(image, set.windows, P);
    if (options.patch_transform) options.patch_transform(set.patches);
    patches.array().segment(n * K * P * P, K * P * P) = set.patches.array();
    out.patchsets.push_back(std::move(set));
  }

  Var<Scalar> embeddings = local_.forward(constant(std::move(patches)), options.mode);
  if (options.attention == AttentionMode::uniform)
    out.alpha = constant(Tensor<Scalar>(Shape{N, K}, Scalar(1) / Scalar(K)));
  else
    out.alpha = gated_attention(embeddings, attention_, K);
  Var<Scalar> z = attention_pool(embeddings, out.alpha);
  out.y_local = local_head(z, local_head_);
  out.y_fusion = fusion_head(out.global_features, z, fusion_);
  return out;
}

template <typename Scalar>
NamedParameters<Scalar> GmicModel<Scalar>::global_parameters() {
  NamedParameters<Scalar> out;
  global_.collect("global", out);
  out.parameters.emplace_back("saliency.weight", saliency_.weight);
  out.parameters.emplace_back("saliency.bias", saliency_.bias);
  return out;
}

template <typename Scalar>
NamedParameters<Scalar> GmicModel<Scalar>::local_parameters() {
  NamedParameters<Scalar> out;
  local_.collect("local", out);
  out.parameters.emplace_back("attention.V", attention_.V);
  out.parameters.emplace_back("attention.U", attention_.U);
  out.parameters.emplace_back("attention.w", attention_.w);
  out.parameters.emplace_back("local_head.weight", local_head_.weight);
  out.parameters.emplace_back("local_head.bias", local_head_.bias);
  return out;
}

template <typename Scalar>
NamedParameters<Scalar> GmicModel<Scalar>::named_parameters() {
  NamedParameters<Scalar> out = global_parameters();
  NamedParameters<Scalar> local = local_parameters();
  out.parameters.insert(out.parameters.end(), local.parameters.begin(), local.parameters.end());
  out.norm_states.insert(out.norm_states.end(), local.norm_states.begin(), local.norm_states.end());
  out.parameters.emplace_back("fusion.weight", fusion_.weight);
  out.parameters.emplace_back("fusion.bias", fusion_.bias);
  return out;
}

template <typename Scalar>
void GmicModel<Scalar>::zero_grad() {
  for (auto& [name, p] : named_parameters().parameters) p.zero_grad();
}

#define GMIC_INSTANTIATE_FUSION(T)                                                    \
  template struct FusionHead<T>;                                                      \
  template Var<T> fusion_head(const Var<T>&, const Var<T>&, const FusionHead<T>&);    \
  template class GmicModel<T>;

GMIC_INSTANTIATE_FUSION(float)
GMIC_INSTANTIATE_FUSION(double)

}  // namespace gmic
