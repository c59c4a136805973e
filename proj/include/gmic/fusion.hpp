// Fusion head and the full two-stage model.
#pragma once

#include "gmic/attention.hpp"
#include "gmic/networks.hpp"
#include "gmic/roi.hpp"
#include "gmic/saliency.hpp"

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

namespace gmic {

/// sigm([GMP(h_g), z] W + b): W [C_g + L, 2], b [2].
template <typename Scalar>
struct FusionHead {
  Var<Scalar> weight;
  Var<Scalar> bias;

  FusionHead() = default;
  FusionHead(Index global_channels, Index embedding_dim, std::mt19937_64& rng);
};

template <typename Scalar>
Var<Scalar> fusion_head(const Var<Scalar>& global_features, const Var<Scalar>& z, const FusionHead<Scalar>& head);

enum class AttentionMode { gated, uniform };
enum class PatchSelection { saliency, random };

template <typename Scalar>
struct ForwardOptions {
  NormMode mode = NormMode::eval;
  /// Top-t% pooling fraction.
  double pool_fraction = 0.05;
  AttentionMode attention = AttentionMode::gated;
  PatchSelection selection = PatchSelection::saliency;
  /// Source of randomness for random patch selection.
  std::mt19937_64* rng = nullptr;
  /// Applied to each image's cropped [K,1,p,p] patches before the local network.
  std::function<void(Tensor<Scalar>&)> patch_transform;
};

template <typename Scalar>
struct PatchSet {
  std::vector<RoiWindow> windows;
  Tensor<Scalar> patches;  // [K,1,h_c,w_c]
};

template <typename Scalar>
struct ModelOutputs {
  Var<Scalar> global_features;  // h_g [N,C_g,h,w]
  Var<Scalar> saliency;         // A [N,2,h,w]
  Var<Scalar> y_global;         // [N,2]
  Var<Scalar> y_local;          // [N,2]
  Var<Scalar> y_fusion;         // [N,2]
  Var<Scalar> alpha;            // [N,K]
  std::vector<PatchSet<Scalar>> patchsets;
};

template <typename Scalar>
class GmicModel {
 public:
  GmicModel(const NetworkConfig& cfg, std::uint64_t seed);
  GmicModel(const GmicModel&) = delete;
  GmicModel& operator=(const GmicModel&) = delete;

  /// images [N,1,H,W]
  ModelOutputs<Scalar> forward(const Tensor<Scalar>& images, const ForwardOptions<Scalar>& options);

  NamedParameters<Scalar> named_parameters();
  /// Parameters of the global branch (f_g and saliency head) and of the local
  /// branch (f_l, attention, local head); the fusion head is in neither.
  NamedParameters<Scalar> global_parameters();
  NamedParameters<Scalar> local_parameters();
  void zero_grad();

  const NetworkConfig& config() const { return cfg_; }

 private:
  NetworkConfig cfg_;
  std::mt19937_64 init_rng_;
  GlobalNetwork<Scalar> global_;
  SaliencyHead<Scalar> saliency_;
  LocalNetwork<Scalar> local_;
  AttentionParams<Scalar> attention_;
  LocalHead<Scalar> local_head_;
  FusionHead<Scalar> fusion_;
};

template <typename Scalar>
ModelOutputs<Scalar> gmic_forward(const Tensor<Scalar>& images, GmicModel<Scalar>& model,
                                  const ForwardOptions<Scalar>& options) {
  return model.forward(images, options);
}

}  // namespace gmic
