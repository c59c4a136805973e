// Global (narrow, deep) and local (wide) residual feature extractors.
#pragma once

#include "gmic/autodiff.hpp"

#include <cstdint>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace gmic {

struct ConvSpec {
  int kernel = 3;
  int stride = 1;
  int padding = 1;
  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

enum class LocalVariant { tiny18, tiny34, tiny50 };

std::string to_string(LocalVariant v);
LocalVariant local_variant_from_string(const std::string& name);

struct NetworkConfig {
  Index input_height = 128;
  Index input_width = 128;
  int downsample_factor = 16;

  std::vector<Index> global_channels{8, 16, 24, 32, 48};
  std::vector<int> global_blocks{1, 1, 1, 1, 1};
  std::vector<int> global_strides{1, 2, 2, 1, 1};
  ConvSpec global_first_conv{7, 2, 3};
  /// kernel 0 disables the stem pooling layer
  ConvSpec global_first_pool{3, 2, 1};

  LocalVariant local_variant = LocalVariant::tiny18;
  std::vector<Index> local_channels{16, 32, 64, 128};
  std::vector<int> local_strides{1, 2, 2, 2};
  ConvSpec local_first_conv{5, 2, 2};
  ConvSpec local_first_pool{3, 2, 1};

  Index patch_size = 32;
  int num_patches = 6;
  Index embedding_dim = 128;  // L
  Index attention_dim = 32;   // M

  /// Laptop-sized defaults.
  static NetworkConfig desk();
  /// Full-resolution layout: 2944x1920 input, 46x30 saliency grid, 256px patches.
  /// Global network follows the ResNet-22 layout (stem conv + pool, five
  /// stages of two pre-activation blocks, widths 16..256, strides 1,2,2,2,2).
  static NetworkConfig paper_scale();

  Index saliency_height() const { return input_height / downsample_factor; }
  Index saliency_width() const { return input_width / downsample_factor; }
  /// Side of the ROI window in saliency-grid cells.
  Index window_cells() const { return patch_size / downsample_factor; }
  Index global_feature_dim() const { return global_channels.back(); }
  std::vector<int> local_blocks() const;

  /// Throws ConfigError naming the offending field.
  void validate() const;

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

template <typename Scalar>
struct NamedParameters {
  std::vector<std::pair<std::string, Var<Scalar>>> parameters;
  std::vector<std::pair<std::string, BatchNormState<Scalar>*>> norm_states;

  Index parameter_count() const {
    Index n = 0;
    for (const auto& [name, p] : parameters) n += p.value().size();
    return n;
  }
};

template <typename Scalar>
struct Conv {
  Var<Scalar> weight;  // [O, C, k, k]
  ConvSpec spec;

  Conv() = default;
  Conv(Index in, Index out, ConvSpec s, std::mt19937_64& rng);
  Var<Scalar> operator()(const Var<Scalar>& x) const { return conv2d(x, weight, spec.stride, spec.padding); }
};

template <typename Scalar>
struct Norm {
  Var<Scalar> gamma;
  Var<Scalar> beta;
  BatchNormState<Scalar> state;

  Norm() = default;
  explicit Norm(Index channels);
  Var<Scalar> operator()(const Var<Scalar>& x, NormMode mode) { return batchnorm2d(x, gamma, beta, state, mode); }
};

/// Pre-activation residual block, basic (two 3x3) or bottleneck (1x1-3x3-1x1).
template <typename Scalar>
class ResidualBlock {
 public:
  ResidualBlock(Index in, Index out, int stride, bool bottleneck, std::mt19937_64& rng);
  Var<Scalar> forward(const Var<Scalar>& x, NormMode mode);
  void collect(const std::string& prefix, NamedParameters<Scalar>& out);
  Index out_channels() const { return out_channels_; }

 private:
  std::vector<Norm<Scalar>> norms_;
  std::vector<Conv<Scalar>> convs_;
  std::optional<Conv<Scalar>> shortcut_;
  Index out_channels_;
};

/// Stem (conv [+ max pool]), residual stages and a final norm + ReLU.
template <typename Scalar>
class ResidualTrunk {
 public:
  ResidualTrunk(ConvSpec first_conv, ConvSpec first_pool, const std::vector<Index>& channels,
                const std::vector<int>& blocks, const std::vector<int>& strides, bool bottleneck,
                std::mt19937_64& rng);
  ResidualTrunk(const ResidualTrunk&) = delete;
  ResidualTrunk& operator=(const ResidualTrunk&) = delete;
  ResidualTrunk(ResidualTrunk&&) = default;

  Var<Scalar> forward(const Var<Scalar>& x, NormMode mode);
  void collect(const std::string& prefix, NamedParameters<Scalar>& out);
  Index out_channels() const { return out_channels_; }

 private:
  Conv<Scalar> stem_;
  ConvSpec pool_;
  std::vector<ResidualBlock<Scalar>> blocks_;
  Norm<Scalar> final_norm_;
  Index out_channels_;
};

/// f_g: image [N,1,H,W] -> h_g [N, C_g, H/D, W/D].
template <typename Scalar>
class GlobalNetwork {
 public:
  GlobalNetwork(const NetworkConfig& cfg, std::mt19937_64& rng);
  Var<Scalar> forward(const Var<Scalar>& x, NormMode mode);
  void collect(const std::string& prefix, NamedParameters<Scalar>& out) { trunk_.collect(prefix, out); }

 private:
  NetworkConfig cfg_;
  ResidualTrunk<Scalar> trunk_;
};

/// f_l: patches [N*K,1,h_c,w_c] -> embeddings [N*K, L].
template <typename Scalar>
class LocalNetwork {
 public:
  LocalNetwork(const NetworkConfig& cfg, std::mt19937_64& rng);
  Var<Scalar> forward(const Var<Scalar>& patches, NormMode mode);
  void collect(const std::string& prefix, NamedParameters<Scalar>& out);

 private:
  NetworkConfig cfg_;
  ResidualTrunk<Scalar> trunk_;
  Var<Scalar> proj_weight_;
  Var<Scalar> proj_bias_;
};

template <typename Scalar>
Var<Scalar> global_forward(const Var<Scalar>& x, GlobalNetwork<Scalar>& net, NormMode mode) {
  return net.forward(x, mode);
}

template <typename Scalar>
Var<Scalar> local_forward(const Var<Scalar>& patches, LocalNetwork<Scalar>& net, NormMode mode) {
  return net.forward(patches, mode);
}

/// He-normal tensor with standard deviation sqrt(2 / fan_in).
template <typename Scalar>
Tensor<Scalar> he_normal(Shape shape, Index fan_in, std::mt19937_64& rng);

}  // namespace gmic
