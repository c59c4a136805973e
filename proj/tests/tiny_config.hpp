// Small network configs for fast tests.
#pragma once

#include "gmic/networks.hpp"

namespace gmic::testing {

// 32x32 images, 4x4 saliency grid, 16px patches.
inline NetworkConfig tiny_config() {
  NetworkConfig cfg;
  cfg.input_height = 32;
  cfg.input_width = 32;
  cfg.downsample_factor = 8;
  cfg.global_channels = {4, 6};
  cfg.global_blocks = {1, 1};
  cfg.global_strides = {1, 2};
  cfg.local_channels = {4, 8};
  cfg.local_strides = {1, 2};
  cfg.patch_size = 16;
  cfg.num_patches = 2;
  cfg.embedding_dim = 6;
  cfg.attention_dim = 3;
  return cfg;
}

}  // namespace gmic::testing
