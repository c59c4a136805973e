// Greedy ROI window retrieval on the saliency grid and patch cropping.
#pragma once

#include "gmic/tensor.hpp"

#include <random>
#include <vector>

namespace gmic {

template <typename Scalar>
using GridMap = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct RoiWindow {
  Index grid_row = 0;
  Index grid_col = 0;
  Index pixel_row = 0;
  Index pixel_col = 0;
  double criterion_value = 0.0;

  friend bool operator==(const RoiWindow&, const RoiWindow&) = default;
};

/// (A - min) / (max - min); a map whose range is <= 1e-12 becomes all zeros.
template <typename Scalar>
GridMap<Scalar> minmax_normalize(const GridMap<Scalar>& map);

/// Greedy window selection over the summed min-max-normalised class maps.
///
/// Every round picks the window_rows x window_cols window with the largest
/// cell sum (row-major first among ties), records it and zeroes its cells.
/// A position already chosen is never chosen again, so the K windows stay
/// distinct even once the map is exhausted.
/// Window sums are accumulated row-major inside the window.
/// Pixel coordinates are left at 0; see map_to_pixels().
template <typename Scalar>
std::vector<RoiWindow> retrieve_roi(const std::vector<GridMap<Scalar>>& class_maps, Index window_rows,
                                    Index window_cols, int num_windows);

/// Convenience overload on one [2,h,w] (or [C,h,w]) saliency tensor.
template <typename Scalar>
std::vector<RoiWindow> retrieve_roi(const Tensor<Scalar>& saliency, Index window_rows, Index window_cols,
                                    int num_windows);

/// Fill pixel coordinates: grid position times cells-to-pixels scale, clamped
/// so a patch_size crop stays inside an image_height x image_width image.
void map_to_pixels(std::vector<RoiWindow>& windows, Index scale, Index patch_size, Index image_height,
                   Index image_width);

/// Uniformly random crop positions (ablation baseline). Grid coordinates are
/// the floor of pixel / scale.
std::vector<RoiWindow> random_windows(Index image_height, Index image_width, Index patch_size, Index scale,
                                      int num_windows, std::mt19937_64& rng);

/// Copy patch_size x patch_size crops of a single [H,W] image (any leading
/// singleton dims allowed) into [K,1,patch,patch].
template <typename Scalar>
Tensor<Scalar> crop_patches(const Tensor<Scalar>& image, const std::vector<RoiWindow>& windows, Index patch_size);

}  // namespace gmic
