#include "gmic/roi.hpp"

#include <algorithm>
#include <string>

namespace gmic {

template <typename Scalar>
GridMap<Scalar> minmax_normalize(const GridMap<Scalar>& map) {
  if (map.size() == 0) return map;
  const Scalar lo = map.minCoeff();
  const Scalar range = map.maxCoeff() - lo;
  if (!(static_cast<double>(range) > 1e-12)) return GridMap<Scalar>::Zero(map.rows(), map.cols());
  return (map - lo) / range;
}

template <typename Scalar>
std::vector<RoiWindow> retrieve_roi(const std::vector<GridMap<Scalar>>& class_maps, Index window_rows,
                                    Index window_cols, int num_windows) {
  if (class_maps.empty()) throw DimensionError("retrieve_roi: no class maps");
  const Index h = class_maps.front().rows(), w = class_maps.front().cols();
  for (const auto& m : class_maps)
    if (m.rows() != h || m.cols() != w) throw DimensionError("retrieve_roi: class maps differ in size");
  if (window_rows < 1 || window_cols < 1 || window_rows > h || window_cols > w)
    throw ConfigError("retrieve_roi: window " + std::to_string(window_rows) + "x" + std::to_string(window_cols) +
                      " does not fit a " + std::to_string(h) + "x" + std::to_string(w) + " grid");
  const Index positions = (h - window_rows + 1) * (w - window_cols + 1);
  if (num_windows < 1 || num_windows > positions)
    throw ConfigError("retrieve_roi: K=" + std::to_string(num_windows) + " must lie in [1, " +
                      std::to_string(positions) + "] for this grid");

  GridMap<double> combined = GridMap<double>::Zero(h, w);
  for (const auto& m : class_maps) combined += minmax_normalize<Scalar>(m).template cast<double>();

  std::vector<RoiWindow> selected;
  selected.reserve(static_cast<std::size_t>(num_windows));
  for (int round = 0; round < num_windows; ++round) {
    RoiWindow best;
    bool found = false;
    for (Index r = 0; r + window_rows <= h; ++r)
      for (Index c = 0; c + window_cols <= w; ++c) {
        bool taken = false;
        for (const auto& prev : selected) taken = taken || (prev.grid_row == r && prev.grid_col == c);
        if (taken) continue;
        double s = 0.0;
        for (Index i = 0; i < window_rows; ++i)
          for (Index j = 0; j < window_cols; ++j) s += combined(r + i, c + j);
        if (!found || s > best.criterion_value) {
          best = RoiWindow{r, c, 0, 0, s};
          found = true;
        }
      }
    combined.block(best.grid_row, best.grid_col, window_rows, window_cols).setZero();
    selected.push_back(best);
  }
  return selected;
}

template <typename Scalar>
std::vector<RoiWindow> retrieve_roi(const Tensor<Scalar>& saliency, Index window_rows, Index window_cols,
                                    int num_windows) {
  if (saliency.rank() != 3) throw DimensionError("retrieve_roi: expected [C,h,w], got " + shape_string(saliency.shape()));
  const Index C = saliency.dim(0), h = saliency.dim(1), w = saliency.dim(2);
  std::vector<GridMap<Scalar>> maps;
  for (Index c = 0; c < C; ++c)
    maps.emplace_back(Eigen::Map<const GridMap<Scalar>>(saliency.data() + c * h * w, h, w));
  return retrieve_roi(maps, window_rows, window_cols, num_windows);
}

void map_to_pixels(std::vector<RoiWindow>& windows, Index scale, Index patch_size, Index image_height,
                   Index image_width) {
  for (auto& win : windows) {
    win.pixel_row = std::clamp<Index>(win.grid_row * scale, 0, image_height - patch_size);
    win.pixel_col = std::clamp<Index>(win.grid_col * scale, 0, image_width - patch_size);
  }
}

std::vector<RoiWindow> random_windows(Index image_height, Index image_width, Index patch_size, Index scale,
                                      int num_windows, std::mt19937_64& rng) {
  std::uniform_int_distribution<Index> row(0, image_height - patch_size);
  std::uniform_int_distribution<Index> col(0, image_width - patch_size);
  std::vector<RoiWindow> out;
  for (int k = 0; k < num_windows; ++k) {
    RoiWindow win;
    win.pixel_row = row(rng);
    win.pixel_col = col(rng);
    win.grid_row = win.pixel_row / scale;
    win.grid_col = win.pixel_col / scale;
    out.push_back(win);
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> crop_patches(const Tensor<Scalar>& image, const std::vector<RoiWindow>& windows, Index patch_size) {
  if (image.rank() < 2) throw DimensionError("crop_patches: image must be at least 2-D");
  const Index H = image.dim(image.rank() - 2), W = image.dim(image.rank() - 1);
  if (H * W != image.size()) throw DimensionError("crop_patches: expected a single image, got " + shape_string(image.shape()));
  const Index K = static_cast<Index>(windows.size());
  Tensor<Scalar> out(Shape{K, 1, patch_size, patch_size});
  const auto src = image.matrix(H, W);
  for (Index k = 0; k < K; ++k) {
    const auto& win = windows[static_cast<std::size_t>(k)];
    const Index r = std::clamp<Index>(win.pixel_row, 0, H - patch_size);
    const Index c = std::clamp<Index>(win.pixel_col, 0, W - patch_size);
    RowMatrixMap<Scalar>(out.data() + k * patch_size * patch_size, patch_size, patch_size) =
        src.block(r, c, patch_size, patch_size);
  }
  return out;
}

#define GMIC_INSTANTIATE_ROI(T)                                                                                  \
  template GridMap<T> minmax_normalize(const GridMap<T>&);                                                       \
  template std::vector<RoiWindow> retrieve_roi(const std::vector<GridMap<T>>&, Index, Index, int);               \
  template std::vector<RoiWindow> retrieve_roi(const Tensor<T>&, Index, Index, int);                             \
  template Tensor<T> crop_patches(const Tensor<T>&, const std::vector<RoiWindow>&, Index);

GMIC_INSTANTIATE_ROI(float)
GMIC_INSTANTIATE_ROI(double)

}  // namespace gmic
