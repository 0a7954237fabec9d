#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "ibpica/model.hpp"

namespace ibpica {

/// Grayscale clip. Axis convention: x runs along the width W, y along the
/// height H, t over frames; voxel (x, y, t) lives at x + W * (y + H * t).
struct VideoTensor {
  std::size_t height = 0, width = 0, frames = 0;
  std::vector<double> voxels;

  VideoTensor() = default;
  VideoTensor(std::size_t h, std::size_t w, std::size_t t, double fill = 0.0);

  double& at(std::size_t x, std::size_t y, std::size_t t) { return voxels[x + width * (y + height * t)]; }
  double at(std::size_t x, std::size_t y, std::size_t t) const { return voxels[x + width * (y + height * t)]; }
  void validate() const;
};

struct ReceptiveField {
  std::size_t sx = 16, sy = 16, st = 10;
  std::size_t stride_x = 8, stride_y = 8, stride_t = 5;

  /// Extents with 50% overlap: stride = max(1, extent / 2).
  static ReceptiveField with_default_strides(std::size_t sx, std::size_t sy, std::size_t st);
  std::size_t volume() const noexcept { return sx * sy * st; }
  void validate() const;
};

struct GridShape {
  std::size_t nx = 0, ny = 0, nt = 0;
  std::size_t count() const noexcept { return nx * ny * nt; }
  bool operator==(const GridShape&) const = default;
};

/// floor((dim - extent) / stride) + 1 per axis, or 0 if the extent does not fit.
std::size_t grid_count(std::size_t dim, std::size_t extent, std::size_t stride);
GridShape patch_grid(std::size_t height, std::size_t width, std::size_t frames, const ReceptiveField& rf);

/// One row per grid position (x fastest, then y, then t); each row is the
/// patch flattened x fastest. A clip smaller than the field yields an empty
/// matrix and a warning.
Matrix extract_patches(const VideoTensor& v, const ReceptiveField& rf);
/// Single patch at grid cell (ix, iy, it).
Vector extract_patch(const VideoTensor& v, const ReceptiveField& rf, std::size_t ix, std::size_t iy, std::size_t it);

/// Subtract each row's mean and divide by (row std + 1e-8).
void contrast_normalize(Matrix& patches);
Vector contrast_normalized(const Vector& patch);

/// "VIDT1\0", u32 H, W, T, float32 voxels x fastest.
std::string serialize_video(const VideoTensor& v);
VideoTensor deserialize_video(std::string_view bytes);
void save_video(const VideoTensor& v, const std::string& path);
VideoTensor load_video(const std::string& path);

/// Parse one PGM (P2/P5) or PPM (P3/P6) frame; intensities are divided by
/// maxval and colour is reduced to luma.
struct Frame {
  std::size_t height = 0, width = 0;
  std::vector<double> pixels;  // row-major, x fastest
};
Frame parse_netpbm(std::string_view bytes, const std::string& what);
/// All *.pgm / *.ppm files in a directory, sorted lexicographically, as frames.
VideoTensor load_frame_directory(const std::string& dir);

}  // namespace ibpica
