#include "ibpica/video.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>

#include "ibpica/binary_io.hpp"
#include "ibpica/errors.hpp"

namespace ibpica {

namespace {
constexpr std::string_view kVideoMagic{"VIDT1\0", 6};
constexpr double kContrastEps = 1e-8;
}  // namespace

VideoTensor::VideoTensor(std::size_t h, std::size_t w, std::size_t t, double fill)
    : height(h), width(w), frames(t), voxels(h * w * t, fill) {}

void VideoTensor::validate() const {
  if (height < 1 || width < 1 || frames < 1) throw InvalidArgument("video: H, W and T must all be >= 1");
  if (voxels.size() != height * width * frames) throw InvalidArgument("video: voxel count does not match H*W*T");
  for (double v : voxels)
    if (!std::isfinite(v)) throw InvalidArgument("video: non-finite voxel");
}

ReceptiveField ReceptiveField::with_default_strides(std::size_t sx, std::size_t sy, std::size_t st) {
  ReceptiveField rf;
  rf.sx = sx;
  rf.sy = sy;
  rf.st = st;
  rf.stride_x = std::max<std::size_t>(1, sx / 2);
  rf.stride_y = std::max<std::size_t>(1, sy / 2);
  rf.stride_t = std::max<std::size_t>(1, st / 2);
  return rf;
}

void ReceptiveField::validate() const {
  if (sx < 1 || sy < 1 || st < 1) throw InvalidArgument("receptive field: extents must be >= 1");
  if (stride_x < 1 || stride_y < 1 || stride_t < 1) throw InvalidArgument("receptive field: strides must be >= 1");
  if (stride_x > sx || stride_y > sy || stride_t > st)
    throw InvalidArgument("receptive field: strides must not exceed the extents");
}

std::size_t grid_count(std::size_t dim, std::size_t extent, std::size_t stride) {
  if (extent == 0 || stride == 0 || dim < extent) return 0;
  return (dim - extent) / stride + 1;
}

GridShape patch_grid(std::size_t height, std::size_t width, std::size_t frames, const ReceptiveField& rf) {
  rf.validate();
  GridShape g{grid_count(width, rf.sx, rf.stride_x), grid_count(height, rf.sy, rf.stride_y),
              grid_count(frames, rf.st, rf.stride_t)};
  if (g.count() == 0) g = {};
  return g;
}

Vector extract_patch(const VideoTensor& v, const ReceptiveField& rf, std::size_t ix, std::size_t iy, std::size_t it) {
  Vector p(static_cast<Eigen::Index>(rf.volume()));
  const std::size_t x0 = ix * rf.stride_x, y0 = iy * rf.stride_y, t0 = it * rf.stride_t;
  if (x0 + rf.sx > v.width || y0 + rf.sy > v.height || t0 + rf.st > v.frames)
    throw InvalidArgument("patch position outside the video");
  Eigen::Index i = 0;
  for (std::size_t t = 0; t < rf.st; ++t)
    for (std::size_t y = 0; y < rf.sy; ++y)
      for (std::size_t x = 0; x < rf.sx; ++x) p(i++) = v.at(x0 + x, y0 + y, t0 + t);
  return p;
}

Matrix extract_patches(const VideoTensor& v, const ReceptiveField& rf) {
  v.validate();
  const GridShape g = patch_grid(v.height, v.width, v.frames, rf);
  if (g.count() == 0) {
    warn("video " + std::to_string(v.height) + "x" + std::to_string(v.width) + "x" + std::to_string(v.frames) +
         " is smaller than the receptive field; no patches extracted");
    return Matrix(0, static_cast<Eigen::Index>(rf.volume()));
  }
  Matrix out(static_cast<Eigen::Index>(g.count()), static_cast<Eigen::Index>(rf.volume()));
  Eigen::Index row = 0;
  for (std::size_t it = 0; it < g.nt; ++it)
    for (std::size_t iy = 0; iy < g.ny; ++iy)
      for (std::size_t ix = 0; ix < g.nx; ++ix) out.row(row++) = extract_patch(v, rf, ix, iy, it).transpose();
  return out;
}

Vector contrast_normalized(const Vector& patch) {
  if (patch.size() == 0) return patch;
  const double mean = patch.mean();
  const Vector centred = patch.array() - mean;
  const double sd = std::sqrt(centred.squaredNorm() / static_cast<double>(patch.size()));
  return centred / (sd + kContrastEps);
}

void contrast_normalize(Matrix& patches) {
  for (Eigen::Index r = 0; r < patches.rows(); ++r) {
    const Vector row = patches.row(r).transpose();
    patches.row(r) = contrast_normalized(row).transpose();
  }
}

std::string serialize_video(const VideoTensor& v) {
  v.validate();
  ByteWriter w;
  w.magic(kVideoMagic);
  w.u32(static_cast<std::uint32_t>(v.height));
  w.u32(static_cast<std::uint32_t>(v.width));
  w.u32(static_cast<std::uint32_t>(v.frames));
  for (double x : v.voxels) w.f32(static_cast<float>(x));
  return w.take();
}

VideoTensor deserialize_video(std::string_view bytes) {
  ByteReader r(bytes, "video tensor");
  r.expect_magic(kVideoMagic);
  const std::size_t h = r.u32(), w = r.u32(), t = r.u32();
  if (h == 0 || w == 0 || t == 0) r.fail("H, W and T must be positive");
  const std::size_t n = h * w * t;
  if (r.remaining() != n * 4) r.fail("expected " + std::to_string(n) + " float32 voxels");
  VideoTensor v(h, w, t);
  for (auto& x : v.voxels) {
    x = r.f32();
    if (!std::isfinite(x)) r.fail("non-finite voxel");
  }
  return v;
}

void save_video(const VideoTensor& v, const std::string& path) { write_file(path, serialize_video(v)); }
VideoTensor load_video(const std::string& path) { return deserialize_video(read_file(path)); }

namespace {

class NetpbmCursor {
 public:
  NetpbmCursor(std::string_view data, const std::string& what) : data_(data), what_(what) {}

  void skip_space_and_comments() {
    while (pos_ < data_.size()) {
      const char c = data_[pos_];
      if (c == '#') {
        while (pos_ < data_.size() && data_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
  }
  std::size_t number() {
    skip_space_and_comments();
    if (pos_ >= data_.size() || !std::isdigit(static_cast<unsigned char>(data_[pos_])))
      throw FormatError(what_ + ": expected a number in the header");
    std::size_t v = 0;
    while (pos_ < data_.size() && std::isdigit(static_cast<unsigned char>(data_[pos_]))) {
      v = v * 10 + static_cast<std::size_t>(data_[pos_] - '0');
      if (v > (1u << 30)) throw FormatError(what_ + ": header value too large");
      ++pos_;
    }
    return v;
  }
  /// Exactly one whitespace byte separates the header from binary data.
  void end_header() {
    if (pos_ >= data_.size() || !std::isspace(static_cast<unsigned char>(data_[pos_])))
      throw FormatError(what_ + ": malformed header");
    ++pos_;
  }
  unsigned sample(bool wide) {
    const std::size_t n = wide ? 2 : 1;
    if (data_.size() - pos_ < n) throw FormatError(what_ + ": truncated pixel data");
    unsigned v = static_cast<unsigned char>(data_[pos_]);
    if (wide) v = (v << 8) | static_cast<unsigned char>(data_[pos_ + 1]);
    pos_ += n;
    return v;
  }

 private:
  std::string_view data_;
  std::size_t pos_ = 2;
  const std::string& what_;
};

}  // namespace

Frame parse_netpbm(std::string_view bytes, const std::string& what) {
  if (bytes.size() < 2 || bytes[0] != 'P') throw FormatError(what + ": not a PGM/PPM file");
  const char kind = bytes[1];
  if (kind != '2' && kind != '3' && kind != '5' && kind != '6')
    throw FormatError(what + ": unsupported netpbm type P" + std::string(1, kind));
  const bool ascii = kind == '2' || kind == '3';
  const std::size_t channels = (kind == '3' || kind == '6') ? 3 : 1;
  NetpbmCursor cur(bytes, what);
  Frame f;
  f.width = cur.number();
  f.height = cur.number();
  const std::size_t maxval = cur.number();
  if (f.width == 0 || f.height == 0) throw FormatError(what + ": zero image size");
  if (maxval == 0 || maxval > 65535) throw FormatError(what + ": maxval must lie in [1, 65535]");
  if (!ascii) cur.end_header();
  const bool wide = maxval > 255;
  f.pixels.resize(f.width * f.height);
  for (auto& p : f.pixels) {
    double c[3] = {0, 0, 0};
    for (std::size_t ch = 0; ch < channels; ++ch) {
      const std::size_t v = ascii ? cur.number() : cur.sample(wide);
      if (v > maxval) throw FormatError(what + ": sample exceeds maxval");
      c[ch] = static_cast<double>(v) / static_cast<double>(maxval);
    }
    p = channels == 1 ? c[0] : 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
  }
  return f;
}

VideoTensor load_frame_directory(const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw IoError("'" + dir + "' is not a directory");
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(dir, ec)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".pgm" || ext == ".ppm") files.push_back(entry.path().string());
  }
  if (ec) throw IoError("cannot list '" + dir + "': " + ec.message());
  if (files.empty()) throw IoError("no .pgm/.ppm frames in '" + dir + "'");
  std::sort(files.begin(), files.end());

  VideoTensor v;
  for (std::size_t t = 0; t < files.size(); ++t) {
    const Frame f = parse_netpbm(read_file(files[t]), files[t]);
    if (t == 0) {
      v.height = f.height;
      v.width = f.width;
    } else if (f.height != v.height || f.width != v.width) {
      throw FormatError(files[t] + ": frame size differs from the first frame");
    }
    v.voxels.insert(v.voxels.end(), f.pixels.begin(), f.pixels.end());
  }
  v.frames = files.size();
  return v;
}

}  // namespace ibpica
