#include "pose/image.hpp"

#include <png.h>

#include <cstdio>
#include <fstream>
#include <memory>
#include <stdexcept>
#include <vector>

namespace pose {

namespace fs = std::filesystem;

namespace {

struct Raster {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<uint8_t> pixels;  // row-major, interleaved
};

torch::Tensor to_bytes(const torch::Tensor& clips) {
  if (clips.dim() != 5) throw std::invalid_argument("expected clips of shape (N, F, C, H, W)");
  const auto c = clips.size(2);
  if (c != 1 && c != 3) throw std::invalid_argument("clips must have 1 or 3 channels");
  return ((clips.detach().to(torch::kFloat64).clamp(-1.0, 1.0) + 1.0) * 127.5)
      .round()
      .to(torch::kUInt8)
      .contiguous();
}

// Tiles (rows x cols) of (C, H, W) images with a 1-pixel gutter, upscaled.
template <typename TileAt>
Raster tile(int64_t rows, int64_t cols, int64_t c, int64_t h, int64_t w, int scale, TileAt tile_at) {
  Raster r;
  r.channels = static_cast<int>(c);
  const int64_t cell_w = w * scale + 1;
  const int64_t cell_h = h * scale + 1;
  r.width = static_cast<int>(cols * cell_w + 1);
  r.height = static_cast<int>(rows * cell_h + 1);
  r.pixels.assign(static_cast<size_t>(r.width) * r.height * c, 64);
  for (int64_t i = 0; i < rows; ++i) {
    for (int64_t j = 0; j < cols; ++j) {
      const auto img = tile_at(i, j);  // (C, H, W) uint8
      const auto* src = img.template data_ptr<uint8_t>();
      for (int64_t y = 0; y < h * scale; ++y) {
        for (int64_t x = 0; x < w * scale; ++x) {
          const int64_t oy = 1 + i * cell_h + y;
          const int64_t ox = 1 + j * cell_w + x;
          for (int64_t k = 0; k < c; ++k) {
            r.pixels[(oy * r.width + ox) * c + k] = src[(k * h + y / scale) * w + x / scale];
          }
        }
      }
    }
  }
  return r;
}

void write_png(const fs::path& path, const Raster& r) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw std::runtime_error("cannot open " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (png == nullptr || info == nullptr || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, r.width, r.height, 8, r.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < r.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(r.pixels.data() + static_cast<size_t>(y) * r.width * r.channels));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// GIF LZW without compression: every pixel is emitted as a literal and the
// table is reset before the code width would grow.
class LzwWriter {
 public:
  explicit LzwWriter(std::vector<uint8_t>& out) : out_(out) {}

  void encode(const std::vector<uint8_t>& indices) {
    constexpr int kClear = 256, kEnd = 257;
    emit(kClear);
    int since_clear = 0;
    for (uint8_t v : indices) {
      if (since_clear == 250) {
        emit(kClear);
        since_clear = 0;
      }
      emit(v);
      ++since_clear;
    }
    emit(kEnd);
    if (nbits_ > 0) push_byte(static_cast<uint8_t>(acc_));
    flush_block();
    out_.push_back(0);  // block terminator
  }

 private:
  void emit(int code) {
    acc_ |= static_cast<uint32_t>(code) << nbits_;
    nbits_ += 9;
    while (nbits_ >= 8) {
      push_byte(static_cast<uint8_t>(acc_ & 0xff));
      acc_ >>= 8;
      nbits_ -= 8;
    }
  }
  void push_byte(uint8_t b) {
    block_.push_back(b);
    if (block_.size() == 255) flush_block();
  }
  void flush_block() {
    if (block_.empty()) return;
    out_.push_back(static_cast<uint8_t>(block_.size()));
    out_.insert(out_.end(), block_.begin(), block_.end());
    block_.clear();
  }

  std::vector<uint8_t>& out_;
  std::vector<uint8_t> block_;
  uint32_t acc_ = 0;
  int nbits_ = 0;
};

void put16(std::vector<uint8_t>& out, int v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>((v >> 8) & 0xff));
}

}  // namespace

void write_png_grid(const fs::path& path, const torch::Tensor& clips, int scale) {
  const auto bytes = to_bytes(clips);
  const auto n = bytes.size(0), f = bytes.size(1), c = bytes.size(2), h = bytes.size(3), w = bytes.size(4);
  const auto r = tile(n, f, c, h, w, scale, [&](int64_t i, int64_t j) { return bytes[i][j].contiguous(); });
  write_png(path, r);
}

void write_gif(const fs::path& path, const torch::Tensor& clips, int scale, int delay_cs) {
  const auto bytes = to_bytes(clips);
  const auto n = bytes.size(0), f = bytes.size(1), c = bytes.size(2), h = bytes.size(3), w = bytes.size(4);
  std::vector<uint8_t> out{'G', 'I', 'F', '8', '9', 'a'};
  std::vector<Raster> frames;
  for (int64_t k = 0; k < f; ++k) {
    frames.push_back(tile(1, n, c, h, w, scale, [&](int64_t, int64_t j) { return bytes[j][k].contiguous(); }));
  }
  const int width = frames.front().width, height = frames.front().height;
  put16(out, width);
  put16(out, height);
  out.push_back(0xf7);  // global colour table, 256 entries
  out.push_back(0);
  out.push_back(0);
  // Grey ramp for one channel, 3-3-2 RGB otherwise.
  for (int i = 0; i < 256; ++i) {
    if (c == 1) {
      out.insert(out.end(), {static_cast<uint8_t>(i), static_cast<uint8_t>(i), static_cast<uint8_t>(i)});
    } else {
      out.push_back(static_cast<uint8_t>(((i >> 5) & 7) * 255 / 7));
      out.push_back(static_cast<uint8_t>(((i >> 2) & 7) * 255 / 7));
      out.push_back(static_cast<uint8_t>((i & 3) * 255 / 3));
    }
  }
  // Loop forever.
  const uint8_t loop[] = {0x21, 0xff, 0x0b, 'N', 'E', 'T', 'S', 'C', 'A', 'P', 'E', '2', '.', '0', 0x03, 0x01, 0x00, 0x00, 0x00};
  out.insert(out.end(), std::begin(loop), std::end(loop));
  for (const auto& fr : frames) {
    out.insert(out.end(), {0x21, 0xf9, 0x04, 0x04});
    put16(out, delay_cs);
    out.insert(out.end(), {0x00, 0x00});
    out.push_back(0x2c);
    put16(out, 0);
    put16(out, 0);
    put16(out, width);
    put16(out, height);
    out.push_back(0x00);
    out.push_back(8);  // LZW minimum code size
    std::vector<uint8_t> idx(static_cast<size_t>(width) * height);
    for (size_t p = 0; p < idx.size(); ++p) {
      if (c == 1) {
        idx[p] = fr.pixels[p];
      } else {
        const auto* px = &fr.pixels[p * 3];
        idx[p] = static_cast<uint8_t>(((px[0] >> 5) << 5) | ((px[1] >> 5) << 2) | (px[2] >> 6));
      }
    }
    LzwWriter(out).encode(idx);
  }
  out.push_back(0x3b);
  std::ofstream file(path, std::ios::binary);
  file.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!file) throw std::runtime_error("cannot write " + path.string());
}

}  // namespace pose
