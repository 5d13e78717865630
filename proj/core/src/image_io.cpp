#include "scenelab/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <memory>
#include <stdexcept>

#include <jpeglib.h>
#include <png.h>

namespace scenelab {

namespace {

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<FILE, FileCloser>;

Tensor interleaved_to_chw(const std::vector<unsigned char>& rgb, int h,
                          int w) {
  std::vector<float> out(static_cast<size_t>(3) * h * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        out[(c * h + y) * w + x] =
            rgb[(static_cast<size_t>(y) * w + x) * 3 + c] / 255.f;
      }
    }
  }
  return Tensor::from_data({3, h, w}, std::move(out));
}

Tensor load_png_file(FILE* f, const std::string& path) {
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png: allocation failure");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("png: allocation failure");
  }
  std::vector<unsigned char> rgb;
  std::vector<png_bytep> row_ptrs;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("corrupt PNG: " + path);
  }
  png_init_io(png, f);
  png_read_info(png, info);
  png_set_expand(png);  // palette/gray/low-depth -> 8-bit
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  if (png_get_rowbytes(png, info) != static_cast<size_t>(w) * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error("png: unexpected row layout in " + path);
  }
  rgb.resize(static_cast<size_t>(h) * w * 3);
  row_ptrs.resize(h);
  for (int y = 0; y < h; ++y) {
    row_ptrs[y] = rgb.data() + static_cast<size_t>(y) * w * 3;
  }
  png_read_image(png, row_ptrs.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return interleaved_to_chw(rgb, h, w);
}

struct JpegErrorMgr {
  jpeg_error_mgr base;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* mgr = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
  std::longjmp(mgr->jump, 1);
}

Tensor load_jpeg_file(FILE* f, const std::string& path) {
  jpeg_decompress_struct cinfo;
  JpegErrorMgr err;
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw std::runtime_error("corrupt JPEG: " + path);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  const int w = static_cast<int>(cinfo.output_width);
  const int h = static_cast<int>(cinfo.output_height);
  std::vector<unsigned char> rgb(static_cast<size_t>(h) * w * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    unsigned char* row =
        rgb.data() + static_cast<size_t>(cinfo.output_scanline) * w * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return interleaved_to_chw(rgb, h, w);
}

}  // namespace

Tensor load_image(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw std::runtime_error("cannot open image: " + path);
  unsigned char magic[4] = {0, 0, 0, 0};
  const size_t got = std::fread(magic, 1, 4, f.get());
  std::rewind(f.get());
  if (got >= 4 && magic[0] == 0x89 && magic[1] == 'P' && magic[2] == 'N' &&
      magic[3] == 'G') {
    return load_png_file(f.get(), path);
  }
  if (got >= 2 && magic[0] == 0xFF && magic[1] == 0xD8) {
    return load_jpeg_file(f.get(), path);
  }
  throw std::runtime_error("unsupported image format: " + path);
}

Tensor load_image_resized(const std::string& path, int out_h, int out_w) {
  Tensor img = load_image(path);
  const int c = static_cast<int>(img.shape()[0]);
  const int h = static_cast<int>(img.shape()[1]);
  const int w = static_cast<int>(img.shape()[2]);
  if (h == out_h && w == out_w) return img;
  return Tensor::from_data({c, out_h, out_w},
                           resize_chw(img.values(), c, h, w, out_h, out_w));
}

void save_png(const std::string& path, const Tensor& image) {
  if (image.dim() != 3 ||
      (image.shape()[0] != 1 && image.shape()[0] != 3)) {
    throw DimensionError("save_png: expects [1|3,H,W], got " +
                         shape_str(image.shape()));
  }
  const int c = static_cast<int>(image.shape()[0]);
  const int h = static_cast<int>(image.shape()[1]);
  const int w = static_cast<int>(image.shape()[2]);
  std::vector<unsigned char> rgb(static_cast<size_t>(h) * w * 3);
  const auto& v = image.values();
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < 3; ++ch) {
        const float val = v[((c == 1 ? 0 : ch) * h + y) * w + x];
        rgb[(static_cast<size_t>(y) * w + x) * 3 + ch] =
            static_cast<unsigned char>(
                std::lround(std::clamp(val, 0.f, 1.f) * 255.f));
      }
    }
  }

  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw std::runtime_error("cannot write image: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                            nullptr, nullptr);
  if (!png) throw std::runtime_error("png: allocation failure");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("png: allocation failure");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("png write failed: " + path);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < h; ++y) {
    png_write_row(png, rgb.data() + static_cast<size_t>(y) * w * 3);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

std::vector<float> resize_chw(const std::vector<float>& src, int c, int h,
                              int w, int out_h, int out_w) {
  if (h == out_h && w == out_w) return src;
  std::vector<float> out(static_cast<size_t>(c) * out_h * out_w);
  const double sy = static_cast<double>(h) / out_h;
  const double sx = static_cast<double>(w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy =
        std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx =
          std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - x0;
      for (int ch = 0; ch < c; ++ch) {
        const auto px = [&](int yy, int xx) {
          return static_cast<double>(src[(ch * h + yy) * w + xx]);
        };
        const double top = px(y0, x0) * (1 - wx) + px(y0, x1) * wx;
        const double bot = px(y1, x0) * (1 - wx) + px(y1, x1) * wx;
        out[(ch * out_h + y) * out_w + x] =
            static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

}  // namespace scenelab
