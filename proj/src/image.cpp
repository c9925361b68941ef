#include "aesb/image.hpp"

#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>
#include <vector>

#include <jpeglib.h>
#include <png.h>

namespace aesb {

namespace {

struct AxisSample {
  Index lo, hi;
  double t;
};

std::vector<AxisSample> axis_samples(Index in, Index out) {
  std::vector<AxisSample> s(out);
  const double scale = double(in) / double(out);
  for (Index i = 0; i < out; ++i) {
    double x = (double(i) + 0.5) * scale - 0.5;
    if (x < 0) x = 0;
    if (x > double(in - 1)) x = double(in - 1);
    const Index lo = Index(std::floor(x));
    const Index hi = lo + 1 < in ? lo + 1 : lo;
    s[i] = {lo, hi, x - double(lo)};
  }
  return s;
}

using FilePtr = std::unique_ptr<std::FILE, int (*)(std::FILE*)>;

FilePtr open_file(const std::string& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode), &std::fclose);
  if (!f) throw DataError("cannot open image file: " + path);
  return f;
}

RgbImage from_interleaved(const std::vector<std::uint8_t>& px, Index height, Index width,
                          int components) {
  RgbImage img(height, width);
  for (Index y = 0; y < height; ++y) {
    for (Index x = 0; x < width; ++x) {
      const std::uint8_t* p = &px[(y * width + x) * components];
      for (int c = 0; c < 3; ++c) {
        img.channels[c](y, x) = double(components >= 3 ? p[c] : p[0]) / 255.0;
      }
    }
  }
  return img;
}

// Keeps libpng quiet; the message ends up in the thrown error instead.
void png_error_to_string(png_structp png, png_const_charp msg) {
  *static_cast<std::string*>(png_get_error_ptr(png)) = msg;
  png_longjmp(png, 1);
}

void png_ignore_warning(png_structp, png_const_charp) {}

RgbImage read_png(const std::string& path) {
  FilePtr f = open_file(path, "rb");
  std::string message;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &message, png_error_to_string,
                                           png_ignore_warning);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("libpng initialization failed");
  }
  std::vector<std::uint8_t> px;
  png_uint_32 width = 0, height = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("cannot decode PNG image: " + path + " (" + message + ")");
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  width = png_get_image_width(png, info);
  height = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) {
    png_set_expand_gray_1_2_4_to_8(png);
    png_set_gray_to_rgb(png);
  }
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  px.resize(rowbytes * height);
  std::vector<png_bytep> rows(height);
  for (png_uint_32 y = 0; y < height; ++y) rows[y] = px.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return from_interleaved(px, Index(height), Index(width), int(rowbytes / width));
}

struct JpegErrorManager {
  jpeg_error_mgr base;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

RgbImage read_jpeg(const std::string& path) {
  FilePtr f = open_file(path, "rb");
  jpeg_decompress_struct cinfo;
  JpegErrorManager err;
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = jpeg_error_exit;
  std::vector<std::uint8_t> px;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw DataError("cannot decode JPEG image: " + path);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  const Index width = cinfo.output_width, height = cinfo.output_height;
  const int comps = cinfo.output_components;
  px.resize(std::size_t(width * height * comps));
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = px.data() + std::size_t(cinfo.output_scanline) * width * comps;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return from_interleaved(px, height, width, comps);
}

}  // namespace

Plane resize_bilinear(const Plane& src, Index height, Index width) {
  if (src.rows() == 0 || src.cols() == 0 || height <= 0 || width <= 0) {
    throw ShapeError("resize_bilinear: empty source or target");
  }
  if (src.rows() == height && src.cols() == width) return src;
  const auto ys = axis_samples(src.rows(), height);
  const auto xs = axis_samples(src.cols(), width);
  Plane out(height, width);
  for (Index y = 0; y < height; ++y) {
    const auto& sy = ys[y];
    for (Index x = 0; x < width; ++x) {
      const auto& sx = xs[x];
      const double a = src(sy.lo, sx.lo), b = src(sy.lo, sx.hi);
      const double c = src(sy.hi, sx.lo), d = src(sy.hi, sx.hi);
      const double top = a + sx.t * (b - a);
      const double bottom = c + sx.t * (d - c);
      out(y, x) = top + sy.t * (bottom - top);
    }
  }
  return out;
}

RgbImage resize_bilinear(const RgbImage& src, Index height, Index width) {
  RgbImage out;
  for (int c = 0; c < 3; ++c) out.channels[c] = resize_bilinear(src.channels[c], height, width);
  return out;
}

RgbImage read_image(const std::string& path) {
  unsigned char sig[8] = {};
  {
    FilePtr f = open_file(path, "rb");
    if (std::fread(sig, 1, 8, f.get()) < 3) throw DataError("image file too short: " + path);
  }
  if (png_sig_cmp(sig, 0, 8) == 0) return read_png(path);
  if (sig[0] == 0xFF && sig[1] == 0xD8 && sig[2] == 0xFF) return read_jpeg(path);
  throw DataError("unsupported image format (PNG or JPEG expected): " + path);
}

void write_png(const RgbImage& image, const std::string& path) {
  const Index height = image.height(), width = image.width();
  if (height == 0 || width == 0) throw ShapeError("write_png: empty image");
  std::vector<std::uint8_t> px(std::size_t(height * width * 3));
  for (Index y = 0; y < height; ++y) {
    for (Index x = 0; x < width; ++x) {
      for (int c = 0; c < 3; ++c) px[(y * width + x) * 3 + c] = to_byte(image.channels[c](y, x));
    }
  }
  FilePtr f(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!f) throw DataError("cannot open image for writing: " + path);
  std::string message;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &message, png_error_to_string,
                                            png_ignore_warning);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("failed writing PNG: " + path + " (" + message + ")");
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, png_uint_32(width), png_uint_32(height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (Index y = 0; y < height; ++y) png_write_row(png, px.data() + y * width * 3);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace aesb
