#include "dif/image_io.hpp"

#include <jpeglib.h>
#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

namespace dif {

namespace {

unsigned char quant8(float v) {
  float c = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
  return (unsigned char)std::lround(c * 255.f);
}

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct JpegErrorMgr {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

Tensor<float> read_ppm(std::FILE* f, const std::string& path) {
  auto next_token = [&]() -> long {
    int c;
    do {
      c = std::fgetc(f);
      if (c == '#')
        while (c != '\n' && c != EOF) c = std::fgetc(f);
    } while (c == ' ' || c == '\t' || c == '\n' || c == '\r');
    long v = 0;
    bool any = false;
    while (c >= '0' && c <= '9') {
      v = v * 10 + (c - '0');
      any = true;
      c = std::fgetc(f);
    }
    if (!any) throw DataError("malformed PPM header: " + path);
    return v;
  };
  const long w = next_token(), h = next_token(), maxval = next_token();
  if (w <= 0 || h <= 0 || maxval != 255) throw DataError("unsupported PPM: " + path);
  std::vector<unsigned char> buf((std::size_t)w * h * 3);
  if (std::fread(buf.data(), 1, buf.size(), f) != buf.size())
    throw DataError("truncated PPM: " + path);
  return from_bytes_rgb8(buf.data(), (int)h, (int)w);
}

Tensor<float> read_png_file(std::FILE* f, const std::string& path) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw DataError("libpng init failed: " + path);
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DataError("libpng init failed: " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("failed to decode PNG: " + path);
  }
  png_init_io(png, f);
  png_read_info(png, info);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const int w = (int)png_get_image_width(png, info);
  const int h = (int)png_get_image_height(png, info);
  if (png_get_channels(png, info) != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("unexpected PNG channel count: " + path);
  }
  std::vector<unsigned char> buf((std::size_t)w * h * 3);
  std::vector<png_bytep> rows(h);
  for (int i = 0; i < h; ++i) rows[i] = buf.data() + (std::size_t)i * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return from_bytes_rgb8(buf.data(), h, w);
}

Tensor<float> read_jpeg_file(std::FILE* f, const std::string& path) {
  jpeg_decompress_struct cinfo;
  JpegErrorMgr err;
  cinfo.err = jpeg_std_error(&err.pub);
  err.pub.error_exit = jpeg_error_exit;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw DataError("failed to decode JPEG: " + path);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  const int w = (int)cinfo.output_width, h = (int)cinfo.output_height;
  std::vector<unsigned char> buf((std::size_t)w * h * 3);
  while ((int)cinfo.output_scanline < h) {
    JSAMPROW row = buf.data() + (std::size_t)cinfo.output_scanline * w * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return from_bytes_rgb8(buf.data(), h, w);
}

// IJG standard luminance table (Annex K of the JPEG standard).
const int kStdLuminance[64] = {
    16, 11, 10, 16, 24,  40,  51,  61,  12, 12, 14, 19, 26,  58,  60,  55,
    14, 13, 16, 24, 40,  57,  69,  56,  14, 17, 22, 29, 51,  87,  80,  62,
    18, 22, 37, 56, 68,  109, 103, 77,  24, 35, 55, 64, 81,  104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99};

void scaled_luminance_table(int quality, int out[64]) {
  const int scale = quality < 50 ? 5000 / quality : 200 - quality * 2;
  for (int i = 0; i < 64; ++i) {
    int v = (kStdLuminance[i] * scale + 50) / 100;
    out[i] = v < 1 ? 1 : (v > 255 ? 255 : v);
  }
}

}  // namespace

std::vector<unsigned char> to_bytes_rgb8(const Tensor<float>& img) {
  if (img.rank() != 3 || img.shape[0] != 3)
    throw DimensionError("expected 3xHxW image, got " + shape_str(img.shape));
  const int h = img.shape[1], w = img.shape[2];
  std::vector<unsigned char> out((std::size_t)h * w * 3);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int c = 0; c < 3; ++c) out[((std::size_t)i * w + j) * 3 + c] = quant8(img.at(c, i, j));
  return out;
}

Tensor<float> from_bytes_rgb8(const unsigned char* rgb, int h, int w) {
  Tensor<float> img({3, h, w});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int c = 0; c < 3; ++c)
        img.at(c, i, j) = rgb[((std::size_t)i * w + j) * 3 + c] / 255.f;
  return img;
}

Tensor<float> read_image(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw DataError("cannot open image: " + path);
  unsigned char magic[8] = {0};
  const std::size_t got = std::fread(magic, 1, 8, f.get());
  std::rewind(f.get());
  if (got >= 8 && !png_sig_cmp(magic, 0, 8)) return read_png_file(f.get(), path);
  if (got >= 2 && magic[0] == 0xFF && magic[1] == 0xD8) return read_jpeg_file(f.get(), path);
  if (got >= 2 && magic[0] == 'P' && magic[1] == '6') {
    std::fseek(f.get(), 2, SEEK_SET);
    return read_ppm(f.get(), path);
  }
  throw DataError("unrecognized image format: " + path);
}

void write_png(const std::string& path, const Tensor<float>& img) {
  auto bytes = to_bytes_rgb8(img);
  const int h = img.shape[1], w = img.shape[2];
  FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw DataError("cannot write image: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw DataError("libpng init failed: " + path);
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw DataError("libpng init failed: " + path);
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("failed to encode PNG: " + path);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_bytep> rows(h);
  for (int i = 0; i < h; ++i) rows[i] = bytes.data() + (std::size_t)i * w * 3;
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

std::vector<unsigned char> encode_jpeg(const Tensor<float>& img, int quality) {
  if (quality < 1 || quality > 100) throw ConfigError("jpeg quality must be in [1,100]");
  auto bytes = to_bytes_rgb8(img);
  const int h = img.shape[1], w = img.shape[2];
  jpeg_compress_struct cinfo;
  JpegErrorMgr err;
  cinfo.err = jpeg_std_error(&err.pub);
  err.pub.error_exit = jpeg_error_exit;
  unsigned char* mem = nullptr;
  unsigned long mem_len = 0;
  if (setjmp(err.jump)) {
    jpeg_destroy_compress(&cinfo);
    if (mem) free(mem);
    throw DataError("failed to encode JPEG");
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, &mem, &mem_len);
  cinfo.image_width = w;
  cinfo.image_height = h;
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);  // baseline, 4:2:0 chroma subsampling
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  while ((int)cinfo.next_scanline < h) {
    JSAMPROW row = bytes.data() + (std::size_t)cinfo.next_scanline * w * 3;
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  std::vector<unsigned char> out(mem, mem + mem_len);
  jpeg_destroy_compress(&cinfo);
  free(mem);
  return out;
}

Tensor<float> decode_jpeg(const unsigned char* data, std::size_t len) {
  jpeg_decompress_struct cinfo;
  JpegErrorMgr err;
  cinfo.err = jpeg_std_error(&err.pub);
  err.pub.error_exit = jpeg_error_exit;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw DataError("failed to decode JPEG buffer");
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, data, (unsigned long)len);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  const int w = (int)cinfo.output_width, h = (int)cinfo.output_height;
  std::vector<unsigned char> buf((std::size_t)w * h * 3);
  while ((int)cinfo.output_scanline < h) {
    JSAMPROW row = buf.data() + (std::size_t)cinfo.output_scanline * w * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return from_bytes_rgb8(buf.data(), h, w);
}

void write_jpeg(const std::string& path, const Tensor<float>& img, int quality) {
  auto bytes = encode_jpeg(img, quality);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write image: " + path);
  f.write((const char*)bytes.data(), (std::streamsize)bytes.size());
  if (!f) throw DataError("short write: " + path);
}

int estimate_jpeg_quality(const std::string& path) {
  FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw DataError("cannot open image: " + path);
  jpeg_decompress_struct cinfo;
  JpegErrorMgr err;
  cinfo.err = jpeg_std_error(&err.pub);
  err.pub.error_exit = jpeg_error_exit;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw DataError("not a JPEG: " + path);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f.get());
  jpeg_read_header(&cinfo, TRUE);
  if (!cinfo.quant_tbl_ptrs[0]) {
    jpeg_destroy_decompress(&cinfo);
    throw DataError("JPEG has no quantization table: " + path);
  }
  int observed[64];
  for (int i = 0; i < 64; ++i) observed[i] = (int)cinfo.quant_tbl_ptrs[0]->quantval[i];
  jpeg_destroy_decompress(&cinfo);

  int best_q = 1;
  long best_d = -1;
  for (int q = 1; q <= 100; ++q) {
    int tbl[64];
    scaled_luminance_table(q, tbl);
    long d = 0;
    for (int i = 0; i < 64; ++i) d += std::labs((long)tbl[i] - observed[i]);
    if (best_d < 0 || d < best_d) {
      best_d = d;
      best_q = q;
    }
  }
  return best_q;
}

}  // namespace dif
