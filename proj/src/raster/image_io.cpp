#include "fgss/image_io.hpp"

#include <png.h>
// jpeglib.h expects FILE/size_t to be declared first.
#include <cstdio>
#include <jpeglib.h>

#include <cmath>
#include <csetjmp>
#include <string>
#include <cstring>
#include <fstream>
#include <iterator>

namespace fgss::io {

namespace {

std::uint8_t to_byte(float v) {
  const float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

float luma(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

struct PngReadState {
  std::span<const std::uint8_t> bytes;
  std::size_t offset = 0;
};

void png_read_cb(png_structp png, png_bytep out, png_size_t len) {
  auto* st = static_cast<PngReadState*>(png_get_io_ptr(png));
  if (st->offset + len > st->bytes.size()) png_error(png, "truncated PNG");
  std::memcpy(out, st->bytes.data() + st->offset, len);
  st->offset += len;
}

void png_write_cb(png_structp png, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + len);
}

void png_flush_cb(png_structp) {}

// Keep libpng quiet: remember the message and let the caller throw it.
thread_local std::string png_last_error;
void png_error_cb(png_structp png, png_const_charp msg) {
  png_last_error = msg ? msg : "unknown error";
  png_longjmp(png, 1);
}
void png_warning_cb(png_structp, png_const_charp) {}

Raster decode_png(std::span<const std::uint8_t> bytes) {
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_cb, png_warning_cb);
  if (!png) throw RasterError("png: cannot allocate reader");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw RasterError("png: cannot allocate info");
  }
  PngReadState st{bytes, 0};
  std::vector<std::uint8_t> pixels;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw RasterError("png: malformed image (" + png_last_error + ")");
  }
  png_set_read_fn(png, &st, png_read_cb);
  png_read_info(png, info);
  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int channels = png_get_channels(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  pixels.resize(stride * h);
  rows.resize(h);
  for (png_uint_32 y = 0; y < h; ++y) rows[y] = pixels.data() + y * stride;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Raster out(static_cast<int>(h), static_cast<int>(w), 1);
  for (png_uint_32 y = 0; y < h; ++y) {
    const std::uint8_t* row = rows[y];
    for (png_uint_32 x = 0; x < w; ++x) {
      float v;
      if (channels >= 3) {
        v = luma(row[x * channels] / 255.0f, row[x * channels + 1] / 255.0f, row[x * channels + 2] / 255.0f);
      } else {
        v = row[x * channels] / 255.0f;
      }
      out.at(static_cast<int>(y), static_cast<int>(x)) = v;
    }
  }
  out.clamp01();
  return out;
}

struct JpegErr {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErr*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

Raster decode_jpeg(std::span<const std::uint8_t> bytes) {
  jpeg_decompress_struct cinfo;
  JpegErr err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  std::vector<std::uint8_t> pixels;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw RasterError("jpeg: malformed image");
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_GRAYSCALE;
  jpeg_start_decompress(&cinfo);
  const int w = static_cast<int>(cinfo.output_width);
  const int h = static_cast<int>(cinfo.output_height);
  pixels.resize(static_cast<std::size_t>(w) * h);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = pixels.data() + static_cast<std::size_t>(cinfo.output_scanline) * w;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  Raster out(h, w, 1);
  auto d = out.data();
  for (std::size_t i = 0; i < pixels.size(); ++i) d[i] = pixels[i] / 255.0f;
  return out;
}

std::vector<std::uint8_t> encode_png_bytes(int h, int w, int channels, const std::vector<std::uint8_t>& px) {
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_cb, png_warning_cb);
  if (!png) throw RasterError("png: cannot allocate writer");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw RasterError("png: cannot allocate info");
  }
  std::vector<std::uint8_t> out;
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw RasterError("png: encoding failed");
  }
  png_set_write_fn(png, &out, png_write_cb, png_flush_cb);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < h; ++y) {
    rows[static_cast<std::size_t>(y)] =
        const_cast<png_bytep>(px.data() + static_cast<std::size_t>(y) * w * channels);
  }
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

}  // namespace

ImageFormat sniff_format(std::span<const std::uint8_t> b) {
  static constexpr std::uint8_t kPng[8] = {0x89, 'P', 'N', 'G', 0x0D, 0x0A, 0x1A, 0x0A};
  if (b.size() >= 8 && std::memcmp(b.data(), kPng, 8) == 0) return ImageFormat::png;
  if (b.size() >= 3 && b[0] == 0xFF && b[1] == 0xD8 && b[2] == 0xFF) return ImageFormat::jpeg;
  return ImageFormat::unknown;
}

Raster decode_gray(std::span<const std::uint8_t> bytes) {
  switch (sniff_format(bytes)) {
    case ImageFormat::png: return decode_png(bytes);
    case ImageFormat::jpeg: return decode_jpeg(bytes);
    case ImageFormat::unknown: break;
  }
  throw RasterError("unsupported image format (expected PNG or JPEG)");
}

Raster read_gray(const std::filesystem::path& path) { return decode_gray(read_file(path)); }

std::vector<std::uint8_t> encode_png(const Raster& raster) {
  std::vector<std::uint8_t> px(static_cast<std::size_t>(raster.height()) * raster.width());
  for (int y = 0; y < raster.height(); ++y) {
    for (int x = 0; x < raster.width(); ++x) {
      px[static_cast<std::size_t>(y) * raster.width() + x] = to_byte(raster.at(y, x, 0));
    }
  }
  return encode_png_bytes(raster.height(), raster.width(), 1, px);
}

std::vector<std::uint8_t> encode_png(const BitMask& mask) {
  std::vector<std::uint8_t> px(mask.bits().size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = mask.bits()[i] ? 255 : 0;
  return encode_png_bytes(mask.height(), mask.width(), 1, px);
}

std::vector<std::uint8_t> encode_png_rgb(const Raster& rgb) {
  if (rgb.channels() != 3) throw RasterError("encode_png_rgb: expected 3 channels");
  std::vector<std::uint8_t> px(rgb.data().size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = to_byte(rgb.data()[i]);
  return encode_png_bytes(rgb.height(), rgb.width(), 3, px);
}

void write_png(const std::filesystem::path& path, const Raster& raster) {
  write_file(path, encode_png(raster));
}

void write_png(const std::filesystem::path& path, const BitMask& mask) {
  write_file(path, encode_png(mask));
}

BitMask read_mask(const std::filesystem::path& path) {
  return BitMask::from_raster(read_gray(path), 127.0f / 255.0f);
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RasterError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RasterError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw RasterError("short write to " + path.string());
}

}  // namespace fgss::io
