#include "crossmark/image_io.hpp"

#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>

#include <jpeglib.h>
#include <png.h>

namespace crossmark {

std::vector<std::uint8_t> to_u8(const Tensor<float>& img) {
  std::vector<std::uint8_t> out((size_t)img.numel());
  for (i64 i = 0; i < img.numel(); ++i) {
    const double v = std::round(255.0 * (double)img.data[(size_t)i]);
    out[(size_t)i] = (std::uint8_t)(v < 0 ? 0 : (v > 255 ? 255 : v));
  }
  return out;
}

Tensor<float> from_u8(const std::uint8_t* data, i64 h, i64 w, i64 c) {
  Tensor<float> img({h, w, c});
  for (i64 i = 0; i < img.numel(); ++i) img.data[(size_t)i] = (float)data[i] / 255.0f;
  return img;
}

Tensor<float> resize_bilinear(const Tensor<float>& img, i64 out_h, i64 out_w) {
  if (img.ndim() != 3) throw ShapeError("resize_bilinear expects H x W x C");
  if (out_h <= 0 || out_w <= 0) throw ConfigError("resize target must be positive");
  const i64 h = img.shape[0], w = img.shape[1], c = img.shape[2];
  if (h == out_h && w == out_w) return img;
  Tensor<float> out({out_h, out_w, c});
  const double sy = (double)h / (double)out_h;
  const double sx = (double)w / (double)out_w;
  for (i64 y = 0; y < out_h; ++y) {
    double fy = ((double)y + 0.5) * sy - 0.5;
    fy = std::min(std::max(fy, 0.0), (double)(h - 1));
    const i64 y0 = (i64)fy;
    const i64 y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - (double)y0;
    for (i64 x = 0; x < out_w; ++x) {
      double fx = ((double)x + 0.5) * sx - 0.5;
      fx = std::min(std::max(fx, 0.0), (double)(w - 1));
      const i64 x0 = (i64)fx;
      const i64 x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - (double)x0;
      for (i64 ch = 0; ch < c; ++ch) {
        const double v00 = img.data[(size_t)(((y0 * w) + x0) * c + ch)];
        const double v01 = img.data[(size_t)(((y0 * w) + x1) * c + ch)];
        const double v10 = img.data[(size_t)(((y1 * w) + x0) * c + ch)];
        const double v11 = img.data[(size_t)(((y1 * w) + x1) * c + ch)];
        const double top = v00 + (v01 - v00) * wx;
        const double bot = v10 + (v11 - v10) * wx;
        out.data[(size_t)(((y * out_w) + x) * c + ch)] = (float)(top + (bot - top) * wy);
      }
    }
  }
  return out;
}

// ---- PNG (simplified libpng API) ----

static Tensor<float> load_png_file(const std::string& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw IoError("png read failed for " + path + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf((size_t)PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("png decode failed for " + path + ": " + image.message);
  }
  return from_u8(buf.data(), (i64)image.height, (i64)image.width, 3);
}

void save_png(const std::string& path, const Tensor<float>& img) {
  if (img.ndim() != 3 || img.shape[2] != 3) throw ShapeError("save_png expects H x W x 3");
  const auto buf = to_u8(img);
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = (png_uint_32)img.shape[1];
  image.height = (png_uint_32)img.shape[0];
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr))
    throw IoError("png write failed for " + path + ": " + image.message);
}

// ---- JPEG ----

namespace {

struct JpegErrorMgr {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

Tensor<float> decode_jpeg(const std::uint8_t* data, size_t size, const std::string& what) {
  jpeg_decompress_struct cinfo;
  JpegErrorMgr jerr;
  cinfo.err = jpeg_std_error(&jerr.pub);
  jerr.pub.error_exit = jpeg_error_exit;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw IoError("jpeg decode failed for " + what + ": " + jerr.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, data, (unsigned long)size);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  const i64 h = cinfo.output_height, w = cinfo.output_width;
  std::vector<std::uint8_t> buf((size_t)(h * w * 3));
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = buf.data() + (size_t)cinfo.output_scanline * (size_t)w * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return from_u8(buf.data(), h, w, 3);
}

std::vector<std::uint8_t> encode_jpeg(const Tensor<float>& img, int quality) {
  if (img.ndim() != 3 || img.shape[2] != 3) throw ShapeError("jpeg encode expects H x W x 3");
  if (quality < 1 || quality > 100) throw ConfigError("jpeg quality must be in [1,100]");
  const auto buf = to_u8(img);
  jpeg_compress_struct cinfo;
  JpegErrorMgr jerr;
  cinfo.err = jpeg_std_error(&jerr.pub);
  jerr.pub.error_exit = jpeg_error_exit;
  unsigned char* mem = nullptr;
  unsigned long mem_size = 0;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_compress(&cinfo);
    if (mem) free(mem);
    throw IoError(std::string("jpeg encode failed: ") + jerr.message);
  }
  jpeg_create_compress(&cinfo);
  jpeg_mem_dest(&cinfo, &mem, &mem_size);
  cinfo.image_width = (JDIMENSION)img.shape[1];
  cinfo.image_height = (JDIMENSION)img.shape[0];
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  const i64 w = img.shape[1];
  while (cinfo.next_scanline < cinfo.image_height) {
    JSAMPROW row = const_cast<std::uint8_t*>(buf.data()) +
                   (size_t)cinfo.next_scanline * (size_t)w * 3;
    jpeg_write_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  std::vector<std::uint8_t> out(mem, mem + mem_size);
  free(mem);
  return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
}

}  // namespace

void save_jpeg(const std::string& path, const Tensor<float>& img, int quality) {
  const auto bytes = encode_jpeg(img, quality);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), (std::streamsize)bytes.size());
  if (!f) throw IoError("short write to " + path);
}

Tensor<float> jpeg_roundtrip(const Tensor<float>& img, int quality) {
  const auto bytes = encode_jpeg(img, quality);
  return decode_jpeg(bytes.data(), bytes.size(), "<memory>");
}

Tensor<float> load_image(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  if (bytes.size() >= 8 && bytes[0] == 0x89 && bytes[1] == 'P' && bytes[2] == 'N' &&
      bytes[3] == 'G')
    return load_png_file(path);
  if (bytes.size() >= 2 && bytes[0] == 0xFF && bytes[1] == 0xD8)
    return decode_jpeg(bytes.data(), bytes.size(), path);
  throw IoError("unrecognized image format: " + path);
}

}  // namespace crossmark
