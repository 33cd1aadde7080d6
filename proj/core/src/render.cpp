#include "gridpaint/render.hpp"

#include <png.h>

#include <array>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "gridpaint/io.hpp"
#include "gridpaint/tensor.hpp"

namespace gridpaint {

namespace {

using Rgb = std::array<std::uint8_t, 3>;

constexpr Rgb kBackground{240, 240, 235};
constexpr std::array<Rgb, kNumColors> kPalette{{
    {220, 50, 47},   // red
    {60, 170, 70},   // green
    {40, 90, 210},   // blue
    {235, 200, 30},  // yellow
}};

// Is the pixel centre (u, v), in [-1, 1]^2 cell coordinates, inside the glyph?
bool inside(Glyph g, double u, double v) {
  switch (g) {
    case Glyph::circle:
      return u * u + v * v <= 0.7 * 0.7;
    case Glyph::square:
      return std::abs(u) <= 0.62 && std::abs(v) <= 0.62;
    case Glyph::triangle:
      // apex up, base at v = 0.6
      return v <= 0.6 && v >= -0.7 && std::abs(u) <= (v + 0.7) * 0.55;
    case Glyph::diamond:
      return std::abs(u) + std::abs(v) <= 0.8;
  }
  return false;
}

void write_cb(png_structp png, png_bytep data, png_size_t len) {
  auto* out = static_cast<std::string*>(png_get_io_ptr(png));
  out->append(reinterpret_cast<const char*>(data), len);
}

void flush_cb(png_structp) {}

struct ReadState {
  const std::string* src;
  std::size_t pos;
};

void read_cb(png_structp png, png_bytep data, png_size_t len) {
  auto* st = static_cast<ReadState*>(png_get_io_ptr(png));
  if (st->pos + len > st->src->size()) png_error(png, "truncated PNG");
  std::memcpy(data, st->src->data() + st->pos, len);
  st->pos += len;
}

void warning_cb(png_structp, png_const_charp) {}

}  // namespace

RgbImage rasterize(const Scene& scene, int cell_px) {
  if (cell_px < 1) throw std::invalid_argument("cell_px must be positive");
  RgbImage img;
  img.width = img.height = scene.grid_n * cell_px;
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  for (std::size_t i = 0; i < img.pixels.size(); i += 3) std::memcpy(&img.pixels[i], kBackground.data(), 3);
  for (const auto& o : scene.objects) {
    const Rgb color = kPalette[static_cast<std::size_t>(o.color)];
    for (int y = 0; y < cell_px; ++y) {
      for (int x = 0; x < cell_px; ++x) {
        const double u = (x + 0.5) / cell_px * 2.0 - 1.0;
        const double v = (y + 0.5) / cell_px * 2.0 - 1.0;
        if (!inside(o.glyph, u, v)) continue;
        const std::size_t px = static_cast<std::size_t>((o.row * cell_px + y) * img.width + o.col * cell_px + x) * 3;
        std::memcpy(&img.pixels[px], color.data(), 3);
      }
    }
  }
  return img;
}

std::string encode_png(const RgbImage& image) {
  std::string out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, warning_cb);
  if (!png) throw std::runtime_error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("PNG encoding failed");
  }
  {
    png_set_write_fn(png, &out, write_cb, flush_cb);
    png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < image.height; ++y) {
      png_write_row(png, image.pixels.data() + static_cast<std::size_t>(y) * image.width * 3);
    }
    png_write_end(png, nullptr);
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

RgbImage decode_png(const std::string& bytes) {
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0) {
    throw format_error("not a PNG");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, warning_cb);
  if (!png) throw std::runtime_error("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  RgbImage img;
  ReadState st{&bytes, 0};
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw format_error("malformed PNG");
  }
  png_set_read_fn(png, &st, read_cb);
  png_read_info(png, info);
  const bool rgb8 = png_get_color_type(png, info) == PNG_COLOR_TYPE_RGB && png_get_bit_depth(png, info) == 8;
  if (rgb8) {
    img.width = static_cast<int>(png_get_image_width(png, info));
    img.height = static_cast<int>(png_get_image_height(png, info));
    img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * 3);
    for (int y = 0; y < img.height; ++y) png_read_row(png, img.pixels.data() + static_cast<std::size_t>(y) * img.width * 3, nullptr);
    png_read_end(png, nullptr);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  if (!rgb8) throw format_error("only 8-bit RGB PNGs are supported");
  return img;
}

Scene decode_cluster_grid(const ClusterGrid& grid, const Codebook& codebook,
                          const PrototypeTable& prototypes) {
  if (grid.ids.size() != static_cast<std::size_t>(grid.cells())) throw std::invalid_argument("cluster grid size mismatch");
  const auto classes = centroid_classes(codebook, prototypes);
  std::vector<int> content(grid.ids.size());
  for (std::size_t i = 0; i < grid.ids.size(); ++i) {
    const int id = grid.ids[i];
    if (id < 0 || id >= codebook.k) throw index_error("cluster id " + std::to_string(id) + " out of range");
    content[i] = classes[static_cast<std::size_t>(id)];
  }
  return Scene::from_content(grid.grid_n, content);
}

std::string render_png(const ClusterGrid& grid, const Codebook& codebook,
                       const PrototypeTable& prototypes, int cell_px) {
  return encode_png(rasterize(decode_cluster_grid(grid, codebook, prototypes), cell_px));
}

}  // namespace gridpaint
