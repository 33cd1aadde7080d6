// Deterministic rasterizer: draws each decoded cell as a flat-coloured glyph
// and encodes the result as an 8-bit RGB PNG.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gridpaint/scene.hpp"
#include "gridpaint/vocab.hpp"

namespace gridpaint {

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB
};

/// Rasterizes a scene into (N * cell_px)^2 pixels.
RgbImage rasterize(const Scene& scene, int cell_px);

std::string encode_png(const RgbImage& image);
RgbImage decode_png(const std::string& bytes);

/// Decodes every cluster id through its centroid's nearest prototype and
/// returns PNG bytes. Throws index_error for ids outside the codebook.
std::string render_png(const ClusterGrid& grid, const Codebook& codebook,
                       const PrototypeTable& prototypes, int cell_px = 64);

/// Nearest-prototype decoding of a cluster grid.
Scene decode_cluster_grid(const ClusterGrid& grid, const Codebook& codebook,
                          const PrototypeTable& prototypes);

}  // namespace gridpaint
