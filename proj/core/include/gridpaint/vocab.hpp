// Discrete visual vocabulary: k-means codebooks over grid-cell features and
// the quantize/reconstruct maps between FeatureGrid and ClusterGrid.
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gridpaint/random.hpp"
#include "gridpaint/scene.hpp"

namespace gridpaint {

struct Codebook {
  int k = 0;
  int dim = 0;
  std::vector<float> centroids;  // k * dim
  std::uint64_t seed = 0;
  int iterations = 0;
  /// Inertia after each Lloyd assignment step (non-increasing).
  std::vector<double> inertia_history;
  std::uint64_t config_hash = 0;

  std::span<const float> centroid(int j) const {
    return {centroids.data() + static_cast<std::size_t>(j) * dim, static_cast<std::size_t>(dim)};
  }
  double inertia() const { return inertia_history.empty() ? 0.0 : inertia_history.back(); }
  /// Nearest centroid, ties to the lowest id.
  int nearest(std::span<const float> x) const;
  int nearest(std::span<const float> x, double* squared_distance) const;
};

/// Row-major N x N cluster ids.
struct ClusterGrid {
  int grid_n = 0;
  std::vector<int> ids;

  bool operator==(const ClusterGrid&) const = default;
  int cells() const { return grid_n * grid_n; }
};

struct KMeansOptions {
  int k = 32;
  int iterations = 20;
  std::uint64_t seed = 0;
};

/// Indices of the k-means++ seeds: the first uniform, each next one drawn
/// with probability proportional to its squared distance to the nearest
/// seed chosen so far.
std::vector<std::size_t> kmeans_plus_plus(std::span<const float> points, int dim, int k, Rng& rng);

/// k-means++ initialisation followed by Lloyd iterations; an empty cluster
/// is re-seeded with the point farthest from its assigned centroid.
/// `points` holds n * dim values. Throws std::invalid_argument when there are
/// fewer than k distinct points.
Codebook kmeans_fit(std::span<const float> points, int dim, const KMeansOptions& options);

ClusterGrid quantize(const FeatureGrid& grid, const Codebook& codebook);
FeatureGrid reconstruct(const ClusterGrid& ids, const Codebook& codebook);

/// Sum over clusters of the majority-label count, divided by the total.
double purity(std::span<const int> assignments, std::span<const int> labels);

/// Largest distance from any point to its assigned centroid.
double max_cluster_radius(std::span<const float> points, const Codebook& codebook);

/// Content class of each centroid under nearest-prototype decoding.
std::vector<int> centroid_classes(const Codebook& codebook, const PrototypeTable& prototypes);

// "GPVOC1" | k u32 | dim u32 | centroids f32 | JSON metadata (seed,
// iterations, inertia history, config hash) to end of file.
inline constexpr std::string_view kCodebookMagic = "GPVOC1";
std::string encode_codebook(const Codebook& codebook);
Codebook decode_codebook(std::string_view bytes);
void save_codebook(const std::filesystem::path& path, const Codebook& codebook);
Codebook load_codebook(const std::filesystem::path& path);

}  // namespace gridpaint
