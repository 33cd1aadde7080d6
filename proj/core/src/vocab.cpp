#include "gridpaint/vocab.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <nlohmann/json.hpp>
#include <set>
#include <stdexcept>

#include "gridpaint/io.hpp"
#include "gridpaint/tensor.hpp"

namespace gridpaint {

namespace {

double sq_dist(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    s += d * d;
  }
  return s;
}

std::span<const float> row(std::span<const float> points, int dim, std::size_t i) {
  return points.subspan(i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim));
}

std::size_t count_distinct(std::span<const float> points, int dim, std::size_t stop_at) {
  std::set<std::vector<float>> seen;
  const std::size_t n = points.size() / static_cast<std::size_t>(dim);
  for (std::size_t i = 0; i < n && seen.size() < stop_at; ++i) {
    auto r = row(points, dim, i);
    seen.emplace(r.begin(), r.end());
  }
  return seen.size();
}

}  // namespace

int Codebook::nearest(std::span<const float> x) const { return nearest(x, nullptr); }

int Codebook::nearest(std::span<const float> x, double* squared_distance) const {
  if (x.size() != static_cast<std::size_t>(dim)) throw std::invalid_argument("feature dim does not match codebook");
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int j = 0; j < k; ++j) {
    const double d = sq_dist(x, centroid(j));
    if (d < best_d) {
      best_d = d;
      best = j;
    }
  }
  if (squared_distance) *squared_distance = best_d;
  return best;
}

std::vector<std::size_t> kmeans_plus_plus(std::span<const float> points, int dim, int k, Rng& rng) {
  const std::size_t n = points.size() / static_cast<std::size_t>(dim);
  if (n == 0 || k < 1) throw std::invalid_argument("k-means++ needs points and k >= 1");
  std::vector<std::size_t> seeds{rng.below(n)};
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = sq_dist(row(points, dim, i), row(points, dim, seeds[0]));
  while (seeds.size() < static_cast<std::size_t>(k)) {
    const std::size_t next = rng.categorical(d2);
    seeds.push_back(next);
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], sq_dist(row(points, dim, i), row(points, dim, next)));
  }
  return seeds;
}

Codebook kmeans_fit(std::span<const float> points, int dim, const KMeansOptions& options) {
  if (dim < 1 || points.size() % static_cast<std::size_t>(dim) != 0) throw std::invalid_argument("points are not a multiple of dim");
  if (options.k < 1) throw std::invalid_argument("k must be positive");
  if (options.iterations < 1) throw std::invalid_argument("iterations must be positive");
  const std::size_t n = points.size() / static_cast<std::size_t>(dim);
  const auto k = static_cast<std::size_t>(options.k);
  if (count_distinct(points, dim, k) < k) {
    throw std::invalid_argument("fewer than k = " + std::to_string(options.k) + " distinct points");
  }

  Rng rng(options.seed, "kmeans");
  Codebook cb;
  cb.k = options.k;
  cb.dim = dim;
  cb.seed = options.seed;
  cb.iterations = options.iterations;
  cb.centroids.resize(k * static_cast<std::size_t>(dim));
  const auto seeds = kmeans_plus_plus(points, dim, options.k, rng);
  for (std::size_t j = 0; j < k; ++j) {
    auto src = row(points, dim, seeds[j]);
    std::copy(src.begin(), src.end(), cb.centroids.begin() + static_cast<std::ptrdiff_t>(j * dim));
  }

  std::vector<int> assign(n);
  std::vector<double> dist(n);
  std::vector<double> sums(k * static_cast<std::size_t>(dim));
  std::vector<std::size_t> counts(k);
  for (int it = 0; it < options.iterations; ++it) {
    // Assignment.
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      assign[i] = cb.nearest(row(points, dim, i), &dist[i]);
      inertia += dist[i];
    }
    if (!cb.inertia_history.empty() && inertia > cb.inertia_history.back() * (1.0 + 1e-9) + 1e-12) {
      throw std::logic_error("k-means inertia increased");
    }
    cb.inertia_history.push_back(inertia);
    // Update.
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto j = static_cast<std::size_t>(assign[i]);
      ++counts[j];
      auto p = row(points, dim, i);
      for (int d = 0; d < dim; ++d) sums[j * dim + d] += p[static_cast<std::size_t>(d)];
    }
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] == 0) {
        // Farthest point from its own centroid becomes the new centroid; it
        // leaves its old cluster, which can only lower the inertia.
        const auto far = static_cast<std::size_t>(std::max_element(dist.begin(), dist.end()) - dist.begin());
        const auto old = static_cast<std::size_t>(assign[far]);
        auto p = row(points, dim, far);
        for (int d = 0; d < dim; ++d) {
          sums[old * dim + d] -= p[static_cast<std::size_t>(d)];
          sums[j * dim + d] = p[static_cast<std::size_t>(d)];
        }
        --counts[old];
        counts[j] = 1;
        assign[far] = static_cast<int>(j);
        dist[far] = 0.0;
      }
    }
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] == 0) continue;  // donor emptied by a reseed; keep its centroid
      for (int d = 0; d < dim; ++d) {
        cb.centroids[j * dim + d] = static_cast<float>(sums[j * dim + d] / double(counts[j]));
      }
    }
  }
  double final_inertia = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double d = 0.0;
    cb.nearest(row(points, dim, i), &d);
    final_inertia += d;
  }
  if (final_inertia > cb.inertia_history.back() * (1.0 + 1e-9) + 1e-12) {
    throw std::logic_error("k-means inertia increased");
  }
  cb.inertia_history.push_back(final_inertia);
  for (float v : cb.centroids)
    if (!std::isfinite(v)) throw numeric_error("non-finite k-means centroid");
  return cb;
}

ClusterGrid quantize(const FeatureGrid& grid, const Codebook& codebook) {
  if (grid.dim != codebook.dim) throw std::invalid_argument("feature dim does not match codebook");
  ClusterGrid out;
  out.grid_n = grid.grid_n;
  out.ids.resize(static_cast<std::size_t>(grid.cells()));
  for (int i = 0; i < grid.cells(); ++i) out.ids[static_cast<std::size_t>(i)] = codebook.nearest(grid.cell(i));
  return out;
}

FeatureGrid reconstruct(const ClusterGrid& ids, const Codebook& codebook) {
  if (ids.ids.size() != static_cast<std::size_t>(ids.cells())) throw std::invalid_argument("cluster grid size mismatch");
  FeatureGrid g;
  g.grid_n = ids.grid_n;
  g.dim = codebook.dim;
  g.values.resize(static_cast<std::size_t>(g.cells() * g.dim));
  for (int i = 0; i < g.cells(); ++i) {
    const int id = ids.ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= codebook.k) throw index_error("cluster id " + std::to_string(id) + " out of range");
    auto c = codebook.centroid(id);
    std::copy(c.begin(), c.end(), g.cell(i).begin());
  }
  return g;
}

double purity(std::span<const int> assignments, std::span<const int> labels) {
  if (assignments.size() != labels.size()) throw std::invalid_argument("purity needs equal lengths");
  if (assignments.empty()) return 1.0;
  std::map<int, std::map<int, std::size_t>> table;
  for (std::size_t i = 0; i < assignments.size(); ++i) ++table[assignments[i]][labels[i]];
  std::size_t majority = 0;
  for (const auto& [cluster, hist] : table) {
    std::size_t best = 0;
    for (const auto& [label, count] : hist) best = std::max(best, count);
    majority += best;
  }
  return double(majority) / double(assignments.size());
}

double max_cluster_radius(std::span<const float> points, const Codebook& codebook) {
  double worst = 0.0;
  for (std::size_t i = 0; i < points.size() / static_cast<std::size_t>(codebook.dim); ++i) {
    double d = 0.0;
    codebook.nearest(row(points, codebook.dim, i), &d);
    worst = std::max(worst, d);
  }
  return std::sqrt(worst);
}

std::vector<int> centroid_classes(const Codebook& codebook, const PrototypeTable& prototypes) {
  std::vector<int> out(static_cast<std::size_t>(codebook.k));
  for (int j = 0; j < codebook.k; ++j) out[static_cast<std::size_t>(j)] = prototypes.nearest(codebook.centroid(j));
  return out;
}

std::string encode_codebook(const Codebook& cb) {
  if (cb.centroids.size() != static_cast<std::size_t>(cb.k) * cb.dim) throw std::invalid_argument("codebook payload size");
  ByteWriter w;
  w.bytes(kCodebookMagic);
  w.u32(static_cast<std::uint32_t>(cb.k));
  w.u32(static_cast<std::uint32_t>(cb.dim));
  w.f32s(cb.centroids);
  nlohmann::json meta = {{"seed", cb.seed},
                         {"iterations", cb.iterations},
                         {"inertia", cb.inertia()},
                         {"inertia_history", cb.inertia_history},
                         {"config_hash", hex64(cb.config_hash)}};
  w.bytes(meta.dump());
  return w.take();
}

Codebook decode_codebook(std::string_view bytes) {
  ByteReader r(bytes);
  if (r.remaining() < kCodebookMagic.size() || r.bytes(kCodebookMagic.size()) != kCodebookMagic) {
    throw format_error("not a GPVOC1 codebook");
  }
  Codebook cb;
  cb.k = static_cast<int>(r.u32());
  cb.dim = static_cast<int>(r.u32());
  if (cb.k < 1 || cb.dim < 1) throw format_error("codebook has empty shape");
  cb.centroids = r.f32s(static_cast<std::size_t>(cb.k) * cb.dim);
  try {
    const auto meta = nlohmann::json::parse(r.bytes(r.remaining()));
    cb.seed = meta.at("seed").get<std::uint64_t>();
    cb.iterations = meta.at("iterations").get<int>();
    cb.inertia_history = meta.at("inertia_history").get<std::vector<double>>();
    cb.config_hash = std::stoull(meta.at("config_hash").get<std::string>(), nullptr, 16);
  } catch (const nlohmann::json::exception& e) {
    throw format_error(std::string("codebook metadata: ") + e.what());
  }
  return cb;
}

void save_codebook(const std::filesystem::path& path, const Codebook& codebook) {
  write_file(path, encode_codebook(codebook));
}

Codebook load_codebook(const std::filesystem::path& path) { return decode_codebook(read_file(path)); }

}  // namespace gridpaint
