// Synthetic scenes, their captions and their grid features.
//
// A scene is a few coloured glyphs on an N x N grid. Every cell maps to one
// of 17 content classes (4 shapes x 4 colours + background); each class has a
// fixed prototype feature vector, and a cell's feature is its prototype plus
// Gaussian noise. Prototypes are scaled so the nearest-prototype decision
// margin is 10 sigma, which makes features exactly decodable back to scenes.
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "gridpaint/random.hpp"

namespace gridpaint {

enum class Glyph : std::uint8_t { circle, square, triangle, diamond };
enum class Color : std::uint8_t { red, green, blue, yellow };

inline constexpr int kNumGlyphs = 4;
inline constexpr int kNumColors = 4;
inline constexpr int kBackgroundClass = 0;
inline constexpr int kNumContentClasses = 1 + kNumGlyphs * kNumColors;

std::string_view glyph_name(Glyph g);
std::string_view color_name(Color c);

/// Content class of an object cell, in [1, 17).
int content_class(Glyph g, Color c);
Glyph class_glyph(int content);
Color class_color(int content);

struct SceneObject {
  int row = 0;
  int col = 0;
  Glyph glyph = Glyph::circle;
  Color color = Color::red;

  bool operator==(const SceneObject&) const = default;
};

struct Scene {
  int grid_n = 4;
  std::vector<SceneObject> objects;

  bool operator==(const Scene&) const = default;

  /// Row-major content classes, N*N entries.
  std::vector<int> content() const;
  static Scene from_content(int grid_n, std::span<const int> content);
  /// Same objects regardless of listing order.
  bool same_layout(const Scene& other) const;
};

struct SceneConfig {
  int grid_n = 4;
  int min_objects = 1;
  int max_objects = 3;
};

/// Uniform object count, distinct cells, glyphs and colours; deterministic
/// per seed.
Scene generate_scene(std::uint64_t seed, const SceneConfig& config);

// ---------------------------------------------------------------------------
// Text

/// Closed word vocabulary; ids 0..3 are PAD, CLS, EOS, MASK.
class TextVocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kCls = 1;
  static constexpr int kEos = 2;
  static constexpr int kMask = 3;

  static const std::vector<std::string>& words();
  static int size() { return static_cast<int>(words().size()); }
  /// Throws std::invalid_argument for unknown words.
  static int id(std::string_view word);
  static std::string_view word(int id);
  static bool is_special(int id) { return id >= 0 && id <= kMask; }
};

inline constexpr int kDefaultMaxTextLen = 16;

/// CLS w_1 ... w_T EOS.
class TokenSequence {
 public:
  TokenSequence() = default;
  /// Validates the CLS/EOS framing and length.
  explicit TokenSequence(std::vector<int> tokens, int max_len = kDefaultMaxTextLen);
  static TokenSequence from_words(std::span<const std::string> words,
                                  int max_len = kDefaultMaxTextLen);
  static TokenSequence parse(std::string_view text, int max_len = kDefaultMaxTextLen);

  const std::vector<int>& tokens() const { return tokens_; }
  std::size_t size() const { return tokens_.size(); }
  /// Words between CLS and EOS.
  std::vector<std::string> words() const;
  std::string text() const;

  bool operator==(const TokenSequence&) const = default;

 private:
  std::vector<int> tokens_;
};

enum class CaptionKind : std::uint8_t { descriptive, relational, counting, question };

std::string_view caption_kind_name(CaptionKind k);
CaptionKind parse_caption_kind(std::string_view name);

/// Region word pair for a cell: quadrants split at N/2.
std::pair<std::string_view, std::string_view> region_words(int row, int col, int grid_n);

/// Generates a caption of `kind` that is true of `scene` (question captions
/// only presuppose one attribute). Relational captions need two objects and
/// fall back to descriptive otherwise.
TokenSequence caption_for(const Scene& scene, CaptionKind kind, Rng& rng,
                          int max_len = kDefaultMaxTextLen);

// ---------------------------------------------------------------------------
// Caption semantics

struct ObjectDesc {
  Color color;
  Glyph glyph;
  std::optional<std::pair<bool, bool>> region;  // (is_top, is_left)
};

enum class Relation : std::uint8_t { above, below, left_of, right_of };

struct Constraint {
  enum class Kind : std::uint8_t { exists, relation, count_color, count_glyph, has_color, has_glyph };
  Kind kind = Kind::exists;
  ObjectDesc first{};
  ObjectDesc second{};
  Relation relation = Relation::above;
  int count = 0;
  Color color = Color::red;
  Glyph glyph = Glyph::circle;
};

class parse_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Parses a caption of the toy grammar into checkable constraints.
std::vector<Constraint> parse_caption(const TokenSequence& caption);
bool constraint_holds(const Constraint& c, const Scene& scene);

/// Fraction of the caption's constraints satisfied by the scene.
double oracle_check(const Scene& scene, const TokenSequence& caption);

// ---------------------------------------------------------------------------
// Features

struct FeatureGrid {
  int grid_n = 0;
  int dim = 0;
  std::vector<float> values;  // row-major cells, dim floats each

  std::span<const float> cell(int index) const {
    return {values.data() + static_cast<std::size_t>(index) * dim, static_cast<std::size_t>(dim)};
  }
  std::span<float> cell(int index) {
    return {values.data() + static_cast<std::size_t>(index) * dim, static_cast<std::size_t>(dim)};
  }
  int cells() const { return grid_n * grid_n; }
};

struct FeatureConfig {
  int dim = 16;
  float sigma = 0.1f;
  std::uint64_t projection_seed = 7;
  /// Half the minimum prototype distance, in units of sigma.
  float margin_sigmas = 10.0f;
};

/// Prototype vector per content class.
class PrototypeTable {
 public:
  explicit PrototypeTable(const FeatureConfig& config);

  int dim() const { return dim_; }
  float sigma() const { return sigma_; }
  std::span<const float> prototype(int content) const;
  /// Index of the nearest prototype (ties to the lower class id).
  int nearest(std::span<const float> feature) const;
  double min_pairwise_distance() const;

 private:
  int dim_;
  float sigma_;
  std::vector<float> table_;
};

FeatureGrid scene_features(const Scene& scene, const PrototypeTable& prototypes, float sigma,
                           Rng& rng);
/// Nearest-prototype decode of every cell.
Scene decode_features(const FeatureGrid& grid, const PrototypeTable& prototypes);

// ---------------------------------------------------------------------------
// Records

struct DatasetRecord {
  std::uint32_t id = 0;
  TokenSequence caption;
  CaptionKind kind = CaptionKind::descriptive;
  Scene scene;
  FeatureGrid features;
};

struct DatasetConfig {
  SceneConfig scene;
  FeatureConfig features;
  int train_records = 8000;
  int eval_records = 1000;
  int max_text_len = kDefaultMaxTextLen;
  /// Relative frequencies of descriptive, relational, counting, question.
  std::array<double, 4> kind_weights{0.35, 0.2, 0.1, 0.35};
};

struct Dataset {
  std::vector<DatasetRecord> train;
  std::vector<DatasetRecord> eval;
};

/// Record i draws from stream (seed, i); split membership is by index.
DatasetRecord make_record(std::uint32_t id, std::uint64_t seed, const DatasetConfig& config,
                          const PrototypeTable& prototypes);
Dataset make_dataset(std::uint64_t seed, const DatasetConfig& config);

}  // namespace gridpaint
