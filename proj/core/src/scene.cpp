#include "gridpaint/scene.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace gridpaint {

namespace {

constexpr std::array<std::string_view, kNumGlyphs> kGlyphNames{"circle", "square", "triangle",
                                                               "diamond"};
constexpr std::array<std::string_view, kNumColors> kColorNames{"red", "green", "blue", "yellow"};
constexpr std::array<std::string_view, 3> kNumberWords{"one", "two", "three"};

std::optional<Glyph> glyph_from(std::string_view w) {
  for (int i = 0; i < kNumGlyphs; ++i)
    if (kGlyphNames[static_cast<std::size_t>(i)] == w) return static_cast<Glyph>(i);
  return std::nullopt;
}

std::optional<Color> color_from(std::string_view w) {
  for (int i = 0; i < kNumColors; ++i)
    if (kColorNames[static_cast<std::size_t>(i)] == w) return static_cast<Color>(i);
  return std::nullopt;
}

std::optional<int> number_from(std::string_view w) {
  for (std::size_t i = 0; i < kNumberWords.size(); ++i)
    if (kNumberWords[i] == w) return static_cast<int>(i) + 1;
  return std::nullopt;
}

bool is_top(int row, int grid_n) { return row < grid_n / 2; }
bool is_left(int col, int grid_n) { return col < grid_n / 2; }

void append_object(std::vector<std::string>& out, const SceneObject& o) {
  out.emplace_back("a");
  out.emplace_back(color_name(o.color));
  out.emplace_back(glyph_name(o.glyph));
}

void append_region(std::vector<std::string>& out, const SceneObject& o, int grid_n) {
  const auto [v, h] = region_words(o.row, o.col, grid_n);
  out.emplace_back("in");
  out.emplace_back("the");
  out.emplace_back(v);
  out.emplace_back(h);
}

bool relation_holds(Relation r, const SceneObject& a, const SceneObject& b) {
  switch (r) {
    case Relation::above:
      return a.row < b.row;
    case Relation::below:
      return a.row > b.row;
    case Relation::left_of:
      return a.col < b.col;
    case Relation::right_of:
      return a.col > b.col;
  }
  return false;
}

bool matches(const ObjectDesc& d, const SceneObject& o, int grid_n) {
  if (o.color != d.color || o.glyph != d.glyph) return false;
  if (d.region) {
    if (is_top(o.row, grid_n) != d.region->first) return false;
    if (is_left(o.col, grid_n) != d.region->second) return false;
  }
  return true;
}

TokenSequence descriptive_caption(const Scene& scene, int max_len) {
  // Objects joined by "and"; region phrases are attached greedily while the
  // caption still fits.
  const std::size_t max_words = static_cast<std::size_t>(max_len - 2);
  const std::size_t n = scene.objects.size();
  std::size_t base = 3 * n + (n > 0 ? n - 1 : 0);
  std::size_t with_region = 0;
  while (with_region < n && base + 4 <= max_words) {
    base += 4;
    ++with_region;
  }
  std::vector<std::string> words;
  for (std::size_t i = 0; i < n; ++i) {
    if (i > 0) words.emplace_back("and");
    append_object(words, scene.objects[i]);
    if (i < with_region) append_region(words, scene.objects[i], scene.grid_n);
  }
  return TokenSequence::from_words(words, max_len);
}

}  // namespace

std::string_view glyph_name(Glyph g) { return kGlyphNames.at(static_cast<std::size_t>(g)); }
std::string_view color_name(Color c) { return kColorNames.at(static_cast<std::size_t>(c)); }

int content_class(Glyph g, Color c) {
  return 1 + static_cast<int>(g) * kNumColors + static_cast<int>(c);
}

Glyph class_glyph(int content) {
  if (content <= 0 || content >= kNumContentClasses) throw std::invalid_argument("not an object class");
  return static_cast<Glyph>((content - 1) / kNumColors);
}

Color class_color(int content) {
  if (content <= 0 || content >= kNumContentClasses) throw std::invalid_argument("not an object class");
  return static_cast<Color>((content - 1) % kNumColors);
}

std::vector<int> Scene::content() const {
  std::vector<int> out(static_cast<std::size_t>(grid_n * grid_n), kBackgroundClass);
  for (const auto& o : objects) out[static_cast<std::size_t>(o.row * grid_n + o.col)] = content_class(o.glyph, o.color);
  return out;
}

Scene Scene::from_content(int grid_n, std::span<const int> content) {
  if (content.size() != static_cast<std::size_t>(grid_n * grid_n)) {
    throw std::invalid_argument("content size does not match grid");
  }
  Scene s;
  s.grid_n = grid_n;
  for (int i = 0; i < grid_n * grid_n; ++i) {
    const int c = content[static_cast<std::size_t>(i)];
    if (c == kBackgroundClass) continue;
    s.objects.push_back({i / grid_n, i % grid_n, class_glyph(c), class_color(c)});
  }
  return s;
}

bool Scene::same_layout(const Scene& other) const {
  return grid_n == other.grid_n && content() == other.content();
}

Scene generate_scene(std::uint64_t seed, const SceneConfig& config) {
  if (config.grid_n < 2) throw std::invalid_argument("scene grid must be at least 2x2");
  if (config.min_objects < 1 || config.max_objects < config.min_objects ||
      config.max_objects > config.grid_n * config.grid_n) {
    throw std::invalid_argument("invalid object count range");
  }
  Rng rng(seed, "scene");
  const int count = config.min_objects +
                    static_cast<int>(rng.below(static_cast<std::size_t>(config.max_objects - config.min_objects + 1)));
  const int cells = config.grid_n * config.grid_n;
  const auto picked = rng.choose(static_cast<std::size_t>(cells), static_cast<std::size_t>(count));
  Scene s;
  s.grid_n = config.grid_n;
  for (std::size_t cell : picked) {
    SceneObject o;
    o.row = static_cast<int>(cell) / config.grid_n;
    o.col = static_cast<int>(cell) % config.grid_n;
    o.glyph = static_cast<Glyph>(rng.below(kNumGlyphs));
    o.color = static_cast<Color>(rng.below(kNumColors));
    s.objects.push_back(o);
  }
  return s;
}

// ---------------------------------------------------------------------------
// Text

const std::vector<std::string>& TextVocab::words() {
  static const std::vector<std::string> kWords = {
      "[PAD]", "[CLS]", "[EOS]", "[MASK]",
      "a", "red", "green", "blue", "yellow", "circle", "square", "triangle", "diamond",
      "in", "the", "top", "bottom", "left", "right", "and", "above", "below", "of",
      "one", "two", "three", "object", "objects", "what", "color", "shape", "is"};
  return kWords;
}

int TextVocab::id(std::string_view word) {
  const auto& w = words();
  for (std::size_t i = 0; i < w.size(); ++i)
    if (w[i] == word) return static_cast<int>(i);
  throw std::invalid_argument("unknown word '" + std::string(word) + "'");
}

std::string_view TextVocab::word(int id) {
  if (id < 0 || id >= size()) throw std::out_of_range("token id out of range");
  return words()[static_cast<std::size_t>(id)];
}

TokenSequence::TokenSequence(std::vector<int> tokens, int max_len) : tokens_(std::move(tokens)) {
  if (tokens_.size() < 2 || tokens_.front() != TextVocab::kCls || tokens_.back() != TextVocab::kEos) {
    throw std::invalid_argument("token sequence must start with CLS and end with EOS");
  }
  if (tokens_.size() > static_cast<std::size_t>(max_len)) {
    throw std::invalid_argument("token sequence longer than " + std::to_string(max_len));
  }
  for (int t : tokens_)
    if (t < 0 || t >= TextVocab::size()) throw std::invalid_argument("token id out of range");
}

TokenSequence TokenSequence::from_words(std::span<const std::string> words, int max_len) {
  std::vector<int> ids;
  ids.reserve(words.size() + 2);
  ids.push_back(TextVocab::kCls);
  for (const auto& w : words) ids.push_back(TextVocab::id(w));
  ids.push_back(TextVocab::kEos);
  return TokenSequence(std::move(ids), max_len);
}

TokenSequence TokenSequence::parse(std::string_view text, int max_len) {
  std::vector<std::string> words;
  std::istringstream is{std::string(text)};
  std::string w;
  while (is >> w) words.push_back(w);
  return from_words(words, max_len);
}

std::vector<std::string> TokenSequence::words() const {
  std::vector<std::string> out;
  for (std::size_t i = 1; i + 1 < tokens_.size(); ++i) out.emplace_back(TextVocab::word(tokens_[i]));
  return out;
}

std::string TokenSequence::text() const {
  std::string out;
  for (const auto& w : words()) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

std::string_view caption_kind_name(CaptionKind k) {
  switch (k) {
    case CaptionKind::descriptive:
      return "descriptive";
    case CaptionKind::relational:
      return "relational";
    case CaptionKind::counting:
      return "counting";
    case CaptionKind::question:
      return "question";
  }
  return "?";
}

CaptionKind parse_caption_kind(std::string_view name) {
  for (auto k : {CaptionKind::descriptive, CaptionKind::relational, CaptionKind::counting,
                 CaptionKind::question})
    if (caption_kind_name(k) == name) return k;
  throw std::invalid_argument("unknown caption kind '" + std::string(name) + "'");
}

std::pair<std::string_view, std::string_view> region_words(int row, int col, int grid_n) {
  return {is_top(row, grid_n) ? "top" : "bottom", is_left(col, grid_n) ? "left" : "right"};
}

TokenSequence caption_for(const Scene& scene, CaptionKind kind, Rng& rng, int max_len) {
  if (scene.objects.empty()) throw std::invalid_argument("cannot caption an empty scene");
  switch (kind) {
    case CaptionKind::descriptive:
      return descriptive_caption(scene, max_len);
    case CaptionKind::relational: {
      if (scene.objects.size() < 2) return descriptive_caption(scene, max_len);
      const auto pair = rng.choose(scene.objects.size(), 2);
      const auto& a = scene.objects[pair[0]];
      const auto& b = scene.objects[pair[1]];
      std::vector<Relation> candidates;
      for (auto r : {Relation::above, Relation::below, Relation::left_of, Relation::right_of})
        if (relation_holds(r, a, b)) candidates.push_back(r);
      const Relation r = candidates[rng.below(candidates.size())];
      std::vector<std::string> words;
      append_object(words, a);
      switch (r) {
        case Relation::above:
          words.emplace_back("above");
          break;
        case Relation::below:
          words.emplace_back("below");
          break;
        case Relation::left_of:
          words.emplace_back("left");
          words.emplace_back("of");
          break;
        case Relation::right_of:
          words.emplace_back("right");
          words.emplace_back("of");
          break;
      }
      append_object(words, b);
      return TokenSequence::from_words(words, max_len);
    }
    case CaptionKind::counting: {
      const auto& o = scene.objects[rng.below(scene.objects.size())];
      const bool by_color = rng.bernoulli(0.5);
      int count = 0;
      for (const auto& other : scene.objects)
        count += by_color ? (other.color == o.color) : (other.glyph == o.glyph);
      std::vector<std::string> words;
      words.emplace_back(kNumberWords.at(static_cast<std::size_t>(count - 1)));
      words.emplace_back(by_color ? color_name(o.color) : glyph_name(o.glyph));
      words.emplace_back(count == 1 ? "object" : "objects");
      return TokenSequence::from_words(words, max_len);
    }
    case CaptionKind::question: {
      const auto& o = scene.objects[rng.below(scene.objects.size())];
      std::vector<std::string> words;
      if (rng.bernoulli(0.5)) {
        words = {"what", "color", "is", "the", std::string(glyph_name(o.glyph))};
      } else {
        words = {"what", "shape", "is", "the", std::string(color_name(o.color)), "object"};
      }
      return TokenSequence::from_words(words, max_len);
    }
  }
  throw std::invalid_argument("unknown caption kind");
}

// ---------------------------------------------------------------------------
// Caption semantics

namespace {

class CaptionParser {
 public:
  explicit CaptionParser(std::vector<std::string> words) : w_(std::move(words)) {}

  std::vector<Constraint> parse() {
    if (w_.empty()) fail("empty caption");
    if (w_[0] == "what") return question();
    if (number_from(w_[0])) return counting();
    std::vector<Constraint> out;
    ObjectDesc first = object();
    if (done()) {
      out.push_back(exists(first));
      return out;
    }
    if (peek() == "above" || peek() == "below" || peek() == "left" || peek() == "right") {
      Relation r = relation();
      ObjectDesc second = object();
      expect_end();
      Constraint rel;
      rel.kind = Constraint::Kind::relation;
      rel.first = first;
      rel.second = second;
      rel.relation = r;
      out.push_back(exists(first));
      out.push_back(exists(second));
      out.push_back(rel);
      return out;
    }
    out.push_back(exists(first));
    while (!done()) {
      expect("and");
      out.push_back(exists(object()));
    }
    return out;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    std::string text;
    for (const auto& s : w_) text += s + " ";
    throw parse_error("cannot parse caption '" + text + "': " + what);
  }
  bool done() const { return pos_ >= w_.size(); }
  const std::string& peek() const {
    if (done()) fail("unexpected end");
    return w_[pos_];
  }
  const std::string& next() {
    const auto& s = peek();
    ++pos_;
    return s;
  }
  void expect(std::string_view word) {
    if (next() != word) fail("expected '" + std::string(word) + "'");
  }
  void expect_end() const {
    if (!done()) fail("trailing words");
  }

  static Constraint exists(const ObjectDesc& d) {
    Constraint c;
    c.kind = Constraint::Kind::exists;
    c.first = d;
    return c;
  }

  ObjectDesc object() {
    expect("a");
    auto color = color_from(next());
    if (!color) fail("expected a color");
    auto glyph = glyph_from(next());
    if (!glyph) fail("expected a shape");
    ObjectDesc d{*color, *glyph, std::nullopt};
    if (!done() && peek() == "in") {
      next();
      expect("the");
      const auto& v = next();
      const auto& h = next();
      if ((v != "top" && v != "bottom") || (h != "left" && h != "right")) fail("bad region");
      d.region = std::make_pair(v == "top", h == "left");
    }
    return d;
  }

  Relation relation() {
    const auto& r = next();
    if (r == "above") return Relation::above;
    if (r == "below") return Relation::below;
    expect("of");
    return r == "left" ? Relation::left_of : Relation::right_of;
  }

  std::vector<Constraint> counting() {
    const int n = *number_from(next());
    const auto& attr = next();
    Constraint c;
    c.count = n;
    if (auto color = color_from(attr)) {
      c.kind = Constraint::Kind::count_color;
      c.color = *color;
    } else if (auto glyph = glyph_from(attr)) {
      c.kind = Constraint::Kind::count_glyph;
      c.glyph = *glyph;
    } else {
      fail("expected a color or shape");
    }
    const auto& noun = next();
    if (noun != "object" && noun != "objects") fail("expected 'objects'");
    expect_end();
    return {c};
  }

  std::vector<Constraint> question() {
    expect("what");
    const auto& asked = next();
    expect("is");
    expect("the");
    Constraint c;
    if (asked == "color") {
      auto glyph = glyph_from(next());
      if (!glyph) fail("expected a shape");
      c.kind = Constraint::Kind::has_glyph;
      c.glyph = *glyph;
    } else if (asked == "shape") {
      auto color = color_from(next());
      if (!color) fail("expected a color");
      expect("object");
      c.kind = Constraint::Kind::has_color;
      c.color = *color;
    } else {
      fail("expected 'color' or 'shape'");
    }
    expect_end();
    return {c};
  }

  std::vector<std::string> w_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<Constraint> parse_caption(const TokenSequence& caption) {
  return CaptionParser(caption.words()).parse();
}

bool constraint_holds(const Constraint& c, const Scene& scene) {
  const auto& objs = scene.objects;
  switch (c.kind) {
    case Constraint::Kind::exists:
      return std::any_of(objs.begin(), objs.end(),
                         [&](const SceneObject& o) { return matches(c.first, o, scene.grid_n); });
    case Constraint::Kind::relation:
      for (std::size_t i = 0; i < objs.size(); ++i) {
        if (!matches(c.first, objs[i], scene.grid_n)) continue;
        for (std::size_t j = 0; j < objs.size(); ++j) {
          if (i != j && matches(c.second, objs[j], scene.grid_n) &&
              relation_holds(c.relation, objs[i], objs[j])) {
            return true;
          }
        }
      }
      return false;
    case Constraint::Kind::count_color:
      return std::count_if(objs.begin(), objs.end(),
                           [&](const SceneObject& o) { return o.color == c.color; }) == c.count;
    case Constraint::Kind::count_glyph:
      return std::count_if(objs.begin(), objs.end(),
                           [&](const SceneObject& o) { return o.glyph == c.glyph; }) == c.count;
    case Constraint::Kind::has_color:
      return std::any_of(objs.begin(), objs.end(),
                         [&](const SceneObject& o) { return o.color == c.color; });
    case Constraint::Kind::has_glyph:
      return std::any_of(objs.begin(), objs.end(),
                         [&](const SceneObject& o) { return o.glyph == c.glyph; });
  }
  return false;
}

double oracle_check(const Scene& scene, const TokenSequence& caption) {
  const auto constraints = parse_caption(caption);
  std::size_t ok = 0;
  for (const auto& c : constraints) ok += constraint_holds(c, scene) ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(constraints.size());
}

// ---------------------------------------------------------------------------
// Features

PrototypeTable::PrototypeTable(const FeatureConfig& config)
    : dim_(config.dim), sigma_(config.sigma) {
  if (config.dim < 2) throw std::invalid_argument("feature dim must be at least 2");
  if (!(config.sigma >= 0.0f)) throw std::invalid_argument("sigma must be non-negative");
  // Code layout: one-hot glyph (4) | one-hot colour (4) | background flag (1).
  constexpr int kCodeDim = kNumGlyphs + kNumColors + 1;
  Rng rng(config.projection_seed, "prototypes");
  std::vector<double> projection(static_cast<std::size_t>(kCodeDim * dim_));
  for (auto& p : projection) p = rng.normal();
  std::vector<double> raw(static_cast<std::size_t>(kNumContentClasses * dim_), 0.0);
  for (int c = 0; c < kNumContentClasses; ++c) {
    std::array<double, kCodeDim> code{};
    if (c == kBackgroundClass) {
      code[kCodeDim - 1] = 1.0;
    } else {
      code[static_cast<std::size_t>(class_glyph(c))] = 1.0;
      code[static_cast<std::size_t>(kNumGlyphs + static_cast<int>(class_color(c)))] = 1.0;
    }
    for (int j = 0; j < dim_; ++j) {
      double v = 0.0;
      for (int i = 0; i < kCodeDim; ++i) v += code[static_cast<std::size_t>(i)] * projection[static_cast<std::size_t>(i * dim_ + j)];
      raw[static_cast<std::size_t>(c * dim_ + j)] = v;
    }
  }
  double min_dist = std::numeric_limits<double>::infinity();
  for (int a = 0; a < kNumContentClasses; ++a)
    for (int b = a + 1; b < kNumContentClasses; ++b) {
      double d2 = 0.0;
      for (int j = 0; j < dim_; ++j) {
        const double d = raw[static_cast<std::size_t>(a * dim_ + j)] - raw[static_cast<std::size_t>(b * dim_ + j)];
        d2 += d * d;
      }
      min_dist = std::min(min_dist, std::sqrt(d2));
    }
  if (!(min_dist > 0.0)) throw std::runtime_error("degenerate prototype projection");
  // Rescale so the closest pair sits 2 * margin * sigma apart. With sigma == 0
  // the margin is taken against the default sigma so prototypes stay fixed.
  const double ref_sigma = config.sigma > 0.0f ? config.sigma : FeatureConfig{}.sigma;
  const double scale_factor = 2.0 * double(config.margin_sigmas) * ref_sigma / min_dist;
  table_.resize(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) table_[i] = static_cast<float>(raw[i] * scale_factor);
}

std::span<const float> PrototypeTable::prototype(int content) const {
  if (content < 0 || content >= kNumContentClasses) throw std::out_of_range("content class");
  return {table_.data() + static_cast<std::size_t>(content * dim_), static_cast<std::size_t>(dim_)};
}

int PrototypeTable::nearest(std::span<const float> feature) const {
  if (feature.size() != static_cast<std::size_t>(dim_)) throw std::invalid_argument("feature dim mismatch");
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int c = 0; c < kNumContentClasses; ++c) {
    const auto p = prototype(c);
    double d2 = 0.0;
    for (int j = 0; j < dim_; ++j) {
      const double d = double(feature[static_cast<std::size_t>(j)]) - double(p[static_cast<std::size_t>(j)]);
      d2 += d * d;
    }
    if (d2 < best_d) {
      best_d = d2;
      best = c;
    }
  }
  return best;
}

double PrototypeTable::min_pairwise_distance() const {
  double best = std::numeric_limits<double>::infinity();
  for (int a = 0; a < kNumContentClasses; ++a)
    for (int b = a + 1; b < kNumContentClasses; ++b) {
      double d2 = 0.0;
      for (int j = 0; j < dim_; ++j) {
        const double d = double(prototype(a)[static_cast<std::size_t>(j)]) - double(prototype(b)[static_cast<std::size_t>(j)]);
        d2 += d * d;
      }
      best = std::min(best, std::sqrt(d2));
    }
  return best;
}

FeatureGrid scene_features(const Scene& scene, const PrototypeTable& prototypes, float sigma,
                           Rng& rng) {
  if (!(sigma >= 0.0f)) throw std::invalid_argument("sigma must be non-negative");
  FeatureGrid g;
  g.grid_n = scene.grid_n;
  g.dim = prototypes.dim();
  g.values.resize(static_cast<std::size_t>(g.cells() * g.dim));
  const auto content = scene.content();
  for (int i = 0; i < g.cells(); ++i) {
    const auto p = prototypes.prototype(content[static_cast<std::size_t>(i)]);
    auto cell = g.cell(i);
    for (int j = 0; j < g.dim; ++j) {
      float noise = 0.0f;
      if (sigma > 0.0f) noise = static_cast<float>(rng.normal() * sigma);
      cell[static_cast<std::size_t>(j)] = p[static_cast<std::size_t>(j)] + noise;
    }
  }
  return g;
}

Scene decode_features(const FeatureGrid& grid, const PrototypeTable& prototypes) {
  std::vector<int> content(static_cast<std::size_t>(grid.cells()));
  for (int i = 0; i < grid.cells(); ++i) content[static_cast<std::size_t>(i)] = prototypes.nearest(grid.cell(i));
  return Scene::from_content(grid.grid_n, content);
}

// ---------------------------------------------------------------------------
// Records

DatasetRecord make_record(std::uint32_t id, std::uint64_t seed, const DatasetConfig& config,
                          const PrototypeTable& prototypes) {
  Rng rng(mix64(derive_seed(seed, "data") + id));
  DatasetRecord r;
  r.id = id;
  r.scene = generate_scene(rng.next_u64(), config.scene);
  r.kind = static_cast<CaptionKind>(rng.categorical(config.kind_weights));
  r.caption = caption_for(r.scene, r.kind, rng, config.max_text_len);
  // A relational draw on a one-object scene is recorded as descriptive.
  if (r.kind == CaptionKind::relational && r.scene.objects.size() < 2) r.kind = CaptionKind::descriptive;
  r.features = scene_features(r.scene, prototypes, config.features.sigma, rng);
  return r;
}

Dataset make_dataset(std::uint64_t seed, const DatasetConfig& config) {
  const PrototypeTable prototypes(config.features);
  Dataset ds;
  ds.train.reserve(static_cast<std::size_t>(config.train_records));
  ds.eval.reserve(static_cast<std::size_t>(config.eval_records));
  for (int i = 0; i < config.train_records; ++i)
    ds.train.push_back(make_record(static_cast<std::uint32_t>(i), seed, config, prototypes));
  for (int i = 0; i < config.eval_records; ++i)
    ds.eval.push_back(make_record(static_cast<std::uint32_t>(config.train_records + i), seed, config, prototypes));
  return ds;
}

}  // namespace gridpaint
