#include "gridpaint/dataset.hpp"

#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "gridpaint/io.hpp"

namespace gridpaint {

using nlohmann::json;

namespace {

json scene_json(const Scene& s) {
  json objs = json::array();
  for (const auto& o : s.objects) {
    objs.push_back({{"row", o.row}, {"col", o.col}, {"shape", glyph_name(o.glyph)},
                    {"color", color_name(o.color)}});
  }
  return {{"grid_n", s.grid_n}, {"objects", std::move(objs)}};
}

Scene scene_from_json(const json& j) {
  Scene s;
  s.grid_n = j.at("grid_n").get<int>();
  for (const auto& o : j.at("objects")) {
    SceneObject obj;
    obj.row = o.at("row").get<int>();
    obj.col = o.at("col").get<int>();
    const auto shape = o.at("shape").get<std::string>();
    const auto color = o.at("color").get<std::string>();
    bool found_shape = false;
    bool found_color = false;
    for (int g = 0; g < kNumGlyphs; ++g)
      if (glyph_name(static_cast<Glyph>(g)) == shape) {
        obj.glyph = static_cast<Glyph>(g);
        found_shape = true;
      }
    for (int c = 0; c < kNumColors; ++c)
      if (color_name(static_cast<Color>(c)) == color) {
        obj.color = static_cast<Color>(c);
        found_color = true;
      }
    if (!found_shape || !found_color) throw format_error("bad object in scene record");
    s.objects.push_back(obj);
  }
  return s;
}

}  // namespace

SplitPaths split_paths(const std::filesystem::path& dir, std::string_view split) {
  return {dir / (std::string(split) + ".jsonl"), dir / (std::string(split) + ".feat")};
}

std::string record_to_json(const DatasetRecord& r, std::uint64_t config_hash) {
  json j = {{"id", r.id},
            {"caption", r.caption.tokens()},
            {"text", r.caption.text()},
            {"kind", caption_kind_name(r.kind)},
            {"scene", scene_json(r.scene)},
            {"config_hash", hex64(config_hash)}};
  return j.dump();
}

void write_split(const SplitPaths& paths, std::span<const DatasetRecord> records,
                 std::uint64_t config_hash) {
  std::string lines;
  for (const auto& r : records) {
    lines += record_to_json(r, config_hash);
    lines += '\n';
  }
  write_file(paths.records, lines);

  const int grid_n = records.empty() ? 0 : records.front().features.grid_n;
  const int dim = records.empty() ? 0 : records.front().features.dim;
  ByteWriter w;
  w.bytes(kFeatureMagic);
  w.u64(config_hash);
  w.u32(static_cast<std::uint32_t>(records.size()));
  w.u32(static_cast<std::uint32_t>(grid_n));
  w.u32(static_cast<std::uint32_t>(dim));
  const std::uint64_t header = kFeatureMagic.size() + 8 + 12 + records.size() * 12;
  const std::uint64_t stride = static_cast<std::uint64_t>(grid_n) * grid_n * dim * sizeof(float);
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].features.grid_n != grid_n || records[i].features.dim != dim) {
      throw std::invalid_argument("records have mixed feature shapes");
    }
    w.u32(records[i].id);
    w.u64(header + i * stride);
  }
  for (const auto& r : records) w.f32s(r.features.values);
  write_file(paths.features, w.take());
}

LoadedSplit read_split(const SplitPaths& paths) {
  const std::string feat = read_file(paths.features);
  ByteReader rd(feat);
  if (rd.remaining() < kFeatureMagic.size() || rd.bytes(kFeatureMagic.size()) != kFeatureMagic) {
    throw format_error(paths.features.string() + " is not a GPFEAT1 sidecar");
  }
  LoadedSplit out;
  out.config_hash = rd.u64();
  const std::uint32_t count = rd.u32();
  const int grid_n = static_cast<int>(rd.u32());
  const int dim = static_cast<int>(rd.u32());
  std::vector<std::pair<std::uint32_t, std::uint64_t>> index(count);
  for (auto& [id, offset] : index) {
    id = rd.u32();
    offset = rd.u64();
  }
  const std::size_t per_record = static_cast<std::size_t>(grid_n) * grid_n * dim;

  std::ifstream in(paths.records);
  if (!in) throw io_error("cannot open " + paths.records.string());
  std::string line;
  std::size_t i = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (i >= count) throw format_error("more records than sidecar entries");
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw format_error(paths.records.string() + ": " + e.what());
    }
    DatasetRecord r;
    r.id = j.at("id").get<std::uint32_t>();
    if (r.id != index[i].first) throw format_error("record id does not match sidecar index");
    if (j.at("config_hash").get<std::string>() != hex64(out.config_hash)) {
      throw format_error("record config hash does not match sidecar");
    }
    r.caption = TokenSequence(j.at("caption").get<std::vector<int>>());
    r.kind = parse_caption_kind(j.at("kind").get<std::string>());
    r.scene = scene_from_json(j.at("scene"));
    rd.seek(index[i].second);
    r.features.grid_n = grid_n;
    r.features.dim = dim;
    r.features.values = rd.f32s(per_record);
    out.records.push_back(std::move(r));
    ++i;
  }
  if (i != count) throw format_error("fewer records than sidecar entries");
  return out;
}

std::string grammar_manifest(const DatasetConfig& config) {
  std::ostringstream os;
  const int n = config.scene.grid_n;
  os << "grid: " << n << "x" << n << ", " << config.scene.min_objects << "-"
     << config.scene.max_objects << " objects\n"
     << "regions: top = row < " << n / 2 << ", left = col < " << n / 2 << "\n"
     << "max_text_len: " << config.max_text_len << " (including CLS and EOS)\n\n"
     << "object       := 'a' COLOR SHAPE [ 'in the' ('top'|'bottom') ('left'|'right') ]\n"
     << "descriptive  := object { 'and' object }   (regions added while the caption fits)\n"
     << "relational   := object ('above'|'below'|'left of'|'right of') object\n"
     << "counting     := NUMBER (COLOR|SHAPE) ('object'|'objects')\n"
     << "question     := 'what color is the' SHAPE | 'what shape is the' COLOR 'object'\n\n"
     << "COLOR  := red | green | blue | yellow\n"
     << "SHAPE  := circle | square | triangle | diamond\n"
     << "NUMBER := one | two | three\n\n"
     << "relations compare rows (above/below) or columns (left of/right of) strictly;\n"
     << "counting captions state the exact count; questions only presuppose the attribute.\n\n"
     << "vocabulary:";
  for (int i = 0; i < TextVocab::size(); ++i) os << (i % 8 == 0 ? "\n  " : " ") << i << ":" << TextVocab::word(i);
  os << "\n";
  return os.str();
}

}  // namespace gridpaint
