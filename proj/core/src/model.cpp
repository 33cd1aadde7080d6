#include "gridpaint/model.hpp"

#include <cmath>
#include <nlohmann/json.hpp>
#include <stdexcept>

#include "gridpaint/io.hpp"
#include "gridpaint/scene.hpp"

namespace gridpaint {

using nlohmann::json;

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
  if (d_model < 1 || heads < 1 || d_model % heads != 0) fail("d_model must be a positive multiple of heads");
  if (layers < 1) fail("layers must be >= 1");
  if (architecture == Architecture::two_stream && cross_layers < 1) fail("two_stream needs cross_layers >= 1");
  if (ffn_mult < 1) fail("ffn_mult must be >= 1");
  if (text_vocab <= TextVocab::kMask) fail("text vocabulary too small");
  if (visual_vocab < 1) fail("visual vocabulary must be non-empty");
  if (grid_n < 1 || feature_dim < 1) fail("grid_n and feature_dim must be positive");
  if (max_text_len < 2) fail("max_text_len must hold CLS and EOS");
  if (!(dropout >= 0.0f && dropout < 1.0f)) fail("dropout must be in [0, 1)");
}

std::string to_json(const ModelConfig& c) {
  json j = {{"d_model", c.d_model},
            {"layers", c.layers},
            {"cross_layers", c.cross_layers},
            {"heads", c.heads},
            {"ffn_mult", c.ffn_mult},
            {"text_vocab", c.text_vocab},
            {"visual_vocab", c.visual_vocab},
            {"grid_n", c.grid_n},
            {"feature_dim", c.feature_dim},
            {"max_text_len", c.max_text_len},
            {"architecture", c.architecture == Architecture::single_stream ? "single_stream" : "two_stream"},
            {"visual_mode", c.visual_mode == VisualMode::discrete ? "discrete" : "continuous"},
            {"dropout", c.dropout}};
  return j.dump(2);
}

ModelConfig model_config_from_json(const std::string& text) {
  const json j = json::parse(text);
  ModelConfig c;
  c.d_model = j.at("d_model");
  c.layers = j.at("layers");
  c.cross_layers = j.at("cross_layers");
  c.heads = j.at("heads");
  c.ffn_mult = j.at("ffn_mult");
  c.text_vocab = j.at("text_vocab");
  c.visual_vocab = j.at("visual_vocab");
  c.grid_n = j.at("grid_n");
  c.feature_dim = j.at("feature_dim");
  c.max_text_len = j.at("max_text_len");
  const auto arch = j.at("architecture").get<std::string>();
  if (arch != "single_stream" && arch != "two_stream") throw std::invalid_argument("unknown architecture " + arch);
  c.architecture = arch == "single_stream" ? Architecture::single_stream : Architecture::two_stream;
  const auto mode = j.at("visual_mode").get<std::string>();
  if (mode != "discrete" && mode != "continuous") throw std::invalid_argument("unknown visual_mode " + mode);
  c.visual_mode = mode == "discrete" ? VisualMode::discrete : VisualMode::continuous;
  c.dropout = j.at("dropout");
  c.validate();
  return c;
}

std::uint64_t config_hash(const ModelConfig& config) {
  return fnv1a64(json::parse(to_json(config)).dump());
}

// ---------------------------------------------------------------------------

template <typename T>
BasicModel<T>::BasicModel(const ModelConfig& config, std::uint64_t init_seed)
    : config_(config), init_rng_(init_seed, "init") {
  config_.validate();
  const int D = config_.d_model;

  auto table = [&](const std::string& name, int rows) {
    std::vector<T> v(static_cast<std::size_t>(rows) * D);
    for (auto& x : v) x = static_cast<T>(init_rng_.normal() * 0.02);
    return add_param(name, {static_cast<std::size_t>(rows), static_cast<std::size_t>(D)}, std::move(v));
  };

  text_tokens_ = table("text.tokens", config_.text_vocab);
  text_positions_ = table("text.positions", config_.max_text_len);
  text_ln_ = make_norm("text.ln");
  if (config_.visual_mode == VisualMode::discrete) {
    grid_tokens_ = table("grid.tokens", config_.visual_vocab + 1);
  } else {
    grid_proj_ = make_affine("grid.proj", config_.feature_dim + 1, D);
  }
  grid_positions_ = table("grid.positions", config_.grid_cells());
  grid_ln_ = make_norm("grid.ln");

  auto make_layer = [&](const std::string& name) {
    Layer l;
    l.self = make_attn(name + ".attn");
    l.ffn = make_ffn(name + ".ffn");
    return l;
  };
  if (config_.architecture == Architecture::single_stream) {
    for (int i = 0; i < config_.layers; ++i) layers_.push_back(make_layer("enc." + std::to_string(i)));
  } else {
    for (int i = 0; i < config_.layers; ++i) grid_layers_.push_back(make_layer("grid_enc." + std::to_string(i)));
    for (int i = 0; i < config_.layers; ++i) text_layers_.push_back(make_layer("text_enc." + std::to_string(i)));
    for (int i = 0; i < config_.cross_layers; ++i) {
      const std::string n = "cross." + std::to_string(i);
      CrossLayer c;
      c.cross_grid = make_attn(n + ".cross_grid", true);
      c.cross_text = make_attn(n + ".cross_text", true);
      c.self_grid = make_attn(n + ".self_grid");
      c.self_text = make_attn(n + ".self_text");
      c.ffn_grid = make_ffn(n + ".ffn_grid");
      c.ffn_text = make_ffn(n + ".ffn_text");
      cross_.push_back(std::move(c));
    }
  }

  if (config_.architecture == Architecture::single_stream) {
    final_grid_ln_ = make_norm("enc.final_ln");
  } else {
    final_grid_ln_ = make_norm("grid_enc.final_ln");
    final_text_ln_ = make_norm("text_enc.final_ln");
  }

  visual_head_.hidden = make_affine("head.visual.hidden", D, D);
  visual_head_.ln = make_norm("head.visual.ln");
  if (config_.visual_mode == VisualMode::discrete) {
    ccc_out_ = make_affine("head.ccc.out", D, config_.visual_vocab, /*zero_weight=*/true);
  }
  mvfr_out_ = make_affine("head.mvfr.out", D, config_.feature_dim);
  itm_head_.hidden = make_affine("head.itm.hidden", D, D);
  itm_head_.ln = make_norm("head.itm.ln");
  itm_out_ = make_affine("head.itm.out", D, 1, /*zero_weight=*/true);
  mlm_head_.hidden = make_affine("head.mlm.hidden", D, D);
  mlm_head_.ln = make_norm("head.mlm.ln");
  mlm_out_ = make_affine("head.mlm.out", D, config_.text_vocab);
}

template <typename T>
BasicTensor<T> BasicModel<T>::add_param(const std::string& name, Shape shape, std::vector<T> values) {
  auto t = TensorT::parameter(std::move(shape), std::move(values));
  params_.emplace_back(name, t);
  return t;
}

template <typename T>
typename BasicModel<T>::Affine BasicModel<T>::make_affine(const std::string& name, int in, int out,
                                                          bool zero_weight) {
  std::vector<T> w(static_cast<std::size_t>(in) * out, T(0));
  if (!zero_weight) {
    const double sd = 1.0 / std::sqrt(double(in));
    for (auto& x : w) x = static_cast<T>(init_rng_.normal() * sd);
  }
  Affine a;
  a.w = add_param(name + ".w", {static_cast<std::size_t>(in), static_cast<std::size_t>(out)}, std::move(w));
  a.b = add_param(name + ".b", {static_cast<std::size_t>(out)}, std::vector<T>(static_cast<std::size_t>(out), T(0)));
  return a;
}

template <typename T>
typename BasicModel<T>::Norm BasicModel<T>::make_norm(const std::string& name) {
  const auto D = static_cast<std::size_t>(config_.d_model);
  Norm n;
  n.gain = add_param(name + ".gain", {D}, std::vector<T>(D, T(1)));
  n.bias = add_param(name + ".bias", {D}, std::vector<T>(D, T(0)));
  return n;
}

template <typename T>
typename BasicModel<T>::Attn BasicModel<T>::make_attn(const std::string& name, bool cross) {
  const int D = config_.d_model;
  Attn a;
  a.q = make_affine(name + ".q", D, D);
  a.k = make_affine(name + ".k", D, D);
  a.v = make_affine(name + ".v", D, D);
  a.o = make_affine(name + ".o", D, D);
  a.ln = make_norm(name + ".ln");
  if (cross) a.ctx_ln = make_norm(name + ".ctx_ln");
  a.cross = cross;
  return a;
}

template <typename T>
typename BasicModel<T>::Ffn BasicModel<T>::make_ffn(const std::string& name) {
  const int D = config_.d_model;
  Ffn f;
  f.in = make_affine(name + ".in", D, D * config_.ffn_mult);
  f.out = make_affine(name + ".out", D * config_.ffn_mult, D);
  f.ln = make_norm(name + ".ln");
  return f;
}

template <typename T>
BasicTensor<T> BasicModel<T>::apply(const Affine& a, const TensorT& x) const {
  return linear(x, a.w, a.b);
}

template <typename T>
BasicTensor<T> BasicModel<T>::apply(const Norm& n, const TensorT& x) const {
  return layer_norm(x, n.gain, n.bias, T(1e-5));
}

template <typename T>
BasicTensor<T> BasicModel<T>::maybe_dropout(const TensorT& x, Rng* rng) const {
  if (rng == nullptr || config_.dropout <= 0.0f) return x;
  // Four 16-bit draws per 64-bit word.
  const auto threshold = static_cast<std::uint32_t>(std::lround(double(config_.dropout) * 65536.0));
  std::vector<std::uint8_t> keep(x.numel());
  std::uint64_t word = 0;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (i % 4 == 0) word = rng->next_u64();
    keep[i] = (word & 0xffff) >= threshold ? 1 : 0;
    word >>= 16;
  }
  return dropout(x, keep, static_cast<T>(threshold / 65536.0));
}

// Pre-norm residual blocks: x + drop(f(LN(x))). The residual stream is
// normalized once more at the top of the encoder.
template <typename T>
BasicTensor<T> BasicModel<T>::attend(const Attn& a, const TensorT& x, const TensorT& ctx,
                                     std::size_t batch, std::span<const std::uint8_t> ctx_mask,
                                     Rng* rng) const {
  const auto xn = apply(a.ln, x);
  const auto cn = a.cross ? apply(a.ctx_ln, ctx) : xn;
  auto h = attention(apply(a.q, xn), apply(a.k, cn), apply(a.v, cn), batch,
                     static_cast<std::size_t>(config_.heads), ctx_mask);
  return add(x, maybe_dropout(apply(a.o, h), rng));
}

template <typename T>
BasicTensor<T> BasicModel<T>::feed_forward(const Ffn& f, const TensorT& x, Rng* rng) const {
  auto h = apply(f.out, gelu(apply(f.in, apply(f.ln, x))));
  return add(x, maybe_dropout(h, rng));
}

template <typename T>
BasicTensor<T> BasicModel<T>::head_hidden(const Head& h, const TensorT& x) const {
  return apply(h.ln, gelu(apply(h.hidden, x)));
}

template <typename T>
BasicTensor<T> BasicModel<T>::embed_text(const EncoderInputs& in, Rng* rng) const {
  const auto L = static_cast<std::size_t>(config_.max_text_len);
  if (in.text.size() != in.batch * L) throw shape_error("text must hold batch * max_text_len ids");
  if (!in.text_mask.empty() && in.text_mask.size() != in.text.size()) throw shape_error("text mask size");
  std::vector<int> ids(in.text);
  std::vector<int> pos(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (!in.text_mask.empty() && in.text_mask[i]) ids[i] = TextVocab::kMask;
    pos[i] = static_cast<int>(i % L);
  }
  auto e = add(embedding(text_tokens_, ids), embedding(text_positions_, pos));
  return maybe_dropout(apply(text_ln_, e), rng);
}

template <typename T>
BasicTensor<T> BasicModel<T>::embed_grid(const EncoderInputs& in, Rng* rng) const {
  const auto cells = static_cast<std::size_t>(config_.grid_cells());
  const std::size_t n = in.batch * cells;
  if (!in.grid_mask.empty() && in.grid_mask.size() != n) throw shape_error("grid mask size");
  auto masked = [&](std::size_t i) { return !in.grid_mask.empty() && in.grid_mask[i] != 0; };
  std::vector<int> pos(n);
  for (std::size_t i = 0; i < n; ++i) pos[i] = static_cast<int>(i % cells);

  TensorT content;
  if (config_.visual_mode == VisualMode::discrete) {
    if (in.grid_ids.size() != n) throw shape_error("grid ids must hold batch * N*N ids");
    std::vector<int> ids(in.grid_ids);
    for (std::size_t i = 0; i < n; ++i) {
      if (ids[i] < 0 || ids[i] >= config_.visual_vocab) throw index_error("cluster id out of range");
      if (masked(i)) ids[i] = config_.visual_vocab;
    }
    content = embedding(grid_tokens_, ids);
  } else {
    const auto d = static_cast<std::size_t>(config_.feature_dim);
    if (in.grid_features.size() != n * d) throw shape_error("grid features must hold batch * N*N * d values");
    std::vector<T> x(n * (d + 1), T(0));
    for (std::size_t i = 0; i < n; ++i) {
      if (masked(i)) {
        x[i * (d + 1) + d] = T(1);
      } else {
        for (std::size_t j = 0; j < d; ++j) x[i * (d + 1) + j] = static_cast<T>(in.grid_features[i * d + j]);
      }
    }
    content = apply(grid_proj_, TensorT::from({n, d + 1}, std::move(x)));
  }
  auto e = add(content, embedding(grid_positions_, pos));
  return maybe_dropout(apply(grid_ln_, e), rng);
}

template <typename T>
EncoderOutputs<T> BasicModel<T>::encode(const EncoderInputs& in, Rng* rng) const {
  const std::size_t B = in.batch;
  if (B == 0) throw shape_error("empty batch");
  const auto cells = static_cast<std::size_t>(config_.grid_cells());
  const auto L = static_cast<std::size_t>(config_.max_text_len);
  auto grid = embed_grid(in, rng);
  auto text = embed_text(in, rng);

  std::vector<std::uint8_t> text_keys(B * L);
  for (std::size_t i = 0; i < text_keys.size(); ++i) text_keys[i] = in.text[i] != TextVocab::kPad;

  EncoderOutputs<T> out;
  if (config_.architecture == Architecture::single_stream) {
    const std::size_t S = cells + L;
    std::vector<std::uint8_t> keys(B * S, 1);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < L; ++j) keys[b * S + cells + j] = text_keys[b * L + j];
    auto h = concat_segments(grid, text, B);
    for (const auto& layer : layers_) {
      h = attend(layer.self, h, h, B, keys, rng);
      h = feed_forward(layer.ffn, h, rng);
    }
    h = apply(final_grid_ln_, h);
    out.h_grid = slice_segments(h, B, S, 0, cells);
    out.h_text = slice_segments(h, B, S, cells, L);
    out.h_cls = slice_segments(h, B, S, cells, 1);
  } else {
    for (const auto& layer : grid_layers_) {
      grid = attend(layer.self, grid, grid, B, {}, rng);
      grid = feed_forward(layer.ffn, grid, rng);
    }
    for (const auto& layer : text_layers_) {
      text = attend(layer.self, text, text, B, text_keys, rng);
      text = feed_forward(layer.ffn, text, rng);
    }
    for (const auto& c : cross_) {
      auto g = attend(c.cross_grid, grid, text, B, text_keys, rng);
      auto t = attend(c.cross_text, text, grid, B, {}, rng);
      g = attend(c.self_grid, g, g, B, {}, rng);
      t = attend(c.self_text, t, t, B, text_keys, rng);
      grid = feed_forward(c.ffn_grid, g, rng);
      text = feed_forward(c.ffn_text, t, rng);
    }
    out.h_grid = apply(final_grid_ln_, grid);
    out.h_text = apply(final_text_ln_, text);
    out.h_cls = slice_segments(out.h_text, B, L, 0, 1);
  }
  return out;
}

template <typename T>
BasicTensor<T> BasicModel<T>::ccc_logits(const TensorT& h_grid) const {
  if (config_.visual_mode != VisualMode::discrete) throw contract_error("CCC head needs a discrete-mode model");
  return apply(ccc_out_, head_hidden(visual_head_, h_grid));
}

template <typename T>
BasicTensor<T> BasicModel<T>::mvfr_regress(const TensorT& h_grid) const {
  return apply(mvfr_out_, head_hidden(visual_head_, h_grid));
}

template <typename T>
BasicTensor<T> BasicModel<T>::itm_logits(const TensorT& h_cls) const {
  return apply(itm_out_, head_hidden(itm_head_, h_cls));
}

template <typename T>
std::vector<T> BasicModel<T>::itm_score(const TensorT& h_cls) const {
  auto s = sigmoid(itm_logits(h_cls));
  return {s.data().begin(), s.data().end()};
}

template <typename T>
BasicTensor<T> BasicModel<T>::mlm_logits(const TensorT& h_text) const {
  return apply(mlm_out_, head_hidden(mlm_head_, h_text));
}

template <typename T>
std::vector<BasicTensor<T>> BasicModel<T>::parameters() const {
  std::vector<TensorT> out;
  out.reserve(params_.size());
  for (const auto& [name, t] : params_) out.push_back(t);
  return out;
}

template <typename T>
std::size_t BasicModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params_) n += t.numel();
  return n;
}

template class BasicModel<float>;
template class BasicModel<double>;

// ---------------------------------------------------------------------------

namespace {
constexpr const char* kHashName = "meta.config_hash";
}

std::vector<NamedTensor> model_state(const Model& model) {
  std::vector<NamedTensor> out;
  for (const auto& [name, t] : model.named_parameters()) out.push_back({name, t.detach()});
  const std::uint64_t h = config_hash(model.config());
  std::vector<float> chunks(4);
  for (int i = 0; i < 4; ++i) chunks[static_cast<std::size_t>(i)] = static_cast<float>((h >> (16 * i)) & 0xffff);
  out.push_back({kHashName, Tensor::from({4}, std::move(chunks))});
  return out;
}

std::uint64_t state_config_hash(const std::vector<NamedTensor>& state) {
  for (const auto& nt : state) {
    if (nt.name != kHashName) continue;
    if (nt.tensor.numel() != 4) throw format_error("malformed config hash tensor");
    std::uint64_t h = 0;
    for (int i = 0; i < 4; ++i) h |= static_cast<std::uint64_t>(nt.tensor.at(static_cast<std::size_t>(i))) << (16 * i);
    return h;
  }
  throw format_error("checkpoint has no config hash");
}

void load_model_state(Model& model, const std::vector<NamedTensor>& state) {
  if (state_config_hash(state) != config_hash(model.config())) {
    throw format_error("checkpoint was written for a different model config");
  }
  const auto& params = model.named_parameters();
  if (state.size() != params.size() + 1) throw format_error("checkpoint tensor count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, t] = params[i];
    if (state[i].name != name || state[i].tensor.shape() != t.shape()) {
      throw format_error("checkpoint tensor '" + state[i].name + "' does not match parameter '" + name + "'");
    }
    auto dst = Tensor(t).mutable_data();
    auto src = state[i].tensor.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

}  // namespace gridpaint
