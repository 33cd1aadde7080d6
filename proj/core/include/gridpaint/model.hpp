// Compact cross-modal transformer.
//
// Sequence layout per example: N*N grid cells, then CLS w_1 .. w_T EOS padded
// with PAD up to max_text_len. Grid cells are embedded either from cluster
// ids (discrete mode) or from raw features (continuous mode). The encoder is
// either one joint self-attention stack (single_stream) or per-modality
// self-attention layers followed by cross-attention layers (two_stream).
//
// Heads:
//   CCC   h_grid -> k logits      (affine, GeLU, LN, affine)  } first layer
//   MVFR  h_grid -> d features    (affine, GeLU, LN, affine)  } shared
//   ITM   h_cls  -> match logit   (affine, GeLU, LN, affine; output zero-initialised)
//   MLM   h_text -> vocab logits  (affine, GeLU, LN, affine)
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gridpaint/checkpoint.hpp"
#include "gridpaint/random.hpp"
#include "gridpaint/tensor.hpp"

namespace gridpaint {

enum class Architecture : std::uint8_t { single_stream, two_stream };
enum class VisualMode : std::uint8_t { discrete, continuous };

struct ModelConfig {
  int d_model = 64;
  int layers = 2;  // joint layers, or per-modality self layers for two_stream
  int cross_layers = 2;  // two_stream only
  int heads = 4;
  int ffn_mult = 4;
  int text_vocab = 32;
  int visual_vocab = 32;
  int grid_n = 4;
  int feature_dim = 16;
  int max_text_len = 16;
  Architecture architecture = Architecture::single_stream;
  VisualMode visual_mode = VisualMode::discrete;
  float dropout = 0.0f;

  int grid_cells() const { return grid_n * grid_n; }
  int seq_len() const { return grid_cells() + max_text_len; }
  /// Throws std::invalid_argument on inconsistent settings.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

std::string to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const std::string& text);
std::uint64_t config_hash(const ModelConfig& config);

/// One batch of encoder inputs; per-example blocks are laid out back to back.
struct EncoderInputs {
  std::size_t batch = 0;
  std::vector<int> text;                 // batch * max_text_len, PAD padded
  std::vector<std::uint8_t> text_mask;   // 1 = replaced by MASK
  std::vector<int> grid_ids;             // batch * N*N (discrete mode)
  std::vector<float> grid_features;      // batch * N*N * d (continuous mode)
  std::vector<std::uint8_t> grid_mask;   // 1 = replaced by the MASK embedding
};

template <typename T>
struct EncoderOutputs {
  BasicTensor<T> h_grid;  // [batch * N*N, d_model]
  BasicTensor<T> h_text;  // [batch * max_text_len, d_model]
  BasicTensor<T> h_cls;   // [batch, d_model]
};

template <typename T>
class BasicModel {
 public:
  using TensorT = BasicTensor<T>;

  BasicModel(const ModelConfig& config, std::uint64_t init_seed);

  const ModelConfig& config() const { return config_; }

  TensorT embed_text(const EncoderInputs& in, Rng* dropout_rng = nullptr) const;
  TensorT embed_grid(const EncoderInputs& in, Rng* dropout_rng = nullptr) const;
  /// Dropout is active iff dropout_rng is non-null (training mode).
  EncoderOutputs<T> encode(const EncoderInputs& in, Rng* dropout_rng = nullptr) const;

  TensorT ccc_logits(const TensorT& h_grid) const;
  TensorT mvfr_regress(const TensorT& h_grid) const;
  TensorT itm_logits(const TensorT& h_cls) const;  // [batch, 1]
  std::vector<T> itm_score(const TensorT& h_cls) const;
  TensorT mlm_logits(const TensorT& h_text) const;

  const std::vector<std::pair<std::string, TensorT>>& named_parameters() const { return params_; }
  std::vector<TensorT> parameters() const;
  std::size_t parameter_count() const;

 private:
  struct Affine {
    TensorT w, b;
  };
  struct Norm {
    TensorT gain, bias;
  };
  struct Attn {
    Affine q, k, v, o;
    Norm ln;
    Norm ctx_ln;  // cross attention only
    bool cross = false;
  };
  struct Ffn {
    Affine in, out;
    Norm ln;
  };
  struct Layer {
    Attn self;
    Ffn ffn;
  };
  struct CrossLayer {
    Attn cross_grid, cross_text, self_grid, self_text;
    Ffn ffn_grid, ffn_text;
  };
  struct Head {
    Affine hidden;
    Norm ln;
  };

  TensorT add_param(const std::string& name, Shape shape, std::vector<T> values);
  Affine make_affine(const std::string& name, int in, int out, bool zero_weight = false);
  Norm make_norm(const std::string& name);
  Attn make_attn(const std::string& name, bool cross = false);
  Ffn make_ffn(const std::string& name);

  TensorT apply(const Affine& a, const TensorT& x) const;
  TensorT apply(const Norm& n, const TensorT& x) const;
  TensorT maybe_dropout(const TensorT& x, Rng* rng) const;
  TensorT attend(const Attn& a, const TensorT& x, const TensorT& ctx, std::size_t batch,
                 std::span<const std::uint8_t> ctx_mask, Rng* rng) const;
  TensorT feed_forward(const Ffn& f, const TensorT& x, Rng* rng) const;
  TensorT head_hidden(const Head& h, const TensorT& x) const;

  ModelConfig config_;
  Rng init_rng_;
  std::vector<std::pair<std::string, TensorT>> params_;

  TensorT text_tokens_, text_positions_;
  Norm text_ln_;
  TensorT grid_tokens_;  // discrete: [k + 1, D], last row = MASK
  Affine grid_proj_;     // continuous: [d + 1, D], last input = mask flag
  TensorT grid_positions_;
  Norm grid_ln_;
  std::vector<Layer> layers_;       // single_stream
  std::vector<Layer> grid_layers_;  // two_stream
  std::vector<Layer> text_layers_;
  std::vector<CrossLayer> cross_;
  Norm final_grid_ln_, final_text_ln_;  // two_stream uses both, single_stream the first
  Head visual_head_;
  Affine ccc_out_;
  Affine mvfr_out_;
  Head itm_head_;
  Affine itm_out_;
  Head mlm_head_;
  Affine mlm_out_;
};

using Model = BasicModel<float>;

/// Parameters plus "meta.config_hash" (four 16-bit chunks stored as floats).
std::vector<NamedTensor> model_state(const Model& model);
/// Copies values into the model; throws format_error on a config-hash,
/// name or shape mismatch.
void load_model_state(Model& model, const std::vector<NamedTensor>& state);
std::uint64_t state_config_hash(const std::vector<NamedTensor>& state);

}  // namespace gridpaint
