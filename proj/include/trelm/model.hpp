#pragma once

// Mini pre-LN transformer encoder with an MLM head and a knowledge-decoding
// head. FFN post-activations ("neurons") are addressable by (layer, index)
// and can be clamped during the forward pass.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "trelm/autodiff.hpp"
#include "trelm/tensor.hpp"

namespace trelm {

using TokenId = std::uint32_t;

enum class Pooling { mean, cls };

struct TransformerConfig {
  std::size_t n_layers = 4;
  std::size_t hidden_dim = 64;
  std::size_t n_heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t vocab_size = 2000;
  std::size_t max_seq_len = 32;
  /// Width of the KG entity vectors fed through the knowledge projection.
  std::size_t kg_dim = 32;
  double init_std = 0.02;
  Pooling pooling = Pooling::mean;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const TransformerConfig&) const = default;
};

nlohmann::json to_json(const TransformerConfig& c);
TransformerConfig transformer_config_from_json(const nlohmann::json& j);

struct LayerParamIds {
  ParamId ln1_gain, ln1_bias;
  ParamId qkv_weight;
  ParamId qv_bias;  // [2 d1]: query then value; keys carry no bias (softmax would cancel it)
  ParamId attn_out_weight, attn_out_bias;
  ParamId ln2_gain, ln2_bias;
  ParamId ffn_in_weight, ffn_in_bias;    // [d1, d_ff], [d_ff]
  ParamId ffn_out_weight, ffn_out_bias;  // [d_ff, d1], [d1]
};

struct HeadParamIds {
  ParamId token_embedding;     // [V, d1]; also the output embedding table
  ParamId position_embedding;  // [n, d1]
  ParamId final_ln_gain, final_ln_bias;
  ParamId mlm_dense_weight, mlm_dense_bias;
  ParamId mlm_ln_gain, mlm_ln_bias;
  ParamId mlm_vocab_bias;  // [V]
  ParamId knowledge_weight, knowledge_bias;
  ParamId knowledge_projection;  // [d_k, d1]
};

/// Clamp of one FFN post-activation at one sequence position.
struct Intervention {
  std::size_t layer = 0;
  std::size_t neuron = 0;
  std::size_t position = 0;
  double value = 0.0;
};

/// Positions whose input embedding is replaced by
///   knowledge_weight * (kg_vector * W_proj) + memory_term.
struct InjectedSpan {
  std::vector<std::size_t> positions;
  Tensor kg_vector;  // [d_k]
  double knowledge_weight = 1.0;
  Tensor memory_term;  // [d1]; empty means zero
};

struct EncoderOutput {
  Var hidden;                       // [n, d1], after the final layer norm
  std::vector<Var> activations;     // per layer, [n, d_ff], post-clamp
  std::vector<Tensor> ffn_residual; // per layer, [n, d1], residual stream entering W_out
};

class TransformerModel;

/// Per-tape cache of parameter nodes so each parameter enters a tape once.
class ParamBinding {
 public:
  ParamBinding(Tape& tape, const TransformerModel& model);
  Tape& tape() const { return tape_; }
  const TransformerModel& model() const { return model_; }
  Var operator()(ParamId id);

 private:
  Tape& tape_;
  const TransformerModel& model_;
  std::vector<Var> cache_;
  std::vector<char> bound_;
};

class TransformerModel {
 public:
  explicit TransformerModel(const TransformerConfig& config);

  const TransformerConfig& config() const { return config_; }
  std::vector<Tensor>& params() { return params_; }
  const std::vector<Tensor>& params() const { return params_; }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<Shape> shapes() const;
  std::size_t parameter_count() const;

  const LayerParamIds& layer(std::size_t l) const { return layers_.at(l); }
  const HeadParamIds& heads() const { return heads_; }
  /// True for W_in, b_in and W_out of any layer: the parameters incident to an
  /// FFN neuron. b_out touches no single neuron and is not included.
  bool is_ffn_param(ParamId id) const;
  std::vector<ParamId> ffn_param_ids() const;
  ParamId find(const std::string& name) const;

  // -- graph construction --

  /// Token (+ injected) embeddings plus position embeddings, [n, d1].
  Var embed(ParamBinding& b, std::span<const TokenId> tokens,
            std::span<const InjectedSpan> injections = {}) const;
  EncoderOutput encode(ParamBinding& b, Var input,
                       std::span<const Intervention> interventions = {}) const;
  /// Re-runs the network from layer `layer`'s FFN output projection given
  /// that layer's residual stream and (possibly modified) activations.
  Var resume_from_ffn(ParamBinding& b, std::size_t layer, const Tensor& residual,
                      Var activations) const;
  Var mlm_logits(ParamBinding& b, Var hidden_rows) const;
  /// h_d: knowledge-decoding vectors for the given hidden rows.
  Var knowledge_vectors(ParamBinding& b, Var hidden_rows) const;
  /// f(h_d, y) = h_d . E_y for each listed token, [rows(h_d), |tokens|].
  Var match_scores(ParamBinding& b, Var h_d, std::span<const TokenId> tokens) const;
  /// f(h_d, y) for every vocabulary entry, [rows(h_d), V].
  Var match_scores_all(ParamBinding& b, Var h_d) const;
  /// Pooled sentence representation [1, d1] of final-layer states.
  Var pooled(ParamBinding& b, Var hidden) const;

  // -- value helpers --

  Tensor mlm_logits(std::span<const double> hidden) const;
  double match_score(std::span<const double> h_d, TokenId token) const;
  Tensor pooled_representation(const Tensor& hidden) const;
  /// Forward without a gradient record; returns final hidden states.
  Tensor encode_tokens(std::span<const TokenId> tokens,
                       std::span<const InjectedSpan> injections = {},
                       std::span<const Intervention> interventions = {}) const;

 private:
  ParamId add_param(const std::string& name, Shape shape);
  Var attention_sublayer(ParamBinding& b, std::size_t l, Var x) const;
  Var ffn_activations(ParamBinding& b, std::size_t l, Var residual) const;
  Var run_layer_ffn_out(ParamBinding& b, std::size_t l, Var residual, Var activations) const;

  TransformerConfig config_;
  std::vector<Tensor> params_;
  std::vector<std::string> names_;
  std::vector<LayerParamIds> layers_;
  HeadParamIds heads_{};
  std::vector<char> ffn_flags_;
};

struct Checkpoint {
  TransformerConfig config;
  std::vector<Tensor> params;
  std::vector<std::string> names;
  std::uint64_t step = 0;
  std::uint64_t epoch = 0;
  nlohmann::json extra = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const TransformerModel& model,
                     std::uint64_t step, std::uint64_t epoch,
                     const nlohmann::json& extra = nlohmann::json::object());
Checkpoint read_checkpoint(const std::filesystem::path& path);
TransformerModel load_model(const std::filesystem::path& path);
/// Builds a model with the checkpoint's config and weights.
TransformerModel model_from_checkpoint(const Checkpoint& ckpt);

}  // namespace trelm
