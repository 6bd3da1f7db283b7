#include "trelm/model.hpp"

#include <cmath>
#include <random>

#include "trelm/container.hpp"
#include "trelm/errors.hpp"

namespace trelm {

void TransformerConfig::validate() const {
  if (n_layers < 1 || hidden_dim < 1 || n_heads < 1 || ffn_dim < 1 || vocab_size < 1 ||
      max_seq_len < 1 || kg_dim < 1) {
    throw ValidationError("transformer dimensions must all be >= 1");
  }
  if (hidden_dim % n_heads != 0) throw ValidationError("hidden_dim must be divisible by n_heads");
  if (!(init_std > 0.0)) throw ValidationError("init_std must be positive");
}

nlohmann::json to_json(const TransformerConfig& c) {
  return {{"n_layers", c.n_layers},   {"hidden_dim", c.hidden_dim},
          {"n_heads", c.n_heads},     {"ffn_dim", c.ffn_dim},
          {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
          {"kg_dim", c.kg_dim},       {"init_std", c.init_std},
          {"pooling", c.pooling == Pooling::mean ? "mean" : "cls"},
          {"seed", c.seed}};
}

TransformerConfig transformer_config_from_json(const nlohmann::json& j) {
  TransformerConfig c;
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.kg_dim = j.at("kg_dim").get<std::size_t>();
  c.init_std = j.at("init_std").get<double>();
  const auto pooling = j.at("pooling").get<std::string>();
  if (pooling != "mean" && pooling != "cls") throw ValidationError("pooling must be mean or cls");
  c.pooling = pooling == "mean" ? Pooling::mean : Pooling::cls;
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

ParamBinding::ParamBinding(Tape& tape, const TransformerModel& model)
    : tape_(tape), model_(model), cache_(model.params().size()), bound_(model.params().size(), 0) {}

Var ParamBinding::operator()(ParamId id) {
  if (!bound_.at(id)) {
    cache_[id] = tape_.parameter(id, model_.params()[id]);
    bound_[id] = 1;
  }
  return cache_[id];
}

// ---------------------------------------------------------------------------

ParamId TransformerModel::add_param(const std::string& name, Shape shape) {
  params_.emplace_back(std::move(shape));
  names_.push_back(name);
  return params_.size() - 1;
}

TransformerModel::TransformerModel(const TransformerConfig& config) : config_(config) {
  config_.validate();
  const std::size_t d = config_.hidden_dim, f = config_.ffn_dim, v = config_.vocab_size;

  heads_.token_embedding = add_param("token_embedding", {v, d});
  heads_.position_embedding = add_param("position_embedding", {config_.max_seq_len, d});
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerParamIds ids{};
    ids.ln1_gain = add_param(p + "ln1.gain", {d});
    ids.ln1_bias = add_param(p + "ln1.bias", {d});
    ids.qkv_weight = add_param(p + "attn.qkv_weight", {d, 3 * d});
    ids.qv_bias = add_param(p + "attn.qv_bias", {2 * d});
    ids.attn_out_weight = add_param(p + "attn.out_weight", {d, d});
    ids.attn_out_bias = add_param(p + "attn.out_bias", {d});
    ids.ln2_gain = add_param(p + "ln2.gain", {d});
    ids.ln2_bias = add_param(p + "ln2.bias", {d});
    ids.ffn_in_weight = add_param(p + "ffn.in_weight", {d, f});
    ids.ffn_in_bias = add_param(p + "ffn.in_bias", {f});
    ids.ffn_out_weight = add_param(p + "ffn.out_weight", {f, d});
    ids.ffn_out_bias = add_param(p + "ffn.out_bias", {d});
    layers_.push_back(ids);
  }
  heads_.final_ln_gain = add_param("final_ln.gain", {d});
  heads_.final_ln_bias = add_param("final_ln.bias", {d});
  heads_.mlm_dense_weight = add_param("mlm.dense_weight", {d, d});
  heads_.mlm_dense_bias = add_param("mlm.dense_bias", {d});
  heads_.mlm_ln_gain = add_param("mlm.ln.gain", {d});
  heads_.mlm_ln_bias = add_param("mlm.ln.bias", {d});
  heads_.mlm_vocab_bias = add_param("mlm.vocab_bias", {v});
  heads_.knowledge_weight = add_param("knowledge.weight", {d, d});
  heads_.knowledge_bias = add_param("knowledge.bias", {d});
  heads_.knowledge_projection = add_param("knowledge.projection", {config_.kg_dim, d});

  ffn_flags_.assign(params_.size(), 0);
  for (const auto& ids : layers_) {
    ffn_flags_[ids.ffn_in_weight] = ffn_flags_[ids.ffn_in_bias] = ffn_flags_[ids.ffn_out_weight] = 1;
  }

  // Gains start at one, biases at zero, every matrix ~ N(0, init_std^2).
  std::mt19937_64 rng(config_.seed);
  std::normal_distribution<double> normal(0.0, config_.init_std);
  for (ParamId id = 0; id < params_.size(); ++id) {
    const std::string& name = names_[id];
    Tensor& t = params_[id];
    if (name.ends_with(".gain")) {
      t.fill(1.0);
    } else if (t.rank() == 2) {
      for (double& x : t.data()) x = normal(rng);
    }
  }
}

std::vector<Shape> TransformerModel::shapes() const {
  std::vector<Shape> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.shape());
  return out;
}

std::size_t TransformerModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

bool TransformerModel::is_ffn_param(ParamId id) const { return ffn_flags_.at(id) != 0; }

std::vector<ParamId> TransformerModel::ffn_param_ids() const {
  std::vector<ParamId> out;
  for (ParamId id = 0; id < params_.size(); ++id) {
    if (ffn_flags_[id]) out.push_back(id);
  }
  return out;
}

ParamId TransformerModel::find(const std::string& name) const {
  for (ParamId id = 0; id < names_.size(); ++id) {
    if (names_[id] == name) return id;
  }
  throw ValidationError("no parameter named '" + name + "'");
}

Var TransformerModel::embed(ParamBinding& b, std::span<const TokenId> tokens,
                            std::span<const InjectedSpan> injections) const {
  const std::size_t n = tokens.size();
  if (n == 0) throw ValidationError("cannot embed an empty sequence");
  if (n > config_.max_seq_len) {
    throw ValidationError("sequence length " + std::to_string(n) + " exceeds max_seq_len " +
                          std::to_string(config_.max_seq_len));
  }
  for (TokenId t : tokens) {
    if (t >= config_.vocab_size) throw ValidationError("token id " + std::to_string(t) + " >= V");
  }
  Tape& tape = b.tape();
  Var x = ops::gather_rows(b(heads_.token_embedding), tokens);
  if (!injections.empty()) {
    const std::size_t d = config_.hidden_dim, dk = config_.kg_dim;
    std::vector<std::size_t> rows;
    std::vector<double> kg_rows, weights, memory_rows;
    for (const auto& span : injections) {
      if (span.kg_vector.size() != dk) throw ShapeError("injected KG vector width != kg_dim");
      if (!span.memory_term.empty() && span.memory_term.size() != d) {
        throw ShapeError("memory term width != hidden_dim");
      }
      for (std::size_t p : span.positions) {
        if (p >= n) throw ValidationError("injected position out of range");
        rows.push_back(p);
        kg_rows.insert(kg_rows.end(), span.kg_vector.data().begin(), span.kg_vector.data().end());
        for (std::size_t j = 0; j < d; ++j) {
          weights.push_back(span.knowledge_weight);
          memory_rows.push_back(span.memory_term.empty() ? 0.0 : span.memory_term[j]);
        }
      }
    }
    if (!rows.empty()) {
      const std::size_t r = rows.size();
      Var kg = tape.constant(Tensor({r, dk}, std::move(kg_rows)));
      Var projected = ops::matmul(kg, b(heads_.knowledge_projection));
      Var weighted = ops::mul(projected, tape.constant(Tensor({r, d}, std::move(weights))));
      Var mixed = ops::add(weighted, tape.constant(Tensor({r, d}, std::move(memory_rows))));
      x = ops::replace_rows(x, rows, mixed);
    }
  }
  std::vector<std::size_t> positions(n);
  for (std::size_t i = 0; i < n; ++i) positions[i] = i;
  return ops::add(x, ops::select_rows(b(heads_.position_embedding), positions));
}

Var TransformerModel::run_layer_ffn_out(ParamBinding& b, std::size_t l, Var residual,
                                        Var activations) const {
  const auto& ids = layers_[l];
  Var ffn = ops::add_row(ops::matmul(activations, b(ids.ffn_out_weight)), b(ids.ffn_out_bias));
  return ops::add(residual, ffn);
}

Var TransformerModel::attention_sublayer(ParamBinding& b, std::size_t l, Var x) const {
  const auto& ids = layers_[l];
  const std::size_t d = config_.hidden_dim, heads = config_.n_heads, dh = d / heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Var u = ops::layer_norm(x, b(ids.ln1_gain), b(ids.ln1_bias));
  const Var bias_parts[] = {ops::slice_cols(b(ids.qv_bias), 0, d), b.tape().constant(Tensor({1, d})),
                            ops::slice_cols(b(ids.qv_bias), d, d)};
  Var qkv = ops::add_row(ops::matmul(u, b(ids.qkv_weight)), ops::concat_cols(bias_parts));
  std::vector<Var> head_out;
  head_out.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var q = ops::slice_cols(qkv, h * dh, dh);
    Var k = ops::slice_cols(qkv, d + h * dh, dh);
    Var v = ops::slice_cols(qkv, 2 * d + h * dh, dh);
    Var probs = ops::softmax_rows(ops::scale(ops::matmul_bt(q, k), att_scale));
    head_out.push_back(ops::matmul(probs, v));
  }
  Var attn = heads == 1 ? head_out[0] : ops::concat_cols(head_out);
  attn = ops::add_row(ops::matmul(attn, b(ids.attn_out_weight)), b(ids.attn_out_bias));
  return ops::add(x, attn);
}

Var TransformerModel::ffn_activations(ParamBinding& b, std::size_t l, Var residual) const {
  const auto& ids = layers_[l];
  Var u = ops::layer_norm(residual, b(ids.ln2_gain), b(ids.ln2_bias));
  return ops::gelu(ops::add_row(ops::matmul(u, b(ids.ffn_in_weight)), b(ids.ffn_in_bias)));
}

EncoderOutput TransformerModel::encode(ParamBinding& b, Var input,
                                       std::span<const Intervention> interventions) const {
  Tape& tape = b.tape();
  const std::size_t n = tape.value(input).rows();
  const std::size_t f = config_.ffn_dim;
  if (tape.value(input).cols() != config_.hidden_dim) {
    throw ShapeError("encoder input width != hidden_dim");
  }
  if (n > config_.max_seq_len) throw ValidationError("sequence longer than max_seq_len");

  std::vector<std::vector<ops::EntryClamp>> clamps(config_.n_layers);
  for (const auto& iv : interventions) {
    if (iv.layer >= config_.n_layers || iv.neuron >= f || iv.position >= n) {
      throw ValidationError("intervention (layer " + std::to_string(iv.layer) + ", neuron " +
                            std::to_string(iv.neuron) + ", position " +
                            std::to_string(iv.position) + ") out of range");
    }
    clamps[iv.layer].push_back({iv.position * f + iv.neuron, iv.value});
  }

  EncoderOutput out;
  Var x = input;
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    Var a = attention_sublayer(b, l, x);
    Var act = ffn_activations(b, l, a);
    if (!clamps[l].empty()) act = ops::clamp_entries(act, clamps[l]);
    out.activations.push_back(act);
    out.ffn_residual.push_back(tape.value(a));
    x = run_layer_ffn_out(b, l, a, act);
  }
  out.hidden = ops::layer_norm(x, b(heads_.final_ln_gain), b(heads_.final_ln_bias));
  return out;
}

Var TransformerModel::resume_from_ffn(ParamBinding& b, std::size_t layer, const Tensor& residual,
                                      Var activations) const {
  if (layer >= config_.n_layers) throw ValidationError("resume layer out of range");
  Var x = run_layer_ffn_out(b, layer, b.tape().constant(residual), activations);
  for (std::size_t l = layer + 1; l < config_.n_layers; ++l) {
    Var a = attention_sublayer(b, l, x);
    x = run_layer_ffn_out(b, l, a, ffn_activations(b, l, a));
  }
  return ops::layer_norm(x, b(heads_.final_ln_gain), b(heads_.final_ln_bias));
}

Var TransformerModel::mlm_logits(ParamBinding& b, Var hidden_rows) const {
  Var t = ops::add_row(ops::matmul(hidden_rows, b(heads_.mlm_dense_weight)),
                       b(heads_.mlm_dense_bias));
  t = ops::layer_norm(ops::gelu(t), b(heads_.mlm_ln_gain), b(heads_.mlm_ln_bias));
  return ops::add_row(ops::matmul_bt(t, b(heads_.token_embedding)), b(heads_.mlm_vocab_bias));
}

Var TransformerModel::knowledge_vectors(ParamBinding& b, Var hidden_rows) const {
  return ops::add_row(ops::matmul(hidden_rows, b(heads_.knowledge_weight)),
                      b(heads_.knowledge_bias));
}

Var TransformerModel::match_scores(ParamBinding& b, Var h_d, std::span<const TokenId> tokens) const {
  for (TokenId t : tokens) {
    if (t >= config_.vocab_size) throw ValidationError("token id " + std::to_string(t) + " >= V");
  }
  return ops::matmul_bt(h_d, ops::gather_rows(b(heads_.token_embedding), tokens));
}

Var TransformerModel::match_scores_all(ParamBinding& b, Var h_d) const {
  return ops::matmul_bt(h_d, b(heads_.token_embedding));
}

Var TransformerModel::pooled(ParamBinding&, Var hidden) const {
  if (config_.pooling == Pooling::cls) {
    const std::size_t first = 0;
    return ops::select_rows(hidden, std::span<const std::size_t>(&first, 1));
  }
  return ops::mean_rows(hidden);
}

Tensor TransformerModel::mlm_logits(std::span<const double> hidden) const {
  if (hidden.size() != config_.hidden_dim) throw ShapeError("mlm_logits: hidden width");
  Tape tape(GradMode::disabled);
  ParamBinding b(tape, *this);
  Var h = tape.constant(Tensor({1, hidden.size()}, {hidden.begin(), hidden.end()}));
  return tape.value(mlm_logits(b, h));
}

double TransformerModel::match_score(std::span<const double> h_d, TokenId token) const {
  if (h_d.size() != config_.hidden_dim) throw ShapeError("match_score: h_d width");
  if (token >= config_.vocab_size) throw ValidationError("token id " + std::to_string(token) + " >= V");
  const auto e = params_[heads_.token_embedding].row(token);
  double s = 0.0;
  for (std::size_t j = 0; j < h_d.size(); ++j) s += h_d[j] * e[j];
  return s;
}

Tensor TransformerModel::pooled_representation(const Tensor& hidden) const {
  if (hidden.empty() || hidden.rows() == 0) throw ValidationError("pooling over an empty sequence");
  const std::size_t n = hidden.rows(), d = hidden.cols();
  if (config_.pooling == Pooling::cls) {
    return Tensor({d}, {hidden.row(0).begin(), hidden.row(0).end()});
  }
  Tensor out({d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[j] += hidden.at(i, j);
  for (double& v : out.data()) v /= static_cast<double>(n);
  return out;
}

Tensor TransformerModel::encode_tokens(std::span<const TokenId> tokens,
                                       std::span<const InjectedSpan> injections,
                                       std::span<const Intervention> interventions) const {
  Tape tape(GradMode::disabled);
  ParamBinding b(tape, *this);
  Var x = embed(b, tokens, injections);
  return tape.value(encode(b, x, interventions).hidden);
}

// ---------------------------------------------------------------------------
// checkpoints

void save_checkpoint(const std::filesystem::path& path, const TransformerModel& model,
                     std::uint64_t step, std::uint64_t epoch, const nlohmann::json& extra) {
  Container c;
  c.kind = "trelm.checkpoint";
  c.meta = {{"config", to_json(model.config())}, {"step", step}, {"epoch", epoch},
            {"extra", extra}};
  for (ParamId id = 0; id < model.params().size(); ++id) {
    c.tensors.push_back({model.names()[id], model.params()[id]});
  }
  write_container(path, c);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  Container c = read_container(path);
  if (c.kind != "trelm.checkpoint") throw FormatError(path.string() + " is not a checkpoint");
  Checkpoint ck;
  try {
    ck.config = transformer_config_from_json(c.meta.at("config"));
    ck.step = c.meta.at("step").get<std::uint64_t>();
    ck.epoch = c.meta.at("epoch").get<std::uint64_t>();
    ck.extra = c.meta.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
  for (auto& t : c.tensors) {
    ck.names.push_back(t.name);
    ck.params.push_back(std::move(t.tensor));
  }
  return ck;
}

TransformerModel model_from_checkpoint(const Checkpoint& ckpt) {
  TransformerModel model(ckpt.config);
  if (ckpt.params.size() != model.params().size()) {
    throw FormatError("checkpoint parameter count does not match its config");
  }
  for (ParamId id = 0; id < ckpt.params.size(); ++id) {
    if (ckpt.names[id] != model.names()[id] || ckpt.params[id].shape() != model.params()[id].shape()) {
      throw FormatError("checkpoint parameter '" + ckpt.names[id] + "' does not match the model layout");
    }
    model.params()[id] = ckpt.params[id];
  }
  return model;
}

TransformerModel load_model(const std::filesystem::path& path) {
  return model_from_checkpoint(read_checkpoint(path));
}

}  // namespace trelm
