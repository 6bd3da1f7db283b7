#include <cmath>
#include <fstream>
#include <type_traits>

#include "trelm/errors.hpp"
#include "trelm/harness.hpp"

namespace trelm {

RunMode run_mode_from_string(const std::string& s) {
  if (s == "trelm") return RunMode::trelm;
  if (s == "mlm_baseline") return RunMode::mlm_baseline;
  throw ValidationError("unknown mode '" + s + "' (expected trelm or mlm_baseline)");
}

std::string to_string(RunMode m) { return m == RunMode::trelm ? "trelm" : "mlm_baseline"; }

namespace {

// Visits every field with its key. Works for const and non-const configs.
template <class Config, class F>
void for_each_field(Config& c, F&& f) {
  f("n_layers", c.n_layers);
  f("hidden_dim", c.hidden_dim);
  f("n_heads", c.n_heads);
  f("ffn_dim", c.ffn_dim);
  f("vocab_size", c.vocab_size);
  f("max_seq_len", c.max_seq_len);
  f("kg_dim", c.kg_dim);
  f("init_std", c.init_std);
  f("pooling", c.pooling);
  f("kg_path", c.kg_path);
  f("corpus_path", c.corpus_path);
  f("split_path", c.split_path);
  f("kg_embeddings_path", c.kg_embeddings_path);
  f("n_entities", c.n_entities);
  f("n_relations", c.n_relations);
  f("n_triples", c.n_triples);
  f("n_sentences", c.n_sentences);
  f("zipf_s", c.zipf_s);
  f("heldout_fraction", c.heldout_fraction);
  f("tokens_per_entity", c.tokens_per_entity);
  f("tokens_per_relation", c.tokens_per_relation);
  f("min_distractors", c.min_distractors);
  f("max_distractors", c.max_distractors);
  f("kg_epochs", c.kg_epochs);
  f("kg_margin", c.kg_margin);
  f("kg_lr", c.kg_lr);
  f("theta", c.theta);
  f("mask_rate", c.mask_rate);
  f("n_negatives", c.n_negatives);
  f("cka_direction", c.cka_direction);
  f("top_k", c.top_k);
  f("long_tail_threshold", c.long_tail_threshold);
  f("si_scoring", c.si_scoring);
  f("injection_policy", c.injection_policy);
  f("lambda0", c.lambda0);
  f("beta", c.beta);
  f("gamma", c.gamma);
  f("window_k", c.window_k);
  f("local_normalizer", c.local_normalizer);
  f("riemann_steps", c.riemann_steps);
  f("path_fraction", c.path_fraction);
  f("path_every", c.path_every);
  f("non_ffn_policy", c.non_ffn_policy);
  f("attribution_batch", c.attribution_batch);
  f("attribution_csv", c.attribution_csv);
  f("mode", c.mode);
  f("epochs", c.epochs);
  f("batch_size", c.batch_size);
  f("lr", c.lr);
  f("momentum", c.momentum);
  f("seed", c.seed);
  f("grad_shards", c.grad_shards);
  f("execution", c.execution);
  f("out_dir", c.out_dir);
}

template <class T>
void assign(T& field, const nlohmann::json& v, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, std::optional<std::uint64_t>>) {
      if (v.is_null()) {
        field.reset();
      } else {
        if (!v.is_number_unsigned()) throw ValidationError("'seed' must be a non-negative integer");
        field = v.get<std::uint64_t>();
      }
    } else if constexpr (std::is_same_v<T, std::size_t>) {
      if (!v.is_number_unsigned()) throw ValidationError("'" + key + "' must be a non-negative integer");
      field = v.get<std::size_t>();
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ValidationError("'" + key + "' must be a number");
      field = v.get<double>();
    } else if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ValidationError("'" + key + "' must be true or false");
      field = v.get<bool>();
    } else {
      if (!v.is_string()) throw ValidationError("'" + key + "' must be a string");
      field = v.get<std::string>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("'" + key + "': " + e.what());
  }
}

template <class T>
nlohmann::json parse_flag_value(const std::string& key, const std::string& text) {
  if constexpr (std::is_same_v<T, std::string>) {
    return text;
  } else if constexpr (std::is_same_v<T, bool>) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ValidationError("--" + key + " expects true or false, got '" + text + "'");
  } else {
    nlohmann::json v = nlohmann::json::parse(text, nullptr, false);
    if (v.is_discarded() || !v.is_number()) {
      throw ValidationError("--" + key + " expects a number, got '" + text + "'");
    }
    return v;
  }
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ValidationError(what);
}

}  // namespace

std::vector<std::string> run_config_keys() {
  std::vector<std::string> keys;
  RunConfig c;
  for_each_field(c, [&](const char* key, auto&) { keys.push_back(key); });
  return keys;
}

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  for_each_field(c, [&](const char* key, const auto& field) {
    using T = std::decay_t<decltype(field)>;
    if constexpr (std::is_same_v<T, std::optional<std::uint64_t>>) {
      j[key] = field ? nlohmann::json(*field) : nlohmann::json(nullptr);
    } else {
      j[key] = field;
    }
  });
  return j;
}

RunConfig apply_json(RunConfig base, const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("run config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool found = false;
    for_each_field(base, [&](const char* name, auto& field) {
      if (key == name) {
        assign(field, value, key);
        found = true;
      }
    });
    if (!found) throw ValidationError("unknown config key '" + key + "'");
  }
  return base;
}

RunConfig apply_overrides(RunConfig base, const std::map<std::string, std::string>& flags) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [key, text] : flags) {
    bool found = false;
    for_each_field(base, [&](const char* name, auto& field) {
      if (key != name) return;
      found = true;
      using T = std::decay_t<decltype(field)>;
      if constexpr (std::is_same_v<T, std::optional<std::uint64_t>>) {
        j[key] = parse_flag_value<std::uint64_t>(key, text);
      } else {
        j[key] = parse_flag_value<T>(key, text);
      }
    });
    if (!found) throw ValidationError("unknown config key '" + key + "'");
  }
  return apply_json(std::move(base), j);
}

RunConfig read_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config " + path.string());
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ValidationError(path.string() + " is not valid JSON");
  return apply_json(RunConfig{}, j);
}

std::uint64_t RunConfig::require_seed() const {
  if (!seed) throw ValidationError("a seed is required");
  return *seed;
}

TransformerConfig RunConfig::transformer_config() const {
  TransformerConfig t;
  t.n_layers = n_layers;
  t.hidden_dim = hidden_dim;
  t.n_heads = n_heads;
  t.ffn_dim = ffn_dim;
  t.vocab_size = vocab_size;
  t.max_seq_len = max_seq_len;
  t.kg_dim = kg_dim;
  t.init_std = init_std;
  if (pooling == "mean") {
    t.pooling = Pooling::mean;
  } else if (pooling == "cls") {
    t.pooling = Pooling::cls;
  } else {
    throw ValidationError("pooling must be mean or cls");
  }
  t.seed = seed.value_or(0);
  return t;
}

void RunConfig::validate() const {
  transformer_config().validate();
  require(n_entities >= 2, "n_entities must be >= 2");
  require(n_relations >= 1, "n_relations must be >= 1");
  require(n_triples >= 1, "n_triples must be >= 1");
  require(n_sentences >= 1, "n_sentences must be >= 1");
  require(zipf_s > 0.0 && std::isfinite(zipf_s), "zipf_s must be > 0");
  require(heldout_fraction >= 0.0 && heldout_fraction < 1.0, "heldout_fraction must be in [0, 1)");
  require(tokens_per_entity >= 1 && tokens_per_relation >= 1, "surface forms need at least one token");
  require(min_distractors <= max_distractors, "min_distractors must be <= max_distractors");
  require(1 + 2 * tokens_per_entity + tokens_per_relation + max_distractors <= max_seq_len,
          "longest generated sentence exceeds max_seq_len");
  require(kg_dim >= 2, "kg_dim must be >= 2");
  require(kg_epochs >= 1, "kg_epochs must be >= 1");
  require(kg_margin >= 0.0, "kg_margin must be >= 0");
  require(kg_lr > 0.0, "kg_lr must be > 0");
  require(theta >= 0.0 && theta <= 1.0, "theta must be in [0, 1]");
  require(mask_rate > 0.0 && mask_rate < 1.0, "mask_rate must be in (0, 1)");
  require(n_negatives >= 1, "n_negatives must be >= 1");
  cka_direction_from_string(cka_direction);
  require(long_tail_threshold >= 1, "long_tail_threshold must be >= 1");
  si_scoring_from_string(si_scoring);
  injection_policy_from_string(injection_policy);
  require(lambda0 >= 0.0 && lambda0 <= 1.0, "lambda0 must be in [0, 1]");
  require(beta >= 1.0, "beta must be >= 1");
  require(gamma > 0.0 && gamma < 1.0, "gamma must be in (0, 1)");
  require(local_normalizer == "window_count" || local_normalizer == "literal",
          "local_normalizer must be window_count or literal");
  require(riemann_steps >= 1, "riemann_steps must be >= 1");
  require(path_fraction > 0.0 && path_fraction <= 1.0, "path_fraction must be in (0, 1]");
  require(path_every >= 1, "path_every must be >= 1");
  non_ffn_policy_from_string(non_ffn_policy);
  require(attribution_batch >= 1, "attribution_batch must be >= 1");
  run_mode_from_string(mode);
  require(epochs >= 1, "epochs must be >= 1");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(lr > 0.0, "lr must be > 0");
  require(momentum >= 0.0 && momentum < 1.0, "momentum must be in [0, 1)");
  require(grad_shards >= 1, "grad_shards must be >= 1");
  require(execution == "parallel" || execution == "serial", "execution must be parallel or serial");
  require(!out_dir.empty(), "out_dir must not be empty");
}

}  // namespace trelm
