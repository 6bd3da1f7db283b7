#pragma once

// Pre-training orchestration (TRELM and the MLM-only baseline), knowledge
// probing and run comparison.

#include <filesystem>
#include <functional>
#include <map>
#include <ostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "trelm/corpus.hpp"
#include "trelm/injection.hpp"
#include "trelm/memory_bank.hpp"
#include "trelm/model.hpp"
#include "trelm/objectives.hpp"
#include "trelm/routing.hpp"

namespace trelm {

enum class RunMode { trelm, mlm_baseline };
RunMode run_mode_from_string(const std::string& s);
std::string to_string(RunMode m);

/// Every tunable of a run. Serialized as one flat JSON object whose keys are
/// the field names below; unknown keys are rejected.
struct RunConfig {
  // model
  std::size_t n_layers = 4;
  std::size_t hidden_dim = 64;
  std::size_t n_heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t vocab_size = 2000;
  std::size_t max_seq_len = 32;
  std::size_t kg_dim = 32;
  double init_std = 0.1;
  std::string pooling = "mean";

  // data; empty paths are generated from the seed
  std::string kg_path;
  std::string corpus_path;
  std::string split_path;
  std::string kg_embeddings_path;
  std::size_t n_entities = 100;
  std::size_t n_relations = 8;
  std::size_t n_triples = 400;
  std::size_t n_sentences = 10000;
  double zipf_s = 1.1;
  double heldout_fraction = 0.1;
  std::size_t tokens_per_entity = 1;
  std::size_t tokens_per_relation = 2;
  std::size_t min_distractors = 2;
  std::size_t max_distractors = 6;

  // KG embeddings
  std::size_t kg_epochs = 500;
  double kg_margin = 2.0;
  double kg_lr = 0.01;

  // objectives
  double theta = 0.5;
  double mask_rate = 0.15;
  std::size_t n_negatives = 10;
  std::string cka_direction = "both";

  // injection
  std::size_t top_k = 2;
  std::size_t long_tail_threshold = 5;
  std::string si_scoring = "reciprocal_cosine";
  std::string injection_policy = "standard";

  // memory bank
  double lambda0 = 0.5;
  double beta = 2.0;
  double gamma = 0.1;
  std::size_t window_k = 16;
  std::string local_normalizer = "window_count";

  // routing
  std::size_t riemann_steps = 20;
  double path_fraction = 0.1;
  std::size_t path_every = 1;
  std::string non_ffn_policy = "full";
  std::size_t attribution_batch = 2;
  bool attribution_csv = false;

  // training
  std::string mode = "trelm";
  std::size_t epochs = 5;
  std::size_t batch_size = 32;
  double lr = 0.02;
  double momentum = 0.9;
  std::optional<std::uint64_t> seed;
  std::size_t grad_shards = 8;
  std::string execution = "parallel";
  std::string out_dir = "run";

  void validate() const;
  TransformerConfig transformer_config() const;
  RunMode run_mode() const { return run_mode_from_string(mode); }
  std::uint64_t require_seed() const;
};

nlohmann::json to_json(const RunConfig& c);
/// Applies the keys of `j` on top of `base`. Unknown keys raise ValidationError.
RunConfig apply_json(RunConfig base, const nlohmann::json& j);
/// Same for textual values, as given on the command line ("--key value").
RunConfig apply_overrides(RunConfig base, const std::map<std::string, std::string>& flags);
RunConfig read_run_config(const std::filesystem::path& path);
/// Key names accepted in a config file, in declaration order.
std::vector<std::string> run_config_keys();

/// Everything a run trains and probes on.
struct Dataset {
  KnowledgeGraph kg;
  TripleSplit split;
  std::vector<AnnotatedSequence> corpus;
  KgEmbeddings kg_embeddings;
  EntityCounts counts;
};

/// Loads the configured files, generating whatever is not given from the seed.
Dataset prepare_dataset(const RunConfig& config);
// The individual steps of prepare_dataset.
KnowledgeGraph dataset_kg(const RunConfig& config);
TripleSplit dataset_split(const RunConfig& config, const KnowledgeGraph& kg);
std::vector<AnnotatedSequence> dataset_corpus(const RunConfig& config, const KnowledgeGraph& kg,
                                              const TripleSplit& split);
KgEmbeddings dataset_kg_embeddings(const RunConfig& config, const KnowledgeGraph& kg);

struct ProbeResult {
  std::map<RelationId, double> per_relation;  // relations with at least one query
  std::map<RelationId, std::size_t> queries;
  double macro_p_at_1 = 0.0;
  std::size_t n_queries = 0;
  /// Relations of the graph without a query; left out of the macro average.
  std::vector<RelationId> excluded;
};
nlohmann::json to_json(const ProbeResult& r);

/// Everything needed to turn a probe triple into model input.
struct ProbeContext {
  const KnowledgeGraph* kg = nullptr;
  /// Non-null for knowledge-injected probing (trelm mode).
  const KgEmbeddings* kg_embeddings = nullptr;
  const MemoryBank* bank = nullptr;
  double lambda = 0.0;
  std::set<EntityId> long_tail;
  SelectionOptions selection;
};

/// Cloze P@1 of `triples` under the MLM head, macro-averaged over relations.
ProbeResult probe(const TransformerModel& model, const ProbeContext& ctx,
                  std::span<const Triple> triples);
double macro_average(const std::map<RelationId, double>& per_relation);

struct PretrainResult {
  std::filesystem::path checkpoint;       // last epoch
  std::filesystem::path best_checkpoint;  // best held-out probe
  std::filesystem::path bank;
  std::filesystem::path metrics;
  ProbeResult heldout;
  ProbeResult train;
  double first_loss = 0.0;
  double mean_coverage = 0.0;
  std::vector<double> epoch_loss;  // mean l_total per epoch
  std::size_t steps = 0;
};

/// Optional observer called after each step with the step's metrics row.
using StepObserver = std::function<void(const nlohmann::json& row)>;

PretrainResult pretrain(const RunConfig& config, const StepObserver& observer = {});
/// Same, on an already prepared dataset (saves regenerating it across modes).
PretrainResult pretrain(const RunConfig& config, const Dataset& data, const StepObserver& observer = {});

/// A finished run read back from its directory.
struct LoadedRun {
  RunConfig config;
  KnowledgeGraph kg;
  TripleSplit split;
  std::vector<AnnotatedSequence> corpus;
  KgEmbeddings kg_embeddings;  // trelm runs only
  MemoryBank bank;             // trelm runs only
  TransformerModel model;
  double lambda = 0.0;  // mixing weight of the checkpoint's epoch

  ProbeContext probe_context() const;
};
/// `checkpoint` defaults to the run's checkpoint_last.bin.
LoadedRun load_run(const std::filesystem::path& run_dir, const std::filesystem::path& checkpoint = {});

/// Encoder inputs for attribution: each listed sentence with its tail span
/// masked and assessed, other entities injected as during training.
std::vector<AssessSequence> tail_assessment(const LoadedRun& run, std::span<const std::size_t> sentences);

/// CSV (sentence_id, entity_id, si_score, selected) of the listed sentences.
void write_si_table(std::ostream& out, const LoadedRun& run, std::span<const std::size_t> sentences);

/// Runs the probe for a finished run directory.
ProbeResult probe_run(const std::filesystem::path& run_dir, bool heldout = true,
                      const std::filesystem::path& checkpoint = {});

struct CompareReport {
  std::vector<std::string> runs;
  std::vector<std::string> columns;  // per-step CSV header
  std::vector<std::vector<std::string>> rows;
  nlohmann::json summary;
};

/// Aligns runs by step. Columns: step, then per run l_total and
/// coverage_fraction, deltas against the first run, P@1 per epoch and
/// wall-clock per step when the run recorded them.
CompareReport compare_runs(const std::vector<std::filesystem::path>& run_dirs);
void write_compare_report(const CompareReport& report, const std::filesystem::path& csv_path,
                          const std::filesystem::path& json_path);

/// Minimal CSV reader for the files written here (no quoting).
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::size_t column(const std::string& name) const;
};
CsvTable read_csv(const std::filesystem::path& path);

}  // namespace trelm
