#include <algorithm>
#include <cstdio>
#include <fstream>

#include "internal.hpp"
#include "trelm/errors.hpp"
#include "trelm/random.hpp"

namespace trelm {

namespace detail {

SelectionOptions selection_options(const RunConfig& config) {
  SelectionOptions s;
  s.top_k = config.top_k;
  s.scoring = si_scoring_from_string(config.si_scoring);
  s.policy = injection_policy_from_string(config.injection_policy);
  return s;
}

std::set<EntityId> long_tail_set(const RunConfig& config, const EntityCounts& counts) {
  return detect_long_tail(counts, config.long_tail_threshold);
}

std::vector<InjectedSpan> build_injections(const TransformerModel& model,
                                           std::span<const TokenId> input,
                                           std::span<const EntitySpan> eligible,
                                           const std::set<EntityId>& long_tail,
                                           const SelectionOptions& selection,
                                           const KgEmbeddings& kg_embeddings,
                                           const MemoryBank& bank, double lambda,
                                           std::size_t* n_with_memory) {
  std::vector<InjectedSpan> out;
  for (const auto& target : select_targets(model, input, eligible, long_tail, selection)) {
    const auto v = kg_embeddings.entity_vector(target.entity);
    MixTerms mix = mix_terms(bank.find(target.entity), lambda);
    if (n_with_memory && mix.used_memory) ++*n_with_memory;
    InjectedSpan span;
    for (std::size_t p = target.span.first; p <= target.span.last; ++p) span.positions.push_back(p);
    span.kg_vector = Tensor({v.size()}, {v.begin(), v.end()});
    span.knowledge_weight = mix.knowledge_weight;
    span.memory_term = std::move(mix.memory_term);
    out.push_back(std::move(span));
  }
  return out;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace detail

// Stream keys for derive_seed; each generated artifact gets its own stream.
namespace {
constexpr std::uint64_t kg_stream = 1, split_stream = 2, corpus_stream = 3, embed_stream = 4;
}

KnowledgeGraph dataset_kg(const RunConfig& config) {
  config.validate();
  KnowledgeGraph kg;
  if (!config.kg_path.empty()) {
    kg = read_kg(config.kg_path);
  } else {
    KgOptions o{config.vocab_size, config.tokens_per_entity, config.tokens_per_relation};
    kg = generate_kg(derive_seed(config.require_seed(), {kg_stream}), config.n_entities,
                     config.n_relations, config.n_triples, o);
  }
  if (kg.vocab_size != config.vocab_size) {
    throw ValidationError("knowledge graph vocabulary (" + std::to_string(kg.vocab_size) +
                          ") differs from vocab_size (" + std::to_string(config.vocab_size) + ")");
  }
  return kg;
}

TripleSplit dataset_split(const RunConfig& config, const KnowledgeGraph& kg) {
  TripleSplit split =
      config.split_path.empty()
          ? split_triples(kg, config.heldout_fraction, derive_seed(config.require_seed(), {split_stream}))
          : read_split(config.split_path);
  for (const auto* list : {&split.train, &split.heldout}) {
    for (std::size_t i : *list) {
      if (i >= kg.triples.size()) throw ValidationError("split refers to a missing triple");
    }
  }
  return split;
}

std::vector<AnnotatedSequence> dataset_corpus(const RunConfig& config, const KnowledgeGraph& kg,
                                              const TripleSplit& split) {
  std::vector<AnnotatedSequence> corpus;
  if (!config.corpus_path.empty()) {
    corpus = read_corpus(config.corpus_path);
  } else {
    CorpusOptions o;
    o.min_distractors = config.min_distractors;
    o.max_distractors = config.max_distractors;
    o.triples = split.train;
    corpus = generate_corpus(kg, derive_seed(config.require_seed(), {corpus_stream}),
                             config.n_sentences, config.zipf_s, o);
  }
  std::set<Triple> heldout;
  for (std::size_t i : split.heldout) heldout.insert(kg.triples[i]);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto& s = corpus[i];
    if (s.tokens.size() > config.max_seq_len) {
      throw ValidationError("corpus sentence " + std::to_string(i) + " exceeds max_seq_len");
    }
    for (TokenId t : s.tokens) {
      if (t >= config.vocab_size) throw ValidationError("corpus token outside the vocabulary");
    }
    if (s.fact && heldout.count(*s.fact)) {
      throw ValidationError("corpus sentence " + std::to_string(i) + " verbalizes a held-out triple");
    }
  }
  return corpus;
}

KgEmbeddings dataset_kg_embeddings(const RunConfig& config, const KnowledgeGraph& kg) {
  KgEmbeddings emb;
  if (!config.kg_embeddings_path.empty()) {
    emb = read_kg_embeddings(config.kg_embeddings_path);
  } else {
    KgEmbeddingOptions o{config.kg_dim, config.kg_epochs, config.kg_margin, config.kg_lr,
                         derive_seed(config.require_seed(), {embed_stream})};
    emb = train_kg_embeddings(kg, o);
  }
  if (emb.entity.cols() != config.kg_dim || emb.entity.rows() != kg.entities.size()) {
    throw ValidationError("KG embeddings do not match kg_dim / entity count");
  }
  return emb;
}

Dataset prepare_dataset(const RunConfig& config) {
  Dataset d;
  d.kg = dataset_kg(config);
  d.split = dataset_split(config, d.kg);
  d.corpus = dataset_corpus(config, d.kg, d.split);
  d.kg_embeddings = dataset_kg_embeddings(config, d.kg);
  d.counts = entity_frequency(d.corpus, &d.kg);
  return d;
}

// ---------------------------------------------------------------------------
// probing

double macro_average(const std::map<RelationId, double>& per_relation) {
  if (per_relation.empty()) return 0.0;
  double s = 0.0;
  for (const auto& [r, p] : per_relation) s += p;
  return s / static_cast<double>(per_relation.size());
}

nlohmann::json to_json(const ProbeResult& r) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [rel, p] : r.per_relation) {
    per[std::to_string(index(rel))] = {{"p_at_1", p}, {"queries", r.queries.at(rel)}};
  }
  nlohmann::json excluded = nlohmann::json::array();
  for (RelationId rel : r.excluded) excluded.push_back(index(rel));
  return {{"macro_p_at_1", r.macro_p_at_1},
          {"n_queries", r.n_queries},
          {"per_relation", per},
          {"excluded_relations", excluded}};
}

ProbeResult probe(const TransformerModel& model, const ProbeContext& ctx,
                  std::span<const Triple> triples) {
  if (ctx.kg == nullptr) throw ValidationError("probe needs a knowledge graph");
  const auto n = static_cast<std::ptrdiff_t>(triples.size());
  std::vector<char> hit(triples.size(), 0);
  std::vector<std::exception_ptr> errors(triples.size());
  const MemoryBank empty_bank(model.config().hidden_dim);
#pragma omp parallel for schedule(dynamic, 4)
  for (std::ptrdiff_t q = 0; q < n; ++q) {
    try {
      const Triple& t = triples[static_cast<std::size_t>(q)];
      std::vector<std::size_t> tail_positions;
      const AnnotatedSequence query = verbalize_query(*ctx.kg, t, &tail_positions);
      std::vector<InjectedSpan> injections;
      if (ctx.kg_embeddings) {
        injections = detail::build_injections(model, query.tokens, query.spans, ctx.long_tail,
                                              ctx.selection, *ctx.kg_embeddings,
                                              ctx.bank ? *ctx.bank : empty_bank, ctx.lambda);
      }
      const Tensor hidden = model.encode_tokens(query.tokens, injections);
      const auto& gold = ctx.kg->entities[index(t.tail)].surface;
      bool ok = true;
      for (std::size_t j = 0; j < tail_positions.size() && ok; ++j) {
        const Tensor logits = model.mlm_logits(hidden.row(tail_positions[j]));
        const auto best = std::max_element(logits.data().begin(), logits.data().end());
        ok = static_cast<TokenId>(best - logits.data().begin()) == gold[j];
      }
      hit[static_cast<std::size_t>(q)] = ok ? 1 : 0;
    } catch (...) {
      errors[static_cast<std::size_t>(q)] = std::current_exception();
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  std::map<RelationId, std::size_t> hits;
  ProbeResult r;
  for (std::size_t q = 0; q < triples.size(); ++q) {
    ++r.queries[triples[q].relation];
    hits[triples[q].relation] += hit[q];
  }
  for (const auto& [rel, count] : r.queries) {
    r.per_relation[rel] = static_cast<double>(hits[rel]) / static_cast<double>(count);
  }
  for (const auto& rel : ctx.kg->relations) {
    if (!r.queries.count(rel.id)) r.excluded.push_back(rel.id);
  }
  r.n_queries = triples.size();
  r.macro_p_at_1 = macro_average(r.per_relation);
  return r;
}

ProbeContext LoadedRun::probe_context() const {
  ProbeContext ctx;
  ctx.kg = &kg;
  if (config.run_mode() == RunMode::trelm) {
    ctx.kg_embeddings = &kg_embeddings;
    ctx.bank = &bank;
    ctx.lambda = lambda;
    ctx.long_tail = detail::long_tail_set(config, entity_frequency(corpus, &kg));
    ctx.selection = detail::selection_options(config);
  }
  return ctx;
}

LoadedRun load_run(const std::filesystem::path& run_dir, const std::filesystem::path& checkpoint) {
  const RunConfig cfg = read_run_config(run_dir / "config.json");
  const Checkpoint ckpt = read_checkpoint(checkpoint.empty() ? run_dir / "checkpoint_last.bin" : checkpoint);
  LoadedRun run{cfg,
                read_kg(run_dir / "kg.json"),
                read_split(run_dir / "split.json"),
                read_corpus(run_dir / "corpus.jsonl"),
                {},
                MemoryBank(cfg.hidden_dim),
                model_from_checkpoint(ckpt),
                ckpt.extra.value("lambda", 0.0)};
  if (cfg.run_mode() == RunMode::trelm) {
    run.kg_embeddings = read_kg_embeddings(run_dir / "kg_embeddings.bin");
    run.bank = read_memory_bank(run_dir / "bank.bin");
  }
  return run;
}

ProbeResult probe_run(const std::filesystem::path& run_dir, bool heldout,
                      const std::filesystem::path& checkpoint) {
  const LoadedRun run = load_run(run_dir, checkpoint);
  std::vector<Triple> triples;
  for (std::size_t i : heldout ? run.split.heldout : run.split.train) triples.push_back(run.kg.triples.at(i));
  return probe(run.model, run.probe_context(), triples);
}

std::vector<AssessSequence> tail_assessment(const LoadedRun& run, std::span<const std::size_t> sentences) {
  const ProbeContext ctx = run.probe_context();
  std::vector<AssessSequence> out;
  for (std::size_t s : sentences) {
    if (s >= run.corpus.size()) throw ValidationError("sentence " + std::to_string(s) + " does not exist");
    const AnnotatedSequence& seq = run.corpus[s];
    const auto fs = fact_spans(seq);
    if (!fs) throw ValidationError("sentence " + std::to_string(s) + " carries no fact");
    const EntitySpan& tail = seq.spans[fs->tail];
    const std::vector<TokenId> input = replace_span(seq.tokens, tail);
    std::vector<InjectedSpan> injections;
    if (ctx.kg_embeddings) {
      std::vector<EntitySpan> eligible;
      for (std::size_t j = 0; j < seq.spans.size(); ++j) {
        if (j != fs->tail) eligible.push_back(seq.spans[j]);
      }
      injections = detail::build_injections(run.model, input, eligible, ctx.long_tail, ctx.selection,
                                            run.kg_embeddings, run.bank, run.lambda);
    }
    Tape tape(GradMode::disabled);
    ParamBinding b(tape, run.model);
    AssessSequence a{tape.value(run.model.embed(b, input, injections)), {}};
    for (std::size_t p = tail.first; p <= tail.last; ++p) a.targets.push_back({p, seq.tokens[p]});
    out.push_back(std::move(a));
  }
  return out;
}

void write_si_table(std::ostream& out, const LoadedRun& run, std::span<const std::size_t> sentences) {
  const SelectionOptions selection = detail::selection_options(run.config);
  const auto long_tail = detail::long_tail_set(run.config, entity_frequency(run.corpus, &run.kg));
  out << "sentence_id,entity_id,si_score,selected\n";
  for (std::size_t s : sentences) {
    if (s >= run.corpus.size()) throw ValidationError("sentence " + std::to_string(s) + " does not exist");
    const AnnotatedSequence& seq = run.corpus[s];
    std::set<std::size_t> chosen;
    for (const auto& t : select_targets(run.model, seq.tokens, seq.spans, long_tail, selection)) {
      chosen.insert(t.span.first);
    }
    for (const auto& span : seq.spans) {
      const double si = semantic_importance(run.model, seq.tokens, span, selection.scoring);
      out << s << ',' << index(span.entity) << ',' << detail::format_double(si) << ','
          << (chosen.count(span.first) ? 1 : 0) << '\n';
    }
  }
}

}  // namespace trelm
