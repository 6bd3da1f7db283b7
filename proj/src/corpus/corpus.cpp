#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "trelm/container.hpp"
#include "trelm/corpus.hpp"
#include "trelm/errors.hpp"
#include "trelm/random.hpp"

namespace trelm {

namespace {

// Stream keys so that the ranking and the per-sentence draws never share a seed.
constexpr std::uint64_t ranking_stream = 0x72616e6b;  // "rank"
constexpr std::uint64_t sentence_stream = 0x73656e74;  // "sent"

std::vector<std::size_t> eligible_triples(const KnowledgeGraph& kg, const CorpusOptions& options) {
  if (options.triples.empty()) {
    std::vector<std::size_t> all(kg.triples.size());
    std::iota(all.begin(), all.end(), 0);
    return all;
  }
  for (std::size_t t : options.triples) {
    if (t >= kg.triples.size()) throw ValidationError("eligible triple index out of range");
  }
  return options.triples;
}

void append_span(AnnotatedSequence& seq, const Entity& e) {
  const std::size_t first = seq.tokens.size();
  seq.tokens.insert(seq.tokens.end(), e.surface.begin(), e.surface.end());
  seq.spans.push_back({e.id, first, seq.tokens.size() - 1});
}

}  // namespace

std::optional<FactSpans> fact_spans(const AnnotatedSequence& seq) {
  if (!seq.fact) return std::nullopt;
  std::optional<std::size_t> head, tail;
  for (std::size_t i = 0; i < seq.spans.size(); ++i) {
    if (!head && seq.spans[i].entity == seq.fact->head) {
      head = i;
    } else if (!tail && seq.spans[i].entity == seq.fact->tail) {
      tail = i;
    }
  }
  if (!head || !tail) return std::nullopt;
  return FactSpans{*head, *tail};
}

TripleSplit split_triples(const KnowledgeGraph& kg, double heldout_fraction, std::uint64_t seed) {
  if (!(heldout_fraction >= 0.0 && heldout_fraction < 1.0)) {
    throw ValidationError("held-out fraction must be in [0, 1)");
  }
  std::vector<std::size_t> order(kg.triples.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_held = static_cast<std::size_t>(std::llround(heldout_fraction * static_cast<double>(order.size())));
  TripleSplit split;
  split.heldout.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_held));
  split.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_held), order.end());
  std::sort(split.heldout.begin(), split.heldout.end());
  std::sort(split.train.begin(), split.train.end());
  if (split.train.empty()) throw ValidationError("split leaves no training triples");
  return split;
}

std::vector<double> triple_sampling_weights(const KnowledgeGraph& kg, std::uint64_t seed,
                                            double zipf_s, const CorpusOptions& options) {
  if (!(zipf_s > 0.0) || !std::isfinite(zipf_s)) throw ValidationError("zipf_s must be > 0");
  const auto eligible = eligible_triples(kg, options);
  if (eligible.empty()) throw ValidationError("no triples to verbalize");
  std::vector<std::size_t> rank(eligible.size());
  std::iota(rank.begin(), rank.end(), 0);
  std::mt19937_64 rng(derive_seed(seed, {ranking_stream}));
  std::shuffle(rank.begin(), rank.end(), rng);
  std::vector<double> w(eligible.size());
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::pow(static_cast<double>(rank[i] + 1), -zipf_s);
    total += w[i];
  }
  for (double& v : w) v /= total;
  return w;
}

AnnotatedSequence generate_sentence(const KnowledgeGraph& kg, std::span<const std::size_t> eligible,
                                    std::span<const double> cumulative, std::uint64_t seed,
                                    std::size_t sentence_index, const CorpusOptions& options) {
  std::mt19937_64 rng(derive_seed(seed, {sentence_stream, sentence_index}));
  const double u = std::uniform_real_distribution<double>(0.0, cumulative.back())(rng);
  auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
  const std::size_t pick = std::min<std::size_t>(static_cast<std::size_t>(it - cumulative.begin()),
                                                 cumulative.size() - 1);
  const Triple& t = kg.triples[eligible[pick]];

  AnnotatedSequence seq;
  seq.fact = t;
  seq.tokens.push_back(special::cls);
  append_span(seq, kg.entities[index(t.head)]);
  const auto& rel = kg.relations[index(t.relation)].surface;
  seq.tokens.insert(seq.tokens.end(), rel.begin(), rel.end());
  append_span(seq, kg.entities[index(t.tail)]);

  std::uniform_int_distribution<std::size_t> n_dist(options.min_distractors, options.max_distractors);
  std::uniform_int_distribution<TokenId> tok(kg.first_distractor, static_cast<TokenId>(kg.vocab_size - 1));
  const std::size_t n = n_dist(rng);
  for (std::size_t i = 0; i < n; ++i) seq.tokens.push_back(tok(rng));
  return seq;
}

std::vector<AnnotatedSequence> generate_corpus(const KnowledgeGraph& kg, std::uint64_t seed,
                                               std::size_t n_sentences, double zipf_s,
                                               const CorpusOptions& options) {
  if (n_sentences < 1) throw ValidationError("n_sentences must be >= 1");
  if (options.min_distractors > options.max_distractors) {
    throw ValidationError("min_distractors > max_distractors");
  }
  if (options.max_distractors > 0 && kg.first_distractor >= kg.vocab_size) {
    throw ValidationError("vocabulary has no distractor tokens");
  }
  const auto eligible = eligible_triples(kg, options);
  const auto weights = triple_sampling_weights(kg, seed, zipf_s, options);
  std::vector<double> cumulative(weights.size());
  std::partial_sum(weights.begin(), weights.end(), cumulative.begin());

  std::vector<AnnotatedSequence> corpus(n_sentences);
  const auto n = static_cast<std::ptrdiff_t>(n_sentences);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    corpus[static_cast<std::size_t>(i)] =
        generate_sentence(kg, eligible, cumulative, seed, static_cast<std::size_t>(i), options);
  }
  return corpus;
}

AnnotatedSequence verbalize_query(const KnowledgeGraph& kg, const Triple& triple,
                                  std::vector<std::size_t>* tail_positions) {
  if (index(triple.head) >= kg.entities.size() || index(triple.tail) >= kg.entities.size() ||
      index(triple.relation) >= kg.relations.size()) {
    throw ValidationError("query triple not in the knowledge graph");
  }
  AnnotatedSequence seq;
  seq.fact = triple;
  seq.tokens.push_back(special::cls);
  append_span(seq, kg.entities[index(triple.head)]);
  const auto& rel = kg.relations[index(triple.relation)].surface;
  seq.tokens.insert(seq.tokens.end(), rel.begin(), rel.end());
  if (tail_positions) tail_positions->clear();
  for (std::size_t j = 0; j < kg.entities[index(triple.tail)].surface.size(); ++j) {
    if (tail_positions) tail_positions->push_back(seq.tokens.size());
    seq.tokens.push_back(special::mask);
  }
  return seq;
}

EntityCounts entity_frequency(const std::vector<AnnotatedSequence>& corpus, const KnowledgeGraph* kg) {
  EntityCounts counts;
  if (kg) {
    for (const auto& e : kg->entities) counts[e.id] = 0;
  }
  for (const auto& s : corpus) {
    for (const auto& span : s.spans) ++counts[span.entity];
  }
  return counts;
}

std::set<EntityId> detect_long_tail(const EntityCounts& counts, std::size_t threshold) {
  if (threshold < 1) throw ValidationError("long-tail threshold must be >= 1");
  std::set<EntityId> out;
  for (const auto& [e, c] : counts) {
    if (c <= threshold) out.insert(e);
  }
  return out;
}

// ---------------------------------------------------------------------------
// files

nlohmann::json kg_to_json(const KnowledgeGraph& kg) {
  nlohmann::json j;
  j["vocab_size"] = kg.vocab_size;
  j["first_distractor"] = kg.first_distractor;
  j["entities"] = nlohmann::json::array();
  for (const auto& e : kg.entities) {
    j["entities"].push_back({{"id", index(e.id)}, {"name", e.name}, {"surface", e.surface}});
  }
  j["relations"] = nlohmann::json::array();
  for (const auto& r : kg.relations) {
    j["relations"].push_back({{"id", index(r.id)}, {"name", r.name}, {"surface", r.surface}});
  }
  j["triples"] = nlohmann::json::array();
  for (const auto& t : kg.triples) j["triples"].push_back({index(t.head), index(t.relation), index(t.tail)});
  return j;
}

KnowledgeGraph kg_from_json(const nlohmann::json& j) {
  try {
    KnowledgeGraph kg;
    kg.vocab_size = j.at("vocab_size").get<std::size_t>();
    kg.first_distractor = j.at("first_distractor").get<TokenId>();
    for (const auto& e : j.at("entities")) {
      kg.entities.push_back({static_cast<EntityId>(e.at("id").get<std::uint32_t>()), e.at("name").get<std::string>(),
                             e.at("surface").get<std::vector<TokenId>>()});
    }
    for (const auto& r : j.at("relations")) {
      kg.relations.push_back({static_cast<RelationId>(r.at("id").get<std::uint32_t>()),
                              r.at("name").get<std::string>(), r.at("surface").get<std::vector<TokenId>>()});
    }
    for (const auto& t : j.at("triples")) {
      if (t.size() != 3) throw FormatError("triple must have 3 elements");
      kg.triples.push_back({static_cast<EntityId>(t[0].get<std::uint32_t>()),
                            static_cast<RelationId>(t[1].get<std::uint32_t>()),
                            static_cast<EntityId>(t[2].get<std::uint32_t>())});
    }
    kg.validate();
    return kg;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed knowledge graph: ") + e.what());
  }
}

namespace {

nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace

void write_kg(const std::filesystem::path& path, const KnowledgeGraph& kg) {
  write_text(path, kg_to_json(kg).dump(1) + "\n");
}

KnowledgeGraph read_kg(const std::filesystem::path& path) { return kg_from_json(read_json_file(path)); }

nlohmann::json sequence_to_json(const AnnotatedSequence& s) {
  nlohmann::json j;
  j["tokens"] = s.tokens;
  j["spans"] = nlohmann::json::array();
  for (const auto& sp : s.spans) j["spans"].push_back({index(sp.entity), sp.first, sp.last});
  if (s.fact) {
    j["fact"] = {index(s.fact->head), index(s.fact->relation), index(s.fact->tail)};
  } else {
    j["fact"] = nullptr;
  }
  return j;
}

AnnotatedSequence sequence_from_json(const nlohmann::json& j) {
  try {
    AnnotatedSequence s;
    s.tokens = j.at("tokens").get<std::vector<TokenId>>();
    for (const auto& sp : j.at("spans")) {
      if (sp.size() != 3) throw FormatError("span must have 3 elements");
      EntitySpan span{static_cast<EntityId>(sp[0].get<std::uint32_t>()), sp[1].get<std::size_t>(),
                      sp[2].get<std::size_t>()};
      if (span.first > span.last || span.last >= s.tokens.size()) throw FormatError("span out of bounds");
      s.spans.push_back(span);
    }
    if (j.contains("fact") && !j["fact"].is_null()) {
      const auto& f = j["fact"];
      if (f.size() != 3) throw FormatError("fact must have 3 elements");
      s.fact = Triple{static_cast<EntityId>(f[0].get<std::uint32_t>()),
                      static_cast<RelationId>(f[1].get<std::uint32_t>()),
                      static_cast<EntityId>(f[2].get<std::uint32_t>())};
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed sequence: ") + e.what());
  }
}

void write_corpus(const std::filesystem::path& path, const std::vector<AnnotatedSequence>& corpus) {
  std::string text;
  for (const auto& s : corpus) {
    text += sequence_to_json(s).dump();
    text += '\n';
  }
  write_text(path, text);
}

std::vector<AnnotatedSequence> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<AnnotatedSequence> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(sequence_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_split(const std::filesystem::path& path, const TripleSplit& split) {
  nlohmann::json j{{"train", split.train}, {"heldout", split.heldout}};
  write_text(path, j.dump() + "\n");
}

TripleSplit read_split(const std::filesystem::path& path) {
  const auto j = read_json_file(path);
  try {
    return {j.at("train").get<std::vector<std::size_t>>(), j.at("heldout").get<std::vector<std::size_t>>()};
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_kg_embeddings(const std::filesystem::path& path, const KgEmbeddings& emb) {
  Container c;
  c.kind = "trelm.kg_embeddings";
  c.meta["epoch_loss"] = emb.epoch_loss;
  c.tensors.push_back({"entity", emb.entity});
  c.tensors.push_back({"relation", emb.relation});
  write_container(path, c);
}

KgEmbeddings read_kg_embeddings(const std::filesystem::path& path) {
  const Container c = read_container(path);
  if (c.kind != "trelm.kg_embeddings") throw FormatError(path.string() + " is not a KG embedding file");
  KgEmbeddings emb;
  emb.entity = c.tensor("entity");
  emb.relation = c.tensor("relation");
  if (emb.entity.rank() != 2 || emb.relation.rank() != 2 || emb.entity.cols() != emb.relation.cols()) {
    throw FormatError("KG embedding tensors have inconsistent shapes");
  }
  if (c.meta.contains("epoch_loss")) emb.epoch_loss = c.meta["epoch_loss"].get<std::vector<double>>();
  return emb;
}

}  // namespace trelm
