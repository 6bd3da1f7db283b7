#pragma once

// Toy knowledge graph, its verbalized long-tail corpus, and translational
// (margin-ranking) KG embeddings.

#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "trelm/model.hpp"
#include "trelm/tensor.hpp"

namespace trelm {

enum class EntityId : std::uint32_t {};
enum class RelationId : std::uint32_t {};

constexpr std::size_t index(EntityId e) { return static_cast<std::size_t>(e); }
constexpr std::size_t index(RelationId r) { return static_cast<std::size_t>(r); }

/// Reserved token ids shared by every generated vocabulary.
namespace special {
inline constexpr TokenId pad = 0;
inline constexpr TokenId cls = 1;
inline constexpr TokenId mask = 2;
inline constexpr TokenId sep = 3;
inline constexpr TokenId count = 4;
}  // namespace special

struct Triple {
  EntityId head{};
  RelationId relation{};
  EntityId tail{};
  auto operator<=>(const Triple&) const = default;
};

struct Entity {
  EntityId id{};
  std::string name;
  std::vector<TokenId> surface;
  bool operator==(const Entity&) const = default;
};

struct Relation {
  RelationId id{};
  std::string name;
  std::vector<TokenId> surface;
  bool operator==(const Relation&) const = default;
};

struct KnowledgeGraph {
  std::size_t vocab_size = 0;
  /// Tokens in [first_distractor, vocab_size) carry no entity or relation.
  TokenId first_distractor = special::count;
  std::vector<Entity> entities;
  std::vector<Relation> relations;
  std::vector<Triple> triples;

  void validate() const;
  bool operator==(const KnowledgeGraph&) const = default;
};

struct KgOptions {
  std::size_t vocab_size = 2000;
  std::size_t tokens_per_entity = 1;
  std::size_t tokens_per_relation = 2;
};

/// Deterministic in `seed`. Every entity appears in at least one triple, no
/// triple is a self-loop, and while n_triples <= |E|*|R| each (head,
/// relation) pair is used once so cloze queries have a unique answer.
KnowledgeGraph generate_kg(std::uint64_t seed, std::size_t n_entities, std::size_t n_relations,
                           std::size_t n_triples, const KgOptions& options = {});

struct EntitySpan {
  EntityId entity{};
  std::size_t first = 0;  // l
  std::size_t last = 0;   // r, inclusive
  bool operator==(const EntitySpan&) const = default;
};

struct AnnotatedSequence {
  std::vector<TokenId> tokens;  // tokens[0] is [CLS]
  std::vector<EntitySpan> spans;
  std::optional<Triple> fact;
  bool operator==(const AnnotatedSequence&) const = default;
};

/// Index of the head and tail spans of `seq.fact` within seq.spans.
struct FactSpans {
  std::size_t head = 0;
  std::size_t tail = 0;
};
std::optional<FactSpans> fact_spans(const AnnotatedSequence& seq);

struct TripleSplit {
  std::vector<std::size_t> train;    // indices into kg.triples
  std::vector<std::size_t> heldout;  // never verbalized into the corpus
};

/// Holds out round(fraction * |triples|) triples, chosen by `seed`.
TripleSplit split_triples(const KnowledgeGraph& kg, double heldout_fraction, std::uint64_t seed);

struct CorpusOptions {
  std::size_t min_distractors = 2;
  std::size_t max_distractors = 6;
  /// Triples eligible for verbalization; empty means all of them.
  std::vector<std::size_t> triples;
};

/// Each sentence is "[CLS] <head> <relation> <tail> <distractors...>" for one
/// triple drawn from a Zipf(zipf_s) law over a seeded random ranking of the
/// eligible triples. Sentence i depends only on (kg, seed, i).
std::vector<AnnotatedSequence> generate_corpus(const KnowledgeGraph& kg, std::uint64_t seed,
                                               std::size_t n_sentences, double zipf_s,
                                               const CorpusOptions& options = {});

/// Zipf probabilities over the eligible triples, in `options.triples` order.
std::vector<double> triple_sampling_weights(const KnowledgeGraph& kg, std::uint64_t seed,
                                            double zipf_s, const CorpusOptions& options);
AnnotatedSequence generate_sentence(const KnowledgeGraph& kg, std::span<const std::size_t> eligible,
                                    std::span<const double> cumulative, std::uint64_t seed,
                                    std::size_t sentence_index, const CorpusOptions& options);

/// Cloze verbalization used for probing: "[CLS] <head> <relation> [MASK]*".
/// Returns the sequence and the masked tail positions.
AnnotatedSequence verbalize_query(const KnowledgeGraph& kg, const Triple& triple,
                                  std::vector<std::size_t>* tail_positions);

using EntityCounts = std::map<EntityId, std::size_t>;

/// Number of entity-span occurrences per entity. With `kg`, entities that
/// never occur are listed with count zero.
EntityCounts entity_frequency(const std::vector<AnnotatedSequence>& corpus,
                              const KnowledgeGraph* kg = nullptr);
/// {e : count(e) <= threshold}; threshold must be >= 1.
std::set<EntityId> detect_long_tail(const EntityCounts& counts, std::size_t threshold);

struct KgEmbeddings {
  Tensor entity;    // [|E|, d_k]
  Tensor relation;  // [|R|, d_k]
  std::vector<double> epoch_loss;

  std::span<const double> entity_vector(EntityId e) const;
};

struct KgEmbeddingOptions {
  std::size_t dim = 32;
  std::size_t epochs = 500;
  double margin = 2.0;
  double lr = 0.01;
  std::uint64_t seed = 0;
};

/// TransE-style training of max(0, margin + |h+r-t| - |h'+r-t'|) with one
/// head-or-tail corruption per triple per epoch and unit-norm entities.
KgEmbeddings train_kg_embeddings(const KnowledgeGraph& kg, const KgEmbeddingOptions& options);

double translation_distance(const KgEmbeddings& emb, const Triple& t);
/// Contribution of one (positive, negative) pair to the margin loss.
double margin_loss(const KgEmbeddings& emb, const Triple& positive, const Triple& negative,
                   double margin);
/// Fraction of (true, corrupted) pairs with d(true) < d(corrupted), using
/// `corruptions` random corruptions per triple.
double ranking_accuracy(const KnowledgeGraph& kg, const KgEmbeddings& emb, std::uint64_t seed,
                        std::size_t corruptions);

// -- files --

nlohmann::json kg_to_json(const KnowledgeGraph& kg);
KnowledgeGraph kg_from_json(const nlohmann::json& j);
void write_kg(const std::filesystem::path& path, const KnowledgeGraph& kg);
KnowledgeGraph read_kg(const std::filesystem::path& path);

nlohmann::json sequence_to_json(const AnnotatedSequence& s);
AnnotatedSequence sequence_from_json(const nlohmann::json& j);
void write_corpus(const std::filesystem::path& path, const std::vector<AnnotatedSequence>& corpus);
std::vector<AnnotatedSequence> read_corpus(const std::filesystem::path& path);

void write_split(const std::filesystem::path& path, const TripleSplit& split);
TripleSplit read_split(const std::filesystem::path& path);

void write_kg_embeddings(const std::filesystem::path& path, const KgEmbeddings& emb);
KgEmbeddings read_kg_embeddings(const std::filesystem::path& path);

}  // namespace trelm
