#pragma once

// Noise-aware knowledge injection: semantic-importance scoring of entity
// spans, target selection, and the projected KG embedding h_e.

#include <set>
#include <span>
#include <vector>

#include "trelm/corpus.hpp"
#include "trelm/model.hpp"

namespace trelm {

/// Returned when h_o . h_rep is below 1e-8 (orthogonal or opposed representations).
inline constexpr double kSiMax = 1e8;

enum class SiScoring {
  reciprocal_cosine,  // |h_o| |h_rep| / (h_o . h_rep)
  one_minus_cosine,
};

double semantic_importance(std::span<const double> h_o, std::span<const double> h_rep,
                           SiScoring scoring = SiScoring::reciprocal_cosine);

/// Copy of `tokens` with the span overwritten by [MASK].
std::vector<TokenId> replace_span(std::span<const TokenId> tokens, const EntitySpan& span);

/// SI of `span` in the sentence, from the model's pooled representations of the
/// sentence and of its span-masked copy.
double semantic_importance(const TransformerModel& model, std::span<const TokenId> tokens,
                           const EntitySpan& span, SiScoring scoring = SiScoring::reciprocal_cosine);

struct InjectionTarget {
  EntityId entity{};
  EntitySpan span;
  double si_score = 0.0;
  bool is_long_tail = false;
  Tensor h_e;  // [d1]; empty when no KG embeddings were supplied
};

enum class InjectionPolicy {
  standard,             // top_k by SI, plus every long-tail entity
  long_tail_only,       // only long-tail entities
  high_frequency_only,  // top_k by SI among entities that are not long-tail
};

struct SelectionOptions {
  std::size_t top_k = 2;
  SiScoring scoring = SiScoring::reciprocal_cosine;
  InjectionPolicy policy = InjectionPolicy::standard;
};

/// Indices of the kept spans, in span order. Ranking is by score descending,
/// SI_MAX above every finite value, ties to the leftmost span.
std::vector<std::size_t> select_by_score(std::span<const double> scores,
                                         std::span<const char> long_tail,
                                         const SelectionOptions& options);

/// Scores every span and keeps the selected ones, in span order. With `kg`
/// and the model's projection each target carries h_e.
std::vector<InjectionTarget> select_targets(const TransformerModel& model,
                                            std::span<const TokenId> tokens,
                                            std::span<const EntitySpan> spans,
                                            const std::set<EntityId>& long_tail,
                                            const SelectionOptions& options,
                                            const KgEmbeddings* kg = nullptr);

/// h_e = entity_vector * W_proj, with W_proj stored as [d_k, d1].
Tensor knowledge_embedding(EntityId entity, const KgEmbeddings& kg, const Tensor& projection);

InjectionPolicy injection_policy_from_string(const std::string& s);
std::string to_string(InjectionPolicy p);
SiScoring si_scoring_from_string(const std::string& s);
std::string to_string(SiScoring s);

}  // namespace trelm
