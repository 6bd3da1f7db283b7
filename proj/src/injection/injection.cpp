#include "trelm/injection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "trelm/errors.hpp"

namespace trelm {

double semantic_importance(std::span<const double> h_o, std::span<const double> h_rep,
                           SiScoring scoring) {
  if (h_o.size() != h_rep.size()) throw ShapeError("semantic_importance: width mismatch");
  double dot = 0.0, no = 0.0, nr = 0.0;
  for (std::size_t i = 0; i < h_o.size(); ++i) {
    dot += h_o[i] * h_rep[i];
    no += h_o[i] * h_o[i];
    nr += h_rep[i] * h_rep[i];
  }
  no = std::sqrt(no);
  nr = std::sqrt(nr);
  if (scoring == SiScoring::one_minus_cosine) {
    if (no * nr < 1e-300) return kSiMax;
    return 1.0 - dot / (no * nr);
  }
  // A negative dot product is as dissimilar as it gets, so it shares the sentinel.
  if (dot < 1e-8) return kSiMax;
  return (no * nr) / dot;
}

std::vector<TokenId> replace_span(std::span<const TokenId> tokens, const EntitySpan& span) {
  if (span.first > span.last || span.last >= tokens.size()) {
    throw ValidationError("entity span [" + std::to_string(span.first) + ", " +
                          std::to_string(span.last) + "] outside a sequence of length " +
                          std::to_string(tokens.size()));
  }
  std::vector<TokenId> out(tokens.begin(), tokens.end());
  for (std::size_t i = span.first; i <= span.last; ++i) out[i] = special::mask;
  return out;
}

double semantic_importance(const TransformerModel& model, std::span<const TokenId> tokens,
                           const EntitySpan& span, SiScoring scoring) {
  const auto replaced = replace_span(tokens, span);
  const Tensor h_o = model.pooled_representation(model.encode_tokens(tokens));
  const Tensor h_rep = model.pooled_representation(model.encode_tokens(replaced));
  return semantic_importance(h_o.data(), h_rep.data(), scoring);
}

std::vector<std::size_t> select_by_score(std::span<const double> scores,
                                         std::span<const char> long_tail,
                                         const SelectionOptions& options) {
  if (scores.size() != long_tail.size()) throw ShapeError("select_by_score: size mismatch");
  std::vector<std::size_t> ranked;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool lt = long_tail[i] != 0;
    if (options.policy == InjectionPolicy::high_frequency_only && lt) continue;
    ranked.push_back(i);
  }
  std::stable_sort(ranked.begin(), ranked.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  std::vector<char> keep(scores.size(), 0);
  if (options.policy != InjectionPolicy::long_tail_only) {
    for (std::size_t i = 0; i < ranked.size() && i < options.top_k; ++i) keep[ranked[i]] = 1;
  }
  if (options.policy != InjectionPolicy::high_frequency_only) {
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (long_tail[i]) keep[i] = 1;
    }
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < keep.size(); ++i) {
    if (keep[i]) out.push_back(i);
  }
  return out;
}

std::vector<InjectionTarget> select_targets(const TransformerModel& model,
                                            std::span<const TokenId> tokens,
                                            std::span<const EntitySpan> spans,
                                            const std::set<EntityId>& long_tail,
                                            const SelectionOptions& options,
                                            const KgEmbeddings* kg) {
  if (spans.empty()) return {};
  const Tensor h_o = model.pooled_representation(model.encode_tokens(tokens));
  std::vector<double> scores;
  std::vector<char> lt;
  for (const auto& span : spans) {
    const auto replaced = replace_span(tokens, span);
    const Tensor h_rep = model.pooled_representation(model.encode_tokens(replaced));
    scores.push_back(semantic_importance(h_o.data(), h_rep.data(), options.scoring));
    lt.push_back(long_tail.count(span.entity) ? 1 : 0);
  }
  const Tensor* projection = kg ? &model.params()[model.heads().knowledge_projection] : nullptr;
  std::vector<InjectionTarget> out;
  for (std::size_t i : select_by_score(scores, lt, options)) {
    InjectionTarget t{spans[i].entity, spans[i], scores[i], lt[i] != 0, {}};
    if (projection) t.h_e = knowledge_embedding(spans[i].entity, *kg, *projection);
    out.push_back(std::move(t));
  }
  return out;
}

Tensor knowledge_embedding(EntityId entity, const KgEmbeddings& kg, const Tensor& projection) {
  const auto v = kg.entity_vector(entity);
  if (projection.rank() != 2 || projection.rows() != v.size()) {
    throw ShapeError("knowledge projection " + shape_string(projection.shape()) +
                     " does not accept a KG vector of width " + std::to_string(v.size()));
  }
  const std::size_t d1 = projection.cols();
  Tensor h({d1});
  for (std::size_t k = 0; k < v.size(); ++k) {
    if (v[k] == 0.0) continue;
    const auto row = projection.row(k);
    for (std::size_t j = 0; j < d1; ++j) h[j] += v[k] * row[j];
  }
  return h;
}

InjectionPolicy injection_policy_from_string(const std::string& s) {
  if (s == "standard") return InjectionPolicy::standard;
  if (s == "long_tail_only") return InjectionPolicy::long_tail_only;
  if (s == "high_frequency_only") return InjectionPolicy::high_frequency_only;
  throw ValidationError("unknown injection policy '" + s + "'");
}

std::string to_string(InjectionPolicy p) {
  switch (p) {
    case InjectionPolicy::standard: return "standard";
    case InjectionPolicy::long_tail_only: return "long_tail_only";
    case InjectionPolicy::high_frequency_only: return "high_frequency_only";
  }
  return "?";
}

SiScoring si_scoring_from_string(const std::string& s) {
  if (s == "reciprocal_cosine") return SiScoring::reciprocal_cosine;
  if (s == "one_minus_cosine") return SiScoring::one_minus_cosine;
  throw ValidationError("unknown SI scoring '" + s + "'");
}

std::string to_string(SiScoring s) {
  return s == SiScoring::reciprocal_cosine ? "reciprocal_cosine" : "one_minus_cosine";
}

}  // namespace trelm
