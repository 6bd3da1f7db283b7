#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "trelm/errors.hpp"
#include "trelm/injection.hpp"
#include "test_util.hpp"

using namespace trelm;
using trelm::test::random_tensor;

namespace {

TransformerConfig small_config() {
  TransformerConfig c;
  c.n_layers = 2;
  c.hidden_dim = 8;
  c.n_heads = 2;
  c.ffn_dim = 12;
  c.vocab_size = 40;
  c.max_seq_len = 16;
  c.kg_dim = 4;
  c.init_std = 0.5;
  c.seed = 11;
  return c;
}

std::vector<char> flags(std::initializer_list<int> v) { return std::vector<char>(v.begin(), v.end()); }

}  // namespace

TEST(SemanticImportance, IdenticalRepresentationsScoreOne) {
  const std::vector<double> h{0.3, -1.2, 2.0};
  EXPECT_NEAR(semantic_importance(h, h), 1.0, 1e-15);
}

TEST(SemanticImportance, FortyFiveDegrees) {
  const std::vector<double> h_o{1.0, 0.0};
  const std::vector<double> h_rep{1.0 / std::sqrt(2.0), 1.0 / std::sqrt(2.0)};
  EXPECT_NEAR(semantic_importance(h_o, h_rep), std::sqrt(2.0), 1e-12);
}

TEST(SemanticImportance, OrthogonalAndOpposedHitTheSentinel) {
  EXPECT_EQ(semantic_importance(std::vector<double>{1, 0}, std::vector<double>{0, 1}), kSiMax);
  EXPECT_EQ(semantic_importance(std::vector<double>{1, 0}, std::vector<double>{-1, 0.2}), kSiMax);
  EXPECT_EQ(semantic_importance(std::vector<double>{0, 0}, std::vector<double>{1, 1}), kSiMax);
}

TEST(SemanticImportance, ScaleInvariant) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Tensor a = random_tensor({6}, seed);
    Tensor b = random_tensor({6}, seed + 100);
    for (std::size_t i = 0; i < 6; ++i) b[i] += 2.0 * a[i];  // keep the dot product positive
    const double base = semantic_importance(a.data(), b.data());
    for (double c : {1e-3, 0.5, 7.0, 1e4}) {
      Tensor ca = a;
      for (double& v : ca.data()) v *= c;
      EXPECT_NEAR(semantic_importance(ca.data(), b.data()), base, 1e-12 * base);
    }
  }
}

TEST(SemanticImportance, OneMinusCosineAlternative) {
  EXPECT_NEAR(semantic_importance(std::vector<double>{1, 0}, std::vector<double>{1, 1},
                                  SiScoring::one_minus_cosine),
              1.0 - 1.0 / std::sqrt(2.0), 1e-12);
  EXPECT_NEAR(semantic_importance(std::vector<double>{1, 0}, std::vector<double>{-1, 0},
                                  SiScoring::one_minus_cosine),
              2.0, 1e-12);
}

TEST(SemanticImportance, SpanOutOfBoundsThrows) {
  const TransformerModel m(small_config());
  const std::vector<TokenId> tokens{1, 5, 6, 7};
  EXPECT_THROW(semantic_importance(m, tokens, EntitySpan{EntityId{0}, 2, 4}), ValidationError);
  EXPECT_THROW(semantic_importance(m, tokens, EntitySpan{EntityId{0}, 3, 2}), ValidationError);
}

TEST(Selection, TopKZeroWithoutLongTailIsEmpty) {
  SelectionOptions o;
  o.top_k = 0;
  const std::vector<double> s{2.0, 1.1, 5.0};
  EXPECT_TRUE(select_by_score(s, flags({0, 0, 0}), o).empty());
}

TEST(Selection, TopOneIsTheArgmax) {
  SelectionOptions o;
  o.top_k = 1;
  const std::vector<double> s{2.0, 1.1, 5.0};
  EXPECT_EQ(select_by_score(s, flags({0, 0, 0}), o), (std::vector<std::size_t>{2}));
}

TEST(Selection, SentinelOutranksFiniteAndTiesGoLeft) {
  SelectionOptions o;
  o.top_k = 2;
  const std::vector<double> s{3.0, kSiMax, 3.0, 3.0};
  EXPECT_EQ(select_by_score(s, flags({0, 0, 0, 0}), o), (std::vector<std::size_t>{0, 1}));
}

TEST(Selection, LongTailAlwaysKept) {
  SelectionOptions o;
  o.top_k = 1;
  const std::vector<double> s{2.0, 1.1, 5.0};
  const auto kept = select_by_score(s, flags({0, 1, 0}), o);
  EXPECT_EQ(kept, (std::vector<std::size_t>{1, 2}));
  EXPECT_LE(kept.size(), o.top_k + 1);
}

TEST(Selection, StudyPolicies) {
  const std::vector<double> s{2.0, 1.1, 5.0, 4.0};
  const auto lt = flags({1, 0, 1, 0});
  SelectionOptions o;
  o.top_k = 1;
  o.policy = InjectionPolicy::long_tail_only;
  EXPECT_EQ(select_by_score(s, lt, o), (std::vector<std::size_t>{0, 2}));
  o.policy = InjectionPolicy::high_frequency_only;
  EXPECT_EQ(select_by_score(s, lt, o), (std::vector<std::size_t>{3}));
}

TEST(Selection, RankingMatchesPerSpanRecomputation) {
  const TransformerModel m(small_config());
  const std::vector<TokenId> tokens{1, 5, 6, 20, 7, 8, 30, 9, 10, 33};
  const std::vector<EntitySpan> spans{
      {EntityId{0}, 1, 1}, {EntityId{1}, 2, 3}, {EntityId{2}, 4, 4}, {EntityId{3}, 5, 6}, {EntityId{4}, 8, 9}};

  // Independent recomputation: mean of encoder rows, then the reciprocal cosine.
  auto mean_rows = [](const Tensor& h) {
    std::vector<double> out(h.cols(), 0.0);
    for (std::size_t i = 0; i < h.rows(); ++i)
      for (std::size_t j = 0; j < h.cols(); ++j) out[j] += h.at(i, j) / static_cast<double>(h.rows());
    return out;
  };
  const auto h_o = mean_rows(m.encode_tokens(tokens));
  std::vector<std::pair<double, std::size_t>> oracle;
  for (std::size_t s = 0; s < spans.size(); ++s) {
    auto replaced = tokens;
    for (std::size_t p = spans[s].first; p <= spans[s].last; ++p) replaced[p] = special::mask;
    const auto h_rep = mean_rows(m.encode_tokens(replaced));
    double dot = 0, a = 0, b = 0;
    for (std::size_t j = 0; j < h_o.size(); ++j) {
      dot += h_o[j] * h_rep[j];
      a += h_o[j] * h_o[j];
      b += h_rep[j] * h_rep[j];
    }
    const double si = dot < 1e-8 ? kSiMax : std::sqrt(a) * std::sqrt(b) / dot;
    EXPECT_NEAR(semantic_importance(m, tokens, spans[s]), si, 1e-9 * si);
    oracle.push_back({-si, s});
  }
  std::sort(oracle.begin(), oracle.end());

  for (std::size_t k = 0; k <= spans.size(); ++k) {
    SelectionOptions o;
    o.top_k = k;
    std::vector<std::size_t> expected;
    for (std::size_t i = 0; i < k; ++i) expected.push_back(oracle[i].second);
    std::sort(expected.begin(), expected.end());
    const auto targets = select_targets(m, tokens, spans, {}, o);
    std::vector<std::size_t> got;
    for (const auto& t : targets) got.push_back(index(t.entity));
    EXPECT_EQ(got, expected) << "top_k " << k;
  }
}

TEST(Selection, DeterministicAndCarriesKnowledgeEmbedding) {
  const TransformerModel m(small_config());
  KgEmbeddings kg;
  kg.entity = random_tensor({5, 4}, 3);
  kg.relation = random_tensor({1, 4}, 4);
  const std::vector<TokenId> tokens{1, 5, 6, 7, 8};
  const std::vector<EntitySpan> spans{{EntityId{0}, 1, 1}, {EntityId{3}, 3, 4}};
  SelectionOptions o;
  o.top_k = 1;
  const std::set<EntityId> lt{EntityId{3}};
  const auto a = select_targets(m, tokens, spans, lt, o, &kg);
  const auto b = select_targets(m, tokens, spans, lt, o, &kg);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].entity, b[i].entity);
    EXPECT_EQ(a[i].si_score, b[i].si_score);
    EXPECT_EQ(a[i].h_e, b[i].h_e);
    EXPECT_EQ(a[i].h_e.size(), 8u);
  }
  EXPECT_TRUE(std::any_of(a.begin(), a.end(), [](const InjectionTarget& t) { return t.is_long_tail; }));
}

TEST(Selection, NoSpansNoTargets) {
  const TransformerModel m(small_config());
  const std::vector<TokenId> tokens{1, 5, 6};
  EXPECT_TRUE(select_targets(m, tokens, {}, {}, SelectionOptions{}).empty());
}

TEST(KnowledgeEmbedding, ZeroVectorGivesZero) {
  KgEmbeddings kg;
  kg.entity = Tensor({2, 3});
  const Tensor proj = random_tensor({3, 5}, 9);
  const Tensor h = knowledge_embedding(EntityId{1}, kg, proj);
  ASSERT_EQ(h.size(), 5u);
  for (double v : h.data()) EXPECT_EQ(v, 0.0);
}

TEST(KnowledgeEmbedding, IdentityProjectionCopies) {
  KgEmbeddings kg;
  kg.entity = random_tensor({3, 4}, 2);
  Tensor eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye.at(i, i) = 1.0;
  const Tensor h = knowledge_embedding(EntityId{2}, kg, eye);
  for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(h[j], kg.entity.at(2, j));
}

TEST(KnowledgeEmbedding, WidthIsHiddenDimForEveryEntity) {
  KgEmbeddings kg;
  kg.entity = random_tensor({100, 32}, 2);
  const Tensor proj = random_tensor({32, 64}, 5);
  for (std::uint32_t e = 0; e < 100; ++e) EXPECT_EQ(knowledge_embedding(EntityId{e}, kg, proj).size(), 64u);
}

TEST(KnowledgeEmbedding, Errors) {
  KgEmbeddings kg;
  kg.entity = random_tensor({3, 4}, 2);
  EXPECT_THROW(knowledge_embedding(EntityId{3}, kg, random_tensor({4, 8}, 1)), ValidationError);
  EXPECT_THROW(knowledge_embedding(EntityId{0}, kg, random_tensor({5, 8}, 1)), ShapeError);
}
