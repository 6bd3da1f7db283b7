#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "trelm/errors.hpp"
#include "trelm/finite_diff.hpp"
#include "trelm/objectives.hpp"
#include "test_util.hpp"

using namespace trelm;
using trelm::test::random_tensor;

namespace {

AnnotatedSequence fact_sentence() {
  AnnotatedSequence s;
  s.tokens = {special::cls, 10, 30, 31, 11, 50, 51, 52};
  s.spans = {{EntityId{0}, 1, 1}, {EntityId{1}, 4, 4}};
  s.fact = Triple{EntityId{0}, RelationId{0}, EntityId{1}};
  return s;
}

double scalar(const Tape& tape, Var v) { return tape.value(v).item(); }

}  // namespace

TEST(Masking, SelectedCountIsBinomial) {
  // 1000 ordinary positions per sequence; over 200 seeds the mean count
  // must sit within 4 standard errors of 150.
  AnnotatedSequence s;
  s.tokens.push_back(special::cls);
  for (int i = 0; i < 1000; ++i) s.tokens.push_back(static_cast<TokenId>(10 + i % 50));
  MaskOptions o;
  o.assess = false;
  const double sd = std::sqrt(1000 * 0.15 * 0.85);
  double total = 0.0;
  for (std::uint64_t seed = 1; seed <= 200; ++seed) {
    const auto m = mask_sequence(s, 100, o, seed);
    EXPECT_EQ(m.label_positions.size(), m.label_tokens.size());
    EXPECT_NEAR(static_cast<double>(m.label_positions.size()), 150.0, 6 * sd);
    total += static_cast<double>(m.label_positions.size());
  }
  EXPECT_NEAR(total / 200.0, 150.0, 4 * sd / std::sqrt(200.0));
}

TEST(Masking, LabelsAreTheOriginalTokensAndSubstitutionsFollowPolicy) {
  AnnotatedSequence s;
  s.tokens.push_back(special::cls);
  for (int i = 0; i < 2000; ++i) s.tokens.push_back(static_cast<TokenId>(10 + i % 80));
  MaskOptions o;
  o.assess = false;
  o.mask_rate = 0.5;
  const auto m = mask_sequence(s, 100, o, 3);
  std::size_t masked = 0, kept = 0, swapped = 0;
  std::set<std::size_t> labelled(m.label_positions.begin(), m.label_positions.end());
  for (std::size_t i = 0; i < s.tokens.size(); ++i) {
    if (!labelled.count(i)) {
      EXPECT_EQ(m.input[i], s.tokens[i]);
      continue;
    }
    if (m.input[i] == special::mask) {
      ++masked;
    } else if (m.input[i] == s.tokens[i]) {
      ++kept;
    } else {
      ++swapped;
    }
  }
  for (std::size_t k = 0; k < m.label_positions.size(); ++k) {
    EXPECT_EQ(m.label_tokens[k], s.tokens[m.label_positions[k]]);
  }
  const double n = static_cast<double>(labelled.size());
  EXPECT_NEAR(masked / n, 0.8, 0.04);
  EXPECT_NEAR((kept + swapped) / n, 0.2, 0.04);
  EXPECT_EQ(m.input[0], special::cls);
  EXPECT_FALSE(labelled.count(0));
}

TEST(Masking, FloorOfOnePosition) {
  AnnotatedSequence s;
  s.tokens = {special::cls, 10, 11};
  MaskOptions o;
  o.assess = false;
  o.mask_rate = 1e-9;
  for (std::uint64_t seed = 1; seed <= 30; ++seed) {
    EXPECT_EQ(mask_sequence(s, 50, o, seed).label_positions.size(), 1u);
  }
}

TEST(Masking, Deterministic) {
  const auto s = fact_sentence();
  EXPECT_EQ(mask_sequence(s, 100, {}, 9), mask_sequence(s, 100, {}, 9));
  const std::vector<AnnotatedSequence> batch(4, s);
  EXPECT_EQ(mask_batch(batch, 100, {}, 9), mask_batch(batch, 100, {}, 9));
}

TEST(Masking, AssessedSpanKeepsItsGoldLabel) {
  const auto s = fact_sentence();
  for (auto side : {CkaDirection::tail, CkaDirection::head}) {
    MaskOptions o;
    o.side = side;
    for (std::uint64_t seed = 1; seed <= 50; ++seed) {
      const auto m = mask_sequence(s, 100, o, seed);
      const std::size_t pos = side == CkaDirection::tail ? 4 : 1;
      ASSERT_EQ(m.cka_positions, std::vector<std::size_t>{pos});
      EXPECT_EQ(m.cka_gold, std::vector<TokenId>{s.tokens[pos]});
      EXPECT_EQ(m.input[pos], special::mask);
      const auto it = std::find(m.label_positions.begin(), m.label_positions.end(), pos);
      ASSERT_NE(it, m.label_positions.end());
      EXPECT_EQ(m.label_tokens[static_cast<std::size_t>(it - m.label_positions.begin())], s.tokens[pos]);
    }
  }
}

TEST(Masking, Errors) {
  AnnotatedSequence specials;
  specials.tokens = {special::cls, special::sep};
  EXPECT_THROW(mask_sequence(specials, 100, {}, 1), ValidationError);
  MaskOptions bad;
  bad.mask_rate = 0.0;
  EXPECT_THROW(mask_sequence(fact_sentence(), 100, bad, 1), ValidationError);
  bad.mask_rate = 1.0;
  EXPECT_THROW(mask_sequence(fact_sentence(), 100, bad, 1), ValidationError);
}

TEST(CkaSide, BothAlternates) {
  EXPECT_EQ(cka_side(CkaDirection::both, 0), CkaDirection::tail);
  EXPECT_EQ(cka_side(CkaDirection::both, 1), CkaDirection::head);
  EXPECT_EQ(cka_side(CkaDirection::tail, 1), CkaDirection::tail);
  EXPECT_EQ(cka_side(CkaDirection::head, 0), CkaDirection::head);
}

TEST(NegativeSampler, NeverTheGoldAndAlwaysCount) {
  const NegativeSampler sampler(12, 10);
  std::mt19937_64 rng(4);
  std::set<TokenId> seen;
  for (TokenId gold = special::count; gold < 12; ++gold) {
    for (int rep = 0; rep < 200; ++rep) {
      const auto neg = sampler.sample(gold, rng);
      ASSERT_EQ(neg.size(), 10u);
      for (TokenId t : neg) {
        EXPECT_NE(t, gold);
        EXPECT_GE(t, special::count);
        EXPECT_LT(t, 12u);
        seen.insert(t);
      }
    }
  }
  EXPECT_EQ(seen.size(), 12u - special::count);
  EXPECT_THROW(NegativeSampler(5, 3), ValidationError);
  EXPECT_THROW(NegativeSampler(100, 0), ValidationError);
}

TEST(MlmLoss, UniformLogitsGiveLnV) {
  Tape tape(GradMode::disabled);
  Var logits = tape.constant(Tensor({3, 4}));
  const std::vector<TokenId> labels{0, 3, 2};
  EXPECT_NEAR(scalar(tape, mlm_loss(logits, labels)), std::log(4.0), 1e-12);
}

TEST(MlmLoss, LargeCorrectMarginGoesToZero) {
  Tape tape(GradMode::disabled);
  Var logits = tape.constant(Tensor({1, 4}, {0, 0, 60, 0}));
  const std::vector<TokenId> labels{2};
  EXPECT_LT(scalar(tape, mlm_loss(logits, labels)), 1e-20);
}

TEST(MlmLoss, TwoPositionsByHand) {
  Tape tape(GradMode::disabled);
  Var logits = tape.constant(Tensor({2, 3}, {1, 2, 3, 0.5, -1, 0}));
  const std::vector<TokenId> labels{2, 0};
  const double a = -(3 - std::log(std::exp(1) + std::exp(2) + std::exp(3)));
  const double b = -(0.5 - std::log(std::exp(0.5) + std::exp(-1) + std::exp(0)));
  EXPECT_NEAR(scalar(tape, mlm_loss(logits, labels)), (a + b) / 2, 1e-12);
  EXPECT_THROW(mlm_loss(logits, std::vector<TokenId>{}), ValidationError);
}

TEST(CkaLoss, EqualScoresGiveLnOnePlusQ) {
  for (std::size_t q : {1, 3, 10}) {
    EXPECT_NEAR(cka_loss_value(Tensor({2, q + 1})), std::log(1.0 + static_cast<double>(q)), 1e-12);
    Tensor shifted({1, q + 1});
    for (double& v : shifted.data()) v = 3.7;
    EXPECT_NEAR(cka_loss_value(shifted), std::log(1.0 + static_cast<double>(q)), 1e-12);
  }
}

TEST(CkaLoss, HandValue) {
  EXPECT_NEAR(cka_loss_value(Tensor({1, 3}, {2, 0, 1})),
              -std::log(std::exp(2.0) / (std::exp(2.0) + 1 + std::exp(1.0))), 1e-12);
  EXPECT_NEAR(cka_loss_value(Tensor({1, 3}, {2, 0, 1})), 0.4076, 1e-4);
  Tape tape(GradMode::disabled);
  EXPECT_NEAR(scalar(tape, cka_loss(tape.constant(Tensor({1, 3}, {2, 0, 1})))), 0.40760596444, 1e-10);
}

TEST(CkaLoss, PositiveAndDecreasingInGoldScore) {
  double prev = 1e300;
  for (double s = -5; s <= 25; s += 0.5) {
    const double l = cka_loss_value(Tensor({1, 4}, {s, 0.3, -1, 2}));
    EXPECT_GT(l, 0.0);
    EXPECT_LT(l, prev);
    prev = l;
  }
  EXPECT_LT(prev, 1e-9);
}

TEST(CkaLoss, ShiftInvariant) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const Tensor s = random_tensor({3, 11}, seed);
    Tensor t = s;
    for (double& v : t.data()) v += 12.5;
    EXPECT_NEAR(cka_loss_value(t), cka_loss_value(s), 1e-12);
  }
}

TEST(CkaLoss, MatchesTapeAndModelScores) {
  TransformerConfig c;
  c.n_layers = 1;
  c.hidden_dim = 6;
  c.n_heads = 2;
  c.ffn_dim = 8;
  c.vocab_size = 20;
  c.max_seq_len = 8;
  c.kg_dim = 3;
  c.init_std = 0.5;
  TransformerModel m(c);
  const Tensor h = random_tensor({2, 6}, 4);
  const std::vector<TokenId> gold{5, 9};
  const std::vector<std::vector<TokenId>> neg{{6, 7, 8}, {4, 10, 19}};
  Tape tape(GradMode::disabled);
  ParamBinding b(tape, m);
  const double got = scalar(tape, cka_loss(m, b, tape.constant(h), gold, neg));
  Tensor scores({2, 4});
  for (std::size_t r = 0; r < 2; ++r) {
    scores.at(r, 0) = m.match_score(h.row(r), gold[r]);
    for (std::size_t j = 0; j < 3; ++j) scores.at(r, j + 1) = m.match_score(h.row(r), neg[r][j]);
  }
  EXPECT_NEAR(got, cka_loss_value(scores), 1e-12);
  EXPECT_THROW(cka_loss(m, b, tape.constant(h), std::vector<TokenId>{}, {}), ValidationError);
}

TEST(TotalLoss, AffineCombination) {
  EXPECT_EQ(total_loss_value(2, 4, 0.5), 3.0);
  EXPECT_EQ(total_loss_value(2, 4, 1.0), 2.0);
  EXPECT_EQ(total_loss_value(2, 4, 0.0), 4.0);
  EXPECT_THROW(total_loss_value(2, 4, 1.5), ValidationError);
  Tape tape(GradMode::disabled);
  Var l = total_loss(tape.constant(Tensor({1}, {2.0})), tape.constant(Tensor({1}, {4.0})), 0.25);
  EXPECT_EQ(scalar(tape, l), 3.5);
}

TEST(TotalLoss, GradientMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Tensor logits = random_tensor({3, 7}, seed);
    Tensor scores = random_tensor({2, 5}, seed + 50);
    const std::vector<TokenId> labels{1, 6, 0};
    auto run = [&](GradientStore* g) {
      Tape tape(g ? GradMode::enabled : GradMode::disabled, g);
      Var a = tape.parameter(0, logits);
      Var s = tape.parameter(1, scores);
      Var l = total_loss(mlm_loss(a, labels), cka_loss(s), 0.3);
      if (g) tape.backward(l);
      return tape.value(l).item();
    };
    GradientStore g(std::vector<Shape>{{3, 7}, {2, 5}});
    run(&g);
    Tensor* params[] = {&logits, &scores};
    const Tensor grads[] = {g.get(0), g.get(1)};
    EXPECT_LT(finite_diff_check([&] { return run(nullptr); }, params, grads), 1e-6);
  }
}
