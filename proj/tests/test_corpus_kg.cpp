#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "trelm/corpus.hpp"
#include "trelm/errors.hpp"
#include "test_util.hpp"

using namespace trelm;
using trelm::test::TempDir;

namespace {

const KnowledgeGraph& toy_kg() {
  static const KnowledgeGraph kg = generate_kg(1, 100, 8, 400);
  return kg;
}

const std::vector<AnnotatedSequence>& toy_corpus() {
  static const std::vector<AnnotatedSequence> corpus = generate_corpus(toy_kg(), 2, 10000, 1.1);
  return corpus;
}

// Counted without entity_frequency: walk the tokens and look surfaces up.
std::map<EntityId, std::size_t> recount(const KnowledgeGraph& kg,
                                        const std::vector<AnnotatedSequence>& corpus) {
  std::map<TokenId, EntityId> owner;
  for (const auto& e : kg.entities) owner[e.surface.front()] = e.id;
  std::map<EntityId, std::size_t> counts;
  for (const auto& s : corpus) {
    for (std::size_t i = 0; i < s.tokens.size(); ++i) {
      const auto it = owner.find(s.tokens[i]);
      if (it == owner.end()) continue;
      ++counts[it->second];
      i += kg.entities[index(it->second)].surface.size() - 1;
    }
  }
  return counts;
}

}  // namespace

TEST(Kg, SameSeedSameGraph) {
  EXPECT_EQ(generate_kg(1, 10, 3, 20), generate_kg(1, 10, 3, 20));
  EXPECT_NE(generate_kg(1, 10, 3, 20), generate_kg(2, 10, 3, 20));
}

TEST(Kg, ZeroTriplesRejected) {
  EXPECT_THROW(generate_kg(1, 10, 3, 0), ValidationError);
}

TEST(Kg, UnsatisfiableCountsRejected) {
  EXPECT_THROW(generate_kg(1, 10, 3, 3), ValidationError);      // cannot cover 10 entities
  EXPECT_THROW(generate_kg(1, 3, 1, 7), ValidationError);       // only 6 non-loop triples exist
  EXPECT_THROW(generate_kg(1, 1, 1, 1), ValidationError);
  EXPECT_THROW(generate_kg(1, 10, 0, 5), ValidationError);
  EXPECT_THROW(generate_kg(1, 10, 3, 20, KgOptions{20, 1, 2}), ValidationError);  // vocab too small
}

TEST(Kg, ToyGraphCoversEveryEntity) {
  const auto& kg = toy_kg();
  ASSERT_EQ(kg.triples.size(), 400u);
  std::vector<bool> seen(kg.entities.size(), false);
  for (const auto& t : kg.triples) seen[index(t.head)] = seen[index(t.tail)] = true;
  EXPECT_EQ(std::count(seen.begin(), seen.end(), true), 100);
}

TEST(Kg, EdgeSizesStillCover) {
  for (std::size_t n : {2, 3, 7, 10, 31}) {
    for (std::size_t r : {1, 2, 5}) {
      const std::size_t minimum = (n + 1) / 2;
      for (std::size_t m : {minimum, minimum + 3, n * r}) {
        if (m > n * (n - 1) * r) continue;
        const KnowledgeGraph kg = generate_kg(n + r + m, n, r, m);
        ASSERT_EQ(kg.triples.size(), m) << n << " " << r << " " << m;
        std::set<std::size_t> seen;
        for (const auto& t : kg.triples) {
          EXPECT_NE(t.head, t.tail);
          seen.insert(index(t.head));
          seen.insert(index(t.tail));
        }
        EXPECT_EQ(seen.size(), n) << n << " " << r << " " << m;
      }
    }
  }
}

TEST(Kg, FunctionalWhileRoomAllows) {
  std::set<std::pair<EntityId, RelationId>> pairs;
  for (const auto& t : toy_kg().triples) EXPECT_TRUE(pairs.insert({t.head, t.relation}).second);
}

TEST(Kg, DenseRequestFillsEveryTriple) {
  const KnowledgeGraph kg = generate_kg(4, 4, 2, 24);
  EXPECT_EQ(kg.triples.size(), 24u);
  EXPECT_NO_THROW(kg.validate());
}

TEST(Kg, ValidateCatchesDuplicatesAndDanglingEndpoints) {
  KnowledgeGraph kg = generate_kg(1, 10, 3, 20);
  KnowledgeGraph dup = kg;
  dup.triples.push_back(dup.triples.front());
  EXPECT_THROW(dup.validate(), ValidationError);
  KnowledgeGraph dangling = kg;
  dangling.triples.push_back({EntityId{10}, RelationId{0}, EntityId{1}});
  EXPECT_THROW(dangling.validate(), ValidationError);
}

TEST(Kg, JsonRoundTrip) {
  TempDir dir("kg");
  write_kg(dir / "kg.json", toy_kg());
  EXPECT_EQ(read_kg(dir / "kg.json"), toy_kg());
}

TEST(Corpus, SameSeedSameCorpus) {
  const auto a = generate_corpus(toy_kg(), 5, 300, 1.1);
  const auto b = generate_corpus(toy_kg(), 5, 300, 1.1);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, generate_corpus(toy_kg(), 6, 300, 1.1));
}

TEST(Corpus, SentenceDependsOnlyOnItsIndex) {
  const auto full = generate_corpus(toy_kg(), 5, 300, 1.1);
  const auto prefix = generate_corpus(toy_kg(), 5, 50, 1.1);
  for (std::size_t i = 0; i < prefix.size(); ++i) EXPECT_EQ(prefix[i], full[i]);
}

TEST(Corpus, BadArgumentsRejected) {
  EXPECT_THROW(generate_corpus(toy_kg(), 1, 0, 1.1), ValidationError);
  EXPECT_THROW(generate_corpus(toy_kg(), 1, 10, 0.0), ValidationError);
  EXPECT_THROW(generate_corpus(toy_kg(), 1, 10, -1.0), ValidationError);
}

TEST(Corpus, SpansAndFactsAreExact) {
  const auto& kg = toy_kg();
  const std::set<Triple> triples(kg.triples.begin(), kg.triples.end());
  for (const auto& s : toy_corpus()) {
    ASSERT_TRUE(s.fact.has_value());
    EXPECT_TRUE(triples.count(*s.fact));
    EXPECT_EQ(s.tokens.front(), special::cls);
    std::size_t prev_end = 0;
    for (const auto& span : s.spans) {
      ASSERT_LE(span.first, span.last);
      ASSERT_LT(span.last, s.tokens.size());
      EXPECT_GT(span.first, prev_end);  // ordered, non-overlapping, after [CLS]
      prev_end = span.last;
      const auto& surface = kg.entities[index(span.entity)].surface;
      ASSERT_EQ(span.last - span.first + 1, surface.size());
      EXPECT_TRUE(std::equal(surface.begin(), surface.end(), s.tokens.begin() + span.first));
    }
    const auto fs = fact_spans(s);
    ASSERT_TRUE(fs.has_value());
    EXPECT_EQ(s.spans[fs->head].entity, s.fact->head);
    EXPECT_EQ(s.spans[fs->tail].entity, s.fact->tail);
    const std::size_t distractors = s.tokens.size() - 1 - 2 - kg.relations[0].surface.size();
    EXPECT_GE(distractors, 2u);
    EXPECT_LE(distractors, 6u);
  }
}

TEST(Corpus, HeadEntityAtLeastTenTimesMedian) {
  const auto counts = entity_frequency(toy_corpus(), &toy_kg());
  std::vector<std::size_t> c;
  for (const auto& [e, n] : counts) c.push_back(n);
  std::sort(c.begin(), c.end());
  const double median = c.size() % 2 ? c[c.size() / 2] : 0.5 * (c[c.size() / 2 - 1] + c[c.size() / 2]);
  EXPECT_GE(static_cast<double>(c.back()), 10.0 * median);
}

TEST(Corpus, RankFrequencySlopeNearZipfExponent) {
  const auto counts = entity_frequency(toy_corpus());
  std::vector<double> c;
  for (const auto& [e, n] : counts) c.push_back(static_cast<double>(n));
  std::sort(c.rbegin(), c.rend());
  // Least-squares slope of log count against log rank.
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = static_cast<double>(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    const double x = std::log(static_cast<double>(i + 1)), y = std::log(c[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  EXPECT_GE(slope, -1.1 - 0.5);
  EXPECT_LE(slope, -1.1 + 0.5);
}

TEST(Corpus, FrequencyMatchesIndependentRecount) {
  const auto counts = entity_frequency(toy_corpus());
  const auto expected = recount(toy_kg(), toy_corpus());
  EXPECT_EQ(counts.size(), expected.size());
  for (const auto& [e, n] : expected) EXPECT_EQ(counts.at(e), n);
}

TEST(Corpus, EntityFrequencyListsUnseenEntitiesWithTheGraph) {
  const auto corpus = generate_corpus(toy_kg(), 3, 5, 1.1);
  EXPECT_EQ(entity_frequency(corpus, &toy_kg()).size(), 100u);
  EXPECT_LE(entity_frequency(corpus).size(), 10u);
}

TEST(Corpus, LongTailDetection) {
  const EntityCounts counts{{EntityId{0}, 3}, {EntityId{1}, 100}};
  EXPECT_EQ(detect_long_tail(counts, 5), (std::set<EntityId>{EntityId{0}}));
  EXPECT_TRUE(detect_long_tail(counts, 2).empty());
  EXPECT_THROW(detect_long_tail(counts, 0), ValidationError);
}

TEST(Corpus, RestrictedToEligibleTriples) {
  const auto split = split_triples(toy_kg(), 0.1, 4);
  EXPECT_EQ(split.heldout.size(), 40u);
  EXPECT_EQ(split.train.size(), 360u);
  CorpusOptions o;
  o.triples = split.train;
  std::set<Triple> held;
  for (auto i : split.heldout) held.insert(toy_kg().triples[i]);
  for (const auto& s : generate_corpus(toy_kg(), 9, 2000, 1.1, o)) EXPECT_FALSE(held.count(*s.fact));
}

TEST(Corpus, QueryVerbalization) {
  const Triple t = toy_kg().triples[3];
  std::vector<std::size_t> tail;
  const auto q = verbalize_query(toy_kg(), t, &tail);
  ASSERT_EQ(q.spans.size(), 1u);
  EXPECT_EQ(q.spans[0].entity, t.head);
  ASSERT_EQ(tail.size(), 1u);
  EXPECT_EQ(tail[0], q.tokens.size() - 1);
  EXPECT_EQ(q.tokens.back(), special::mask);
}

TEST(Corpus, JsonlRoundTrip) {
  TempDir dir("corpus");
  const auto corpus = generate_corpus(toy_kg(), 5, 200, 1.1);
  write_corpus(dir / "c.jsonl", corpus);
  EXPECT_EQ(read_corpus(dir / "c.jsonl"), corpus);
}

TEST(KgEmbeddings, SameSeedSameVectors) {
  KgEmbeddingOptions o;
  o.epochs = 20;
  o.seed = 3;
  const auto a = train_kg_embeddings(toy_kg(), o);
  const auto b = train_kg_embeddings(toy_kg(), o);
  EXPECT_EQ(a.entity, b.entity);
  EXPECT_EQ(a.relation, b.relation);
}

TEST(KgEmbeddings, TrueTriplesOutrankCorruptions) {
  KgEmbeddingOptions o;
  o.seed = 3;
  const auto emb = train_kg_embeddings(toy_kg(), o);
  EXPECT_GE(ranking_accuracy(toy_kg(), emb, 11, 10), 0.9);
  for (double v : emb.entity.data()) ASSERT_TRUE(std::isfinite(v));
}

TEST(KgEmbeddings, LossDecreasesOnAverage) {
  KgEmbeddingOptions o;
  o.seed = 3;
  const auto emb = train_kg_embeddings(toy_kg(), o);
  const auto& l = emb.epoch_loss;
  ASSERT_EQ(l.size(), o.epochs);
  const double first = std::accumulate(l.begin(), l.begin() + 20, 0.0);
  const double last = std::accumulate(l.end() - 20, l.end(), 0.0);
  EXPECT_LT(last, first);
}

TEST(KgEmbeddings, ZeroMarginIdenticalPairContributesNothing) {
  KgEmbeddingOptions o;
  o.epochs = 5;
  const auto emb = train_kg_embeddings(toy_kg(), o);
  const Triple t = toy_kg().triples[0];
  EXPECT_EQ(margin_loss(emb, t, t, 0.0), 0.0);
}

TEST(KgEmbeddings, SingleTripleIsFitted) {
  KnowledgeGraph kg = generate_kg(1, 2, 1, 1);
  KgEmbeddingOptions o;
  o.epochs = 2000;
  o.seed = 1;
  const auto emb = train_kg_embeddings(kg, o);
  EXPECT_LT(translation_distance(emb, kg.triples[0]), 0.1);
}

TEST(KgEmbeddings, Errors) {
  KnowledgeGraph empty = toy_kg();
  empty.triples.clear();
  EXPECT_THROW(train_kg_embeddings(empty, {}), ValidationError);
  KgEmbeddingOptions o;
  o.dim = 1;
  EXPECT_THROW(train_kg_embeddings(toy_kg(), o), ValidationError);
}

TEST(KgEmbeddings, FileRoundTrip) {
  TempDir dir("emb");
  KgEmbeddingOptions o;
  o.epochs = 3;
  const auto emb = train_kg_embeddings(toy_kg(), o);
  write_kg_embeddings(dir / "e.bin", emb);
  const auto back = read_kg_embeddings(dir / "e.bin");
  EXPECT_EQ(back.entity, emb.entity);
  EXPECT_EQ(back.relation, emb.relation);
}
