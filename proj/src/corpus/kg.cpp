#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "trelm/corpus.hpp"
#include "trelm/errors.hpp"

namespace trelm {

void KnowledgeGraph::validate() const {
  if (entities.size() < 2) throw ValidationError("a knowledge graph needs at least 2 entities");
  if (relations.empty()) throw ValidationError("a knowledge graph needs at least 1 relation");
  for (std::size_t i = 0; i < entities.size(); ++i) {
    if (index(entities[i].id) != i) throw ValidationError("entity ids must be dense and ordered");
    if (entities[i].surface.empty()) throw ValidationError("entity without surface tokens");
    for (TokenId t : entities[i].surface) {
      if (t >= vocab_size) throw ValidationError("entity token outside the vocabulary");
    }
  }
  for (std::size_t i = 0; i < relations.size(); ++i) {
    if (index(relations[i].id) != i) throw ValidationError("relation ids must be dense and ordered");
    if (relations[i].surface.empty()) throw ValidationError("relation without surface tokens");
    for (TokenId t : relations[i].surface) {
      if (t >= vocab_size) throw ValidationError("relation token outside the vocabulary");
    }
  }
  std::set<Triple> seen;
  for (const auto& t : triples) {
    if (index(t.head) >= entities.size() || index(t.tail) >= entities.size() ||
        index(t.relation) >= relations.size()) {
      throw ValidationError("triple endpoint does not exist");
    }
    if (!seen.insert(t).second) throw ValidationError("duplicate triple");
  }
  if (first_distractor > vocab_size) throw ValidationError("first_distractor beyond vocabulary");
}

KnowledgeGraph generate_kg(std::uint64_t seed, std::size_t n_entities, std::size_t n_relations,
                           std::size_t n_triples, const KgOptions& options) {
  if (n_entities < 2) throw ValidationError("need at least 2 entities");
  if (n_relations < 1) throw ValidationError("need at least 1 relation");
  if (n_triples == 0) throw ValidationError("n_triples = 0 would leave every entity orphaned");
  if (2 * n_triples < n_entities) {
    throw ValidationError("n_triples too small for every entity to appear in a triple");
  }
  const std::size_t capacity = n_entities * (n_entities - 1) * n_relations;
  if (n_triples > capacity) throw ValidationError("more triples requested than distinct triples exist");
  if (options.tokens_per_entity < 1 || options.tokens_per_relation < 1) {
    throw ValidationError("surface forms need at least one token");
  }
  const std::size_t reserved = special::count + n_entities * options.tokens_per_entity +
                               n_relations * options.tokens_per_relation;
  if (reserved + 1 > options.vocab_size) {
    throw ValidationError("vocab_size " + std::to_string(options.vocab_size) +
                          " too small: entities and relations need " + std::to_string(reserved) +
                          " ids plus at least one distractor");
  }

  KnowledgeGraph kg;
  kg.vocab_size = options.vocab_size;
  TokenId next = special::count;
  for (std::size_t e = 0; e < n_entities; ++e) {
    Entity ent{static_cast<EntityId>(e), "E" + std::to_string(e), {}};
    for (std::size_t j = 0; j < options.tokens_per_entity; ++j) ent.surface.push_back(next++);
    kg.entities.push_back(std::move(ent));
  }
  for (std::size_t r = 0; r < n_relations; ++r) {
    Relation rel{static_cast<RelationId>(r), "R" + std::to_string(r), {}};
    for (std::size_t j = 0; j < options.tokens_per_relation; ++j) rel.surface.push_back(next++);
    kg.relations.push_back(std::move(rel));
  }
  kg.first_distractor = next;

  const bool functional = n_triples <= n_entities * n_relations;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick_entity(0, n_entities - 1);
  std::uniform_int_distribution<std::size_t> pick_relation(0, n_relations - 1);

  std::set<Triple> triples;
  std::set<std::pair<std::size_t, std::size_t>> used_pairs;
  auto try_add = [&](std::size_t h, std::size_t r, std::size_t t) {
    if (h == t) return false;
    if (functional && used_pairs.count({h, r})) return false;
    Triple tr{static_cast<EntityId>(h), static_cast<RelationId>(r), static_cast<EntityId>(t)};
    if (!triples.insert(tr).second) return false;
    used_pairs.insert({h, r});
    return true;
  };

  // Latent layout: entities occupy shuffled cells of a square grid and each
  // relation is a fixed grid offset, so tail = head + offset. Real graphs are
  // far from random; this gives translational embeddings something to find.
  const auto width = static_cast<long>(std::ceil(std::sqrt(static_cast<double>(n_entities))));
  std::vector<std::size_t> cell_of(n_entities);
  std::iota(cell_of.begin(), cell_of.end(), 0);
  std::shuffle(cell_of.begin(), cell_of.end(), rng);
  std::vector<long> entity_at(n_entities, -1);
  for (std::size_t e = 0; e < n_entities; ++e) entity_at[cell_of[e]] = static_cast<long>(e);

  std::vector<std::pair<long, long>> offsets;
  for (long radius = 2; offsets.size() < n_relations; ++radius) {
    offsets.clear();
    for (long dx = -radius; dx <= radius; ++dx) {
      for (long dy = -radius; dy <= radius; ++dy) {
        if (dx != 0 || dy != 0) offsets.emplace_back(dx, dy);
      }
    }
  }
  std::shuffle(offsets.begin(), offsets.end(), rng);
  offsets.resize(n_relations);

  auto grid_tail = [&](std::size_t h, std::size_t r) -> long {
    const long x = static_cast<long>(cell_of[h]) % width + offsets[r].first;
    const long y = static_cast<long>(cell_of[h]) / width + offsets[r].second;
    if (x < 0 || x >= width || y < 0) return -1;
    const long cell = y * width + x;
    return cell < static_cast<long>(n_entities) ? entity_at[cell] : -1;
  };
  std::vector<Triple> grid;
  for (std::size_t h = 0; h < n_entities; ++h) {
    for (std::size_t r = 0; r < n_relations; ++r) {
      const long t = grid_tail(h, r);
      if (t >= 0) grid.push_back({static_cast<EntityId>(h), static_cast<RelationId>(r), static_cast<EntityId>(t)});
    }
  }
  std::shuffle(grid.begin(), grid.end(), rng);

  // Coverage pass: a matching of grid triples, then leftover entities paired
  // off at random. At most ceil(|E|/2) triples either way.
  std::vector<bool> covered(n_entities, false);
  for (const auto& g : grid) {
    if (covered[index(g.head)] || covered[index(g.tail)]) continue;
    if (try_add(index(g.head), index(g.relation), index(g.tail))) {
      covered[index(g.head)] = covered[index(g.tail)] = true;
    }
  }
  std::vector<std::size_t> orphans;
  for (std::size_t e = 0; e < n_entities; ++e) {
    if (!covered[e]) orphans.push_back(e);
  }
  for (std::size_t i = 0; i < orphans.size(); i += 2) {
    const std::size_t a = orphans[i];
    std::size_t b = i + 1 < orphans.size() ? orphans[i + 1] : pick_entity(rng);
    while (b == a) b = pick_entity(rng);
    while (!try_add(a, pick_relation(rng), b)) {
      b = pick_entity(rng);
      while (b == a) b = pick_entity(rng);
    }
  }
  for (const auto& g : grid) {
    if (triples.size() >= n_triples) break;
    try_add(index(g.head), index(g.relation), index(g.tail));
  }

  // Whatever the grid cannot supply is drawn at random.
  const std::size_t pool = functional ? n_entities * n_relations : capacity;
  if (triples.size() < n_triples && 2 * n_triples > pool) {
    std::vector<Triple> candidates;
    for (std::size_t h = 0; h < n_entities; ++h) {
      for (std::size_t r = 0; r < n_relations; ++r) {
        if (functional) {
          if (used_pairs.count({h, r})) continue;
          std::size_t t = pick_entity(rng);
          while (t == h) t = pick_entity(rng);
          candidates.push_back({static_cast<EntityId>(h), static_cast<RelationId>(r),
                                static_cast<EntityId>(t)});
          continue;
        }
        for (std::size_t t = 0; t < n_entities; ++t) {
          Triple tr{static_cast<EntityId>(h), static_cast<RelationId>(r), static_cast<EntityId>(t)};
          if (h != t && !triples.count(tr)) candidates.push_back(tr);
        }
      }
    }
    std::shuffle(candidates.begin(), candidates.end(), rng);
    for (const auto& c : candidates) {
      if (triples.size() >= n_triples) break;
      try_add(index(c.head), index(c.relation), index(c.tail));
    }
  }
  while (triples.size() < n_triples) try_add(pick_entity(rng), pick_relation(rng), pick_entity(rng));

  kg.triples.assign(triples.begin(), triples.end());
  kg.validate();
  return kg;
}

// ---------------------------------------------------------------------------
// translational embeddings

std::span<const double> KgEmbeddings::entity_vector(EntityId e) const {
  if (index(e) >= entity.rows()) throw ValidationError("no KG embedding for entity " + std::to_string(index(e)));
  return entity.row(index(e));
}

namespace {

double distance(std::span<const double> h, std::span<const double> r, std::span<const double> t,
                std::vector<double>* diff = nullptr) {
  double s = 0.0;
  if (diff) diff->resize(h.size());
  for (std::size_t j = 0; j < h.size(); ++j) {
    const double d = h[j] + r[j] - t[j];
    if (diff) (*diff)[j] = d;
    s += d * d;
  }
  return std::sqrt(s);
}

void normalize_rows(Tensor& m) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto row = m.row(i);
    double n = 0.0;
    for (double v : row) n += v * v;
    n = std::sqrt(n);
    if (n > 0.0) {
      for (double& v : row) v /= n;
    }
  }
}

Triple corrupt(const Triple& t, std::size_t n_entities, const std::set<Triple>& known,
               std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, n_entities - 1);
  std::bernoulli_distribution coin(0.5);
  Triple out = t;
  for (int attempt = 0; attempt < 32; ++attempt) {
    out = t;
    auto e = static_cast<EntityId>(pick(rng));
    if (coin(rng)) {
      out.head = e;
    } else {
      out.tail = e;
    }
    if (out != t && !known.count(out)) return out;
  }
  return out;
}

}  // namespace

double translation_distance(const KgEmbeddings& emb, const Triple& t) {
  return distance(emb.entity.row(index(t.head)), emb.relation.row(index(t.relation)),
                  emb.entity.row(index(t.tail)));
}

double margin_loss(const KgEmbeddings& emb, const Triple& positive, const Triple& negative,
                   double margin) {
  return std::max(0.0, margin + translation_distance(emb, positive) - translation_distance(emb, negative));
}

KgEmbeddings train_kg_embeddings(const KnowledgeGraph& kg, const KgEmbeddingOptions& options) {
  if (options.dim < 2) throw ValidationError("KG embedding dimension must be >= 2");
  if (kg.triples.empty()) throw ValidationError("cannot train KG embeddings without triples");
  if (!(options.lr > 0.0)) throw ValidationError("KG embedding learning rate must be positive");
  const std::size_t ne = kg.entities.size(), nr = kg.relations.size(), d = options.dim;
  std::mt19937_64 rng(options.seed);
  const double bound = 6.0 / std::sqrt(static_cast<double>(d));
  std::uniform_real_distribution<double> init(-bound, bound);
  KgEmbeddings emb;
  emb.entity = Tensor({ne, d});
  emb.relation = Tensor({nr, d});
  for (double& v : emb.entity.data()) v = init(rng);
  for (double& v : emb.relation.data()) v = init(rng);
  normalize_rows(emb.relation);

  const std::set<Triple> known(kg.triples.begin(), kg.triples.end());
  std::vector<std::size_t> order(kg.triples.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> gpos, gneg;
  const double lr = options.lr;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    normalize_rows(emb.entity);
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t idx : order) {
      const Triple& pos = kg.triples[idx];
      const Triple neg = corrupt(pos, ne, known, rng);
      auto h = emb.entity.row(index(pos.head));
      auto t = emb.entity.row(index(pos.tail));
      auto r = emb.relation.row(index(pos.relation));
      const double dp = distance(h, r, t, &gpos);
      const double dn = distance(emb.entity.row(index(neg.head)), r, emb.entity.row(index(neg.tail)), &gneg);
      const double loss = options.margin + dp - dn;
      if (loss <= 0.0) continue;
      total += loss;
      if (dp > 0.0) {
        for (std::size_t j = 0; j < d; ++j) {
          const double g = gpos[j] / dp;
          h[j] -= lr * g;
          r[j] -= lr * g;
          t[j] += lr * g;
        }
      }
      if (dn > 0.0) {
        auto nh = emb.entity.row(index(neg.head));
        auto nt = emb.entity.row(index(neg.tail));
        for (std::size_t j = 0; j < d; ++j) {
          const double g = gneg[j] / dn;
          nh[j] += lr * g;
          r[j] += lr * g;
          nt[j] -= lr * g;
        }
      }
    }
    emb.epoch_loss.push_back(total / static_cast<double>(order.size()));
  }
  normalize_rows(emb.entity);
  require_finite(emb.entity, "KG entity embeddings");
  require_finite(emb.relation, "KG relation embeddings");
  return emb;
}

double ranking_accuracy(const KnowledgeGraph& kg, const KgEmbeddings& emb, std::uint64_t seed,
                        std::size_t corruptions) {
  if (kg.triples.empty() || corruptions == 0) return 0.0;
  std::mt19937_64 rng(seed);
  const std::set<Triple> known(kg.triples.begin(), kg.triples.end());
  std::size_t wins = 0, total = 0;
  for (const auto& t : kg.triples) {
    const double dp = translation_distance(emb, t);
    for (std::size_t c = 0; c < corruptions; ++c) {
      const Triple neg = corrupt(t, kg.entities.size(), known, rng);
      if (dp < translation_distance(emb, neg)) ++wins;
      ++total;
    }
  }
  return static_cast<double>(wins) / static_cast<double>(total);
}

}  // namespace trelm
