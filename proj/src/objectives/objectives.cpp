#include "trelm/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "trelm/errors.hpp"
#include "trelm/random.hpp"

namespace trelm {

CkaDirection cka_direction_from_string(const std::string& s) {
  if (s == "tail") return CkaDirection::tail;
  if (s == "head") return CkaDirection::head;
  if (s == "both") return CkaDirection::both;
  throw ValidationError("unknown CKA direction '" + s + "'");
}

std::string to_string(CkaDirection d) {
  switch (d) {
    case CkaDirection::tail: return "tail";
    case CkaDirection::head: return "head";
    case CkaDirection::both: return "both";
  }
  return "?";
}

CkaDirection cka_side(CkaDirection d, std::uint64_t batch_index) {
  if (d != CkaDirection::both) return d;
  return batch_index % 2 == 0 ? CkaDirection::tail : CkaDirection::head;
}

MaskedSequence mask_sequence(const AnnotatedSequence& seq, std::size_t vocab_size,
                             const MaskOptions& options, std::uint64_t seed) {
  if (!(options.mask_rate > 0.0 && options.mask_rate < 1.0)) {
    throw ValidationError("mask_rate must be in (0, 1)");
  }
  if (vocab_size <= special::count) throw ValidationError("vocabulary has no ordinary tokens");
  const std::size_t n = seq.tokens.size();
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < n; ++i) {
    if (seq.tokens[i] >= special::count) candidates.push_back(i);
  }
  if (candidates.empty()) throw ValidationError("sequence holds only special tokens");

  std::vector<char> forced(n, 0);
  MaskedSequence out;
  if (options.assess) {
    if (auto fs = fact_spans(seq)) {
      const EntitySpan& span = seq.spans[options.side == CkaDirection::head ? fs->head : fs->tail];
      for (std::size_t i = span.first; i <= span.last; ++i) {
        forced[i] = 1;
        out.cka_positions.push_back(i);
        out.cka_gold.push_back(seq.tokens[i]);
      }
    }
  }

  std::mt19937_64 rng(seed);
  std::bernoulli_distribution pick(options.mask_rate);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::uniform_int_distribution<TokenId> random_token(special::count, static_cast<TokenId>(vocab_size - 1));
  std::vector<char> selected(n, 0);
  std::size_t n_selected = 0;
  // One Bernoulli draw per candidate, forced or not, so the stream does not
  // depend on which side is assessed.
  for (std::size_t i : candidates) {
    if (pick(rng) || forced[i]) {
      selected[i] = 1;
      ++n_selected;
    }
  }
  if (n_selected == 0) {
    std::uniform_int_distribution<std::size_t> any(0, candidates.size() - 1);
    selected[candidates[any(rng)]] = 1;
  }

  out.input = seq.tokens;
  for (std::size_t i = 0; i < n; ++i) {
    if (!selected[i]) continue;
    out.label_positions.push_back(i);
    out.label_tokens.push_back(seq.tokens[i]);
    const double r = u01(rng);
    const TokenId replacement = random_token(rng);
    if (forced[i] || r < 0.8) {
      out.input[i] = special::mask;
    } else if (r < 0.9) {
      out.input[i] = replacement;
    }
  }
  return out;
}

MaskedBatch mask_batch(std::span<const AnnotatedSequence> sequences, std::size_t vocab_size,
                       const MaskOptions& options, std::uint64_t seed) {
  MaskedBatch out;
  out.reserve(sequences.size());
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    out.push_back(mask_sequence(sequences[i], vocab_size, options, derive_seed(seed, {i})));
  }
  return out;
}

NegativeSampler::NegativeSampler(std::size_t vocab_size, std::size_t count, TokenId first_token)
    : vocab_size_(vocab_size), count_(count), first_(first_token) {
  if (count_ < 1) throw ValidationError("need at least one negative sample");
  if (first_token + 1 >= vocab_size) throw ValidationError("negative sampling range holds fewer than 2 tokens");
}

std::vector<TokenId> NegativeSampler::sample(TokenId gold, std::mt19937_64& rng) const {
  // Draw from the range with one slot removed, then step over the gold id.
  const bool gold_in_range = gold >= first_ && gold < vocab_size_;
  const auto span = static_cast<TokenId>(vocab_size_ - first_ - (gold_in_range ? 1 : 0));
  std::uniform_int_distribution<TokenId> dist(0, span - 1);
  std::vector<TokenId> out(count_);
  for (auto& t : out) {
    TokenId v = first_ + dist(rng);
    if (gold_in_range && v >= gold) ++v;
    t = v;
  }
  return out;
}

Var mlm_loss(Var logits, std::span<const TokenId> labels) {
  if (labels.empty()) throw ValidationError("mlm_loss: no labeled positions");
  return ops::cross_entropy(logits, labels);
}

Var cka_loss(Var scores) {
  const std::size_t rows = scores.tape()->value(scores).rows();
  if (rows == 0) throw ValidationError("cka_loss: no prediction positions");
  const std::vector<std::uint32_t> zeros(rows, 0);
  return ops::cross_entropy(scores, zeros);
}

Var cka_loss(const TransformerModel& model, ParamBinding& b, Var h_d,
             std::span<const TokenId> gold, std::span<const std::vector<TokenId>> negatives) {
  if (gold.empty()) throw ValidationError("cka_loss: no prediction positions");
  if (gold.size() != negatives.size()) throw ShapeError("cka_loss: gold / negatives count mismatch");
  std::vector<Var> rows;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    std::vector<TokenId> tokens{gold[i]};
    tokens.insert(tokens.end(), negatives[i].begin(), negatives[i].end());
    Var h = ops::select_rows(h_d, std::span<const std::size_t>(&i, 1));
    rows.push_back(model.match_scores(b, h, tokens));
  }
  return cka_loss(rows.size() == 1 ? rows[0] : ops::concat_rows(rows));
}

Var total_loss(Var l_mlm, Var l_cka, double theta) {
  if (!(theta >= 0.0 && theta <= 1.0)) throw ValidationError("theta must be in [0, 1]");
  return ops::add(ops::scale(l_mlm, theta), ops::scale(l_cka, 1.0 - theta));
}

double cka_loss_value(const Tensor& scores) {
  if (scores.rows() == 0 || scores.cols() < 2) throw ValidationError("cka_loss: empty score matrix");
  double total = 0.0;
  for (std::size_t r = 0; r < scores.rows(); ++r) {
    const auto row = scores.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    total += -(row[0] - mx - std::log(z));
  }
  return total / static_cast<double>(scores.rows());
}

double total_loss_value(double l_mlm, double l_cka, double theta) {
  if (!(theta >= 0.0 && theta <= 1.0)) throw ValidationError("theta must be in [0, 1]");
  return theta * l_mlm + (1.0 - theta) * l_cka;
}

}  // namespace trelm
