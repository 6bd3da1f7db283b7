#pragma once

// Training losses: MLM masking and cross-entropy, the token-level contrastive
// knowledge-assessing (CKA) loss with sampled negatives, and their mix.

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "trelm/autodiff.hpp"
#include "trelm/corpus.hpp"
#include "trelm/model.hpp"

namespace trelm {

enum class CkaDirection { tail, head, both };
CkaDirection cka_direction_from_string(const std::string& s);
std::string to_string(CkaDirection d);
/// Side assessed in a given batch: `both` alternates tail, head, tail, ...
CkaDirection cka_side(CkaDirection d, std::uint64_t batch_index);

struct MaskedSequence {
  std::vector<TokenId> input;                // tokens after substitution
  std::vector<std::size_t> label_positions;  // ascending
  std::vector<TokenId> label_tokens;         // original ids at label_positions
  std::vector<std::size_t> cka_positions;    // assessed entity span, always [MASK]ed
  std::vector<TokenId> cka_gold;

  bool operator==(const MaskedSequence&) const = default;
};

struct MaskOptions {
  double mask_rate = 0.15;
  /// Side whose gold-fact span becomes the CKA target; ignored for
  /// sequences without a fact.
  CkaDirection side = CkaDirection::tail;
  bool assess = true;
};

/// BERT-style masking of non-special positions: each is selected with
/// probability mask_rate (at least one per sequence); selected positions
/// become [MASK] 80%, a random token 10%, unchanged 10%. The assessed span
/// is always selected and always [MASK]ed.
MaskedSequence mask_sequence(const AnnotatedSequence& seq, std::size_t vocab_size,
                             const MaskOptions& options, std::uint64_t seed);

using MaskedBatch = std::vector<MaskedSequence>;
/// Sequence i is masked with a seed derived from (seed, i).
MaskedBatch mask_batch(std::span<const AnnotatedSequence> sequences, std::size_t vocab_size,
                       const MaskOptions& options, std::uint64_t seed);

/// Uniform negatives over [first_token, vocab_size) minus the gold token.
class NegativeSampler {
 public:
  NegativeSampler(std::size_t vocab_size, std::size_t count, TokenId first_token = special::count);
  std::size_t count() const { return count_; }
  std::vector<TokenId> sample(TokenId gold, std::mt19937_64& rng) const;

 private:
  std::size_t vocab_size_;
  std::size_t count_;
  TokenId first_;
};

/// Mean cross-entropy of logits rows against labels.
Var mlm_loss(Var logits, std::span<const TokenId> labels);
/// Mean over rows of -log softmax(row)[0], where column 0 scores the gold
/// token and the rest score negatives.
Var cka_loss(Var scores);
/// Builds the [P, 1+|Q|] score matrix from h_d rows and cka_loss of it.
Var cka_loss(const TransformerModel& model, ParamBinding& b, Var h_d,
             std::span<const TokenId> gold, std::span<const std::vector<TokenId>> negatives);
Var total_loss(Var l_mlm, Var l_cka, double theta);

double cka_loss_value(const Tensor& scores);
double total_loss_value(double l_mlm, double l_cka, double theta);

}  // namespace trelm
