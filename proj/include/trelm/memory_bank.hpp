#pragma once

// Knowledge-augmented memory bank: per-entity local (windowed context) and
// global (cls) memories, the input mixing rule and the lambda decay schedule.

#include <filesystem>
#include <map>
#include <span>

#include "trelm/corpus.hpp"
#include "trelm/tensor.hpp"

namespace trelm {

struct MemoryEntry {
  Tensor local;   // [d1]
  Tensor global;  // [d1], running mean of `global_count` cls vectors
  std::uint64_t global_count = 0;
  bool initialized = false;  // local memory has seen its first observation

  bool operator==(const MemoryEntry&) const = default;
};

class MemoryBank {
 public:
  MemoryBank() = default;
  explicit MemoryBank(std::size_t dim) : dim_(dim) {}

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return entries_.size(); }
  /// nullptr when the entity has no entry.
  const MemoryEntry* find(EntityId e) const;
  /// Creates a zeroed, uninitialized entry on first use.
  MemoryEntry& entry(EntityId e);
  const std::map<EntityId, MemoryEntry>& entries() const { return entries_; }

  bool operator==(const MemoryBank&) const = default;

 private:
  std::size_t dim_ = 0;
  std::map<EntityId, MemoryEntry> entries_;
};

enum class LocalNormalizer {
  window_count,  // divide by the number of positions actually summed
  literal,       // divide by 2k + r - l regardless of clipping
};

/// Mean of hidden rows max(0, l-k) .. min(n-1, r+k).
Tensor local_memory(const Tensor& hidden, std::size_t l, std::size_t r, std::size_t k,
                    LocalNormalizer normalizer = LocalNormalizer::window_count);

/// local <- (1-gamma) local + gamma observed; the first observation initializes.
void update_local(MemoryEntry& entry, std::span<const double> observed, double gamma);
/// Streaming mean of cls vectors.
void update_global(MemoryEntry& entry, std::span<const double> cls);

/// Split of I_p = (1-lambda) h_e + lambda/2 (local + global) into the factor on
/// h_e and the additive memory term. Falls back to (1, 0) for an entry that
/// has not been observed yet.
struct MixTerms {
  double knowledge_weight = 1.0;
  Tensor memory_term;  // [d1]; empty means zero
  bool used_memory = false;
};
MixTerms mix_terms(const MemoryEntry* entry, double lambda);

/// I_p for one position: the token embedding outside injection spans, the
/// mixed knowledge input inside (h_e non-null).
Tensor mixed_input(std::span<const double> token_embedding, const Tensor* h_e,
                   const MemoryEntry* entry, double lambda);

struct MixSchedule {
  double lambda0 = 0.5;
  double beta = 2.0;
};
double lambda_schedule(const MixSchedule& schedule, std::size_t epoch);

void write_memory_bank(const std::filesystem::path& path, const MemoryBank& bank);
MemoryBank read_memory_bank(const std::filesystem::path& path);

}  // namespace trelm
