#pragma once

// Pieces shared by the trainer and the probe.

#include <set>
#include <span>
#include <string>
#include <vector>

#include "trelm/harness.hpp"

namespace trelm::detail {

SelectionOptions selection_options(const RunConfig& config);
std::set<EntityId> long_tail_set(const RunConfig& config, const EntityCounts& counts);

/// Selects injection targets among `eligible` and turns them into encoder
/// inputs mixed with the bank under `lambda`.
std::vector<InjectedSpan> build_injections(const TransformerModel& model,
                                           std::span<const TokenId> input,
                                           std::span<const EntitySpan> eligible,
                                           const std::set<EntityId>& long_tail,
                                           const SelectionOptions& selection,
                                           const KgEmbeddings& kg_embeddings,
                                           const MemoryBank& bank, double lambda,
                                           std::size_t* n_with_memory = nullptr);

/// Shortest round-trip representation of a double.
std::string format_double(double v);

void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace trelm::detail
