#include "trelm/memory_bank.hpp"

#include <cmath>

#include "trelm/container.hpp"
#include "trelm/errors.hpp"

namespace trelm {

const MemoryEntry* MemoryBank::find(EntityId e) const {
  auto it = entries_.find(e);
  return it == entries_.end() ? nullptr : &it->second;
}

MemoryEntry& MemoryBank::entry(EntityId e) {
  auto [it, inserted] = entries_.try_emplace(e);
  if (inserted) {
    it->second.local = Tensor({dim_});
    it->second.global = Tensor({dim_});
  }
  return it->second;
}

Tensor local_memory(const Tensor& hidden, std::size_t l, std::size_t r, std::size_t k,
                    LocalNormalizer normalizer) {
  const std::size_t n = hidden.rows(), d = hidden.cols();
  if (l > r || r >= n) {
    throw ValidationError("span [" + std::to_string(l) + ", " + std::to_string(r) +
                          "] outside " + std::to_string(n) + " positions");
  }
  const std::size_t lo = l >= k ? l - k : 0;
  const std::size_t hi = std::min(n - 1, r + k);
  Tensor out({d});
  for (std::size_t i = lo; i <= hi; ++i) {
    const auto row = hidden.row(i);
    for (std::size_t j = 0; j < d; ++j) out[j] += row[j];
  }
  double denom = static_cast<double>(hi - lo + 1);
  if (normalizer == LocalNormalizer::literal) {
    denom = static_cast<double>(2 * k + r - l);
    if (denom == 0.0) throw ValidationError("literal local-memory normalizer 2k+r-l is zero");
  }
  for (double& v : out.data()) v /= denom;
  return out;
}

void update_local(MemoryEntry& entry, std::span<const double> observed, double gamma) {
  if (!(gamma > 0.0 && gamma < 1.0)) throw ValidationError("gamma must be in (0, 1)");
  for (double v : observed) {
    if (!std::isfinite(v)) throw NumericError("non-finite local memory observation");
  }
  if (!entry.initialized) {
    entry.local = Tensor({observed.size()}, {observed.begin(), observed.end()});
    entry.initialized = true;
    return;
  }
  if (entry.local.size() != observed.size()) throw ShapeError("local memory width mismatch");
  // Same as (1-gamma) m + gamma o, but exact when o == m.
  for (std::size_t j = 0; j < observed.size(); ++j) entry.local[j] += gamma * (observed[j] - entry.local[j]);
}

void update_global(MemoryEntry& entry, std::span<const double> cls) {
  for (double v : cls) {
    if (!std::isfinite(v)) throw NumericError("non-finite cls vector");
  }
  if (entry.global_count == 0) {
    entry.global = Tensor({cls.size()}, {cls.begin(), cls.end()});
    entry.global_count = 1;
    return;
  }
  if (entry.global.size() != cls.size()) throw ShapeError("global memory width mismatch");
  const double c = static_cast<double>(entry.global_count);
  for (std::size_t j = 0; j < cls.size(); ++j) {
    entry.global[j] = (entry.global[j] * c + cls[j]) / (c + 1.0);
  }
  ++entry.global_count;
}

MixTerms mix_terms(const MemoryEntry* entry, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValidationError("lambda must be in [0, 1]");
  MixTerms t;
  if (entry == nullptr || !entry->initialized || entry->global_count == 0) return t;
  t.knowledge_weight = 1.0 - lambda;
  t.memory_term = Tensor({entry->local.size()});
  for (std::size_t j = 0; j < entry->local.size(); ++j) {
    t.memory_term[j] = lambda / 2.0 * (entry->local[j] + entry->global[j]);
  }
  t.used_memory = true;
  return t;
}

Tensor mixed_input(std::span<const double> token_embedding, const Tensor* h_e,
                   const MemoryEntry* entry, double lambda) {
  if (h_e == nullptr) return Tensor({token_embedding.size()}, {token_embedding.begin(), token_embedding.end()});
  const MixTerms t = mix_terms(entry, lambda);
  Tensor out({h_e->size()});
  for (std::size_t j = 0; j < out.size(); ++j) {
    out[j] = t.knowledge_weight * (*h_e)[j] + (t.memory_term.empty() ? 0.0 : t.memory_term[j]);
  }
  return out;
}

double lambda_schedule(const MixSchedule& schedule, std::size_t epoch) {
  if (!(schedule.beta >= 1.0)) throw ValidationError("beta must be >= 1");
  if (!(schedule.lambda0 >= 0.0 && schedule.lambda0 <= 1.0)) {
    throw ValidationError("lambda0 must be in [0, 1]");
  }
  return schedule.lambda0 / std::pow(schedule.beta, static_cast<double>(epoch));
}

void write_memory_bank(const std::filesystem::path& path, const MemoryBank& bank) {
  const std::size_t n = bank.size(), d = bank.dim();
  Container c;
  c.kind = "trelm.memory_bank";
  Tensor local({n, d}), global({n, d});
  nlohmann::json ids = nlohmann::json::array(), counts = nlohmann::json::array(),
                 init = nlohmann::json::array();
  std::size_t row = 0;
  for (const auto& [e, entry] : bank.entries()) {
    ids.push_back(index(e));
    counts.push_back(entry.global_count);
    init.push_back(entry.initialized);
    std::copy(entry.local.data().begin(), entry.local.data().end(), local.row(row).begin());
    std::copy(entry.global.data().begin(), entry.global.data().end(), global.row(row).begin());
    ++row;
  }
  c.meta = {{"dim", d}, {"entities", ids}, {"global_count", counts}, {"initialized", init}};
  c.tensors.push_back({"local", std::move(local)});
  c.tensors.push_back({"global", std::move(global)});
  write_container(path, c);
}

MemoryBank read_memory_bank(const std::filesystem::path& path) {
  const Container c = read_container(path);
  if (c.kind != "trelm.memory_bank") throw FormatError(path.string() + " is not a memory bank file");
  try {
    const auto d = c.meta.at("dim").get<std::size_t>();
    const auto ids = c.meta.at("entities").get<std::vector<std::uint32_t>>();
    const auto counts = c.meta.at("global_count").get<std::vector<std::uint64_t>>();
    const auto init = c.meta.at("initialized").get<std::vector<bool>>();
    const Tensor& local = c.tensor("local");
    const Tensor& global = c.tensor("global");
    const std::size_t n = ids.size();
    if (counts.size() != n || init.size() != n || local.shape() != Shape{n, d} ||
        global.shape() != Shape{n, d}) {
      throw FormatError(path.string() + ": inconsistent memory bank layout");
    }
    MemoryBank bank(d);
    for (std::size_t i = 0; i < n; ++i) {
      MemoryEntry& e = bank.entry(static_cast<EntityId>(ids[i]));
      e.local = Tensor({d}, {local.row(i).begin(), local.row(i).end()});
      e.global = Tensor({d}, {global.row(i).begin(), global.row(i).end()});
      e.global_count = counts[i];
      e.initialized = init[i];
    }
    return bank;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace trelm
