#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "trelm/errors.hpp"
#include "trelm/memory_bank.hpp"
#include "test_util.hpp"

using namespace trelm;
using trelm::test::random_tensor;
using trelm::test::TempDir;

namespace {

Tensor vec(std::initializer_list<double> v) { return Tensor({v.size()}, std::vector<double>(v)); }

MemoryEntry entry_with(const Tensor& local, const Tensor& global) {
  MemoryEntry e;
  e.local = local;
  e.global = global;
  e.global_count = 1;
  e.initialized = true;
  return e;
}

MemoryBank random_bank(std::size_t n, std::size_t d, std::uint64_t seed) {
  MemoryBank bank(d);
  for (std::size_t i = 0; i < n; ++i) {
    MemoryEntry& e = bank.entry(static_cast<EntityId>(i * 3));
    e.local = random_tensor({d}, seed + 2 * i);
    e.global = random_tensor({d}, seed + 2 * i + 1);
    e.global_count = i + 1;
    e.initialized = i % 5 != 4;
  }
  return bank;
}

}  // namespace

TEST(LocalMemory, ZeroWindowIsTheSpanRow) {
  const Tensor h = random_tensor({5, 3}, 1);
  const Tensor m = local_memory(h, 2, 2, 0);
  for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(m[j], h.at(2, j));
}

TEST(LocalMemory, ThreePointMean) {
  Tensor h({5, 2});
  h.at(1, 0) = 1;
  h.at(2, 0) = 3;
  h.at(3, 0) = 2;
  const Tensor m = local_memory(h, 2, 2, 1);
  EXPECT_EQ(m, vec({2, 0}));
}

TEST(LocalMemory, ClippedWindowMatchesBruteForce) {
  const Tensor h = random_tensor({12, 4}, 2);
  for (std::size_t l = 0; l < 12; ++l) {
    for (std::size_t r = l; r < std::min<std::size_t>(12, l + 3); ++r) {
      for (std::size_t k : {0, 1, 4, 16}) {
        std::vector<double> sum(4, 0.0);
        std::size_t count = 0;
        for (long i = static_cast<long>(l) - static_cast<long>(k); i <= static_cast<long>(r + k); ++i) {
          if (i < 0 || i >= 12) continue;
          for (std::size_t j = 0; j < 4; ++j) sum[j] += h.at(static_cast<std::size_t>(i), j);
          ++count;
        }
        const Tensor m = local_memory(h, l, r, k);
        for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(m[j], sum[j] / count, 1e-14);
      }
    }
  }
}

TEST(LocalMemory, LiteralNormalizerDividesByTwoKPlusWidth) {
  const Tensor h = random_tensor({10, 2}, 3);
  const Tensor mean = local_memory(h, 4, 5, 2);  // 6 positions
  const Tensor lit = local_memory(h, 4, 5, 2, LocalNormalizer::literal);  // divided by 5
  for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(lit[j], mean[j] * 6.0 / 5.0, 1e-14);
  EXPECT_THROW(local_memory(h, 4, 4, 0, LocalNormalizer::literal), ValidationError);
}

TEST(LocalMemory, InvalidSpanThrows) {
  const Tensor h = random_tensor({4, 2}, 3);
  EXPECT_THROW(local_memory(h, 2, 4, 1), ValidationError);
  EXPECT_THROW(local_memory(h, 3, 2, 1), ValidationError);
}

TEST(UpdateLocal, MovingAverageArithmetic) {
  MemoryEntry e = entry_with(vec({1, 1}), vec({0, 0}));
  update_local(e, vec({2, 0}).data(), 0.1);
  EXPECT_NEAR(e.local[0], 1.1, 1e-15);
  EXPECT_NEAR(e.local[1], 0.9, 1e-15);
}

TEST(UpdateLocal, FixedPoint) {
  for (double g : {0.01, 0.1, 0.5, 0.99}) {
    MemoryEntry e = entry_with(vec({0.25, -3.0}), vec({0, 0}));
    update_local(e, vec({0.25, -3.0}).data(), g);
    EXPECT_EQ(e.local, vec({0.25, -3.0}));
  }
}

TEST(UpdateLocal, FirstObservationInitializes) {
  MemoryBank bank(2);
  MemoryEntry& e = bank.entry(EntityId{4});
  EXPECT_FALSE(e.initialized);
  update_local(e, vec({5, 6}).data(), 0.1);
  EXPECT_TRUE(e.initialized);
  EXPECT_EQ(e.local, vec({5, 6}));
}

TEST(UpdateLocal, ConstantInputConvergesGeometrically) {
  const double gamma = 0.1;
  MemoryEntry e = entry_with(vec({4, -2, 0}), vec({0, 0, 0}));
  const Tensor c = vec({1, 1, 1});
  const double dist0 = std::sqrt(9.0 + 9.0 + 1.0);
  for (int t = 0; t < 100; ++t) update_local(e, c.data(), gamma);
  double dist = 0;
  for (std::size_t j = 0; j < 3; ++j) dist += (e.local[j] - 1.0) * (e.local[j] - 1.0);
  EXPECT_LE(std::sqrt(dist), std::pow(1.0 - gamma, 100) * dist0 * (1.0 + 1e-9));
}

TEST(UpdateLocal, ClosedFormOverRandomSequences) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const double gamma = 0.05 + 0.09 * static_cast<double>(seed - 1);
    const Tensor m0 = random_tensor({6}, seed);
    MemoryEntry e = entry_with(m0, Tensor({6}));
    std::vector<Tensor> obs;
    for (int t = 0; t < 100; ++t) {
      obs.push_back(random_tensor({6}, seed * 1000 + t));
      update_local(e, obs.back().data(), gamma);
    }
    const std::size_t T = obs.size();
    for (std::size_t j = 0; j < 6; ++j) {
      double closed = std::pow(1.0 - gamma, static_cast<double>(T)) * m0[j];
      for (std::size_t s = 1; s <= T; ++s) {
        closed += gamma * std::pow(1.0 - gamma, static_cast<double>(T - s)) * obs[s - 1][j];
      }
      EXPECT_NEAR(e.local[j], closed, 1e-9);
    }
  }
}

TEST(UpdateLocal, Errors) {
  MemoryEntry e = entry_with(vec({1, 1}), vec({0, 0}));
  EXPECT_THROW(update_local(e, vec({1, 1}).data(), 0.0), ValidationError);
  EXPECT_THROW(update_local(e, vec({1, 1}).data(), 1.0), ValidationError);
  EXPECT_THROW(update_local(e, vec({NAN, 1}).data(), 0.1), NumericError);
  EXPECT_THROW(update_local(e, vec({1, 1, 1}).data(), 0.1), ShapeError);
}

TEST(UpdateGlobal, FirstAndSecond) {
  MemoryEntry e;
  update_global(e, vec({1, 1}).data());
  EXPECT_EQ(e.global, vec({1, 1}));
  EXPECT_EQ(e.global_count, 1u);
  update_global(e, vec({3, 3}).data());
  EXPECT_EQ(e.global, vec({2, 2}));
  EXPECT_EQ(e.global_count, 2u);
}

TEST(UpdateGlobal, StreamingEqualsBatchMean) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    MemoryEntry e;
    std::vector<double> sum(8, 0.0);
    for (int t = 0; t < 1000; ++t) {
      const Tensor cls = random_tensor({8}, seed * 10000 + t, 3.0);
      update_global(e, cls.data());
      for (std::size_t j = 0; j < 8; ++j) sum[j] += cls[j];
    }
    EXPECT_EQ(e.global_count, 1000u);
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(e.global[j], sum[j] / 1000.0, 1e-10);
  }
}

TEST(MixedInput, Endpoints) {
  const Tensor h_e = vec({2, 0});
  const MemoryEntry e = entry_with(vec({0, 2}), vec({0, 0}));
  EXPECT_EQ(mixed_input(vec({9, 9}).data(), &h_e, &e, 0.0), h_e);
  EXPECT_EQ(mixed_input(vec({9, 9}).data(), &h_e, &e, 1.0), vec({0, 1}));
  EXPECT_EQ(mixed_input(vec({9, 9}).data(), &h_e, &e, 0.5), vec({1, 0.5}));
}

TEST(MixedInput, OutsideSpansIsTheTokenEmbedding) {
  const MemoryEntry e = entry_with(vec({0, 2}), vec({0, 0}));
  EXPECT_EQ(mixed_input(vec({9, 8}).data(), nullptr, &e, 0.5), vec({9, 8}));
}

TEST(MixedInput, UninitializedEntryFallsBackToKnowledge) {
  const Tensor h_e = vec({2, 3});
  MemoryEntry blank;
  EXPECT_EQ(mixed_input(vec({0, 0}).data(), &h_e, &blank, 0.7), h_e);
  EXPECT_EQ(mixed_input(vec({0, 0}).data(), &h_e, nullptr, 0.7), h_e);
  EXPECT_FALSE(mix_terms(&blank, 0.7).used_memory);
}

TEST(MixedInput, IsAPureRead) {
  MemoryBank bank = random_bank(20, 4, 3);
  const MemoryBank before = bank;
  const Tensor h_e = random_tensor({4}, 9);
  for (int i = 0; i < 50; ++i) {
    mixed_input(h_e.data(), &h_e, bank.find(static_cast<EntityId>(3 * (i % 20))), 0.3);
  }
  EXPECT_EQ(bank, before);
}

TEST(MixedInput, LambdaOutOfRangeThrows) {
  const MemoryEntry e = entry_with(vec({0, 2}), vec({0, 0}));
  EXPECT_THROW(mix_terms(&e, 1.5), ValidationError);
  EXPECT_THROW(mix_terms(&e, -0.1), ValidationError);
}

TEST(LambdaSchedule, Values) {
  EXPECT_EQ(lambda_schedule({0.5, 2.0}, 0), 0.5);
  EXPECT_EQ(lambda_schedule({0.5, 2.0}, 3), 0.0625);
  for (std::size_t q = 0; q < 10; ++q) EXPECT_EQ(lambda_schedule({0.3, 1.0}, q), 0.3);
}

TEST(LambdaSchedule, NonIncreasingAndDecaysToZero) {
  for (double beta : {1.0, 1.5, 2.0, 10.0}) {
    double prev = lambda_schedule({0.5, beta}, 0);
    for (std::size_t q = 1; q < 60; ++q) {
      const double l = lambda_schedule({0.5, beta}, q);
      EXPECT_LE(l, prev);
      EXPECT_GE(l, 0.0);
      prev = l;
    }
    if (beta > 1.0) EXPECT_LT(lambda_schedule({0.5, beta}, 200), 1e-9);
  }
  EXPECT_THROW(lambda_schedule({0.5, 0.5}, 1), ValidationError);
  EXPECT_THROW(lambda_schedule({1.5, 2.0}, 1), ValidationError);
}

TEST(BankFile, RoundTripBitwise) {
  TempDir dir("bank");
  const MemoryBank bank = random_bank(100, 16, 5);
  write_memory_bank(dir / "bank.bin", bank);
  EXPECT_EQ(read_memory_bank(dir / "bank.bin"), bank);
}

TEST(BankFile, TruncatedFileFails) {
  TempDir dir("bank");
  write_memory_bank(dir / "bank.bin", random_bank(10, 8, 5));
  const auto size = std::filesystem::file_size(dir / "bank.bin");
  std::filesystem::resize_file(dir / "bank.bin", size / 2);
  EXPECT_THROW(read_memory_bank(dir / "bank.bin"), FormatError);
}

TEST(BankFile, SizeGrowsLinearlyInEntities) {
  TempDir dir("bank");
  std::vector<double> sizes;
  for (std::size_t n : {10, 100, 1000}) {
    const auto path = dir / ("b" + std::to_string(n) + ".bin");
    write_memory_bank(path, random_bank(n, 16, 5));
    sizes.push_back(static_cast<double>(std::filesystem::file_size(path)));
  }
  // Per-entity increment is the same across both intervals, within the
  // few bytes that longer decimal ids and counts add to the header.
  const double per_a = (sizes[1] - sizes[0]) / 90.0;
  const double per_b = (sizes[2] - sizes[1]) / 900.0;
  EXPECT_GE(per_a, 2 * 16 * 8);
  EXPECT_NEAR(per_b / per_a, 1.0, 0.05);
}
