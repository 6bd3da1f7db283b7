#pragma once

// Self-describing binary container shared by checkpoints, memory banks and
// KG embedding files. Layout (all integers little-endian):
//
//   8 bytes   magic "TRELMC01"
//   u64       header length H
//   H bytes   UTF-8 JSON header {"kind", "version", "meta", "tensors":[{"name","shape"}]}
//   ...       raw f64 payload of every tensor, in header order, row-major
//   u64       FNV-1a 64 checksum over every preceding byte
//
// See docs/formats.md.

#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "trelm/tensor.hpp"

namespace trelm {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct Container {
  std::string kind;
  int version = 1;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  const Tensor& tensor(const std::string& name) const;
};

std::vector<char> encode_container(const Container& c);
Container decode_container(const std::vector<char>& bytes);

void write_container(const std::filesystem::path& path, const Container& c);
/// Throws FormatError on a missing, truncated or corrupt file; never returns partial data.
Container read_container(const std::filesystem::path& path);

std::uint64_t fnv1a64(const char* data, std::size_t size);

}  // namespace trelm
