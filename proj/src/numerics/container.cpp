#include "trelm/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "trelm/errors.hpp"

namespace trelm {

static_assert(std::endian::native == std::endian::little, "container I/O assumes little-endian");

namespace {

constexpr char kMagic[8] = {'T', 'R', 'E', 'L', 'M', 'C', '0', '1'};

void put_u64(std::vector<char>& out, std::uint64_t v) {
  char buf[8];
  std::memcpy(buf, &v, 8);
  out.insert(out.end(), buf, buf + 8);
}

std::uint64_t get_u64(const std::vector<char>& in, std::size_t offset) {
  std::uint64_t v;
  std::memcpy(&v, in.data() + offset, 8);
  return v;
}

}  // namespace

std::uint64_t fnv1a64(const char* data, std::size_t size) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 0x100000001b3ULL;
  }
  return h;
}

const Tensor& Container::tensor(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.tensor;
  }
  throw FormatError("container has no tensor named '" + name + "'");
}

std::vector<char> encode_container(const Container& c) {
  nlohmann::json header;
  header["kind"] = c.kind;
  header["version"] = c.version;
  header["meta"] = c.meta;
  header["tensors"] = nlohmann::json::array();
  std::size_t payload = 0;
  for (const auto& t : c.tensors) {
    header["tensors"].push_back({{"name", t.name}, {"shape", t.tensor.shape()}});
    payload += t.tensor.size() * sizeof(double);
  }
  const std::string text = header.dump();
  std::vector<char> out;
  out.reserve(8 + 8 + text.size() + payload + 8);
  out.insert(out.end(), kMagic, kMagic + 8);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& t : c.tensors) {
    const char* p = reinterpret_cast<const char*>(t.tensor.raw());
    out.insert(out.end(), p, p + t.tensor.size() * sizeof(double));
  }
  put_u64(out, fnv1a64(out.data(), out.size()));
  return out;
}

Container decode_container(const std::vector<char>& bytes) {
  if (bytes.size() < 24 || std::memcmp(bytes.data(), kMagic, 8) != 0) {
    throw FormatError("not a container file (bad magic or too short)");
  }
  const std::uint64_t stored = get_u64(bytes, bytes.size() - 8);
  if (stored != fnv1a64(bytes.data(), bytes.size() - 8)) {
    throw FormatError("container checksum mismatch (truncated or corrupt)");
  }
  const std::uint64_t header_len = get_u64(bytes, 8);
  if (header_len > bytes.size() - 24) throw FormatError("container header length out of range");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + header_len);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("container header is not valid JSON: ") + e.what());
  }
  Container c;
  try {
    c.kind = header.at("kind").get<std::string>();
    c.version = header.at("version").get<int>();
    c.meta = header.at("meta");
    std::size_t offset = 16 + header_len;
    const std::size_t end = bytes.size() - 8;
    for (const auto& entry : header.at("tensors")) {
      Shape shape = entry.at("shape").get<Shape>();
      const std::size_t n = shape_size(shape);
      if (offset + n * sizeof(double) > end) throw FormatError("container payload truncated");
      std::vector<double> data(n);
      std::memcpy(data.data(), bytes.data() + offset, n * sizeof(double));
      offset += n * sizeof(double);
      c.tensors.push_back({entry.at("name").get<std::string>(), Tensor(shape, std::move(data))});
    }
    if (offset != end) throw FormatError("container has trailing bytes");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed container header: ") + e.what());
  }
  return c;
}

void write_container(const std::filesystem::path& path, const Container& c) {
  const auto bytes = encode_container(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_container(bytes);
}

}  // namespace trelm
