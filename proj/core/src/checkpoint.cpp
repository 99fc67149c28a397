#include "vse/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace vse {

namespace {

constexpr char kMagic[8] = {'V', 'S', 'E', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

template <class T>
void put(std::ostream& os, T v) {
  // host is little-endian on every supported target
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamMap& params) {
  if (params.empty()) throw ConfigError("checkpoint: nothing to save");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("checkpoint: cannot open " + path + " for writing");
  os.write(kMagic, 8);
  put<std::uint32_t>(os, kVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (auto& [name, t] : params) {
    put<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint8_t>(os, 0);  // float32
    put<std::uint8_t>(os, static_cast<std::uint8_t>(t->shape.size()));
    for (int d : t->shape) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  }
  for (auto& [name, t] : params)
    os.write(reinterpret_cast<const char*>(t->data.data()),
             static_cast<std::streamsize>(t->data.size() * sizeof(float)));
  if (!os) throw DataError("checkpoint: write failed for " + path);
}

ParamMap load_checkpoint(const std::string& path, bool requires_grad) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("checkpoint: cannot open " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0)
    throw DataError("checkpoint: bad magic in " + path);
  auto version = get<std::uint32_t>(is);
  if (version != kVersion)
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  auto count = get<std::uint32_t>(is);

  struct Entry {
    std::string name;
    std::vector<int> shape;
  };
  std::vector<Entry> manifest(count);
  for (auto& e : manifest) {
    auto len = get<std::uint16_t>(is);
    e.name.resize(len);
    is.read(e.name.data(), len);
    auto dtype = get<std::uint8_t>(is);
    if (dtype != 0) throw DataError("checkpoint: unsupported dtype for " + e.name);
    auto ndim = get<std::uint8_t>(is);
    e.shape.resize(ndim);
    for (auto& d : e.shape) d = static_cast<int>(get<std::uint32_t>(is));
  }
  ParamMap params;
  for (auto& e : manifest) {
    auto t = Tensor::zeros(e.shape, requires_grad);
    is.read(reinterpret_cast<char*>(t->data.data()),
            static_cast<std::streamsize>(t->data.size() * sizeof(float)));
    if (!is) throw DataError("checkpoint: truncated payload for " + e.name);
    params.emplace(e.name, std::move(t));
  }
  return params;
}

}  // namespace vse
