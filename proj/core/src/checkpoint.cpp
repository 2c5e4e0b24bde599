#include "crpn/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

namespace crpn {

namespace {

constexpr char kMagic[6] = {'C', 'R', 'P', 'N', 'W', '1'};

void read_exact(std::ifstream& in, std::size_t& offset, void* dst, std::size_t n,
                const char* what) {
  in.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (in.gcount() != static_cast<std::streamsize>(n)) {
    throw FormatError(std::string("truncated while reading ") + what, offset);
  }
  offset += n;
}

}  // namespace

void Checkpoint::add(const std::string& name, Tensor4 t) {
  if (find(name)) throw ConfigError("checkpoint: duplicate tensor name " + name);
  tensors.emplace_back(name, std::move(t));
}

const Tensor4* Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return &t;
  }
  return nullptr;
}

const Tensor4& Checkpoint::require(const std::string& name) const {
  const Tensor4* t = find(name);
  if (!t) throw FormatError("checkpoint: missing tensor " + name, 0);
  return *t;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot open " + path + " for writing");
  out.write(kMagic, sizeof(kMagic));
  auto u32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    u32(static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    u32(static_cast<std::uint32_t>(t.n));
    u32(static_cast<std::uint32_t>(t.c));
    u32(static_cast<std::uint32_t>(t.h));
    u32(static_cast<std::uint32_t>(t.w));
  }
  for (const auto& [name, t] : ckpt.tensors) {
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * 4));
  }
  if (!out) throw ConfigError("write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path);
  std::size_t offset = 0;
  char magic[6];
  read_exact(in, offset, magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("bad magic, not a CRPNW1 checkpoint", 0);
  }
  auto u32 = [&](const char* what) {
    std::uint32_t v = 0;
    read_exact(in, offset, &v, 4, what);
    return v;
  };
  const std::uint32_t count = u32("tensor count");
  constexpr std::uint32_t kSane = 1u << 20;
  if (count > kSane) throw FormatError("implausible tensor count", offset - 4);
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = u32("name length");
    if (name_len == 0 || name_len > 4096) throw FormatError("implausible name length", offset - 4);
    std::string name(name_len, '\0');
    read_exact(in, offset, name.data(), name_len, "name");
    std::uint32_t dims[4];
    read_exact(in, offset, dims, sizeof(dims), "dims");
    for (auto d : dims) {
      if (d == 0 || d > kSane) throw FormatError("implausible dim in " + name, offset - 16);
    }
    const std::uint64_t total =
        static_cast<std::uint64_t>(dims[0]) * dims[1] * dims[2] * dims[3];
    if (total > (1ull << 31)) throw FormatError("implausible tensor size in " + name, offset - 16);
    ckpt.tensors.emplace_back(name, Tensor4(static_cast<int>(dims[0]), static_cast<int>(dims[1]),
                                            static_cast<int>(dims[2]), static_cast<int>(dims[3])));
  }
  for (auto& [name, t] : ckpt.tensors) {
    read_exact(in, offset, t.data.data(), t.data.size() * 4, name.c_str());
  }
  return ckpt;
}

}  // namespace crpn
