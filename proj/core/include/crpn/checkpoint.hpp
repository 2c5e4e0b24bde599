#pragma once

#include <string>
#include <utility>
#include <vector>

#include "crpn/errors.hpp"
#include "crpn/tensor.hpp"

namespace crpn {

// Ordered name -> tensor map. File layout: magic "CRPNW1", u32 tensor count,
// manifest of (u32 name length, name bytes, 4 x u32 dims), then each tensor's
// raw f32 data in manifest order.
struct Checkpoint {
  std::vector<std::pair<std::string, Tensor4>> tensors;

  void add(const std::string& name, Tensor4 t);
  const Tensor4* find(const std::string& name) const;
  const Tensor4& require(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace crpn
