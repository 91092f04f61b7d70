// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dmtl/nn.hpp"
#include "dmtl/tensor.hpp"

namespace dmtl::ckpt {

struct NamedTensor {
  std::string name;
  Tensor value;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// Binary tensor archive: magic "DMTLTENS", u32 version, u64 count, then per
/// entry u32 name length, name bytes, u32 rank, i64 dims, f64 values. All
/// integers and floats little-endian.
std::string encode_tensors(const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> decode_tensors(const std::string& bytes);

/// Atomic write (temporary sibling + rename).
void write_tensors(const std::filesystem::path& path, const std::vector<NamedTensor>& entries);
std::vector<NamedTensor> read_tensors(const std::filesystem::path& path);

/// Parameters then buffers of a registry, names prefixed.
std::vector<NamedTensor> registry_state(const nn::ParameterRegistry& reg, const std::string& prefix = "");

/// Copies every prefixed entry into the registry. Throws listing missing,
/// unexpected or mis-shaped names.
void load_registry_state(nn::ParameterRegistry& reg, const std::vector<NamedTensor>& entries,
                         const std::string& prefix = "");

}  // namespace dmtl::ckpt
