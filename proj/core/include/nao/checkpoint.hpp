#pragma once

#include <string>
#include <vector>

#include "nao/params.hpp"

namespace nao {

// Binary layout (little-endian):
//   "NAOCKPT1" | u32 count | count x { u16 name_len | name | u8 rank | u32 dims[rank] | f32 data }

struct NamedTensor {
  std::string name;
  TensorF value;
};

void write_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors);
/// Throws FormatError on bad magic or truncation, IoError if unreadable.
std::vector<NamedTensor> read_checkpoint(const std::string& path);

/// Every store entry (trainable or not), names prefixed with `prefix`.
std::vector<NamedTensor> export_params(const ParamStoreF& store, const std::string& prefix);
/// Copies matching `prefix + name` tensors into `store`; throws FormatError
/// on a missing name or shape mismatch.
void import_params(ParamStoreF& store, const std::vector<NamedTensor>& tensors,
                   const std::string& prefix);

}  // namespace nao
