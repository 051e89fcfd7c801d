#include "nao/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <unordered_map>

#include "nao/errors.hpp"
#include "nao/le_io.hpp"

namespace nao {

namespace {
constexpr char kMagic[8] = {'N', 'A', 'O', 'C', 'K', 'P', 'T', '1'};
}

void write_checkpoint(const std::string& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write(kMagic, sizeof kMagic);
  le::put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.name.size() > 0xffff) throw FormatError("parameter name too long: " + t.name);
    le::put<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    le::put<std::uint8_t>(out, static_cast<std::uint8_t>(t.value.rank()));
    for (int d : t.value.shape()) le::put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    le::put_floats(out, t.value.values());
  }
  if (!out) throw IoError("write failed for " + path);
}

std::vector<NamedTensor> read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  char magic[8] = {};
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw FormatError(path + ": not a NAOCKPT1 checkpoint");
  }
  const auto count = le::get<std::uint32_t>(in, path);
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    const auto len = le::get<std::uint16_t>(in, path);
    t.name.resize(len);
    in.read(t.name.data(), len);
    if (!in) throw FormatError(path + ": truncated checkpoint");
    const auto rank = le::get<std::uint8_t>(in, path);
    std::vector<int> shape(rank);
    for (auto& d : shape) d = static_cast<int>(le::get<std::uint32_t>(in, path));
    t.value = TensorF(shape);
    le::get_floats(in, t.value.values(), path);
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<NamedTensor> export_params(const ParamStoreF& store, const std::string& prefix) {
  std::vector<NamedTensor> out;
  out.reserve(store.size());
  for (const auto& p : store.all()) out.push_back({prefix + p.name, p.value});
  return out;
}

void import_params(ParamStoreF& store, const std::vector<NamedTensor>& tensors,
                   const std::string& prefix) {
  std::unordered_map<std::string, const TensorF*> by_name;
  for (const auto& t : tensors) by_name.emplace(t.name, &t.value);
  for (auto& p : store.all()) {
    auto it = by_name.find(prefix + p.name);
    if (it == by_name.end()) throw FormatError("checkpoint lacks parameter " + prefix + p.name);
    if (it->second->shape() != p.value.shape()) {
      throw FormatError("checkpoint shape mismatch for " + prefix + p.name);
    }
    p.value = *it->second;
  }
}

}  // namespace nao
