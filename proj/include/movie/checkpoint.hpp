#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "movie/net.hpp"
#include "movie/tensor.hpp"

namespace movie {

// Checkpoint file: magic "MOVIE1\n", one manifest line per tensor
// ("name dtype dim0 dim1 ..."), a blank line, then the raw little-endian
// arrays concatenated in manifest order.

inline constexpr const char* kCheckpointMagic = "MOVIE1\n";

template <class S>
const char* dtype_name();
template <>
inline const char* dtype_name<float>() { return "f32"; }
template <>
inline const char* dtype_name<double>() { return "f64"; }

template <class S>
void save_checkpoint(const std::string& path, const ParamList<S>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << kCheckpointMagic;
  for (const auto& [name, p] : params) {
    out << name << ' ' << dtype_name<S>();
    for (std::size_t d : p.shape()) out << ' ' << d;
    out << '\n';
  }
  out << '\n';
  for (const auto& [name, p] : params)
    out.write(reinterpret_cast<const char*>(p.data().data()),
              std::streamsize(p.size() * sizeof(S)));
  if (!out) throw IoError("write failed for " + path);
}

struct CheckpointEntry {
  std::string name;
  std::string dtype;
  Shape shape;
  std::vector<char> bytes;
};

inline std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "f64") return 8;
  throw ContractError("checkpoint: unknown dtype '" + dtype + "'");
}

inline std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string magic(7, '\0');
  in.read(magic.data(), 7);
  if (!in || magic != kCheckpointMagic)
    throw ContractError("checkpoint: bad magic in " + path);
  std::vector<CheckpointEntry> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) break;
    std::istringstream ls(line);
    CheckpointEntry e;
    if (!(ls >> e.name >> e.dtype))
      throw ContractError("checkpoint: malformed manifest line '" + line + "'");
    dtype_size(e.dtype);
    std::size_t d;
    while (ls >> d) e.shape.push_back(d);
    if (e.shape.empty())
      throw ContractError("checkpoint: missing shape for " + e.name);
    entries.push_back(std::move(e));
  }
  for (auto& e : entries) {
    std::size_t n = numel(e.shape) * dtype_size(e.dtype);
    e.bytes.resize(n);
    in.read(e.bytes.data(), std::streamsize(n));
    if (std::size_t(in.gcount()) != n)
      throw ContractError("checkpoint: truncated data for " + e.name);
  }
  return entries;
}

// Fills an existing parameter list in place; names, dtypes and shapes must
// match the manifest exactly.
template <class S>
void load_checkpoint(const std::string& path, ParamList<S>& params) {
  auto entries = read_checkpoint(path);
  if (entries.size() != params.size())
    throw ContractError("checkpoint: expected " +
                        std::to_string(params.size()) + " tensors, found " +
                        std::to_string(entries.size()));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& e = entries[i];
    auto& [name, p] = params[i];
    if (e.name != name)
      throw ContractError("checkpoint: tensor " + std::to_string(i) +
                          " is '" + e.name + "', expected '" + name + "'");
    if (e.dtype != dtype_name<S>())
      throw ContractError("checkpoint: " + name + " has dtype " + e.dtype +
                          ", expected " + dtype_name<S>());
    if (e.shape != p.shape())
      throw ContractError("checkpoint: " + name + " has shape " +
                          shape_str(e.shape) + ", expected " +
                          shape_str(p.shape()));
    std::copy(reinterpret_cast<const S*>(e.bytes.data()),
              reinterpret_cast<const S*>(e.bytes.data()) + p.size(),
              p.data().begin());
  }
}

}  // namespace movie
