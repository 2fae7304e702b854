#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fdnm/tensor.hpp"

namespace fdnm {

/// Ordered name -> Tensor table. Iteration follows insertion order.
class TensorTable {
 public:
  void add(const std::string& name, const Tensor& t) {
    if (name.empty() || name.find_first_of(" \t\r\n") != std::string::npos) {
      throw Error("tensor table: invalid name '" + name + "'");
    }
    if (index_.count(name)) throw Error("tensor table: duplicate name '" + name + "'");
    index_[name] = entries_.size();
    entries_.emplace_back(name, t);
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const Tensor& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("tensor table: no entry '" + name + "'");
    return entries_[it->second].second;
  }

  std::size_t size() const { return entries_.size(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::size_t total_numel() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Learnable tensors; every entry requires grad.
class ParamStore : public TensorTable {
 public:
  void add(const std::string& name, const Tensor& t) {
    if (!t.requires_grad()) throw Error("param store: '" + name + "' does not require grad");
    TensorTable::add(name, t);
  }

  void zero_grad() {
    for (const auto& [name, t] : *this) {
      Tensor h = t;
      h.zero_grad();
    }
  }
};

// ---------------------------------------------------------------------------
// FDNM1 container: "FDNM1\n", then one "name d0 d1 ...\n" line per entry,
// a blank line, then little-endian float32 payloads in header order.

inline constexpr char kFdnmMagic[] = "FDNM1\n";

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

namespace detail {

inline void put_f32(std::string& out, float f) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  char buf[4];
  std::memcpy(buf, &bits, 4);
  out.append(buf, 4);
}

inline float get_f32(const char* p) {
  std::uint32_t bits;
  std::memcpy(&bits, p, 4);
  if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
  return std::bit_cast<float>(bits);
}

}  // namespace detail

inline std::string encode_fdnm1(const std::vector<NamedArray>& arrays) {
  std::string out = kFdnmMagic;
  for (const auto& a : arrays) {
    if (a.name.empty() || a.name.find_first_of(" \t\r\n") != std::string::npos) {
      throw Error("fdnm1: invalid entry name '" + a.name + "'");
    }
    if (shape_numel(a.shape) != a.values.size()) throw Error("fdnm1: entry '" + a.name + "' size mismatch");
    out += a.name;
    for (std::size_t d : a.shape) out += " " + std::to_string(d);
    out += "\n";
  }
  out += "\n";
  for (const auto& a : arrays) {
    for (double v : a.values) detail::put_f32(out, static_cast<float>(v));
  }
  return out;
}

inline std::vector<NamedArray> decode_fdnm1(const std::string& bytes, const std::string& origin = "<memory>") {
  const std::string magic = kFdnmMagic;
  if (bytes.compare(0, magic.size(), magic) != 0) throw Error(origin + ": missing FDNM1 magic at byte 0");
  std::size_t pos = magic.size();
  std::vector<NamedArray> arrays;
  while (true) {
    const std::size_t eol = bytes.find('\n', pos);
    if (eol == std::string::npos) throw Error(origin + ": unterminated header at byte " + std::to_string(pos));
    std::string line = bytes.substr(pos, eol - pos);
    pos = eol + 1;
    if (line.empty()) break;
    std::istringstream is(line);
    NamedArray a;
    is >> a.name;
    std::size_t d;
    while (is >> d) a.shape.push_back(d);
    if (!is.eof() || a.shape.empty()) throw Error(origin + ": malformed header line '" + line + "'");
    arrays.push_back(std::move(a));
  }
  for (auto& a : arrays) {
    const std::size_t n = shape_numel(a.shape);
    if (pos + 4 * n > bytes.size()) {
      throw Error(origin + ": payload for '" + a.name + "' truncated at byte " + std::to_string(bytes.size()));
    }
    a.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) a.values[i] = detail::get_f32(bytes.data() + pos + 4 * i);
    pos += 4 * n;
  }
  if (pos != bytes.size()) throw Error(origin + ": trailing bytes after payload at byte " + std::to_string(pos));
  return arrays;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write failed for '" + path + "'");
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline std::vector<NamedArray> to_arrays(const TensorTable& table, const std::string& prefix = "") {
  std::vector<NamedArray> out;
  for (const auto& [name, t] : table) out.push_back({prefix + name, t.shape(), {t.values().begin(), t.values().end()}});
  return out;
}

/// Copies matching arrays into the table's tensors in place; every table entry
/// must be present with the same shape.
inline void assign_from(const TensorTable& table, const std::vector<NamedArray>& arrays, const std::string& prefix = "") {
  std::unordered_map<std::string, const NamedArray*> by_name;
  for (const auto& a : arrays) by_name[a.name] = &a;
  for (const auto& [name, t] : table) {
    auto it = by_name.find(prefix + name);
    if (it == by_name.end()) throw Error("checkpoint: missing entry '" + prefix + name + "'");
    if (it->second->shape != t.shape()) {
      throw Error("checkpoint: entry '" + prefix + name + "' has shape " + shape_str(it->second->shape) +
                  ", expected " + shape_str(t.shape()));
    }
    Tensor h = t;
    std::copy(it->second->values.begin(), it->second->values.end(), h.values_mut().begin());
  }
}

inline void save_table(const TensorTable& table, const std::string& path) { write_file(path, encode_fdnm1(to_arrays(table))); }

inline void load_table(const TensorTable& table, const std::string& path) {
  assign_from(table, decode_fdnm1(read_file(path), path));
}

/// Rounds every value to float32 precision, matching what FDNM1 stores.
inline void round_to_f32(const TensorTable& table) {
  for (const auto& [name, t] : table) {
    Tensor h = t;
    for (double& v : h.values_mut()) v = static_cast<double>(static_cast<float>(v));
  }
}

}  // namespace fdnm
