#pragma once

// Checkpoint file:
//   "MVDCKPT" u8 version
//   u64 config length, config text (key = value lines)
//   u64 tensor count
//   per tensor: u32 name length, name, u64 rows, u64 cols, u64 element count,
//               little-endian float32 values, column-major
// All integers little-endian.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "mvdiff/config.hpp"
#include "mvdiff/error.hpp"
#include "mvdiff/nn/denoiser.hpp"

namespace mvdiff {

inline constexpr char checkpoint_magic[7] = {'M', 'V', 'D', 'C', 'K', 'P', 'T'};
inline constexpr std::uint8_t checkpoint_version = 1;

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(const std::string& data, std::string path) : data_(data), path_(std::move(path)) {}
  std::uint64_t u64() { return uint(8); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint8_t u8() { return static_cast<std::uint8_t>(uint(1)); }
  std::string bytes(std::uint64_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  float f32() {
    const auto bits = static_cast<std::uint32_t>(uint(4));
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::uint64_t uint(int n) {
    need(n);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += n;
    return v;
  }
  void need(std::uint64_t n) const {
    if (n > data_.size() - pos_) throw IoError(path_, "checkpoint truncated");
  }
  const std::string& data_;
  std::string path_;
  size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const nn::Parameters<float>& params, const KeyValues& meta) {
  KeyValues kv = meta;
  params.config.write(kv);
  const std::string text = kv.str();
  std::string out(checkpoint_magic, sizeof checkpoint_magic);
  out.push_back(static_cast<char>(checkpoint_version));
  detail::put_u64(out, text.size());
  out += text;
  detail::put_u64(out, params.size());
  for (const auto& p : params) {
    detail::put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    detail::put_u64(out, static_cast<std::uint64_t>(p.value.rows()));
    detail::put_u64(out, static_cast<std::uint64_t>(p.value.cols()));
    detail::put_u64(out, static_cast<std::uint64_t>(p.value.size()));
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      std::uint32_t bits;
      const float f = p.value.data()[i];
      std::memcpy(&bits, &f, 4);
      detail::put_u32(out, bits);
    }
  }
  return out;
}

inline void save_checkpoint(const std::string& path, const nn::Parameters<float>& params,
                            const KeyValues& meta = {}) {
  const std::string bytes = encode_checkpoint(params, meta);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path, "cannot open checkpoint for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(path, "checkpoint write failed");
}

struct Checkpoint {
  nn::Parameters<float> params;
  KeyValues meta;  // everything in the embedded config, network keys included
};

inline Checkpoint decode_checkpoint(const std::string& data, const std::string& path = "<memory>") {
  detail::Reader r(data, path);
  if (r.bytes(sizeof checkpoint_magic) != std::string(checkpoint_magic, sizeof checkpoint_magic))
    throw IoError(path, "not a checkpoint file");
  if (const auto v = r.u8(); v != checkpoint_version)
    throw IoError(path, "unsupported checkpoint version " + std::to_string(v));
  Checkpoint ck;
  ck.meta = KeyValues::parse_string(r.bytes(r.u64()), path);
  const auto cfg = nn::NetworkConfig::read(ck.meta);
  ck.params = nn::build_parameters<float>(cfg);
  const auto count = r.u64();
  if (count != ck.params.size())
    throw IoError(path, "checkpoint has " + std::to_string(count) + " tensors, network expects " +
                            std::to_string(ck.params.size()));
  for (std::uint64_t k = 0; k < count; ++k) {
    const std::string name = r.bytes(r.u32());
    const int i = ck.params.find(name);
    if (i < 0) throw IoError(path, "unexpected tensor '" + name + "'");
    auto& value = ck.params[i].value;
    const auto rows = r.u64(), cols = r.u64(), n = r.u64();
    if (rows != static_cast<std::uint64_t>(value.rows()) || cols != static_cast<std::uint64_t>(value.cols()) ||
        n != rows * cols)
      throw IoError(path, "tensor '" + name + "' has the wrong shape");
    for (std::uint64_t j = 0; j < n; ++j) value.data()[j] = r.f32();
  }
  if (!r.done()) throw IoError(path, "trailing bytes after tensor table");
  return ck;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open file");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(read_file(path), path); }

/// FNV-1a over the file contents, as 16 hex digits.
inline std::string file_hash(const std::string& path) {
  const std::string data = read_file(path);
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_name(data)));
  return buf;
}

}  // namespace mvdiff
