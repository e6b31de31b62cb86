#pragma once

// File formats:
//   QTN1 tensor container  "QTN1" | u32 count | { u16 name_len, name, u8 ndim, u64 dims[ndim], f64 data[] }*
//                          all integers and doubles little-endian, data row-major
//   PGM (P5, 8-bit)        masks and min-max scaled maps
//   flat config            key = value lines, '#' starts a comment

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "qrunc/tensor.hpp"

namespace qrunc::io {

class FormatError : public Error {
 public:
  using Error::Error;
};

/// Bad or unknown configuration; the CLI maps it to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline constexpr char kMagic[4] = {'Q', 'T', 'N', '1'};

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                               std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                  std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
  const U u = std::bit_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  explicit Reader(std::string_view buf) : buf_(buf) {}

  template <class T>
  T get() {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                    std::conditional_t<sizeof(T) == 2, std::uint16_t, std::uint8_t>>>;
    need(sizeof(T));
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<U>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return std::bit_cast<T>(u);
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string s(buf_.substr(pos_, n));
    pos_ += n;
    return s;
  }

  bool done() const noexcept { return pos_ == buf_.size(); }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw FormatError("truncated tensor container");
  }
  std::string_view buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_container(const NamedTensors& records) {
  std::set<std::string> names;
  std::string out(kMagic, 4);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& [name, t] : records) {
    if (name.size() > 0xFFFF || t.rank() > 0xFF) throw FormatError("record name or rank too large");
    if (!names.insert(name).second) throw FormatError("duplicate record name '" + name + "'");
    for (char c : name)
      if (static_cast<unsigned char>(c) > 0x7F) throw FormatError("record names must be ASCII");
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) detail::put_le<std::uint64_t>(out, d);
    for (double v : t.data()) detail::put_le<double>(out, v);
  }
  return out;
}

inline NamedTensors decode_container(std::string_view buf) {
  if (buf.size() < 4 || std::memcmp(buf.data(), kMagic, 4) != 0) throw FormatError("not a QTN1 tensor container (bad magic)");
  detail::Reader r(buf.substr(4));
  const auto count = r.get<std::uint32_t>();
  NamedTensors out;
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>();
    std::string name = r.bytes(len);
    if (!names.insert(name).second) throw FormatError("duplicate record name '" + name + "'");
    const auto ndim = r.get<std::uint8_t>();
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    const std::size_t n = shape_size(shape);
    if (n > (std::size_t{1} << 40)) throw FormatError("record too large");
    std::vector<double> data(n);
    for (auto& v : data) v = r.get<double>();
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (!r.done()) throw FormatError("trailing bytes after last record");
  return out;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw Error("cannot open '" + p.string() + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, std::string_view bytes) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write '" + p.string() + "'");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write failed for '" + p.string() + "'");
}

inline void save_tensors(const std::filesystem::path& p, const NamedTensors& records) {
  write_file(p, encode_container(records));
}

inline NamedTensors load_tensors(const std::filesystem::path& p) { return decode_container(read_file(p)); }

inline const Tensor& find(const NamedTensors& records, std::string_view name) {
  for (const auto& [n, t] : records)
    if (n == name) return t;
  throw FormatError("record '" + std::string(name) + "' not found");
}

inline bool contains(const NamedTensors& records, std::string_view name) {
  return std::any_of(records.begin(), records.end(), [&](const auto& r) { return r.first == name; });
}

// ---------------------------------------------------------------------------
// PGM

struct PgmScale {
  double min = 0, max = 1;
};

/// 8-bit binary PGM of an (H, W) plane (leading unit axes allowed). Values are
/// mapped linearly from [scale.min, scale.max] to [0, 255].
inline std::string encode_pgm(const Tensor& img, PgmScale scale = {}) {
  if (img.rank() < 2) throw ShapeError("PGM needs a 2D image");
  const std::size_t H = img.dim(img.rank() - 2), W = img.dim(img.rank() - 1);
  if (H * W != img.size()) throw ShapeError("PGM needs a single plane");
  std::string out = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  const double range = scale.max > scale.min ? scale.max - scale.min : 1.0;
  for (double v : img.data()) {
    const double u = std::clamp((v - scale.min) / range, 0.0, 1.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(u * 255.0))));
  }
  return out;
}

inline PgmScale minmax_scale(const Tensor& img) {
  if (img.empty()) return {};
  const auto [mn, mx] = std::minmax_element(img.data().begin(), img.data().end());
  return {*mn, *mx};
}

/// Raw 8-bit samples and dimensions of a P5 PGM.
inline Tensor decode_pgm(std::string_view buf) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < buf.size()) {
      if (buf[pos] == '#') {
        while (pos < buf.size() && buf[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(buf[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < buf.size() && !std::isspace(static_cast<unsigned char>(buf[pos]))) ++pos;
    return std::string(buf.substr(start, pos - start));
  };
  if (token() != "P5") throw FormatError("not a binary PGM");
  const std::size_t W = std::stoul(token()), H = std::stoul(token());
  if (std::stoul(token()) != 255) throw FormatError("only 8-bit PGM supported");
  ++pos;
  if (buf.size() - pos != W * H) throw FormatError("PGM payload size mismatch");
  Tensor t({H, W});
  for (std::size_t i = 0; i < W * H; ++i) t[i] = static_cast<unsigned char>(buf[pos + i]);
  return t;
}

// ---------------------------------------------------------------------------
// Flat key = value configuration

class Config {
 public:
  static Config parse(std::string_view text) {
    Config c;
    std::size_t line_no = 0;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
      std::string key = trim(t.substr(0, eq)), value = trim(t.substr(eq + 1));
      if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
      if (!c.values_.emplace(key, value).second) throw ConfigError("duplicate config key '" + key + "'");
    }
    return c;
  }

  static Config load(const std::filesystem::path& p) {
    try {
      return parse(read_file(p));
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
  }

  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::map<std::string, std::string>& values() const noexcept { return values_; }

  /// Rejects any key outside `allowed`.
  void check_known(const std::set<std::string>& allowed) const {
    for (const auto& [k, v] : values_)
      if (!allowed.count(k)) throw ConfigError("unknown config key '" + k + "'");
  }

  std::string str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing required config key '" + key + "'");
    return it->second;
  }
  std::string str(const std::string& key, const std::string& def) const { return has(key) ? str(key) : def; }

  double num(const std::string& key) const { return to_double(key, str(key)); }
  double num(const std::string& key, double def) const { return has(key) ? num(key) : def; }

  std::uint64_t uint(const std::string& key) const { return to_uint(key, str(key)); }
  std::uint64_t uint(const std::string& key, std::uint64_t def) const { return has(key) ? uint(key) : def; }

  bool flag(const std::string& key, bool def) const {
    if (!has(key)) return def;
    const std::string v = str(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + key + "' expects a boolean, got '" + v + "'");
  }

  std::vector<double> nums(const std::string& key, std::vector<double> def) const {
    if (!has(key)) return def;
    std::vector<double> out;
    std::string item;
    std::istringstream in(str(key));
    while (std::getline(in, item, ',')) out.push_back(to_double(key, trim(item)));
    return out;
  }

  /// Resolved configuration, one sorted "key = value" line each.
  std::string echo() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
  }
  static double to_double(const std::string& key, const std::string& v) {
    try {
      std::size_t used = 0;
      const double d = std::stod(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
    }
  }
  static std::uint64_t to_uint(const std::string& key, const std::string& v) {
    try {
      std::size_t used = 0;
      if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
      const auto d = std::stoull(v, &used);
      if (used != v.size()) throw std::invalid_argument(v);
      return d;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + v + "'");
    }
  }

  std::map<std::string, std::string> values_;
};

}  // namespace qrunc::io
