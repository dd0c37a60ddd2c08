#pragma once

#include <zlib.h>

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cytosae {

static_assert(std::endian::native == std::endian::little,
              "on-disk formats assume a little-endian host");

// Error categories map onto CLI exit codes.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};
class ConfigError : public Error {
public:
  using Error::Error;
};
class DataError : public Error {
public:
  using Error::Error;
};
class DivergenceError : public Error {
public:
  using Error::Error;
};

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using Rng = std::mt19937_64;

// Distribution helpers written out so results do not depend on the standard
// library's distribution implementations.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform_real(Rng& rng, double lo, double hi) {
  return lo + (hi - lo) * uniform01(rng);
}

inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  // rejection sampling for an unbiased draw in [0, n)
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t r;
  do {
    r = rng();
  } while (r >= limit);
  return r % n;
}

inline double standard_normal(Rng& rng) {
  // Box-Muller; one draw per call keeps the stream position simple
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

template <typename T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(uniform_index(rng, i));
    std::swap(v[i - 1], v[j]);
  }
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::uint32_t crc32_update(std::uint32_t crc, std::span<const std::byte> bytes) {
  // zlib takes uInt lengths; feed large spans in chunks
  const auto* p = reinterpret_cast<const Bytef*>(bytes.data());
  std::size_t left = bytes.size();
  uLong c = crc;
  while (left > 0) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(left, 1u << 30));
    c = ::crc32(c, p, n);
    p += n;
    left -= n;
  }
  return static_cast<std::uint32_t>(c);
}

inline std::uint32_t crc32_of(std::span<const std::byte> bytes) {
  return crc32_update(static_cast<std::uint32_t>(::crc32(0L, Z_NULL, 0)), bytes);
}

inline std::string hex32(std::uint32_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(8) << std::setfill('0') << v;
  return os.str();
}

inline std::uint32_t parse_hex32(const std::string& s) {
  std::size_t used = 0;
  const unsigned long v = std::stoul(s, &used, 16);
  if (used != s.size() || v > 0xFFFFFFFFul) throw DataError("bad checksum string '" + s + "'");
  return static_cast<std::uint32_t>(v);
}

// Little-endian byte sink with the primitive encodings shared by the shard,
// checkpoint, and barcode formats.
class ByteWriter {
public:
  template <typename T>
    requires std::is_arithmetic_v<T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::byte*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void put_bytes(std::span<const std::byte> bytes) {
    buf_.insert(buf_.end(), bytes.begin(), bytes.end());
  }
  void put_string(std::string_view s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    put_bytes(std::as_bytes(std::span(s.data(), s.size())));
  }
  void put_optional_string(const std::optional<std::string>& s) {
    put<std::uint8_t>(s ? 1 : 0);
    if (s) put_string(*s);
  }
  template <typename T>
  void put_array(std::span<const T> values) {
    put_bytes(std::as_bytes(values));
  }

  const std::vector<std::byte>& bytes() const { return buf_; }
  std::size_t size() const { return buf_.size(); }

private:
  std::vector<std::byte> buf_;
};

// Bounds-checked little-endian reader over a borrowed byte range. Running off
// the end raises `Truncated`, which callers translate into a format-specific
// message.
class ByteReader {
public:
  struct Truncated : DataError {
    Truncated() : DataError("unexpected end of data") {}
  };

  explicit ByteReader(std::span<const std::byte> data) : data_(data) {}

  template <typename T>
    requires std::is_arithmetic_v<T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::span<const std::byte> get_bytes(std::size_t n) {
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    auto b = get_bytes(n);
    return std::string(reinterpret_cast<const char*>(b.data()), b.size());
  }
  std::optional<std::string> get_optional_string() {
    const auto flag = get<std::uint8_t>();
    if (flag > 1) throw DataError("bad optional-string flag");
    if (flag == 0) return std::nullopt;
    return get_string();
  }
  template <typename T>
  void get_array(std::span<T> out) {
    auto b = get_bytes(out.size_bytes());
    std::memcpy(out.data(), b.data(), b.size());
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

private:
  void need(std::size_t n) const {
    if (n > data_.size() - pos_) throw Truncated();
  }
  std::span<const std::byte> data_;
  std::size_t pos_ = 0;
};

inline std::vector<std::byte> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw DataError("cannot open '" + path + "'");
  const auto size = static_cast<std::size_t>(in.tellg());
  std::vector<std::byte> buf(size);
  in.seekg(0);
  if (size > 0 && !in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(size)))
    throw DataError("failed reading '" + path + "'");
  return buf;
}

inline void write_file_bytes(const std::string& path, std::span<const std::byte> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing '" + path + "'");
}

inline std::string read_text_file(const std::string& path) {
  const auto b = read_file_bytes(path);
  return std::string(reinterpret_cast<const char*>(b.data()), b.size());
}

inline void write_text_file(const std::string& path, std::string_view text) {
  write_file_bytes(path, std::as_bytes(std::span(text.data(), text.size())));
}

// Shortest decimal that round-trips a double; keeps CSV output byte-stable.
inline std::string format_real(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os.imbue(std::locale::classic());
  os << std::setprecision(17) << v;
  for (int p = 6; p < 17; ++p) {
    std::ostringstream t;
    t.imbue(std::locale::classic());
    t << std::setprecision(p) << v;
    if (std::stod(t.str()) == v) return t.str();
  }
  return os.str();
}

}  // namespace cytosae
