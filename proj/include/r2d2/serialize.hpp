#pragma once

// Little-endian binary encoding used by checkpoints. Doubles are stored as
// their raw IEEE-754 bit patterns so save/load is bit-exact.

#include <Eigen/Core>

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "r2d2/error.hpp"

namespace r2d2::io {

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  void u8(std::uint8_t v) { out_.put(static_cast<char>(v)); }

  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }

  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }

  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  void str(const std::string& s) {
    u64(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

  void vec(const Eigen::VectorXd& v) {
    u64(static_cast<std::uint64_t>(v.size()));
    for (Eigen::Index i = 0; i < v.size(); ++i) f64(v[i]);
  }

  void mat(const Eigen::MatrixXd& m) {
    u64(static_cast<std::uint64_t>(m.rows()));
    u64(static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      for (Eigen::Index r = 0; r < m.rows(); ++r) f64(m(r, c));
  }

  void reals(const std::vector<double>& v) {
    u64(v.size());
    for (double x : v) f64(x);
  }

  /// Section tags make truncated or mismatched files fail loudly on load.
  void tag(const char (&name)[5]) { out_.write(name, 4); }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  std::uint8_t u8() {
    char c;
    if (!in_.get(c)) throw DataError("checkpoint truncated");
    return static_cast<std::uint8_t>(c);
  }

  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(u8()) << (8 * i);
    return v;
  }

  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(u8()) << (8 * i);
    return v;
  }

  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64() { return std::bit_cast<double>(u64()); }

  std::string str() {
    const auto n = checked_size(u64());
    std::string s(n, '\0');
    if (n > 0 && !in_.read(s.data(), static_cast<std::streamsize>(n)))
      throw DataError("checkpoint truncated");
    return s;
  }

  Eigen::VectorXd vec() {
    const auto n = checked_size(u64());
    Eigen::VectorXd v(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = f64();
    return v;
  }

  Eigen::MatrixXd mat() {
    const auto rows = checked_size(u64());
    const auto cols = checked_size(u64());
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = f64();
    return m;
  }

  std::vector<double> reals() {
    const auto n = checked_size(u64());
    std::vector<double> v(n);
    for (auto& x : v) x = f64();
    return v;
  }

  void expect_tag(const char (&name)[5]) {
    char got[4];
    if (!in_.read(got, 4)) throw DataError("checkpoint truncated");
    if (std::memcmp(got, name, 4) != 0)
      throw DataError(std::string("checkpoint section mismatch: expected '") + name + "'");
  }

 private:
  static std::size_t checked_size(std::uint64_t n) {
    if (n > (std::uint64_t{1} << 32)) throw DataError("checkpoint length field out of range");
    return static_cast<std::size_t>(n);
  }

  std::istream& in_;
};

}  // namespace r2d2::io
