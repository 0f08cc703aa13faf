#pragma once

#include "uqaug/common.hpp"

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

namespace uqaug::binio {

template <typename T>
  requires std::is_trivially_copyable_v<T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
  requires std::is_trivially_copyable_v<T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError("unexpected end of binary stream");
  return v;
}

inline void put_string(std::ostream& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& in) {
  const auto n = get<std::uint64_t>(in);
  if (n > (1u << 30)) throw IoError("binary stream: string too long");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw IoError("unexpected end of binary stream");
  return s;
}

template <typename Scalar>
void put_vec(std::ostream& out, const Vec<Scalar>& v) {
  put<std::uint64_t>(out, static_cast<std::uint64_t>(v.size()));
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(sizeof(Scalar) * static_cast<std::size_t>(v.size())));
}

template <typename Scalar>
Vec<Scalar> get_vec(std::istream& in) {
  const auto n = get<std::uint64_t>(in);
  if (n > (1ull << 34)) throw IoError("binary stream: vector too long");
  Vec<Scalar> v(static_cast<Eigen::Index>(n));
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(sizeof(Scalar) * static_cast<std::size_t>(n)));
  if (!in) throw IoError("unexpected end of binary stream");
  return v;
}

inline void expect_magic(std::istream& in, const char (&magic)[5]) {
  char buf[4];
  in.read(buf, 4);
  if (!in || std::string(buf, 4) != std::string(magic, 4)) {
    throw IoError(std::string("binary stream: expected magic ") + magic);
  }
}

}  // namespace uqaug::binio
