#include "uqaug/arr_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace uqaug {
namespace {

static_assert(std::endian::native == std::endian::little,
              "array IO assumes a little-endian host");

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::vector<std::uint8_t> header(ArrDType dtype, Eigen::Index rows, Eigen::Index cols) {
  std::vector<std::uint8_t> out{'U', 'Q', 'A', 'R', kArrVersion, static_cast<std::uint8_t>(dtype)};
  put_u32(out, static_cast<std::uint32_t>(rows));
  put_u32(out, static_cast<std::uint32_t>(cols));
  return out;
}

struct Header {
  ArrDType dtype;
  std::uint32_t height;
  std::uint32_t width;
};

Header parse_header(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kArrHeaderSize || std::memcmp(bytes.data(), "UQAR", 4) != 0) {
    throw IoError("arr: bad magic");
  }
  if (bytes[4] != kArrVersion) throw IoError("arr: unsupported version " + std::to_string(bytes[4]));
  if (bytes[5] > 1) throw IoError("arr: unknown dtype code " + std::to_string(bytes[5]));
  Header h{static_cast<ArrDType>(bytes[5]), get_u32(bytes.data() + 6), get_u32(bytes.data() + 10)};
  const std::size_t elem = h.dtype == ArrDType::Float32 ? 4 : 1;
  if (bytes.size() != kArrHeaderSize + elem * std::size_t{h.height} * h.width) {
    throw IoError("arr: payload size does not match header");
  }
  return h;
}

}  // namespace

std::vector<std::uint8_t> encode_arr(const FloatMap& m) {
  auto out = header(ArrDType::Float32, m.rows(), m.cols());
  const auto n = static_cast<std::size_t>(m.size()) * sizeof(float);
  out.resize(kArrHeaderSize + n);
  std::memcpy(out.data() + kArrHeaderSize, m.data(), n);
  return out;
}

std::vector<std::uint8_t> encode_arr(const ByteMap& m) {
  auto out = header(ArrDType::UInt8, m.rows(), m.cols());
  out.insert(out.end(), m.data(), m.data() + m.size());
  return out;
}

ArrDType peek_arr_dtype(const std::vector<std::uint8_t>& bytes) { return parse_header(bytes).dtype; }

FloatMap decode_arr_float(const std::vector<std::uint8_t>& bytes) {
  const Header h = parse_header(bytes);
  FloatMap m(h.height, h.width);
  if (h.dtype == ArrDType::Float32) {
    std::memcpy(m.data(), bytes.data() + kArrHeaderSize, static_cast<std::size_t>(m.size()) * 4);
  } else {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = bytes[kArrHeaderSize + i];
  }
  return m;
}

ByteMap decode_arr_bytes(const std::vector<std::uint8_t>& bytes) {
  const Header h = parse_header(bytes);
  if (h.dtype != ArrDType::UInt8) throw IoError("arr: expected uint8 payload");
  ByteMap m(h.height, h.width);
  std::memcpy(m.data(), bytes.data() + kArrHeaderSize, static_cast<std::size_t>(m.size()));
  return m;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::string read_text_file(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return {bytes.begin(), bytes.end()};
}

void write_arr(const std::filesystem::path& path, const FloatMap& m) { write_file_bytes(path, encode_arr(m)); }
void write_arr(const std::filesystem::path& path, const ByteMap& m) { write_file_bytes(path, encode_arr(m)); }
FloatMap read_arr_float(const std::filesystem::path& path) { return decode_arr_float(read_file_bytes(path)); }
ByteMap read_arr_bytes(const std::filesystem::path& path) { return decode_arr_bytes(read_file_bytes(path)); }

}  // namespace uqaug
