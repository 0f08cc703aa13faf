#pragma once

#include "uqaug/common.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace uqaug {

// ".arr" container: "UQAR", u8 version (1), u8 dtype, u32 LE height, u32 LE width,
// then the row-major payload (float32 LE or uint8).
enum class ArrDType : std::uint8_t { Float32 = 0, UInt8 = 1 };

inline constexpr std::uint8_t kArrVersion = 1;
inline constexpr std::size_t kArrHeaderSize = 14;

std::vector<std::uint8_t> encode_arr(const FloatMap& m);
std::vector<std::uint8_t> encode_arr(const ByteMap& m);

ArrDType peek_arr_dtype(const std::vector<std::uint8_t>& bytes);
FloatMap decode_arr_float(const std::vector<std::uint8_t>& bytes);
ByteMap decode_arr_bytes(const std::vector<std::uint8_t>& bytes);

void write_arr(const std::filesystem::path& path, const FloatMap& m);
void write_arr(const std::filesystem::path& path, const ByteMap& m);
FloatMap read_arr_float(const std::filesystem::path& path);
ByteMap read_arr_bytes(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace uqaug
