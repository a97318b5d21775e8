#pragma once

// Framing shared by the checkpoint and package formats:
//   magic[4] | version u32 LE | header length u64 LE | JSON header | payload
// The header is space-padded so the payload starts 64-byte aligned, and every
// payload section starts at a 64-byte aligned offset from the payload start.

#include <bit>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace deltacomp::detail {

static_assert(std::endian::native == std::endian::little, "payload encoding assumes a little-endian host");

inline constexpr std::size_t kAlignment = 64;
inline constexpr std::size_t kPreambleBytes = 16;

constexpr std::size_t align_up(std::size_t n) noexcept { return (n + kAlignment - 1) / kAlignment * kAlignment; }

std::vector<std::uint8_t> frame(std::string_view magic, std::uint32_t version, std::string header,
                                std::span<const std::uint8_t> payload);

struct Unframed {
  std::string header;
  std::span<const std::uint8_t> payload;
};

/// Validates magic, version and lengths. The payload span aliases `bytes`.
Unframed unframe(std::span<const std::uint8_t> bytes, std::string_view magic, std::uint32_t version);

/// Size of the framed header for a JSON text of the given length.
std::size_t padded_header_length(std::size_t json_length) noexcept;

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

class PayloadWriter {
 public:
  /// Appends raw bytes at the next aligned offset and returns that offset.
  std::size_t append(std::span<const std::uint8_t> bytes);
  std::size_t append_f32(std::span<const float> values);
  /// Values are encoded as binary16; they must already be representable.
  std::size_t append_f16(std::span<const float> values);
  std::size_t append_f16(std::span<const double> values);

  const std::vector<std::uint8_t>& bytes() const noexcept { return bytes_; }
  std::vector<std::uint8_t> release() noexcept { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class PayloadReader {
 public:
  explicit PayloadReader(std::span<const std::uint8_t> payload) : payload_(payload) {}

  std::span<const std::uint8_t> slice(std::size_t offset, std::size_t length) const;
  std::vector<float> read_f32(std::size_t offset, std::size_t count) const;
  std::vector<float> read_f16(std::size_t offset, std::size_t count) const;

 private:
  std::span<const std::uint8_t> payload_;
};

}  // namespace deltacomp::detail
