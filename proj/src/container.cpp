#include "container.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

#include "deltacomp/error.hpp"
#include "deltacomp/half.hpp"

namespace deltacomp::detail {

namespace {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  std::uint8_t raw[sizeof(T)];
  std::memcpy(raw, &value, sizeof(T));
  out.insert(out.end(), raw, raw + sizeof(T));
}

template <typename T>
T get_le(const std::uint8_t* p) {
  T value;
  std::memcpy(&value, p, sizeof(T));
  return value;
}

}  // namespace

std::size_t padded_header_length(std::size_t json_length) noexcept {
  return align_up(kPreambleBytes + json_length) - kPreambleBytes;
}

std::vector<std::uint8_t> frame(std::string_view magic, std::uint32_t version, std::string header,
                                std::span<const std::uint8_t> payload) {
  header.resize(padded_header_length(header.size()), ' ');
  std::vector<std::uint8_t> out;
  out.reserve(kPreambleBytes + header.size() + payload.size());
  out.insert(out.end(), magic.begin(), magic.end());
  put_le<std::uint32_t>(out, version);
  put_le<std::uint64_t>(out, header.size());
  out.insert(out.end(), header.begin(), header.end());
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

Unframed unframe(std::span<const std::uint8_t> bytes, std::string_view magic, std::uint32_t version) {
  if (bytes.size() < kPreambleBytes) {
    throw Error(ErrorCode::Truncated, "file shorter than the " + std::to_string(kPreambleBytes) + "-byte preamble");
  }
  if (std::memcmp(bytes.data(), magic.data(), 4) != 0) {
    throw Error(ErrorCode::BadMagic, "expected magic " + std::string(magic));
  }
  const auto found_version = get_le<std::uint32_t>(bytes.data() + 4);
  if (found_version != version) {
    throw Error(ErrorCode::BadVersion, "unsupported version " + std::to_string(found_version));
  }
  const auto header_length = get_le<std::uint64_t>(bytes.data() + 8);
  if (header_length > bytes.size() - kPreambleBytes) {
    throw Error(ErrorCode::Truncated, "header extends past end of file");
  }
  Unframed result;
  result.header.assign(reinterpret_cast<const char*>(bytes.data() + kPreambleBytes), header_length);
  result.payload = bytes.subspan(kPreambleBytes + header_length);
  return result;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorCode::Io, "read failed for " + path.string());
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::Io, "write failed for " + path.string());
}

std::size_t PayloadWriter::append(std::span<const std::uint8_t> bytes) {
  const std::size_t offset = align_up(bytes_.size());
  bytes_.resize(offset, 0);
  bytes_.insert(bytes_.end(), bytes.begin(), bytes.end());
  return offset;
}

std::size_t PayloadWriter::append_f32(std::span<const float> values) {
  return append({reinterpret_cast<const std::uint8_t*>(values.data()), values.size_bytes()});
}

std::size_t PayloadWriter::append_f16(std::span<const float> values) {
  std::vector<std::uint16_t> halves(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) halves[i] = float_to_half(values[i]);
  return append({reinterpret_cast<const std::uint8_t*>(halves.data()), halves.size() * 2});
}

std::size_t PayloadWriter::append_f16(std::span<const double> values) {
  std::vector<std::uint16_t> halves(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) halves[i] = float_to_half(static_cast<float>(values[i]));
  return append({reinterpret_cast<const std::uint8_t*>(halves.data()), halves.size() * 2});
}

std::span<const std::uint8_t> PayloadReader::slice(std::size_t offset, std::size_t length) const {
  if (offset > payload_.size() || length > payload_.size() - offset) {
    throw Error(ErrorCode::Truncated, "payload section [" + std::to_string(offset) + ", +" +
                                          std::to_string(length) + ") past end of " +
                                          std::to_string(payload_.size()) + "-byte payload");
  }
  return payload_.subspan(offset, length);
}

std::vector<float> PayloadReader::read_f32(std::size_t offset, std::size_t count) const {
  auto bytes = slice(offset, count * 4);
  std::vector<float> out(count);
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

std::vector<float> PayloadReader::read_f16(std::size_t offset, std::size_t count) const {
  auto bytes = slice(offset, count * 2);
  std::vector<float> out(count);
  for (std::size_t i = 0; i < count; ++i) out[i] = half_to_float(get_le<std::uint16_t>(bytes.data() + 2 * i));
  return out;
}

}  // namespace deltacomp::detail
