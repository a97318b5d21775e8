// DCOM package serialization.
//
// Payload sections, each starting at a 64-byte aligned offset, in order:
//   per compressed entry: sigma (rank × f16), then per group
//     bits 2/3/4/8: U scales, U zeros, V scales, V zeros, U codes, V codes
//     bits 1:       U scale, V scale, U codes, V codes
//     bits 16:      U slice (h_out × w f16), Vᵀ slice (w × h_in f16)
//   per raw entry: values (rows × cols f16)
// Scales and zeros are row-major over (row, group); codes are LSB-first.

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "container.hpp"
#include "deltacomp/error.hpp"
#include "deltacomp/hash.hpp"
#include "deltacomp/pipeline.hpp"

namespace deltacomp {

namespace {

constexpr std::string_view kMagic = "DCOM";
constexpr std::uint32_t kVersion = 1;

using Json = nlohmann::ordered_json;

std::size_t group_count(std::size_t cols, std::size_t group_size) { return (cols + group_size - 1) / group_size; }

Json write_compressed(detail::PayloadWriter& w, const CompressedMatrix& cm) {
  Json entry;
  entry["kind"] = "lowrank";
  entry["h_out"] = cm.h_out;
  entry["h_in"] = cm.h_in;
  entry["rank"] = cm.sigma.size();
  entry["group_size"] = cm.group_size;
  entry["sigma_offset"] = w.append_f16(std::span<const float>(cm.sigma));
  entry["groups"] = Json::array();
  for (const auto& g : cm.groups) {
    Json jg;
    jg["bits"] = g.range.bits;
    jg["r_begin"] = g.range.r_begin;
    jg["r_end"] = g.range.r_end;
    if (const auto* half = std::get_if<HalfFactors>(&g.factors)) {
      jg["group_size"] = 0;
      jg["u_offset"] = w.append_f16(half->u.data());
      jg["v_offset"] = w.append_f16(half->vt.data());
    } else {
      const auto& q = std::get<QuantizedFactors>(g.factors);
      jg["group_size"] = q.u.group_size;
      jg["u_scales_offset"] = w.append_f16(std::span<const double>(q.u.scales));
      if (g.range.bits != 1) jg["u_zeros_offset"] = w.append_f16(std::span<const double>(q.u.zeros));
      jg["v_scales_offset"] = w.append_f16(std::span<const double>(q.vt.scales));
      if (g.range.bits != 1) jg["v_zeros_offset"] = w.append_f16(std::span<const double>(q.vt.zeros));
      jg["u_codes_offset"] = w.append(q.u.codes);
      jg["v_codes_offset"] = w.append(q.vt.codes);
    }
    entry["groups"].push_back(std::move(jg));
  }
  return entry;
}

std::vector<double> read_params(const detail::PayloadReader& r, const Json& j, const char* key, std::size_t count) {
  const auto values = r.read_f16(j.at(key).get<std::size_t>(), count);
  return {values.begin(), values.end()};
}

QuantizedTensor read_quantized(const detail::PayloadReader& r, const Json& jg, bool left, std::size_t rows,
                               std::size_t cols) {
  QuantizedTensor q;
  q.rows = rows;
  q.cols = cols;
  q.bits = jg.at("bits").get<unsigned>();
  const char* scales_key = left ? "u_scales_offset" : "v_scales_offset";
  const char* zeros_key = left ? "u_zeros_offset" : "v_zeros_offset";
  const char* codes_key = left ? "u_codes_offset" : "v_codes_offset";
  if (q.bits == 1) {
    q.group_size = 0;
    q.scales = read_params(r, jg, scales_key, 1);
  } else {
    q.group_size = jg.at("group_size").get<std::size_t>();
    if (q.group_size == 0) throw Error(ErrorCode::CorruptData, "group_size is zero");
    const std::size_t count = rows * group_count(cols, q.group_size);
    q.scales = read_params(r, jg, scales_key, count);
    q.zeros = read_params(r, jg, zeros_key, count);
  }
  const auto codes = r.slice(jg.at(codes_key).get<std::size_t>(), packed_size(rows * cols, q.bits));
  q.codes.assign(codes.begin(), codes.end());
  validate(q);
  return q;
}

CompressedMatrix read_compressed(const detail::PayloadReader& r, const Json& entry, double alpha) {
  CompressedMatrix cm;
  cm.h_out = entry.at("h_out").get<std::size_t>();
  cm.h_in = entry.at("h_in").get<std::size_t>();
  cm.group_size = entry.at("group_size").get<std::size_t>();
  cm.schedule.alpha = alpha;
  const auto rank = entry.at("rank").get<std::size_t>();
  cm.sigma = r.read_f16(entry.at("sigma_offset").get<std::size_t>(), rank);
  for (const auto& jg : entry.at("groups")) {
    const PrecisionGroup range{jg.at("bits").get<unsigned>(), jg.at("r_begin").get<std::size_t>(),
                               jg.at("r_end").get<std::size_t>()};
    if (range.r_end < range.r_begin || range.r_end > rank) throw Error(ErrorCode::CorruptData, "bad group rank range");
    const std::size_t w = range.width();
    FactorGroup g{range, HalfFactors{}};
    if (range.bits == 16) {
      g.factors = HalfFactors{Matrix(cm.h_out, w, r.read_f16(jg.at("u_offset").get<std::size_t>(), cm.h_out * w)),
                              Matrix(w, cm.h_in, r.read_f16(jg.at("v_offset").get<std::size_t>(), w * cm.h_in))};
    } else if (is_quantizer_bits(range.bits)) {
      g.factors = QuantizedFactors{read_quantized(r, jg, true, cm.h_out, w), read_quantized(r, jg, false, w, cm.h_in)};
    } else {
      throw Error(ErrorCode::CorruptData, "unsupported group bit width " + std::to_string(range.bits));
    }
    cm.schedule.groups.push_back(range);
    cm.groups.push_back(std::move(g));
  }
  if (cm.schedule.total_ranks() != rank) throw Error(ErrorCode::CorruptData, "group ranges do not cover sigma");
  return cm;
}

}  // namespace

std::vector<std::uint8_t> serialize_package(const DeltaPackage& package) {
  detail::PayloadWriter writer;
  Json entries = Json::array();
  for (const auto& [name, entry] : package.entries) {
    Json j;
    if (const auto* raw = std::get_if<RawEntry>(&entry)) {
      j["kind"] = "raw";
      j["rows"] = raw->tensor.values.rows();
      j["cols"] = raw->tensor.values.cols();
      if (raw->tensor.is_vector) j["vec"] = true;
      j["offset"] = writer.append_f16(raw->tensor.values.data());
    } else {
      j = write_compressed(writer, std::get<CompressedMatrix>(entry));
    }
    Json named;
    named["name"] = name;
    named.update(j);
    entries.push_back(std::move(named));
  }
  const auto payload = writer.release();

  Json header;
  header["alpha"] = package.alpha;
  header["schedule"] = package.schedule_spec;
  header["backbone_checksum"] = std::to_string(package.backbone_checksum);
  header["group_size"] = package.group_size;
  header["entries"] = std::move(entries);
  header["payload_bytes"] = payload.size();
  header["payload_checksum"] = std::to_string(fnv1a64(payload));
  return detail::frame(kMagic, kVersion, header.dump(), payload);
}

DeltaPackage deserialize_package(std::span<const std::uint8_t> bytes) {
  const auto framed = detail::unframe(bytes, kMagic, kVersion);
  DeltaPackage package;
  try {
    const Json header = Json::parse(framed.header);
    const auto payload_bytes = header.at("payload_bytes").get<std::size_t>();
    if (framed.payload.size() < payload_bytes) {
      throw Error(ErrorCode::Truncated, "payload has " + std::to_string(framed.payload.size()) + " of " +
                                            std::to_string(payload_bytes) + " bytes");
    }
    if (framed.payload.size() > payload_bytes) throw Error(ErrorCode::CorruptData, "trailing bytes after payload");
    if (std::to_string(fnv1a64(framed.payload)) != header.at("payload_checksum").get<std::string>()) {
      throw Error(ErrorCode::ChecksumMismatch, "package payload checksum does not match header");
    }
    package.alpha = header.at("alpha").get<double>();
    package.schedule_spec = header.at("schedule").get<std::string>();
    package.backbone_checksum = std::stoull(header.at("backbone_checksum").get<std::string>());
    package.group_size = header.at("group_size").get<std::size_t>();

    const detail::PayloadReader reader(framed.payload);
    for (const auto& entry : header.at("entries")) {
      auto name = entry.at("name").get<std::string>();
      const auto kind = entry.at("kind").get<std::string>();
      if (kind == "raw") {
        const auto rows = entry.at("rows").get<std::size_t>();
        const auto cols = entry.at("cols").get<std::size_t>();
        Tensor t{Matrix(rows, cols, reader.read_f16(entry.at("offset").get<std::size_t>(), rows * cols)),
                 entry.value("vec", false)};
        package.entries.emplace_back(std::move(name), RawEntry{std::move(t)});
      } else if (kind == "lowrank") {
        package.entries.emplace_back(std::move(name), read_compressed(reader, entry, package.alpha));
      } else {
        throw Error(ErrorCode::CorruptData, "unknown entry kind '" + kind + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptData, std::string("package header: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw Error(ErrorCode::CorruptData, "package checksum is not a decimal integer");
  } catch (const std::out_of_range&) {
    throw Error(ErrorCode::CorruptData, "package checksum out of range");
  }
  return package;
}

void save_package(const DeltaPackage& package, const std::filesystem::path& path) {
  detail::write_file(path, serialize_package(package));
}

DeltaPackage load_package(const std::filesystem::path& path) { return deserialize_package(detail::read_file(path)); }

std::uint64_t predicted_payload_bytes(const DeltaPackage& package) {
  std::uint64_t cursor = 0;
  auto section = [&](std::uint64_t bytes) { cursor = detail::align_up(cursor) + bytes; };
  for (const auto& [name, entry] : package.entries) {
    if (const auto* raw = std::get_if<RawEntry>(&entry)) {
      section(2 * raw->tensor.values.size());
      continue;
    }
    const auto& cm = std::get<CompressedMatrix>(entry);
    const std::uint64_t h_out = cm.h_out;
    const std::uint64_t h_in = cm.h_in;
    section(2 * cm.schedule.total_ranks());
    for (const auto& g : cm.schedule.groups) {
      const std::uint64_t w = g.width();
      if (w == 0) continue;
      if (g.bits == 16) {
        section(2 * h_out * w);
        section(2 * w * h_in);
        continue;
      }
      if (g.bits == 1) {
        section(2);
        section(2);
      } else {
        const std::uint64_t u_params = h_out * group_count(w, cm.group_size);
        const std::uint64_t v_params = w * group_count(h_in, cm.group_size);
        section(2 * u_params);
        section(2 * u_params);
        section(2 * v_params);
        section(2 * v_params);
      }
      section(packed_size(h_out * w, g.bits));
      section(packed_size(w * h_in, g.bits));
    }
  }
  return cursor;
}

}  // namespace deltacomp
