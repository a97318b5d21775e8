#include "deltacomp/model_io.hpp"

#include <algorithm>
#include <set>

#include <json.hpp>

#include "container.hpp"
#include "deltacomp/error.hpp"
#include "deltacomp/hash.hpp"

namespace deltacomp {

namespace {

constexpr std::string_view kMagic = "DCKP";
constexpr std::uint32_t kVersion = 1;

struct Layout {
  std::vector<std::size_t> offsets;
  std::vector<std::uint8_t> payload;
};

Layout build_payload(const TensorMap& tensors) {
  detail::PayloadWriter writer;
  Layout layout;
  for (const auto& [name, tensor] : tensors) layout.offsets.push_back(writer.append_f32(tensor.values.data()));
  layout.payload = writer.release();
  return layout;
}

void check_same_structure(const TensorMap& lhs, const TensorMap& rhs, std::string_view lhs_label,
                          std::string_view rhs_label) {
  std::vector<std::string> missing;
  std::vector<std::string> extra;
  for (const auto& [name, t] : rhs)
    if (!lhs.find(name)) missing.push_back(name);
  for (const auto& [name, t] : lhs)
    if (!rhs.find(name)) extra.push_back(name);
  if (!missing.empty() || !extra.empty()) {
    std::string msg = std::string(lhs_label) + " and " + std::string(rhs_label) + " differ in tensor names;";
    msg += " missing:";
    for (const auto& n : missing) msg += " " + n;
    msg += "; extra:";
    for (const auto& n : extra) msg += " " + n;
    throw Error(ErrorCode::NameMismatch, msg);
  }
  for (const auto& [name, t] : lhs) {
    const Tensor& other = rhs.at(name);
    if (t.values.rows() != other.values.rows() || t.values.cols() != other.values.cols() ||
        t.is_vector != other.is_vector) {
      throw Error(ErrorCode::DimensionMismatch, "tensor '" + name + "' has shape " + t.values.shape_string() +
                                                    " vs " + other.values.shape_string());
    }
  }
}

}  // namespace

void TensorMap::add(std::string name, Tensor tensor) {
  if (find(name)) throw Error(ErrorCode::InvalidArgument, "duplicate tensor name '" + name + "'");
  if (tensor.is_vector && tensor.values.cols() != 1) {
    throw Error(ErrorCode::InvalidArgument, "vector tensor '" + name + "' must have one column");
  }
  entries_.emplace_back(std::move(name), std::move(tensor));
}

const Tensor* TensorMap::find(std::string_view name) const noexcept {
  auto it = std::find_if(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
  return it == entries_.end() ? nullptr : &it->second;
}

const Tensor& TensorMap::at(std::string_view name) const {
  const Tensor* t = find(name);
  if (!t) throw Error(ErrorCode::NameMismatch, "no tensor named '" + std::string(name) + "'");
  return *t;
}

std::uint64_t ModelCheckpoint::checksum() const { return fnv1a64(build_payload(tensors_).payload); }

std::vector<std::uint8_t> serialize_checkpoint(const ModelCheckpoint& checkpoint) {
  const Layout layout = build_payload(checkpoint.tensors());
  nlohmann::ordered_json header;
  header["tensors"] = nlohmann::ordered_json::array();
  std::size_t i = 0;
  for (const auto& [name, tensor] : checkpoint.tensors()) {
    nlohmann::ordered_json entry;
    entry["name"] = name;
    entry["rows"] = tensor.values.rows();
    entry["cols"] = tensor.values.cols();
    entry["offset"] = layout.offsets[i++];
    entry["len_bytes"] = tensor.values.size() * sizeof(float);
    if (tensor.is_vector) entry["vec"] = true;
    header["tensors"].push_back(std::move(entry));
  }
  header["checksum"] = std::to_string(fnv1a64(layout.payload));
  return detail::frame(kMagic, kVersion, header.dump(), layout.payload);
}

ModelCheckpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  const auto framed = detail::unframe(bytes, kMagic, kVersion);
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(framed.header);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptData, std::string("checkpoint header: ") + e.what());
  }

  const detail::PayloadReader reader(framed.payload);
  TensorMap tensors;
  std::size_t payload_end = 0;
  try {
    for (const auto& entry : header.at("tensors")) {
      const auto rows = entry.at("rows").get<std::size_t>();
      const auto cols = entry.at("cols").get<std::size_t>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto len = entry.at("len_bytes").get<std::size_t>();
      if (len != rows * cols * sizeof(float)) {
        throw Error(ErrorCode::CorruptData, "len_bytes disagrees with shape for " + entry.at("name").get<std::string>());
      }
      Tensor t{Matrix(rows, cols, reader.read_f32(offset, rows * cols)), entry.value("vec", false)};
      tensors.add(entry.at("name").get<std::string>(), std::move(t));
      payload_end = std::max(payload_end, offset + len);
    }
    const auto stored = std::stoull(header.at("checksum").get<std::string>());
    if (fnv1a64(framed.payload.first(payload_end)) != stored || framed.payload.size() != payload_end) {
      throw Error(ErrorCode::ChecksumMismatch, "checkpoint payload checksum does not match header");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::CorruptData, std::string("checkpoint header: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw Error(ErrorCode::CorruptData, "checkpoint checksum is not a decimal integer");
  } catch (const std::out_of_range&) {
    throw Error(ErrorCode::CorruptData, "checkpoint checksum out of range");
  }
  return ModelCheckpoint(std::move(tensors));
}

void save_checkpoint(const ModelCheckpoint& checkpoint, const std::filesystem::path& path) {
  detail::write_file(path, serialize_checkpoint(checkpoint));
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(detail::read_file(path));
}

DeltaWeights extract_delta(const ModelCheckpoint& aligned, const ModelCheckpoint& backbone) {
  check_same_structure(aligned.tensors(), backbone.tensors(), "aligned", "backbone");
  DeltaWeights delta;
  delta.backbone_checksum = backbone.checksum();
  for (const auto& [name, tensor] : aligned.tensors()) {
    delta.tensors.add(name, Tensor{subtract(tensor.values, backbone.tensors().at(name).values), tensor.is_vector});
  }
  return delta;
}

ModelCheckpoint restore(const ModelCheckpoint& backbone, const DeltaWeights& delta, bool force) {
  if (!force && delta.backbone_checksum != backbone.checksum()) {
    throw Error(ErrorCode::ChecksumMismatch, "delta was taken against a different backbone (expected checksum " +
                                                 std::to_string(delta.backbone_checksum) + ")");
  }
  check_same_structure(delta.tensors, backbone.tensors(), "delta", "backbone");
  TensorMap out;
  for (const auto& [name, tensor] : backbone.tensors()) {
    Matrix sum = tensor.values;
    auto d = delta.tensors.at(name).values.data();
    auto s = sum.data();
    // Zero entries leave the backbone bits untouched (including -0.0).
    for (std::size_t i = 0; i < s.size(); ++i)
      if (d[i] != 0.0f) s[i] += d[i];
    out.add(name, Tensor{std::move(sum), tensor.is_vector});
  }
  return ModelCheckpoint(std::move(out));
}

double total_size(std::size_t n_models, double model_size, double alpha) {
  return (1.0 + alpha * static_cast<double>(n_models)) * model_size;
}

}  // namespace deltacomp
