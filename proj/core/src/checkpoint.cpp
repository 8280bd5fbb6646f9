#include "nodulenet/checkpoint.hpp"

#include "io_util.hpp"
#include "json_convert.hpp"
#include "nodulenet/error.hpp"

namespace nodulenet {

using nlohmann::json;

namespace {

constexpr const char* kMagic = "nodulenet-checkpoint";
constexpr int kVersion = 1;

void append_tensor(std::string& out, const Tensor<float>& t) {
  append_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape) append_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
  out.append(reinterpret_cast<const char*>(t.data.data()), t.data.size() * sizeof(float));
}

void read_tensor(ByteCursor& in, NamedTensor<float>& dst) {
  const auto rank = in.read<std::uint32_t>();
  Shape shape(rank);
  for (auto& d : shape) d = in.read<std::uint32_t>();
  if (shape != dst.value.shape) {
    throw FormatError("checkpoint tensor " + dst.name + " has shape " + shape_to_string(shape) + ", expected " +
                      shape_to_string(dst.value.shape));
  }
  const auto bytes = in.take(dst.value.numel() * sizeof(float));
  std::memcpy(dst.value.data.data(), bytes.data(), bytes.size());
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& c) {
  json names = json::array();
  for (const auto& t : c.params.tensors) names.push_back(t.name);
  for (const auto& t : c.params.buffers) names.push_back(t.name);
  const json header{{"format", kMagic},
                    {"version", kVersion},
                    {"config", to_json(c.params.config)},
                    {"task", std::string(to_string(c.task))},
                    {"epoch", c.epoch},
                    {"metric", c.metric},
                    {"fold", c.fold},
                    {"preprocessing",
                     {{"spacing", to_json(c.spacing)},
                      {"normalization", to_json(c.normalization)},
                      {"crop_size", c.crop_size}}},
                    {"tensors", names}};
  std::string out = header.dump();
  out += '\n';
  for (const auto& t : c.params.tensors) append_tensor(out, t.value);
  for (const auto& t : c.params.buffers) append_tensor(out, t.value);
  return out;
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
  ByteCursor in(bytes);
  Checkpoint c;
  json header;
  try {
    header = json::parse(in.line());
    if (header.at("format").get<std::string>() != kMagic) throw FormatError("not a checkpoint");
    if (header.at("version").get<int>() != kVersion) throw FormatError("unsupported checkpoint version");
    c.task = parse_task(header.at("task").get<std::string>());
    c.epoch = header.at("epoch").get<int>();
    c.metric = header.at("metric").get<double>();
    c.fold = header.value("fold", -1);
    const auto& pre = header.at("preprocessing");
    c.spacing = spacing_from_json(pre.at("spacing"));
    c.normalization = normalization_from_json(pre.at("normalization"));
    c.crop_size = pre.at("crop_size").get<int>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad checkpoint header: ") + e.what());
  }
  // Build the expected layout from the config, then fill it in.
  RngStream unused(0);
  c.params = build_model<float>(model_config_from_json(header.at("config")), unused);
  const auto names = header.at("tensors").get<std::vector<std::string>>();
  if (names.size() != c.params.tensors.size() + c.params.buffers.size()) {
    throw FormatError("checkpoint tensor count does not match its config");
  }
  std::size_t i = 0;
  for (auto* group : {&c.params.tensors, &c.params.buffers}) {
    for (auto& t : *group) {
      if (names[i++] != t.name) throw FormatError("checkpoint tensor order mismatch at " + t.name);
      read_tensor(in, t);
    }
  }
  if (!in.done()) throw FormatError("trailing bytes after checkpoint tensors");
  return c;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  write_file_atomic(path, serialize_checkpoint(c));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_binary_file(path)); }

}  // namespace nodulenet
