#include <bit>
#include <cstring>
#include <fstream>

#include "caveline/error.hpp"
#include "caveline/model.hpp"

namespace caveline {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'C', 'L', 'V', 'T', 'C', 'K', 'P', 'T'};

std::vector<std::pair<std::string, torch::Tensor>> named_state(CaveLineNet& model) {
  std::vector<std::pair<std::string, torch::Tensor>> state;
  for (const auto& item : model->named_parameters()) state.emplace_back(item.key(), item.value());
  for (const auto& item : model->named_buffers()) state.emplace_back(item.key(), item.value());
  return state;
}

std::string dtype_name(const torch::Tensor& t) {
  if (t.scalar_type() == torch::kFloat32 || t.scalar_type() == torch::kFloat64) return "f32";
  if (t.scalar_type() == torch::kInt64) return "i64";
  throw Error(ErrorCode::kInvalidArgument, "unsupported tensor dtype in checkpoint");
}

struct Header {
  std::uint32_t version = 0;
  json doc;
  std::streamoff data_offset = 0;
};

Header read_header(std::ifstream& in, const std::filesystem::path& path) {
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw Error(ErrorCode::kIoFailure, path.string() + " is not a checkpoint");
  }
  Header h;
  std::uint64_t length = 0;
  in.read(reinterpret_cast<char*>(&h.version), sizeof h.version);
  in.read(reinterpret_cast<char*>(&length), sizeof length);
  if (!in || h.version == 0 || h.version > kCheckpointVersion) {
    throw Error(ErrorCode::kIoFailure, path.string() + ": unsupported checkpoint version");
  }
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw Error(ErrorCode::kIoFailure, path.string() + ": truncated header");
  h.doc = json::parse(text);
  h.data_offset = in.tellg();
  return h;
}

void read_tensors(std::ifstream& in, const json& table, CaveLineNet& model, const std::filesystem::path& path) {
  std::map<std::string, torch::Tensor> targets;
  for (auto& [name, tensor] : named_state(model)) targets.emplace(name, tensor);
  torch::NoGradGuard no_grad;
  for (const auto& entry : table) {
    const auto name = entry.at("name").get<std::string>();
    const auto shape = entry.at("shape").get<std::vector<int64_t>>();
    const auto dtype = entry.at("dtype").get<std::string>();
    auto it = targets.find(name);
    if (it == targets.end()) throw Error(ErrorCode::kShapeMismatch, "checkpoint tensor '" + name + "' not in model");
    auto& target = it->second;
    if (target.sizes().vec() != shape) throw Error(ErrorCode::kShapeMismatch, "shape mismatch for '" + name + "'");
    const auto options = torch::TensorOptions().dtype(dtype == "i64" ? torch::kInt64 : torch::kFloat32);
    auto buffer = torch::empty(shape, options);
    in.read(reinterpret_cast<char*>(buffer.data_ptr()), static_cast<std::streamsize>(buffer.nbytes()));
    if (!in) throw Error(ErrorCode::kIoFailure, path.string() + ": truncated tensor data");
    target.copy_(buffer);
    targets.erase(it);
  }
  if (!targets.empty()) {
    throw Error(ErrorCode::kShapeMismatch, "checkpoint lacks tensor '" + targets.begin()->first + "'");
  }
}

}  // namespace

void save_checkpoint(CaveLineNet& model, const std::filesystem::path& path, const json& metadata) {
  auto state = named_state(model);
  json table = json::array();
  for (const auto& [name, tensor] : state) {
    table.push_back({{"name", name}, {"shape", tensor.sizes().vec()}, {"dtype", dtype_name(tensor)}});
  }
  const json header = {{"config", to_json(model->config)}, {"metadata", metadata}, {"tensors", table}};
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + tmp.string());
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t length = text.size();
    out.write(kMagic, sizeof kMagic);
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&length), sizeof length);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, tensor] : state) {
      auto data = tensor.detach().cpu().contiguous();
      if (data.scalar_type() == torch::kFloat64) data = data.to(torch::kFloat32);
      out.write(reinterpret_cast<const char*>(data.data_ptr()), static_cast<std::streamsize>(data.nbytes()));
    }
    if (!out) throw Error(ErrorCode::kIoFailure, "write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kNoCheckpoint, path.string());
  const Header header = read_header(in, path);
  LoadedCheckpoint loaded;
  loaded.config = model_config_from_json(header.doc.at("config"));
  loaded.metadata = header.doc.value("metadata", json::object());
  loaded.model = build_model(loaded.config);
  read_tensors(in, header.doc.at("tensors"), loaded.model, path);
  loaded.model->eval();
  return loaded;
}

void load_weights(CaveLineNet& model, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kNoCheckpoint, path.string());
  const Header header = read_header(in, path);
  read_tensors(in, header.doc.at("tensors"), model, path);
}

}  // namespace caveline
