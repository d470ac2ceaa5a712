#include "iir/checkpoint.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>
#include <map>

#include "iir/tensor_io.hpp"

namespace iir {

namespace {

void write_named(std::ostream& os, const std::string& name, const Tensor<float>& t) {
  write_u32(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_tensor(os, t);
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelState& state, const std::vector<NamedTensor>& extra) {
  nlohmann::json header;
  header["format"] = "iir-checkpoint";
  header["model"] = nlohmann::json::parse(to_json_string(state.config()));
  header["step"] = state.step;
  header["train_config"] = nlohmann::json::parse(state.train_config_json);
  const std::string text = header.dump(2);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + tmp.string() + "' for writing");
    os.write(kCheckpointMagic, 4);
    write_u32(os, kCheckpointVersion);
    write_u64(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    const auto params = state.network.parameters();
    write_u32(os, static_cast<std::uint32_t>(params.size() + extra.size()));
    for (const auto* p : params) write_named(os, p->name, p->value);
    for (const auto& e : extra) write_named(os, e.name, e.tensor);
    os.flush();
    if (!os) throw IoError("failed writing checkpoint '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at '" + path.string() + "': " + ec.message());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint '" + path.string() + "'");
  const auto where = [&](const std::string& msg) { return IoError(path.string() + ": " + msg); };
  try {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0) throw where("not an IIR checkpoint");
    const auto version = read_u32(is);
    if (version != kCheckpointVersion) throw where("unsupported checkpoint version " + std::to_string(version));
    const auto len = read_u64(is);
    if (len > (1u << 26)) throw where("implausible header length");
    std::string text(len, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw where("truncated header");
    const auto header = nlohmann::json::parse(text);

    LoadedCheckpoint out;
    out.state = std::make_unique<ModelState>(model_config_from_json(header.at("model").dump()));
    out.state->step = header.at("step").get<std::int64_t>();
    out.state->train_config_json = header.at("train_config").dump();

    std::map<std::string, nn::Param<float>*> by_name;
    for (auto* p : out.state->network.parameters()) by_name[p->name] = p;
    std::size_t loaded = 0;
    const auto count = read_u32(is);
    for (std::uint32_t i = 0; i < count; ++i) {
      const auto nlen = read_u32(is);
      if (nlen > 4096) throw where("implausible tensor name length");
      std::string name(nlen, '\0');
      if (!is.read(name.data(), nlen)) throw where("truncated tensor name");
      Tensor<float> t = read_tensor(is);
      auto it = by_name.find(name);
      if (it == by_name.end()) {
        out.extra.push_back({std::move(name), std::move(t)});
        continue;
      }
      if (t.shape() != it->second->value.shape()) {
        throw where("parameter '" + name + "' has shape " + shape_string(t.shape()) + ", expected " +
                    shape_string(it->second->value.shape()));
      }
      it->second->value = std::move(t);
      ++loaded;
    }
    if (loaded != by_name.size()) throw where("checkpoint is missing parameters");
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw where(std::string("bad header: ") + e.what());
  } catch (const IoError& e) {
    const std::string msg = e.what();
    if (msg.rfind(path.string(), 0) == 0) throw;
    throw where(msg);
  }
}

}  // namespace iir
