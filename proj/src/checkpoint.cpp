#include "magnaforge/errors.hpp"
#include "magnaforge/nets.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>

namespace magnaforge {
namespace {

using json = nlohmann::json;

constexpr char kMagic[8] = {'M', 'F', 'C', 'K', 'P', 'T', '0', '1'};

void append_group(json& index, std::vector<const Mat<float>*>& data, const ParamSet<float>& ps, const char* group,
                  std::size_t& offset) {
  for (int i = 0; i < ps.size(); ++i) {
    index.push_back({{"name", ps.names[i]},
                     {"group", group},
                     {"rows", ps.values[i].rows()},
                     {"cols", ps.values[i].cols()},
                     {"offset", offset}});
    offset += static_cast<std::size_t>(ps.values[i].size());
    data.push_back(&ps.values[i]);
  }
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  json header;
  header["format_version"] = kFormatVersion;
  json net = json::object();
  const KeyValues kv = ck.agent.config.to_kv();
  for (const auto& [k, v] : kv.entries()) net[k] = v;
  header["net"] = net;
  header["iteration"] = ck.iteration;
  header["env_steps"] = ck.env_steps;
  header["adam_t"] = ck.adam.t;
  header["curriculum_rates"] = ck.curriculum_rates;
  header["extra"] = json::parse(ck.extra_json);
  json index = json::array();
  std::vector<const Mat<float>*> data;
  std::size_t offset = 0;
  append_group(index, data, ck.agent.params, "param", offset);
  if (ck.adam.m.size()) {
    if (!ck.adam.m.same_shapes(ck.agent.params) || !ck.adam.v.same_shapes(ck.agent.params))
      throw ShapeError("optimizer state does not match the parameters");
    append_group(index, data, ck.adam.m, "adam_m", offset);
    append_group(index, data, ck.adam.v, "adam_v", offset);
  }
  header["tensors"] = index;
  const std::string text = header.dump();

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto* m : data) out.write(reinterpret_cast<const char*>(m->data()), static_cast<std::streamsize>(m->size() * sizeof(float)));
    if (!out) throw Error("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw ParseError(path.string() + " is not a checkpoint");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || len > (1u << 30)) throw ParseError("corrupt checkpoint header");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint header: ") + e.what());
  }
  std::vector<char> rest((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const float* floats = reinterpret_cast<const float*>(rest.data());
  const std::size_t n_floats = rest.size() / sizeof(float);

  Checkpoint ck;
  try {
    if (header.at("format_version").get<int>() != kFormatVersion) throw ParseError("unsupported checkpoint version");
    KeyValues kv;
    for (const auto& [k, v] : header.at("net").items()) kv.set(k, v.get<std::string>());
    ck.agent.config = NetConfig::from_kv(kv);
    ck.iteration = header.at("iteration").get<long long>();
    ck.env_steps = header.at("env_steps").get<long long>();
    ck.adam.t = header.at("adam_t").get<long long>();
    ck.curriculum_rates = header.at("curriculum_rates").get<std::vector<double>>();
    ck.extra_json = header.at("extra").dump();
    for (const auto& t : header.at("tensors")) {
      auto rows = t.at("rows").get<Eigen::Index>(), cols = t.at("cols").get<Eigen::Index>();
      auto offset = t.at("offset").get<std::size_t>();
      if (rows < 0 || cols < 0 || offset + static_cast<std::size_t>(rows * cols) > n_floats)
        throw ParseError("checkpoint tensor out of bounds");
      Mat<float> m = Eigen::Map<const Mat<float>>(floats + offset, rows, cols);
      const std::string group = t.at("group").get<std::string>();
      ParamSet<float>* target = group == "param" ? &ck.agent.params : group == "adam_m" ? &ck.adam.m : group == "adam_v" ? &ck.adam.v : nullptr;
      if (!target) throw ParseError("unknown tensor group '" + group + "'");
      target->add(t.at("name").get<std::string>(), std::move(m));
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint header: ") + e.what());
  }
  const auto expected = init_params<float>(ck.agent.config, 0);
  if (!expected.params.same_shapes(ck.agent.params)) throw ShapeError("checkpoint tensors do not match its architecture");
  return ck;
}

}  // namespace magnaforge
