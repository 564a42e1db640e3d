#include "romae/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace romae {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'R', 'O', 'M', 'A', 'E', 'C', 'K', 'P'};

json stack_to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},
          {"n_head", c.n_head},
          {"depth", c.depth},
          {"d_ff", c.d_ff},
          {"use_cls", c.use_cls},
          {"positional", to_string(c.positional)},
          {"dropout", c.dropout},
          {"stochastic_depth", c.stochastic_depth},
          {"rope",
           {{"base", c.rope.base},
            {"p", c.rope.p},
            {"axes", c.rope.axes},
            {"reserve_variate_axis", c.rope.reserve_variate_axis},
            {"keep", c.rope.keep == PRopeKeep::Smallest ? "smallest" : "largest"}}}};
}

ModelConfig stack_from_json(const json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_head = j.at("n_head").get<std::size_t>();
  c.depth = j.at("depth").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.use_cls = j.at("use_cls").get<bool>();
  c.positional = parse_positional_mode(j.at("positional").get<std::string>());
  c.dropout = j.at("dropout").get<double>();
  c.stochastic_depth = j.at("stochastic_depth").get<double>();
  const auto& r = j.at("rope");
  c.rope.base = r.at("base").get<double>();
  c.rope.p = r.at("p").get<double>();
  c.rope.axes = r.at("axes").get<std::size_t>();
  c.rope.reserve_variate_axis = r.at("reserve_variate_axis").get<bool>();
  c.rope.keep = r.at("keep").get<std::string>() == "largest" ? PRopeKeep::Largest : PRopeKeep::Smallest;
  c.rope.head_dim = c.head_dim();
  return c;
}

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw CheckpointError("cannot open " + path.string() + " for writing");
  }
  void bytes(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw CheckpointError("write failed on " + path_.string());
  }
  template <class T>
  void pod(T v) {
    bytes(&v, sizeof v);
  }
  void string(const std::string& s) {
    pod<std::uint64_t>(s.size());
    bytes(s.data(), s.size());
  }
  void tensor(const std::string& name, const Shape& shape, std::span<const double> data) {
    string(name);
    pod<std::uint32_t>(static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) pod<std::uint64_t>(d);
    bytes(data.data(), data.size() * sizeof(double));
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw CheckpointError("cannot open checkpoint " + path.string());
  }
  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (!in_) throw CheckpointError("checkpoint " + path_.string() + " is truncated");
  }
  template <class T>
  T pod() {
    T v{};
    bytes(&v, sizeof v);
    return v;
  }
  std::string string() {
    const auto n = pod<std::uint64_t>();
    if (n > (1u << 30)) throw CheckpointError("checkpoint " + path_.string() + " has a corrupt string length");
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  NamedTensor tensor() {
    NamedTensor t;
    t.name = string();
    const auto rank = pod<std::uint32_t>();
    if (rank > 8) throw CheckpointError("checkpoint tensor " + t.name + " has rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = pod<std::uint64_t>();
    std::vector<double> data(numel(shape));
    bytes(data.data(), data.size() * sizeof(double));
    t.tensor = Tensor::parameter(std::move(shape), std::move(data));
    return t;
  }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
};

void require_little_endian() {
  if constexpr (std::endian::native != std::endian::little) {
    throw CheckpointError("checkpoints are little-endian; this host is not");
  }
}

}  // namespace

json model_config_to_json(const RomaeConfig& cfg) {
  return {{"encoder", stack_to_json(cfg.encoder)},
          {"decoder", stack_to_json(cfg.decoder)},
          {"patch_size", cfg.patch_size},
          {"axes", cfg.axes},
          {"with_decoder", cfg.with_decoder},
          {"head", to_string(cfg.head)},
          {"head_outputs", cfg.head_outputs}};
}

RomaeConfig model_config_from_json(const json& j) {
  RomaeConfig c;
  c.encoder = stack_from_json(j.at("encoder"));
  c.decoder = stack_from_json(j.at("decoder"));
  c.patch_size = j.at("patch_size").get<std::size_t>();
  c.axes = j.at("axes").get<std::size_t>();
  c.with_decoder = j.at("with_decoder").get<bool>();
  c.head = parse_head_kind(j.at("head").get<std::string>());
  c.head_outputs = j.at("head_outputs").get<std::size_t>();
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  require_little_endian();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  json header = {{"config", model_config_to_json(ckpt.config)},
                 {"epoch", ckpt.epoch},
                 {"step", ckpt.step},
                 {"meta", ckpt.meta}};
  if (ckpt.optimizer) {
    const auto& o = ckpt.optimizer->config;
    header["optimizer"] = {{"kind", to_string(o.kind)},  {"lr", o.lr},
                           {"beta1", o.beta1},           {"beta2", o.beta2},
                           {"eps", o.eps},               {"weight_decay", o.weight_decay},
                           {"momentum", o.momentum},     {"step", ckpt.optimizer->step}};
  }
  // Write to a sibling file first so an interrupted save never clobbers a good checkpoint.
  auto tmp = path;
  tmp += ".partial";
  {
    Writer w(tmp);
    w.bytes(kMagic, sizeof kMagic);
    w.pod<std::uint32_t>(kCheckpointVersion);
    w.string(header.dump());
    std::uint64_t count = ckpt.parameters.size();
    if (ckpt.optimizer) count += ckpt.optimizer->first.size() + ckpt.optimizer->second.size();
    w.pod<std::uint64_t>(count);
    for (const auto& p : ckpt.parameters) w.tensor(p.name, p.tensor.shape(), p.tensor.data());
    if (ckpt.optimizer) {
      const auto& st = *ckpt.optimizer;
      if (st.first.size() != ckpt.parameters.size() ||
          (!st.second.empty() && st.second.size() != ckpt.parameters.size())) {
        throw CheckpointError("optimizer state does not line up with the parameters");
      }
      for (std::size_t i = 0; i < st.first.size(); ++i) {
        w.tensor("opt.first." + ckpt.parameters[i].name, ckpt.parameters[i].tensor.shape(), st.first[i]);
      }
      for (std::size_t i = 0; i < st.second.size(); ++i) {
        w.tensor("opt.second." + ckpt.parameters[i].name, ckpt.parameters[i].tensor.shape(), st.second[i]);
      }
    }
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  require_little_endian();
  if (!std::filesystem::exists(path)) throw CheckpointError("checkpoint " + path.string() + " does not exist");
  Reader r(path);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw CheckpointError(path.string() + " is not a checkpoint (bad magic)");
  }
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError(path.string() + " has format version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  json header;
  try {
    header = json::parse(r.string());
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": corrupt header: " + e.what());
  }
  Checkpoint ck;
  try {
    ck.config = model_config_from_json(header.at("config"));
    ck.epoch = header.at("epoch").get<std::size_t>();
    ck.step = header.at("step").get<std::size_t>();
    ck.meta = header.value("meta", json::object());
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": incomplete header: " + e.what());
  }
  const auto count = r.pod<std::uint64_t>();
  std::vector<NamedTensor> first, second;
  for (std::uint64_t i = 0; i < count; ++i) {
    auto t = r.tensor();
    if (t.name.rfind("opt.first.", 0) == 0) {
      first.push_back(std::move(t));
    } else if (t.name.rfind("opt.second.", 0) == 0) {
      second.push_back(std::move(t));
    } else {
      ck.parameters.push_back(std::move(t));
    }
  }
  if (header.contains("optimizer")) {
    const auto& o = header["optimizer"];
    OptimizerState st;
    st.config.kind = parse_optimizer_kind(o.at("kind").get<std::string>());
    st.config.lr = o.at("lr").get<double>();
    st.config.beta1 = o.at("beta1").get<double>();
    st.config.beta2 = o.at("beta2").get<double>();
    st.config.eps = o.at("eps").get<double>();
    st.config.weight_decay = o.at("weight_decay").get<double>();
    st.config.momentum = o.at("momentum").get<double>();
    st.step = o.at("step").get<std::size_t>();
    if (first.size() != ck.parameters.size()) {
      throw CheckpointError(path.string() + ": optimizer moments do not match the parameter list");
    }
    for (std::size_t i = 0; i < first.size(); ++i) {
      if (first[i].name != "opt.first." + ck.parameters[i].name) {
        throw CheckpointError(path.string() + ": optimizer moment " + first[i].name + " is out of order");
      }
      st.first.emplace_back(first[i].tensor.data().begin(), first[i].tensor.data().end());
    }
    for (auto& s : second) st.second.emplace_back(s.tensor.data().begin(), s.tensor.data().end());
    ck.optimizer = std::move(st);
  }
  return ck;
}

Checkpoint make_checkpoint(const Romae& model, const OptimizerState* opt, std::size_t epoch, std::size_t step) {
  Checkpoint ck;
  ck.config = model.config();
  for (const auto& p : model.named_parameters()) ck.parameters.push_back({p.name, p.tensor.clone()});
  if (opt) ck.optimizer = *opt;
  ck.epoch = epoch;
  ck.step = step;
  return ck;
}

Romae restore_model(const Checkpoint& ckpt) {
  Romae model(ckpt.config, 0);
  std::map<std::string, const Tensor*> stored;
  for (const auto& p : ckpt.parameters) stored[p.name] = &p.tensor;
  std::string problems;
  for (const auto& p : model.named_parameters()) {
    auto it = stored.find(p.name);
    if (it == stored.end()) {
      problems += "\n  missing parameter " + p.name;
      continue;
    }
    if (it->second->shape() != p.tensor.shape()) {
      problems += "\n  parameter " + p.name + " has shape " + to_string(it->second->shape()) + ", model expects " +
                  to_string(p.tensor.shape());
    }
    stored.erase(it);
  }
  for (const auto& [name, t] : stored) problems += "\n  unexpected parameter " + name;
  if (!problems.empty()) throw CheckpointError("checkpoint does not match its model config:" + problems);
  model.load_parameters(ckpt.parameters);
  return model;
}

}  // namespace romae
