#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>

#include "ni/experiment.hpp"

namespace ni::exp {

namespace {

static_assert(sizeof(double) == 8);

// Blob writer/reader: float64 little-endian, appended in order.
class Blob {
 public:
  std::size_t append(const Array& a) {
    const std::size_t offset = bytes_.size();
    bytes_.resize(offset + a.size() * 8);
    for (std::size_t i = 0; i < a.size(); ++i) put(offset + i * 8, a[i]);
    return offset;
  }

  Array read(std::size_t offset, const Shape& shape, const std::string& name) const {
    Array a(shape);
    if (offset % 8 != 0 || offset + a.size() * 8 > bytes_.size()) {
      throw Error("checkpoint", "tensor '" + name + "' lies outside the blob (" + std::to_string(bytes_.size()) +
                                    " bytes)");
    }
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = get(offset + i * 8);
    return a;
  }

  std::size_t size() const { return bytes_.size(); }

  void save(const fs::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes_.data()), static_cast<std::streamsize>(bytes_.size()));
    if (!out) throw Error("io", "cannot write " + path.string());
  }

  static Blob load(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("io", "cannot read " + path.string());
    Blob b;
    b.bytes_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    return b;
  }

 private:
  void put(std::size_t at, double v) {
    std::uint64_t u = std::bit_cast<std::uint64_t>(v);
    for (int k = 0; k < 8; ++k) bytes_[at + k] = static_cast<unsigned char>(u >> (8 * k));
  }
  double get(std::size_t at) const {
    std::uint64_t u = 0;
    for (int k = 0; k < 8; ++k) u |= static_cast<std::uint64_t>(bytes_[at + k]) << (8 * k);
    return std::bit_cast<double>(u);
  }

  std::vector<unsigned char> bytes_;
};

Json tensor_entry(const std::string& name, const Array& a, std::size_t offset) {
  return Json{{"name", name}, {"shape", a.shape()}, {"offset", offset}, {"bytes", a.size() * 8}};
}

Shape entry_shape(const Json& e) { return e.at("shape").get<Shape>(); }

// Expected blob size from the entries; each entry must follow the previous one.
void check_layout(const Json& entries, const Blob& blob, const std::string& what) {
  std::size_t next = 0;
  for (const Json& e : entries) {
    std::size_t count = 1;
    for (std::size_t d : entry_shape(e)) count *= d;
    if (e.at("offset").get<std::size_t>() != next || e.at("bytes").get<std::size_t>() != count * 8) {
      throw Error("checkpoint", what + ": tensor '" + e.at("name").get<std::string>() + "' has an inconsistent offset");
    }
    next += count * 8;
  }
  if (next != blob.size()) {
    throw Error("checkpoint", what + ": manifest describes " + std::to_string(next) + " bytes, blob holds " +
                                  std::to_string(blob.size()));
  }
}

std::string group_name(core::ParamGroup g) { return core::to_string(g); }

core::ParamGroup group_from(const std::string& s) {
  for (auto g : {core::ParamGroup::cls_tokens, core::ParamGroup::type_matching, core::ParamGroup::function_codes,
                 core::ParamGroup::interpreter_and_embeddings, core::ParamGroup::regression_head}) {
    if (core::to_string(g) == s) return g;
  }
  throw Error("checkpoint", "unknown parameter group '" + s + "'");
}

Json metrics_json(const train::EpochMetrics& m) {
  return Json{{"epoch", m.epoch}, {"split", m.split}, {"loss", m.loss}, {"r2", m.r2}, {"lr", m.lr}, {"seconds", m.seconds}};
}

train::EpochMetrics metrics_from(const Json& j) {
  return train::EpochMetrics{j.at("epoch").get<std::size_t>(), j.at("split").get<std::string>(),
                             j.at("loss").get<double>(),       j.at("r2").get<std::vector<double>>(),
                             j.at("lr").get<double>(),         j.at("seconds").get<double>()};
}

}  // namespace

void save_checkpoint(const fs::path& dir, const core::Model& model, const train::TrainState* state,
                     const Json& extra, bool overwrite) {
  check_writable(dir / "manifest.json", overwrite);
  fs::create_directories(dir);
  Blob blob;
  Json tensors = Json::array();
  for (const core::Parameter& p : model.params) {
    Json e = tensor_entry(p.name, p.value, blob.append(p.value));
    e["group"] = group_name(p.group);
    e["trainable"] = p.trainable;
    e["unit_norm"] = p.unit_norm;
    e["per_function"] = p.per_function;
    tensors.push_back(std::move(e));
  }
  blob.save(dir / "params.bin");
  Json manifest{{"format", "ni-checkpoint/1"},
                {"config", to_json(model.config)},
                {"blob", "params.bin"},
                {"blob_bytes", blob.size()},
                {"endianness", "little"},
                {"dtype", "float64"},
                {"tensors", tensors},
                {"has_state", state != nullptr},
                {"extra", extra}};

  if (state) {
    Blob sb;
    Json moments = Json::array();
    for (core::ParamId id = 0; id < model.params.size(); ++id) {
      if (id >= state->adam.m.size() || state->adam.m[id].size() == 0) continue;
      const std::string& n = model.params[id].name;
      moments.push_back(tensor_entry(n + "#m", state->adam.m[id], sb.append(state->adam.m[id])));
      moments.push_back(tensor_entry(n + "#v", state->adam.v[id], sb.append(state->adam.v[id])));
    }
    Json best = Json::array();
    for (core::ParamId id = 0; id < state->best_params.size(); ++id) {
      best.push_back(tensor_entry(model.params[id].name + "#best", state->best_params[id], sb.append(state->best_params[id])));
    }
    Json last = Json::array();
    for (core::ParamId id = 0; id < state->last_params.size(); ++id) {
      last.push_back(tensor_entry(model.params[id].name + "#last", state->last_params[id], sb.append(state->last_params[id])));
    }
    Json history = Json::array();
    for (const auto& m : state->history) history.push_back(metrics_json(m));
    Json sj{{"format", "ni-train-state/1"},
            {"epoch", state->epoch},
            {"step", state->adam.step},
            {"seed", state->seed},
            {"best_loss", state->best_loss},
            {"best_epoch", state->best_epoch},
            {"history", history},
            {"blob", "state.bin"},
            {"tensors", moments},
            {"best", best},
            {"last", last}};
    sb.save(dir / "state.bin");
    std::ofstream(dir / "state.json", std::ios::trunc) << sj.dump(1) << '\n';
  }
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << manifest.dump(1) << '\n';
  if (!out) throw Error("io", "cannot write " + (dir / "manifest.json").string());
}

Checkpoint load_checkpoint(const fs::path& dir, const std::optional<core::ModelConfig>& expected) {
  const Json manifest = read_json(dir / "manifest.json");
  try {
    if (manifest.at("format") != "ni-checkpoint/1") throw Error("checkpoint", "not a checkpoint manifest");
    const Blob blob = Blob::load(dir / manifest.at("blob").get<std::string>());
    const Json& tensors = manifest.at("tensors");
    check_layout(tensors, blob, "params");

    Checkpoint ck;
    ck.extra = manifest.value("extra", Json::object());
    core::Model& m = ck.model;
    const core::ModelConfig stored = model_config_from_json(manifest.at("config"));
    m.config = expected.value_or(stored);
    for (const Json& e : tensors) {
      const std::string name = e.at("name").get<std::string>();
      core::Parameter p{name, blob.read(e.at("offset"), entry_shape(e), name), group_from(e.at("group")),
                        e.at("trainable").get<bool>(), e.at("unit_norm").get<bool>(), e.at("per_function").get<bool>()};
      m.params.add(std::move(p));
    }
    // Every tensor the config implies must exist with the right shape, and nothing else.
    const core::Model reference = core::Model::create(m.config, 0);
    std::set<std::string> want, have;
    for (const auto& p : reference.params) want.insert(p.name);
    for (const auto& p : m.params) have.insert(p.name);
    for (const auto& n : have) {
      if (!want.count(n)) throw Error("checkpoint_mismatch", "tensor '" + n + "' is not part of the configured model");
    }
    try {
      m.rebuild_ids();
    } catch (const ShapeError& e) {
      throw Error("checkpoint_mismatch", e.what());
    } catch (const std::out_of_range& e) {
      throw Error("checkpoint_mismatch", std::string(e.what()) + " in checkpoint");
    }

    if (manifest.value("has_state", false)) {
      const Json sj = read_json(dir / "state.json");
      const Blob sb = Blob::load(dir / sj.at("blob").get<std::string>());
      Json all = sj.at("tensors");
      for (const Json& e : sj.at("best")) all.push_back(e);
      for (const Json& e : sj.at("last")) all.push_back(e);
      check_layout(all, sb, "state");
      train::TrainState st;
      st.epoch = sj.at("epoch");
      st.adam.step = sj.at("step");
      st.seed = sj.at("seed");
      st.best_loss = sj.at("best_loss");
      st.best_epoch = sj.at("best_epoch");
      for (const Json& h : sj.at("history")) st.history.push_back(metrics_from(h));
      st.adam.m.resize(m.params.size());
      st.adam.v.resize(m.params.size());
      for (const Json& e : sj.at("tensors")) {
        const std::string key = e.at("name");
        const std::size_t hash = key.rfind('#');
        const core::ParamId id = m.params.id(key.substr(0, hash));
        Array a = sb.read(e.at("offset"), entry_shape(e), key);
        if (a.shape() != m.params[id].value.shape()) throw Error("checkpoint_mismatch", "moment '" + key + "' has the wrong shape");
        (key.substr(hash) == "#m" ? st.adam.m[id] : st.adam.v[id]) = std::move(a);
      }
      for (const Json& e : sj.at("best")) {
        const std::string key = e.at("name");
        Array a = sb.read(e.at("offset"), entry_shape(e), key);
        const core::ParamId id = m.params.id(key.substr(0, key.rfind('#')));
        if (id != st.best_params.size()) throw Error("checkpoint", "best parameters are out of order");
        st.best_params.push_back(std::move(a));
      }
      for (const Json& e : sj.at("last")) {
        const std::string key = e.at("name");
        Array a = sb.read(e.at("offset"), entry_shape(e), key);
        const core::ParamId id = m.params.id(key.substr(0, key.rfind('#')));
        if (id != st.last_params.size()) throw Error("checkpoint", "last parameters are out of order");
        st.last_params.push_back(std::move(a));
      }
      ck.state = std::move(st);
    }
    return ck;
  } catch (const Json::exception& e) {
    throw Error("checkpoint", (dir / "manifest.json").string() + ": " + e.what());
  } catch (const std::out_of_range& e) {
    throw Error("checkpoint_mismatch", e.what());
  } catch (const std::invalid_argument& e) {
    throw Error("checkpoint_mismatch", e.what());
  }
}

}  // namespace ni::exp
