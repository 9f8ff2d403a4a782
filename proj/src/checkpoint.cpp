// Checkpoint archive:
//   8 bytes  magic "C4DCKPT1"
//   8 bytes  little-endian manifest length
//   manifest JSON (schema_version, config_hash, config, phase, stage, iterations,
//                  tensor table, optimizer steps, cache stamps, RNG states, report)
//   raw tensor bytes, offsets relative to the end of the manifest
#include <cstring>
#include <fstream>
#include <sstream>

#include "control4d/errors.hpp"
#include "control4d/training.hpp"

namespace c4d {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'C', '4', 'D', 'C', 'K', 'P', 'T', '1'};
constexpr int kSchemaVersion = 1;

std::string dtype_name(torch::Dtype d) {
  switch (d) {
    case torch::kFloat:
      return "f32";
    case torch::kDouble:
      return "f64";
    case torch::kLong:
      return "i64";
    case torch::kUInt8:
      return "u8";
    case torch::kBool:
      return "bool";
    default:
      throw SchemaError("checkpoint: unsupported dtype");
  }
}

torch::Dtype dtype_from(const std::string& s) {
  if (s == "f32") return torch::kFloat;
  if (s == "f64") return torch::kDouble;
  if (s == "i64") return torch::kLong;
  if (s == "u8") return torch::kUInt8;
  if (s == "bool") return torch::kBool;
  throw SchemaError("checkpoint: unknown dtype '" + s + "'");
}

struct Writer {
  json table = json::array();
  std::string blob;

  void add(const std::string& name, const torch::Tensor& t) {
    auto c = t.detach().contiguous().cpu();
    const size_t n = static_cast<size_t>(c.numel()) * c.element_size();
    table.push_back({{"name", name},
                     {"dtype", dtype_name(c.scalar_type())},
                     {"shape", c.sizes().vec()},
                     {"offset", blob.size()},
                     {"nbytes", n}});
    blob.append(static_cast<const char*>(c.data_ptr()), n);
  }
};

struct Reader {
  std::map<std::string, json> table;
  std::string blob;

  bool has(const std::string& name) const { return table.count(name) > 0; }

  torch::Tensor get(const std::string& name) const {
    auto it = table.find(name);
    if (it == table.end()) throw SchemaError("checkpoint: missing tensor '" + name + "'");
    const auto& e = it->second;
    const auto shape = e["shape"].get<std::vector<int64_t>>();
    const auto offset = e["offset"].get<size_t>();
    const auto n = e["nbytes"].get<size_t>();
    if (offset + n > blob.size()) throw SchemaError("checkpoint: tensor '" + name + "' runs past the end of the file");
    auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype_from(e["dtype"].get<std::string>())));
    if (static_cast<size_t>(t.numel()) * t.element_size() != n) {
      throw SchemaError("checkpoint: tensor '" + name + "' size mismatch");
    }
    std::memcpy(t.data_ptr(), blob.data() + offset, n);
    return t;
  }

  void copy_into(const std::string& name, torch::Tensor& dst) const {
    auto src = get(name);
    if (src.sizes() != dst.sizes() || src.scalar_type() != dst.scalar_type()) {
      throw SchemaError("checkpoint: tensor '" + name + "' has a different shape or dtype than the model");
    }
    torch::NoGradGuard guard;
    dst.copy_(src);
  }
};

void add_module(Writer& w, const std::string& prefix, torch::nn::Module& m) {
  for (const auto& p : m.named_parameters(true)) w.add(prefix + p.key(), p.value());
  for (const auto& b : m.named_buffers(true)) w.add(prefix + b.key(), b.value());
}

void load_module(const Reader& r, const std::string& prefix, torch::nn::Module& m) {
  for (auto& p : m.named_parameters(true)) r.copy_into(prefix + p.key(), p.value());
  for (auto& b : m.named_buffers(true)) r.copy_into(prefix + b.key(), b.value());
}

std::string rng_state(const std::mt19937_64& g) {
  std::ostringstream ss;
  ss << g;
  return ss.str();
}

void set_rng_state(std::mt19937_64& g, const std::string& s) {
  std::istringstream ss(s);
  ss >> g;
  if (!ss) throw SchemaError("checkpoint: corrupt RNG state");
}

json request_json(const EditRequest& r) {
  return {{"prompt", r.prompt},      {"noise_level", r.noise_level}, {"frame_id", r.frame_id},
          {"camera_id", r.camera_id}, {"seed", r.seed},               {"iteration", r.iteration}};
}

}  // namespace

void Trainer::save(const std::filesystem::path& path) const {
  auto* self = const_cast<Trainer*>(this);
  Writer w;
  add_module(w, "field/", *self->field_);
  add_module(w, "gan/", *self->gan_);

  json optim = json::object();
  for (const auto& [name, opt] : optimizers_) {
    json steps = json::object();
    const auto& params = opt->param_groups().at(0).params();
    for (size_t i = 0; i < params.size(); ++i) {
      auto it = opt->state().find(params[i].unsafeGetTensorImpl());
      if (it == opt->state().end()) continue;
      const auto& s = static_cast<const torch::optim::AdamParamState&>(*it->second);
      const std::string key = "opt/" + name + "/" + std::to_string(i);
      w.add(key + "/exp_avg", s.exp_avg());
      w.add(key + "/exp_avg_sq", s.exp_avg_sq());
      steps[std::to_string(i)] = s.step();
    }
    optim[name] = {{"lr", opt->param_groups().at(0).options().get_lr()}, {"steps", steps}};
  }

  json cache = json::array();
  for (size_t i = 0; i < state_.entries.size(); ++i) {
    const auto& e = state_.entries[i];
    if (e.stamp < 0) continue;
    w.add("cache/" + std::to_string(i), e.frame.image);
    cache.push_back({{"index", i},
                     {"stamp", e.stamp},
                     {"editor_id", e.frame.editor_id},
                     {"iteration", e.frame.iteration},
                     {"request", request_json(e.frame.request)}});
  }
  json calls = json::array();
  for (const auto& c : state_.calls) calls.push_back({c.iteration, c.frame, c.camera, c.ok});

  auto gen_state = const_cast<at::Generator&>(gen_).get_state();
  w.add("rng/torch", gen_state);

  json acc = json::object();
  for (const auto& [k, v] : loss_acc_) acc[k] = {v.first, v.second};

  const json manifest{{"schema_version", kSchemaVersion},
                      {"config_hash", cfg_.architecture_hash()},
                      {"config", cfg_.to_json()},
                      {"dataset_root", ds_.root.string()},
                      {"phase", phase_},
                      {"stage", stage_name_},
                      {"reconstruction_iteration", recon_iter_},
                      {"edit_iteration", edit_iter_},
                      {"iteration", phase_ == "edit" ? edit_iter_ : recon_iter_},
                      {"tensors", w.table},
                      {"optimizers", optim},
                      {"cache", cache},
                      {"cache_shape", {state_.num_frames, state_.num_cameras}},
                      {"replacements", state_.replacements},
                      {"skips", state_.skips},
                      {"editor_calls", calls},
                      {"rng", {{"train", rng_state(rng_)}, {"du", rng_state(du_rng_)}}},
                      {"loss_accumulator", acc},
                      {"perceptual_fingerprint", std::to_string(self->extractor_->fingerprint())},
                      {"report", report_.records}};
  const std::string text = manifest.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw SchemaError("cannot write " + tmp);
    out.write(kMagic, 8);
    const uint64_t len = text.size();
    unsigned char le[8];
    for (int i = 0; i < 8; ++i) le[i] = static_cast<unsigned char>(len >> (8 * i));
    out.write(reinterpret_cast<const char*>(le), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(w.blob.data(), static_cast<std::streamsize>(w.blob.size()));
    if (!out) throw SchemaError("short write to " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

json read_checkpoint_manifest(const std::filesystem::path& path, std::string* blob) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw SchemaError("cannot open checkpoint " + path.string());
  char magic[8];
  unsigned char le[8];
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(le), 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw SchemaError(path.string() + " is not a checkpoint");
  uint64_t len = 0;
  for (int i = 0; i < 8; ++i) len |= static_cast<uint64_t>(le[i]) << (8 * i);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw SchemaError("checkpoint " + path.string() + " is truncated");
  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::exception& e) {
    throw SchemaError("checkpoint manifest is not valid JSON: " + std::string(e.what()));
  }
  if (manifest.value("schema_version", -1) != kSchemaVersion) {
    throw SchemaError("checkpoint schema version " + manifest.value("schema_version", json(-1)).dump() +
                      " is not supported (expected " + std::to_string(kSchemaVersion) + ")");
  }
  if (blob) {
    std::ostringstream ss;
    ss << in.rdbuf();
    *blob = ss.str();
  }
  return manifest;
}

void Trainer::load(const std::filesystem::path& path) {
  Reader r;
  const json m = read_checkpoint_manifest(path, &r.blob);
  const auto hash = m.value("config_hash", std::string());
  if (hash != cfg_.architecture_hash()) {
    throw SchemaError("checkpoint " + path.string() + " was written for architecture " + hash +
                      " but the current config describes " + cfg_.architecture_hash());
  }
  for (const auto& e : m.at("tensors")) r.table[e["name"].get<std::string>()] = e;
  const auto shape = m.at("cache_shape").get<std::vector<int>>();
  if (shape.size() != 2 || shape[0] != ds_.num_frames || shape[1] != ds_.num_cameras) {
    throw SchemaError("checkpoint cache shape does not match the dataset");
  }

  load_module(r, "field/", *field_);
  load_module(r, "gan/", *gan_);

  configure_optimizers(m.at("phase").get<std::string>());
  const auto& optim = m.at("optimizers");
  for (const auto& [name, opt] : optimizers_) {
    if (!optim.contains(name)) continue;
    const auto& steps = optim[name]["steps"];
    const auto& params = opt->param_groups().at(0).params();
    for (size_t i = 0; i < params.size(); ++i) {
      const std::string idx = std::to_string(i);
      if (!steps.contains(idx)) continue;
      const std::string key = "opt/" + name + "/" + idx;
      auto s = std::make_unique<torch::optim::AdamParamState>();
      s->step(steps[idx].get<int64_t>());
      auto ea = r.get(key + "/exp_avg");
      auto eas = r.get(key + "/exp_avg_sq");
      if (ea.sizes() != params[i].sizes()) throw SchemaError("checkpoint: optimizer state shape mismatch for " + key);
      s->exp_avg(ea);
      s->exp_avg_sq(eas);
      opt->state()[params[i].unsafeGetTensorImpl()] = std::move(s);
    }
  }

  state_.reset(ds_.num_frames, ds_.num_cameras);
  for (const auto& c : m.at("cache")) {
    const auto i = c["index"].get<size_t>();
    if (i >= state_.entries.size()) throw SchemaError("checkpoint: cache index out of range");
    auto& e = state_.entries[i];
    e.stamp = c["stamp"].get<int64_t>();
    e.frame.image = r.get("cache/" + std::to_string(i));
    e.frame.editor_id = c["editor_id"].get<std::string>();
    e.frame.iteration = c["iteration"].get<int64_t>();
    const auto& q = c["request"];
    e.frame.request.prompt = q["prompt"].get<std::string>();
    e.frame.request.noise_level = q["noise_level"].get<double>();
    e.frame.request.frame_id = q["frame_id"].get<int>();
    e.frame.request.camera_id = q["camera_id"].get<int>();
    e.frame.request.seed = q["seed"].get<uint64_t>();
    e.frame.request.iteration = q["iteration"].get<int64_t>();
    e.frame.request.original = original(e.frame.request.frame_id, e.frame.request.camera_id);
  }
  state_.replacements = m.at("replacements").get<int64_t>();
  state_.skips = m.at("skips").get<int64_t>();
  for (const auto& c : m.at("editor_calls")) {
    state_.calls.push_back({c[0].get<int64_t>(), c[1].get<int>(), c[2].get<int>(), c[3].get<bool>()});
  }

  set_rng_state(rng_, m.at("rng").at("train").get<std::string>());
  set_rng_state(du_rng_, m.at("rng").at("du").get<std::string>());
  gen_.set_state(r.get("rng/torch"));
  loss_acc_.clear();
  for (const auto& [k, v] : m.at("loss_accumulator").items()) loss_acc_[k] = {v[0].get<double>(), v[1].get<int64_t>()};

  phase_ = m.at("phase").get<std::string>();
  stage_name_ = m.value("stage", std::string());
  recon_iter_ = m.at("reconstruction_iteration").get<int64_t>();
  edit_iter_ = m.at("edit_iteration").get<int64_t>();
  report_.records = m.at("report").get<std::vector<json>>();
}

}  // namespace c4d
