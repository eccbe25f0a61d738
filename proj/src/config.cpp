#include "fb/config.hpp"

#include <set>

namespace fb {
namespace {

using ordered_json = nlohmann::ordered_json;

// Tracks key consumption inside one JSON object so leftovers can be
// reported by path.
class ObjectReader {
 public:
  ObjectReader(const ordered_json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: " + path_ + " must be an object");
  }

  const ordered_json* get(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) {
        throw ConfigError("config: unknown key \"" + (path_.empty() ? key : path_ + "." + key) +
                          "\"");
      }
    }
  }

  std::string sub(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  const ordered_json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

[[noreturn]] void type_error(const std::string& path, const char* want) {
  throw ConfigError("config: " + path + " must be " + want);
}

void read_string(ObjectReader& r, const std::string& key, std::string& out) {
  if (const ordered_json* v = r.get(key)) {
    if (!v->is_string()) type_error(r.sub(key), "a string");
    out = v->get<std::string>();
  }
}

void read_bool(ObjectReader& r, const std::string& key, bool& out) {
  if (const ordered_json* v = r.get(key)) {
    if (!v->is_boolean()) type_error(r.sub(key), "a boolean");
    out = v->get<bool>();
  }
}

void read_double(ObjectReader& r, const std::string& key, double& out) {
  if (const ordered_json* v = r.get(key)) {
    if (!v->is_number()) type_error(r.sub(key), "a number");
    out = v->get<double>();
  }
}

template <typename T>
void read_int(ObjectReader& r, const std::string& key, T& out) {
  if (const ordered_json* v = r.get(key)) {
    if (!v->is_number_integer() && !v->is_number_unsigned()) type_error(r.sub(key), "an integer");
    out = v->get<T>();
  }
}

// Accepts a bare integer or an array of integers.
void read_dims(ObjectReader& r, const std::string& key, std::vector<index_t>& out) {
  const ordered_json* v = r.get(key);
  if (!v) return;
  out.clear();
  if (v->is_number_integer() || v->is_number_unsigned()) {
    out.push_back(v->get<index_t>());
    return;
  }
  if (!v->is_array()) type_error(r.sub(key), "an integer or an array of integers");
  for (const ordered_json& d : *v) {
    if (!d.is_number_integer() && !d.is_number_unsigned()) {
      type_error(r.sub(key), "an integer or an array of integers");
    }
    out.push_back(d.get<index_t>());
  }
}

BackboneConfig parse_backbone(const ordered_json& j, const std::string& path) {
  BackboneConfig cfg;
  ObjectReader r(j, path);
  if (const ordered_json* v = r.get("kind")) {
    if (!v->is_string()) type_error(r.sub("kind"), "a string");
    cfg.kind = parse_backbone_kind(v->get<std::string>());
  }
  read_int(r, "d_model", cfg.d_model);
  read_int(r, "depth", cfg.depth);
  read_int(r, "depth_temporal", cfg.depth_temporal);
  read_int(r, "n_heads", cfg.n_heads);
  read_double(r, "ffn_ratio", cfg.ffn_ratio);
  read_dims(r, "patch", cfg.patch);
  read_dims(r, "input", cfg.input);
  read_int(r, "n_classes", cfg.n_classes);
  read_string(r, "pooling", cfg.pooling);
  r.finish();
  return cfg;
}

LlmBlockConfig parse_llm(const ordered_json& j, const std::string& path) {
  LlmBlockConfig cfg;
  ObjectReader r(j, path);
  read_int(r, "d_llm", cfg.d_llm);
  read_int(r, "n_heads", cfg.n_heads);
  read_int(r, "d_ffn", cfg.d_ffn);
  read_double(r, "eps", cfg.eps);
  read_int(r, "depth", cfg.depth);
  read_bool(r, "synthetic", cfg.synthetic);
  read_int(r, "seed", cfg.seed);
  read_string(r, "checkpoint", cfg.checkpoint);
  r.finish();
  return cfg;
}

ModelSpec parse_model(const ordered_json& j, const std::string& path) {
  ModelSpec spec;
  ObjectReader r(j, path);
  r.get("preset");  // consumed earlier by preset merging
  if (const ordered_json* v = r.get("backbone")) spec.backbone = parse_backbone(*v, r.sub("backbone"));
  if (const ordered_json* v = r.get("booster")) {
    ObjectReader b(*v, r.sub("booster"));
    if (const ordered_json* s = b.get("variant")) {
      if (!s->is_string()) type_error(b.sub("variant"), "a string");
      spec.variant = parse_booster_variant(s->get<std::string>());
    }
    read_bool(b, "unfreeze_llm", spec.unfreeze_llm);
    b.finish();
  }
  if (const ordered_json* v = r.get("llm")) spec.llm = parse_llm(*v, r.sub("llm"));
  r.finish();
  return spec;
}

TrainConfig parse_train(const ordered_json& j, const std::string& path, bool model_is_3d) {
  TrainConfig cfg;
  cfg.lr = model_is_3d ? 1e-5 : 5e-4;
  ObjectReader r(j, path);
  read_int(r, "batch_size", cfg.batch_size);
  read_int(r, "epochs", cfg.epochs);
  read_double(r, "lr", cfg.lr);
  read_double(r, "weight_decay", cfg.weight_decay);
  if (const ordered_json* v = r.get("betas")) {
    if (!v->is_array() || v->size() != 2 || !(*v)[0].is_number() || !(*v)[1].is_number()) {
      type_error(r.sub("betas"), "an array of two numbers");
    }
    cfg.beta1 = (*v)[0].get<double>();
    cfg.beta2 = (*v)[1].get<double>();
  }
  read_double(r, "eps", cfg.adam_eps);
  read_int(r, "seed", cfg.seed);
  read_string(r, "schedule", cfg.schedule);
  read_int(r, "warmup_epochs", cfg.warmup_epochs);
  read_double(r, "grad_clip", cfg.grad_clip);
  read_int(r, "checkpoint_every", cfg.checkpoint_every);
  read_string(r, "precision", cfg.precision);
  r.finish();
  return cfg;
}

DataConfig parse_data(const ordered_json& j, const std::string& path) {
  DataConfig cfg;
  ObjectReader r(j, path);
  read_string(r, "kind", cfg.kind);
  read_string(r, "path", cfg.path);
  if (const ordered_json* v = r.get("synthetic")) {
    ObjectReader s(*v, r.sub("synthetic"));
    read_string(s, "kind", cfg.synthetic_kind);
    read_int(s, "n_per_class", cfg.n_per_class);
    read_int(s, "n_classes", cfg.n_classes);
    read_int(s, "seed", cfg.seed);
    s.finish();
  }
  read_dims(r, "resize", cfg.resize);
  r.finish();
  return cfg;
}

void deep_merge(ordered_json& base, const ordered_json& over) {
  if (!base.is_object() || !over.is_object()) {
    base = over;
    return;
  }
  for (const auto& [key, value] : over.items()) {
    if (base.contains(key)) {
      deep_merge(base[key], value);
    } else {
      base[key] = value;
    }
  }
}

ordered_json dims_json(const std::vector<index_t>& dims) {
  ordered_json a = ordered_json::array();
  for (index_t d : dims) a.push_back(d);
  return a;
}

// The fully materialised document: parse(echo(cfg)) is the identity.
ordered_json resolved_json(const RunConfig& cfg) {
  ordered_json j;
  ordered_json backbone;
  backbone["kind"] = to_string(cfg.model.backbone.kind);
  backbone["d_model"] = cfg.model.backbone.d_model;
  backbone["depth"] = cfg.model.backbone.depth;
  backbone["depth_temporal"] = cfg.model.backbone.depth_temporal;
  backbone["n_heads"] = cfg.model.backbone.n_heads;
  backbone["ffn_ratio"] = cfg.model.backbone.ffn_ratio;
  backbone["patch"] = dims_json(cfg.model.backbone.patch);
  backbone["input"] = dims_json(cfg.model.backbone.input);
  backbone["n_classes"] = cfg.model.backbone.n_classes;
  backbone["pooling"] = cfg.model.backbone.pooling;
  ordered_json booster;
  booster["variant"] = to_string(cfg.model.variant);
  booster["unfreeze_llm"] = cfg.model.unfreeze_llm;
  ordered_json llm;
  llm["d_llm"] = cfg.model.llm.d_llm;
  llm["n_heads"] = cfg.model.llm.n_heads;
  llm["d_ffn"] = cfg.model.llm.d_ffn;
  llm["eps"] = cfg.model.llm.eps;
  llm["depth"] = cfg.model.llm.depth;
  llm["synthetic"] = cfg.model.llm.synthetic;
  llm["seed"] = cfg.model.llm.seed;
  llm["checkpoint"] = cfg.model.llm.checkpoint;
  j["model"] = ordered_json{{"backbone", backbone}, {"booster", booster}, {"llm", llm}};
  ordered_json train;
  train["batch_size"] = cfg.train.batch_size;
  train["epochs"] = cfg.train.epochs;
  train["lr"] = cfg.train.lr;
  train["weight_decay"] = cfg.train.weight_decay;
  train["betas"] = ordered_json::array({cfg.train.beta1, cfg.train.beta2});
  train["eps"] = cfg.train.adam_eps;
  train["seed"] = cfg.train.seed;
  train["schedule"] = cfg.train.schedule;
  train["warmup_epochs"] = cfg.train.warmup_epochs;
  train["grad_clip"] = cfg.train.grad_clip;
  train["checkpoint_every"] = cfg.train.checkpoint_every;
  train["precision"] = cfg.train.precision;
  j["train"] = train;
  ordered_json data;
  data["kind"] = cfg.data.kind;
  data["path"] = cfg.data.path;
  ordered_json synth;
  synth["kind"] = cfg.data.synthetic_kind;
  synth["n_per_class"] = cfg.data.n_per_class;
  synth["n_classes"] = cfg.data.n_classes;
  synth["seed"] = cfg.data.seed;
  data["synthetic"] = synth;
  data["resize"] = dims_json(cfg.data.resize);
  j["data"] = data;
  j["output_dir"] = cfg.output_dir;
  return j;
}

}  // namespace

void DataConfig::validate() const {
  if (kind != "synthetic" && kind != "npz" && kind != "dir") {
    throw ConfigError("config: data.kind \"" + kind + "\" (expected synthetic, npz, or dir)");
  }
  if (kind != "synthetic" && path.empty()) {
    throw ConfigError("config: data.path required for data.kind \"" + kind + "\"");
  }
  if (kind == "synthetic" && synthetic_kind != "blobs2d" && synthetic_kind != "blobs3d") {
    throw ConfigError("config: data.synthetic.kind \"" + synthetic_kind +
                      "\" (expected blobs2d or blobs3d)");
  }
  if (!resize.empty()) {
    if (resize.size() != 2 || resize[0] <= 0 || resize[1] <= 0) {
      throw ConfigError("config: data.resize must be [H, W] with positive extents");
    }
  }
}

ordered_json preset_fragment(const std::string& name) {
  // Desk-scale llm dims shared by the tiny presets.
  const ordered_json tiny_llm = {{"d_llm", 64},   {"n_heads", 4},     {"d_ffn", 172},
                                 {"eps", 1e-5},   {"depth", 1},       {"synthetic", true},
                                 {"seed", 0}};
  if (name == "vit-tiny") {
    return {{"backbone",
             {{"kind", "vit2d"},
              {"d_model", 64},
              {"depth", 4},
              {"n_heads", 4},
              {"ffn_ratio", 4.0},
              {"patch", {4}},
              {"input", {1, 28, 28}}}},
            {"llm", tiny_llm}};
  }
  if (name == "vit3d-tiny") {
    return {{"backbone",
             {{"kind", "vit3d"},
              {"d_model", 64},
              {"depth", 4},
              {"n_heads", 4},
              {"ffn_ratio", 4.0},
              {"patch", {7}},
              {"input", {1, 28, 28, 28}}}},
            {"llm", tiny_llm}};
  }
  if (name == "vivit-tiny") {
    return {{"backbone",
             {{"kind", "vivit_factorised"},
              {"d_model", 64},
              {"depth", 4},
              {"depth_temporal", 2},
              {"n_heads", 4},
              {"ffn_ratio", 4.0},
              {"patch", {7}},
              {"input", {1, 28, 28, 28}}}},
            {"llm", tiny_llm}};
  }
  if (name == "vit-s") {
    return {{"backbone",
             {{"kind", "vit2d"},
              {"d_model", 384},
              {"depth", 12},
              {"n_heads", 6},
              {"ffn_ratio", 4.0},
              {"patch", {16}},
              {"input", {3, 224, 224}}}},
            {"llm",
             {{"d_llm", 4096},
              {"n_heads", 32},
              {"d_ffn", 11008},
              {"eps", 1e-5},
              {"depth", 1},
              {"synthetic", true},
              {"seed", 0}}}};
  }
  throw ConfigError("config: unknown preset \"" + name +
                    "\" (expected vit-tiny, vit3d-tiny, vivit-tiny, or vit-s)");
}

void apply_set_override(ordered_json& root, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("config: --set needs path.to.key=value, got \"" + assignment + "\"");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  ordered_json value = ordered_json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  ordered_json* node = &root;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
    if (key.empty()) throw ConfigError("config: --set path has an empty segment: \"" + path + "\"");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    if (!node->contains(key)) (*node)[key] = ordered_json::object();
    node = &(*node)[key];
    if (!node->is_object()) {
      throw ConfigError("config: --set path \"" + path + "\" descends through a non-object");
    }
    start = dot + 1;
  }
}

RunConfig parse_run_config(const ordered_json& raw) {
  ObjectReader top(raw, "");
  RunConfig cfg;

  ordered_json model_doc = ordered_json::object();
  if (const ordered_json* m = top.get("model")) {
    if (!m->is_object()) throw ConfigError("config: model must be an object");
    if (m->contains("preset")) {
      const ordered_json& p = (*m)["preset"];
      if (!p.is_string()) throw ConfigError("config: model.preset must be a string");
      model_doc = preset_fragment(p.get<std::string>());
    }
    deep_merge(model_doc, *m);
  }
  cfg.model = parse_model(model_doc, "model");

  const ordered_json empty = ordered_json::object();
  const ordered_json* t = top.get("train");
  cfg.train = parse_train(t ? *t : empty, "train", cfg.model.backbone.is_3d());
  const ordered_json* d = top.get("data");
  cfg.data = parse_data(d ? *d : empty, "data");
  if (const ordered_json* o = top.get("output_dir")) {
    if (!o->is_string()) throw ConfigError("config: output_dir must be a string");
    cfg.output_dir = o->get<std::string>();
  }
  top.finish();

  cfg.model.validate();
  cfg.train.validate();
  cfg.data.validate();
  cfg.resolved = resolved_json(cfg);
  return cfg;
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  ordered_json raw;
  try {
    raw = ordered_json::parse(in);
  } catch (const std::exception& e) {
    throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
  }
  for (const std::string& o : overrides) apply_set_override(raw, o);
  return parse_run_config(raw);
}

DatasetBundle load_dataset(const DataConfig& cfg) {
  cfg.validate();
  DatasetBundle bundle;
  if (cfg.kind == "synthetic") {
    bundle = gen_synthetic(cfg.synthetic_kind, cfg.n_per_class, cfg.n_classes, cfg.seed);
  } else if (cfg.kind == "npz") {
    bundle = load_npz(cfg.path);
  } else {
    bundle = load_array_dir(cfg.path);
  }
  if (!cfg.resize.empty()) {
    if (bundle.volumetric) throw ConfigError("config: data.resize applies to 2D datasets only");
    for (DatasetSplit* s : {&bundle.train, &bundle.val, &bundle.test}) {
      if (s->size() > 0) s->images = resize_bilinear_2d(s->images, cfg.resize[0], cfg.resize[1]);
    }
  }
  return bundle;
}

void check_data_model_consistency(const DatasetBundle& data, const ModelSpec& model) {
  const BackboneConfig& bb = model.backbone;
  if (data.n_classes != bb.n_classes) {
    throw ConfigError("config: model.backbone.n_classes=" + std::to_string(bb.n_classes) +
                      " but the dataset has " + std::to_string(data.n_classes) + " classes");
  }
  if (data.volumetric != bb.is_3d()) {
    throw ConfigError(std::string("config: dataset is ") + (data.volumetric ? "3D" : "2D") +
                      " but backbone kind is " + to_string(bb.kind));
  }
  const Shape& is = data.train.images.shape();
  std::vector<index_t> want;  // dataset dims expressed as (C, spatial...)
  if (data.volumetric) {
    want = {1, is[1], is[2], is[3]};
  } else if (data.rgb) {
    want = {3, is[1], is[2]};
  } else {
    want = {1, is[1], is[2]};
  }
  if (want != bb.input) {
    throw ConfigError("config: model.backbone.input=" + shape_str(bb.input) +
                      " but the dataset yields " + shape_str(want));
  }
}

}  // namespace fb
