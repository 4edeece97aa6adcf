#include "cli/config.hpp"

#include <algorithm>
#include <set>

#include "xstitch/hash.hpp"

namespace xstitch::cli {
namespace fs = std::filesystem;

namespace {

void allow_keys(const Json& obj, std::string_view where, std::initializer_list<std::string_view> keys) {
  if (!obj.is_object()) throw ConfigError(std::string(where) + " must be an object");
  for (const auto& [k, _] : obj.items()) {
    if (std::find(keys.begin(), keys.end(), k) == keys.end()) {
      throw ConfigError("unknown key '" + k + "' in " + std::string(where));
    }
  }
}

template <typename T>
void read(const Json& obj, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("config field '") + key + "' has the wrong type");
  }
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : (base / path).lexically_normal();
}

std::uint64_t file_fingerprint(const fs::path& p) {
  Fnv1a h;
  h.update(read_text_file(p));
  return h.digest();
}

GeneratorConfig parse_generator(const Json& j) {
  allow_keys(j, "dataset.generate",
             {"count", "height", "width", "classes_a", "classes_b", "noise_level", "relatedness", "shape_size",
              "jitter", "train_fraction", "val_fraction"});
  GeneratorConfig g;
  read(j, "count", g.count);
  read(j, "height", g.height);
  read(j, "width", g.width);
  read(j, "classes_a", g.classes_a);
  read(j, "classes_b", g.classes_b);
  read(j, "noise_level", g.noise_level);
  read(j, "relatedness", g.relatedness);
  read(j, "shape_size", g.shape_size);
  read(j, "jitter", g.jitter);
  read(j, "train_fraction", g.train_fraction);
  read(j, "val_fraction", g.val_fraction);
  return g;
}

Json generator_json(const GeneratorConfig& g) {
  return {{"count", g.count},
          {"height", g.height},
          {"width", g.width},
          {"classes_a", g.classes_a},
          {"classes_b", g.classes_b},
          {"noise_level", g.noise_level},
          {"relatedness", g.relatedness},
          {"shape_size", g.shape_size},
          {"jitter", g.jitter},
          {"train_fraction", g.train_fraction},
          {"val_fraction", g.val_fraction}};
}

DatasetSettings parse_dataset(const Json& j, const fs::path& base) {
  allow_keys(j, "dataset", {"path", "generate", "seed", "starve"});
  DatasetSettings d;
  if (j.contains("path") == j.contains("generate")) {
    throw ConfigError("dataset needs exactly one of 'path' or 'generate'");
  }
  if (j.contains("path")) {
    std::string p;
    read(j, "path", p);
    d.path = resolve(base, p);
    if (!fs::is_regular_file(*d.path)) throw ConfigError("dataset file '" + d.path->string() + "' does not exist");
    if (j.contains("seed") || j.contains("starve")) {
      throw ConfigError("dataset 'seed' and 'starve' apply to generated datasets only");
    }
    return d;
  }
  d.generate = parse_generator(j.at("generate"));
  read(j, "seed", d.seed);
  if (j.contains("starve")) {
    const auto& s = j.at("starve");
    allow_keys(s, "dataset.starve", {"classes", "keep_fraction", "seed"});
    StarveSettings st;
    read(s, "classes", st.classes);
    read(s, "keep_fraction", st.keep_fraction);
    read(s, "seed", st.seed);
    if (!(st.keep_fraction > 0.0 && st.keep_fraction <= 1.0)) throw ConfigError("keep_fraction must lie in (0, 1]");
    for (int c : st.classes) {
      if (c < 0 || c >= d.generate.classes_b) throw ConfigError("starved class " + std::to_string(c) + " out of range");
    }
    d.starve = st;
  }
  return d;
}

TrainConfig parse_train(const Json& j) {
  allow_keys(j, "train",
             {"base_lr", "momentum", "alpha_lr_scale", "loss_weight_a", "loss_weight_b", "iterations", "batch_size",
              "eval_every", "freeze_alphas"});
  TrainConfig t;
  read(j, "base_lr", t.base_lr);
  read(j, "momentum", t.momentum);
  read(j, "alpha_lr_scale", t.alpha_lr_scale);
  read(j, "loss_weight_a", t.loss_weights.a);
  read(j, "loss_weight_b", t.loss_weights.b);
  read(j, "iterations", t.iterations);
  read(j, "batch_size", t.batch_size);
  read(j, "eval_every", t.eval_every);
  read(j, "freeze_alphas", t.freeze_alphas);
  t.validate();
  return t;
}

AlphaSettings parse_alpha(const Json& j, const fs::path& base) {
  allow_keys(j, "alpha", {"alpha_same", "alpha_diff", "granularity", "unit_lr_scale", "init", "checkpoints", "sites"});
  AlphaSettings a;
  read(j, "alpha_same", a.alpha_same);
  read(j, "alpha_diff", a.alpha_diff);
  read(j, "unit_lr_scale", a.unit_lr_scale);
  read(j, "sites", a.sites);
  std::string text;
  if (j.contains("granularity")) {
    read(j, "granularity", text);
    a.granularity = parse_granularity(text);
  }
  if (j.contains("init")) {
    read(j, "init", text);
    a.init = parse_init_strategy(text);
  }
  std::vector<std::string> ckpts;
  read(j, "checkpoints", ckpts);
  for (const auto& c : ckpts) a.checkpoints.push_back(resolve(base, c));
  if (!std::isfinite(a.alpha_same) || !std::isfinite(a.alpha_diff)) throw ConfigError("alpha values must be finite");
  if (!(a.unit_lr_scale > 0.0)) throw ConfigError("unit_lr_scale must be positive");
  return a;
}

GradcheckSettings parse_gradcheck(const Json& j) {
  allow_keys(j, "gradcheck", {"epsilon", "tolerance", "batch_size", "oracle"});
  GradcheckSettings g;
  read(j, "epsilon", g.epsilon);
  read(j, "tolerance", g.tolerance);
  read(j, "batch_size", g.batch_size);
  if (j.contains("oracle")) {
    std::string o;
    read(j, "oracle", o);
    if (o == "extended") {
      g.oracle = GradOracle::extended;
    } else if (o == "native") {
      g.oracle = GradOracle::native;
    } else {
      throw ConfigError("gradcheck oracle must be 'extended' or 'native'");
    }
  }
  if (!(g.epsilon > 0.0) || !(g.tolerance > 0.0) || g.batch_size < 1) {
    throw ConfigError("gradcheck epsilon, tolerance and batch_size must be positive");
  }
  return g;
}

}  // namespace

std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::one_task_a: return "one_task_A";
    case Mode::one_task_b: return "one_task_B";
    case Mode::ensemble: return "ensemble";
    case Mode::split: return "split";
    case Mode::split_all: return "split_all";
    case Mode::cross_stitch: return "cross_stitch";
  }
  return "?";
}

Mode parse_mode(std::string_view text) {
  for (Mode m : {Mode::one_task_a, Mode::one_task_b, Mode::ensemble, Mode::split, Mode::split_all,
                 Mode::cross_stitch}) {
    if (to_string(m) == text) return m;
  }
  throw ConfigError("unknown mode '" + std::string(text) + "'");
}

ExperimentConfig parse_config(const Json& doc, const fs::path& base_dir) {
  allow_keys(doc, "config",
             {"schema_version", "seed", "dataset", "architecture", "mode", "split_index", "train", "alpha",
              "gradcheck", "output_dir"});
  ExperimentConfig cfg;
  if (!doc.contains("schema_version")) throw ConfigError("config is missing 'schema_version'");
  read(doc, "schema_version", cfg.schema_version);
  if (cfg.schema_version != kSchemaVersion) {
    throw ConfigError("unsupported schema_version " + std::to_string(cfg.schema_version));
  }
  read(doc, "seed", cfg.seed);
  if (doc.contains("dataset")) {
    cfg.dataset = parse_dataset(doc.at("dataset"), base_dir);
  }
  if (doc.contains("architecture")) {
    try {
      cfg.architecture = network_spec_from_json(doc.at("architecture"));
    } catch (const FormatError& e) {
      throw ConfigError(std::string("architecture: ") + e.what());
    } catch (const ShapeError& e) {
      throw ConfigError(std::string("architecture: ") + e.what());
    }
  }
  if (doc.contains("mode")) {
    std::string m;
    read(doc, "mode", m);
    cfg.mode = parse_mode(m);
  }
  read(doc, "split_index", cfg.split_index);
  if (doc.contains("train")) cfg.train = parse_train(doc.at("train"));
  if (doc.contains("alpha")) cfg.alpha = parse_alpha(doc.at("alpha"), base_dir);
  if (doc.contains("gradcheck")) cfg.gradcheck = parse_gradcheck(doc.at("gradcheck"));
  if (doc.contains("output_dir")) {
    std::string out;
    read(doc, "output_dir", out);
    cfg.output_dir = resolve(base_dir, out);
  }

  if (cfg.mode == Mode::split && cfg.split_index < 0) throw ConfigError("split_index must be non-negative");
  if (cfg.mode == Mode::cross_stitch && cfg.alpha.init == InitStrategy::task_init) {
    if (cfg.alpha.checkpoints.size() != 2) {
      throw ConfigError("cross_stitch with task_init needs exactly two checkpoint paths (task A, task B)");
    }
    for (const auto& c : cfg.alpha.checkpoints) {
      if (!fs::is_regular_file(c)) throw ConfigError("checkpoint '" + c.string() + "' does not exist");
    }
  }
  return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
  Json doc;
  try {
    doc = Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  if (doc.is_object() && doc.contains("format") && doc["format"] == "xstitch-run") {
    if (!doc.contains("config")) throw ConfigError("run manifest '" + path.string() + "' has no config echo");
    doc = Json(doc["config"]);
  }
  return parse_config(doc, fs::absolute(path).parent_path());
}

Json config_to_json(const ExperimentConfig& cfg) {
  Json j;
  j["schema_version"] = cfg.schema_version;
  j["seed"] = cfg.seed;
  Json d;
  if (cfg.dataset.path) {
    d["path"] = cfg.dataset.path->string();
  } else {
    d["generate"] = generator_json(cfg.dataset.generate);
    d["seed"] = cfg.dataset.seed;
    if (cfg.dataset.starve) {
      d["starve"] = {{"classes", cfg.dataset.starve->classes},
                     {"keep_fraction", cfg.dataset.starve->keep_fraction},
                     {"seed", cfg.dataset.starve->seed}};
    }
  }
  j["dataset"] = d;
  if (cfg.architecture) j["architecture"] = to_json(*cfg.architecture);
  j["mode"] = to_string(cfg.mode);
  if (cfg.mode == Mode::split) j["split_index"] = cfg.split_index;
  const auto& t = cfg.train;
  j["train"] = {{"base_lr", t.base_lr},
                {"momentum", t.momentum},
                {"alpha_lr_scale", t.alpha_lr_scale},
                {"loss_weight_a", t.loss_weights.a},
                {"loss_weight_b", t.loss_weights.b},
                {"iterations", t.iterations},
                {"batch_size", t.batch_size},
                {"eval_every", t.eval_every},
                {"freeze_alphas", t.freeze_alphas}};
  std::vector<std::string> ckpts;
  for (const auto& c : cfg.alpha.checkpoints) ckpts.push_back(c.string());
  j["alpha"] = {{"alpha_same", cfg.alpha.alpha_same},
                {"alpha_diff", cfg.alpha.alpha_diff},
                {"granularity", to_string(cfg.alpha.granularity)},
                {"unit_lr_scale", cfg.alpha.unit_lr_scale},
                {"init", to_string(cfg.alpha.init)},
                {"checkpoints", ckpts},
                {"sites", cfg.alpha.sites}};
  j["gradcheck"] = {{"epsilon", cfg.gradcheck.epsilon},
                    {"tolerance", cfg.gradcheck.tolerance},
                    {"batch_size", cfg.gradcheck.batch_size},
                    {"oracle", cfg.gradcheck.oracle == GradOracle::extended ? "extended" : "native"}};
  if (cfg.output_dir) j["output_dir"] = cfg.output_dir->string();
  return j;
}

std::string config_hash(const ExperimentConfig& cfg) {
  Json j = config_to_json(cfg);
  j.erase("output_dir");
  if (cfg.dataset.path) j["dataset"]["path"] = hex64(file_fingerprint(*cfg.dataset.path));
  Json ckpts = Json::array();
  for (const auto& c : cfg.alpha.checkpoints) ckpts.push_back(hex64(file_fingerprint(c)));
  j["alpha"]["checkpoints"] = ckpts;
  Fnv1a h;
  h.update(j.dump());
  return hex64(h.digest());
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view role) {
  Fnv1a h;
  h.update(&seed, sizeof seed);
  h.update(role);
  return h.digest();
}

TwoTaskDataset materialize_dataset(const DatasetSettings& s) {
  if (s.path) return load_dataset(*s.path);
  auto ds = generate(s.generate, s.seed);
  if (s.starve && !s.starve->classes.empty()) {
    ds = starve(ds, s.starve->classes, s.starve->keep_fraction, s.starve->seed).dataset;
  }
  return ds;
}

std::pair<NetworkSpec, NetworkSpec> task_specs(const ExperimentConfig& cfg, const TwoTaskDataset& ds) {
  NetworkSpec a = cfg.architecture
                      ? with_head_classes(*cfg.architecture, ds.config.classes_a)
                      : default_network_spec(ds.config.height, ds.config.width, ds.config.classes_a);
  const Shape want{1, ds.config.height, ds.config.width};
  if (a.input_shape != want) throw ConfigError("architecture input shape does not match the dataset");
  NetworkSpec b = with_head_classes(a, ds.config.classes_b);
  return {a, b};
}

}  // namespace xstitch::cli
