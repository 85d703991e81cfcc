#include "pcpetl/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "pcpetl/errors.hpp"

namespace pcpetl {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t x = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return x;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  return static_cast<std::size_t>(parse_u64(key, v));
}

double parse_double(const std::string& key, const std::string& v) {
  double x = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty() || !std::isfinite(x)) {
    throw ConfigError(key + ": expected a finite number, got '" + v + "'");
  }
  return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

std::string fmt(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::string fmt(std::size_t v) { return std::to_string(v); }

std::string fmt_list(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<std::size_t> parse_size_list(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(v)) out.push_back(parse_size(key, item));
  return out;
}

struct Entry {
  std::string name;
  std::string type;
  std::string help;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define SIZE_KEY(key, field, help)                                                         \
  Entry {                                                                                  \
    key, "uint", help, [](const RunConfig& c) { return fmt(c.field); },                   \
        [](RunConfig& c, const std::string& v) { c.field = parse_size(key, v); }           \
  }
#define REAL_KEY(key, field, help)                                                         \
  Entry {                                                                                  \
    key, "float", help, [](const RunConfig& c) { return fmt(c.field); },                  \
        [](RunConfig& c, const std::string& v) { c.field = parse_double(key, v); }         \
  }
#define ENUM_KEY(key, field, parser, choices, help)                                        \
  Entry {                                                                                  \
    key, choices, help, [](const RunConfig& c) { return to_string(c.field); },            \
        [](RunConfig& c, const std::string& v) { c.field = parser(v); }                    \
  }

const std::vector<Entry>& registry() {
  static const std::vector<Entry> entries = {
      Entry{"seed", "uint", "single source of all randomness (data, init, batching)",
            [](const RunConfig& c) { return std::to_string(c.seed); },
            [](RunConfig& c, const std::string& v) { c.seed = parse_u64("seed", v); }},
      Entry{"data.families", "list",
            "comma-separated shape families (sphere,box,cylinder,cone,torus,plane-cluster,capsule,ellipsoid)",
            [](const RunConfig& c) {
              std::string s;
              for (std::size_t i = 0; i < c.data.families.size(); ++i)
                s += (i ? "," : "") + to_string(c.data.families[i]);
              return s;
            },
            [](RunConfig& c, const std::string& v) {
              c.data.families.clear();
              for (const auto& f : split_list(v)) c.data.families.push_back(parse_shape_family(f));
            }},
      SIZE_KEY("data.points", data.points, "points per cloud"),
      REAL_KEY("data.noise", data.noise, "Gaussian jitter sigma"),
      REAL_KEY("data.occlusion", data.occlusion, "fraction removed by one spherical cap"),
      REAL_KEY("data.clutter", data.clutter, "fraction of off-object background points"),
      ENUM_KEY("data.rotation", data.rotation, parse_rotation_policy, "none|z|so3", "rotation applied per sample"),
      SIZE_KEY("data.train_per_class", data.train_per_class, "training samples per class"),
      SIZE_KEY("data.test_per_class", data.test_per_class, "test samples per class"),
      SIZE_KEY("backbone.depth", backbone.depth, "number of transformer blocks L"),
      SIZE_KEY("backbone.embed_dim", backbone.embed_dim, "token width d"),
      SIZE_KEY("backbone.heads", backbone.heads, "attention heads"),
      SIZE_KEY("backbone.ffn_ratio", backbone.ffn_ratio, "FFN hidden width / d"),
      SIZE_KEY("backbone.num_patches", backbone.num_patches, "patches per cloud N"),
      SIZE_KEY("backbone.patch_size", backbone.patch_size, "points per patch k"),
      Entry{"backbone.embed_hidden", "list", "hidden widths of the pointwise patch MLP",
            [](const RunConfig& c) { return fmt_list(c.backbone.embed_hidden); },
            [](RunConfig& c, const std::string& v) { c.backbone.embed_hidden = parse_size_list("backbone.embed_hidden", v); }},
      SIZE_KEY("backbone.pos_hidden", backbone.pos_hidden, "hidden width of the position MLP"),
      REAL_KEY("backbone.dropout", backbone.dropout, "dropout on attention and FFN branches"),
      ENUM_KEY("petl.strategy", petl.strategy, parse_strategy,
               "full|linear_probe|adapter_serial|external_prompt|lora|bitfit|tfts_only|dapt", "fine-tuning strategy"),
      SIZE_KEY("petl.rank", petl.rank, "bottleneck rank r (adapters, LoRA)"),
      ENUM_KEY("petl.scale_mode", petl.scale_mode, parse_scale_mode, "dynamic|dynamic_no_relu|fixed|learnable_scalar",
               "Dynamic Adapter scale"),
      REAL_KEY("petl.scale_value", petl.scale_value, "fixed scale S_m / learnable scalar init / serial adapter scale"),
      Entry{"petl.inserted_layers", "list", "1-based layers receiving modules; empty means all",
            [](const RunConfig& c) { return fmt_list(c.petl.inserted_layers); },
            [](RunConfig& c, const std::string& v) { c.petl.inserted_layers = parse_size_list("petl.inserted_layers", v); }},
      ENUM_KEY("petl.prompt_mode", petl.prompt_mode, parse_prompt_mode, "off|internal|external", "prompting for dapt"),
      SIZE_KEY("petl.prompt_count", petl.prompt_count, "external prompts per layer"),
      ENUM_KEY("petl.prompt_pool", petl.prompt_pool, parse_prompt_pool, "mean|max|topk", "internal prompt pooling"),
      SIZE_KEY("petl.prompt_topk", petl.prompt_topk, "K for topk pooling"),
      Entry{"petl.prompt_accumulate", "bool", "keep every internal prompt (true) or only the latest (false)",
            [](const RunConfig& c) { return std::string(c.petl.prompt_accumulate ? "true" : "false"); },
            [](RunConfig& c, const std::string& v) { c.petl.prompt_accumulate = parse_bool("petl.prompt_accumulate", v); }},
      ENUM_KEY("petl.tfts", petl.tfts, parse_tfts_granularity, "off|ln_only|ln_linear", "TFTS insertion sites"),
      Entry{"petl.head_inputs", "list", "head features from cls,prompt_pool,patch_pool; empty picks by strategy",
            [](const RunConfig& c) {
              std::string s;
              for (std::size_t i = 0; i < c.petl.head_inputs.size(); ++i)
                s += (i ? "," : "") + to_string(c.petl.head_inputs[i]);
              return s;
            },
            [](RunConfig& c, const std::string& v) {
              c.petl.head_inputs.clear();
              for (const auto& h : split_list(v)) c.petl.head_inputs.push_back(parse_head_input(h));
            }},
      SIZE_KEY("model.head_hidden", head_hidden, "hidden width of the classification head"),
      REAL_KEY("train.lr", train.lr, "peak learning rate"),
      REAL_KEY("train.weight_decay", train.weight_decay, "decoupled weight decay"),
      SIZE_KEY("train.epochs", train.epochs, "training epochs"),
      SIZE_KEY("train.warmup_epochs", train.warmup_epochs, "linear warmup epochs"),
      SIZE_KEY("train.batch_size", train.batch_size, "samples per step"),
      REAL_KEY("train.label_smoothing", train.label_smoothing, "uniform label smoothing mass"),
      SIZE_KEY("train.eval_every", train.eval_every, "test evaluation period in epochs (0: final only)"),
      ENUM_KEY("train.augment", train.augment, parse_augment_policy, "none|scale-translate|rotate",
               "training augmentation"),
      SIZE_KEY("eval.batch_size", eval_batch_size, "evaluation batch size"),
      SIZE_KEY("fewshot.way", fewshot.way, "classes per episode"),
      SIZE_KEY("fewshot.shot", fewshot.shot, "support samples per class"),
      SIZE_KEY("fewshot.episodes", fewshot.episodes, "independent episodes"),
      SIZE_KEY("fewshot.epochs", fewshot.epochs, "training epochs per episode"),
  };
  return entries;
}

const Entry& find(const std::string& key) {
  for (const auto& e : registry())
    if (e.name == key) return e;
  throw ConfigError("unknown config key '" + key + "' (see --help for the key list)");
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) { find(key).set(*this, trim(value)); }

std::string RunConfig::get(const std::string& key) const { return find(key).get(*this); }

void RunConfig::merge_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value', got '" + t + "'");
    }
    try {
      set(trim(t.substr(0, eq)), t.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

void RunConfig::merge_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  set(trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

std::string RunConfig::echo() const {
  std::string out;
  for (const auto& e : registry()) out += e.name + " = " + e.get(*this) + "\n";
  return out;
}

std::map<std::string, std::string> RunConfig::values() const {
  std::map<std::string, std::string> out;
  for (const auto& e : registry()) out[e.name] = e.get(*this);
  return out;
}

DatasetSpec RunConfig::dataset_spec() const {
  DatasetSpec s = data;
  s.seed = seed;
  return s;
}

ModelConfig RunConfig::model_config(std::size_t num_classes) const {
  ModelConfig m;
  m.backbone = backbone;
  m.petl = petl;
  m.head_hidden = head_hidden;
  m.num_classes = num_classes ? num_classes : data.families.size();
  return m;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t = train;
  t.seed = seed;
  return t;
}

void RunConfig::validate() const {
  if (data.families.empty()) throw ConfigError("data.families must name at least one family");
  if (data.points < backbone.num_patches || data.points < backbone.patch_size) {
    throw ConfigError("data.points must be >= backbone.num_patches and backbone.patch_size");
  }
  if (eval_batch_size < 1) throw ConfigError("eval.batch_size must be >= 1");
  model_config().validate();
  train_config().validate();
}

const std::vector<KeyInfo>& config_keys() {
  static const std::vector<KeyInfo> keys = [] {
    std::vector<KeyInfo> out;
    const RunConfig defaults;
    for (const auto& e : registry()) out.push_back({e.name, e.type, e.get(defaults), e.help});
    return out;
  }();
  return keys;
}

std::string config_keys_help() {
  std::string out = "Config keys (file lines `key = value`, or --set key=value):\n";
  for (const auto& k : config_keys()) {
    char line[512];
    std::snprintf(line, sizeof line, "  %-24s %-10s default=%-14s %s\n", k.name.c_str(),
                  k.type.size() > 10 ? "enum" : k.type.c_str(), ("'" + k.default_value + "'").c_str(),
                  (k.type.size() > 10 ? k.help + " [" + k.type + "]" : k.help).c_str());
    out += line;
  }
  return out;
}

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  RunConfig c;
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << f.rdbuf();
    c.merge_text(ss.str(), path.string());
  }
  for (const auto& o : overrides) c.merge_override(o);
  c.validate();
  return c;
}

}  // namespace pcpetl
