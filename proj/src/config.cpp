#include "throttle/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <json.hpp>

#include "throttle/error.hpp"

namespace throttle {

using json = nlohmann::json;

ExperimentConfig::ExperimentConfig() {
  controller.optimizer.kind = OptimizerConfig::Kind::kAdam;
  controller.optimizer.lr = 0.01;
  controller.optimizer.weight_decay = 0.0;
  controller.schedule.cosine = false;
}

namespace {

struct Field {
  std::string key;
  std::function<void(ExperimentConfig&, const json&)> set;
  std::function<json(const ExperimentConfig&)> get;
};

[[noreturn]] void bad(const std::string& what) { throw ConfigError(what); }

std::size_t as_size(const json& v) {
  if (v.is_number_unsigned()) return v.get<std::size_t>();
  if (v.is_number_integer()) bad("expected a non-negative integer, got " + v.dump());
  bad("expected an integer, got " + v.dump());
}

std::uint64_t as_u64(const json& v) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  bad("expected a 64-bit unsigned integer, got " + v.dump());
}

double as_double(const json& v) {
  if (v.is_number()) return v.get<double>();
  bad("expected a number, got " + v.dump());
}

bool as_bool(const json& v) {
  if (v.is_boolean()) return v.get<bool>();
  bad("expected true or false, got " + v.dump());
}

std::string as_string(const json& v) {
  if (v.is_string()) return v.get<std::string>();
  bad("expected a string, got " + v.dump());
}

std::vector<std::size_t> as_size_list(const json& v) {
  if (!v.is_array()) bad("expected a list of integers, got " + v.dump());
  std::vector<std::size_t> out;
  for (const auto& e : v) out.push_back(as_size(e));
  return out;
}

std::string choice(const json& v, std::initializer_list<const char*> options) {
  const std::string s = as_string(v);
  std::string list;
  for (const char* o : options) {
    if (s == o) return s;
    list += list.empty() ? o : std::string(", ") + o;
  }
  bad("unknown value '" + s + "' (expected one of " + list + ")");
}

const char* optimizer_name(OptimizerConfig::Kind k) { return k == OptimizerConfig::Kind::kAdam ? "adam" : "sgd"; }

const char* u_name(UDistribution::Kind k) {
  switch (k) {
    case UDistribution::Kind::kUniform01: return "uniform";
    case UDistribution::Kind::kAnnealed: return "annealed";
    case UDistribution::Kind::kFixed: return "fixed";
  }
  return "uniform";
}

template <typename T, typename Conv>
Field plain(std::string key, T ExperimentConfig::*member, Conv conv) {
  return {std::move(key), [member, conv](ExperimentConfig& c, const json& v) { c.*member = conv(v); },
          [member](const ExperimentConfig& c) { return json(c.*member); }};
}

// Keys shared by the [train] and [controller] sections.
void add_phase_fields(std::vector<Field>& fields, const std::string& section, TrainConfig ExperimentConfig::*phase) {
  auto f = [&](const std::string& name, std::function<void(TrainConfig&, const json&)> set,
               std::function<json(const TrainConfig&)> get) {
    fields.push_back({section + "." + name,
                      [phase, set](ExperimentConfig& c, const json& v) { set(c.*phase, v); },
                      [phase, get](const ExperimentConfig& c) { return get(c.*phase); }});
  };
  f("epochs", [](TrainConfig& t, const json& v) { t.epochs = as_size(v); },
    [](const TrainConfig& t) { return json(t.epochs); });
  f("batch_size", [](TrainConfig& t, const json& v) { t.batch_size = as_size(v); },
    [](const TrainConfig& t) { return json(t.batch_size); });
  f("optimizer",
    [](TrainConfig& t, const json& v) {
      t.optimizer.kind = choice(v, {"sgd", "adam"}) == "adam" ? OptimizerConfig::Kind::kAdam
                                                              : OptimizerConfig::Kind::kSgdMomentum;
    },
    [](const TrainConfig& t) { return json(optimizer_name(t.optimizer.kind)); });
  f("lr", [](TrainConfig& t, const json& v) { t.optimizer.lr = as_double(v); },
    [](const TrainConfig& t) { return json(t.optimizer.lr); });
  f("momentum", [](TrainConfig& t, const json& v) { t.optimizer.momentum = as_double(v); },
    [](const TrainConfig& t) { return json(t.optimizer.momentum); });
  f("weight_decay", [](TrainConfig& t, const json& v) { t.optimizer.weight_decay = as_double(v); },
    [](const TrainConfig& t) { return json(t.optimizer.weight_decay); });
  f("clip_norm", [](TrainConfig& t, const json& v) { t.optimizer.clip_norm = as_double(v); },
    [](const TrainConfig& t) { return json(t.optimizer.clip_norm); });
  f("beta1", [](TrainConfig& t, const json& v) { t.optimizer.beta1 = as_double(v); },
    [](const TrainConfig& t) { return json(t.optimizer.beta1); });
  f("beta2", [](TrainConfig& t, const json& v) { t.optimizer.beta2 = as_double(v); },
    [](const TrainConfig& t) { return json(t.optimizer.beta2); });
  f("epsilon", [](TrainConfig& t, const json& v) { t.optimizer.epsilon = as_double(v); },
    [](const TrainConfig& t) { return json(t.optimizer.epsilon); });
  f("schedule", [](TrainConfig& t, const json& v) { t.schedule.cosine = choice(v, {"cosine", "constant"}) == "cosine"; },
    [](const TrainConfig& t) { return json(t.schedule.cosine ? "cosine" : "constant"); });
  f("eta_min", [](TrainConfig& t, const json& v) { t.schedule.eta_min = as_double(v); },
    [](const TrainConfig& t) { return json(t.schedule.eta_min); });
  f("t0", [](TrainConfig& t, const json& v) { t.schedule.t0 = as_double(v); },
    [](const TrainConfig& t) { return json(t.schedule.t0); });
  f("t_mult", [](TrainConfig& t, const json& v) { t.schedule.t_mult = as_double(v); },
    [](const TrainConfig& t) { return json(t.schedule.t_mult); });
  f("u",
    [](TrainConfig& t, const json& v) {
      const std::string s = choice(v, {"uniform", "annealed", "fixed"});
      t.u.kind = s == "fixed"      ? UDistribution::Kind::kFixed
                 : s == "annealed" ? UDistribution::Kind::kAnnealed
                                   : UDistribution::Kind::kUniform01;
    },
    [](const TrainConfig& t) { return json(u_name(t.u.kind)); });
  f("u_t0", [](TrainConfig& t, const json& v) { t.u.t0 = as_double(v); },
    [](const TrainConfig& t) { return json(t.u.t0); });
  f("u_step", [](TrainConfig& t, const json& v) { t.u.step = as_double(v); },
    [](const TrainConfig& t) { return json(t.u.step); });
  f("u_fixed", [](TrainConfig& t, const json& v) { t.u.fixed = as_double(v); },
    [](const TrainConfig& t) { return json(t.u.fixed); });
  f("flip", [](TrainConfig& t, const json& v) { t.flip = as_bool(v); },
    [](const TrainConfig& t) { return json(t.flip); });
  f("pad_crop", [](TrainConfig& t, const json& v) { t.pad_crop = as_size(v); },
    [](const TrainConfig& t) { return json(t.pad_crop); });
}

std::vector<Field> make_fields() {
  std::vector<Field> fields;
  fields.push_back(plain("run.seed", &ExperimentConfig::seed, as_u64));
  fields.push_back(plain("run.out", &ExperimentConfig::out, as_string));

  auto model = [&](const std::string& name, std::function<void(ArchConfig&, const json&)> set,
                   std::function<json(const ArchConfig&)> get) {
    fields.push_back({"model." + name, [set](ExperimentConfig& c, const json& v) { set(c.model, v); },
                      [get](const ExperimentConfig& c) { return get(c.model); }});
  };
  model("name", [](ArchConfig& m, const json& v) {
          m = ArchConfig::defaults(choice(v, {"t-mlp", "t-vgg", "t-resnext-w", "t-resnet-d", "t-densenet"}));
        },
        [](const ArchConfig& m) { return json(m.name); });
  model("components", [](ArchConfig& m, const json& v) { m.components = as_size(v); },
        [](const ArchConfig& m) { return json(m.components); });
  model("stages", [](ArchConfig& m, const json& v) { m.stages = as_size(v); },
        [](const ArchConfig& m) { return json(m.stages); });
  model("blocks", [](ArchConfig& m, const json& v) { m.blocks = as_size(v); },
        [](const ArchConfig& m) { return json(m.blocks); });
  model("widths", [](ArchConfig& m, const json& v) { m.widths = as_size_list(v); },
        [](const ArchConfig& m) { return json(m.widths); });
  model("growth", [](ArchConfig& m, const json& v) { m.growth = as_size(v); },
        [](const ArchConfig& m) { return json(m.growth); });
  model("head_width", [](ArchConfig& m, const json& v) { m.head_width = as_size(v); },
        [](const ArchConfig& m) { return json(m.head_width); });

  auto data = [&](const std::string& name, std::function<void(DataConfig&, const json&)> set,
                  std::function<json(const DataConfig&)> get) {
    fields.push_back({"data." + name, [set](ExperimentConfig& c, const json& v) { set(c.data, v); },
                      [get](const ExperimentConfig& c) { return get(c.data); }});
  };
  data("source", [](DataConfig& d, const json& v) { d.source = choice(v, {"synthetic", "idx", "cifar"}); },
       [](const DataConfig& d) { return json(d.source); });
  data("kind", [](DataConfig& d, const json& v) { d.kind = choice(v, {"glyphs", "blobs", "xor-grid"}); },
       [](const DataConfig& d) { return json(d.kind); });
  data("train_count", [](DataConfig& d, const json& v) { d.train_count = as_size(v); },
       [](const DataConfig& d) { return json(d.train_count); });
  data("test_count", [](DataConfig& d, const json& v) { d.test_count = as_size(v); },
       [](const DataConfig& d) { return json(d.test_count); });
  data("size", [](DataConfig& d, const json& v) { d.synth.size = as_size(v); },
       [](const DataConfig& d) { return json(d.synth.size); });
  data("channels", [](DataConfig& d, const json& v) { d.synth.channels = as_size(v); },
       [](const DataConfig& d) { return json(d.synth.channels); });
  data("classes", [](DataConfig& d, const json& v) { d.synth.classes = as_size(v); },
       [](const DataConfig& d) { return json(d.synth.classes); });
  data("noise", [](DataConfig& d, const json& v) { d.synth.noise = as_double(v); },
       [](const DataConfig& d) { return json(d.synth.noise); });
  data("train_images", [](DataConfig& d, const json& v) { d.train_images = as_string(v); },
       [](const DataConfig& d) { return json(d.train_images); });
  data("train_labels", [](DataConfig& d, const json& v) { d.train_labels = as_string(v); },
       [](const DataConfig& d) { return json(d.train_labels); });
  data("test_images", [](DataConfig& d, const json& v) { d.test_images = as_string(v); },
       [](const DataConfig& d) { return json(d.test_images); });
  data("test_labels", [](DataConfig& d, const json& v) { d.test_labels = as_string(v); },
       [](const DataConfig& d) { return json(d.test_labels); });
  data("cifar_dir", [](DataConfig& d, const json& v) { d.cifar_dir = as_string(v); },
       [](const DataConfig& d) { return json(d.cifar_dir); });
  data("normalize", [](DataConfig& d, const json& v) { d.normalize = as_bool(v); },
       [](const DataConfig& d) { return json(d.normalize); });

  add_phase_fields(fields, "train", &ExperimentConfig::train);
  fields.push_back({"train.gating",
                    [](ExperimentConfig& c, const json& v) { c.train.nested = choice(v, {"nested", "independent"}) == "nested"; },
                    [](const ExperimentConfig& c) { return json(c.train.nested ? "nested" : "independent"); }});
  fields.push_back({"train.per_module_k", [](ExperimentConfig& c, const json& v) { c.train.per_module_k = as_bool(v); },
                    [](const ExperimentConfig& c) { return json(c.train.per_module_k); }});
  fields.push_back({"train.per_example_u", [](ExperimentConfig& c, const json& v) { c.train.per_example_u = as_bool(v); },
                    [](const ExperimentConfig& c) { return json(c.train.per_example_u); }});

  add_phase_fields(fields, "controller", &ExperimentConfig::controller);
  auto ctl = [&](const std::string& name, std::function<void(ExperimentConfig&, const json&)> set,
                 std::function<json(const ExperimentConfig&)> get) {
    fields.push_back({"controller." + name, std::move(set), std::move(get)});
  };
  ctl("hidden", [](ExperimentConfig& c, const json& v) { c.controller_hidden = as_size(v); },
      [](const ExperimentConfig& c) { return json(c.controller_hidden); });
  ctl("estimator",
      [](ExperimentConfig& c, const json& v) {
        c.controller.estimator = choice(v, {"reinforce", "concrete"}) == "concrete"
                                     ? TrainConfig::Estimator::kConcrete
                                     : TrainConfig::Estimator::kReinforce;
      },
      [](const ExperimentConfig& c) {
        return json(c.controller.estimator == TrainConfig::Estimator::kConcrete ? "concrete" : "reinforce");
      });
  ctl("temperature", [](ExperimentConfig& c, const json& v) { c.controller.temperature = as_double(v); },
      [](const ExperimentConfig& c) { return json(c.controller.temperature); });
  ctl("samples", [](ExperimentConfig& c, const json& v) { c.controller.samples = as_size(v); },
      [](const ExperimentConfig& c) { return json(c.controller.samples); });
  ctl("baseline", [](ExperimentConfig& c, const json& v) { c.controller.baseline = as_bool(v); },
      [](const ExperimentConfig& c) { return json(c.controller.baseline); });
  ctl("alpha_anneal_epochs", [](ExperimentConfig& c, const json& v) { c.controller.alpha_anneal_epochs = as_double(v); },
      [](const ExperimentConfig& c) { return json(c.controller.alpha_anneal_epochs); });
  // The penalty is shared: phase 1 logs it, phase 2 optimizes it.
  ctl("penalty",
      [](ExperimentConfig& c, const json& v) {
        c.controller.penalty.form =
            choice(v, {"dist", "hinge"}) == "hinge" ? PenaltySpec::Form::kHinge : PenaltySpec::Form::kDist;
        c.train.penalty.form = c.controller.penalty.form;
      },
      [](const ExperimentConfig& c) {
        return json(c.controller.penalty.form == PenaltySpec::Form::kHinge ? "hinge" : "dist");
      });
  ctl("exponent",
      [](ExperimentConfig& c, const json& v) {
        const std::size_t p = as_size(v);
        if (p != 1 && p != 2) bad("expected 1 or 2, got " + v.dump());
        c.controller.penalty.exponent = c.train.penalty.exponent = static_cast<int>(p);
      },
      [](const ExperimentConfig& c) { return json(c.controller.penalty.exponent); });
  ctl("lambda",
      [](ExperimentConfig& c, const json& v) { c.controller.penalty.lambda = c.train.penalty.lambda = as_double(v); },
      [](const ExperimentConfig& c) { return json(c.controller.penalty.lambda); });

  fields.push_back({"sweep.strategy",
                    [](ExperimentConfig& c, const json& v) {
                      c.sweep.strategy = parse_strategy(choice(v, {"nested", "independent", "all-on", "learned"}));
                    },
                    [](const ExperimentConfig& c) { return json(strategy_name(c.sweep.strategy)); }});
  fields.push_back({"sweep.points",
                    [](ExperimentConfig& c, const json& v) {
                      const std::size_t n = as_size(v);
                      if (n < 2) bad("expected at least 2 points, got " + v.dump());
                      c.sweep.grid = default_grid(n);
                    },
                    [](const ExperimentConfig& c) { return json(c.sweep.grid.size()); }});
  fields.push_back({"sweep.batch_size", [](ExperimentConfig& c, const json& v) { c.sweep.batch_size = as_size(v); },
                    [](const ExperimentConfig& c) { return json(c.sweep.batch_size); }});
  fields.push_back({"sweep.threads", [](ExperimentConfig& c, const json& v) { c.sweep.threads = as_size(v); },
                    [](const ExperimentConfig& c) { return json(c.sweep.threads); }});
  return fields;
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = make_fields();
  return table;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Drops a trailing `# comment` that is not inside a quoted string.
std::string strip_comment(const std::string& s) {
  bool quoted = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '"' && (i == 0 || s[i - 1] != '\\')) quoted = !quoted;
    if (s[i] == '#' && !quoted) return s.substr(0, i);
  }
  return s;
}

bool valid_name(const std::string& s) {
  if (s.empty()) return false;
  for (char ch : s)
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-')) return false;
  return true;
}

json decode(const std::string& text) {
  json v = json::parse(text, nullptr, false);
  if (!v.is_discarded()) return v;
  for (char ch : text)
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-' || ch == '.' || ch == '/'))
      throw ConfigError("cannot parse value '" + text + "'");
  return json(text);
}

}  // namespace

std::vector<ConfigAssignment> parse_config_text(const std::string& text, const std::string& source) {
  std::vector<ConfigAssignment> out;
  std::istringstream in(text);
  std::string line, section;
  for (std::size_t number = 1; std::getline(in, line); ++number) {
    const std::string where = source + ":" + std::to_string(number);
    const std::string body = trim(strip_comment(line));
    if (body.empty()) continue;
    if (body.front() == '[') {
      if (body.back() != ']') throw ConfigError(where + ": unterminated section header");
      section = trim(body.substr(1, body.size() - 2));
      if (!valid_name(section)) throw ConfigError(where + ": invalid section name '" + section + "'");
      continue;
    }
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = trim(body.substr(0, eq));
    const std::string value = trim(body.substr(eq + 1));
    if (!valid_name(key)) throw ConfigError(where + ": invalid key '" + key + "'");
    if (value.empty()) throw ConfigError(where + ": missing value for '" + key + "'");
    if (section.empty()) throw ConfigError(where + ": key '" + key + "' outside any section");
    out.push_back({section + "." + key, value, where});
  }
  return out;
}

std::vector<ConfigAssignment> read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str(), path.string());
}

ConfigAssignment parse_override(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw ConfigError("--set " + text + ": expected KEY=VALUE");
  const std::string key = trim(text.substr(0, eq));
  const std::string value = trim(text.substr(eq + 1));
  if (key.find('.') == std::string::npos) throw ConfigError("--set " + text + ": key must be section.field");
  if (value.empty()) throw ConfigError("--set " + text + ": missing value");
  return {key, value, "--set"};
}

ExperimentConfig resolve_config(const std::vector<ConfigAssignment>& assignments) {
  std::map<std::string, const Field*> by_key;
  for (const Field& f : fields()) by_key[f.key] = &f;

  // Last assignment of each key wins; model.name applies first.
  std::map<std::string, const ConfigAssignment*> last;
  for (const auto& a : assignments) {
    if (!by_key.count(a.key)) throw ConfigError(a.origin + ": unknown key '" + a.key + "'");
    last[a.key] = &a;
  }
  ExperimentConfig cfg;
  auto apply = [&](const Field& f) {
    const auto it = last.find(f.key);
    if (it == last.end()) return;
    try {
      f.set(cfg, decode(it->second->value));
    } catch (const ConfigError& e) {
      throw ConfigError(it->second->origin + ": " + f.key + ": " + e.what());
    }
  };
  apply(*by_key.at("model.name"));
  for (const Field& f : fields())
    if (f.key != "model.name") apply(f);

  // Validation messages start with the offending key; prefix its origin.
  auto check = [&](const auto& fn, bool controller_phase) {
    try {
      fn();
    } catch (const ConfigError& e) {
      std::string msg = e.what();
      if (controller_phase && msg.rfind("train.", 0) == 0) msg = "controller." + msg.substr(6);
      const std::string key = msg.substr(0, msg.find(' '));
      const auto it = last.find(key);
      throw ConfigError(it == last.end() ? msg : it->second->origin + ": " + msg);
    }
  };
  check([&] { cfg.train.validate(); }, false);
  check([&] { cfg.controller.validate(); }, true);
  check([&] { cfg.sweep.validate(); }, false);
  if (cfg.controller_hidden < 1) throw ConfigError("controller.hidden must be >= 1");
  if (cfg.data.train_count < 1) throw ConfigError("data.train_count must be >= 1");
  if (cfg.data.test_count < 1) throw ConfigError("data.test_count must be >= 1");
  cfg.sweep.seed = cfg.seed;
  cfg.train.seed = cfg.seed;
  cfg.controller.seed = cfg.seed;
  return cfg;
}

std::string render_config(const ExperimentConfig& cfg) {
  std::ostringstream out;
  std::string section;
  for (const Field& f : fields()) {
    const auto dot = f.key.find('.');
    const std::string s = f.key.substr(0, dot);
    if (s != section) {
      out << (section.empty() ? "" : "\n") << '[' << s << "]\n";
      section = s;
    }
    const json v = f.get(cfg);
    out << f.key.substr(dot + 1) << " = " << (v.is_array() ? v.dump(-1, ' ', false) : v.dump()) << '\n';
  }
  return out.str();
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const Field& f : fields()) keys.push_back(f.key);
  return keys;
}

}  // namespace throttle
