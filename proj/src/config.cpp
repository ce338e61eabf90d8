#include "matnet/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace matnet {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

long long to_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto* end = v.data() + v.size();
  auto [p, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || p != end) throw ConfigError("key '" + key + "': expected integer, got '" + v + "'");
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': expected number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ConfigError("key '" + key + "': expected 0/1, got '" + v + "'");
}

std::vector<Index> to_list(const std::string& key, const std::string& v) {
  std::vector<Index> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(static_cast<Index>(to_int(key, trim(item))));
  if (out.empty()) throw ConfigError("key '" + key + "': empty list");
  return out;
}

std::string from_list(const std::vector<Index>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string from_double(double d) {
  std::ostringstream os;
  os.precision(17);
  os << d;
  return os.str();
}

template <typename E>
E pick(const std::string& key, const std::string& v,
       std::initializer_list<std::pair<const char*, E>> options) {
  for (const auto& [name, value] : options) {
    if (v == name) return value;
  }
  throw ConfigError("key '" + key + "': unknown value '" + v + "'");
}

struct Key {
  const char* name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define INT_KEY(field, path)                                                                \
  Key {                                                                                     \
    field, [](RunConfig& c, const std::string& v) { c.path = static_cast<decltype(c.path)>(to_int(field, v)); }, \
        [](const RunConfig& c) { return std::to_string(c.path); }                           \
  }
#define DOUBLE_KEY(field, path)                                                             \
  Key {                                                                                     \
    field, [](RunConfig& c, const std::string& v) { c.path = to_double(field, v); },        \
        [](const RunConfig& c) { return from_double(c.path); }                              \
  }
#define BOOL_KEY(field, path)                                                               \
  Key {                                                                                     \
    field, [](RunConfig& c, const std::string& v) { c.path = to_bool(field, v); },          \
        [](const RunConfig& c) { return std::string(c.path ? "1" : "0"); }                  \
  }
#define LIST_KEY(field, path)                                                               \
  Key {                                                                                     \
    field, [](RunConfig& c, const std::string& v) { c.path = to_list(field, v); },          \
        [](const RunConfig& c) { return from_list(c.path); }                                \
  }

const std::vector<Key>& registry() {
  static const std::vector<Key> keys = {
      Key{"kind",
          [](RunConfig& c, const std::string& v) {
            c.model.kind = pick<NetKind>("kind", v, {{"unconditional", NetKind::kUnconditional},
                                                     {"conditional", NetKind::kConditional}});
          },
          [](const RunConfig& c) {
            return std::string(c.model.kind == NetKind::kConditional ? "conditional" : "unconditional");
          }},
      INT_KEY("image_channels", model.image_channels),
      INT_KEY("image_height", model.image_height),
      INT_KEY("image_width", model.image_width),
      LIST_KEY("scales", model.scales),
      LIST_KEY("modules", model.modules),
      LIST_KEY("channels", model.channels),
      INT_KEY("latent_channels", model.latent_channels),
      INT_KEY("fc_latent", model.fc_latent),
      INT_KEY("fc_modules", model.fc_modules),
      INT_KEY("fc_width", model.fc_width),
      Key{"z0_placement",
          [](RunConfig& c, const std::string& v) {
            c.model.z0_placement = pick<Z0Placement>(
                "z0_placement", v, {{"fc", Z0Placement::kFc}, {"spatial", Z0Placement::kSpatial}});
          },
          [](const RunConfig& c) {
            return std::string(c.model.z0_placement == Z0Placement::kFc ? "fc" : "spatial");
          }},
      Key{"output",
          [](RunConfig& c, const std::string& v) {
            try {
              c.model.output = likelihood_from_string(v);
            } catch (const std::invalid_argument& e) {
              throw ConfigError(std::string("key 'output': ") + e.what());
            }
          },
          [](const RunConfig& c) { return to_string(c.model.output); }},
      Key{"prior",
          [](RunConfig& c, const std::string& v) {
            c.model.prior = pick<PriorKind>("prior", v, {{"normal", PriorKind::kNormal},
                                                         {"mixture", PriorKind::kMixture}});
          },
          [](const RunConfig& c) {
            return std::string(c.model.prior == PriorKind::kMixture ? "mixture" : "normal");
          }},
      INT_KEY("mixture_k", model.mixture_k),
      BOOL_KEY("ar_head", model.ar_head),
      INT_KEY("ar_layers", model.ar_layers),
      INT_KEY("ar_channels", model.ar_channels),
      DOUBLE_KEY("lrelu_slope", model.lrelu_slope),
      BOOL_KEY("guess_input", model.guess_input),

      INT_KEY("epochs", train.epochs),
      INT_KEY("batch_size", train.batch_size),
      DOUBLE_KEY("learning_rate", train.learning_rate),
      DOUBLE_KEY("beta1", train.beta1),
      DOUBLE_KEY("beta2", train.beta2),
      DOUBLE_KEY("adam_eps", train.adam_eps),
      DOUBLE_KEY("clip_norm", train.clip_norm),
      INT_KEY("mc_samples", train.mc_samples),
      BOOL_KEY("regularizer", train.regularizer),
      DOUBLE_KEY("lambda_q", train.lambda_q),
      BOOL_KEY("regularizer_hard_samples", train.regularizer_hard_samples),
      DOUBLE_KEY("entropy_weight", train.entropy_weight),
      INT_KEY("kl_warmup", train.kl_warmup),
      INT_KEY("eval_every", train.eval_every),
      INT_KEY("eval_k", train.eval_k),
      INT_KEY("eval_max", train.eval_max),
      INT_KEY("checkpoint_every", train.checkpoint_every),
      Key{"seed",
          [](RunConfig& c, const std::string& v) {
            const long long s = to_int("seed", v);
            if (s < 0) throw ConfigError("key 'seed': must be non-negative");
            c.train.seed = static_cast<std::uint64_t>(s);
          },
          [](const RunConfig& c) { return std::to_string(c.train.seed); }},
      DOUBLE_KEY("val_fraction", train.val_fraction),
      Key{"binarize",
          [](RunConfig& c, const std::string& v) {
            c.train.binarize = pick<Binarize>("binarize", v, {{"none", Binarize::kNone},
                                                              {"dynamic", Binarize::kDynamic},
                                                              {"fixed", Binarize::kFixed}});
          },
          [](const RunConfig& c) {
            switch (c.train.binarize) {
              case Binarize::kDynamic: return std::string("dynamic");
              case Binarize::kFixed: return std::string("fixed");
              default: return std::string("none");
            }
          }},
      BOOL_KEY("dequantize", train.dequantize),
      Key{"mask",
          [](RunConfig& c, const std::string& v) {
            c.train.mask = pick<MaskKind>("mask", v, {{"none", MaskKind::kNone},
                                                      {"quadrants", MaskKind::kQuadrants},
                                                      {"occluders", MaskKind::kOccluders}});
          },
          [](const RunConfig& c) {
            switch (c.train.mask) {
              case MaskKind::kQuadrants: return std::string("quadrants");
              case MaskKind::kOccluders: return std::string("occluders");
              default: return std::string("none");
            }
          }},
      INT_KEY("q_known", train.q_known),
      INT_KEY("max_updates", train.max_updates),
      DOUBLE_KEY("time_budget_s", train.time_budget_s),
      INT_KEY("shards", train.shards),
      INT_KEY("threads", train.threads),
      BOOL_KEY("record_wall_time", train.record_wall_time),
  };
  return keys;
}

#undef INT_KEY
#undef DOUBLE_KEY
#undef BOOL_KEY
#undef LIST_KEY

}  // namespace

Index ModelConfig::depth() const {
  Index d = fc_modules;
  for (Index m : modules) d += m;
  return d;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (scales.empty()) fail("missing required key 'scales'");
  if (modules.size() != scales.size()) fail("'modules' needs one entry per scale");
  if (channels.size() != scales.size()) fail("'channels' needs one entry per scale");
  if (image_channels <= 0 || image_height <= 0 || image_width <= 0) fail("image dims must be positive");
  if (image_height != image_width) fail("only square images are supported");
  if (scales[0] != image_height && scales[0] * 2 != image_height) {
    fail("first scale must equal the image size or half of it");
  }
  for (std::size_t i = 0; i < scales.size(); ++i) {
    if (scales[i] <= 0 || channels[i] <= 0 || modules[i] < 1) fail("scales/channels/modules must be positive");
    if (i > 0 && scales[i - 1] != 2 * scales[i]) fail("consecutive scales must halve");
  }
  if (latent_channels <= 0 || fc_latent <= 0 || fc_width <= 0 || fc_modules < 0) {
    fail("latent sizes must be positive");
  }
  if (z0_placement == Z0Placement::kSpatial && fc_modules > 0) {
    fail("z0_placement=spatial cannot be combined with fc_modules");
  }
  if (prior == PriorKind::kMixture && mixture_k < 1) fail("mixture_k must be >= 1");
  if (prior == PriorKind::kMixture && kind == NetKind::kConditional) {
    fail("mixture prior applies to unconditional nets only");
  }
  if (guess_input && kind != NetKind::kConditional) fail("guess_input requires kind=conditional");
  if (ar_head && (ar_layers < 2 || ar_channels <= 0)) fail("ar_head needs ar_layers >= 2");
  if (!(lrelu_slope > 0.0 && lrelu_slope < 1.0)) fail("lrelu_slope must be in (0,1)");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (epochs < 0 || batch_size <= 0 || mc_samples <= 0 || eval_k <= 0 || shards <= 0 || threads <= 0) {
    fail("epochs, batch_size, mc_samples, eval_k, shards, threads must be positive");
  }
  if (!(learning_rate > 0) || !(clip_norm > 0) || !(adam_eps > 0)) fail("learning_rate, clip_norm, adam_eps must be positive");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) fail("betas must be in [0,1)");
  if (lambda_q < 0 || entropy_weight < 0) fail("lambda_q and entropy_weight must be non-negative");
  if (val_fraction < 0 || val_fraction >= 1) fail("val_fraction must be in [0,1)");
  if (q_known < 0 || q_known > 3) fail("q_known must be 0-3");
  if (shards > batch_size) fail("shards cannot exceed batch_size");
}

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& k : registry()) {
    if (key == k.name) {
      k.set(*this, trim(value));
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

std::string RunConfig::canonical() const {
  std::string out;
  for (const auto& k : registry()) {
    if (std::string(k.name) == "scales" && model.scales.empty()) continue;
    if ((std::string(k.name) == "modules" || std::string(k.name) == "channels") &&
        (k.get(*this).empty())) {
      continue;
    }
    out += std::string(k.name) + "=" + k.get(*this) + "\n";
  }
  return out;
}

std::vector<std::string> RunConfig::keys() {
  std::vector<std::string> out;
  for (const auto& k : registry()) out.emplace_back(k.name);
  return out;
}

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> out;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    }
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

RunConfig RunConfig::parse(const std::string& text, const std::vector<std::string>& required) {
  const auto kv = parse_key_values(text);
  for (const auto& r : required) {
    if (!kv.count(r)) throw ConfigError("missing required key '" + r + "'");
  }
  RunConfig c;
  for (const auto& [k, v] : kv) c.set(k, v);
  // Per-scale lists default to the scale count.
  if (!kv.count("modules")) c.model.modules.assign(c.model.scales.size(), 2);
  if (!kv.count("channels")) c.model.channels.assign(c.model.scales.size(), 16);
  return c;
}

RunConfig RunConfig::load(const std::string& path, const std::vector<std::string>& required) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str(), required);
}

}  // namespace matnet
