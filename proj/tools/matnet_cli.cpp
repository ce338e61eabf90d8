// matnet: train, evaluate, sample from, and impute with MatNet models.
//
// Exit codes: 0 ok, 1 config or usage error, 2 data error, 3 numeric
// failure, 4 anything else.

#include "matnet/training.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>

using namespace matnet;
namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSampleStream = 0x7361;
constexpr std::uint64_t kImputeStream = 0x696d;

enum ExitCode { kOk = 0, kConfigExit = 1, kDataExit = 2, kNumericExit = 3, kOtherExit = 4 };

struct Globals {
  std::string config_path;
  std::vector<std::string> sets;              // --set key=value
  std::map<std::string, std::string> flags;   // --<key> value
  bool checked = false;
};

/// Command-line overrides in application order: --<key> flags, then --set.
std::vector<std::pair<std::string, std::string>> overrides(const Globals& g) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [k, v] : g.flags) {
    if (!v.empty()) out.emplace_back(k, v);
  }
  for (const auto& s : g.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    out.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  return out;
}

std::string read_text(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Dataset load_images(const std::string& images, const std::string& labels) {
  if (images.empty()) throw DataError("no --data given");
  return load_idx(images, labels);
}

/// Applies overrides to a checkpoint's run config; only training-side keys
/// may change.
RunConfig with_overrides(const RunConfig& stored, const Globals& g) {
  RunConfig run = stored;
  for (const auto& [k, v] : overrides(g)) run.set(k, v);
  RunConfig model_only = run;
  model_only.train = stored.train;
  if (model_only.canonical() != stored.canonical()) {
    throw ConfigError("model keys cannot be overridden for an existing checkpoint");
  }
  run.train.validate();
  return run;
}

/// Fits the image dims to the data unless the config pins them.
void fit_image_dims(RunConfig& run, const std::map<std::string, std::string>& given, const TensorF& images) {
  const Index dims[3] = {images.dim(1), images.dim(2), images.dim(3)};
  Index* fields[3] = {&run.model.image_channels, &run.model.image_height, &run.model.image_width};
  const char* names[3] = {"image_channels", "image_height", "image_width"};
  for (int i = 0; i < 3; ++i) {
    if (given.count(names[i]) && *fields[i] != dims[i]) {
      throw DataError(std::string(names[i]) + "=" + std::to_string(*fields[i]) + " but the data has " +
                      std::to_string(dims[i]));
    }
    *fields[i] = dims[i];
  }
}

TensorF clamp_unit(TensorF t) {
  t.array() = t.array().max(0.0f).min(1.0f);
  return t;
}

Index grid_cols(Index n) { return std::max<Index>(1, static_cast<Index>(std::ceil(std::sqrt(static_cast<double>(n))))); }

/// Parses `quadrants`, `quadrants=q`, or `occluders`; anything else is a
/// mask file path.
std::optional<MaskSpec> parse_mask(const std::string& text) {
  MaskSpec spec;
  if (text == "quadrants") return spec;
  if (text.rfind("quadrants=", 0) == 0) {
    const std::string q = text.substr(10);
    if (q != "1" && q != "2" && q != "3") throw ConfigError("quadrants=q needs q in 1..3, got '" + q + "'");
    spec.q_known = std::stoi(q);
    return spec;
  }
  if (text == "occluders") {
    spec.kind = MaskKind::kOccluders;
    return spec;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string data, labels, val, val_labels, out, first_stage;
  bool resume = false;
};

int cmd_train(const Globals& g, const TrainArgs& a) {
  const std::string text = g.config_path.empty() ? "" : read_text(g.config_path);
  std::map<std::string, std::string> given = parse_key_values(text);
  RunConfig run = RunConfig::parse(text, {});
  for (const auto& [k, v] : overrides(g)) {
    run.set(k, v);
    given[k] = v;
  }
  if (!given.count("scales")) throw ConfigError("missing required key 'scales'");
  if (!given.count("modules")) run.model.modules.assign(run.model.scales.size(), 2);
  if (!given.count("channels")) run.model.channels.assign(run.model.scales.size(), 16);
  if (a.out.empty()) throw ConfigError("train needs --out");
  if (fs::exists(a.out) && !fs::is_empty(a.out) && !a.resume) {
    throw ConfigError("run directory " + a.out + " is not empty (use --resume to continue)");
  }

  Dataset data = load_images(a.data, a.labels);
  fit_image_dims(run, given, data.images);
  run.validate();

  Dataset train_set, val_set;
  if (!a.val.empty()) {
    train_set = std::move(data);
    val_set = load_idx(a.val, a.val_labels);
  } else {
    std::tie(train_set, val_set) = split_dataset(data, run.train.val_fraction, run.train.seed);
  }

  std::optional<LoadedCheckpoint> first;
  if (run.model.guess_input) {
    if (a.first_stage.empty()) throw ConfigError("guess_input=1 needs --first-stage");
    first = load_checkpoint(a.first_stage);
  }

  Rng init(run.train.seed);
  MatNet<float> net(run.model, init);
  TrainOptions opt;
  opt.out_dir = a.out;
  opt.resume = a.resume;
  opt.first_stage = first ? &first->net : nullptr;
  const TrainSummary s = train(net, train_set, val_set, run, opt);
  std::cout << "updates " << s.updates << " epochs " << s.epochs << " skipped " << s.skipped;
  if (val_set.size() > 0) std::cout << " val_nll " << s.last_val_nll;
  std::cout << "\n";
  if (s.updates > 0 && s.skipped == s.updates) {
    std::cerr << "error: every update had a non-finite loss or gradient\n";
    return kNumericExit;
  }
  return kOk;
}

// ----------------------------------------------------------------- eval

struct EvalArgs {
  std::string ckpt, data, labels, csv, split = "all";
  Index k = 100;
  Index max = 0;
};

int cmd_eval(const Globals& g, const EvalArgs& a) {
  LoadedCheckpoint ck = load_checkpoint(a.ckpt);
  RunConfig run = with_overrides(ck.run, g);
  Dataset data = load_images(a.data, a.labels);
  if (data.images.shape().with_dim(0, 1) != ck.net.image_shape(1)) {
    throw DataError("data " + data.images.shape().str() + " does not match the model input " +
                    ck.net.image_shape(1).str());
  }
  if (a.split == "val") {
    data = split_dataset(data, run.train.val_fraction, run.train.seed).second;
  } else if (a.split != "all") {
    throw ConfigError("--split must be 'all' or 'val'");
  }
  run.train.eval_max = a.max;
  if (ck.net.config().guess_input) throw ConfigError("eval scores single-stage models");
  const Observation<float> obs = validation_observation(ck.net, data, run.train);
  const std::vector<double> nll = validation_nlls(ck.net, obs, a.k, run.train.seed);
  const double n = static_cast<double>(nll.size());
  const double mean = std::accumulate(nll.begin(), nll.end(), 0.0) / n;
  double var = 0;
  for (double v : nll) var += (v - mean) * (v - mean);
  const double se = nll.size() > 1 ? std::sqrt(var / (n - 1) / n) : 0.0;
  const double bits = bits_per_dim(mean, ck.net.config());

  std::cout << "examples " << nll.size() << " k " << a.k << " nll " << mean << " se " << se;
  if (!std::isnan(bits)) std::cout << " bits_per_dim " << bits;
  std::cout << "\n";

  const fs::path csv = a.csv.empty() ? fs::path(a.ckpt).parent_path() / "eval.csv" : fs::path(a.csv);
  const bool fresh = !fs::exists(csv);
  std::ofstream os(csv, std::ios::app);
  if (!os) throw DataError("cannot write " + csv.string());
  if (fresh) os << "checkpoint,data,split,k,examples,nll,se,bits_per_dim\n";
  os.precision(10);
  os << a.ckpt << "," << a.data << "," << a.split << "," << a.k << "," << nll.size() << "," << mean << "," << se
     << "," << (std::isnan(bits) ? std::string() : std::to_string(bits)) << "\n";
  return kOk;
}

// --------------------------------------------------------------- sample

struct SampleArgs {
  std::string ckpt, out;
  Index n = 64;
  bool mean = false;
};

int cmd_sample(const Globals& g, const SampleArgs& a) {
  LoadedCheckpoint ck = load_checkpoint(a.ckpt);
  const RunConfig run = with_overrides(ck.run, g);
  if (ck.net.conditional()) throw ConfigError("conditional models need known pixels; use impute");
  if (a.n <= 0) throw ConfigError("--n must be positive");
  Rng rng(run.train.seed, kSampleStream);
  const TensorF images = clamp_unit(ck.net.generate(a.n, rng, nullptr, a.mean));
  const Index cols = grid_cols(a.n);
  emit_grid(images, (a.n + cols - 1) / cols, cols, a.out);
  std::cout << "wrote " << a.n << " samples to " << a.out << "\n";
  return kOk;
}

// --------------------------------------------------------------- impute

struct ImputeArgs {
  std::string ckpt, second, data, labels, mask = "quadrants", out;
  Index n = 16;
  Index stages = 1;
  bool mean = false;
};

int cmd_impute(const Globals& g, const ImputeArgs& a) {
  if (a.stages != 1 && a.stages != 2) throw ConfigError("--stages must be 1 or 2");
  if (a.stages == 2 && a.second.empty()) throw ConfigError("--stages 2 needs --ckpt2");
  LoadedCheckpoint first = load_checkpoint(a.ckpt);
  std::optional<LoadedCheckpoint> second;
  if (a.stages == 2) {
    second = load_checkpoint(a.second);
    if (!second->net.config().guess_input) throw ConfigError("--ckpt2 must be a second-stage (guess_input) model");
  }
  const MatNet<float>& last = second ? second->net : first.net;
  if (!first.net.conditional() || first.net.config().guess_input) {
    throw ConfigError("--ckpt must be a first-stage conditional model");
  }
  const RunConfig run = with_overrides(second ? second->run : first.run, g);

  const Dataset data = load_images(a.data, a.labels).head(a.n);
  if (data.images.shape().with_dim(0, 1) != last.image_shape(1)) {
    throw DataError("data " + data.images.shape().str() + " does not match the model input " +
                    last.image_shape(1).str());
  }
  Observation<float> obs;
  obs.x = epoch_view(data.images, run.train.binarize, run.train.dequantize, run.train.seed, 0);
  Rng rng(run.train.seed, kImputeStream);
  if (const auto spec = parse_mask(a.mask)) {
    obs.mask = make_mask(*spec, obs.x.shape(), rng);
  } else {
    obs.mask = load_mask_file(a.mask, obs.x.shape());
  }
  if (second) obs.guess = first.net.generate(0, rng, &obs, a.mean);
  const TensorF filled = clamp_unit(last.generate(0, rng, &obs, a.mean));

  // Rows of (input, masked input with unknown pixels grey, completion).
  const Index n = obs.batch(), inner = obs.x.shape().inner();
  TensorF grid(obs.x.shape().with_dim(0, 3 * n));
  const TensorF shown = clamp_unit(obs.x);
  for (Index i = 0; i < n; ++i) {
    const auto x = shown.array().segment(i * inner, inner);
    const auto m = obs.mask.array().segment(i * inner, inner);
    grid.array().segment((3 * i) * inner, inner) = x;
    grid.array().segment((3 * i + 1) * inner, inner) = x * m + 0.5f * (1.0f - m);
    grid.array().segment((3 * i + 2) * inner, inner) = filled.array().segment(i * inner, inner);
  }
  emit_grid(grid, n, 3, a.out);
  std::cout << "wrote " << n << " imputations to " << a.out << "\n";
  return kOk;
}

// ----------------------------------------------------------- kl-profile

struct ProfileArgs {
  std::vector<std::string> inputs;
  std::string out;
  bool by_group = false;
};

std::vector<std::string> read_groups(const fs::path& path) {
  std::vector<std::string> groups;
  std::ifstream is(path);
  if (!is) return groups;
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    const auto comma = line.find(',');
    if (comma != std::string::npos) groups.push_back(line.substr(comma + 1));
  }
  return groups;
}

/// Rows from several profiles are merged by update; updates present in
/// more than one input are averaged.
int cmd_kl_profile(const ProfileArgs& a) {
  std::map<Index, std::pair<std::vector<double>, int>> merged;
  std::vector<std::string> groups;
  std::size_t width = 0;
  for (const auto& input : a.inputs) {
    const fs::path dir = fs::is_directory(input) ? fs::path(input) : fs::path(input).parent_path();
    const fs::path csv = fs::is_directory(input) ? dir / "kl_profile.csv" : fs::path(input);
    const KlProfile p = KlProfile::read_csv(csv.string());
    const std::vector<std::string> g = read_groups(dir / "kl_groups.csv");
    if (!g.empty()) {
      if (!groups.empty() && g != groups) throw DataError(csv.string() + ": layer groups differ from earlier inputs");
      groups = g;
    }
    for (std::size_t r = 0; r < p.rows.size(); ++r) {
      if (width == 0) width = p.rows[r].size();
      if (p.rows[r].size() != width) throw DataError(csv.string() + ": column count differs from earlier inputs");
      auto& [sum, count] = merged[p.updates[r]];
      if (sum.empty()) sum.assign(width, 0.0);
      for (std::size_t c = 0; c < width; ++c) sum[c] += p.rows[r][c];
      ++count;
    }
  }
  if (merged.empty()) throw DataError("no profile rows found");
  if (a.by_group && groups.size() != width) throw DataError("--by-group needs kl_groups.csv next to each profile");

  std::vector<std::string> columns;
  std::vector<std::size_t> column_of(width);
  for (std::size_t c = 0; c < width; ++c) {
    const std::string name = a.by_group ? groups[c] : "module_" + std::to_string(c);
    const auto it = std::find(columns.begin(), columns.end(), name);
    column_of[c] = static_cast<std::size_t>(it - columns.begin());
    if (it == columns.end()) columns.push_back(name);
  }

  std::ofstream file;
  if (!a.out.empty()) {
    file.open(a.out);
    if (!file) throw DataError("cannot write " + a.out);
  }
  std::ostream& os = a.out.empty() ? std::cout : file;
  os.precision(9);
  os << "update";
  for (const auto& c : columns) os << "," << c;
  os << ",total\n";
  for (const auto& [update, entry] : merged) {
    std::vector<double> row(columns.size(), 0.0);
    for (std::size_t c = 0; c < width; ++c) row[column_of[c]] += entry.first[c] / entry.second;
    os << update;
    for (double v : row) os << "," << v;
    os << "," << KlProfile::row_total(row) << "\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  retain_heap_memory();
  CLI::App app{"MatNet hierarchical latent-variable image models"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--config", g.config_path, "key=value config file")->check(CLI::ExistingFile);
  app.add_option("--set", g.sets, "Override a config key (key=value), repeatable");
  app.add_flag("--checked", g.checked, "Enable NaN and shape assertions");
  auto* keys = app.add_option_group("config keys", "Every config key is also a flag");
  for (const auto& key : RunConfig::keys()) keys->add_option("--" + key, g.flags[key]);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a model into a run directory");
  train_cmd->add_option("--data", ta.data, "IDX image file (optionally gzipped)")->required();
  train_cmd->add_option("--labels", ta.labels, "IDX label file");
  train_cmd->add_option("--val", ta.val, "Validation IDX images (default: split off val_fraction)");
  train_cmd->add_option("--val-labels", ta.val_labels);
  train_cmd->add_option("--out", ta.out, "Run directory")->required();
  train_cmd->add_option("--first-stage", ta.first_stage, "First-stage checkpoint for a guess_input model");
  train_cmd->add_flag("--resume", ta.resume, "Continue from <out>/checkpoints/last.mtn");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Importance-weighted NLL of a checkpoint");
  eval_cmd->add_option("--ckpt", ea.ckpt)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", ea.data)->required();
  eval_cmd->add_option("--labels", ea.labels);
  eval_cmd->add_option("--iwae-k", ea.k, "Importance samples per example")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--split", ea.split, "'all', or 'val' to score the split held out by train");
  eval_cmd->add_option("--max", ea.max, "Score only the first N examples (0: all)");
  eval_cmd->add_option("--csv", ea.csv, "Results file, appended (default: eval.csv next to the checkpoint)");

  SampleArgs sa;
  auto* sample_cmd = app.add_subcommand("sample", "Draw samples into an image grid");
  sample_cmd->add_option("--ckpt", sa.ckpt)->required()->check(CLI::ExistingFile);
  sample_cmd->add_option("--n", sa.n, "Number of samples");
  sample_cmd->add_option("--out", sa.out, "PGM/PPM path")->required();
  sample_cmd->add_flag("--mean", sa.mean, "Show output means instead of draws");

  ImputeArgs ia;
  auto* impute_cmd = app.add_subcommand("impute", "Fill in masked pixels");
  impute_cmd->add_option("--ckpt", ia.ckpt, "First-stage conditional checkpoint")->required()->check(CLI::ExistingFile);
  impute_cmd->add_option("--ckpt2", ia.second, "Second-stage checkpoint")->check(CLI::ExistingFile);
  impute_cmd->add_option("--stages", ia.stages, "1 or 2");
  impute_cmd->add_option("--data", ia.data)->required();
  impute_cmd->add_option("--labels", ia.labels);
  impute_cmd->add_option("--mask", ia.mask, "quadrants | quadrants=q | occluders | mask PGM path");
  impute_cmd->add_option("--n", ia.n, "Number of images");
  impute_cmd->add_option("--out", ia.out, "PGM/PPM path")->required();
  impute_cmd->add_flag("--mean", ia.mean, "Fill with output means instead of draws");

  ProfileArgs pa;
  auto* profile_cmd = app.add_subcommand("kl-profile", "Merge and re-export per-layer KL profiles");
  profile_cmd->add_option("inputs", pa.inputs, "Run directories or kl_profile.csv files")->required();
  profile_cmd->add_option("--out", pa.out, "Output CSV (default: stdout)");
  profile_cmd->add_flag("--by-group", pa.by_group, "Sum layers that share a meta-module");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigExit;
  }
  set_checked_mode(g.checked);
  std::cout.precision(10);

  try {
    if (*train_cmd) return cmd_train(g, ta);
    if (*eval_cmd) return cmd_eval(g, ea);
    if (*sample_cmd) return cmd_sample(g, sa);
    if (*impute_cmd) return cmd_impute(g, ia);
    if (*profile_cmd) return cmd_kl_profile(pa);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigExit;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataExit;
  } catch (const FormatError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataExit;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kDataExit;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumericExit;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOtherExit;
  }
  return kOtherExit;
}
