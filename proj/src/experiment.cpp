#include "agro/experiment.hpp"

#include <chrono>
#include <cstdlib>
#include <future>
#include <set>

#include "agro/error.hpp"
#include "agro/grouper.hpp"
#include "agro/io.hpp"
#include "agro/slice_model.hpp"

namespace agro::experiment {

namespace fs = std::filesystem;

namespace {

const char* pca_name(slice::PcaMode m) {
  switch (m) {
    case slice::PcaMode::automatic: return "automatic";
    case slice::PcaMode::on: return "on";
    case slice::PcaMode::off: return "off";
  }
  return "automatic";
}

slice::PcaMode parse_pca(const std::string& s) {
  if (s == "automatic") return slice::PcaMode::automatic;
  if (s == "on") return slice::PcaMode::on;
  if (s == "off") return slice::PcaMode::off;
  throw ConfigError("slices.pca: expected automatic, on or off, got '" + s + "'");
}

slice::SliceInit parse_init(const std::string& s) {
  if (s == "points") return slice::SliceInit::points;
  if (s == "confusion") return slice::SliceInit::confusion;
  throw ConfigError("slices.init: expected points or confusion, got '" + s + "'");
}

robust::GroupLoss parse_group_loss(const std::string& s) {
  if (s == "sum") return robust::GroupLoss::sum;
  if (s == "mean") return robust::GroupLoss::mean;
  throw ConfigError("agro.group_loss: expected sum or mean, got '" + s + "'");
}

// Overlays `user` onto `base` (the defaults). Every user key must exist in
// base with a compatible type; arrays replace wholesale.
void merge_strict(json& base, const json& user, const std::string& where) {
  if (!user.is_object()) throw ConfigError((where.empty() ? "config" : where) + ": expected an object");
  for (const auto& [key, value] : user.items()) {
    const std::string field = where.empty() ? key : where + "." + key;
    if (key == "derived" && where.empty()) continue;
    if (!base.contains(key)) throw ConfigError("unknown config field '" + field + "'");
    json& slot = base[key];
    if (slot.is_object()) {
      merge_strict(slot, value, field);
    } else if (slot.is_array()) {
      if (!value.is_array()) throw ConfigError("config field '" + field + "': expected an array");
      slot = value;
    } else if (slot.is_boolean()) {
      if (!value.is_boolean()) throw ConfigError("config field '" + field + "': expected true or false");
      slot = value;
    } else if (slot.is_string()) {
      if (!value.is_string()) throw ConfigError("config field '" + field + "': expected a string");
      slot = value;
    } else if (slot.is_number_unsigned() || slot.is_number_integer()) {
      if (!value.is_number_unsigned()) {
        throw ConfigError("config field '" + field + "': expected a nonnegative integer");
      }
      slot = value;
    } else if (slot.is_number_float()) {
      if (!value.is_number()) throw ConfigError("config field '" + field + "': expected a number");
      slot = value.get<double>();
    } else {
      slot = value;
    }
  }
}

template <typename T>
T field(const json& j, const std::string& section, const std::string& key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config field '" + (section.empty() ? key : section + "." + key) + "': " + e.what());
  }
}

std::vector<std::size_t> size_list(const json& j, const std::string& name) {
  std::vector<std::size_t> out;
  for (const auto& v : j) {
    if (!v.is_number_unsigned()) throw ConfigError("config field '" + name + "': expected nonnegative integers");
    out.push_back(v.get<std::size_t>());
  }
  return out;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// Files read and written by one stage, for the stage manifest.
class StageRecord {
 public:
  StageRecord(std::string stage, const RunPaths& paths) : stage_(std::move(stage)), paths_(paths) {}

  void input(const fs::path& p) { inputs_.push_back(p); }
  void output(const fs::path& p) { outputs_.push_back(p); }
  void checkpoint_output(const fs::path& stem) {
    output(nn::checkpoint_bin(stem));
    output(nn::checkpoint_manifest(stem));
  }
  void require() const { io::require_exists(inputs_); }

  void finish(const ExperimentConfig& config) const {
    json j;
    j["stage"] = stage_;
    j["run_id"] = config.run_id;
    j["seed"] = config.seed;
    j["inputs"] = hashes(inputs_);
    j["outputs"] = hashes(outputs_);
    j["config"] = to_json(config);
    json timing;
    timing["wall_seconds"] = seconds_since(start_);
    j["timing"] = timing;
    io::write_text(paths_.manifest(stage_), j.dump(2) + "\n");
    io::write_text(paths_.config(), to_json(config).dump(2) + "\n");
  }

 private:
  json hashes(const std::vector<fs::path>& files) const {
    json out = json::object();
    for (const auto& f : files) out[fs::relative(f, paths_.dir).generic_string()] = io::sha256_file(f);
    return out;
  }

  std::string stage_;
  const RunPaths& paths_;
  std::vector<fs::path> inputs_;
  std::vector<fs::path> outputs_;
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void add_feature_inputs(StageRecord& rec, const fs::path& stem) {
  rec.input(stem.string() + ".bin");
  rec.input(stem.string() + ".manifest");
}

void add_grouper_files(StageRecord& rec, const fs::path& stem, bool as_output) {
  for (const auto* ext : {".bin", ".manifest", ".standardizer.bin"}) {
    if (as_output) {
      rec.output(stem.string() + ext);
    } else {
      rec.input(stem.string() + ext);
    }
  }
}

data::Split load_split(const RunPaths& paths, const std::string& name) {
  return data::read_split_csv(paths.split_csv(name));
}

std::vector<nn::NetworkParams> load_epochs(const fs::path& dir, std::size_t epochs) {
  std::vector<nn::NetworkParams> out;
  for (std::size_t e = 1; e <= epochs; ++e) out.push_back(nn::load_checkpoint(epoch_stem(dir, e)));
  return out;
}

void save_epochs(StageRecord& rec, const fs::path& dir, const std::vector<nn::NetworkParams>& checkpoints,
                 const std::string& role) {
  for (std::size_t e = 0; e < checkpoints.size(); ++e) {
    const auto stem = epoch_stem(dir, e + 1);
    nn::save_checkpoint(stem, checkpoints[e], role);
    rec.checkpoint_output(stem);
  }
}

std::size_t method_epochs(const ExperimentConfig& c, const std::string& method) {
  if (method == "erm") return c.erm.epochs;
  if (method == "gdro") return c.gdro_epochs;
  return c.pipeline.agro.primary_epochs;
}

robust::AgroConfig oracle_gdro_config(const ExperimentConfig& c) {
  auto a = c.pipeline.agro;
  a.m = c.data.group_count();
  return a;
}

erm::PretrainedAnalog make_encoder(const ExperimentConfig& c) {
  return erm::PretrainedAnalog(c.data.input_dim(), c.pipeline.g_dim, encoder_seed(c));
}

fs::path fold_stem(const RunPaths& p, std::size_t k) {
  return p.features().parent_path() / ("fold_" + std::to_string(k));
}

data::DatasetBundle bundle_from(const ExperimentConfig& c, const RunPaths& paths) {
  data::DatasetBundle b;
  b.config = c.data;
  b.train = load_split(paths, "train");
  b.dev = load_split(paths, "dev");
  b.test = load_split(paths, "test");
  b.ood = load_split(paths, "ood");
  return b;
}

}  // namespace

ExperimentConfig ExperimentConfig::resolved() const {
  ExperimentConfig r = *this;
  r.data.seed = seed;
  r.erm.seed = seed;
  r.pipeline.net = net;
  if (r.pipeline.agro.m == 0) r.pipeline.agro.m = 2 * data.n_classes;
  r.pipeline.agro.seed = seed;
  r.pipeline.fold_train.seed = seed + 101;
  r.pipeline.slices.k = r.pipeline.agro.m;
  r.pipeline.slices.seed = seed + 211;
  r.pipeline.grouper.seed = seed + 307;
  return r;
}

std::uint64_t encoder_seed(const ExperimentConfig& config) { return config.seed + 401; }

void ExperimentConfig::validate() const {
  if (run_id.empty()) throw ConfigError("run_id must not be empty");
  data.validate();
  erm.validate();
  pipeline.fold_train.validate();
  if (net.hidden.empty()) throw ConfigError("net.hidden must list at least one layer width");
  for (auto h : net.hidden) {
    if (h == 0) throw ConfigError("net.hidden widths must be positive");
  }
  if (pipeline.folds < 2) throw ConfigError("features.folds must be at least 2");
  const auto r = resolved();
  r.pipeline.agro.validate();
  r.pipeline.slices.validate();
  if (r.pipeline.grouper.hidden == 0) throw ConfigError("grouper.hidden must be positive");
}

ExperimentConfig default_config() {
  ExperimentConfig c;
  // Benchmark calibration: spurious per-dimension strength twice the core.
  c.data.core_signal_strength = 0.8;
  c.data.spurious = {data::SpuriousAttribute{0.95, 8, 1.6}};
  // Minority mass is ~4.8%, so alpha sits just under it; anything larger
  // drags a 47% majority group into the worst set and the upweighting
  // washes out.
  auto& a = c.pipeline.agro;
  a.alpha = 0.04;
  a.m = 6;
  a.lr_theta = 0.005;
  a.group_loss = robust::GroupLoss::mean;
  // Low-dim slice space so the label/prediction terms are not swamped.
  c.pipeline.slices.init = slice::SliceInit::confusion;
  c.pipeline.slices.pca_dim = 4;
  return c;
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["run_id"] = c.run_id;
  j["seed"] = c.seed;

  json d;
  d["n_train"] = c.data.n_train;
  d["n_dev"] = c.data.n_dev;
  d["n_test"] = c.data.n_test;
  d["n_ood"] = c.data.n_ood;
  d["n_classes"] = c.data.n_classes;
  d["d_core"] = c.data.d_core;
  d["d_noise"] = c.data.d_noise;
  d["core_signal_strength"] = c.data.core_signal_strength;
  d["label_noise"] = c.data.label_noise;
  d["folds"] = c.data.folds;
  json sp = json::array();
  for (const auto& a : c.data.spurious) {
    json s;
    s["correlation"] = a.correlation;
    s["dim"] = a.dim;
    s["strength"] = a.strength;
    sp.push_back(s);
  }
  d["spurious"] = sp;
  j["data"] = d;

  j["net"]["hidden"] = c.net.hidden;

  j["erm"]["epochs"] = c.erm.epochs;
  j["erm"]["batch_size"] = c.erm.batch_size;
  j["erm"]["lr"] = c.erm.lr;
  j["erm"]["weight_decay"] = c.erm.weight_decay;

  j["gdro"]["epochs"] = c.gdro_epochs;

  const auto& p = c.pipeline;
  j["features"]["folds"] = p.folds;
  j["features"]["g_dim"] = p.g_dim;
  j["features"]["epochs"] = p.fold_train.epochs;
  j["features"]["batch_size"] = p.fold_train.batch_size;
  j["features"]["lr"] = p.fold_train.lr;
  j["features"]["weight_decay"] = p.fold_train.weight_decay;

  j["slices"]["gamma"] = p.slices.gamma;
  j["slices"]["max_iters"] = p.slices.max_iters;
  j["slices"]["tol"] = p.slices.tol;
  j["slices"]["var_floor"] = p.slices.var_floor;
  j["slices"]["pca"] = pca_name(p.slices.pca);
  j["slices"]["pca_dim"] = p.slices.pca_dim;
  j["slices"]["init"] = p.slices.init == slice::SliceInit::points ? "points" : "confusion";
  j["slices"]["confusion_noise"] = p.slices.confusion_noise;

  j["grouper"]["hidden"] = p.grouper.hidden;
  j["grouper"]["standardize"] = p.grouper.standardize;
  j["grouper"]["pretrain"] = p.pretrain_grouper;
  j["grouper"]["pretrain_epochs"] = p.grouper.pretrain_epochs;
  j["grouper"]["pretrain_batch_size"] = p.grouper.pretrain_batch_size;
  j["grouper"]["pretrain_lr"] = p.grouper.pretrain_lr;

  const auto& a = p.agro;
  j["agro"]["alpha"] = a.alpha;
  j["agro"]["m"] = a.m;
  j["agro"]["t1_epochs"] = a.t1_epochs;
  j["agro"]["t2_epochs"] = a.t2_epochs;
  j["agro"]["primary_epochs"] = a.primary_epochs;
  j["agro"]["rounds"] = a.rounds;
  j["agro"]["w_min"] = a.w_min;
  j["agro"]["w_max"] = a.w_max;
  j["agro"]["gamma_ema"] = a.gamma_ema;
  j["agro"]["lr_theta"] = a.lr_theta;
  j["agro"]["lr_phi"] = a.lr_phi;
  j["agro"]["weight_decay"] = a.weight_decay;
  j["agro"]["weight_decay_phi"] = a.weight_decay_phi;
  j["agro"]["batch_size"] = a.batch_size;
  j["agro"]["group_loss"] = a.group_loss == robust::GroupLoss::sum ? "sum" : "mean";
  j["agro"]["collapse_threshold"] = a.collapse_threshold;
  return j;
}

ExperimentConfig from_json(const json& user) {
  json j = to_json(default_config());
  merge_strict(j, user, "");
  ExperimentConfig c = default_config();
  c.run_id = field<std::string>(j, "", "run_id");
  c.seed = field<std::uint64_t>(j, "", "seed");

  const auto& d = j["data"];
  c.data.n_train = field<std::size_t>(d, "data", "n_train");
  c.data.n_dev = field<std::size_t>(d, "data", "n_dev");
  c.data.n_test = field<std::size_t>(d, "data", "n_test");
  c.data.n_ood = field<std::size_t>(d, "data", "n_ood");
  c.data.n_classes = field<std::size_t>(d, "data", "n_classes");
  c.data.d_core = field<std::size_t>(d, "data", "d_core");
  c.data.d_noise = field<std::size_t>(d, "data", "d_noise");
  c.data.core_signal_strength = field<double>(d, "data", "core_signal_strength");
  c.data.label_noise = field<double>(d, "data", "label_noise");
  c.data.folds = field<std::size_t>(d, "data", "folds");
  c.data.spurious.clear();
  for (std::size_t i = 0; i < d["spurious"].size(); ++i) {
    const auto& s = d["spurious"][i];
    const std::string where = "data.spurious[" + std::to_string(i) + "]";
    if (!s.is_object()) throw ConfigError("config field '" + where + "': expected an object");
    json base = {{"correlation", 0.95}, {"dim", 4u}, {"strength", 2.0}};
    merge_strict(base, s, where);
    c.data.spurious.push_back({field<double>(base, where, "correlation"), field<std::size_t>(base, where, "dim"),
                               field<double>(base, where, "strength")});
  }

  c.net.hidden = size_list(j["net"]["hidden"], "net.hidden");

  c.erm.epochs = field<std::size_t>(j["erm"], "erm", "epochs");
  c.erm.batch_size = field<std::size_t>(j["erm"], "erm", "batch_size");
  c.erm.lr = field<double>(j["erm"], "erm", "lr");
  c.erm.weight_decay = field<double>(j["erm"], "erm", "weight_decay");

  c.gdro_epochs = field<std::size_t>(j["gdro"], "gdro", "epochs");

  auto& p = c.pipeline;
  const auto& f = j["features"];
  p.folds = field<std::size_t>(f, "features", "folds");
  p.g_dim = field<std::size_t>(f, "features", "g_dim");
  p.fold_train.epochs = field<std::size_t>(f, "features", "epochs");
  p.fold_train.batch_size = field<std::size_t>(f, "features", "batch_size");
  p.fold_train.lr = field<double>(f, "features", "lr");
  p.fold_train.weight_decay = field<double>(f, "features", "weight_decay");

  const auto& s = j["slices"];
  p.slices.gamma = field<double>(s, "slices", "gamma");
  p.slices.max_iters = field<std::size_t>(s, "slices", "max_iters");
  p.slices.tol = field<double>(s, "slices", "tol");
  p.slices.var_floor = field<double>(s, "slices", "var_floor");
  p.slices.pca = parse_pca(field<std::string>(s, "slices", "pca"));
  p.slices.pca_dim = field<std::size_t>(s, "slices", "pca_dim");
  p.slices.init = parse_init(field<std::string>(s, "slices", "init"));
  p.slices.confusion_noise = field<double>(s, "slices", "confusion_noise");

  const auto& g = j["grouper"];
  p.grouper.hidden = field<std::size_t>(g, "grouper", "hidden");
  p.grouper.standardize = field<bool>(g, "grouper", "standardize");
  p.pretrain_grouper = field<bool>(g, "grouper", "pretrain");
  p.grouper.pretrain_epochs = field<std::size_t>(g, "grouper", "pretrain_epochs");
  p.grouper.pretrain_batch_size = field<std::size_t>(g, "grouper", "pretrain_batch_size");
  p.grouper.pretrain_lr = field<double>(g, "grouper", "pretrain_lr");

  const auto& a = j["agro"];
  auto& ac = p.agro;
  ac.alpha = field<double>(a, "agro", "alpha");
  ac.m = field<std::size_t>(a, "agro", "m");
  ac.t1_epochs = field<std::size_t>(a, "agro", "t1_epochs");
  ac.t2_epochs = field<std::size_t>(a, "agro", "t2_epochs");
  ac.primary_epochs = field<std::size_t>(a, "agro", "primary_epochs");
  ac.rounds = field<std::size_t>(a, "agro", "rounds");
  ac.w_min = field<double>(a, "agro", "w_min");
  ac.w_max = field<double>(a, "agro", "w_max");
  ac.gamma_ema = field<double>(a, "agro", "gamma_ema");
  ac.lr_theta = field<double>(a, "agro", "lr_theta");
  ac.lr_phi = field<double>(a, "agro", "lr_phi");
  ac.weight_decay = field<double>(a, "agro", "weight_decay");
  ac.weight_decay_phi = field<double>(a, "agro", "weight_decay_phi");
  ac.batch_size = field<std::size_t>(a, "agro", "batch_size");
  ac.group_loss = parse_group_loss(field<std::string>(a, "agro", "group_loss"));
  ac.collapse_threshold = field<double>(a, "agro", "collapse_threshold");

  c.validate();
  return c;
}

ExperimentConfig parse_config_text(const std::string& text, const std::string& origin) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return from_json(j);
}

ExperimentConfig load_config(const fs::path& path) {
  io::require_exists(path);
  return parse_config_text(io::read_text(path), path.string());
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "': expected key.path=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override '" + assignment + "': empty field name");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      break;
    }
    if (!node->contains(key) || !(*node)[key].is_object()) (*node)[key] = json::object();
    node = &(*node)[key];
    start = dot + 1;
  }
}

ExperimentConfig with_overrides(const ExperimentConfig& base, const std::vector<std::string>& assignments) {
  json j = to_json(base);
  for (const auto& a : assignments) apply_override(j, a);
  return from_json(j);
}

fs::path runs_root() {
  if (const char* env = std::getenv("AGRO_RUNS_ROOT"); env && *env) return env;
  return "runs";
}

RunPaths run_paths(const ExperimentConfig& config, const fs::path& root) {
  return RunPaths{root / config.run_id / ("seed_" + std::to_string(config.seed))};
}

fs::path epoch_stem(const fs::path& dir, std::size_t epoch) { return dir / ("epoch_" + std::to_string(epoch)); }

void save_matrix(const fs::path& stem, const Matrix& m) {
  io::write_f64(stem.string() + ".bin", m.values());
  io::Manifest man;
  man.set("rows", static_cast<std::uint64_t>(m.rows()));
  man.set("cols", static_cast<std::uint64_t>(m.cols()));
  man.write(stem.string() + ".manifest");
}

Matrix load_matrix(const fs::path& stem) {
  const auto man = io::Manifest::read(stem.string() + ".manifest");
  const auto rows = man.get_uint("rows");
  const auto cols = man.get_uint("cols");
  const auto flat = io::read_f64(stem.string() + ".bin");
  if (flat.size() != rows * cols) throw ShapeError(stem.string() + ": matrix size disagrees with manifest");
  Matrix m(rows, cols);
  std::copy(flat.begin(), flat.end(), m.values().begin());
  return m;
}

void stage_generate(const ExperimentConfig& config, const RunPaths& paths) {
  const auto c = config.resolved();
  StageRecord rec("generate", paths);
  const auto bundle = data::generate(c.data);
  const std::pair<const char*, const data::Split*> splits[] = {
      {"train", &bundle.train}, {"dev", &bundle.dev}, {"test", &bundle.test}, {"ood", &bundle.ood}};
  for (const auto& [name, split] : splits) {
    data::write_split_csv(paths.split_csv(name), *split);
    rec.output(paths.split_csv(name));
  }
  data::write_config(paths.generator_cfg(), c.data);
  rec.output(paths.generator_cfg());
  rec.finish(c);
}

void stage_train_erm(const ExperimentConfig& config, const RunPaths& paths) {
  const auto c = config.resolved();
  StageRecord rec("train-erm", paths);
  rec.input(paths.split_csv("train"));
  rec.require();
  const data::TrainingView view(load_split(paths, "train"), c.data.n_classes);
  const auto result = erm::train_erm(view, c.net, c.erm);
  save_epochs(rec, paths.erm_dir(), result.checkpoints, "erm");
  rec.finish(c);
}

void stage_extract_features(const ExperimentConfig& config, const RunPaths& paths) {
  const auto c = config.resolved();
  StageRecord rec("extract-features", paths);
  rec.input(paths.split_csv("train"));
  rec.require();
  const data::TrainingView view(load_split(paths, "train"), c.data.n_classes);
  const auto encoder = make_encoder(c);
  const auto kf = erm::extract_features_kfold(view, c.pipeline.folds, c.net, c.pipeline.fold_train, encoder);
  erm::save_features(paths.features(), kf.features,
                     {{"encoder_seed", std::to_string(encoder.seed())},
                      {"fold_seed", std::to_string(c.pipeline.fold_train.seed)},
                      {"folds", std::to_string(c.pipeline.folds)}});
  rec.output(paths.features().string() + ".bin");
  rec.output(paths.features().string() + ".manifest");
  for (std::size_t k = 0; k < kf.fold_models.size(); ++k) {
    const auto stem = fold_stem(paths, k);
    nn::save_checkpoint(stem, kf.fold_models[k], "fold_model");
    rec.checkpoint_output(stem);
  }
  rec.finish(c);
}

void stage_fit_slices(const ExperimentConfig& config, const RunPaths& paths) {
  const auto c = config.resolved();
  StageRecord rec("fit-slices", paths);
  add_feature_inputs(rec, paths.features());
  rec.input(paths.split_csv("train"));
  rec.require();
  const data::TrainingView view(load_split(paths, "train"), c.data.n_classes);
  const auto features = erm::load_features(paths.features());
  const auto fit = robust::fit_slices(features, view.labels(), c.pipeline.slices);
  slice::save_slice_model(paths.slice_model(), fit);
  save_matrix(paths.responsibilities(), fit.responsibilities);
  const auto yhat = slice::argmax_rows(features.pred_probs());
  slice::write_report_csv(paths.slice_report(),
                          slice::summarize(fit.responsibilities, view.labels(), yhat, c.data.n_classes));
  for (const auto& stem : {paths.slice_model(), paths.responsibilities()}) {
    rec.output(stem.string() + ".bin");
    rec.output(stem.string() + ".manifest");
  }
  rec.output(paths.slice_report());
  rec.finish(c);
}

void stage_pretrain_grouper(const ExperimentConfig& config, const RunPaths& paths) {
  const auto c = config.resolved();
  StageRecord rec("pretrain-grouper", paths);
  add_feature_inputs(rec, paths.features());
  rec.input(paths.responsibilities().string() + ".bin");
  rec.input(paths.responsibilities().string() + ".manifest");
  rec.require();
  const auto features = erm::load_features(paths.features());
  const auto resp = load_matrix(paths.responsibilities());
  const auto result = robust::pretrain_grouper(features, resp, c.pipeline);
  grouper::save_grouper(paths.pretrained_grouper(), result.grouper);
  add_grouper_files(rec, paths.pretrained_grouper(), true);
  std::string trace = "epoch,mean_kl\n";
  for (std::size_t e = 0; e < result.kl_trace.size(); ++e) {
    trace += std::to_string(e) + "," + io::format_double(result.kl_trace[e]) + "\n";
  }
  const auto trace_path = paths.pretrained_grouper().parent_path() / "kl_trace.csv";
  io::write_text(trace_path, trace);
  rec.output(trace_path);
  rec.finish(c);
}

void stage_train_gdro(const ExperimentConfig& config, const RunPaths& paths) {
  const auto c = config.resolved();
  StageRecord rec("train-gdro", paths);
  rec.input(paths.split_csv("train"));
  rec.require();
  const auto train = load_split(paths, "train");
  const data::TrainingView view(train, c.data.n_classes);
  // Oracle baseline: the only trainer that sees ground-truth groups.
  const auto groups = data::true_groups(train);
  const auto result = robust::gdro_train(view, groups, c.net, oracle_gdro_config(c), c.gdro_epochs);
  save_epochs(rec, paths.gdro_dir(), result.checkpoints, "gdro");
  robust::write_trace_csv(paths.gdro_dir() / "trace.csv", result.trace);
  rec.output(paths.gdro_dir() / "trace.csv");
  rec.finish(c);
}

void stage_train_agro(const ExperimentConfig& config, const RunPaths& paths) {
  const auto c = config.resolved();
  StageRecord rec("train-agro", paths);
  add_feature_inputs(rec, paths.features());
  add_grouper_files(rec, paths.pretrained_grouper(), false);
  rec.input(paths.split_csv("train"));
  rec.require();
  const data::TrainingView view(load_split(paths, "train"), c.data.n_classes);
  const auto features = erm::load_features(paths.features());
  const auto start = grouper::load_grouper(paths.pretrained_grouper());

  std::vector<robust::TraceRow> trace;
  const auto theta0 = robust::agro_round0(view, features.values, c.pipeline, &trace);
  const auto round0_stem = paths.agro_dir() / "round0";
  nn::save_checkpoint(round0_stem, theta0, "agro_round0");
  rec.checkpoint_output(round0_stem);

  const auto rounds = robust::agro_rounds(theta0, start, features.values, view, c.pipeline.agro);
  json adv = json::array();
  for (std::size_t r = 0; r < rounds.adversary.size(); ++r) {
    const auto& a = rounds.adversary[r];
    trace.insert(trace.end(), a.trace.begin(), a.trace.end());
    const auto stem = paths.agro_dir() / ("grouper_round_" + std::to_string(r + 1));
    grouper::save_grouper(stem, a.grouper);
    add_grouper_files(rec, stem, true);
    json row;
    row["round"] = r + 1;
    row["epoch_max_share"] = a.epoch_max_share;
    row["collapse_warning"] = a.collapse_warning;
    adv.push_back(row);
  }
  trace.insert(trace.end(), rounds.primary.trace.begin(), rounds.primary.trace.end());
  save_epochs(rec, paths.agro_dir(), rounds.primary.checkpoints, "agro");
  const auto final_grouper = paths.agro_dir() / "grouper_final";
  grouper::save_grouper(final_grouper, rounds.grouper);
  add_grouper_files(rec, final_grouper, true);
  robust::write_trace_csv(paths.agro_dir() / "trace.csv", trace);
  rec.output(paths.agro_dir() / "trace.csv");
  io::write_text(paths.agro_dir() / "adversary.json", adv.dump(2) + "\n");
  rec.output(paths.agro_dir() / "adversary.json");
  rec.finish(c);
}

const std::vector<std::string>& method_names() {
  static const std::vector<std::string> names{"erm", "gdro", "agro"};
  return names;
}

namespace {

void check_method(const std::string& method) {
  for (const auto& n : method_names()) {
    if (n == method) return;
  }
  throw ConfigError("unknown method '" + method + "' (expected erm, gdro or agro)");
}

std::vector<fs::path> checkpoint_files(const fs::path& dir, std::size_t epochs) {
  std::vector<fs::path> out;
  for (std::size_t e = 1; e <= epochs; ++e) {
    out.push_back(nn::checkpoint_bin(epoch_stem(dir, e)));
    out.push_back(nn::checkpoint_manifest(epoch_stem(dir, e)));
  }
  return out;
}

fs::path method_dir(const RunPaths& p, const std::string& method) {
  if (method == "erm") return p.erm_dir();
  if (method == "gdro") return p.gdro_dir();
  return p.agro_dir();
}

}  // namespace

eval::Selection stage_select(const ExperimentConfig& config, const RunPaths& paths, const std::string& method) {
  check_method(method);
  const auto c = config.resolved();
  StageRecord rec("select-" + method, paths);
  for (const auto& f : checkpoint_files(method_dir(paths, method), method_epochs(c, method))) rec.input(f);
  rec.input(paths.split_csv("dev"));
  const auto final_grouper = paths.agro_dir() / "grouper_final";
  if (method == "agro") {
    add_grouper_files(rec, final_grouper, false);
    for (std::size_t k = 0; k < c.pipeline.folds; ++k) {
      rec.input(nn::checkpoint_bin(fold_stem(paths, k)));
      rec.input(nn::checkpoint_manifest(fold_stem(paths, k)));
    }
  }
  rec.require();

  const auto dev_split = load_split(paths, "dev");
  const data::TrainingView dev(dev_split, c.data.n_classes);
  const auto checkpoints = load_epochs(method_dir(paths, method), method_epochs(c, method));
  eval::Selection sel;
  if (method == "erm") {
    sel = eval::select_average(checkpoints, dev);
  } else if (method == "gdro") {
    const auto groups = data::true_groups(dev_split);
    sel = eval::select_oracle_worst_group(checkpoints, dev, groups, c.data.group_count());
  } else {
    std::vector<nn::NetworkParams> folds;
    for (std::size_t k = 0; k < c.pipeline.folds; ++k) folds.push_back(nn::load_checkpoint(fold_stem(paths, k)));
    const auto g = grouper::load_grouper(final_grouper);
    const auto features =
        erm::assemble_features_by_fold(make_encoder(c), folds, dev.inputs(), dev.labels(), c.data.n_classes);
    sel = eval::select_predicted_groups(checkpoints, dev, eval::predicted_groups(g, features), g.groups(),
                                        c.pipeline.agro.alpha);
  }
  json j;
  j["method"] = method;
  j["mode"] = eval::to_string(sel.mode);
  j["selected_checkpoint"] = sel.index;
  j["selected_epoch"] = sel.index + 1;
  j["score"] = sel.score;
  j["scores"] = sel.scores;
  io::write_text(paths.selection(method), j.dump(2) + "\n");
  rec.output(paths.selection(method));
  rec.finish(c);
  return sel;
}

eval::MetricsReport stage_evaluate(const ExperimentConfig& config, const RunPaths& paths, const std::string& method) {
  check_method(method);
  const auto c = config.resolved();
  for (const auto* name : {"train", "dev", "test", "ood"}) io::require_exists(paths.split_csv(name));
  const auto sel = stage_select(c, paths, method);
  StageRecord rec("evaluate-" + method, paths);
  for (const auto* name : {"dev", "test", "ood"}) rec.input(paths.split_csv(name));
  const auto stem = epoch_stem(method_dir(paths, method), sel.index + 1);
  rec.input(nn::checkpoint_bin(stem));
  rec.input(nn::checkpoint_manifest(stem));
  rec.require();
  const auto bundle = bundle_from(c, paths);
  auto report = eval::make_report(method, nn::load_checkpoint(stem), bundle, sel);
  if (method == "agro") {
    const auto adv = json::parse(io::read_text(paths.agro_dir() / "adversary.json"));
    bool collapse = false;
    for (const auto& row : adv) collapse = collapse || row.at("collapse_warning").get<bool>();
    report.extra["collapse_warning"] = collapse ? 1.0 : 0.0;
  }
  eval::write_report(paths.metrics(method), report);
  rec.output(paths.metrics(method));
  rec.finish(c);
  return report;
}

std::vector<eval::MetricsReport> run_pipeline(const ExperimentConfig& config, const RunPaths& paths,
                                              PipelineScope scope) {
  const auto c = config.resolved();
  c.validate();
  const bool full = scope == PipelineScope::full;
  stage_generate(c, paths);
  if (full) stage_train_erm(c, paths);
  stage_extract_features(c, paths);
  stage_fit_slices(c, paths);
  stage_pretrain_grouper(c, paths);
  if (full) stage_train_gdro(c, paths);
  stage_train_agro(c, paths);
  std::vector<eval::MetricsReport> reports;
  for (const auto& m : method_names()) {
    if (full || m == "agro") reports.push_back(stage_evaluate(c, paths, m));
  }
  return reports;
}

const std::vector<std::string>& sweep_params() {
  static const std::vector<std::string> params{"alpha", "m", "T2", "lr", "weight_decay", "hidden"};
  return params;
}

std::vector<std::string> sweep_assignments(const std::string& param, const std::string& value) {
  if (param == "alpha") return {"agro.alpha=" + value};
  if (param == "m") return {"agro.m=" + value};
  if (param == "T2") return {"agro.t2_epochs=" + value};
  if (param == "lr") return {"agro.lr_theta=" + value};
  if (param == "weight_decay") return {"agro.weight_decay=" + value};
  if (param == "hidden") return {"net.hidden=[" + value + "]"};
  throw ConfigError("unknown sweep parameter '" + param + "'");
}

std::vector<SweepRow> run_sweep(const ExperimentConfig& base, const fs::path& root, const std::string& param,
                                const std::vector<std::string>& values, bool parallel) {
  if (values.empty()) throw ConfigError("sweep: no values given");
  std::vector<ExperimentConfig> configs;
  for (const auto& v : values) {
    auto c = with_overrides(base, sweep_assignments(param, v));
    c.run_id = base.run_id + "/sweep_" + param + "_" + v;
    configs.push_back(c);
  }
  auto run_one = [&root](const ExperimentConfig& c) {
    return run_pipeline(c, run_paths(c, root), PipelineScope::agro_only).front();
  };
  std::vector<SweepRow> rows;
  if (parallel) {
    std::vector<std::future<eval::MetricsReport>> jobs;
    for (const auto& c : configs) jobs.push_back(std::async(std::launch::async, run_one, std::cref(c)));
    for (std::size_t i = 0; i < jobs.size(); ++i) rows.push_back({values[i], jobs[i].get()});
  } else {
    for (std::size_t i = 0; i < configs.size(); ++i) rows.push_back({values[i], run_one(configs[i])});
  }
  return rows;
}

void write_sweep_csv(const fs::path& path, const std::string& param, const std::vector<SweepRow>& rows) {
  std::string out = param + ",avg_accuracy,worst_group_accuracy,ood_accuracy,selection_score\n";
  for (const auto& r : rows) {
    out += r.value + "," + io::format_double(r.agro.dev.avg_accuracy) + "," +
           io::format_double(r.agro.dev.worst_group_accuracy) + "," + io::format_double(r.agro.ood_accuracy) + "," +
           io::format_double(r.agro.selection_score) + "\n";
  }
  io::write_text(path, out);
}

BenchmarkResult run_benchmark(const ExperimentConfig& config, const BenchmarkOptions& options) {
  const auto c = config.resolved();
  c.validate();
  BenchmarkResult out;
  const auto bundle = data::generate(c.data);
  const data::TrainingView train(bundle.train, c.data.n_classes);
  const data::TrainingView dev(bundle.dev, c.data.n_classes);
  const auto alpha = c.pipeline.agro.alpha;

  if (options.erm) {
    const auto r = erm::train_erm(train, c.net, c.erm);
    const auto sel = eval::select_average(r.checkpoints, dev);
    out.reports["erm"] = eval::make_report("erm", r.checkpoints[sel.index], bundle, sel);
  }
  if (options.gdro_oracle) {
    const auto groups = data::true_groups(bundle.train);
    const auto r = robust::gdro_train(train, groups, c.net, oracle_gdro_config(c), c.gdro_epochs);
    const auto dev_groups = data::true_groups(bundle.dev);
    const auto sel = eval::select_oracle_worst_group(r.checkpoints, dev, dev_groups, c.data.group_count());
    out.reports["gdro_oracle"] = eval::make_report("gdro_oracle", r.checkpoints[sel.index], bundle, sel);
  }
  if (!(options.agro || options.ablations || options.no_pretrain)) return out;

  const auto encoder = make_encoder(c);
  const auto kf = erm::extract_features_kfold(train, c.pipeline.folds, c.net, c.pipeline.fold_train, encoder);
  const Matrix& f = kf.features.values;
  const auto theta0 = robust::agro_round0(train, f, c.pipeline);
  const auto slices = robust::fit_slices(kf.features, train.labels(), c.pipeline.slices);
  const auto pretrained = robust::pretrain_grouper(kf.features, slices.responsibilities, c.pipeline);

  const auto dev_features = erm::assemble_features_by_fold(encoder, kf.fold_models, dev.inputs(), dev.labels(),
                                                          c.data.n_classes);
  auto select_with = [&](const std::vector<nn::NetworkParams>& checkpoints, const grouper::Grouper& g) {
    return eval::select_predicted_groups(checkpoints, dev, eval::predicted_groups(g, dev_features), g.groups(),
                                         alpha);
  };

  if (options.agro) {
    const auto r = robust::agro_rounds(theta0, pretrained.grouper, f, train, c.pipeline.agro);
    const auto sel = select_with(r.primary.checkpoints, r.grouper);
    auto report = eval::make_report("agro", r.primary.checkpoints[sel.index], bundle, sel);
    for (const auto& a : r.adversary) {
      out.agro_collapse = out.agro_collapse || a.collapse_warning;
      out.agro_epoch_max_share.insert(out.agro_epoch_max_share.end(), a.epoch_max_share.begin(),
                                      a.epoch_max_share.end());
    }
    report.extra["collapse_warning"] = out.agro_collapse ? 1.0 : 0.0;
    out.reports["agro"] = report;
  }
  if (options.no_pretrain) {
    auto cfg = c.pipeline;
    cfg.pretrain_grouper = false;
    const auto random_start = robust::pretrain_grouper(kf.features, slices.responsibilities, cfg).grouper;
    const auto r = robust::agro_rounds(theta0, random_start, f, train, c.pipeline.agro);
    const auto sel = select_with(r.primary.checkpoints, r.grouper);
    auto report = eval::make_report("agro_no_pretrain", r.primary.checkpoints[sel.index], bundle, sel);
    for (const auto& a : r.adversary) {
      out.no_pretrain_collapse = out.no_pretrain_collapse || a.collapse_warning;
      out.no_pretrain_epoch_max_share.insert(out.no_pretrain_epoch_max_share.end(), a.epoch_max_share.begin(),
                                             a.epoch_max_share.end());
    }
    report.extra["collapse_warning"] = out.no_pretrain_collapse ? 1.0 : 0.0;
    out.reports["agro_no_pretrain"] = report;
  }
  if (options.ablations) {
    // G-DRO over hard slice clusters from the same round-0 start and budget
    // as the final primary round; selection uses the grouper distilled from
    // those slices.
    auto cluster_run = [&](const std::string& name, const slice::SliceFit& fit, const grouper::Grouper& g) {
      const auto groups = slice::argmax_rows(fit.responsibilities);
      const auto r = robust::gdro_train(train, groups, c.net, c.pipeline.agro, c.pipeline.agro.primary_epochs, &theta0);
      const auto sel = select_with(r.checkpoints, g);
      out.reports[name] = eval::make_report(name, r.checkpoints[sel.index], bundle, sel);
    };
    cluster_run("gdro_domino_clusters", slices, pretrained.grouper);
    auto plain = c.pipeline.slices;
    plain.gamma = 0.0;
    const auto plain_fit = robust::fit_slices(kf.features, train.labels(), plain);
    const auto plain_grouper = robust::pretrain_grouper(kf.features, plain_fit.responsibilities, c.pipeline).grouper;
    cluster_run("gdro_feature_clusters", plain_fit, plain_grouper);
  }
  return out;
}

}  // namespace agro::experiment
