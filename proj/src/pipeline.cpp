#include "sliceprop/pipeline.hpp"

#include "sliceprop/digest.hpp"
#include "sliceprop/errors.hpp"
#include "sliceprop/eval.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <memory>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

namespace sliceprop {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- configuration -----------------------------------------------------

const std::map<std::string, std::string>& default_config() {
  static const std::map<std::string, std::string> defaults{
      {"seed", "0"},
      {"synth.seed", "0"},
      {"synth.families", "cylinder"},
      {"synth.n_train", "4"},
      {"synth.n_test", "2"},
      {"synth.depth", "32"},
      {"synth.height", "64"},
      {"synth.width", "64"},
      {"synth.noise", "0.05"},
      {"annotate", "protocol"},
      {"geig.scales", "3,5"},
      {"geig.directions", "h,v,du,dd"},
      {"geig.intensity", "true"},
      {"edge.window", "3"},
      {"encoder.hidden", "16,16"},
      {"encoder.feature_dim", "16"},
      {"encoder.kernel", "3"},
      {"encoder.l2_normalize", "false"},
      {"train.lr", "1e-4"},
      {"train.weight_decay", "0.005"},
      {"train.epochs", "4"},
      {"train.batch_size", "1"},
      {"train.window", "7"},
      {"train.loss", "l1"},
      {"refiner", "morph"},
      {"refiner.per_family", "true"},
      {"refiner.hidden", "8,8"},
      {"refiner.crop", "16"},
      {"refiner.steps", "300"},
      {"refiner.lr", "1e-3"},
      {"refiner.corruption", "0.1"},
      {"oeg.name", "oeg"},
      {"oeg.input", "geig"},
      {"oeg.pls", "morph"},
      {"propagate.model", "oeg"},
      {"propagate.mode", "dual_reuse_prev"},
      {"propagate.window", "7"},
      {"propagate.per_step_binarize", "false"},
      {"propagate.threshold", "0.5"},
      {"propagate.run", ""},
      {"eval.runs", ""},
      {"plot.image", "false"},
      {"plot.width", "640"},
      {"plot.height", "400"},
  };
  return defaults;
}

PipelineConfig::PipelineConfig() : values_(default_config()) {}

void PipelineConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = value;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::string json_scalar(const json& v, const std::string& key) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number()) {
    std::ostringstream os;
    os << std::setprecision(17) << v.get<double>();
    return os.str();
  }
  throw ConfigError("config key '" + key + "' must be a string, number or boolean");
}

std::string json_value(const json& v, const std::string& key) {
  if (!v.is_array()) return json_scalar(v, key);
  std::string out;
  for (const auto& e : v) out += (out.empty() ? "" : ",") + json_scalar(e, key);
  return out;
}

std::vector<std::string> split_commas(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

}  // namespace

void PipelineConfig::merge_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  if (trim(text).starts_with("{")) {
    json doc;
    try {
      doc = json::parse(text);
    } catch (const json::exception& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
    for (const auto& [key, value] : doc.items()) set(key, json_value(value, key));
    return;
  }
  std::istringstream lines(text);
  std::string line;
  int number = 0;
  while (std::getline(lines, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path.string() + ":" + std::to_string(number) + ": expected key = value");
    set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
}

const std::string& PipelineConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

int PipelineConfig::get_int(const std::string& key) const {
  const std::string& s = get(key);
  int v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) throw ConfigError(key + ": expected an integer, got '" + s + "'");
  return v;
}

std::uint64_t PipelineConfig::get_u64(const std::string& key) const {
  const std::string& s = get(key);
  std::uint64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size())
    throw ConfigError(key + ": expected a non-negative integer, got '" + s + "'");
  return v;
}

double PipelineConfig::get_double(const std::string& key) const {
  const std::string& s = get(key);
  double v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size() || !std::isfinite(v))
    throw ConfigError(key + ": expected a number, got '" + s + "'");
  return v;
}

bool PipelineConfig::get_bool(const std::string& key) const {
  const std::string& s = get(key);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + s + "'");
}

std::vector<int> PipelineConfig::get_ints(const std::string& key) const {
  std::vector<int> out;
  for (const auto& item : split_commas(get(key))) {
    int v = 0;
    const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    if (ec != std::errc{} || p != item.data() + item.size())
      throw ConfigError(key + ": expected a comma-separated list of integers");
    out.push_back(v);
  }
  return out;
}

std::vector<std::string> PipelineConfig::get_list(const std::string& key) const { return split_commas(get(key)); }

std::string PipelineConfig::to_json() const {
  json doc = json::object();
  for (const auto& [k, v] : values_) doc[k] = v;
  return doc.dump();
}

std::string PipelineConfig::digest() const { return sha256_hex(to_json()); }

GeigConfig geig_config(const PipelineConfig& cfg) {
  GeigConfig g;
  g.scales = cfg.get_ints("geig.scales");
  g.directions.clear();
  for (const auto& d : cfg.get_list("geig.directions")) g.directions.push_back(parse_direction(d));
  g.include_intensity = cfg.get_bool("geig.intensity");
  g.validate();
  return g;
}

InputTransform input_transform(const PipelineConfig& cfg, InputKind kind) {
  InputTransform t;
  t.kind = kind;
  t.geig = geig_config(cfg);
  t.edge_window = cfg.get_int("edge.window");
  return t;
}

EncoderConfig encoder_config(const PipelineConfig& cfg) {
  EncoderConfig e;
  e.hidden_channels = cfg.get_ints("encoder.hidden");
  e.feature_dim = cfg.get_int("encoder.feature_dim");
  e.kernel_size = cfg.get_int("encoder.kernel");
  e.l2_normalize = cfg.get_bool("encoder.l2_normalize");
  e.seed = cfg.get_u64("seed");
  return e;
}

TrainConfig train_config(const PipelineConfig& cfg, PathMode mode) {
  TrainConfig t;
  t.mode = mode;
  t.learning_rate = cfg.get_double("train.lr");
  t.weight_decay = cfg.get_double("train.weight_decay");
  t.epochs = cfg.get_int("train.epochs");
  t.batch_size = cfg.get_int("train.batch_size");
  t.window = WindowSpec{cfg.get_int("train.window")};
  t.loss = parse_loss_kind(cfg.get("train.loss"));
  t.seed = cfg.get_u64("seed");
  t.validate();
  return t;
}

LearnedRefinerConfig refiner_config(const PipelineConfig& cfg) {
  LearnedRefinerConfig r;
  r.hidden_channels = cfg.get_ints("refiner.hidden");
  r.crop = cfg.get_int("refiner.crop");
  r.steps = cfg.get_int("refiner.steps");
  r.learning_rate = cfg.get_double("refiner.lr");
  r.corruption = cfg.get_double("refiner.corruption");
  r.seed = cfg.get_u64("seed");
  return r;
}

PropagationConfig propagation_config(const PipelineConfig& cfg) {
  PropagationConfig p;
  p.mode = parse_propagation_mode(cfg.get("propagate.mode"));
  p.window = WindowSpec{cfg.get_int("propagate.window")};
  p.per_step_binarize = cfg.get_bool("propagate.per_step_binarize");
  p.output_threshold = cfg.get_double("propagate.threshold");
  p.validate();
  return p;
}

// ---- phantom families --------------------------------------------------

const std::vector<std::string>& phantom_families() {
  static const std::vector<std::string> names{"cylinder", "object_appears", "object_ends"};
  return names;
}

std::string canonical_family(const std::string& name) {
  if (name == "continuity") return "cylinder";
  for (const auto& f : phantom_families())
    if (f == name) return f;
  throw ConfigError("unknown phantom family '" + name + "' (expected cylinder|continuity|object_appears|object_ends)");
}

FamilyPhantom family_phantom(const std::string& family, Shape3 shape, double noise, std::uint64_t seed) {
  const std::string fam = canonical_family(family);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double d = shape.depth, h = shape.height, w = shape.width;
  const double s = std::min(h, w) / 48.0;

  FamilyPhantom out;
  PhantomSpec& spec = out.spec;
  spec.shape = shape;
  spec.seed = seed;
  spec.background = 0.2;
  spec.background_noise_sigma = noise;

  if (fam == "cylinder") {
    PhantomObject c;
    c.kind = ObjectKind::cylinder;
    const double radius = std::min(h, w) * (0.17 + 0.04 * u(rng));
    c.center = {0.0, h / 2 + (4 * u(rng) - 2) * s, w / 2 + (4 * u(rng) - 2) * s};
    c.radii = {1.0, radius, radius};
    c.intensity = 0.6;
    c.z_start = 0;
    c.z_end = shape.depth;
    spec.objects = {c};
    return out;
  }

  // An ellipsoidal object of interest next to a same-intensity cylinder that is
  // not part of the mask. The ellipsoid peaks mid-volume, so the annotated
  // slice lands before the discontinuity.
  const double cy = h / 2 + (6 * u(rng) - 3) * s;
  const double cx = w / 2 + (6 * u(rng) - 3) * s;
  const double radius = (6 + 3 * u(rng)) * s;
  PhantomObject soi;
  soi.kind = ObjectKind::ellipsoid;
  soi.center = {d / 2 - 2 + 2 * u(rng), cy, cx};
  soi.radii = {0.6 * d, radius, radius};
  soi.intensity = 0.5;
  soi.z_start = 0;
  soi.z_end = shape.depth;

  PhantomObject distractor;
  distractor.kind = ObjectKind::cylinder;
  distractor.in_mask = false;
  distractor.intensity = 0.5;
  distractor.radii = {1.0, 5 * s, 5 * s};
  const double angle = 2 * std::numbers::pi * u(rng);
  const double gap = radius + 4 * s;
  distractor.center = {d / 2, cy + gap * std::sin(angle), cx + gap * std::cos(angle)};

  const int event = std::min(shape.depth / 2 + shape.depth / 8 + int(u(rng) * shape.depth / 6), shape.depth - 2);
  if (fam == "object_appears") {
    distractor.z_start = event;
    distractor.z_end = shape.depth;
  } else {
    soi.z_end = event;
    distractor.z_start = 0;
    distractor.z_end = shape.depth;
  }
  spec.objects = {soi, distractor};
  out.event_z = event;
  return out;
}

int choose_annotated_slice(const MaskVolume& gt, const std::string& policy, std::uint64_t seed) {
  if (policy == "protocol") return pick_annotated_slice(gt, seed);
  if (policy == "largest") return largest_gt_slice_index(gt);
  if (policy == "middle") return gt.shape.depth / 2;
  throw ConfigError("unknown annotate policy '" + policy + "' (expected protocol|largest|middle)");
}

// ---- manifests ---------------------------------------------------------

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::string rel(const fs::path& p) { return p.generic_string(); }

json new_manifest(const std::string& stage, const PipelineConfig& cfg) {
  return json{{"stage", stage},
              {"config", json::parse(cfg.to_json())},
              {"config_digest", cfg.digest()},
              {"seed", cfg.get_u64("seed")},
              {"inputs", json::object()},
              {"outputs", json::object()}};
}

void add_file(json& section, const fs::path& root, const fs::path& relative) {
  section[rel(relative)] = sha256_file(root / relative);
}

void add_stem(json& section, const fs::path& root, const fs::path& stem) {
  add_file(section, root, fs::path(stem.string() + ".json"));
  add_file(section, root, fs::path(stem.string() + ".raw"));
}

void write_json(const fs::path& path, const json& doc) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw PersistenceError(path.string(), "cannot open for writing");
  out << doc.dump(2) << "\n";
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw StageDependencyError("missing " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw PersistenceError(path.string(), std::string("invalid JSON: ") + e.what());
  }
}

/// Loads `<root>/<dir>/manifest.json`, checks every recorded output against the
/// files on disk, and records the manifest itself as an input of `into`.
json require_stage(const fs::path& root, const fs::path& dir, const std::string& producer, json* into = nullptr) {
  const fs::path manifest = root / dir / "manifest.json";
  if (!fs::exists(manifest))
    throw StageDependencyError("missing " + manifest.string() + " (run `sliceprop " + producer + "` first)");
  json doc = read_json(manifest);
  for (const auto& [file, sha] : doc.at("outputs").items()) {
    const fs::path p = root / file;
    if (!fs::exists(p)) throw StageDependencyError("missing " + p.string() + " listed in " + manifest.string());
    if (sha256_file(p) != sha.get<std::string>())
      throw StageDependencyError(p.string() + " does not match the digest in " + manifest.string() +
                                 " (re-run `sliceprop " + producer + "`)");
  }
  if (into) add_file((*into)["inputs"], root, dir / "manifest.json");
  return doc;
}

void prepare_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw PersistenceError(dir.string(), ec.message());
}

json transform_json(const InputTransform& t) {
  json dirs = json::array();
  for (Direction d : t.geig.directions) dirs.push_back(to_string(d));
  return json{{"kind", to_string(t.kind)},
              {"scales", t.geig.scales},
              {"directions", dirs},
              {"include_intensity", t.geig.include_intensity},
              {"edge_window", t.edge_window}};
}

InputTransform transform_from_json(const json& j) {
  InputTransform t;
  t.kind = parse_input_kind(j.at("kind").get<std::string>());
  t.geig.scales = j.at("scales").get<std::vector<int>>();
  t.geig.directions.clear();
  for (const auto& d : j.at("directions")) t.geig.directions.push_back(parse_direction(d.get<std::string>()));
  t.geig.include_intensity = j.at("include_intensity").get<bool>();
  t.edge_window = j.at("edge_window").get<int>();
  return t;
}

struct Model {
  EncoderParams<double> params;
  InputTransform transform;
  PathMode mode = PathMode::single_path;
};

void save_model(const fs::path& root, const fs::path& dir, const TrainResult& r, const InputTransform& t, PathMode mode,
                json& manifest) {
  if (!r.params.all_finite()) throw NumericError("training produced non-finite parameters");
  const json meta{{"transform", transform_json(t)}, {"mode", to_string(mode)}};
  save_checkpoint({r.params, meta.dump()}, root / dir / "model");
  add_file(manifest["outputs"], root, dir / "model.json");
  add_file(manifest["outputs"], root, dir / "model.bin");

  const fs::path log = root / dir / "train_log.csv";
  std::ofstream out(log, std::ios::trunc);
  if (!out) throw PersistenceError(log.string(), "cannot open for writing");
  out << std::setprecision(9) << "step,epoch,pair_id,loss\n";
  for (const auto& row : r.log) out << row.step << "," << row.epoch << "," << row.pair_id << "," << row.loss << "\n";
  out.close();
  add_file(manifest["outputs"], root, dir / "train_log.csv");
}

Model load_model(const fs::path& root, const fs::path& dir) {
  const Checkpoint c = load_checkpoint(root / dir / "model");
  const json meta = json::parse(c.meta_json);
  return {c.params, transform_from_json(meta.at("transform")), parse_path_mode(meta.at("mode").get<std::string>())};
}

std::vector<DataEntry> entries_from(const json& doc) {
  std::vector<DataEntry> out;
  for (const auto& v : doc.at("volumes")) {
    DataEntry e;
    e.id = v.at("id").get<std::string>();
    e.family = v.at("family").get<std::string>();
    e.split = v.at("split").get<std::string>();
    e.volume = v.at("volume").get<std::string>();
    e.mask = v.at("mask").get<std::string>();
    if (!v.at("event_z").is_null()) e.event_z = v.at("event_z").get<int>();
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<DataEntry> split_of(const std::vector<DataEntry>& all, const std::string& split) {
  std::vector<DataEntry> out;
  for (const auto& e : all)
    if (e.split == split) out.push_back(e);
  if (out.empty()) throw ConfigError("the data set has no " + split + " volumes");
  return out;
}

void check_name(const std::string& what, const std::string& name) {
  const bool ok = !name.empty() && std::all_of(name.begin(), name.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
  });
  if (!ok || name == "." || name == "..") throw ConfigError(what + ": invalid name '" + name + "'");
}

fs::path pls_dir(const std::string& source) { return fs::path("pls") / source; }

fs::path model_dir(const std::string& model) {
  return model == "bootstrap" ? fs::path("bootstrap") : fs::path("oeg") / model;
}

std::string synth_digest(const PipelineConfig& cfg) {
  json j = json::object();
  for (const auto& [k, v] : cfg.values())
    if (k.starts_with("synth.")) j[k] = v;
  return sha256_hex(j.dump());
}

void write_pl_report(const fs::path& path, const std::vector<std::pair<std::string, std::vector<PlQualityRow>>>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw PersistenceError(path.string(), "cannot open for writing");
  out << std::setprecision(9) << "volume,z,dice,distance\n";
  for (const auto& [id, list] : rows)
    for (const auto& r : list) out << id << "," << r.z << "," << r.dice << "," << r.distance << "\n";
}

}  // namespace

std::vector<DataEntry> read_data_manifest(const fs::path& out) {
  return entries_from(require_stage(out, "data", "synth"));
}

std::map<std::string, int> read_run_annotations(const fs::path& run_dir) {
  std::map<std::string, int> out;
  const json doc = read_json(run_dir / "manifest.json");
  for (const auto& [id, a] : doc.at("annotations").items()) out[id] = a.get<int>();
  return out;
}

std::string run_name(const PipelineConfig& cfg) {
  const std::string& run = cfg.get("propagate.run");
  return run.empty() ? cfg.get("propagate.model") + "_" + cfg.get("propagate.mode") : run;
}

// ---- stages ------------------------------------------------------------

void cmd_synth(const PipelineConfig& cfg, const fs::path& out) {
  std::vector<std::string> families;
  for (const auto& f : cfg.get_list("synth.families")) families.push_back(canonical_family(f));
  if (families.empty()) throw ConfigError("synth.families is empty");
  const int n_train = cfg.get_int("synth.n_train");
  const int n_test = cfg.get_int("synth.n_test");
  if (n_train < 0 || n_test < 0 || n_train + n_test == 0) throw ConfigError("synth needs n_train + n_test > 0");
  const Shape3 shape{cfg.get_int("synth.depth"), cfg.get_int("synth.height"), cfg.get_int("synth.width")};
  const double noise = cfg.get_double("synth.noise");
  const std::uint64_t seed = cfg.get_u64("synth.seed");

  const fs::path manifest_path = out / "data" / "manifest.json";
  if (fs::exists(manifest_path)) {
    const json old = read_json(manifest_path);
    if (old.value("synth_digest", "") != synth_digest(cfg))
      throw ConfigError("path collision: " + (out / "data").string() +
                        " already holds a data set with different synth.* settings");
  }

  json manifest = new_manifest("synth", cfg);
  manifest["synth_digest"] = synth_digest(cfg);
  manifest["volumes"] = json::array();
  for (std::size_t fi = 0; fi < families.size(); ++fi)
    for (const std::string split : {"train", "test"}) {
      const int n = split == "train" ? n_train : n_test;
      prepare_dir(out / "data" / split);
      for (int i = 0; i < n; ++i) {
        const std::uint64_t s = mix(mix(mix(seed) ^ fi) ^ (split == "train" ? 0x7472ULL : 0x7465ULL)) ^ std::uint64_t(i);
        FamilyPhantom fp = family_phantom(families[fi], shape, noise, mix(s));
        fp.spec.id = families[fi] + "_" + split + "_" + std::to_string(i);
        Phantom p = synth_volume(fp.spec);
        const fs::path vol = fs::path("data") / split / fp.spec.id;
        const fs::path mask = fs::path("data") / split / (fp.spec.id + "_mask");
        save_volume(p.volume, out / vol);
        save_mask(p.mask, out / mask);
        add_stem(manifest["outputs"], out, vol);
        add_stem(manifest["outputs"], out, mask);
        manifest["volumes"].push_back(json{{"id", fp.spec.id},
                                           {"family", families[fi]},
                                           {"split", split},
                                           {"volume", rel(vol)},
                                           {"mask", rel(mask)},
                                           {"event_z", fp.event_z ? json(*fp.event_z) : json(nullptr)}});
      }
    }
  write_json(manifest_path, manifest);
}

void cmd_train_bootstrap(const PipelineConfig& cfg, const fs::path& out) {
  json manifest = new_manifest("train-bootstrap", cfg);
  const auto data = split_of(entries_from(require_stage(out, "data", "synth", &manifest)), "train");
  std::vector<Volume> volumes;
  for (const auto& e : data) volumes.push_back(load_volume(out / e.volume));

  const InputTransform t = input_transform(cfg, InputKind::edge_profile);
  const TrainResult r = train(train_config(cfg, PathMode::single_path), encoder_config(cfg), t, volumes);
  prepare_dir(out / "bootstrap");
  save_model(out, "bootstrap", r, t, PathMode::single_path, manifest);
  write_json(out / "bootstrap" / "manifest.json", manifest);
}

void cmd_gen_pls(const PipelineConfig& cfg, const fs::path& out) {
  json manifest = new_manifest("gen-pls", cfg);
  const auto data = split_of(entries_from(require_stage(out, "data", "synth", &manifest)), "train");
  require_stage(out, "bootstrap", "train-bootstrap", &manifest);
  const Model model = load_model(out, "bootstrap");
  const WindowSpec window{cfg.get_int("propagate.window")};
  const std::uint64_t seed = cfg.get_u64("seed");

  const fs::path dir = pls_dir("raw");
  prepare_dir(out / dir);
  manifest["annotations"] = json::object();
  std::vector<std::pair<std::string, std::vector<PlQualityRow>>> report;
  for (const auto& e : data) {
    const Volume v = load_volume(out / e.volume);
    const MaskVolume gt = load_mask(out / e.mask);
    const int a = choose_annotated_slice(gt, cfg.get("annotate"), seed);
    const SliceMask seed_mask = gt.slice(a);
    const MaskVolume pl = generate_pls(model.params, v, a, seed_mask, window, model.transform);
    save_mask(pl, out / dir / e.id);
    add_stem(manifest["outputs"], out, dir / e.id);
    manifest["annotations"][e.id] = a;
    report.emplace_back(e.id, pl_quality_report(pl, gt, a));
  }
  write_pl_report(out / dir / "pl_quality.csv", report);
  add_file(manifest["outputs"], out, dir / "pl_quality.csv");
  write_json(out / dir / "manifest.json", manifest);
}

void cmd_refine_pls(const PipelineConfig& cfg, const fs::path& out) {
  const std::string name = cfg.get("refiner");
  if (name == "raw") throw ConfigError("refiner: 'raw' names the unrefined PLs; choose identity|morph|learned");
  check_name("refiner", name);
  make_refiner(name);  // rejects unknown names before any work
  const bool per_family = cfg.get_bool("refiner.per_family");

  json manifest = new_manifest("refine-pls", cfg);
  const auto data = split_of(entries_from(require_stage(out, "data", "synth", &manifest)), "train");
  const json raw = require_stage(out, pls_dir("raw"), "gen-pls", &manifest);

  std::vector<Volume> volumes;
  std::vector<MaskVolume> pls, gts;
  for (const auto& e : data) {
    volumes.push_back(load_volume(out / e.volume));
    gts.push_back(load_mask(out / e.mask));
    pls.push_back(load_mask(out / pls_dir("raw") / e.id));
  }

  // One refiner per family, or one shared by every train volume. Only the
  // learned refiner has state, so the grouping matters for it alone.
  std::map<std::string, std::unique_ptr<Refiner>> refiners;
  const auto group = [&](const DataEntry& e) { return per_family ? e.family : std::string("all"); };
  for (const auto& e : data) {
    const std::string g = group(e);
    if (refiners.count(g)) continue;
    auto r = make_refiner(name, refiner_config(cfg));
    if (auto* learned = dynamic_cast<LearnedRefiner*>(r.get())) {
      std::vector<Volume> gv;
      std::vector<MaskVolume> gp;
      for (std::size_t i = 0; i < data.size(); ++i)
        if (group(data[i]) == g) {
          gv.push_back(volumes[i]);
          gp.push_back(pls[i]);
        }
      learned->fit(gv, gp);
    }
    refiners.emplace(g, std::move(r));
  }

  const fs::path dir = pls_dir(name);
  prepare_dir(out / dir);
  manifest["annotations"] = raw.at("annotations");
  std::vector<std::pair<std::string, std::vector<PlQualityRow>>> report;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const int a = raw.at("annotations").at(data[i].id).get<int>();
    MaskVolume refined = refine_pls(*refiners.at(group(data[i])), volumes[i], pls[i]);
    impose_annotation(refined, a, gts[i].slice(a));
    refined.id = data[i].id;
    save_mask(refined, out / dir / data[i].id);
    add_stem(manifest["outputs"], out, dir / data[i].id);
    report.emplace_back(data[i].id, pl_quality_report(refined, gts[i], a));
  }
  write_pl_report(out / dir / "pl_quality.csv", report);
  add_file(manifest["outputs"], out, dir / "pl_quality.csv");
  write_json(out / dir / "manifest.json", manifest);
}

void cmd_train_oeg(const PipelineConfig& cfg, const fs::path& out) {
  const std::string name = cfg.get("oeg.name");
  check_name("oeg.name", name);
  if (name == "bootstrap") throw ConfigError("oeg.name: 'bootstrap' is reserved");
  const std::string source = cfg.get("oeg.pls");
  check_name("oeg.pls", source);

  json manifest = new_manifest("train-oeg", cfg);
  const auto data = split_of(entries_from(require_stage(out, "data", "synth", &manifest)), "train");
  require_stage(out, pls_dir(source), source == "raw" ? "gen-pls" : "refine-pls", &manifest);
  std::vector<Volume> volumes;
  std::vector<MaskVolume> pls;
  for (const auto& e : data) {
    volumes.push_back(load_volume(out / e.volume));
    pls.push_back(load_mask(out / pls_dir(source) / e.id));
  }

  const InputTransform t = input_transform(cfg, parse_input_kind(cfg.get("oeg.input")));
  const TrainResult r = train(train_config(cfg, PathMode::dual_path), encoder_config(cfg), t, volumes, pls);
  const fs::path dir = model_dir(name);
  prepare_dir(out / dir);
  save_model(out, dir, r, t, PathMode::dual_path, manifest);
  manifest["pls"] = source;
  write_json(out / dir / "manifest.json", manifest);
}

void cmd_propagate(const PipelineConfig& cfg, const fs::path& out) {
  const std::string model_name = cfg.get("propagate.model");
  check_name("propagate.model", model_name);
  const std::string run = run_name(cfg);
  check_name("propagate.run", run);
  PropagationConfig pc = propagation_config(cfg);

  json manifest = new_manifest("propagate", cfg);
  const json data_doc = require_stage(out, "data", "synth", &manifest);
  const auto data = split_of(entries_from(data_doc), "test");
  const fs::path mdir = model_dir(model_name);
  require_stage(out, mdir, model_name == "bootstrap" ? "train-bootstrap" : "train-oeg", &manifest);
  const Model model = load_model(out, mdir);
  if (model.mode == PathMode::single_path && pc.mode != PropagationMode::single_path)
    throw ConfigError("model '" + model_name + "' was trained single-path; propagate.mode must be single_path");
  pc.transform = model.transform;
  const std::uint64_t seed = cfg.get_u64("seed");

  const fs::path dir = fs::path("runs") / run;
  prepare_dir(out / dir);
  manifest["run"] = run;
  manifest["model"] = model_name;
  manifest["mode"] = to_string(pc.mode);
  manifest["model_digest"] = sha256_file(out / mdir / "model.bin");
  manifest["data_digest"] = sha256_file(out / "data" / "manifest.json");
  manifest["annotations"] = json::object();
  manifest["families"] = json::object();
  for (const auto& e : data) {
    const Volume v = load_volume(out / e.volume);
    const MaskVolume gt = load_mask(out / e.mask);
    const int a = choose_annotated_slice(gt, cfg.get("annotate"), seed);
    auto r = propagate_volume(model.params, v, a, gt.slice(a), pc);
    annotate_trace(r.trace, r.binary, gt);
    r.soft.id = r.binary.id = e.id;
    save_mask(r.soft, out / dir / (e.id + "_soft"));
    save_mask(r.binary, out / dir / (e.id + "_pred"));
    write_trace_csv(r.trace, out / dir / (e.id + "_trace.csv"));
    add_stem(manifest["outputs"], out, dir / (e.id + "_soft"));
    add_stem(manifest["outputs"], out, dir / (e.id + "_pred"));
    add_file(manifest["outputs"], out, dir / (e.id + "_trace.csv"));
    manifest["annotations"][e.id] = a;
    manifest["families"][e.id] = e.family;
  }
  write_json(out / dir / "manifest.json", manifest);
}

void cmd_eval(const PipelineConfig& cfg, const fs::path& out) {
  std::vector<fs::path> runs;
  for (const auto& r : cfg.get_list("eval.runs")) {
    const fs::path p(r);
    runs.push_back(p.is_absolute() ? p : out / "runs" / p);
  }
  if (runs.empty() && fs::is_directory(out / "runs")) {
    for (const auto& entry : fs::directory_iterator(out / "runs"))
      if (entry.is_directory()) runs.push_back(entry.path());
    std::sort(runs.begin(), runs.end());
  }
  if (runs.empty())
    throw StageDependencyError("no propagation runs under " + (out / "runs").string() +
                               " (run `sliceprop propagate` first)");

  json manifest = new_manifest("eval", cfg);
  std::vector<RunResult> results;
  std::string data_digest;
  for (const auto& run_dir : runs) {
    // A run's output root is two levels up: <root>/runs/<run>.
    const fs::path root = run_dir.parent_path().parent_path();
    const fs::path run_rel = fs::relative(run_dir, root);
    const json doc = require_stage(root, run_rel, "propagate");
    // runs below the output root are recorded relative to it, others verbatim
    fs::path key = (run_dir / "manifest.json").lexically_normal();
    if (const fs::path r = key.lexically_relative(out.lexically_normal()); !r.empty() && *r.begin() != "..")
      key = r;
    manifest["inputs"][key.generic_string()] = sha256_file(run_dir / "manifest.json");

    const std::string digest = doc.at("data_digest").get<std::string>();
    if (data_digest.empty()) data_digest = digest;
    if (digest != data_digest)
      throw StageDependencyError("mixed provenance: " + run_dir.string() + " was produced from a different data set");
    if (sha256_file(root / "data" / "manifest.json") != digest)
      throw StageDependencyError("mixed provenance: " + (root / "data").string() + " changed after " +
                                 run_dir.string() + " was produced");
    const fs::path mdir = model_dir(doc.at("model").get<std::string>());
    if (!fs::exists(root / mdir / "model.bin") ||
        sha256_file(root / mdir / "model.bin") != doc.at("model_digest").get<std::string>())
      throw StageDependencyError("mixed provenance: the model behind " + run_dir.string() +
                                 " changed or is missing; re-run `sliceprop propagate`");

    RunResult result;
    result.run_id = doc.at("run").get<std::string>();
    result.config_digest = doc.at("config_digest").get<std::string>();
    result.seed = doc.at("seed").get<std::uint64_t>();
    const auto entries = split_of(entries_from(read_json(root / "data" / "manifest.json")), "test");
    for (const auto& e : entries) {
      const MaskVolume gt = load_mask(root / e.mask);
      const MaskVolume pred = load_mask(run_dir / (e.id + "_pred"));
      result.volumes.push_back(score_volume(pred, gt, doc.at("annotations").at(e.id).get<int>(), e.family));
    }
    results.push_back(std::move(result));
  }

  prepare_dir(out / "eval");
  write_results_csv(results, out / "eval" / "results.csv");
  write_summary_csv(summarize_runs(results), out / "eval" / "summary.csv");
  write_decay_csv(decay_table(results), out / "eval" / "decay.csv");
  for (const char* f : {"results.csv", "summary.csv", "decay.csv"}) add_file(manifest["outputs"], out, fs::path("eval") / f);
  write_json(out / "eval" / "manifest.json", manifest);
}

namespace {

struct Canvas {
  int width, height;
  std::vector<std::array<unsigned char, 3>> pixels;

  Canvas(int w, int h) : width(w), height(h), pixels(std::size_t(w) * h, {255, 255, 255}) {}

  void put(int x, int y, std::array<unsigned char, 3> c) {
    if (x >= 0 && y >= 0 && x < width && y < height) pixels[std::size_t(y) * width + x] = c;
  }

  // Bresenham, drawn two pixels thick.
  void line(int x0, int y0, int x1, int y1, std::array<unsigned char, 3> c) {
    const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
    const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    while (true) {
      put(x0, y0, c);
      put(x0, y0 + 1, c);
      if (x0 == x1 && y0 == y1) break;
      const int e2 = 2 * err;
      if (e2 >= dy) {
        err += dy;
        x0 += sx;
      }
      if (e2 <= dx) {
        err += dx;
        y0 += sy;
      }
    }
  }

  void save(const fs::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw PersistenceError(path.string(), "cannot open for writing");
    out << "P6\n" << width << " " << height << "\n255\n";
    for (const auto& p : pixels) out.write(reinterpret_cast<const char*>(p.data()), 3);
  }
};

}  // namespace

void cmd_plot(const PipelineConfig& cfg, const fs::path& out) {
  json manifest = new_manifest("plot", cfg);
  require_stage(out, "eval", "eval", &manifest);

  // run -> distance -> mean Dice, runs in first-seen order
  std::vector<std::string> order;
  std::map<std::string, std::map<int, double>> curves;
  std::set<int> distances;
  {
    std::ifstream in(out / "eval" / "decay.csv");
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      std::istringstream row(line);
      std::string run, d, v;
      std::getline(row, run, ',');
      std::getline(row, d, ',');
      std::getline(row, v, ',');
      if (!curves.count(run)) order.push_back(run);
      curves[run][std::stoi(d)] = std::stod(v);
      distances.insert(std::stoi(d));
    }
  }
  if (order.empty()) throw StageDependencyError((out / "eval" / "decay.csv").string() + " holds no rows");

  prepare_dir(out / "plot");
  {
    std::ofstream csv(out / "plot" / "decay.csv", std::ios::trunc);
    if (!csv) throw PersistenceError((out / "plot" / "decay.csv").string(), "cannot open for writing");
    csv << std::setprecision(9) << "distance";
    for (const auto& r : order) csv << "," << r;
    csv << "\n";
    for (int d : distances) {
      csv << d;
      for (const auto& r : order) {
        csv << ",";
        if (auto it = curves[r].find(d); it != curves[r].end()) csv << it->second;
      }
      csv << "\n";
    }
  }
  add_file(manifest["outputs"], out, "plot/decay.csv");

  if (cfg.get_bool("plot.image")) {
    const int w = cfg.get_int("plot.width"), h = cfg.get_int("plot.height");
    if (w < 64 || h < 64) throw ConfigError("plot.width and plot.height must be >= 64");
    Canvas canvas(w, h);
    const int left = 40, right = w - 20, top = 20, bottom = h - 30;
    const int max_d = std::max(1, *distances.rbegin());
    auto px = [&](int d) { return left + (right - left) * d / max_d; };
    auto py = [&](double v) { return bottom - int(std::lround((bottom - top) * std::clamp(v, 0.0, 1.0))); };
    for (int k = 1; k <= 4; ++k) canvas.line(left, py(0.25 * k), right, py(0.25 * k), {225, 225, 225});
    canvas.line(left, bottom, right, bottom, {0, 0, 0});
    canvas.line(left, top, left, bottom, {0, 0, 0});
    static const std::array<std::array<unsigned char, 3>, 6> palette{
        {{31, 119, 180}, {255, 127, 14}, {44, 160, 44}, {214, 39, 40}, {148, 103, 189}, {140, 86, 75}}};
    manifest["legend"] = json::object();
    for (std::size_t i = 0; i < order.size(); ++i) {
      const auto color = palette[i % palette.size()];
      const auto& c = curves[order[i]];
      for (auto it = c.begin(); std::next(it) != c.end(); ++it) {
        const auto nx = std::next(it);
        canvas.line(px(it->first), py(it->second), px(nx->first), py(nx->second), color);
      }
      std::ostringstream hex;
      hex << "#" << std::hex << std::setfill('0') << std::setw(2) << int(color[0]) << std::setw(2) << int(color[1])
          << std::setw(2) << int(color[2]);
      manifest["legend"][order[i]] = hex.str();
    }
    canvas.save(out / "plot" / "decay.ppm");
    add_file(manifest["outputs"], out, "plot/decay.ppm");
  }
  write_json(out / "plot" / "manifest.json", manifest);
}

}  // namespace sliceprop
