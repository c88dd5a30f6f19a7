#include "salt/experiment.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "salt/checkpoint.hpp"
#include "salt/evalx.hpp"

namespace salt {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Strict object reader: every key in the object must be consumed.
class StrictObject {
 public:
  StrictObject(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    require(j.is_object(), where_ + " must be a JSON object");
  }

  ~StrictObject() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw std::invalid_argument("unknown key '" + key + "' in " + where_);
    }
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    return j_.at(key).get<T>();
  }

  template <typename T>
  T need(const std::string& key) {
    require(has(key), where_ + " is missing required key '" + key + "'");
    return j_.at(key).get<T>();
  }

  const json* child(const std::string& key) { return has(key) ? &j_.at(key) : nullptr; }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

void write_text_file(const std::string& path, const std::string& content) {
  const auto parent = fs::path(path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  std::ofstream os(path, std::ios::binary);
  require(os.good(), "cannot open for writing: " + path);
  os << content;
  require(os.good(), "write failed: " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(is.good(), "cannot open: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Corpus load_corpus_or_explain(const std::string& path, const std::string& hint) {
  if (!fs::exists(path)) throw std::invalid_argument(hint + " (expected " + path + ")");
  return load_corpus(path);
}

LoadedCheckpoint load_ckpt_or_explain(const std::string& path, const std::string& hint) {
  if (!fs::exists(path)) throw std::invalid_argument(hint + " (expected " + path + ")");
  return load_checkpoint(path);
}

// ---- JSON (de)serialization ------------------------------------------------

ordered_json source_to_json(const SourceSpec& s) {
  ordered_json j;
  j["kind"] = s.kind;
  if (s.kind == "markov") {
    j["order"] = s.order;
    j["vocab_size"] = s.vocab_size;
    j["concentration"] = s.concentration;
  } else {
    j["text_path"] = s.text_path;
  }
  return j;
}

SourceSpec source_from_json(const json& j) {
  StrictObject o(j, "source");
  SourceSpec s;
  s.kind = o.get<std::string>("kind", "markov");
  require(s.kind == "markov" || s.kind == "text", "source.kind must be 'markov' or 'text'");
  if (s.kind == "markov") {
    s.order = o.get<std::size_t>("order", 1);
    s.vocab_size = o.need<std::size_t>("vocab_size");
    s.concentration = o.get<double>("concentration", 1.0);
  } else {
    s.text_path = o.need<std::string>("text_path");
    s.vocab_size = kByteBos + 1;
  }
  return s;
}

ordered_json corpus_to_json(const CorpusSpec& c) {
  return ordered_json{{"train_n", c.train_n}, {"heldout_n", c.heldout_n}, {"seq_len", c.seq_len}};
}

CorpusSpec corpus_from_json(const json& j) {
  StrictObject o(j, "corpus");
  CorpusSpec c;
  c.train_n = o.need<std::size_t>("train_n");
  c.heldout_n = o.need<std::size_t>("heldout_n");
  c.seq_len = o.need<std::size_t>("seq_len");
  return c;
}

// vocab_size, max_len and bos_id are derived from the source and corpus specs
// rather than stored, so the shapes cannot drift apart.
ordered_json model_to_json(const LmConfig& m) {
  ordered_json j;
  j["d_model"] = m.d_model;
  j["n_layers"] = m.n_layers;
  j["n_heads"] = m.n_heads;
  j["d_ff"] = m.d_ff;
  j["init_std"] = m.init_std;
  if (m.prob_floor != 0.0) j["prob_floor"] = m.prob_floor;
  return j;
}

LmConfig model_from_json(const json& j, const std::string& where) {
  StrictObject o(j, where);
  LmConfig m;
  m.d_model = o.need<std::size_t>("d_model");
  m.n_layers = o.need<std::size_t>("n_layers");
  m.n_heads = o.need<std::size_t>("n_heads");
  m.d_ff = o.need<std::size_t>("d_ff");
  m.init_std = o.get<double>("init_std", 0.02);
  m.prob_floor = o.get<double>("prob_floor", 0.0);
  return m;
}

ordered_json plan_to_json(const TrainPlan& p) {
  ordered_json j;
  j["omega"] = p.omega;
  j["rho"] = p.rho;
  j["total_steps"] = p.total_steps;
  j["kd_steps"] = p.kd_steps;
  j["batch_size"] = p.batch_size;
  j["transition"] = ordered_json{{"kind", to_string(p.transition.kind)},
                                 {"decay_start", p.transition.decay_start},
                                 {"decay_end", p.transition.decay_end}};
  j["lr"] = ordered_json{
      {"peak", p.lr.peak}, {"final_lr", p.lr.final_lr}, {"warmup_steps", p.lr.warmup_steps}};
  j["adam"] = ordered_json{{"beta1", p.adam.beta1},
                           {"beta2", p.adam.beta2},
                           {"eps", p.adam.eps},
                           {"clip_norm", p.adam.clip_norm}};
  return j;
}

TrainPlan plan_from_json(const json& j, const std::string& where) {
  StrictObject o(j, where);
  TrainPlan p;
  p.omega = o.get<double>("omega", 0.0);
  p.rho = o.get<double>("rho", 1.0);
  p.total_steps = o.need<std::size_t>("total_steps");
  p.kd_steps = o.get<std::size_t>("kd_steps", 0);
  p.batch_size = o.get<std::size_t>("batch_size", 1);
  if (const json* t = o.child("transition")) {
    StrictObject ot(*t, where + ".transition");
    p.transition.kind = transition_kind_from_string(ot.get<std::string>("kind", "step"));
    p.transition.decay_start = ot.get<std::size_t>("decay_start", 0);
    p.transition.decay_end = ot.get<std::size_t>("decay_end", 0);
  }
  if (const json* l = o.child("lr")) {
    StrictObject ol(*l, where + ".lr");
    p.lr.peak = ol.get<double>("peak", 1e-3);
    p.lr.final_lr = ol.get<double>("final_lr", 1e-4);
    p.lr.warmup_steps = ol.get<std::size_t>("warmup_steps", 0);
  }
  if (const json* a = o.child("adam")) {
    StrictObject oa(*a, where + ".adam");
    p.adam.beta1 = oa.get<double>("beta1", 0.9);
    p.adam.beta2 = oa.get<double>("beta2", 0.999);
    p.adam.eps = oa.get<double>("eps", 1e-8);
    p.adam.clip_norm = oa.get<double>("clip_norm", 1.0);
  }
  return p;
}

ordered_json io_to_json(const IoSpec& io) {
  return ordered_json{{"ckpt_every", io.ckpt_every},
                      {"probe_every", io.probe_every},
                      {"probe_count", io.probe_count},
                      {"heldout_every", io.heldout_every}};
}

IoSpec io_from_json(const json& j) {
  StrictObject o(j, "io");
  IoSpec io;
  io.ckpt_every = o.get<std::size_t>("ckpt_every", 0);
  io.probe_every = o.get<std::size_t>("probe_every", 0);
  io.probe_count = o.get<std::size_t>("probe_count", 0);
  io.heldout_every = o.get<std::size_t>("heldout_every", 0);
  return io;
}

ordered_json selection_to_json(const SelectionSpec& s) {
  return ordered_json{{"top_k", s.top_k},
                      {"m", s.m},
                      {"n0_fraction", s.n0_fraction},
                      {"mask", to_string(s.mask)},
                      {"epochs_allowed", s.epochs_allowed}};
}

SelectionSpec selection_from_json(const json& j) {
  StrictObject o(j, "selection");
  SelectionSpec s;
  s.top_k = o.get<std::size_t>("top_k", 1);
  s.m = o.get<std::size_t>("m", 0);
  s.n0_fraction = o.get<double>("n0_fraction", 0.5);
  s.mask = mask_mode_from_string(o.get<std::string>("mask", "exclude"));
  s.epochs_allowed = o.get<std::size_t>("epochs_allowed", 1);
  return s;
}

ordered_json diagnostics_to_json(const DiagnosticsSpec& d) {
  ordered_json j;
  j["enabled"] = d.enabled;
  j["student_role"] = d.student_role;
  j["student_step"] = d.student_step;
  j["teacher"] = d.teacher;
  j["seq_len"] = d.seq_len;
  j["corpus_n"] = d.corpus_n;
  j["omega"] = d.omega;
  j["rho"] = d.rho;
  j["m"] = d.m;
  j["delta"] = d.delta;
  j["log_card"] = d.log_card;
  j["node_cap"] = d.node_cap;
  j["omega_grid"] = d.omega_grid;
  j["variance_prefixes"] = d.variance_prefixes;
  j["mc_samples"] = d.mc_samples;
  j["xi_sequences"] = d.xi_sequences;
  j["xi_mc_samples"] = d.xi_mc_samples;
  return j;
}

DiagnosticsSpec diagnostics_from_json(const json& j) {
  StrictObject o(j, "diagnostics");
  DiagnosticsSpec d;
  d.enabled = o.get<bool>("enabled", false);
  d.student_role = o.get<std::string>("student_role", "salt");
  d.student_step = o.get<std::size_t>("student_step", 0);
  d.teacher = o.get<std::string>("teacher", "slm");
  d.seq_len = o.get<std::size_t>("seq_len", 0);
  d.corpus_n = o.get<std::size_t>("corpus_n", 256);
  d.omega = o.get<double>("omega", -1.0);
  d.rho = o.get<double>("rho", -1.0);
  d.m = o.get<double>("m", 0.0);
  d.delta = o.get<double>("delta", 0.1);
  d.log_card = o.get<double>("log_card", 0.0);
  d.node_cap = o.get<std::size_t>("node_cap", std::size_t{1} << 20);
  d.omega_grid = o.get<std::vector<double>>("omega_grid", d.omega_grid);
  d.variance_prefixes = o.get<std::size_t>("variance_prefixes", 64);
  d.mc_samples = o.get<std::size_t>("mc_samples", 4096);
  d.xi_sequences = o.get<std::size_t>("xi_sequences", 32);
  d.xi_mc_samples = o.get<std::size_t>("xi_mc_samples", 64);
  return d;
}

// ---- provenance ------------------------------------------------------------

struct Provenance {
  std::string config_hash;
  std::string corpus_hash;
};

std::string provenance_header(const Provenance& prov, Role role, const TrainPlan& plan) {
  ordered_json j;
  j["run_id"] = prov.config_hash.substr(0, 12) + "-" + to_string(role);
  j["role"] = to_string(role);
  j["config_hash"] = prov.config_hash;
  j["corpus_hash"] = prov.corpus_hash;
  j["seed"] = plan.seed;
  if (!plan.teacher_ref.empty()) j["teacher_ref"] = plan.teacher_ref;
  return j.dump();
}

// lines holding step records start with {"step"; the run header does not
bool is_step_line(const std::string& line) { return line.rfind("{\"step\"", 0) == 0; }

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream is(path);
  require(is.good(), "cannot open: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

}  // namespace

// ---- small public helpers ----------------------------------------------------

std::string to_string(Role role) {
  switch (role) {
    case Role::kSlm: return "slm";
    case Role::kBaseline: return "baseline";
    case Role::kSalt: return "salt";
    case Role::kSaltDs: return "salt_ds";
    case Role::kRkd: return "rkd";
  }
  throw std::logic_error("unreachable role");
}

Role role_from_string(const std::string& s) {
  if (s == "slm") return Role::kSlm;
  if (s == "baseline") return Role::kBaseline;
  if (s == "salt") return Role::kSalt;
  if (s == "salt_ds") return Role::kSaltDs;
  if (s == "rkd") return Role::kRkd;
  throw std::invalid_argument("unknown role: " + s);
}

std::uint64_t derived_seed(std::uint64_t master, std::string_view purpose) {
  return Rng(master).derive(purpose).seed();
}

const TrainPlan& ExperimentConfig::plan_for(Role role) const {
  switch (role) {
    case Role::kSlm: return slm_plan;
    case Role::kBaseline: return baseline_plan;
    case Role::kSalt: return salt_plan;
    case Role::kSaltDs: return salt_ds_plan;
    case Role::kRkd: return rkd_plan;
  }
  throw std::logic_error("unreachable role");
}

const LmConfig& ExperimentConfig::model_for(Role role) const {
  return role == Role::kSlm ? slm_model : llm_model;
}

void ExperimentConfig::validate() const {
  require(!out_dir.empty(), "config: out_dir must not be empty");
  if (source.kind == "markov") {
    require(source.vocab_size >= 2, "config: source needs at least two tokens");
  } else {
    require(source.kind == "text", "config: source.kind must be 'markov' or 'text'");
    require(!source.text_path.empty(), "config: text sources need text_path");
  }
  require(corpus.train_n >= 1 && corpus.heldout_n >= 1, "config: corpora must be nonempty");
  require(corpus.seq_len >= 1, "config: seq_len must be positive");
  slm_model.validate();
  llm_model.validate();
  for (Role role : {Role::kSlm, Role::kBaseline, Role::kSalt, Role::kSaltDs, Role::kRkd}) {
    try {
      plan_for(role).validate();
    } catch (const std::exception& e) {
      throw std::invalid_argument(std::string("config: ") + to_string(role) + " plan: " + e.what());
    }
  }
  require(selection.top_k >= 1, "config: selection.top_k must be positive");
  require(selection.n0_fraction > 0.0 && selection.n0_fraction <= 1.0,
          "config: selection.n0_fraction must lie in (0, 1]");
  require(selection.epochs_allowed >= 1, "config: selection.epochs_allowed must be positive");
  require(diagnostics.teacher == "slm" || diagnostics.teacher == "oracle" ||
              diagnostics.teacher == "none",
          "config: diagnostics.teacher must be 'slm', 'oracle' or 'none'");
  role_from_string(diagnostics.student_role);
}

DiagnosticsOptions DiagnosticsSpec::options() const {
  DiagnosticsOptions o;
  o.m = m;
  o.delta = delta;
  o.log_card = log_card;
  o.omega_grid = omega_grid;
  o.variance_prefixes = variance_prefixes;
  o.mc_samples = mc_samples;
  o.xi_sequences = xi_sequences;
  o.xi_mc_samples = xi_mc_samples;
  return o;
}

ordered_json config_to_json(const ExperimentConfig& cfg) {
  ordered_json j;
  j["master_seed"] = cfg.master_seed;
  j["out_dir"] = cfg.out_dir;
  j["source"] = source_to_json(cfg.source);
  j["corpus"] = corpus_to_json(cfg.corpus);
  j["slm"] = ordered_json{{"model", model_to_json(cfg.slm_model)},
                          {"plan", plan_to_json(cfg.slm_plan)}};
  j["llm"] = ordered_json{{"model", model_to_json(cfg.llm_model)},
                          {"plans", ordered_json{{"baseline", plan_to_json(cfg.baseline_plan)},
                                                 {"salt", plan_to_json(cfg.salt_plan)},
                                                 {"salt_ds", plan_to_json(cfg.salt_ds_plan)},
                                                 {"rkd", plan_to_json(cfg.rkd_plan)}}}};
  j["io"] = io_to_json(cfg.io);
  j["selection"] = selection_to_json(cfg.selection);
  j["diagnostics"] = diagnostics_to_json(cfg.diagnostics);
  return j;
}

ExperimentConfig config_from_json(const json& j) {
  StrictObject o(j, "config");
  ExperimentConfig cfg;
  cfg.master_seed = o.need<std::uint64_t>("master_seed");
  cfg.out_dir = o.get<std::string>("out_dir", "run");
  {
    const json* s = o.child("source");
    require(s != nullptr, "config is missing required key 'source'");
    cfg.source = source_from_json(*s);
  }
  {
    const json* c = o.child("corpus");
    require(c != nullptr, "config is missing required key 'corpus'");
    cfg.corpus = corpus_from_json(*c);
  }
  {
    const json* s = o.child("slm");
    require(s != nullptr, "config is missing required key 'slm'");
    StrictObject os(*s, "slm");
    cfg.slm_model = model_from_json(os.need<json>("model"), "slm.model");
    cfg.slm_plan = plan_from_json(os.need<json>("plan"), "slm.plan");
  }
  {
    const json* l = o.child("llm");
    require(l != nullptr, "config is missing required key 'llm'");
    StrictObject ol(*l, "llm");
    cfg.llm_model = model_from_json(ol.need<json>("model"), "llm.model");
    const json plans = ol.need<json>("plans");
    StrictObject op(plans, "llm.plans");
    cfg.baseline_plan = plan_from_json(op.need<json>("baseline"), "llm.plans.baseline");
    cfg.salt_plan = plan_from_json(op.need<json>("salt"), "llm.plans.salt");
    cfg.rkd_plan = plan_from_json(op.need<json>("rkd"), "llm.plans.rkd");
    cfg.salt_ds_plan = op.has("salt_ds") ? plan_from_json(plans.at("salt_ds"), "llm.plans.salt_ds")
                                         : cfg.salt_plan;  // defaults to the salt schedule
  }
  if (const json* io = o.child("io")) cfg.io = io_from_json(*io);
  if (const json* s = o.child("selection")) cfg.selection = selection_from_json(*s);
  if (const json* d = o.child("diagnostics")) cfg.diagnostics = diagnostics_from_json(*d);

  // shapes and derived fields
  const std::size_t v = cfg.source.vocab_size;
  cfg.slm_model.vocab_size = v;
  cfg.llm_model.vocab_size = v;
  cfg.slm_model.max_len = cfg.corpus.seq_len;
  cfg.llm_model.max_len = cfg.corpus.seq_len;
  if (cfg.source.kind == "text") {
    cfg.slm_model.bos_id = kByteBos;
    cfg.llm_model.bos_id = kByteBos;
  }
  cfg.slm_plan.mode = TrainMode::kBaseline;
  cfg.baseline_plan.mode = TrainMode::kBaseline;
  cfg.salt_plan.mode = TrainMode::kSalt;
  cfg.salt_ds_plan.mode = TrainMode::kSalt;
  cfg.rkd_plan.mode = TrainMode::kRkd;
  cfg.slm_plan.seed = derived_seed(cfg.master_seed, "train-slm");
  // the large-model regimes share one stream so runs differ only in the loss
  const std::uint64_t llm_seed = derived_seed(cfg.master_seed, "train-llm");
  cfg.baseline_plan.seed = llm_seed;
  cfg.salt_plan.seed = llm_seed;
  cfg.salt_ds_plan.seed = llm_seed;
  cfg.rkd_plan.seed = llm_seed;
  return cfg;
}

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config " + path + " is not valid JSON: " + e.what());
  }
  for (const std::string& ov : overrides) {
    const std::size_t eq = ov.find('=');
    require(eq != std::string::npos && eq > 0, "override must look like dotted.path=value: " + ov);
    const std::string dotted = ov.substr(0, eq);
    const std::string value = ov.substr(eq + 1);
    json* node = &j;
    std::size_t begin = 0;
    while (true) {
      const std::size_t dot = dotted.find('.', begin);
      const std::string key = dotted.substr(begin, dot - begin);
      require(!key.empty(), "override has an empty path segment: " + ov);
      if (dot == std::string::npos) {
        json parsed = json::parse(value, nullptr, /*allow_exceptions=*/false);
        (*node)[key] = parsed.is_discarded() ? json(value) : parsed;
        break;
      }
      node = &(*node)[key];
      begin = dot + 1;
    }
  }
  return config_from_json(j);
}

std::string config_hash_hex(const ExperimentConfig& cfg) {
  return hex64(Rng::fnv1a(config_to_json(cfg).dump()));
}

std::string corpus_hash_hex(const Corpus& corpus) {
  std::string bytes = "corpus:v=" + std::to_string(corpus.vocab_size) +
                      ";t=" + std::to_string(corpus.seq_len) +
                      ";n=" + std::to_string(corpus.size()) + ";";
  bytes.reserve(bytes.size() + corpus.tokens.size() * 4);
  for (std::uint32_t tok : corpus.tokens) {
    for (int shift = 0; shift < 32; shift += 8) bytes.push_back(char((tok >> shift) & 0xff));
  }
  return hex64(Rng::fnv1a(bytes));
}

std::string output_root(const std::string& cli_root) {
  if (!cli_root.empty()) return cli_root;
  if (const char* env = std::getenv("SALT_OUT_ROOT"); env != nullptr && *env != '\0') return env;
  return "out";
}

RunPaths run_paths(const ExperimentConfig& cfg, const std::string& root) {
  return RunPaths{fs::path(output_root(root)) / cfg.out_dir};
}

std::string RunPaths::metrics_jsonl(Role role) const {
  return (run / to_string(role) / "metrics.jsonl").string();
}

std::string RunPaths::ckpt(Role role, std::size_t step) const {
  return checkpoint_path(role_dir(role), step);
}

std::string RunPaths::eval_metrics_json(Role role) const {
  return (run / "eval" / ("metrics_" + to_string(role) + ".json")).string();
}

std::string RunPaths::curves_csv(Role role) const {
  return (run / "eval" / ("curves_" + to_string(role) + ".csv")).string();
}

ManifestInfo read_manifest(const std::string& path) {
  if (!fs::exists(path))
    throw std::invalid_argument("run gen-data first (expected " + path + ")");
  const json j = json::parse(read_text_file(path));
  require(j.value("schema", "") == "salt-manifest-v1", "unrecognized manifest schema in " + path);
  ManifestInfo info;
  info.config_hash = j.at("config_hash").get<std::string>();
  const json& src = j.at("source");
  info.kind = src.at("kind").get<std::string>();
  info.order = src.value("order", std::size_t{0});
  info.vocab_size = src.at("vocab_size").get<std::size_t>();
  info.source_seed = src.value("seed", std::uint64_t{0});
  const json& train = j.at("corpora").at("train");
  info.train_n = train.at("n").get<std::size_t>();
  info.seq_len = train.at("seq_len").get<std::size_t>();
  info.train_hash = train.at("hash").get<std::string>();
  const json& held = j.at("corpora").at("heldout");
  info.heldout_n = held.at("n").get<std::size_t>();
  info.heldout_hash = held.at("hash").get<std::string>();
  return info;
}

GroundTruthSource build_source(const ExperimentConfig& cfg) {
  require(cfg.source.kind == "markov",
          "exact conditionals need a markov source; got kind=" + cfg.source.kind);
  return make_markov_source(cfg.source.order, cfg.source.vocab_size, cfg.source.concentration,
                            Rng(derived_seed(cfg.master_seed, "source")));
}

// ---- subcommands -------------------------------------------------------------

namespace {

// train + heldout with provenance checked against the manifest
struct LoadedData {
  Corpus train;
  Corpus heldout;
  Provenance prov;
};

LoadedData load_run_data(const ExperimentConfig& cfg, const RunPaths& paths) {
  LoadedData d;
  d.prov.config_hash = config_hash_hex(cfg);
  const ManifestInfo manifest = read_manifest(paths.manifest_json());
  require(manifest.config_hash == d.prov.config_hash,
          "artifacts under " + paths.run.string() + " were generated from a different config " +
              "(manifest " + manifest.config_hash + ", current " + d.prov.config_hash + ")");
  d.train = load_corpus_or_explain(paths.train_corpus(), "run gen-data first");
  d.heldout = load_corpus_or_explain(paths.heldout_corpus(), "run gen-data first");
  d.prov.corpus_hash = corpus_hash_hex(d.train);
  require(d.prov.corpus_hash == manifest.train_hash,
          "train corpus file does not match its manifest hash");
  return d;
}

std::size_t scoring_step(const ExperimentConfig& cfg) {
  return std::size_t(std::llround(cfg.selection.n0_fraction * double(cfg.slm_plan.total_steps)));
}

std::vector<std::uint32_t> selected_indices(const RunPaths& paths, std::size_t m) {
  if (!fs::exists(paths.scores_csv()))
    throw std::invalid_argument("run score first (expected " + paths.scores_csv() + ")");
  const std::vector<SelectionRecord> records = read_scores_csv(paths.scores_csv());
  return select_top_m(records, m);
}

}  // namespace

void cmd_gen_data(const ExperimentConfig& cfg, const RunPaths& paths) {
  cfg.validate();
  const std::string config_hash = config_hash_hex(cfg);

  Corpus train;
  Corpus heldout;
  const std::uint64_t train_seed = derived_seed(cfg.master_seed, "train-corpus");
  const std::uint64_t heldout_seed = derived_seed(cfg.master_seed, "heldout-corpus");
  ordered_json source_meta;
  source_meta["kind"] = cfg.source.kind;
  if (cfg.source.kind == "markov") {
    const GroundTruthSource source = build_source(cfg);
    train = sample_corpus(source, cfg.corpus.train_n, cfg.corpus.seq_len, Rng(train_seed));
    heldout = sample_corpus(source, cfg.corpus.heldout_n, cfg.corpus.seq_len, Rng(heldout_seed));
    source_meta["order"] = cfg.source.order;
    source_meta["vocab_size"] = cfg.source.vocab_size;
    source_meta["concentration"] = cfg.source.concentration;
    source_meta["seed"] = derived_seed(cfg.master_seed, "source");
    source_meta["source_id"] = source.source_id;
  } else {
    const Corpus all = ingest_text(cfg.source.text_path, cfg.corpus.seq_len);
    require(all.size() >= cfg.corpus.train_n + cfg.corpus.heldout_n,
            "text file yields " + std::to_string(all.size()) + " sequences; config needs " +
                std::to_string(cfg.corpus.train_n + cfg.corpus.heldout_n));
    std::vector<std::uint32_t> idx(cfg.corpus.train_n);
    std::iota(idx.begin(), idx.end(), 0u);
    train = subset_corpus(all, idx);
    idx.resize(cfg.corpus.heldout_n);
    std::iota(idx.begin(), idx.end(), std::uint32_t(cfg.corpus.train_n));
    heldout = subset_corpus(all, idx);
    source_meta["vocab_size"] = all.vocab_size;
    source_meta["text_path"] = cfg.source.text_path;
  }

  fs::create_directories(fs::path(paths.train_corpus()).parent_path());
  save_corpus(paths.train_corpus(), train);
  save_corpus(paths.heldout_corpus(), heldout);

  ordered_json manifest;
  manifest["schema"] = "salt-manifest-v1";
  manifest["config_hash"] = config_hash;
  manifest["source"] = source_meta;
  manifest["corpora"] =
      ordered_json{{"train", ordered_json{{"path", "corpus/train.saltcorp"},
                                          {"n", train.size()},
                                          {"seq_len", train.seq_len},
                                          {"seed", train_seed},
                                          {"hash", corpus_hash_hex(train)}}},
                   {"heldout", ordered_json{{"path", "corpus/heldout.saltcorp"},
                                            {"n", heldout.size()},
                                            {"seq_len", heldout.seq_len},
                                            {"seed", heldout_seed},
                                            {"hash", corpus_hash_hex(heldout)}}}};
  write_text_file(paths.manifest_json(), manifest.dump(2) + "\n");

  ordered_json snapshot;
  snapshot["config_hash"] = config_hash;
  snapshot["config"] = config_to_json(cfg);
  write_text_file(paths.config_json(), snapshot.dump(2) + "\n");
}

TrainOutcome cmd_train(const ExperimentConfig& cfg, const RunPaths& paths, Role role,
                       const std::string& fork_from) {
  cfg.validate();
  const LoadedData data = load_run_data(cfg, paths);
  TrainPlan plan = cfg.plan_for(role);

  // prerequisite artifacts
  LmModel teacher;
  const bool needs_teacher = role == Role::kSalt || role == Role::kSaltDs || role == Role::kRkd;
  if (needs_teacher) {
    const std::string teacher_path = paths.ckpt(Role::kSlm, cfg.slm_plan.total_steps);
    teacher = load_ckpt_or_explain(teacher_path, "train the slm role first").model;
    // run-relative so artifacts stay byte-identical wherever the root lives
    plan.teacher_ref = fs::path(teacher_path).lexically_relative(paths.run).string();
  }
  if (role == Role::kSaltDs) {
    const std::size_t required =
        (plan.kd_steps * plan.batch_size + cfg.selection.epochs_allowed - 1) /
        cfg.selection.epochs_allowed;
    require(cfg.selection.m >= required,
            "salt_ds: selection.m = " + std::to_string(cfg.selection.m) +
                " cannot cover the distillation phase without replacement: kd_steps (" +
                std::to_string(plan.kd_steps) + ") * batch_size (" +
                std::to_string(plan.batch_size) + ") / epochs_allowed (" +
                std::to_string(cfg.selection.epochs_allowed) + ") requires m >= " +
                std::to_string(required));
    plan.kd_subset = selected_indices(paths, cfg.selection.m);
  }

  // an already-finished run is left untouched
  const std::string final_ckpt = paths.ckpt(role, plan.total_steps);
  if (fs::exists(final_ckpt)) {
    TrainOutcome out;
    out.model = load_checkpoint(final_ckpt).model;
    out.steps_completed = plan.total_steps;
    return out;
  }

  // crash recovery: an interrupted run continues from its newest checkpoint
  std::size_t resume_step = 0;
  if (fs::exists(paths.role_dir(role))) {
    for (const auto& entry : fs::directory_iterator(paths.role_dir(role))) {
      const std::string name = entry.path().filename().string();
      std::size_t step = 0;
      if (std::sscanf(name.c_str(), "step-%zu.ckpt", &step) == 1 && step <= plan.total_steps)
        resume_step = std::max(resume_step, step);
    }
  }

  TrainIo io;
  io.metrics_path = paths.metrics_jsonl(role);
  io.ckpt_dir = paths.role_dir(role);
  io.ckpt_every = cfg.io.ckpt_every;
  io.probe_every = cfg.io.probe_every;
  io.probe_count = cfg.io.probe_count;
  io.heldout = &data.heldout;
  io.heldout_every = cfg.io.heldout_every;
  io.run_id = data.prov.config_hash.substr(0, 12) + "-" + to_string(role);
  io.note = provenance_header(data.prov, role, plan);
  io.header = io.note;
  fs::create_directories(io.ckpt_dir);

  if (resume_step > 0)
    return resume_train(plan, data.train, paths.ckpt(role, resume_step),
                        needs_teacher ? &teacher : nullptr, io);

  if (fork_from.empty())
    return train(plan, data.train, cfg.model_for(role), needs_teacher ? &teacher : nullptr, io);

  // resume from another role's checkpoint instead of repeating an identical
  // distillation phase; every knob that shapes the shared prefix must agree
  const Role source_role = role_from_string(fork_from);
  require(source_role != role, "fork: source role must differ from the trained role");
  require(role != Role::kSlm && source_role != Role::kSlm, "fork: only large-model roles fork");
  const TrainPlan& src = cfg.plan_for(source_role);
  const std::size_t fork_step = std::min(plan.kd_steps, src.total_steps);
  require(fork_step >= 1, "fork: the target plan has no distillation phase to reuse");
  require(src.seed == plan.seed && src.batch_size == plan.batch_size,
          "fork: batch streams differ between the two plans");
  require(src.total_steps == plan.total_steps && src.lr.peak == plan.lr.peak &&
              src.lr.final_lr == plan.lr.final_lr && src.lr.warmup_steps == plan.lr.warmup_steps,
          "fork: learning-rate schedules differ between the two plans");
  require(src.adam.beta1 == plan.adam.beta1 && src.adam.beta2 == plan.adam.beta2 &&
              src.adam.eps == plan.adam.eps && src.adam.clip_norm == plan.adam.clip_norm,
          "fork: optimizer settings differ between the two plans");
  require(!src.kd_subset && !plan.kd_subset, "fork: subset-fed phases cannot be shared");
  require(src.rho == plan.rho, "fork: teacher temperatures differ between the two plans");
  for (std::size_t j = 1; j <= fork_step; ++j) {
    require(omega_at_step(src, j) == omega_at_step(plan, j),
            "fork: omega schedules diverge at step " + std::to_string(j));
  }
  const std::string fork_ckpt = paths.ckpt(source_role, fork_step);
  if (!fs::exists(fork_ckpt))
    throw std::invalid_argument("fork: train the " + fork_from +
                                " role with a checkpoint at step " + std::to_string(fork_step) +
                                " first (expected " + fork_ckpt + ")");

  // re-save the shared state under this role's identity so the run directory
  // looks exactly like an uninterrupted run of the role (the boundary
  // checkpoint differs from the source one only in its metadata)
  const LoadedCheckpoint shared = load_checkpoint(fork_ckpt);
  ordered_json meta;
  meta["step"] = fork_step;
  meta["run_id"] = io.run_id;
  meta["note"] = io.note;
  const std::string own_ckpt = paths.ckpt(role, fork_step);
  save_checkpoint(own_ckpt, shared.model, meta.dump(), shared.extra);

  // stitch the shared metrics prefix, then continue under this role's plan
  std::string stitched = io.header + "\n";
  for (const std::string& line : read_lines(paths.metrics_jsonl(source_role))) {
    if (!is_step_line(line)) continue;
    const json rec = json::parse(line);
    if (rec.at("step").get<std::size_t>() <= fork_step) stitched += line + "\n";
  }
  write_text_file(io.metrics_path, stitched);
  return resume_train(plan, data.train, own_ckpt, needs_teacher ? &teacher : nullptr, io);
}

void cmd_score(const ExperimentConfig& cfg, const RunPaths& paths) {
  cfg.validate();
  const LoadedData data = load_run_data(cfg, paths);
  const std::size_t n0 = scoring_step(cfg);
  const std::string teacher_path = paths.ckpt(Role::kSlm, n0);
  if (!fs::exists(teacher_path))
    throw std::invalid_argument(
        "scoring checkpoint missing; train the slm role with io.ckpt_every covering step " +
        std::to_string(n0) + " (expected " + teacher_path + ")");
  const LmModel teacher = load_checkpoint(teacher_path).model;
  const std::string tag = to_string(Role::kSlm) + "/step-" + std::to_string(n0) +
                          "|cfg=" + data.prov.config_hash + "|corpus=" + data.prov.corpus_hash;
  const std::vector<SelectionRecord> records =
      score_corpus(teacher, data.train, cfg.selection.top_k, cfg.selection.mask, tag);
  fs::create_directories(fs::path(paths.scores_csv()).parent_path());
  write_scores_csv(paths.scores_csv(), records);
}

void cmd_select(const ExperimentConfig& cfg, const RunPaths& paths) {
  cfg.validate();
  const LoadedData data = load_run_data(cfg, paths);
  const std::vector<SelectionRecord> records = [&] {
    if (!fs::exists(paths.scores_csv()))
      throw std::invalid_argument("run score first (expected " + paths.scores_csv() + ")");
    return read_scores_csv(paths.scores_csv());
  }();
  std::size_t scoreable = 0;
  for (const auto& r : records) scoreable += r.score.has_value() ? 1 : 0;
  const std::size_t m = cfg.selection.m == 0 ? scoreable : cfg.selection.m;
  const std::vector<std::uint32_t> kept = select_top_m(records, m);

  // the emitted file is ordered by score, best first (training reads the
  // ascending index list from the scores file instead)
  std::vector<std::uint32_t> by_score = kept;
  std::sort(by_score.begin(), by_score.end(), [&](std::uint32_t a, std::uint32_t b) {
    if (*records[a].score != *records[b].score) return *records[a].score > *records[b].score;
    return a < b;
  });
  const Corpus selected = subset_corpus(data.train, by_score);
  save_corpus(paths.selected_corpus(), selected);

  ordered_json meta;
  meta["config_hash"] = data.prov.config_hash;
  meta["corpus_hash"] = data.prov.corpus_hash;
  meta["teacher_ckpt"] = records.empty() ? "" : records.front().teacher_ckpt;
  meta["top_k"] = cfg.selection.top_k;
  meta["mask"] = to_string(cfg.selection.mask);
  meta["m"] = m;
  meta["scoreable"] = scoreable;
  meta["selected_hash"] = corpus_hash_hex(selected);
  write_text_file(paths.selection_json(), meta.dump(2) + "\n");
}

namespace {

constexpr std::array<Role, 5> kAllRoles{Role::kSlm, Role::kBaseline, Role::kSalt, Role::kSaltDs,
                                        Role::kRkd};

void append_bucket_rows(std::string& out, Role role, std::size_t step,
                        const BucketMetrics& metrics, const Provenance& prov) {
  const std::array<std::pair<Bucket, const std::optional<EvalMetrics>*>, 3> rows{
      {{Bucket::kEasy, &metrics.easy},
       {Bucket::kMedium, &metrics.medium},
       {Bucket::kHard, &metrics.hard}}};
  for (const auto& [bucket, m] : rows) {
    if (!m->has_value()) continue;
    out += to_string(role) + "," + std::to_string(step) + "," + to_string(bucket) + "," +
           std::to_string((*m)->positions) + "," + format_double((*m)->next_token_accuracy) + "," +
           format_double((*m)->log_perplexity) + "," + prov.config_hash + "," + prov.corpus_hash +
           "\n";
  }
}

}  // namespace

void cmd_eval(const ExperimentConfig& cfg, const RunPaths& paths) {
  cfg.validate();
  const LoadedData data = load_run_data(cfg, paths);
  const Provenance held_prov{data.prov.config_hash, corpus_hash_hex(data.heldout)};
  fs::create_directories(paths.eval_dir());

  // per-model held-out metrics for every finished role
  for (Role role : kAllRoles) {
    const std::size_t final_step = cfg.plan_for(role).total_steps;
    const std::string ckpt = paths.ckpt(role, final_step);
    if (!fs::exists(ckpt)) continue;
    const LmModel model = load_checkpoint(ckpt).model;
    const EvalMetrics m = held_out_metrics(model, data.heldout);
    ordered_json j;
    j["role"] = to_string(role);
    j["step"] = final_step;
    j["heldout_log_perplexity"] = m.log_perplexity;
    j["heldout_accuracy"] = m.next_token_accuracy;
    j["positions"] = m.positions;
    j["config_hash"] = held_prov.config_hash;
    j["corpus_hash"] = held_prov.corpus_hash;
    write_text_file(paths.eval_metrics_json(role), j.dump(2) + "\n");
  }

  // step-vs-metric curves from each training log
  for (Role role : kAllRoles) {
    const std::string metrics = paths.metrics_jsonl(role);
    if (!fs::exists(metrics)) continue;
    std::string csv =
        "step,omega,lr,loss,distill,combined,batch_acc,probe_ce,probe_acc,heldout_logpplx,"
        "heldout_acc,config_hash,corpus_hash\n";
    long long last_step = -1;
    for (const std::string& line : read_lines(metrics)) {
      if (!is_step_line(line)) continue;
      const json rec = json::parse(line);
      const long long step = rec.at("step").get<long long>();
      if (step <= last_step) continue;  // crash-and-retry logs keep the first pass
      last_step = step;
      auto opt = [&](const char* key) -> std::string {
        return rec.contains(key) ? format_double(rec.at(key).get<double>()) : std::string();
      };
      csv += std::to_string(step) + "," + opt("omega") + "," + opt("lr") + "," + opt("loss") +
             "," + opt("distill") + "," + opt("combined") + "," + opt("batch_acc") + "," +
             opt("probe_ce") + "," + opt("probe_acc") + "," + opt("heldout_logpplx") + "," +
             opt("heldout_acc") + "," + data.prov.config_hash + "," + data.prov.corpus_hash +
             "\n";
    }
    write_text_file(paths.curves_csv(role), csv);
  }

  // difficulty buckets ranked by the teacher, evaluated at the distillation
  // boundary and at the end of training
  const std::string slm_ckpt = paths.ckpt(Role::kSlm, cfg.slm_plan.total_steps);
  if (fs::exists(slm_ckpt)) {
    const LmModel slm = load_checkpoint(slm_ckpt).model;
    const BucketAssignment buckets = bucket_partition(slm, data.heldout);
    write_bucket_csv(paths.buckets_csv(), buckets);

    std::string csv = "role,step,bucket,positions,accuracy,log_perplexity,config_hash,corpus_hash\n";
    for (Role role : {Role::kBaseline, Role::kSalt, Role::kSaltDs, Role::kRkd}) {
      std::vector<std::size_t> steps{cfg.salt_plan.kd_steps, cfg.plan_for(role).total_steps};
      std::sort(steps.begin(), steps.end());
      steps.erase(std::unique(steps.begin(), steps.end()), steps.end());
      for (std::size_t step : steps) {
        const std::string ckpt = paths.ckpt(role, step);
        if (!fs::exists(ckpt)) continue;
        const LmModel model = load_checkpoint(ckpt).model;
        append_bucket_rows(csv, role, step, per_bucket_metrics(model, data.heldout, buckets),
                           held_prov);
      }
    }
    write_text_file(paths.bucket_metrics_csv(), csv);
  }
}

void cmd_report(const ExperimentConfig& cfg, const RunPaths& paths) {
  cfg.validate();
  const std::string config_hash = config_hash_hex(cfg);

  std::vector<ordered_json> rows;
  for (Role role : kAllRoles) {
    const std::string path = paths.eval_metrics_json(role);
    if (!fs::exists(path)) continue;
    rows.push_back(ordered_json::parse(read_text_file(path)));
  }
  if (rows.empty())
    throw std::invalid_argument("run eval first (expected " +
                                paths.eval_metrics_json(Role::kBaseline) + " and friends)");

  std::string csv = "role,step,heldout_log_perplexity,heldout_accuracy,config_hash,corpus_hash\n";
  for (const auto& r : rows) {
    csv += r.at("role").get<std::string>() + "," + std::to_string(r.at("step").get<std::size_t>()) +
           "," + format_double(r.at("heldout_log_perplexity").get<double>()) + "," +
           format_double(r.at("heldout_accuracy").get<double>()) + "," +
           r.at("config_hash").get<std::string>() + "," + r.at("corpus_hash").get<std::string>() +
           "\n";
  }
  write_text_file(paths.comparison_csv(), csv);

  std::string md = "# Run " + config_hash.substr(0, 12) + "\n\n";
  md += "config hash: `" + config_hash + "`\n\n";
  md += "## Held-out metrics\n\n| role | step | log-perplexity | accuracy |\n|---|---|---|---|\n";
  for (const auto& r : rows) {
    md += "| " + r.at("role").get<std::string>() + " | " +
          std::to_string(r.at("step").get<std::size_t>()) + " | " +
          format_double(r.at("heldout_log_perplexity").get<double>()) + " | " +
          format_double(r.at("heldout_accuracy").get<double>()) + " |\n";
  }

  // training accuracy where the distillation phase hands over
  const std::size_t boundary = cfg.salt_plan.kd_steps;
  std::string boundary_rows;
  for (Role role : {Role::kBaseline, Role::kSalt, Role::kSaltDs, Role::kRkd}) {
    const std::string path = paths.curves_csv(role);
    if (!fs::exists(path)) continue;
    for (const std::string& line : read_lines(path)) {
      if (line.rfind(std::to_string(boundary) + ",", 0) != 0) continue;
      std::vector<std::string> cells;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) cells.push_back(cell);
      if (cells.size() >= 9 && !cells[8].empty())
        boundary_rows += "| " + to_string(role) + " | " + cells[8] + " |\n";
      break;
    }
  }
  if (!boundary_rows.empty()) {
    md += "\n## Training accuracy at step " + std::to_string(boundary) +
          " (probe subset)\n\n| role | accuracy |\n|---|---|\n" + boundary_rows;
  }
  if (fs::exists(paths.bucket_metrics_csv())) {
    md += "\n## Per-bucket held-out metrics\n\nSee `eval/bucket_metrics.csv`.\n";
  }
  write_text_file(paths.summary_md(), md);
}

void cmd_diagnose(const ExperimentConfig& cfg, const RunPaths& paths) {
  cfg.validate();
  const DiagnosticsSpec& spec = cfg.diagnostics;
  const std::string config_hash = config_hash_hex(cfg);
  const GroundTruthSource source = build_source(cfg);

  const Role student_role = role_from_string(spec.student_role);
  const std::size_t student_step =
      spec.student_step == 0 ? cfg.plan_for(student_role).total_steps : spec.student_step;
  const std::string student_path = paths.ckpt(student_role, student_step);
  const LmModel student =
      load_ckpt_or_explain(student_path, "train the " + spec.student_role + " role first").model;

  LmModel teacher;
  TheoryEnv env;
  env.source = &source;
  env.student = &student;
  if (spec.teacher == "slm") {
    const std::string teacher_path = paths.ckpt(Role::kSlm, cfg.slm_plan.total_steps);
    teacher = load_ckpt_or_explain(teacher_path, "train the slm role first").model;
    env.teacher = &teacher;
  } else if (spec.teacher == "oracle") {
    env.teacher_oracle = &source;
  }
  env.omega = spec.omega < 0.0 ? cfg.salt_plan.omega : spec.omega;
  env.rho = spec.rho < 0.0 ? cfg.salt_plan.rho : spec.rho;
  env.seq_len = spec.seq_len == 0 ? cfg.corpus.seq_len : spec.seq_len;
  env.node_cap = spec.node_cap;
  require(env.seq_len <= student.config.max_len,
          "diagnostics.seq_len exceeds the model context length");

  const Corpus probe = sample_corpus(source, spec.corpus_n, env.seq_len,
                                     Rng(derived_seed(cfg.master_seed, "diag-corpus")));
  DiagnosticsOptions opts = spec.options();
  opts.seed = derived_seed(cfg.master_seed, "diagnose");
  const DiagnosticsReport report = build_diagnostics_report(env, probe, opts);

  ordered_json wrapper;
  wrapper["config_hash"] = config_hash;
  wrapper["corpus_hash"] = corpus_hash_hex(probe);
  wrapper["student"] = fs::path(student_path).lexically_relative(paths.run).string();
  wrapper["teacher"] = spec.teacher;
  wrapper["report"] = json::parse(report_json(report));
  write_text_file(paths.report_json(), wrapper.dump(2) + "\n");

  std::string csv = "omega,second_moment,reference,agrees,config_hash,corpus_hash\n";
  for (const VarianceReductionRow& row : report.variance_identity.rows) {
    csv += format_double(row.omega) + "," + format_double(row.second_moment) + "," +
           format_double(row.reference) + "," + (row.agrees ? "1" : "0") + "," + config_hash +
           "," + corpus_hash_hex(probe) + "\n";
  }
  write_text_file(paths.variance_csv(), csv);
}

std::string strip_wall_ms(const std::string& line) {
  const std::size_t pos = line.find(",\"wall_ms\"");
  return pos == std::string::npos ? line : line.substr(0, pos) + "}";
}

}  // namespace salt
