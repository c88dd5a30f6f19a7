#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "salt/diagnostics.hpp"
#include "salt/lm.hpp"
#include "salt/select.hpp"
#include "salt/synth.hpp"
#include "salt/trainer.hpp"

namespace salt {

// The five trainable runs of one experiment: the small teacher plus the four
// large-model regimes it anchors.
enum class Role { kSlm, kBaseline, kSalt, kSaltDs, kRkd };

std::string to_string(Role role);
Role role_from_string(const std::string& s);

struct SourceSpec {
  std::string kind = "markov";  // "markov" or "text"
  std::size_t order = 1;
  std::size_t vocab_size = 2;
  double concentration = 1.0;
  std::string text_path;  // kind == "text" only
};

struct CorpusSpec {
  std::size_t train_n = 0;
  std::size_t heldout_n = 0;
  std::size_t seq_len = 0;
};

// Cadences shared by every training run; boundary events still fire on top.
struct IoSpec {
  std::size_t ckpt_every = 0;
  std::size_t probe_every = 0;
  std::size_t probe_count = 0;
  std::size_t heldout_every = 0;
};

struct SelectionSpec {
  std::size_t top_k = 1;
  std::size_t m = 0;          // sequences to keep
  double n0_fraction = 0.5;   // scoring checkpoint as a fraction of SLM steps
  MaskMode mask = MaskMode::kExclude;
  std::size_t epochs_allowed = 1;  // distillation-phase passes over the subset
};

struct DiagnosticsSpec {
  bool enabled = false;
  std::string student_role = "salt";
  std::size_t student_step = 0;  // 0: final checkpoint
  std::string teacher = "slm";   // "slm", "oracle", or "none"
  std::size_t seq_len = 0;       // 0: corpus seq_len
  std::size_t corpus_n = 256;    // fresh sequences drawn for the report
  double omega = -1.0;           // < 0: copy from the salt plan
  double rho = -1.0;             // < 0: copy from the salt plan
  double m = 0.0;                // per-token loss bound, >= log V
  double delta = 0.1;
  double log_card = 0.0;
  std::size_t node_cap = std::size_t{1} << 20;
  std::vector<double> omega_grid{0.0, 0.25, 0.5, 0.75, 1.0};
  std::size_t variance_prefixes = 64;
  std::size_t mc_samples = 4096;
  std::size_t xi_sequences = 32;
  std::size_t xi_mc_samples = 64;

  DiagnosticsOptions options() const;  // m/delta/log_card plus sampling knobs
};

// One experiment, fully specified: data, both model shapes, the per-role
// training plans, selection and diagnostics settings, and the master seed
// every random stream is derived from. Plan mode and seed fields are not
// free: the role fixes the mode, and seeds are derived from master_seed by
// purpose label.
struct ExperimentConfig {
  SourceSpec source;
  CorpusSpec corpus;
  LmConfig slm_model;
  TrainPlan slm_plan;
  LmConfig llm_model;
  TrainPlan baseline_plan;
  TrainPlan salt_plan;
  TrainPlan salt_ds_plan;
  TrainPlan rkd_plan;
  IoSpec io;
  SelectionSpec selection;
  DiagnosticsSpec diagnostics;
  std::string out_dir = "run";
  std::uint64_t master_seed = 0;

  const TrainPlan& plan_for(Role role) const;
  const LmConfig& model_for(Role role) const;
  void validate() const;
};

// Seed for one purpose label: the label is hashed into the master seed via
// the Rng's stream-derivation rule, so streams never collide or overlap.
std::uint64_t derived_seed(std::uint64_t master, std::string_view purpose);

// Canonical JSON round-trip. Parsing is strict: unknown keys are rejected so
// config typos fail loudly. Derived fields (plan mode/seed) are never
// serialized.
nlohmann::ordered_json config_to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const nlohmann::json& j);

// Reads a config file and applies "dotted.path=value" overrides (values parse
// as JSON, falling back to plain strings) before the strict parse.
ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {});

// FNV-1a over the canonical config serialization / the corpus dimensions and
// token bytes. 16 hex digits; stamped into every composed artifact.
std::string config_hash_hex(const ExperimentConfig& cfg);
std::string corpus_hash_hex(const Corpus& corpus);

// Output root: explicit argument, else $SALT_OUT_ROOT, else "out".
std::string output_root(const std::string& cli_root);

// Layout of one run directory under <root>/<out_dir>.
struct RunPaths {
  std::filesystem::path run;

  std::string config_json() const { return (run / "config.json").string(); }
  std::string manifest_json() const { return (run / "manifest.json").string(); }
  std::string train_corpus() const { return (run / "corpus" / "train.saltcorp").string(); }
  std::string heldout_corpus() const { return (run / "corpus" / "heldout.saltcorp").string(); }
  std::string role_dir(Role role) const { return (run / to_string(role)).string(); }
  std::string metrics_jsonl(Role role) const;
  std::string ckpt(Role role, std::size_t step) const;
  std::string scores_csv() const { return (run / "select" / "scores.csv").string(); }
  std::string selection_json() const { return (run / "select" / "selection.json").string(); }
  std::string selected_corpus() const { return (run / "select" / "selected.saltcorp").string(); }
  std::string eval_dir() const { return (run / "eval").string(); }
  std::string eval_metrics_json(Role role) const;
  std::string curves_csv(Role role) const;
  std::string buckets_csv() const { return (run / "eval" / "buckets.csv").string(); }
  std::string bucket_metrics_csv() const { return (run / "eval" / "bucket_metrics.csv").string(); }
  std::string comparison_csv() const { return (run / "report" / "comparison.csv").string(); }
  std::string summary_md() const { return (run / "report" / "summary.md").string(); }
  std::string report_json() const { return (run / "report" / "diagnostics.json").string(); }
  std::string variance_csv() const { return (run / "report" / "variance.csv").string(); }
};

RunPaths run_paths(const ExperimentConfig& cfg, const std::string& root);

// Source manifest entry, written by gen-data and read back for provenance
// checks.
struct ManifestInfo {
  std::string config_hash;
  std::string kind;
  std::size_t order = 0;
  std::size_t vocab_size = 0;
  std::uint64_t source_seed = 0;
  std::size_t train_n = 0;
  std::size_t heldout_n = 0;
  std::size_t seq_len = 0;
  std::string train_hash;
  std::string heldout_hash;
};

ManifestInfo read_manifest(const std::string& path);

// Rebuilds the generating distribution from the config (markov kind only).
GroundTruthSource build_source(const ExperimentConfig& cfg);

// Subcommand bodies. All of them throw std::invalid_argument /
// std::runtime_error with actionable messages (including the expected path
// when a prerequisite artifact is missing).
void cmd_gen_data(const ExperimentConfig& cfg, const RunPaths& paths);
TrainOutcome cmd_train(const ExperimentConfig& cfg, const RunPaths& paths, Role role,
                       const std::string& fork_from = "");
void cmd_score(const ExperimentConfig& cfg, const RunPaths& paths);
void cmd_select(const ExperimentConfig& cfg, const RunPaths& paths);
void cmd_eval(const ExperimentConfig& cfg, const RunPaths& paths);
void cmd_diagnose(const ExperimentConfig& cfg, const RunPaths& paths);
void cmd_report(const ExperimentConfig& cfg, const RunPaths& paths);

// Strips the trailing wall-clock field from a metrics line, leaving only the
// reproducible numeric payload. Lines without the field pass through.
std::string strip_wall_ms(const std::string& line);

}  // namespace salt
