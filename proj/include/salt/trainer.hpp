#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "salt/lm.hpp"
#include "salt/rng.hpp"
#include "salt/synth.hpp"
#include "salt/tensor.hpp"

#include <iosfwd>

namespace salt {

// Training regimes: baseline is plain next-token CE; salt distills from the
// teacher for the first kd_steps and then switches to CE; rkd distills for
// the whole run.
enum class TrainMode { kBaseline, kSalt, kRkd };

std::string to_string(TrainMode mode);
TrainMode train_mode_from_string(const std::string& s);

// How the distillation weight leaves its plateau. kStep drops to 0 after
// kd_steps; the linear kinds anneal over (decay_start, decay_end], either the
// weight itself or the CE:KD mixing ratio.
enum class TransitionKind { kStep, kLinearDecay, kLinearRatioDecay };

std::string to_string(TransitionKind kind);
TransitionKind transition_kind_from_string(const std::string& s);

struct Transition {
  TransitionKind kind = TransitionKind::kStep;
  std::size_t decay_start = 0;  // n1; linear kinds only
  std::size_t decay_end = 0;    // n2; must equal kd_steps for linear kinds
};

// Linear warmup from 0 to peak over warmup_steps, then cosine from peak down
// to final_lr at the last step.
struct LrSchedule {
  double peak = 1e-3;
  double final_lr = 1e-4;
  std::size_t warmup_steps = 0;
};

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // global-norm clip; <= 0 disables
};

// Everything that determines a training trajectory. Seed streams are derived
// from `seed` by fixed labels: "init" (weights), "probe" (probe subset),
// "shuffle" (full-corpus epochs), "shuffle-kd" (kd_subset epochs).
struct TrainPlan {
  TrainMode mode = TrainMode::kBaseline;
  double omega = 0.0;  // distillation weight plateau, in [0,1]
  double rho = 1.0;    // teacher temperature exponent
  std::size_t total_steps = 0;
  std::size_t kd_steps = 0;  // distillation phase length; = total_steps for rkd
  Transition transition;
  std::size_t batch_size = 1;
  LrSchedule lr;
  AdamSettings adam;
  std::uint64_t seed = 0;
  std::string teacher_ref;  // provenance tag for logs/checkpoints
  // When set, distillation-phase batches are drawn only from these corpus
  // indices (strictly ascending); later steps use the whole corpus.
  std::optional<std::vector<std::uint32_t>> kd_subset;

  void validate() const;
};

// Effective distillation weight at step j (1-based). Non-increasing in j for
// every transition kind; rejects j outside [1, total_steps] and the undefined
// ratio anneal at omega = 1.
double omega_at_step(const TrainPlan& plan, std::size_t j);

// Learning rate at step j (1-based): warmup ramp hits peak exactly at
// warmup_steps, the cosine tail hits final_lr exactly at total_steps.
double lr_at_step(const TrainPlan& plan, std::size_t j);

// First and second moment estimates, aligned with the parameter list.
struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t applied_steps = 0;

  static AdamState zeros_like(const std::vector<Tensor>& params);
};

struct AdamOutcome {
  bool applied = false;    // false: non-finite gradient, nothing changed
  double grad_norm = 0.0;  // pre-clip global norm
  double clip_scale = 1.0;
};

// One Adam update with bias correction and optional global-norm clipping.
// A non-finite gradient (or a norm that overflows) skips the whole step and
// leaves parameters and state untouched.
AdamOutcome optimizer_step(std::vector<Tensor>& params, AdamState& state,
                           const std::vector<Tensor>& grads, double lr,
                           const AdamSettings& settings);

// One JSONL record. Absent optionals are omitted from the serialized line;
// wall_ms is measured time and is the only field exempt from bit-for-bit
// reproducibility claims.
struct StepRecord {
  std::size_t step = 0;
  std::optional<double> omega;
  std::optional<double> lr;
  std::optional<double> loss;     // batch standard CE
  std::optional<double> distill;  // batch KD term (0 when inactive)
  std::optional<double> combined;
  std::optional<double> batch_acc;
  std::optional<double> grad_norm;
  std::optional<double> probe_ce;
  std::optional<double> probe_acc;
  std::optional<double> heldout_logpplx;
  std::optional<double> heldout_acc;
  bool skipped = false;  // optimizer step skipped (non-finite gradient)
  std::optional<std::string> event;
  double wall_ms = 0.0;
};

// Append-only metrics stream: keeps records in memory and, when a path is
// opened, mirrors each one as a JSON line (flushed per record).
class MetricsLog {
 public:
  MetricsLog() = default;

  void open(const std::string& path, bool append);
  void append(const StepRecord& rec);
  // Writes one pre-serialized line (run headers); not kept in records().
  void raw_line(const std::string& line);
  const std::vector<StepRecord>& records() const { return records_; }

  static std::string json_line(const StepRecord& rec);

 private:
  std::vector<StepRecord> records_;
  std::unique_ptr<std::ofstream> out_;
};

// Deterministic batch source: epoch e visits the pool in the order given by
// an independent shuffle stream derived by epoch index, and batches wrap
// across epoch boundaries. seek(k) jumps to the state after k batches.
class BatchStream {
 public:
  BatchStream(const Rng& parent, std::vector<std::uint32_t> pool, std::size_t batch_size);

  void seek(std::size_t batches_consumed);
  std::vector<std::uint32_t> next();

 private:
  void load_epoch(std::size_t epoch);

  Rng parent_;
  std::vector<std::uint32_t> pool_;
  std::size_t batch_size_;
  std::size_t epoch_ = 0;
  std::size_t offset_ = 0;
  std::vector<std::uint32_t> order_;
};

// Artifact plumbing for a run. Boundary events (step kd_steps and the final
// step) always probe and checkpoint when enabled; *_every adds a cadence.
struct TrainIo {
  std::string metrics_path;      // empty: in-memory records only
  std::string ckpt_dir;          // empty: no checkpoints
  std::size_t ckpt_every = 0;    // extra checkpoint cadence
  std::size_t probe_every = 0;   // extra probe cadence
  std::size_t probe_count = 0;   // fixed training subset; 0 disables probes
  const Corpus* heldout = nullptr;
  std::size_t heldout_every = 0;  // 0: final step only
  std::string run_id;
  std::string note;    // embedded verbatim in checkpoint metadata
  std::string header;  // optional first metrics line for fresh runs
  // Observability hook: the corpus indices drawn for each step, in order.
  std::function<void(std::size_t step, const std::vector<std::uint32_t>& batch)> on_batch;
};

struct TrainOutcome {
  LmModel model;
  MetricsLog log;  // records appended during this call
  bool aborted = false;
  std::string abort_reason;
  std::size_t steps_completed = 0;
  std::size_t skipped_steps = 0;
};

std::string checkpoint_path(const std::string& dir, std::size_t step);

// Runs plan.total_steps optimizer steps from a fresh init. teacher must be
// present exactly when mode is salt or rkd; it is only read, never written.
// A non-finite batch loss aborts the run, saving the last good parameters.
TrainOutcome train(const TrainPlan& plan, const Corpus& corpus, const LmConfig& student_cfg,
                   const LmModel* teacher, const TrainIo& io);

// Continues a run from a checkpoint written by train() (parameters, Adam
// state and step counter are restored bit-exactly, so the tail of the
// trajectory matches an uninterrupted run). Appends to io.metrics_path.
TrainOutcome resume_train(const TrainPlan& plan, const Corpus& corpus,
                          const std::string& checkpoint, const LmModel* teacher,
                          const TrainIo& io);

}  // namespace salt
