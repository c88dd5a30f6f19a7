#include "salt/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <utility>

#include "json.hpp"
#include "salt/checkpoint.hpp"
#include "salt/evalx.hpp"
#include "salt/losses.hpp"
#include "salt/tape.hpp"

namespace salt {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

std::size_t row_argmax(const Tensor& m, std::size_t r) {
  std::size_t best = 0;
  for (std::size_t v = 1; v < m.cols(); ++v)
    if (m.at(r, v) > m.at(r, best)) best = v;
  return best;
}

double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

// Seeded sample of `count` distinct sequence indices, ascending.
std::vector<std::uint32_t> make_probe_indices(std::size_t n, std::size_t count, const Rng& stream) {
  if (count == 0) return {};
  std::vector<std::uint32_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0u);
  if (count >= n) return idx;
  Rng r = stream;
  for (std::size_t i = 0; i < count; ++i) {
    std::size_t k = i + static_cast<std::size_t>(r.next_below(n - i));
    std::swap(idx[i], idx[k]);
  }
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

void save_train_checkpoint(const std::string& path, const LmModel& model, const AdamState& adam,
                           std::size_t step, const TrainIo& io) {
  std::vector<std::pair<std::string, Tensor>> extra;
  extra.reserve(2 * model.params.size() + 1);
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    extra.emplace_back("opt.m." + model.param_names[i], adam.m[i]);
    extra.emplace_back("opt.v." + model.param_names[i], adam.v[i]);
  }
  extra.emplace_back("opt.applied", Tensor::scalar(static_cast<double>(adam.applied_steps)));
  nlohmann::ordered_json meta;
  meta["step"] = step;
  meta["run_id"] = io.run_id;
  meta["note"] = io.note;
  std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  save_checkpoint(path, model, meta.dump(), extra);
}

}  // namespace

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::kBaseline: return "baseline";
    case TrainMode::kSalt: return "salt";
    case TrainMode::kRkd: return "rkd";
  }
  throw std::logic_error("unknown train mode");
}

TrainMode train_mode_from_string(const std::string& s) {
  if (s == "baseline") return TrainMode::kBaseline;
  if (s == "salt") return TrainMode::kSalt;
  if (s == "rkd") return TrainMode::kRkd;
  throw std::invalid_argument("unknown train mode: " + s);
}

std::string to_string(TransitionKind kind) {
  switch (kind) {
    case TransitionKind::kStep: return "step";
    case TransitionKind::kLinearDecay: return "linear_decay";
    case TransitionKind::kLinearRatioDecay: return "linear_ratio_decay";
  }
  throw std::logic_error("unknown transition kind");
}

TransitionKind transition_kind_from_string(const std::string& s) {
  if (s == "step") return TransitionKind::kStep;
  if (s == "linear_decay") return TransitionKind::kLinearDecay;
  if (s == "linear_ratio_decay") return TransitionKind::kLinearRatioDecay;
  throw std::invalid_argument("unknown transition kind: " + s);
}

void TrainPlan::validate() const {
  require(total_steps >= 1, "plan: total_steps must be positive");
  require(batch_size >= 1, "plan: batch_size must be positive");
  require(std::isfinite(omega) && omega >= 0.0 && omega <= 1.0, "plan: omega must lie in [0,1]");
  require(std::isfinite(rho) && rho > 0.0, "plan: rho must be positive");
  require(kd_steps <= total_steps, "plan: kd_steps cannot exceed total_steps");
  require(std::isfinite(lr.peak) && lr.peak >= 0.0, "plan: lr peak must be nonnegative");
  require(std::isfinite(lr.final_lr) && lr.final_lr >= 0.0,
          "plan: final learning rate must be nonnegative");
  require(lr.warmup_steps < total_steps, "plan: warmup must end before the last step");
  require(adam.beta1 >= 0.0 && adam.beta1 < 1.0, "plan: beta1 must lie in [0,1)");
  require(adam.beta2 >= 0.0 && adam.beta2 < 1.0, "plan: beta2 must lie in [0,1)");
  require(adam.eps > 0.0, "plan: optimizer eps must be positive");
  if (transition.kind != TransitionKind::kStep) {
    require(transition.decay_start <= transition.decay_end, "plan: decay window is reversed");
    require(transition.decay_end <= total_steps, "plan: decay window exceeds total_steps");
    require(transition.decay_end == kd_steps,
            "plan: decay_end must equal kd_steps so the phases agree");
  }
  if (transition.kind == TransitionKind::kLinearRatioDecay)
    require(omega < 1.0, "plan: ratio decay is undefined at omega = 1");
  switch (mode) {
    case TrainMode::kBaseline:
      require(omega == 0.0, "plan: baseline requires omega = 0");
      break;
    case TrainMode::kRkd:
      require(kd_steps == total_steps, "plan: rkd requires kd_steps = total_steps");
      require(transition.kind == TransitionKind::kStep,
              "plan: rkd keeps the distillation weight constant");
      break;
    case TrainMode::kSalt:
      break;
  }
  if (kd_subset) {
    require(!kd_subset->empty(), "plan: kd_subset must not be empty");
    require(kd_steps >= 1, "plan: kd_subset requires a distillation phase");
    for (std::size_t i = 0; i + 1 < kd_subset->size(); ++i)
      require((*kd_subset)[i] < (*kd_subset)[i + 1], "plan: kd_subset must be strictly ascending");
  }
}

double omega_at_step(const TrainPlan& plan, std::size_t j) {
  require(j >= 1 && j <= plan.total_steps, "omega_at_step: step out of range");
  switch (plan.transition.kind) {
    case TransitionKind::kStep:
      return j <= plan.kd_steps ? plan.omega : 0.0;
    case TransitionKind::kLinearDecay: {
      const std::size_t n1 = plan.transition.decay_start;
      const std::size_t n2 = plan.transition.decay_end;
      if (j <= n1) return plan.omega;
      if (j > n2) return 0.0;
      return plan.omega * static_cast<double>(n2 - j) / static_cast<double>(n2 - n1);
    }
    case TransitionKind::kLinearRatioDecay: {
      require(plan.omega < 1.0, "omega_at_step: ratio decay is undefined at omega = 1");
      const std::size_t n1 = plan.transition.decay_start;
      const std::size_t n2 = plan.transition.decay_end;
      if (j <= n1) return plan.omega;
      if (j > n2) return 0.0;
      const double r0 = plan.omega / (1.0 - plan.omega);
      const double r = r0 * static_cast<double>(n2 - j) / static_cast<double>(n2 - n1);
      return r / (1.0 + r);
    }
  }
  throw std::logic_error("omega_at_step: unknown transition kind");
}

double lr_at_step(const TrainPlan& plan, std::size_t j) {
  require(j >= 1 && j <= plan.total_steps, "lr_at_step: step out of range");
  const LrSchedule& s = plan.lr;
  if (s.warmup_steps > 0 && j <= s.warmup_steps)
    return s.peak * static_cast<double>(j) / static_cast<double>(s.warmup_steps);
  const double progress = static_cast<double>(j - s.warmup_steps) /
                          static_cast<double>(plan.total_steps - s.warmup_steps);
  return s.final_lr + (s.peak - s.final_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamState AdamState::zeros_like(const std::vector<Tensor>& params) {
  AdamState s;
  s.m.reserve(params.size());
  s.v.reserve(params.size());
  for (const Tensor& p : params) {
    s.m.push_back(Tensor::zeros(p.shape));
    s.v.push_back(Tensor::zeros(p.shape));
  }
  return s;
}

AdamOutcome optimizer_step(std::vector<Tensor>& params, AdamState& state,
                           const std::vector<Tensor>& grads, double lr,
                           const AdamSettings& cfg) {
  require(params.size() == grads.size(), "optimizer: parameter/gradient count mismatch");
  if (state.m.empty() && state.v.empty()) state = AdamState::zeros_like(params);
  require(state.m.size() == params.size() && state.v.size() == params.size(),
          "optimizer: state does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(params[i].same_shape(grads[i]), "optimizer: gradient shape mismatch");
    require(params[i].same_shape(state.m[i]) && params[i].same_shape(state.v[i]),
            "optimizer: state shape mismatch");
  }

  double norm_sq = 0.0;
  for (const Tensor& g : grads)
    for (double x : g.data) norm_sq += x * x;
  AdamOutcome out;
  out.grad_norm = std::sqrt(norm_sq);
  if (!std::isfinite(out.grad_norm)) return out;  // skipped, nothing touched

  out.clip_scale =
      (cfg.clip_norm > 0.0 && out.grad_norm > cfg.clip_norm) ? cfg.clip_norm / out.grad_norm : 1.0;
  state.applied_steps += 1;
  const double t = static_cast<double>(state.applied_steps);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    double* w = params[i].data.data();
    double* m = state.m[i].data.data();
    double* v = state.v[i].data.data();
    const double* g = grads[i].data.data();
    const std::size_t n = params[i].data.size();
    for (std::size_t k = 0; k < n; ++k) {
      const double gk = g[k] * out.clip_scale;
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
      w[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + cfg.eps);
    }
  }
  out.applied = true;
  return out;
}

void MetricsLog::open(const std::string& path, bool append) {
  require(!path.empty(), "metrics: empty path");
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  auto mode = std::ios::out | (append ? std::ios::app : std::ios::trunc);
  out_ = std::make_unique<std::ofstream>(path, mode);
  require(out_->good(), "metrics: cannot open " + path);
}

void MetricsLog::raw_line(const std::string& line) {
  if (out_) {
    (*out_) << line << '\n';
    out_->flush();
  }
}

void MetricsLog::append(const StepRecord& rec) {
  records_.push_back(rec);
  if (out_) {
    (*out_) << json_line(rec) << '\n';
    out_->flush();
  }
}

std::string MetricsLog::json_line(const StepRecord& rec) {
  nlohmann::ordered_json j;
  j["step"] = rec.step;
  auto put = [&j](const char* key, const std::optional<double>& v) {
    if (v) j[key] = *v;
  };
  put("omega", rec.omega);
  put("lr", rec.lr);
  put("loss", rec.loss);
  put("distill", rec.distill);
  put("combined", rec.combined);
  put("batch_acc", rec.batch_acc);
  put("grad_norm", rec.grad_norm);
  put("probe_ce", rec.probe_ce);
  put("probe_acc", rec.probe_acc);
  put("heldout_logpplx", rec.heldout_logpplx);
  put("heldout_acc", rec.heldout_acc);
  if (rec.skipped) j["skipped"] = true;
  if (rec.event) j["event"] = *rec.event;
  j["wall_ms"] = rec.wall_ms;
  return j.dump();
}

BatchStream::BatchStream(const Rng& parent, std::vector<std::uint32_t> pool,
                         std::size_t batch_size)
    : parent_(parent), pool_(std::move(pool)), batch_size_(batch_size) {
  require(!pool_.empty(), "batch stream: empty pool");
  require(batch_size_ >= 1, "batch stream: batch size must be positive");
  load_epoch(0);
}

void BatchStream::load_epoch(std::size_t epoch) {
  epoch_ = epoch;
  order_ = pool_;
  Rng r = parent_.derive(static_cast<std::uint64_t>(epoch));
  r.shuffle(order_);
}

void BatchStream::seek(std::size_t batches_consumed) {
  const std::size_t items = batches_consumed * batch_size_;
  offset_ = items % pool_.size();
  load_epoch(items / pool_.size());
}

std::vector<std::uint32_t> BatchStream::next() {
  std::vector<std::uint32_t> out;
  out.reserve(batch_size_);
  while (out.size() < batch_size_) {
    if (offset_ == pool_.size()) {
      load_epoch(epoch_ + 1);
      offset_ = 0;
    }
    out.push_back(order_[offset_++]);
  }
  return out;
}

std::string checkpoint_path(const std::string& dir, std::size_t step) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08zu", step);
  return dir + "/step-" + buf + ".ckpt";
}

namespace {

TrainOutcome run_training(const TrainPlan& plan, const Corpus& corpus, const LmModel* teacher,
                          const TrainIo& io, LmModel model, AdamState adam, std::size_t start) {
  const LmConfig& cfg = model.config;
  require(corpus.size() >= 1, "train: empty corpus");
  require(corpus.seq_len >= 1, "train: zero-length sequences");
  require(corpus.vocab_size == cfg.vocab_size, "train: corpus/student vocabulary mismatch");
  require(corpus.seq_len <= cfg.max_len, "train: sequence length exceeds student max_len");
  if (plan.mode == TrainMode::kBaseline) {
    require(teacher == nullptr, "train: baseline must not receive a teacher");
  } else {
    require(teacher != nullptr, "train: " + to_string(plan.mode) + " requires a teacher");
    require(teacher->config.vocab_size == cfg.vocab_size,
            "train: teacher/student vocabulary mismatch");
    require(teacher->config.bos_id == cfg.bos_id, "train: teacher/student BOS id mismatch");
    require(teacher->config.max_len >= corpus.seq_len,
            "train: sequence length exceeds teacher max_len");
  }
  if (plan.kd_subset)
    for (std::uint32_t i : *plan.kd_subset)
      require(i < corpus.size(), "train: kd_subset index out of range");
  require(start <= plan.total_steps, "train: checkpoint is past the end of the plan");

  const std::size_t T = corpus.seq_len;
  const Rng root(plan.seed);
  const std::vector<std::uint32_t> probes =
      make_probe_indices(corpus.size(), io.probe_count, root.derive("probe"));

  std::vector<std::uint32_t> full_pool(corpus.size());
  std::iota(full_pool.begin(), full_pool.end(), 0u);
  BatchStream full(root.derive("shuffle"), std::move(full_pool), plan.batch_size);
  std::optional<BatchStream> kd_stream;
  if (plan.kd_subset)
    kd_stream.emplace(root.derive("shuffle-kd"), *plan.kd_subset, plan.batch_size);

  if (kd_stream) {
    kd_stream->seek(std::min(start, plan.kd_steps));
    full.seek(start > plan.kd_steps ? start - plan.kd_steps : 0);
  } else {
    full.seek(start);
  }

  TrainOutcome out;
  if (!io.metrics_path.empty()) {
    out.log.open(io.metrics_path, /*append=*/start > 0);
    if (start == 0 && !io.header.empty()) out.log.raw_line(io.header);
  }

  if (start == 0 && (!probes.empty() || (io.heldout && io.heldout_every > 0))) {
    auto t0 = std::chrono::steady_clock::now();
    StepRecord r0;
    r0.step = 0;
    if (!probes.empty()) {
      EvalMetrics m = subset_metrics(model, corpus, probes);
      r0.probe_ce = m.log_perplexity;
      r0.probe_acc = m.next_token_accuracy;
    }
    if (io.heldout && io.heldout_every > 0) {
      EvalMetrics m = held_out_metrics(model, *io.heldout);
      r0.heldout_logpplx = m.log_perplexity;
      r0.heldout_acc = m.next_token_accuracy;
    }
    r0.wall_ms = elapsed_ms(t0);
    out.log.append(r0);
  }

  std::vector<std::uint32_t> tokens;
  tokens.reserve(plan.batch_size * T);
  for (std::size_t j = start + 1; j <= plan.total_steps; ++j) {
    const auto t0 = std::chrono::steady_clock::now();
    const double wj = omega_at_step(plan, j);
    const double lrj = lr_at_step(plan, j);

    const bool kd_phase_batch = kd_stream && j <= plan.kd_steps;
    const std::vector<std::uint32_t> batch = kd_phase_batch ? kd_stream->next() : full.next();
    if (io.on_batch) io.on_batch(j, batch);
    tokens.clear();
    for (std::uint32_t i : batch) {
      auto s = corpus.seq(i);
      tokens.insert(tokens.end(), s.begin(), s.end());
    }

    std::vector<Distribution> soft;
    if (wj > 0.0) {
      Tape ttape;
      std::vector<int> tids = push_params(ttape, *teacher, false);
      int tlp = build_forward(ttape, teacher->config, tids, tokens, T);
      soft = dists_from_logprobs(ttape.value(tlp), 0.0);
    }

    Tape tape;
    std::vector<int> pids = push_params(tape, model, true);
    int lp = build_forward(tape, cfg, pids, tokens, T);
    CombinedLossNodes nodes = build_combined_loss(tape, lp, tokens, soft, wj, plan.rho);
    const double combined = tape.value(nodes.combined).data[0];
    if (!std::isfinite(combined)) {
      if (!io.ckpt_dir.empty())
        save_train_checkpoint(io.ckpt_dir + "/last-good.ckpt", model, adam, j - 1, io);
      StepRecord rec;
      rec.step = j;
      rec.event = "non_finite_loss";
      rec.wall_ms = elapsed_ms(t0);
      out.log.append(rec);
      out.aborted = true;
      out.abort_reason = "non-finite batch loss at step " + std::to_string(j);
      out.steps_completed = j - 1;
      out.model = std::move(model);
      return out;
    }

    StepRecord rec;
    rec.step = j;
    rec.omega = wj;
    rec.lr = lrj;
    rec.loss = tape.value(nodes.ce).data[0];
    rec.distill = nodes.kd >= 0 ? tape.value(nodes.kd).data[0] : 0.0;
    rec.combined = combined;
    const Tensor& lpv = tape.value(lp);
    std::size_t correct = 0;
    for (std::size_t r = 0; r < tokens.size(); ++r)
      if (row_argmax(lpv, r) == tokens[r]) ++correct;
    rec.batch_acc = static_cast<double>(correct) / static_cast<double>(tokens.size());

    ParamGrads pg = tape.backward(nodes.combined);
    AdamOutcome opt = optimizer_step(model.params, adam, pg.grads, lrj, plan.adam);
    rec.grad_norm = opt.grad_norm;
    if (!opt.applied) {
      rec.skipped = true;
      rec.event = "non_finite_grad";
      ++out.skipped_steps;
    }

    const bool boundary = (plan.kd_steps > 0 && j == plan.kd_steps) || j == plan.total_steps;
    if (!probes.empty() && (boundary || (io.probe_every > 0 && j % io.probe_every == 0))) {
      EvalMetrics m = subset_metrics(model, corpus, probes);
      rec.probe_ce = m.log_perplexity;
      rec.probe_acc = m.next_token_accuracy;
    }
    if (io.heldout &&
        (j == plan.total_steps || (io.heldout_every > 0 && j % io.heldout_every == 0))) {
      EvalMetrics m = held_out_metrics(model, *io.heldout);
      rec.heldout_logpplx = m.log_perplexity;
      rec.heldout_acc = m.next_token_accuracy;
    }
    rec.wall_ms = elapsed_ms(t0);
    out.log.append(rec);

    if (!io.ckpt_dir.empty() && (boundary || (io.ckpt_every > 0 && j % io.ckpt_every == 0)))
      save_train_checkpoint(checkpoint_path(io.ckpt_dir, j), model, adam, j, io);
  }

  out.steps_completed = plan.total_steps;
  out.model = std::move(model);
  return out;
}

}  // namespace

TrainOutcome train(const TrainPlan& plan, const Corpus& corpus, const LmConfig& student_cfg,
                   const LmModel* teacher, const TrainIo& io) {
  plan.validate();
  student_cfg.validate();
  const Rng root(plan.seed);
  LmModel model = init_model(student_cfg, root.derive("init"));
  AdamState adam = AdamState::zeros_like(model.params);
  return run_training(plan, corpus, teacher, io, std::move(model), std::move(adam), 0);
}

TrainOutcome resume_train(const TrainPlan& plan, const Corpus& corpus,
                          const std::string& checkpoint, const LmModel* teacher,
                          const TrainIo& io) {
  plan.validate();
  LoadedCheckpoint lc = load_checkpoint(checkpoint);
  std::size_t step = 0;
  try {
    auto meta = nlohmann::json::parse(lc.meta);
    step = meta.at("step").get<std::size_t>();
  } catch (const nlohmann::json::exception&) {
    throw std::invalid_argument("resume: checkpoint metadata lacks a step field: " + checkpoint);
  }

  AdamState adam;
  adam.m.resize(lc.model.params.size());
  adam.v.resize(lc.model.params.size());
  std::vector<bool> have_m(lc.model.params.size(), false), have_v(lc.model.params.size(), false);
  bool have_applied = false;
  for (auto& [name, tensor] : lc.extra) {
    if (name == "opt.applied") {
      adam.applied_steps = static_cast<std::uint64_t>(tensor.data.at(0));
      have_applied = true;
    } else if (name.rfind("opt.m.", 0) == 0) {
      std::size_t i = lc.model.param_index(name.substr(6));
      adam.m[i] = std::move(tensor);
      have_m[i] = true;
    } else if (name.rfind("opt.v.", 0) == 0) {
      std::size_t i = lc.model.param_index(name.substr(6));
      adam.v[i] = std::move(tensor);
      have_v[i] = true;
    }
  }
  require(have_applied, "resume: checkpoint lacks optimizer state: " + checkpoint);
  for (std::size_t i = 0; i < lc.model.params.size(); ++i) {
    require(have_m[i] && have_v[i],
            "resume: checkpoint lacks optimizer state for " + lc.model.param_names[i]);
    require(adam.m[i].same_shape(lc.model.params[i]) && adam.v[i].same_shape(lc.model.params[i]),
            "resume: optimizer state shape mismatch for " + lc.model.param_names[i]);
  }
  return run_training(plan, corpus, teacher, io, std::move(lc.model), std::move(adam), step);
}

}  // namespace salt
