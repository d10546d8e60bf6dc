#include "arwkv/train.hpp"

#include <chrono>
#include <cmath>
#include <random>
#include <stdexcept>

namespace arwkv {

namespace {

constexpr std::pair<Stage, std::string_view> kStages[] = {{Stage::teacher, "teacher"},
                                                           {Stage::align, "align"},
                                                           {Stage::distill, "distill"},
                                                           {Stage::sft, "sft"}};

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void log_softmax_row(const double* x, std::size_t n, double* out) {
  double mx = x[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) z += std::exp(x[j] - mx);
  const double lz = mx + std::log(z);
  for (std::size_t j = 0; j < n; ++j) out[j] = x[j] - lz;
}

std::vector<NamedTensor> apply_mask_and_list(const DecoderModel& model, const FreezeMask& mask) {
  apply_freeze(model, mask);
  return trainable_parameters(model);
}

bool is_student_param(std::string_view name) {
  return name.find(".student_") != std::string_view::npos;
}

TokenBatch checked_batch(std::span<const std::int32_t> corpus, const TrainConfig& cfg,
                         std::size_t step) {
  return sample_lm_batch(corpus, cfg.batch_size, cfg.seq_len, cfg.seed, step);
}

Tensor lm_loss(const DecoderModel& model, const TokenBatch& batch) {
  ForwardOptions opts;
  std::vector<std::int32_t> targets;
  bool all_rows = true;
  for (auto t : batch.targets) all_rows = all_rows && t >= 0;
  if (all_rows) {
    targets = batch.targets;
  } else {
    for (std::size_t i = 0; i < batch.targets.size(); ++i) {
      if (batch.targets[i] >= 0) {
        opts.output_rows.push_back(i);
        targets.push_back(batch.targets[i]);
      }
    }
    if (targets.empty()) return Tensor::scalar(0.0);
  }
  Tensor logits = forward(model, batch.inputs, batch.layout, opts).logits;
  return cross_entropy(logits, targets);
}

TrainRun start_run(TrainRun resume, const TrainConfig& cfg) {
  if (resume.stage.empty()) resume.stage = std::string(to_string(cfg.stage));
  if (resume.variant.empty()) resume.variant = cfg.variant;
  if (resume.step == 0) resume.seed = cfg.seed;
  if (resume.seed != cfg.seed) {
    throw std::invalid_argument("resume: run seed " + std::to_string(resume.seed) +
                                " differs from config seed " + std::to_string(cfg.seed));
  }
  return resume;
}

}  // namespace

std::string_view to_string(Stage s) {
  for (const auto& [v, n] : kStages) {
    if (v == s) return n;
  }
  return "?";
}

Stage parse_stage(std::string_view s) {
  for (const auto& [v, n] : kStages) {
    if (n == s) return v;
  }
  throw ConfigError("stage", "unknown value '" + std::string(s) +
                                 "' (expected one of teacher, align, distill, sft)");
}

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("lr", "must be positive");
  if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("beta1", "must lie in [0, 1)");
  if (!(beta2 >= 0 && beta2 < 1)) throw ConfigError("beta2", "must lie in [0, 1)");
  if (!(eps > 0)) throw ConfigError("eps", "must be positive");
  if (!(weight_decay >= 0)) throw ConfigError("weight_decay", "must be non-negative");
  if (batch_size == 0) throw ConfigError("batch_size", "must be positive");
  if (seq_len == 0) throw ConfigError("seq_len", "must be positive");
  if (log_every == 0) throw ConfigError("log_every", "must be positive");
  if (kl_direction != "forward") {
    throw ConfigError("kl_direction", "only 'forward' (teacher || student) is supported");
  }
  if (stage == Stage::sft && prior_seq_len != 0 && seq_len <= prior_seq_len) {
    throw ConfigError("seq_len", "stage 3 needs seq_len greater than the previous stage's " +
                                     std::to_string(prior_seq_len));
  }
}

// ---- losses -----------------------------------------------------------------

Tensor alignment_loss(const Tensor& h_teacher, const Tensor& h_student, std::size_t d_model) {
  require_same_shape(h_teacher, h_student, "alignment_loss");
  if (d_model == 0) throw std::invalid_argument("alignment_loss: d_model must be positive");
  const std::size_t rows = h_student.rows(), d = h_student.cols();
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_model));
  const auto tv = h_teacher.values(), sv = h_student.values();
  std::vector<double> norms(rows);
  double total = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = tv[i * d + j] - sv[i * d + j];
      ss += diff * diff;
    }
    norms[i] = std::sqrt(ss);
    total += norms[i] * scale;
  }
  const double inv_rows = 1.0 / static_cast<double>(rows);
  return make_op("alignment_loss", {}, {total * inv_rows}, {h_student},
                 [h_teacher, h_student, rows, d, scale, inv_rows, norms = std::move(norms)](
                     std::span<const double> g, std::span<const double>) {
                   auto gs = grad_sink(h_student);
                   const auto tv = h_teacher.values(), sv = h_student.values();
                   for (std::size_t i = 0; i < rows; ++i) {
                     if (norms[i] == 0.0) continue;
                     const double c = g[0] * scale * inv_rows / norms[i];
                     for (std::size_t j = 0; j < d; ++j) {
                       gs[i * d + j] += c * (sv[i * d + j] - tv[i * d + j]);
                     }
                   }
                 });
}

Tensor kd_loss_wordlevel(const Tensor& logits_teacher, const Tensor& logits_student) {
  require_same_shape(logits_teacher, logits_student, "kd_loss_wordlevel");
  const std::size_t rows = logits_student.rows(), V = logits_student.cols();
  const auto tv = logits_teacher.values(), sv = logits_student.values();
  std::vector<double> lp(V), lq(V);
  std::vector<double> p(rows * V), q(rows * V);
  double total = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    log_softmax_row(tv.data() + i * V, V, lp.data());
    log_softmax_row(sv.data() + i * V, V, lq.data());
    for (std::size_t j = 0; j < V; ++j) {
      const double pj = std::exp(lp[j]);
      p[i * V + j] = pj;
      q[i * V + j] = std::exp(lq[j]);
      if (pj > 0) total += pj * (lp[j] - lq[j]);
    }
  }
  const double inv_rows = 1.0 / static_cast<double>(rows);
  return make_op("kd_loss_wordlevel", {}, {total * inv_rows}, {logits_student},
                 [logits_student, inv_rows, p = std::move(p), q = std::move(q)](
                     std::span<const double> g, std::span<const double>) {
                   auto gs = grad_sink(logits_student);
                   for (std::size_t i = 0; i < gs.size(); ++i) {
                     gs[i] += g[0] * inv_rows * (q[i] - p[i]);
                   }
                 });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets) {
  const std::size_t rows = logits.rows(), V = logits.cols();
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(rows) + " rows");
  }
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  const auto lv = logits.values();
  std::vector<double> probs(rows * V);
  std::vector<double> lrow(V);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < rows; ++i) {
    if (tg[i] < 0) continue;
    if (static_cast<std::size_t>(tg[i]) >= V) throw std::out_of_range("cross_entropy: target id");
    log_softmax_row(lv.data() + i * V, V, lrow.data());
    for (std::size_t j = 0; j < V; ++j) probs[i * V + j] = std::exp(lrow[j]);
    total -= lrow[static_cast<std::size_t>(tg[i])];
    ++count;
  }
  const double inv = count ? 1.0 / static_cast<double>(count) : 0.0;
  return make_op("cross_entropy", {}, {total * inv}, {logits},
                 [logits, V, inv, tg = std::move(tg), probs = std::move(probs)](
                     std::span<const double> g, std::span<const double>) {
                   auto gl = grad_sink(logits);
                   for (std::size_t i = 0; i < tg.size(); ++i) {
                     if (tg[i] < 0) continue;
                     for (std::size_t j = 0; j < V; ++j) {
                       gl[i * V + j] += g[0] * inv * probs[i * V + j];
                     }
                     gl[i * V + static_cast<std::size_t>(tg[i])] -= g[0] * inv;
                   }
                 });
}

// ---- optimizer ----------------------------------------------------------------

AdamConfig adam_config(const TrainConfig& cfg) {
  return {cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay};
}

void adam_step(const std::vector<NamedTensor>& params, std::map<std::string, MomentSlot>& moments,
               std::size_t step, const AdamConfig& cfg) {
  if (step == 0) throw std::invalid_argument("adam_step: step is 1-based");
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (const auto& np : params) {
    Tensor t = np.tensor;
    const auto g = t.grad();
    for (double x : g) {
      if (!std::isfinite(x)) {
        throw NonFiniteError("adam_step: non-finite gradient in parameter " + np.name);
      }
    }
    auto& slot = moments[np.name];
    if (slot.m.empty()) {
      slot.m.assign(g.size(), 0.0);
      slot.v.assign(g.size(), 0.0);
    }
    auto p = t.mutable_values();
    for (std::size_t i = 0; i < g.size(); ++i) {
      slot.m[i] = quantize(cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * g[i]);
      slot.v[i] = quantize(cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * g[i] * g[i]);
      const double mhat = slot.m[i] / c1;
      const double vhat = slot.v[i] / c2;
      p[i] = quantize(p[i] - cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) +
                                       cfg.weight_decay * p[i]));
    }
  }
}

// ---- data -------------------------------------------------------------------

std::uint64_t step_seed(std::uint64_t seed, std::size_t step) {
  std::uint64_t z = seed ^ (0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(step) + 1));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

TokenBatch sample_lm_batch(std::span<const std::int32_t> corpus, std::size_t batch,
                           std::size_t seq_len, std::uint64_t seed, std::size_t step) {
  if (corpus.size() < seq_len + 1) {
    throw std::invalid_argument("sample_lm_batch: corpus of " + std::to_string(corpus.size()) +
                                " tokens is shorter than a window of " +
                                std::to_string(seq_len + 1));
  }
  std::mt19937_64 rng(step_seed(seed, step));
  std::uniform_int_distribution<std::size_t> start(0, corpus.size() - seq_len - 1);
  TokenBatch b;
  b.layout = {batch, seq_len};
  b.inputs.reserve(batch * seq_len);
  b.targets.reserve(batch * seq_len);
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t s = start(rng);
    b.inputs.insert(b.inputs.end(), corpus.begin() + s, corpus.begin() + s + seq_len);
    b.targets.insert(b.targets.end(), corpus.begin() + s + 1, corpus.begin() + s + seq_len + 1);
  }
  return b;
}

// ---- loops ------------------------------------------------------------------

TrainRun train_loop(const std::function<Tensor(std::size_t)>& loss_at,
                    const std::function<std::vector<NamedTensor>(std::size_t)>& trainable_at,
                    std::size_t tokens_per_step, const TrainConfig& cfg, TrainRun run,
                    const StepObserver& observer) {
  const AdamConfig adam = adam_config(cfg);
  for (std::size_t step = run.step + 1; step <= cfg.max_steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    auto params = trainable_at(step);
    for (auto& p : params) p.tensor.zero_grad();
    Tensor loss = loss_at(step);
    if (!std::isfinite(loss.item())) {
      throw NonFiniteError("training loss is not finite at step " + std::to_string(step));
    }
    backward(loss);
    adam_step(params, run.moments, step, adam);
    const double ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    run.step = step;
    run.tokens_seen += tokens_per_step;
    run.curve.push_back({step, loss.item()});
    run.wall_ms.push_back(ms);
    if (observer && step % cfg.log_every == 0) {
      observer({step, loss.item(), run.tokens_seen, ms, run.stage, run.variant});
    }
  }
  return run;
}

FreezeMask stage_freeze_mask(const DecoderModel& model, const TrainConfig& cfg) {
  switch (cfg.stage) {
    case Stage::teacher:
    case Stage::sft:
      return make_freeze_mask(model, [](std::string_view) { return true; });
    case Stage::align:
      return make_freeze_mask(model, is_student_param);
    case Stage::distill:
      return make_freeze_mask(model, [&](std::string_view n) {
        return !(cfg.freeze_mlp && is_mlp_param(n));
      });
  }
  throw std::logic_error("stage_freeze_mask: unknown stage");
}

Tensor stage1_loss(const DecoderModel& wrapped, const TokenBatch& batch, AlignTarget target,
                   int only_layer) {
  ForwardOptions opts;
  opts.compute_logits = false;
  opts.record_alignment = true;
  opts.align_target = target;
  ForwardResult r = forward(wrapped, batch.inputs, batch.layout, opts);
  if (r.pairs.empty()) throw std::invalid_argument("stage1_loss: model has no wrapped layers");
  const std::size_t d = wrapped.config.d_model;
  if (only_layer >= 0) {
    const auto& pr = r.pairs.at(static_cast<std::size_t>(only_layer));
    return alignment_loss(pr.teacher, pr.student, d);
  }
  Tensor total;
  for (const auto& pr : r.pairs) {
    Tensor l = alignment_loss(pr.teacher, pr.student, d);
    total = total.defined() ? add(total, l) : l;
  }
  return scale(total, 1.0 / static_cast<double>(r.pairs.size()));
}

TrainRun train_teacher(DecoderModel& teacher, std::span<const std::int32_t> corpus,
                       const TrainConfig& cfg, const StepObserver& observer, TrainRun resume) {
  cfg.validate();
  TrainConfig c = cfg;
  c.stage = Stage::teacher;
  const auto params = apply_mask_and_list(teacher, stage_freeze_mask(teacher, c));
  return train_loop([&](std::size_t step) { return lm_loss(teacher, checked_batch(corpus, c, step)); },
                    [&](std::size_t) { return params; }, c.batch_size * c.seq_len, c,
                    start_run(std::move(resume), c), observer);
}

TrainRun stage1_align(DecoderModel& wrapped, std::span<const std::int32_t> corpus,
                      const TrainConfig& cfg, const StepObserver& observer, TrainRun resume) {
  cfg.validate();
  if (wrapped.config.attention_kind != AttentionKind::wrapper) {
    throw std::invalid_argument("stage1_align: model must be wrapped for alignment");
  }
  TrainConfig c = cfg;
  c.stage = Stage::align;
  const FreezeMask mask = stage_freeze_mask(wrapped, c);
  const auto frozen = [](std::string_view n) { return !is_student_param(n); };
  const std::uint64_t before = parameter_fingerprint(wrapped, frozen);
  const std::size_t n_layers = wrapped.layers.size();

  auto layer_at = [&](std::size_t step) -> int {
    if (!c.layerwise) return -1;
    const std::size_t phase = (step - 1) * n_layers / std::max<std::size_t>(c.max_steps, 1);
    return static_cast<int>(std::min(phase, n_layers - 1));
  };
  auto trainable_at = [&](std::size_t step) {
    const int layer = layer_at(step);
    if (layer < 0) return apply_mask_and_list(wrapped, mask);
    FreezeMask m = mask;
    for (auto& [name, flag] : m) flag = flag && layer_of_param(name) == layer;
    return apply_mask_and_list(wrapped, m);
  };
  TrainRun run = train_loop(
      [&](std::size_t step) {
        return stage1_loss(wrapped, checked_batch(corpus, c, step), c.align_target,
                           layer_at(step));
      },
      trainable_at, c.batch_size * c.seq_len, c, start_run(std::move(resume), c), observer);
  if (parameter_fingerprint(wrapped, frozen) != before) {
    throw std::runtime_error("stage1_align: a frozen parameter changed during alignment");
  }
  return run;
}

TrainRun stage2_distill(const DecoderModel& teacher, DecoderModel& student,
                        std::span<const std::int32_t> corpus, const TrainConfig& cfg,
                        const StepObserver& observer, TrainRun resume) {
  cfg.validate();
  if (teacher.config.vocab_size != student.config.vocab_size) {
    throw std::invalid_argument("stage2_distill: teacher vocab " +
                                std::to_string(teacher.config.vocab_size) +
                                " differs from student vocab " +
                                std::to_string(student.config.vocab_size));
  }
  TrainConfig c = cfg;
  c.stage = Stage::distill;
  if (c.gate_mode && *c.gate_mode != student.config.gate_mode) {
    student = with_gate_mode(student, *c.gate_mode);
  }
  const std::uint64_t teacher_before = parameter_fingerprint(teacher);
  const auto params = apply_mask_and_list(student, stage_freeze_mask(student, c));
  TrainRun run = train_loop(
      [&](std::size_t step) {
        const TokenBatch batch = checked_batch(corpus, c, step);
        Tensor t_logits;
        {
          NoGradGuard no_grad;
          t_logits = forward(teacher, batch.inputs, batch.layout).logits;
        }
        Tensor s_logits = forward(student, batch.inputs, batch.layout).logits;
        return kd_loss_wordlevel(t_logits, s_logits);
      },
      [&](std::size_t) { return params; }, c.batch_size * c.seq_len, c,
      start_run(std::move(resume), c), observer);
  if (parameter_fingerprint(teacher) != teacher_before) {
    throw std::runtime_error("stage2_distill: teacher parameters changed");
  }
  return run;
}

TrainRun stage3_sft(DecoderModel& student, std::span<const std::int32_t> corpus,
                    const TrainConfig& cfg, const StepObserver& observer, TrainRun resume) {
  cfg.validate();
  if (cfg.prior_seq_len == 0 || cfg.seq_len <= cfg.prior_seq_len) {
    throw ConfigError("seq_len", "stage 3 needs seq_len (" + std::to_string(cfg.seq_len) +
                                     ") greater than the previous stage's (" +
                                     std::to_string(cfg.prior_seq_len) + ")");
  }
  TrainConfig c = cfg;
  c.stage = Stage::sft;
  const auto params = apply_mask_and_list(student, stage_freeze_mask(student, c));
  return train_loop([&](std::size_t step) { return lm_loss(student, checked_batch(corpus, c, step)); },
                    [&](std::size_t) { return params; }, c.batch_size * c.seq_len, c,
                    start_run(std::move(resume), c), observer);
}

TrainRun train_supervised(DecoderModel& model, const BatchSource& batches, const TrainConfig& cfg,
                          const StepObserver& observer, TrainRun resume) {
  cfg.validate();
  TrainConfig c = cfg;
  const auto params = apply_mask_and_list(model, make_freeze_mask(model, [](std::string_view) {
                                            return true;
                                          }));
  const std::size_t per_step = batches(1).inputs.size();
  return train_loop([&](std::size_t step) { return lm_loss(model, batches(step)); },
                    [&](std::size_t) { return params; }, per_step, c,
                    start_run(std::move(resume), c), observer);
}

}  // namespace arwkv
