#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "arwkv/model.hpp"
#include "arwkv/tensor.hpp"

namespace arwkv {

enum class Stage { teacher, align, distill, sft };

std::string_view to_string(Stage s);
Stage parse_stage(std::string_view s);

struct TrainConfig {
  Stage stage = Stage::align;
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::size_t batch_size = 8;
  std::size_t seq_len = 64;
  std::size_t max_steps = 200;
  std::size_t log_every = 10;
  bool freeze_mlp = true;
  /// Overrides the student's gate for distillation when set.
  std::optional<GateMode> gate_mode;
  std::string teacher_path;
  std::string student_path;
  std::string corpus_path;
  std::string heldout_path;
  std::uint64_t seed = 0;
  /// Word-level KL is always KL(teacher || student); kept for the manifest.
  std::string kl_direction = "forward";
  CombineMode combine_mode = CombineMode::pass_through;
  AlignTarget align_target = AlignTarget::post_projection;
  /// Stage 1: train one layer at a time instead of all layers jointly.
  bool layerwise = false;
  InitMode init_mode = InitMode::fresh;
  std::string variant;
  /// Stage 3: sequence length of the previous stage; seq_len must exceed it.
  std::size_t prior_seq_len = 0;

  void validate() const;
};

struct LossPoint {
  std::size_t step = 0;
  double loss = 0.0;
};

struct MomentSlot {
  std::vector<double> m;
  std::vector<double> v;
};

/// Everything needed to continue a run bit-exactly. Batches are a pure
/// function of (seed, step), so no sampler state is stored.
struct TrainRun {
  std::string stage;
  std::string variant;
  std::uint64_t seed = 0;
  std::size_t step = 0;
  std::size_t tokens_seen = 0;
  std::map<std::string, MomentSlot> moments;
  std::vector<LossPoint> curve;
  std::vector<double> wall_ms;
};

struct StepRecord {
  std::size_t step = 0;
  double loss = 0.0;
  std::size_t tokens_seen = 0;
  double wall_ms = 0.0;
  std::string stage;
  std::string variant;
};

/// Called every log_every steps.
using StepObserver = std::function<void(const StepRecord&)>;

// ---- losses -----------------------------------------------------------------

/// Mean over tokens of |h_teacher - h_student|_2 * d_model^-1/2. The teacher
/// side receives no gradient.
Tensor alignment_loss(const Tensor& h_teacher, const Tensor& h_student, std::size_t d_model);

/// Mean over positions of KL(softmax(teacher) || softmax(student)); the teacher
/// is treated as a constant.
Tensor kd_loss_wordlevel(const Tensor& logits_teacher, const Tensor& logits_student);

/// Mean next-token cross-entropy; targets < 0 are ignored.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets);

// ---- optimizer ----------------------------------------------------------------

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

AdamConfig adam_config(const TrainConfig& cfg);

/// One Adam update with bias correction and decoupled weight decay. `step` is
/// 1-based. Throws naming the parameter when a gradient is not finite.
void adam_step(const std::vector<NamedTensor>& params, std::map<std::string, MomentSlot>& moments,
               std::size_t step, const AdamConfig& cfg);

// ---- data -------------------------------------------------------------------

struct TokenBatch {
  SeqLayout layout;
  std::vector<std::int32_t> inputs;
  std::vector<std::int32_t> targets;  // -1 = no loss at this position
};

std::uint64_t step_seed(std::uint64_t seed, std::size_t step);

/// Random windows of seq_len + 1 tokens; targets are inputs shifted by one.
TokenBatch sample_lm_batch(std::span<const std::int32_t> corpus, std::size_t batch,
                           std::size_t seq_len, std::uint64_t seed, std::size_t step);

using BatchSource = std::function<TokenBatch(std::size_t step)>;

// ---- loops ------------------------------------------------------------------

/// Runs steps run.step+1 .. cfg.max_steps. `loss_at` builds the loss of one
/// step; `trainable_at` lists the parameters the optimizer may touch at that
/// step (parameters with requires_grad unset must not be listed).
TrainRun train_loop(const std::function<Tensor(std::size_t)>& loss_at,
                    const std::function<std::vector<NamedTensor>(std::size_t)>& trainable_at,
                    std::size_t tokens_per_step, const TrainConfig& cfg, TrainRun run,
                    const StepObserver& observer = {});

/// Mean alignment loss over recorded layer pairs.
Tensor stage1_loss(const DecoderModel& wrapped, const TokenBatch& batch, AlignTarget target,
                   int only_layer = -1);

/// Next-token training of a teacher on a corpus.
TrainRun train_teacher(DecoderModel& teacher, std::span<const std::int32_t> corpus,
                       const TrainConfig& cfg, const StepObserver& observer = {},
                       TrainRun resume = {});

/// Stage 1: only the wrapped time mixers train; everything else is frozen and
/// verified unchanged afterwards.
TrainRun stage1_align(DecoderModel& wrapped, std::span<const std::int32_t> corpus,
                      const TrainConfig& cfg, const StepObserver& observer = {},
                      TrainRun resume = {});

/// Stage 2: word-level KL from a frozen teacher (which may be larger than the
/// student; only the vocabulary must match).
TrainRun stage2_distill(const DecoderModel& teacher, DecoderModel& student,
                        std::span<const std::int32_t> corpus, const TrainConfig& cfg,
                        const StepObserver& observer = {}, TrainRun resume = {});

/// Stage 3: next-token SFT at a longer context than stage 2.
TrainRun stage3_sft(DecoderModel& student, std::span<const std::int32_t> corpus,
                    const TrainConfig& cfg, const StepObserver& observer = {},
                    TrainRun resume = {});

/// Cross-entropy training on arbitrary labelled batches (task data).
TrainRun train_supervised(DecoderModel& model, const BatchSource& batches, const TrainConfig& cfg,
                          const StepObserver& observer = {}, TrainRun resume = {});

/// Freeze mask used by each stage.
FreezeMask stage_freeze_mask(const DecoderModel& model, const TrainConfig& cfg);

}  // namespace arwkv
