#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "arwkv/layers.hpp"
#include "arwkv/tensor.hpp"
#include "arwkv/timemix.hpp"

namespace arwkv {

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::invalid_argument(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

enum class AttentionKind { gqa, rwkv7, rwkv6, wrapper };
/// How a wrapped layer feeds the residual stream during alignment.
enum class CombineMode { pass_through, straight_through };
/// Which wrapper outputs are compared by the alignment loss.
enum class AlignTarget { post_projection, pre_projection };
enum class InitMode { fresh, from_teacher };

std::string_view to_string(AttentionKind v);
std::string_view to_string(CombineMode v);
std::string_view to_string(AlignTarget v);
std::string_view to_string(InitMode v);
std::string_view to_string(GateMode v);
std::string_view to_string(ARange v);
std::string_view to_string(NormMode v);
std::string_view to_string(MixerKind v);

AttentionKind parse_attention_kind(std::string_view s);
CombineMode parse_combine_mode(std::string_view s);
AlignTarget parse_align_target(std::string_view s);
InitMode parse_init_mode(std::string_view s);
GateMode parse_gate_mode(std::string_view s);
ARange parse_a_range(std::string_view s);
NormMode parse_norm_mode(std::string_view s);

struct ModelConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t n_kv_heads = 2;
  std::size_t head_dim = 16;
  std::size_t d_ffn = 128;
  std::size_t max_seq_len = 256;
  double rope_theta = 10000.0;
  AttentionKind attention_kind = AttentionKind::gqa;
  GateMode gate_mode = GateMode::gated;
  ARange a_range = ARange::unit;
  NormMode norm_mode = NormMode::none;
  CombineMode combine_mode = CombineMode::pass_through;
  std::uint64_t seed = 0;

  /// Throws ConfigError naming the offending field.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Stage-1 layer: frozen teacher attention next to a trainable student mixer.
/// The student may be a GQA copy of the teacher (self-alignment check).
struct WrapperPair {
  GqaParams teacher_attn;
  std::variant<TimeMixParams, GqaParams> student;
  CombineMode combine_mode = CombineMode::pass_through;
};

using Mixer = std::variant<GqaParams, TimeMixParams, WrapperPair>;

/// Pre-norm residual block: x += attn(norm1(x)); x += mlp(norm2(x)).
struct DecoderLayer {
  Mixer attn;
  MlpParams mlp;
  NormParams norm1, norm2;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct DecoderModel {
  ModelConfig config;
  Tensor embed;  // vocab x d_model
  std::vector<DecoderLayer> layers;
  NormParams final_norm;
  Tensor head;  // d_model x vocab, untied

  /// Every parameter with a stable dotted name, in a fixed order.
  std::vector<NamedTensor> parameters() const;
  /// Deep copy; parameters of the copy share nothing with this model.
  DecoderModel clone() const;
  std::size_t parameter_count() const;
};

bool is_mlp_param(std::string_view name);
bool is_timemix_param(std::string_view name);
bool is_gate_param(std::string_view name);
/// Index of the layer a parameter belongs to, or -1 for embed/head/final norm.
int layer_of_param(std::string_view name);

/// Parameter-free token-id check shared by every forward path.
void check_tokens(std::span<const std::int32_t> tokens, std::size_t vocab_size);

/// Fresh model of any attention kind; used as the skeleton when loading.
DecoderModel build_model(const ModelConfig& cfg);
DecoderModel build_teacher(const ModelConfig& cfg);

/// Replaces every attention block with a time mixer. Embeddings, norms, MLPs
/// and the head are copied bit-exactly. `student_cfg` must agree with the
/// teacher on every shared dimension.
DecoderModel convert_to_student(const DecoderModel& teacher, const ModelConfig& student_cfg,
                                InitMode init_mode);
DecoderModel convert_to_student(const DecoderModel& teacher, MixerKind kind, InitMode init_mode);

enum class WrapStudent { timemix, gqa_copy };

DecoderModel wrap_for_alignment(const DecoderModel& teacher, CombineMode combine_mode,
                                WrapStudent student = WrapStudent::timemix);
/// The rwkv7 model made of the wrapped students plus the shared parts.
DecoderModel unwrap_student(const DecoderModel& wrapped);
/// Same model with the output gate removed (gate_free) or restored at 1 (gated).
DecoderModel with_gate_mode(const DecoderModel& model, GateMode mode);

struct AlignPair {
  Tensor teacher;
  Tensor student;
};

struct ForwardOptions {
  bool compute_logits = true;
  bool record_alignment = false;
  AlignTarget align_target = AlignTarget::post_projection;
  /// Only these activation rows reach the head (all rows when empty).
  std::vector<std::size_t> output_rows;
};

struct ForwardResult {
  Tensor logits;
  std::vector<AlignPair> pairs;  // one per wrapped layer
};

ForwardResult forward(const DecoderModel& model, std::span<const std::int32_t> tokens,
                      SeqLayout layout, const ForwardOptions& options = {});
/// Single-sequence next-token logits, [T x vocab].
Tensor forward_lm(const DecoderModel& model, std::span<const std::int32_t> tokens);

/// true = trainable. Must name every parameter exactly once.
using FreezeMask = std::map<std::string, bool>;

FreezeMask make_freeze_mask(const DecoderModel& model,
                            const std::function<bool(std::string_view)>& trainable);
void apply_freeze(const DecoderModel& model, const FreezeMask& mask);
std::vector<NamedTensor> trainable_parameters(const DecoderModel& model);

/// Content hash over parameter names, shapes and values.
std::uint64_t parameter_fingerprint(const DecoderModel& model,
                                    const std::function<bool(std::string_view)>& select = {});

}  // namespace arwkv
