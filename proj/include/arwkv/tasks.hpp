#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "arwkv/model.hpp"
#include "arwkv/train.hpp"

namespace arwkv {

enum class TaskKind { char_lm, passkey, parity, group_comp };

std::string_view to_string(TaskKind k);
TaskKind parse_task_kind(std::string_view s);

/// Byte-level vocabulary: token id == byte value.
inline constexpr std::size_t kByteVocab = 256;
inline constexpr std::int32_t kBos = '^';

struct TaskSpec {
  TaskKind kind = TaskKind::char_lm;
  std::size_t seq_len_train = 64;
  std::size_t seq_len_eval = 256;
  /// Eval length buckets; {seq_len_eval} when empty.
  std::vector<std::size_t> eval_lengths;
  std::uint64_t seed = 0;
  std::size_t n_train = 200000;  // tokens for char_lm, samples otherwise
  std::size_t n_eval = 20000;
  std::size_t passkey_digits = 5;

  std::vector<std::size_t> lengths() const;
  void validate() const;
};

std::string token_text(std::span<const std::int32_t> tokens);
std::vector<std::int32_t> text_tokens(std::string_view text);

// ---- character corpus -------------------------------------------------------

/// Order-3 weighted Markov source over a small alphabet. Every context has
/// three distinct successors with weights 0.7, 0.2, 0.1.
class MarkovSource {
 public:
  static constexpr std::string_view kAlphabet = "etaoinshrdl ";
  static constexpr std::array<double, 3> kWeights = {0.7, 0.2, 0.1};

  explicit MarkovSource(std::uint64_t seed);

  /// Successors of a context (three alphabet indices), most likely first.
  const std::array<int, 3>& successors(int c0, int c1, int c2) const;
  /// Deterministic text of n bytes.
  std::vector<std::int32_t> sample(std::size_t n, std::uint64_t stream_seed) const;

 private:
  std::vector<std::array<int, 3>> table_;
};

struct CharCorpus {
  std::vector<std::int32_t> train;
  std::vector<std::int32_t> heldout;
};

/// One stream cut into a train prefix and a held-out suffix.
CharCorpus gen_char_corpus(const TaskSpec& spec);

// ---- labelled tasks ---------------------------------------------------------

/// targets[t] is the token expected at position t; -1 means unscored.
struct LabeledSequence {
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> targets;
};

struct PasskeySample {
  LabeledSequence seq;
  std::size_t key_pos = 0;    // index of the first passkey digit
  std::size_t query_pos = 0;  // index of the prompt token that precedes the answer
  std::vector<std::int32_t> answer;
};

/// `context_len` tokens of digit-free filler holding "#<digits>" once, ending in
/// the prompt "?#"; the answer digits follow. Digits within a key are distinct.
PasskeySample gen_passkey(std::size_t context_len, std::size_t digits, std::uint64_t seed,
                          std::optional<std::size_t> position = std::nullopt);

/// BOS then `length` bits; target at each bit is the parity so far.
LabeledSequence gen_parity(std::size_t length, std::uint64_t seed);

/// Elements of S3 in the order used for class ids '0'..'5'.
const std::array<std::array<int, 3>, 6>& s3_elements();

/// BOS then `length` generators ('a' = (0 1), 'b' = (0 1 2)); target is the
/// class id of the running product.
LabeledSequence gen_group_comp(std::size_t length, std::uint64_t seed);

/// n samples at one length for a labelled task kind.
std::vector<LabeledSequence> gen_task_samples(TaskKind kind, std::size_t n, std::size_t length,
                                              std::uint64_t seed, std::size_t passkey_digits = 5);

/// Training samples drawn from the task's training distribution.
std::vector<LabeledSequence> gen_task_train(const TaskSpec& spec);
/// Eval samples for one bucket length, disjoint in seed space from training.
std::vector<LabeledSequence> gen_task_eval(const TaskSpec& spec, std::size_t length);

/// Cyclic batch source over fixed-length labelled samples.
BatchSource labeled_batches(std::shared_ptr<const std::vector<LabeledSequence>> samples,
                            std::size_t batch_size, std::uint64_t seed);

// ---- evaluation -------------------------------------------------------------

/// Maps a token sequence to [T x vocab] next-token logits.
using LogitsFn = std::function<Tensor(std::span<const std::int32_t>)>;
/// Maps a token sequence to an argmax token per position.
using Predictor = std::function<std::vector<std::int32_t>(std::span<const std::int32_t>)>;

LogitsFn model_logits(const DecoderModel& model);
Predictor model_predictor(const DecoderModel& model);

/// exp(mean next-token cross-entropy) over consecutive windows of seq_len + 1.
double eval_perplexity(const LogitsFn& logits, std::span<const std::int32_t> corpus,
                       std::size_t seq_len, std::size_t max_windows = 0);
double eval_perplexity(const DecoderModel& model, std::span<const std::int32_t> corpus,
                       std::size_t seq_len, std::size_t max_windows = 0);

struct TeacherComparison {
  double kl = 0.0;         // mean KL(teacher || student) per position
  double agreement = 0.0;  // fraction of positions with equal argmax
};

TeacherComparison compare_to_teacher(const DecoderModel& teacher, const DecoderModel& student,
                                     std::span<const std::int32_t> corpus, std::size_t seq_len,
                                     std::size_t max_windows = 0);

struct TaskAccuracy {
  double overall = 0.0;
  std::map<std::size_t, double> per_length;
  std::size_t scored = 0;
};

/// Per-position accuracy over scored targets; passkey counts a sample correct
/// only when every answer digit is right.
TaskAccuracy score_samples(TaskKind kind, const std::vector<LabeledSequence>& samples,
                           const Predictor& predict);

/// Scores the predictor on spec.n_eval samples at each eval length.
TaskAccuracy eval_task_accuracy(const Predictor& predict, const TaskSpec& spec);

}  // namespace arwkv
