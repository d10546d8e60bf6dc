#include "arwkv/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace arwkv {

namespace {

constexpr std::pair<TaskKind, std::string_view> kTaskKinds[] = {{TaskKind::char_lm, "char_lm"},
                                                                 {TaskKind::passkey, "passkey"},
                                                                 {TaskKind::parity, "parity"},
                                                                 {TaskKind::group_comp, "group_comp"}};

constexpr std::uint64_t kTrainSalt = 0x7472616900000001ULL;
constexpr std::uint64_t kEvalSalt = 0x6576616c00000000ULL;

int alphabet_size() { return static_cast<int>(MarkovSource::kAlphabet.size()); }

const MarkovSource& filler_source() {
  static const MarkovSource source(0);
  return source;
}

std::size_t task_length(TaskKind kind, const LabeledSequence& s) {
  return kind == TaskKind::passkey ? s.tokens.size() : s.tokens.size() - 1;
}

void log_softmax_row(const double* x, std::size_t n, std::vector<double>& out) {
  out.resize(n);
  double mx = x[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x[j]);
  double z = 0.0;
  for (std::size_t j = 0; j < n; ++j) z += std::exp(x[j] - mx);
  const double lz = mx + std::log(z);
  for (std::size_t j = 0; j < n; ++j) out[j] = x[j] - lz;
}

std::size_t window_count(std::size_t corpus_size, std::size_t seq_len, std::size_t max_windows) {
  if (seq_len == 0 || corpus_size < seq_len + 1) {
    throw std::invalid_argument("evaluation corpus of " + std::to_string(corpus_size) +
                                " tokens is shorter than one window of " +
                                std::to_string(seq_len + 1));
  }
  std::size_t n = (corpus_size - 1) / seq_len;
  return max_windows ? std::min(n, max_windows) : n;
}

}  // namespace

std::string_view to_string(TaskKind k) {
  for (const auto& [v, n] : kTaskKinds) {
    if (v == k) return n;
  }
  return "?";
}

TaskKind parse_task_kind(std::string_view s) {
  for (const auto& [v, n] : kTaskKinds) {
    if (n == s) return v;
  }
  throw ConfigError("kind", "unknown value '" + std::string(s) +
                                "' (expected one of char_lm, passkey, parity, group_comp)");
}

std::vector<std::size_t> TaskSpec::lengths() const {
  return eval_lengths.empty() ? std::vector<std::size_t>{seq_len_eval} : eval_lengths;
}

void TaskSpec::validate() const {
  if (seq_len_train == 0) throw ConfigError("seq_len_train", "must be positive");
  if (seq_len_eval == 0) throw ConfigError("seq_len_eval", "must be positive");
  for (auto l : eval_lengths) {
    if (l == 0) throw ConfigError("eval_lengths", "lengths must be positive");
  }
  if (kind == TaskKind::passkey) {
    if (passkey_digits == 0 || passkey_digits > 10) {
      throw ConfigError("passkey_digits", "must lie in [1, 10] (digits are distinct)");
    }
    const std::size_t min_len = 2 * passkey_digits + 2;
    if (seq_len_train < min_len) {
      throw ConfigError("seq_len_train", "passkey needs at least " + std::to_string(min_len));
    }
    for (auto l : lengths()) {
      if (l < min_len) {
        throw ConfigError("eval_lengths", "passkey needs at least " + std::to_string(min_len));
      }
    }
  }
}

std::string token_text(std::span<const std::int32_t> tokens) {
  std::string s;
  s.reserve(tokens.size());
  for (auto t : tokens) s.push_back(static_cast<char>(t));
  return s;
}

std::vector<std::int32_t> text_tokens(std::string_view text) {
  std::vector<std::int32_t> t;
  t.reserve(text.size());
  for (unsigned char c : text) t.push_back(c);
  return t;
}

// ---- character corpus -------------------------------------------------------

MarkovSource::MarkovSource(std::uint64_t seed) {
  const int A = alphabet_size();
  std::mt19937_64 rng(step_seed(seed, 0x4d61726bULL));
  std::vector<int> order(static_cast<std::size_t>(A));
  table_.resize(static_cast<std::size_t>(A * A * A));
  for (auto& succ : table_) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    succ = {order[0], order[1], order[2]};
  }
}

const std::array<int, 3>& MarkovSource::successors(int c0, int c1, int c2) const {
  const int A = alphabet_size();
  if (c0 < 0 || c1 < 0 || c2 < 0 || c0 >= A || c1 >= A || c2 >= A) {
    throw std::out_of_range("MarkovSource: context index outside the alphabet");
  }
  return table_[static_cast<std::size_t>((c0 * A + c1) * A + c2)];
}

std::vector<std::int32_t> MarkovSource::sample(std::size_t n, std::uint64_t stream_seed) const {
  std::mt19937_64 rng(stream_seed);
  std::uniform_int_distribution<int> first(0, alphabet_size() - 1);
  std::discrete_distribution<int> pick(kWeights.begin(), kWeights.end());
  std::vector<std::int32_t> out;
  out.reserve(n);
  int c[3] = {first(rng), first(rng), first(rng)};
  for (std::size_t i = 0; i < n; ++i) {
    const int next = successors(c[0], c[1], c[2])[static_cast<std::size_t>(pick(rng))];
    out.push_back(static_cast<unsigned char>(kAlphabet[static_cast<std::size_t>(next)]));
    c[0] = c[1];
    c[1] = c[2];
    c[2] = next;
  }
  return out;
}

CharCorpus gen_char_corpus(const TaskSpec& spec) {
  const MarkovSource source(spec.seed);
  auto stream = source.sample(spec.n_train + spec.n_eval, step_seed(spec.seed, 1));
  CharCorpus c;
  c.train.assign(stream.begin(), stream.begin() + static_cast<std::ptrdiff_t>(spec.n_train));
  c.heldout.assign(stream.begin() + static_cast<std::ptrdiff_t>(spec.n_train), stream.end());
  return c;
}

// ---- labelled tasks ---------------------------------------------------------

PasskeySample gen_passkey(std::size_t context_len, std::size_t digits, std::uint64_t seed,
                          std::optional<std::size_t> position) {
  if (digits == 0 || digits > 10) {
    throw std::invalid_argument("gen_passkey: digits must lie in [1, 10]");
  }
  // filler + "#" + key + "?#" + key[0..digits-1)
  const std::size_t fixed = 1 + digits + 2 + (digits - 1);
  if (context_len < fixed) {
    throw std::invalid_argument("gen_passkey: context of " + std::to_string(context_len) +
                                " cannot hold a " + std::to_string(digits) + "-digit passkey");
  }
  const std::size_t filler_len = context_len - fixed;
  std::mt19937_64 rng(seed);

  std::vector<int> pool(10);
  std::iota(pool.begin(), pool.end(), 0);
  std::shuffle(pool.begin(), pool.end(), rng);
  PasskeySample s;
  for (std::size_t i = 0; i < digits; ++i) s.answer.push_back('0' + pool[i]);

  std::size_t p = std::uniform_int_distribution<std::size_t>(0, filler_len)(rng);
  if (position) {
    if (*position > filler_len) {
      throw std::invalid_argument("gen_passkey: position beyond the filler");
    }
    p = *position;
  }
  const auto filler = filler_source().sample(filler_len, rng());

  auto& tok = s.seq.tokens;
  tok.reserve(context_len);
  tok.insert(tok.end(), filler.begin(), filler.begin() + static_cast<std::ptrdiff_t>(p));
  tok.push_back('#');
  s.key_pos = tok.size();
  tok.insert(tok.end(), s.answer.begin(), s.answer.end());
  tok.insert(tok.end(), filler.begin() + static_cast<std::ptrdiff_t>(p), filler.end());
  tok.push_back('?');
  tok.push_back('#');
  s.query_pos = tok.size() - 1;
  tok.insert(tok.end(), s.answer.begin(), s.answer.end() - 1);

  s.seq.targets.assign(tok.size(), -1);
  for (std::size_t i = 0; i < digits; ++i) s.seq.targets[s.query_pos + i] = s.answer[i];
  return s;
}

LabeledSequence gen_parity(std::size_t length, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  LabeledSequence s;
  s.tokens.reserve(length + 1);
  s.tokens.push_back(kBos);
  s.targets.push_back(-1);
  int parity = 0;
  for (std::size_t i = 0; i < length; ++i) {
    const int bit = static_cast<int>(rng() >> 63);
    parity ^= bit;
    s.tokens.push_back('0' + bit);
    s.targets.push_back('0' + parity);
  }
  return s;
}

const std::array<std::array<int, 3>, 6>& s3_elements() {
  static const auto elements = [] {
    std::array<std::array<int, 3>, 6> e{};
    std::array<int, 3> p = {0, 1, 2};
    for (auto& slot : e) {
      slot = p;
      std::next_permutation(p.begin(), p.end());
    }
    return e;
  }();
  return elements;
}

LabeledSequence gen_group_comp(std::size_t length, std::uint64_t seed) {
  static const std::array<int, 3> kGen[2] = {{1, 0, 2}, {1, 2, 0}};
  const auto& elems = s3_elements();
  std::mt19937_64 rng(seed);
  LabeledSequence s;
  s.tokens.reserve(length + 1);
  s.tokens.push_back(kBos);
  s.targets.push_back(-1);
  std::array<int, 3> p = {0, 1, 2};
  for (std::size_t i = 0; i < length; ++i) {
    const int g = static_cast<int>(rng() >> 63);
    std::array<int, 3> next{};
    for (std::size_t j = 0; j < 3; ++j) next[j] = kGen[g][static_cast<std::size_t>(p[j])];
    p = next;
    const auto cls = std::find(elems.begin(), elems.end(), p) - elems.begin();
    s.tokens.push_back('a' + g);
    s.targets.push_back('0' + static_cast<std::int32_t>(cls));
  }
  return s;
}

std::vector<LabeledSequence> gen_task_samples(TaskKind kind, std::size_t n, std::size_t length,
                                              std::uint64_t seed, std::size_t passkey_digits) {
  std::vector<LabeledSequence> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t s = step_seed(seed, i);
    switch (kind) {
      case TaskKind::passkey:
        out.push_back(gen_passkey(length, passkey_digits, s).seq);
        break;
      case TaskKind::parity:
        out.push_back(gen_parity(length, s));
        break;
      case TaskKind::group_comp:
        out.push_back(gen_group_comp(length, s));
        break;
      case TaskKind::char_lm:
        throw std::invalid_argument("gen_task_samples: char_lm has no labelled samples");
    }
  }
  return out;
}

std::vector<LabeledSequence> gen_task_train(const TaskSpec& spec) {
  spec.validate();
  return gen_task_samples(spec.kind, spec.n_train, spec.seq_len_train,
                          step_seed(spec.seed, kTrainSalt), spec.passkey_digits);
}

std::vector<LabeledSequence> gen_task_eval(const TaskSpec& spec, std::size_t length) {
  spec.validate();
  return gen_task_samples(spec.kind, spec.n_eval, length, step_seed(spec.seed, kEvalSalt + length),
                          spec.passkey_digits);
}

BatchSource labeled_batches(std::shared_ptr<const std::vector<LabeledSequence>> samples,
                            std::size_t batch_size, std::uint64_t seed) {
  if (!samples || samples->empty()) throw std::invalid_argument("labeled_batches: no samples");
  const std::size_t T = samples->front().tokens.size();
  for (const auto& s : *samples) {
    if (s.tokens.size() != T || s.targets.size() != T) {
      throw std::invalid_argument("labeled_batches: samples must share one length");
    }
  }
  return [samples, batch_size, seed, T](std::size_t step) {
    std::mt19937_64 rng(step_seed(seed, step));
    std::uniform_int_distribution<std::size_t> pick(0, samples->size() - 1);
    TokenBatch b;
    b.layout = {batch_size, T};
    for (std::size_t i = 0; i < batch_size; ++i) {
      const auto& s = (*samples)[pick(rng)];
      b.inputs.insert(b.inputs.end(), s.tokens.begin(), s.tokens.end());
      b.targets.insert(b.targets.end(), s.targets.begin(), s.targets.end());
    }
    return b;
  };
}

// ---- evaluation -------------------------------------------------------------

LogitsFn model_logits(const DecoderModel& model) {
  return [&model](std::span<const std::int32_t> tokens) {
    NoGradGuard no_grad;
    return forward_lm(model, tokens);
  };
}

Predictor model_predictor(const DecoderModel& model) {
  return [&model](std::span<const std::int32_t> tokens) {
    NoGradGuard no_grad;
    Tensor logits = forward_lm(model, tokens);
    const std::size_t V = logits.cols();
    const auto v = logits.values();
    std::vector<std::int32_t> out(logits.rows());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const auto row = v.subspan(i * V, V);
      out[i] = static_cast<std::int32_t>(std::max_element(row.begin(), row.end()) - row.begin());
    }
    return out;
  };
}

double eval_perplexity(const LogitsFn& logits, std::span<const std::int32_t> corpus,
                       std::size_t seq_len, std::size_t max_windows) {
  const std::size_t n = window_count(corpus.size(), seq_len, max_windows);
  double nll = 0.0;
  std::size_t count = 0;
  std::vector<double> lrow;
  for (std::size_t w = 0; w < n; ++w) {
    const auto window = corpus.subspan(w * seq_len, seq_len + 1);
    Tensor l = logits(window.first(seq_len));
    const std::size_t V = l.cols();
    const auto v = l.values();
    for (std::size_t t = 0; t < seq_len; ++t) {
      log_softmax_row(v.data() + t * V, V, lrow);
      nll -= lrow.at(static_cast<std::size_t>(window[t + 1]));
      ++count;
    }
  }
  return std::exp(nll / static_cast<double>(count));
}

double eval_perplexity(const DecoderModel& model, std::span<const std::int32_t> corpus,
                       std::size_t seq_len, std::size_t max_windows) {
  return eval_perplexity(model_logits(model), corpus, seq_len, max_windows);
}

TeacherComparison compare_to_teacher(const DecoderModel& teacher, const DecoderModel& student,
                                     std::span<const std::int32_t> corpus, std::size_t seq_len,
                                     std::size_t max_windows) {
  if (teacher.config.vocab_size != student.config.vocab_size) {
    throw std::invalid_argument("compare_to_teacher: vocabulary sizes differ");
  }
  const std::size_t n = window_count(corpus.size(), seq_len, max_windows);
  NoGradGuard no_grad;
  double kl = 0.0;
  std::size_t agree = 0, count = 0;
  std::vector<double> lp, lq;
  for (std::size_t w = 0; w < n; ++w) {
    const auto inputs = corpus.subspan(w * seq_len, seq_len);
    Tensor tl = forward_lm(teacher, inputs), sl = forward_lm(student, inputs);
    const std::size_t V = tl.cols();
    const auto tv = tl.values(), sv = sl.values();
    for (std::size_t t = 0; t < seq_len; ++t) {
      log_softmax_row(tv.data() + t * V, V, lp);
      log_softmax_row(sv.data() + t * V, V, lq);
      for (std::size_t j = 0; j < V; ++j) kl += std::exp(lp[j]) * (lp[j] - lq[j]);
      agree += std::max_element(lp.begin(), lp.end()) - lp.begin() ==
               std::max_element(lq.begin(), lq.end()) - lq.begin();
      ++count;
    }
  }
  return {kl / static_cast<double>(count), static_cast<double>(agree) / static_cast<double>(count)};
}

TaskAccuracy score_samples(TaskKind kind, const std::vector<LabeledSequence>& samples,
                           const Predictor& predict) {
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> buckets;  // length -> (hit, total)
  for (const auto& s : samples) {
    const auto pred = predict(s.tokens);
    if (pred.size() != s.tokens.size()) {
      throw std::invalid_argument("score_samples: predictor returned the wrong length");
    }
    auto& [hit, total] = buckets[task_length(kind, s)];
    if (kind == TaskKind::passkey) {
      bool ok = true;
      for (std::size_t t = 0; t < s.targets.size(); ++t) {
        if (s.targets[t] >= 0) ok = ok && pred[t] == s.targets[t];
      }
      hit += ok;
      ++total;
    } else {
      for (std::size_t t = 0; t < s.targets.size(); ++t) {
        if (s.targets[t] < 0) continue;
        hit += pred[t] == s.targets[t];
        ++total;
      }
    }
  }
  TaskAccuracy acc;
  std::size_t hits = 0;
  for (const auto& [len, ht] : buckets) {
    acc.per_length[len] = ht.second ? static_cast<double>(ht.first) / static_cast<double>(ht.second) : 0.0;
    hits += ht.first;
    acc.scored += ht.second;
  }
  acc.overall = acc.scored ? static_cast<double>(hits) / static_cast<double>(acc.scored) : 0.0;
  return acc;
}

TaskAccuracy eval_task_accuracy(const Predictor& predict, const TaskSpec& spec) {
  if (spec.kind == TaskKind::char_lm) {
    throw std::invalid_argument("eval_task_accuracy: char_lm is scored by perplexity");
  }
  TaskAccuracy acc;
  double hits = 0.0;
  for (auto len : spec.lengths()) {
    const TaskAccuracy a = score_samples(spec.kind, gen_task_eval(spec, len), predict);
    acc.per_length[len] = a.overall;
    acc.scored += a.scored;
    hits += a.overall * static_cast<double>(a.scored);
  }
  acc.overall = acc.scored ? hits / static_cast<double>(acc.scored) : 0.0;
  return acc;
}

}  // namespace arwkv
