#include "arwkv/model.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <random>
#include <set>

namespace arwkv {

namespace {

template <typename E, std::size_t N>
E parse_enum(std::string_view s, const std::pair<E, std::string_view> (&table)[N],
             const char* what) {
  for (const auto& [value, name] : table) {
    if (name == s) return value;
  }
  std::string allowed;
  for (const auto& [value, name] : table) allowed += (allowed.empty() ? "" : ", ") + std::string(name);
  throw ConfigError(what, "unknown value '" + std::string(s) + "' (expected one of " + allowed + ")");
}

template <typename E, std::size_t N>
std::string_view enum_name(E v, const std::pair<E, std::string_view> (&table)[N]) {
  for (const auto& [value, name] : table) {
    if (value == v) return name;
  }
  return "?";
}

constexpr std::pair<AttentionKind, std::string_view> kAttentionKinds[] = {
    {AttentionKind::gqa, "gqa"},
    {AttentionKind::rwkv7, "rwkv7"},
    {AttentionKind::rwkv6, "rwkv6"},
    {AttentionKind::wrapper, "wrapper"}};
constexpr std::pair<CombineMode, std::string_view> kCombineModes[] = {
    {CombineMode::pass_through, "pass_through"},
    {CombineMode::straight_through, "straight_through"}};
constexpr std::pair<AlignTarget, std::string_view> kAlignTargets[] = {
    {AlignTarget::post_projection, "post_projection"},
    {AlignTarget::pre_projection, "pre_projection"}};
constexpr std::pair<InitMode, std::string_view> kInitModes[] = {
    {InitMode::fresh, "fresh"}, {InitMode::from_teacher, "from_teacher"}};
constexpr std::pair<GateMode, std::string_view> kGateModes[] = {
    {GateMode::gated, "gated"}, {GateMode::gate_free, "gate_free"}};
constexpr std::pair<ARange, std::string_view> kARanges[] = {{ARange::unit, "unit"},
                                                             {ARange::extended, "extended"}};
constexpr std::pair<NormMode, std::string_view> kNormModes[] = {
    {NormMode::none, "none"}, {NormMode::group_norm, "group_norm"}};
constexpr std::pair<MixerKind, std::string_view> kMixerKinds[] = {{MixerKind::rwkv7, "rwkv7"},
                                                                   {MixerKind::rwkv6, "rwkv6"}};

constexpr double kGateInitBias = 16.0;

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <typename F>
void visit_gqa(GqaParams& p, const std::string& prefix, F&& f) {
  f(prefix + "wq", p.wq);
  f(prefix + "bq", p.bq);
  f(prefix + "wk", p.wk);
  f(prefix + "bk", p.bk);
  f(prefix + "wv", p.wv);
  f(prefix + "bv", p.bv);
  f(prefix + "wo", p.wo);
}

template <typename F>
void visit_timemix(TimeMixParams& p, const std::string& prefix, F&& f) {
  auto opt = [&](const char* name, Tensor& t) {
    if (t.defined()) f(prefix + name, t);
  };
  opt("shift_logit", p.shift_logit);
  opt("w_r", p.w_r);
  opt("w_k", p.w_k);
  opt("w_v", p.w_v);
  opt("w_w", p.w_w);
  opt("decay_bias", p.decay_bias);
  opt("w_kappa", p.w_kappa);
  opt("w_a", p.w_a);
  opt("icl_bias", p.icl_bias);
  opt("w_g", p.w_g);
  opt("gate_bias", p.gate_bias);
  opt("gn_gamma", p.gn_gamma);
  opt("gn_beta", p.gn_beta);
  opt("w_o", p.w_o);
}

template <typename F>
void visit_params(DecoderModel& m, F&& f) {
  f(std::string("embed"), m.embed);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    auto& layer = m.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    f(p + "norm1.gamma", layer.norm1.gamma);
    std::visit(
        [&](auto& attn) {
          using T = std::decay_t<decltype(attn)>;
          if constexpr (std::is_same_v<T, GqaParams>) {
            visit_gqa(attn, p + "attn.", f);
          } else if constexpr (std::is_same_v<T, TimeMixParams>) {
            visit_timemix(attn, p + "tm.", f);
          } else {
            visit_gqa(attn.teacher_attn, p + "teacher_attn.", f);
            if (auto* tm = std::get_if<TimeMixParams>(&attn.student)) {
              visit_timemix(*tm, p + "student_tm.", f);
            } else {
              visit_gqa(std::get<GqaParams>(attn.student), p + "student_attn.", f);
            }
          }
        },
        layer.attn);
    f(p + "norm2.gamma", layer.norm2.gamma);
    f(p + "mlp.w_gate", layer.mlp.w_gate);
    f(p + "mlp.w_up", layer.mlp.w_up);
    f(p + "mlp.w_down", layer.mlp.w_down);
  }
  f(std::string("final_norm.gamma"), m.final_norm.gamma);
  f(std::string("head"), m.head);
}

GqaParams init_gqa(const ModelConfig& c, std::mt19937_64& rng) {
  GqaParams p;
  p.n_heads = c.n_heads;
  p.n_kv_heads = c.n_kv_heads;
  p.head_dim = c.head_dim;
  const std::size_t qw = c.n_heads * c.head_dim, kw = c.n_kv_heads * c.head_dim;
  p.wq = randn({c.d_model, qw}, 0.02, rng);
  p.bq = Tensor::zeros({qw}, true);
  p.wk = randn({c.d_model, kw}, 0.02, rng);
  p.bk = Tensor::zeros({kw}, true);
  p.wv = randn({c.d_model, kw}, 0.02, rng);
  p.bv = Tensor::zeros({kw}, true);
  p.wo = randn({qw, c.d_model}, 0.02, rng);
  return p;
}

TimeMixInit timemix_init_for(const ModelConfig& c) {
  TimeMixInit init;
  init.kind = c.attention_kind == AttentionKind::rwkv6 ? MixerKind::rwkv6 : MixerKind::rwkv7;
  init.a_range = c.a_range;
  init.gate_mode = c.gate_mode;
  init.norm_mode = c.norm_mode;
  init.gate_bias = kGateInitBias;
  return init;
}

TimeMixParams fresh_timemix(const ModelConfig& c, std::size_t layer) {
  std::mt19937_64 rng(mix_seed(c.seed, 1000 + layer));
  return init_timemix(c.d_model, c.n_heads, c.head_dim, timemix_init_for(c), rng);
}

Tensor expand_kv_columns(const Tensor& w, std::size_t n_heads, std::size_t n_kv_heads,
                         std::size_t head_dim) {
  const std::size_t rows = w.rows(), in_w = n_kv_heads * head_dim, out_w = n_heads * head_dim;
  const std::size_t group = n_heads / n_kv_heads;
  std::vector<double> out(rows * out_w);
  const auto v = w.values();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      std::copy_n(v.begin() + r * in_w + (h / group) * head_dim, head_dim,
                  out.begin() + r * out_w + h * head_dim);
    }
  }
  return Tensor::from_values({rows, out_w}, std::move(out), true);
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::int32_t> tokens) {
  const std::size_t d = table.cols();
  std::vector<std::int32_t> ids(tokens.begin(), tokens.end());
  std::vector<double> out(ids.size() * d);
  const auto tv = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(tv.begin() + static_cast<std::size_t>(ids[i]) * d, d, out.begin() + i * d);
  }
  const std::size_t n = ids.size();
  return make_op("embedding", {n, d}, std::move(out), {table},
                 [table, d, ids = std::move(ids)](std::span<const double> g,
                                                  std::span<const double>) {
                   auto gt = grad_sink(table);
                   for (std::size_t i = 0; i < ids.size(); ++i) {
                     const std::size_t row = static_cast<std::size_t>(ids[i]);
                     for (std::size_t j = 0; j < d; ++j) gt[row * d + j] += g[i * d + j];
                   }
                 });
}

/// Forward value of `value`, gradient routed to `sink`:
/// sink + stopgradient(value - sink) without the rounding of the subtraction.
Tensor straight_through(const Tensor& value, const Tensor& sink) {
  if (value.shape() != sink.shape()) throw ShapeError("straight_through: shape mismatch");
  std::vector<double> out(value.values().begin(), value.values().end());
  return make_op("straight_through", value.shape(), std::move(out), {sink},
                 [sink](std::span<const double> g, std::span<const double>) {
                   auto gs = grad_sink(sink);
                   for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i];
                 });
}

void require_kind(const DecoderModel& m, AttentionKind kind, const char* op) {
  if (m.config.attention_kind != kind) {
    throw std::invalid_argument(std::string(op) + ": expected a " +
                                std::string(to_string(kind)) + " model, got " +
                                std::string(to_string(m.config.attention_kind)));
  }
}

void set_timemix_gate(TimeMixParams& p, GateMode mode, std::size_t d_model) {
  p.gate_mode = mode;
  if (mode == GateMode::gate_free) {
    p.w_g = {};
    p.gate_bias = {};
  } else if (!p.w_g.defined()) {
    p.w_g = Tensor::zeros({d_model, p.width()}, true);
    p.gate_bias = Tensor::full({p.width()}, kGateInitBias, true);
  }
}

}  // namespace

std::string_view to_string(AttentionKind v) { return enum_name(v, kAttentionKinds); }
std::string_view to_string(CombineMode v) { return enum_name(v, kCombineModes); }
std::string_view to_string(AlignTarget v) { return enum_name(v, kAlignTargets); }
std::string_view to_string(InitMode v) { return enum_name(v, kInitModes); }
std::string_view to_string(GateMode v) { return enum_name(v, kGateModes); }
std::string_view to_string(ARange v) { return enum_name(v, kARanges); }
std::string_view to_string(NormMode v) { return enum_name(v, kNormModes); }
std::string_view to_string(MixerKind v) { return enum_name(v, kMixerKinds); }

AttentionKind parse_attention_kind(std::string_view s) {
  return parse_enum(s, kAttentionKinds, "attention_kind");
}
CombineMode parse_combine_mode(std::string_view s) {
  return parse_enum(s, kCombineModes, "combine_mode");
}
AlignTarget parse_align_target(std::string_view s) {
  return parse_enum(s, kAlignTargets, "align_target");
}
InitMode parse_init_mode(std::string_view s) { return parse_enum(s, kInitModes, "init_mode"); }
GateMode parse_gate_mode(std::string_view s) { return parse_enum(s, kGateModes, "gate_mode"); }
ARange parse_a_range(std::string_view s) { return parse_enum(s, kARanges, "a_range"); }
NormMode parse_norm_mode(std::string_view s) { return parse_enum(s, kNormModes, "norm_mode"); }

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(name, "must be a positive integer");
  };
  positive(vocab_size, "vocab_size");
  positive(d_model, "d_model");
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(n_kv_heads, "n_kv_heads");
  positive(head_dim, "head_dim");
  positive(d_ffn, "d_ffn");
  positive(max_seq_len, "max_seq_len");
  if (d_model != n_heads * head_dim) {
    throw ConfigError("d_model", "must equal n_heads * head_dim (" + std::to_string(n_heads) +
                                     " * " + std::to_string(head_dim) + " = " +
                                     std::to_string(n_heads * head_dim) + "), got " +
                                     std::to_string(d_model));
  }
  if (n_heads % n_kv_heads != 0) {
    throw ConfigError("n_kv_heads", "n_heads (" + std::to_string(n_heads) +
                                        ") must be divisible by n_kv_heads (" +
                                        std::to_string(n_kv_heads) + ")");
  }
  if (max_seq_len < 2) throw ConfigError("max_seq_len", "must be at least 2");
  if (head_dim % 2 != 0 &&
      (attention_kind == AttentionKind::gqa || attention_kind == AttentionKind::wrapper)) {
    throw ConfigError("head_dim", "rotary embeddings need an even head_dim");
  }
  if (!(rope_theta > 0)) throw ConfigError("rope_theta", "must be positive");
  if (vocab_size > (1u << 30)) throw ConfigError("vocab_size", "too large");
}

// ---- DecoderModel -----------------------------------------------------------

std::vector<NamedTensor> DecoderModel::parameters() const {
  std::vector<NamedTensor> out;
  visit_params(const_cast<DecoderModel&>(*this),
               [&](const std::string& name, Tensor& t) { out.push_back({name, t}); });
  return out;
}

DecoderModel DecoderModel::clone() const {
  DecoderModel c = *this;
  visit_params(c, [](const std::string&, Tensor& t) { t = t.clone(); });
  return c;
}

std::size_t DecoderModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

bool is_mlp_param(std::string_view name) { return name.find(".mlp.") != std::string_view::npos; }

bool is_timemix_param(std::string_view name) {
  return name.find(".tm.") != std::string_view::npos ||
         name.find(".student_tm.") != std::string_view::npos;
}

bool is_gate_param(std::string_view name) {
  return is_timemix_param(name) &&
         (name.ends_with(".w_g") || name.ends_with(".gate_bias"));
}

int layer_of_param(std::string_view name) {
  if (!name.starts_with("layers.")) return -1;
  return std::stoi(std::string(name.substr(7, name.find('.', 7) - 7)));
}

void check_tokens(std::span<const std::int32_t> tokens, std::size_t vocab_size) {
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= vocab_size) {
      throw std::out_of_range("token id " + std::to_string(tokens[i]) + " at position " +
                              std::to_string(i) + " is outside vocab of size " +
                              std::to_string(vocab_size));
    }
  }
}

DecoderModel build_model(const ModelConfig& cfg) {
  cfg.validate();
  DecoderModel m;
  m.config = cfg;
  std::mt19937_64 rng(mix_seed(cfg.seed, 0));
  m.embed = randn({cfg.vocab_size, cfg.d_model}, 0.02, rng);
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    DecoderLayer layer;
    layer.norm1.gamma = Tensor::full({cfg.d_model}, 1.0, true);
    layer.norm2.gamma = Tensor::full({cfg.d_model}, 1.0, true);
    switch (cfg.attention_kind) {
      case AttentionKind::gqa:
        layer.attn = init_gqa(cfg, rng);
        break;
      case AttentionKind::rwkv7:
      case AttentionKind::rwkv6:
        layer.attn = fresh_timemix(cfg, i);
        break;
      case AttentionKind::wrapper: {
        WrapperPair w;
        w.teacher_attn = init_gqa(cfg, rng);
        ModelConfig sc = cfg;
        sc.attention_kind = AttentionKind::rwkv7;
        w.student = fresh_timemix(sc, i);
        w.combine_mode = cfg.combine_mode;
        layer.attn = std::move(w);
        break;
      }
    }
    layer.mlp.w_gate = randn({cfg.d_model, cfg.d_ffn}, 0.02, rng);
    layer.mlp.w_up = randn({cfg.d_model, cfg.d_ffn}, 0.02, rng);
    layer.mlp.w_down = randn({cfg.d_ffn, cfg.d_model}, 0.02, rng);
    m.layers.push_back(std::move(layer));
  }
  m.final_norm.gamma = Tensor::full({cfg.d_model}, 1.0, true);
  m.head = randn({cfg.d_model, cfg.vocab_size}, 0.02, rng);
  return m;
}

DecoderModel build_teacher(const ModelConfig& cfg) {
  if (cfg.attention_kind != AttentionKind::gqa) {
    throw ConfigError("attention_kind", "a teacher must use gqa attention");
  }
  return build_model(cfg);
}

DecoderModel convert_to_student(const DecoderModel& teacher, const ModelConfig& student_cfg,
                                InitMode init_mode) {
  require_kind(teacher, AttentionKind::gqa, "convert_to_student");
  if (student_cfg.attention_kind != AttentionKind::rwkv7 &&
      student_cfg.attention_kind != AttentionKind::rwkv6) {
    throw std::invalid_argument("convert_to_student: student kind must be rwkv7 or rwkv6");
  }
  student_cfg.validate();
  const auto& t = teacher.config;
  if (student_cfg.vocab_size != t.vocab_size || student_cfg.d_model != t.d_model ||
      student_cfg.n_layers != t.n_layers || student_cfg.d_ffn != t.d_ffn ||
      student_cfg.n_heads != t.n_heads || student_cfg.head_dim != t.head_dim) {
    throw std::invalid_argument("convert_to_student: student dimensions differ from teacher");
  }
  DecoderModel s = teacher.clone();
  s.config = student_cfg;
  for (std::size_t i = 0; i < s.layers.size(); ++i) {
    const auto& tattn = std::get<GqaParams>(teacher.layers[i].attn);
    TimeMixParams tm = fresh_timemix(student_cfg, i);
    if (init_mode == InitMode::from_teacher) {
      tm.w_r = tattn.wq.clone();
      tm.w_k = expand_kv_columns(tattn.wk, t.n_heads, t.n_kv_heads, t.head_dim);
      tm.w_v = expand_kv_columns(tattn.wv, t.n_heads, t.n_kv_heads, t.head_dim);
      tm.w_o = tattn.wo.clone();
    }
    s.layers[i].attn = std::move(tm);
  }
  return s;
}

DecoderModel convert_to_student(const DecoderModel& teacher, MixerKind kind, InitMode init_mode) {
  ModelConfig cfg = teacher.config;
  cfg.attention_kind = kind == MixerKind::rwkv7 ? AttentionKind::rwkv7 : AttentionKind::rwkv6;
  return convert_to_student(teacher, cfg, init_mode);
}

DecoderModel wrap_for_alignment(const DecoderModel& teacher, CombineMode combine_mode,
                                WrapStudent student) {
  if (teacher.config.attention_kind == AttentionKind::wrapper) {
    throw std::invalid_argument("wrap_for_alignment: model is already wrapped");
  }
  require_kind(teacher, AttentionKind::gqa, "wrap_for_alignment");
  DecoderModel w = teacher.clone();
  w.config.attention_kind = AttentionKind::wrapper;
  w.config.combine_mode = combine_mode;
  ModelConfig sc = teacher.config;
  sc.attention_kind = AttentionKind::rwkv7;
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    WrapperPair pair;
    pair.teacher_attn = std::get<GqaParams>(w.layers[i].attn);
    pair.combine_mode = combine_mode;
    if (student == WrapStudent::gqa_copy) {
      GqaParams copy = pair.teacher_attn;
      visit_gqa(copy, "", [](const std::string&, Tensor& t) { t = t.clone(); });
      pair.student = std::move(copy);
    } else {
      pair.student = fresh_timemix(sc, i);
    }
    w.layers[i].attn = std::move(pair);
  }
  return w;
}

DecoderModel unwrap_student(const DecoderModel& wrapped) {
  require_kind(wrapped, AttentionKind::wrapper, "unwrap_student");
  DecoderModel s = wrapped.clone();
  s.config.attention_kind = AttentionKind::rwkv7;
  for (auto& layer : s.layers) {
    auto& pair = std::get<WrapperPair>(layer.attn);
    auto* tm = std::get_if<TimeMixParams>(&pair.student);
    if (!tm) throw std::invalid_argument("unwrap_student: wrapped student is not a time mixer");
    TimeMixParams moved = std::move(*tm);
    layer.attn = std::move(moved);
  }
  return s;
}

DecoderModel with_gate_mode(const DecoderModel& model, GateMode mode) {
  DecoderModel m = model.clone();
  m.config.gate_mode = mode;
  for (auto& layer : m.layers) {
    if (auto* tm = std::get_if<TimeMixParams>(&layer.attn)) {
      set_timemix_gate(*tm, mode, m.config.d_model);
    } else if (auto* pair = std::get_if<WrapperPair>(&layer.attn)) {
      if (auto* stm = std::get_if<TimeMixParams>(&pair->student)) {
        set_timemix_gate(*stm, mode, m.config.d_model);
      }
    }
  }
  return m;
}

// ---- forward ----------------------------------------------------------------

ForwardResult forward(const DecoderModel& model, std::span<const std::int32_t> tokens,
                      SeqLayout layout, const ForwardOptions& options) {
  const auto& cfg = model.config;
  if (tokens.size() != layout.rows() || layout.seq == 0) {
    throw ShapeError("forward: " + std::to_string(tokens.size()) + " tokens for layout " +
                     std::to_string(layout.batch) + "x" + std::to_string(layout.seq));
  }
  check_tokens(tokens, cfg.vocab_size);
  const bool positional =
      cfg.attention_kind == AttentionKind::gqa || cfg.attention_kind == AttentionKind::wrapper;
  if (positional && layout.seq > cfg.max_seq_len) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(layout.seq) +
                                " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }

  ForwardResult result;
  Tensor x = embedding_lookup(model.embed, tokens);
  for (const auto& layer : model.layers) {
    Tensor xn = rmsnorm(x, layer.norm1);
    Tensor attn_out = std::visit(
        [&](const auto& attn) -> Tensor {
          using T = std::decay_t<decltype(attn)>;
          if constexpr (std::is_same_v<T, GqaParams>) {
            return gqa_attention(xn, attn, layout, cfg.rope_theta).y;
          } else if constexpr (std::is_same_v<T, TimeMixParams>) {
            return timemix_forward(xn, attn, layout).y;
          } else {
            AttentionOutput t = gqa_attention(xn, attn.teacher_attn, layout, cfg.rope_theta);
            Tensor sy, sh;
            if (const auto* tm = std::get_if<TimeMixParams>(&attn.student)) {
              TimeMixOutput s = timemix_forward(xn, *tm, layout);
              sy = s.y;
              sh = s.h;
            } else {
              AttentionOutput s =
                  gqa_attention(xn, std::get<GqaParams>(attn.student), layout, cfg.rope_theta);
              sy = s.y;
              sh = s.h;
            }
            if (options.record_alignment) {
              if (options.align_target == AlignTarget::post_projection) {
                result.pairs.push_back({t.y, sy});
              } else {
                result.pairs.push_back({t.h, sh});
              }
            }
            return attn.combine_mode == CombineMode::pass_through ? t.y
                                                                  : straight_through(t.y, sy);
          }
        },
        layer.attn);
    x = add(x, attn_out);
    x = add(x, swiglu_mlp(rmsnorm(x, layer.norm2), layer.mlp));
  }
  if (options.compute_logits) {
    if (!options.output_rows.empty()) x = gather_rows(x, options.output_rows);
    result.logits = matmul(rmsnorm(x, model.final_norm), model.head);
  }
  return result;
}

Tensor forward_lm(const DecoderModel& model, std::span<const std::int32_t> tokens) {
  return forward(model, tokens, {1, tokens.size()}).logits;
}

// ---- freezing ---------------------------------------------------------------

FreezeMask make_freeze_mask(const DecoderModel& model,
                            const std::function<bool(std::string_view)>& trainable) {
  FreezeMask mask;
  for (const auto& p : model.parameters()) mask[p.name] = trainable(p.name);
  return mask;
}

void apply_freeze(const DecoderModel& model, const FreezeMask& mask) {
  const auto params = model.parameters();
  std::set<std::string> names;
  for (const auto& p : params) {
    names.insert(p.name);
    if (!mask.contains(p.name)) {
      throw std::invalid_argument("apply_freeze: mask does not cover parameter " + p.name);
    }
  }
  for (const auto& [name, flag] : mask) {
    if (!names.contains(name)) {
      throw std::invalid_argument("apply_freeze: mask names unknown parameter " + name);
    }
  }
  for (auto p : params) p.tensor.set_requires_grad(mask.at(p.name));
}

std::vector<NamedTensor> trainable_parameters(const DecoderModel& model) {
  std::vector<NamedTensor> out;
  for (auto& p : model.parameters()) {
    if (p.tensor.requires_grad()) out.push_back(p);
  }
  return out;
}

std::uint64_t parameter_fingerprint(const DecoderModel& model,
                                    const std::function<bool(std::string_view)>& select) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& p : model.parameters()) {
    if (select && !select(p.name)) continue;
    feed(p.name.data(), p.name.size());
    for (auto s : p.tensor.shape()) feed(&s, sizeof s);
    const auto v = p.tensor.values();
    feed(v.data(), v.size() * sizeof(double));
  }
  return h;
}

}  // namespace arwkv
