#include <cmath>

#include "arwkv/tasks.hpp"
#include "arwkv/train.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace arwkv;
using arwkv::test::PrecisionScope;

namespace {

ModelConfig byte_config() {
  ModelConfig c = test::tiny_config();
  c.vocab_size = 128;
  return c;
}

const std::vector<std::int32_t>& corpus() {
  static const std::vector<std::int32_t> text = MarkovSource(3).sample(20000, 4);
  return text;
}

TrainConfig quick(std::size_t steps) {
  TrainConfig c;
  c.batch_size = 4;
  c.seq_len = 16;
  c.max_steps = steps;
  c.log_every = 5;
  c.lr = 1e-2;
  c.seed = 11;
  return c;
}

std::vector<double> flat_params(const DecoderModel& m) {
  std::vector<double> out;
  for (const auto& p : m.parameters()) {
    const auto v = p.tensor.values();
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

std::vector<double> curve_losses(const TrainRun& r) {
  std::vector<double> out;
  for (const auto& p : r.curve) out.push_back(p.loss);
  return out;
}

}  // namespace

TEST_SUITE("train") {

TEST_CASE("alignment loss examples") {
  PrecisionScope p(Precision::f64);
  std::mt19937_64 rng(1);
  const Tensor h = test::uniform({5, 8}, rng);
  CHECK(alignment_loss(h, h, 8).item() == 0.0);

  const Tensor a = Tensor::from_values({1, 4}, {1, 1, 1, 1});
  const Tensor z = Tensor::zeros({1, 4});
  CHECK(alignment_loss(z, a, 4).item() == doctest::Approx(1.0).epsilon(1e-15));

  CHECK_THROWS(alignment_loss(Tensor::zeros({2, 4}), Tensor::zeros({2, 5}), 4));
}

TEST_CASE("alignment loss is invariant to channel replication") {
  PrecisionScope p(Precision::f64);
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor t = test::uniform({6, 8}, rng, -2, 2, false);
    const Tensor s = test::uniform({6, 8}, rng, -2, 2, false);
    const double base = alignment_loss(t, s, 8).item();
    for (std::size_t k : {2, 3, 5}) {
      std::vector<double> tw, sw;
      for (std::size_t r = 0; r < 6; ++r) {
        for (std::size_t c = 0; c < 8; ++c) {
          for (std::size_t rep = 0; rep < k; ++rep) {
            tw.push_back(t.at(r, c));
            sw.push_back(s.at(r, c));
          }
        }
      }
      const double wide = alignment_loss(Tensor::from_values({6, 8 * k}, tw),
                                         Tensor::from_values({6, 8 * k}, sw), 8 * k)
                              .item();
      CHECK(wide == doctest::Approx(base).epsilon(1e-12));
    }
  }
}

TEST_CASE("alignment loss gradient flows to the student only") {
  PrecisionScope p(Precision::f64);
  std::mt19937_64 rng(3);
  Tensor t = test::uniform({4, 6}, rng);
  Tensor s = test::uniform({4, 6}, rng);
  CHECK(grad_check([&](const Tensor& x) { return alignment_loss(t, x, 6); }, s, 1e-6) < 1e-6);
  t.zero_grad();
  backward(alignment_loss(t, s, 6));
  for (double g : t.grad()) CHECK(g == 0.0);
}

TEST_CASE("word-level KL examples and properties") {
  PrecisionScope p(Precision::f64);
  const Tensor t = Tensor::from_values({1, 2}, {std::log(2.0), 0.0});
  const Tensor s = Tensor::from_values({1, 2}, {0.0, 0.0});
  const double expect = 2.0 / 3.0 * std::log(4.0 / 3.0) + 1.0 / 3.0 * std::log(2.0 / 3.0);
  CHECK(kd_loss_wordlevel(t, s).item() == doctest::Approx(expect).epsilon(1e-12));
  CHECK(std::abs(expect - 0.0566) < 1e-4);
  CHECK(kd_loss_wordlevel(t, t).item() == 0.0);
  CHECK_THROWS(kd_loss_wordlevel(Tensor::zeros({2, 3}), Tensor::zeros({2, 4})));

  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 1000; ++trial) {
    const Tensor a = test::uniform({3, 7}, rng, -4, 4, false);
    const Tensor b = test::uniform({3, 7}, rng, -4, 4, false);
    CHECK(kd_loss_wordlevel(a, b).item() >= 0.0);
    CHECK(std::abs(kd_loss_wordlevel(a, a).item()) < 1e-9);
    // Shifting logits by a constant leaves the distribution unchanged.
    Tensor shifted = a.clone();
    for (auto& v : shifted.mutable_values()) v += 3.5;
    CHECK(std::abs(kd_loss_wordlevel(a, shifted).item()) < 1e-9);
  }
}

TEST_CASE("word-level KL gradient reaches the student only") {
  PrecisionScope p(Precision::f64);
  std::mt19937_64 rng(5);
  Tensor t = test::uniform({4, 5}, rng);
  Tensor s = test::uniform({4, 5}, rng);
  CHECK(grad_check([&](const Tensor& x) { return kd_loss_wordlevel(t, x); }, s, 1e-6) < 1e-6);
  t.zero_grad();
  backward(kd_loss_wordlevel(t, s));
  for (double g : t.grad()) CHECK(g == 0.0);
}

TEST_CASE("cross entropy") {
  PrecisionScope p(Precision::f64);
  const std::vector<std::int32_t> zeros(5, 0);
  CHECK(cross_entropy(Tensor::zeros({5, 1}), zeros).item() == 0.0);
  const std::vector<std::int32_t> t = {1, -1, 0};
  const Tensor logits = Tensor::from_values({3, 2}, {0, 0, 5, -5, std::log(3.0), 0});
  const double expect = (std::log(2.0) + std::log(4.0 / 3.0)) / 2.0;
  CHECK(cross_entropy(logits, t).item() == doctest::Approx(expect).epsilon(1e-12));
  const std::vector<std::int32_t> none = {-1, -1, -1};
  CHECK(cross_entropy(logits, none).item() == 0.0);
  CHECK_THROWS(cross_entropy(logits, std::vector<std::int32_t>{2, 0, 0}));
  CHECK_THROWS(cross_entropy(logits, std::vector<std::int32_t>{0, 0}));

  std::mt19937_64 rng(6);
  Tensor x = test::uniform({4, 6}, rng);
  const std::vector<std::int32_t> y = {5, -1, 0, 3};
  CHECK(grad_check([&](const Tensor& l) { return cross_entropy(l, y); }, x, 1e-6) < 1e-6);
}

TEST_CASE("adam step examples") {
  PrecisionScope p(Precision::f64);
  SUBCASE("zero gradient leaves parameters unchanged") {
    Tensor w = Tensor::from_values({3}, {1, -2, 3}, true);
    w.zero_grad();
    std::map<std::string, MomentSlot> m;
    adam_step({{"w", w}}, m, 1, {.lr = 0.1});
    CHECK(std::vector<double>(w.values().begin(), w.values().end()) ==
          std::vector<double>{1, -2, 3});
  }
  SUBCASE("first step moves by lr") {
    Tensor w = Tensor::from_values({1}, {0.5}, true);
    w.zero_grad();
    backward(sum(w));
    std::map<std::string, MomentSlot> m;
    const AdamConfig cfg{.lr = 0.1, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8};
    adam_step({{"w", w}}, m, 1, cfg);
    CHECK(w.values()[0] == doctest::Approx(0.5 - 0.1 / (1.0 + 1e-8)).epsilon(1e-14));
    CHECK(m.at("w").m[0] == doctest::Approx(0.1));
    CHECK(m.at("w").v[0] == doctest::Approx(0.001));
  }
  SUBCASE("decoupled weight decay") {
    Tensor w = Tensor::from_values({1}, {2.0}, true);
    w.zero_grad();
    std::map<std::string, MomentSlot> m;
    adam_step({{"w", w}}, m, 1, {.lr = 0.1, .weight_decay = 0.5});
    CHECK(w.values()[0] == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0));
  }
  SUBCASE("non-finite gradient names the parameter") {
    Tensor w = Tensor::from_values({2}, {1, 1}, true);
    w.zero_grad();
    backward(sum(mul(w, Tensor::from_values({2}, {1, NAN}))));
    std::map<std::string, MomentSlot> m;
    try {
      adam_step({{"layers.0.attn.w_q", w}}, m, 1, {});
      FAIL("expected an error");
    } catch (const std::exception& e) {
      CHECK(std::string(e.what()).find("layers.0.attn.w_q") != std::string::npos);
    }
    CHECK(w.values()[0] == 1.0);
  }
}

TEST_CASE("batches are a pure function of seed and step") {
  const auto& text = corpus();
  const TokenBatch a = sample_lm_batch(text, 4, 16, 7, 3);
  const TokenBatch b = sample_lm_batch(text, 4, 16, 7, 3);
  CHECK(a.inputs == b.inputs);
  CHECK(a.targets == b.targets);
  CHECK(sample_lm_batch(text, 4, 16, 7, 4).inputs != a.inputs);
  CHECK(sample_lm_batch(text, 4, 16, 8, 3).inputs != a.inputs);
  CHECK(a.layout.batch == 4);
  CHECK(a.layout.seq == 16);
  for (std::size_t b0 = 0; b0 < 4; ++b0) {
    for (std::size_t t = 0; t + 1 < 16; ++t) CHECK(a.targets[b0 * 16 + t] == a.inputs[b0 * 16 + t + 1]);
  }
  CHECK_THROWS(sample_lm_batch(std::vector<std::int32_t>(10, 1), 1, 16, 0, 1));
}

TEST_CASE("teacher training is deterministic and resumable") {
  const ModelConfig mc = byte_config();
  TrainConfig cfg = quick(20);

  DecoderModel a = build_teacher(mc), b = build_teacher(mc);
  const TrainRun ra = train_teacher(a, corpus(), cfg);
  const TrainRun rb = train_teacher(b, corpus(), cfg);
  CHECK(test::bit_equal(flat_params(a), flat_params(b)));
  CHECK(curve_losses(ra) == curve_losses(rb));
  CHECK(ra.curve.size() == 20);
  CHECK(ra.tokens_seen == 20 * 4 * 16);
  CHECK(ra.curve.back().loss < ra.curve.front().loss);

  DecoderModel c = build_teacher(mc);
  TrainConfig half = cfg;
  half.max_steps = 10;
  TrainRun rc = train_teacher(c, corpus(), half);
  CHECK(rc.step == 10);
  rc = train_teacher(c, corpus(), cfg, {}, rc);
  CHECK(test::bit_equal(flat_params(a), flat_params(c)));
  CHECK(curve_losses(ra) == curve_losses(rc));

  TrainConfig other_seed = cfg;
  other_seed.seed = 12;
  CHECK_THROWS(train_teacher(c, corpus(), other_seed, {}, rc));
}

TEST_CASE("observer is called every log_every steps") {
  DecoderModel m = build_teacher(byte_config());
  std::vector<std::size_t> seen;
  train_teacher(m, corpus(), quick(12), [&](const StepRecord& r) {
    seen.push_back(r.step);
    CHECK(r.stage == "teacher");
    CHECK(r.tokens_seen == r.step * 64);
  });
  CHECK(seen == std::vector<std::size_t>{5, 10});
}

TEST_CASE("stage 1 trains only the student mixers") {
  const DecoderModel teacher = build_teacher(byte_config());
  SUBCASE("zero steps leave everything unchanged") {
    DecoderModel w = wrap_for_alignment(teacher, CombineMode::pass_through);
    const auto before = flat_params(w);
    const TrainRun r = stage1_align(w, corpus(), quick(0));
    CHECK(r.curve.empty());
    CHECK(test::bit_equal(before, flat_params(w)));
  }
  SUBCASE("self-alignment starts at zero loss") {
    DecoderModel w = wrap_for_alignment(teacher, CombineMode::pass_through, WrapStudent::gqa_copy);
    const TrainRun r = stage1_align(w, corpus(), quick(1));
    CHECK(r.curve.front().loss == 0.0);
  }
  SUBCASE("only student parameters move") {
    for (auto mode : {CombineMode::pass_through, CombineMode::straight_through}) {
      for (bool layerwise : {false, true}) {
        CAPTURE(static_cast<int>(mode));
        CAPTURE(layerwise);
        DecoderModel w = wrap_for_alignment(teacher, mode);
        const auto frozen = [](std::string_view n) {
          return n.find(".student_") == std::string_view::npos;
        };
        const auto frozen_before = parameter_fingerprint(w, frozen);
        const auto student_before = parameter_fingerprint(w, [&](std::string_view n) {
          return !frozen(n);
        });
        TrainConfig cfg = quick(40);
        cfg.layerwise = layerwise;
        const TrainRun r = stage1_align(w, corpus(), cfg);
        CHECK(parameter_fingerprint(w, frozen) == frozen_before);
        CHECK(parameter_fingerprint(w, [&](std::string_view n) { return !frozen(n); }) !=
              student_before);
        CHECK(r.stage == "align");
        // Joint straight-through also follows downstream gradients, which need
        // not reduce the per-layer loss.
        if (mode == CombineMode::pass_through || layerwise) {
          CHECK(r.curve.back().loss < r.curve.front().loss);
        }
      }
    }
  }
  DecoderModel plain = build_teacher(byte_config());
  CHECK_THROWS(stage1_align(plain, corpus(), quick(1)));
}

TEST_CASE("stage 2 distillation") {
  const ModelConfig mc = byte_config();
  DecoderModel teacher = build_teacher(mc);
  train_teacher(teacher, corpus(), quick(10));

  SUBCASE("a copy of the teacher starts at zero loss") {
    DecoderModel student = teacher.clone();
    TrainConfig cfg = quick(1);
    cfg.freeze_mlp = false;
    const TrainRun r = stage2_distill(teacher, student, corpus(), cfg);
    CHECK(r.curve.front().loss == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("frozen MLP and gate-free variants") {
    DecoderModel student = convert_to_student(teacher, MixerKind::rwkv7, InitMode::from_teacher);
    const DecoderModel before = student.clone();
    const auto teacher_fp = parameter_fingerprint(teacher);
    TrainConfig cfg = quick(20);
    cfg.gate_mode = GateMode::gate_free;
    cfg.freeze_mlp = true;
    cfg.variant = "ARWKV";
    const TrainRun r = stage2_distill(teacher, student, corpus(), cfg);
    CHECK(parameter_fingerprint(teacher) == teacher_fp);
    CHECK(student.config.gate_mode == GateMode::gate_free);
    CHECK(r.variant == "ARWKV");
    CHECK(r.curve.back().loss < r.curve.front().loss);
    for (const auto& [name, slot] : r.moments) {
      CHECK_FALSE(is_gate_param(name));
      CHECK_FALSE(is_mlp_param(name));
    }
    CHECK(parameter_fingerprint(student, is_mlp_param) ==
          parameter_fingerprint(before, is_mlp_param));
    std::size_t changed = 0;
    const auto after = student.parameters();
    for (const auto& p : before.parameters()) {
      for (const auto& q : after) {
        if (q.name == p.name && !test::bit_equal(p.tensor.values(), q.tensor.values())) {
          ++changed;
          CHECK_FALSE(is_mlp_param(p.name));
        }
      }
    }
    CHECK(changed > 0);
  }
  SUBCASE("active MLP trains the MLP too") {
    DecoderModel student = convert_to_student(teacher, MixerKind::rwkv7, InitMode::from_teacher);
    const DecoderModel before = student.clone();
    TrainConfig cfg = quick(3);
    cfg.freeze_mlp = false;
    const TrainRun r = stage2_distill(teacher, student, corpus(), cfg);
    CHECK(parameter_fingerprint(student, is_mlp_param) !=
          parameter_fingerprint(before, is_mlp_param));
    bool has_gate = false;
    for (const auto& [name, slot] : r.moments) has_gate = has_gate || is_gate_param(name);
    CHECK(has_gate);
  }
  SUBCASE("a larger teacher with the same vocabulary") {
    ModelConfig big = mc;
    big.d_model = 32;
    big.head_dim = 8;
    big.n_layers = 3;
    big.d_ffn = 48;
    const DecoderModel large = build_teacher(big);
    DecoderModel student = convert_to_student(teacher, MixerKind::rwkv7, InitMode::fresh);
    CHECK_NOTHROW(stage2_distill(large, student, corpus(), quick(2)));
    ModelConfig other_vocab = mc;
    other_vocab.vocab_size = 64;
    CHECK_THROWS(stage2_distill(build_teacher(other_vocab), student, corpus(), quick(1)));
  }
}

TEST_CASE("stage 3 extends the context") {
  DecoderModel student =
      convert_to_student(build_teacher(byte_config()), MixerKind::rwkv7, InitMode::fresh);
  TrainConfig cfg = quick(3);
  cfg.seq_len = 4 * byte_config().max_seq_len;
  CHECK_THROWS_AS(stage3_sft(student, corpus(), cfg), ConfigError);
  cfg.prior_seq_len = cfg.seq_len;
  CHECK_THROWS_AS(stage3_sft(student, corpus(), cfg), ConfigError);
  cfg.prior_seq_len = byte_config().max_seq_len;
  const auto count = student.parameter_count();
  const TrainRun r = stage3_sft(student, corpus(), cfg);
  CHECK(r.stage == "sft");
  CHECK(r.tokens_seen == 3 * 4 * cfg.seq_len);
  CHECK(student.parameter_count() == count);
}

TEST_CASE("stage freeze masks") {
  const DecoderModel teacher = build_teacher(byte_config());
  const DecoderModel w = wrap_for_alignment(teacher, CombineMode::pass_through);
  TrainConfig cfg;
  cfg.stage = Stage::align;
  for (const auto& [name, on] : stage_freeze_mask(w, cfg)) {
    CHECK(on == (name.find(".student_") != std::string::npos));
  }
  const DecoderModel s = convert_to_student(teacher, MixerKind::rwkv7, InitMode::fresh);
  cfg.stage = Stage::distill;
  cfg.freeze_mlp = true;
  for (const auto& [name, on] : stage_freeze_mask(s, cfg)) CHECK(on == !is_mlp_param(name));
  cfg.freeze_mlp = false;
  for (const auto& [name, on] : stage_freeze_mask(s, cfg)) CHECK(on);
  cfg.stage = Stage::sft;
  for (const auto& [name, on] : stage_freeze_mask(s, cfg)) CHECK(on);
}

TEST_CASE("supervised training on labelled batches") {
  ModelConfig mc = byte_config();
  mc.attention_kind = AttentionKind::rwkv7;
  DecoderModel m = build_model(mc);
  auto samples = std::make_shared<const std::vector<LabeledSequence>>(
      gen_task_samples(TaskKind::parity, 64, 12, 1));
  TrainConfig cfg = quick(15);
  cfg.stage = Stage::sft;
  const TrainRun r = train_supervised(m, labeled_batches(samples, 8, 2), cfg);
  CHECK(r.tokens_seen == 15 * 8 * 13);
  CHECK(r.curve.back().loss < r.curve.front().loss);
}

}  // TEST_SUITE
