// Command-line driver for the conversion pipeline:
//   gen-data -> train-teacher -> align -> distill -> sft -> eval -> report
// Every subcommand communicates through files only.

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"

#include "arwkv/io.hpp"
#include "arwkv/model.hpp"
#include "arwkv/report.hpp"
#include "arwkv/tasks.hpp"
#include "arwkv/train.hpp"

namespace fs = std::filesystem;
using namespace arwkv;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::string config;
  std::string out;
  std::string teacher;
  std::string student;
  std::string model;
  std::string corpus;
  std::string heldout;
  std::string runs;
  std::string variant;
  std::string resume;
  std::string state_out;
  std::size_t prior_seq_len = 0;
  std::size_t max_windows = 0;
};

std::string manifest_path(const std::string& out) { return out + ".manifest.json"; }
std::string metrics_path(const std::string& out) { return out + ".metrics.jsonl"; }

RunConfig read_config(const Options& o) {
  return o.config.empty() ? RunConfig{} : load_config(o.config);
}

std::string pick(const std::string& flag, const std::string& from_config, const char* name) {
  if (!flag.empty()) return flag;
  if (!from_config.empty()) return from_config;
  throw UsageError(std::string("--") + name + " is required (or set it in the config)");
}

RunManifest base_manifest(const std::string& stage, const RunConfig& rc, const std::string& out) {
  RunManifest m;
  m.stage = stage;
  m.config = rc.to_json();
  m.output_path = out;
  m.seed = rc.train.seed;
  return m;
}

void finish(RunManifest& m, const TrainRun* run) {
  if (run) {
    m.step = run->step;
    m.tokens_seen = run->tokens_seen;
    m.variant = run->variant;
  }
  if (!m.output_path.empty() && fs::exists(m.output_path)) m.output_hash = file_hash(m.output_path);
  write_manifest(m, manifest_path(m.output_path));
  std::cout << nlohmann::json({{"stage", m.stage},
                               {"output", m.output_path},
                               {"hash", m.output_hash},
                               {"step", m.step}})
                   .dump()
            << '\n';
}

std::vector<std::int32_t> corpus_tokens(const std::string& path, std::size_t vocab,
                                        RunManifest& m) {
  CorpusFile c = load_corpus(path);
  if (c.vocab_size > vocab) {
    throw std::invalid_argument("corpus vocab " + std::to_string(c.vocab_size) +
                                " exceeds model vocab " + std::to_string(vocab));
  }
  m.corpora[path] = file_hash(path);
  return std::move(c.tokens);
}

DecoderModel load_input(const std::string& path, const std::string& role, RunManifest& m) {
  m.inputs[role] = file_hash(path);
  return load_checkpoint(path);
}

/// Runs `train` with metrics streaming and optional resume / state output.
template <typename Train>
TrainRun run_training(const Options& o, const std::string& out, DecoderModel& model,
                      const Train& train) {
  TrainRun resume;
  if (!o.resume.empty()) {
    TrainState st = load_train_state(o.resume);
    model = std::move(st.model);
    resume = std::move(st.run);
  }
  MetricsWriter metrics(metrics_path(out), !o.resume.empty());
  TrainRun run = train(model, [&](const StepRecord& r) { metrics.write(r); }, std::move(resume));
  if (!o.state_out.empty()) save_train_state(model, run, o.state_out);
  return run;
}

std::optional<std::size_t> manifest_seq_len(const std::string& ckpt) {
  const auto p = manifest_path(ckpt);
  if (!fs::exists(p)) return std::nullopt;
  const auto m = read_manifest(p);
  if (!m.config.contains("train")) return std::nullopt;
  return m.config["train"].value("seq_len", std::size_t{0});
}

// ---- subcommands ------------------------------------------------------------

int cmd_gen_data(const Options& o) {
  RunConfig rc = read_config(o);
  RunManifest m = base_manifest("gen-data", rc, o.out + ".train.bin");
  m.seed = rc.task.seed;
  const std::string train_path = o.out + ".train.bin", heldout_path = o.out + ".heldout.bin";
  std::vector<std::int32_t> train, heldout;
  if (rc.task.kind == TaskKind::char_lm) {
    CharCorpus c = gen_char_corpus(rc.task);
    train = std::move(c.train);
    heldout = std::move(c.heldout);
  } else {
    for (const auto& s : gen_task_train(rc.task)) {
      train.insert(train.end(), s.tokens.begin(), s.tokens.end());
    }
    for (const auto& s : gen_task_eval(rc.task, rc.task.lengths().front())) {
      heldout.insert(heldout.end(), s.tokens.begin(), s.tokens.end());
    }
  }
  save_corpus(train, static_cast<std::uint32_t>(kByteVocab), train_path);
  save_corpus(heldout, static_cast<std::uint32_t>(kByteVocab), heldout_path);
  m.corpora[train_path] = file_hash(train_path);
  m.corpora[heldout_path] = file_hash(heldout_path);
  finish(m, nullptr);
  return 0;
}

int cmd_train_teacher(const Options& o) {
  RunConfig rc = read_config(o);
  rc.train.stage = Stage::teacher;
  RunManifest m = base_manifest("train-teacher", rc, o.out);
  const auto corpus =
      corpus_tokens(pick(o.corpus, rc.train.corpus_path, "corpus"), rc.model.vocab_size, m);
  DecoderModel teacher = build_teacher(rc.model);
  TrainRun run = run_training(o, o.out, teacher, [&](DecoderModel& t, auto obs, TrainRun r) {
    return train_teacher(t, corpus, rc.train, obs, std::move(r));
  });
  save_checkpoint(teacher, o.out);
  m.metrics_path = metrics_path(o.out);
  finish(m, &run);
  return 0;
}

int cmd_align(const Options& o) {
  RunConfig rc = read_config(o);
  rc.train.stage = Stage::align;
  RunManifest m = base_manifest("align", rc, o.out);
  DecoderModel teacher = load_input(pick(o.teacher, rc.train.teacher_path, "teacher"), "teacher", m);
  const auto corpus =
      corpus_tokens(pick(o.corpus, rc.train.corpus_path, "corpus"), teacher.config.vocab_size, m);
  teacher.config.gate_mode = rc.model.gate_mode;
  teacher.config.a_range = rc.model.a_range;
  teacher.config.norm_mode = rc.model.norm_mode;
  DecoderModel wrapped = wrap_for_alignment(teacher, rc.train.combine_mode);
  TrainRun run = run_training(o, o.out, wrapped, [&](DecoderModel& w, auto obs, TrainRun r) {
    return stage1_align(w, corpus, rc.train, obs, std::move(r));
  });
  save_checkpoint(unwrap_student(wrapped), o.out);
  m.metrics_path = metrics_path(o.out);
  m.results["final_loss"] = run.curve.empty() ? 0.0 : run.curve.back().loss;
  finish(m, &run);
  return 0;
}

int cmd_distill(const Options& o) {
  RunConfig rc = read_config(o);
  rc.train.stage = Stage::distill;
  if (!o.variant.empty()) rc.train.variant = o.variant;
  if (const VariantSpec* v = find_variant(rc.train.variant)) {
    rc.train.gate_mode = v->gate_mode;
    rc.train.freeze_mlp = v->freeze_mlp;
  }
  RunManifest m = base_manifest("distill", rc, o.out);
  const DecoderModel teacher =
      load_input(pick(o.teacher, rc.train.teacher_path, "teacher"), "teacher", m);
  DecoderModel student =
      load_input(pick(o.student, rc.train.student_path, "student"), "student", m);
  const auto corpus =
      corpus_tokens(pick(o.corpus, rc.train.corpus_path, "corpus"), teacher.config.vocab_size, m);
  TrainRun run = run_training(o, o.out, student, [&](DecoderModel& s, auto obs, TrainRun r) {
    return stage2_distill(teacher, s, corpus, rc.train, obs, std::move(r));
  });
  save_checkpoint(student, o.out);
  m.metrics_path = metrics_path(o.out);
  finish(m, &run);
  return 0;
}

int cmd_sft(const Options& o) {
  RunConfig rc = read_config(o);
  rc.train.stage = Stage::sft;
  RunManifest m = base_manifest("sft", rc, o.out);
  const std::string student_path = pick(o.student, rc.train.student_path, "student");
  DecoderModel student = load_input(student_path, "student", m);
  if (o.prior_seq_len) {
    rc.train.prior_seq_len = o.prior_seq_len;
  } else if (rc.train.prior_seq_len == 0) {
    rc.train.prior_seq_len = manifest_seq_len(student_path).value_or(0);
  }
  m.config = rc.to_json();
  const auto corpus =
      corpus_tokens(pick(o.corpus, rc.train.corpus_path, "corpus"), student.config.vocab_size, m);
  TrainRun run = run_training(o, o.out, student, [&](DecoderModel& s, auto obs, TrainRun r) {
    return stage3_sft(s, corpus, rc.train, obs, std::move(r));
  });
  save_checkpoint(student, o.out);
  m.metrics_path = metrics_path(o.out);
  finish(m, &run);
  return 0;
}

int cmd_eval(const Options& o) {
  RunConfig rc = read_config(o);
  RunManifest m = base_manifest("eval", rc, o.out);
  const DecoderModel model = load_input(pick(o.model, rc.train.student_path, "model"), "model", m);
  const std::size_t seq_len = rc.train.seq_len;
  if (!o.heldout.empty() || !rc.train.heldout_path.empty()) {
    const auto heldout = corpus_tokens(pick(o.heldout, rc.train.heldout_path, "heldout"),
                                       model.config.vocab_size, m);
    m.results["heldout_ppl"] = eval_perplexity(model, heldout, seq_len, o.max_windows);
    if (!o.teacher.empty()) {
      const DecoderModel teacher = load_input(o.teacher, "teacher", m);
      const auto cmp = compare_to_teacher(teacher, model, heldout, seq_len, o.max_windows);
      m.results["kl_to_teacher"] = cmp.kl;
      m.results["top1_agreement"] = cmp.agreement;
    }
  }
  if (rc.task.kind != TaskKind::char_lm) {
    const TaskAccuracy acc = eval_task_accuracy(model_predictor(model), rc.task);
    nlohmann::json per = nlohmann::json::object();
    for (const auto& [len, a] : acc.per_length) per[std::to_string(len)] = a;
    m.results["task"] = {{"kind", to_string(rc.task.kind)},
                         {"accuracy", acc.overall},
                         {"per_length", per},
                         {"dataset_seed", rc.task.seed}};
  }
  const std::string text = m.results.dump(2) + "\n";
  write_file(o.out, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  finish(m, nullptr);
  return 0;
}

int cmd_report(const Options& o) {
  RunConfig rc = read_config(o);
  RunManifest m = base_manifest("report", rc, o.out + ".json");
  std::vector<std::string> paths;
  std::stringstream ss(o.runs);
  for (std::string p; std::getline(ss, p, ',');) {
    if (!p.empty()) paths.push_back(p);
  }
  if (paths.empty()) throw UsageError("--runs needs at least one checkpoint");
  std::vector<DecoderModel> models;
  std::vector<ReportInput> inputs;
  models.reserve(paths.size());
  for (const auto& p : paths) {
    if (!fs::exists(p)) throw std::runtime_error("missing checkpoint " + p);
    models.push_back(load_input(p, p, m));
    ReportInput in;
    in.variant = fs::path(p).stem().string();
    if (fs::exists(manifest_path(p))) {
      const auto pm = read_manifest(manifest_path(p));
      if (!pm.variant.empty()) in.variant = pm.variant;
      in.tokens_seen = pm.tokens_seen;
    }
    in.checkpoint_hash = m.inputs[p];
    inputs.push_back(in);
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) inputs[i].model = &models[i];
  std::optional<DecoderModel> teacher;
  if (!o.teacher.empty()) teacher = load_input(o.teacher, "teacher", m);
  const std::string heldout_path = pick(o.heldout, rc.train.heldout_path, "heldout");
  const auto heldout = corpus_tokens(heldout_path, models.front().config.vocab_size, m);
  ReportSettings settings;
  settings.seq_len = rc.train.seq_len;
  settings.max_windows = o.max_windows;
  settings.dataset_seed = rc.task.seed;
  settings.dataset_hash = m.corpora[heldout_path];
  const EvalReport report = build_report(teacher ? &*teacher : nullptr,
                                         teacher ? m.inputs["teacher"] : std::string(), inputs,
                                         heldout, settings);
  const std::string json = report.to_json().dump(2) + "\n";
  const std::string text = report.to_text();
  write_file(o.out + ".json", std::span(reinterpret_cast<const std::uint8_t*>(json.data()), json.size()));
  write_file(o.out + ".txt", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  std::cout << text;
  finish(m, nullptr);
  return 0;
}

int cmd_inspect(const Options& o) {
  const CheckpointData data = decode_checkpoint(read_file(o.model));
  nlohmann::json params = nlohmann::json::array();
  std::size_t total = 0;
  for (const auto& p : data.params) {
    params.push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
    total += p.tensor.numel();
  }
  std::cout << nlohmann::json({{"config", to_json(data.config)},
                               {"parameters", params},
                               {"numel", total},
                               {"hash", file_hash(o.model)}})
                   .dump(2)
            << '\n';
  return 0;
}

void error_line(std::string_view kind, std::string_view message) {
  std::cerr << nlohmann::json({{"error", kind}, {"message", message}}).dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  try {
    init_precision_from_env();
  } catch (const std::exception& e) {
    error_line("config", e.what());
    return 1;
  }

  CLI::App app{"Attention-to-RWKV conversion toolkit"};
  app.require_subcommand(1);
  Options o;

  auto add_config = [&](CLI::App* c, bool required) {
    auto* opt = c->add_option("--config", o.config, "JSON config (model / train / task)");
    if (required) opt->required()->check(CLI::ExistingFile);
  };
  auto add_out = [&](CLI::App* c) { c->add_option("--out", o.out, "Output path")->required(); };
  auto add_training = [&](CLI::App* c) {
    c->add_option("--corpus", o.corpus, "Training corpus file");
    c->add_option("--resume", o.resume, "Continue from a saved training state")
        ->check(CLI::ExistingFile);
    c->add_option("--state-out", o.state_out, "Write the final training state here");
  };

  auto* gen = app.add_subcommand("gen-data", "Generate train / held-out corpora");
  add_config(gen, true);
  add_out(gen);

  auto* teacher = app.add_subcommand("train-teacher", "Train a GQA teacher");
  add_config(teacher, true);
  add_out(teacher);
  add_training(teacher);

  auto* align = app.add_subcommand("align", "Stage 1: align time mixers to teacher attention");
  add_config(align, true);
  add_out(align);
  align->add_option("--teacher", o.teacher, "Teacher checkpoint")->required();
  add_training(align);

  auto* distill = app.add_subcommand("distill", "Stage 2: word-level KL distillation");
  add_config(distill, true);
  add_out(distill);
  distill->add_option("--teacher", o.teacher, "Teacher checkpoint")->required();
  distill->add_option("--student", o.student, "Student checkpoint")->required();
  distill->add_option("--variant", o.variant, "ARWKV, ARWKV-M, ARWKV-G-M or ARWKV-from-larger");
  add_training(distill);

  auto* sft = app.add_subcommand("sft", "Stage 3: long-context fine-tuning");
  add_config(sft, true);
  add_out(sft);
  sft->add_option("--student", o.student, "Student checkpoint")->required();
  sft->add_option("--prior-seq-len", o.prior_seq_len, "Sequence length of the previous stage");
  add_training(sft);

  auto* eval = app.add_subcommand("eval", "Perplexity, teacher agreement and task accuracy");
  add_config(eval, false);
  add_out(eval);
  eval->add_option("--model", o.model, "Checkpoint to evaluate")->required();
  eval->add_option("--heldout", o.heldout, "Held-out corpus");
  eval->add_option("--teacher", o.teacher, "Teacher checkpoint for KL / agreement");
  eval->add_option("--max-windows", o.max_windows, "Cap on evaluation windows (0 = all)");

  auto* report = app.add_subcommand("report", "Ablation grid over distilled checkpoints");
  add_config(report, false);
  report->add_option("--runs", o.runs, "Comma-separated checkpoints")->required();
  report->add_option("--out", o.out, "Output prefix for .json / .txt")->default_val("report");
  report->add_option("--heldout", o.heldout, "Held-out corpus");
  report->add_option("--teacher", o.teacher, "Teacher checkpoint");
  report->add_option("--max-windows", o.max_windows, "Cap on evaluation windows (0 = all)");

  auto* inspect = app.add_subcommand("inspect", "Print a checkpoint's config and name table");
  inspect->add_option("checkpoint", o.model, "Checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n";
    const CLI::App* sub = nullptr;
    for (const auto* s : app.get_subcommands()) sub = s;
    std::cerr << (sub ? sub->help() : app.help());
    return 2;
  }

  try {
    if (*gen) return cmd_gen_data(o);
    if (*teacher) return cmd_train_teacher(o);
    if (*align) return cmd_align(o);
    if (*distill) return cmd_distill(o);
    if (*sft) return cmd_sft(o);
    if (*eval) return cmd_eval(o);
    if (*report) return cmd_report(o);
    if (*inspect) return cmd_inspect(o);
  } catch (const UsageError& e) {
    error_line("usage", e.what());
    return 2;
  } catch (const ConfigError& e) {
    error_line("config", e.what());
    return 1;
  } catch (const CheckpointError& e) {
    error_line(to_string(e.kind()), e.what());
    return 1;
  } catch (const std::exception& e) {
    error_line("runtime", e.what());
    return 1;
  }
  return 1;
}
