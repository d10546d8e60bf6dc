#include "arwkv/io.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <sstream>

namespace arwkv {

namespace {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

constexpr char kCheckpointMagic[4] = {'A', 'R', 'W', 'K'};
constexpr char kCorpusMagic[4] = {'A', 'R', 'W', 'C'};
constexpr char kStateMagic[4] = {'A', 'R', 'W', 'S'};
constexpr std::uint32_t kStateVersion = 1;

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    out.insert(out.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out.insert(out.end(), p, p + n);
  }
  void put_string(std::string_view s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, CheckpointErrorKind short_kind)
      : bytes_(bytes), short_kind_(short_kind) {}

  template <typename T>
  T get(const char* what) {
    T v;
    std::memcpy(&v, take(sizeof(T), what).data(), sizeof(T));
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (n > bytes_.size() - pos_) {
      throw CheckpointError(short_kind_, std::string("file ends inside ") + what);
    }
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::string get_string(const char* what) {
    const auto n = get<std::uint32_t>(what);
    auto s = take(n, what);
    return {reinterpret_cast<const char*>(s.data()), s.size()};
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  CheckpointErrorKind short_kind_;
};

void check_magic(Reader& r, const char (&magic)[4], const char* what) {
  auto m = r.take(4, "magic");
  if (std::memcmp(m.data(), magic, 4) != 0) {
    throw CheckpointError(CheckpointErrorKind::bad_magic, std::string("not a ") + what + " file");
  }
}

// ---- strict JSON field binding ---------------------------------------------

template <typename T>
T field_as(const Json& v, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(key, "expected a boolean");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(key, "expected a string");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(key, "expected a number");
    } else {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
        throw ConfigError(key, "expected a non-negative integer");
      }
    }
    return v.get<T>();
  } catch (const Json::exception& e) {
    throw ConfigError(key, e.what());
  }
}

std::string message_of(const ConfigError& e) {
  std::string_view w = e.what();
  const std::string prefix = e.field() + ": ";
  if (w.starts_with(prefix)) w.remove_prefix(prefix.size());
  return std::string(w);
}

using Binder = std::map<std::string, std::function<void(const Json&)>>;

template <typename T>
void bind_field(Binder& b, const std::string& key, T& slot) {
  b[key] = [&slot, key](const Json& v) { slot = field_as<T>(v, key); };
}

template <typename E, typename Parse>
void bind_enum(Binder& b, const std::string& key, E& slot, Parse parse) {
  b[key] = [&slot, key, parse](const Json& v) {
    const auto s = field_as<std::string>(v, key);
    try {
      slot = parse(s);
    } catch (const ConfigError& e) {
      throw ConfigError(key, message_of(e));
    }
  };
}

void apply(const Binder& b, const Json& j, const std::string& section) {
  if (!j.is_object()) throw ConfigError(section, "expected an object");
  for (const auto& [key, value] : j.items()) {
    auto it = b.find(key);
    if (it == b.end()) {
      const std::string name = section.empty() ? key : section + "." + key;
      throw ConfigError(name, "unknown key '" + key + "'");
    }
    it->second(value);
  }
}

Binder model_binder(ModelConfig& c) {
  Binder b;
  bind_field(b, "vocab_size", c.vocab_size);
  bind_field(b, "d_model", c.d_model);
  bind_field(b, "n_layers", c.n_layers);
  bind_field(b, "n_heads", c.n_heads);
  bind_field(b, "n_kv_heads", c.n_kv_heads);
  bind_field(b, "head_dim", c.head_dim);
  bind_field(b, "d_ffn", c.d_ffn);
  bind_field(b, "max_seq_len", c.max_seq_len);
  bind_field(b, "rope_theta", c.rope_theta);
  bind_enum(b, "attention_kind", c.attention_kind, parse_attention_kind);
  bind_enum(b, "gate_mode", c.gate_mode, parse_gate_mode);
  bind_enum(b, "a_range", c.a_range, parse_a_range);
  bind_enum(b, "norm_mode", c.norm_mode, parse_norm_mode);
  bind_enum(b, "combine_mode", c.combine_mode, parse_combine_mode);
  bind_field(b, "seed", c.seed);
  return b;
}

Binder train_binder(TrainConfig& c) {
  Binder b;
  bind_enum(b, "stage", c.stage, parse_stage);
  bind_field(b, "lr", c.lr);
  bind_field(b, "beta1", c.beta1);
  bind_field(b, "beta2", c.beta2);
  bind_field(b, "eps", c.eps);
  bind_field(b, "weight_decay", c.weight_decay);
  bind_field(b, "batch_size", c.batch_size);
  bind_field(b, "seq_len", c.seq_len);
  bind_field(b, "max_steps", c.max_steps);
  bind_field(b, "log_every", c.log_every);
  bind_field(b, "freeze_mlp", c.freeze_mlp);
  b["gate_mode"] = [&c](const Json& v) {
    if (v.is_null()) {
      c.gate_mode.reset();
      return;
    }
    const auto s = field_as<std::string>(v, "gate_mode");
    try {
      c.gate_mode = parse_gate_mode(s);
    } catch (const ConfigError& e) {
      throw ConfigError("gate_mode", message_of(e));
    }
  };
  bind_field(b, "teacher_path", c.teacher_path);
  bind_field(b, "student_path", c.student_path);
  bind_field(b, "corpus_path", c.corpus_path);
  bind_field(b, "heldout_path", c.heldout_path);
  bind_field(b, "seed", c.seed);
  bind_field(b, "kl_direction", c.kl_direction);
  bind_enum(b, "combine_mode", c.combine_mode, parse_combine_mode);
  bind_enum(b, "align_target", c.align_target, parse_align_target);
  bind_field(b, "layerwise", c.layerwise);
  bind_enum(b, "init_mode", c.init_mode, parse_init_mode);
  bind_field(b, "variant", c.variant);
  bind_field(b, "prior_seq_len", c.prior_seq_len);
  return b;
}

Binder task_binder(TaskSpec& c) {
  Binder b;
  bind_enum(b, "kind", c.kind, parse_task_kind);
  bind_field(b, "seq_len_train", c.seq_len_train);
  bind_field(b, "seq_len_eval", c.seq_len_eval);
  b["eval_lengths"] = [&c](const Json& v) {
    if (!v.is_array()) throw ConfigError("eval_lengths", "expected an array of integers");
    c.eval_lengths.clear();
    for (const auto& e : v) c.eval_lengths.push_back(field_as<std::size_t>(e, "eval_lengths"));
  };
  bind_field(b, "seed", c.seed);
  bind_field(b, "n_train", c.n_train);
  bind_field(b, "n_eval", c.n_eval);
  bind_field(b, "passkey_digits", c.passkey_digits);
  return b;
}

}  // namespace

std::string_view to_string(CheckpointErrorKind k) {
  switch (k) {
    case CheckpointErrorKind::io: return "io";
    case CheckpointErrorKind::bad_magic: return "bad_magic";
    case CheckpointErrorKind::unsupported_version: return "unsupported_version";
    case CheckpointErrorKind::truncated: return "truncated";
    case CheckpointErrorKind::checksum_mismatch: return "checksum_mismatch";
    case CheckpointErrorKind::shape_mismatch: return "shape_mismatch";
    case CheckpointErrorKind::unknown_parameter: return "unknown_parameter";
    case CheckpointErrorKind::missing_parameter: return "missing_parameter";
    case CheckpointErrorKind::bad_config: return "bad_config";
  }
  return "?";
}

// ---- configuration ----------------------------------------------------------

Json to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},
          {"d_model", c.d_model},
          {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},
          {"n_kv_heads", c.n_kv_heads},
          {"head_dim", c.head_dim},
          {"d_ffn", c.d_ffn},
          {"max_seq_len", c.max_seq_len},
          {"rope_theta", c.rope_theta},
          {"attention_kind", to_string(c.attention_kind)},
          {"gate_mode", to_string(c.gate_mode)},
          {"a_range", to_string(c.a_range)},
          {"norm_mode", to_string(c.norm_mode)},
          {"combine_mode", to_string(c.combine_mode)},
          {"seed", c.seed}};
}

Json to_json(const TrainConfig& c) {
  return {{"stage", to_string(c.stage)},
          {"lr", c.lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"seq_len", c.seq_len},
          {"max_steps", c.max_steps},
          {"log_every", c.log_every},
          {"freeze_mlp", c.freeze_mlp},
          {"gate_mode", c.gate_mode ? Json(to_string(*c.gate_mode)) : Json(nullptr)},
          {"teacher_path", c.teacher_path},
          {"student_path", c.student_path},
          {"corpus_path", c.corpus_path},
          {"heldout_path", c.heldout_path},
          {"seed", c.seed},
          {"kl_direction", c.kl_direction},
          {"combine_mode", to_string(c.combine_mode)},
          {"align_target", to_string(c.align_target)},
          {"layerwise", c.layerwise},
          {"init_mode", to_string(c.init_mode)},
          {"variant", c.variant},
          {"prior_seq_len", c.prior_seq_len}};
}

Json to_json(const TaskSpec& c) {
  return {{"kind", to_string(c.kind)},
          {"seq_len_train", c.seq_len_train},
          {"seq_len_eval", c.seq_len_eval},
          {"eval_lengths", c.eval_lengths},
          {"seed", c.seed},
          {"n_train", c.n_train},
          {"n_eval", c.n_eval},
          {"passkey_digits", c.passkey_digits}};
}

namespace {

/// Reads one section; errors name the field as "section.field".
template <typename C, typename MakeBinder>
C read_section(const Json& j, const std::string& section, MakeBinder make_binder) {
  C c;
  try {
    apply(make_binder(c), j, section);
    c.validate();
  } catch (const ConfigError& e) {
    if (e.field() == section || e.field().starts_with(section + ".")) throw;
    throw ConfigError(section + "." + e.field(), message_of(e));
  }
  return c;
}

}  // namespace

ModelConfig model_config_from_json(const Json& j) {
  return read_section<ModelConfig>(j, "model", model_binder);
}

TrainConfig train_config_from_json(const Json& j) {
  return read_section<TrainConfig>(j, "train", train_binder);
}

TaskSpec task_spec_from_json(const Json& j) {
  return read_section<TaskSpec>(j, "task", task_binder);
}

Json RunConfig::to_json() const {
  return {{"model", arwkv::to_json(model)},
          {"train", arwkv::to_json(train)},
          {"task", arwkv::to_json(task)}};
}

RunConfig parse_config(const Json& j) {
  if (!j.is_object()) throw ConfigError("config", "expected a JSON object");
  RunConfig rc;
  for (const auto& [key, value] : j.items()) {
    if (key == "model") {
      rc.model = model_config_from_json(value);
    } else if (key == "train") {
      rc.train = train_config_from_json(value);
    } else if (key == "task") {
      rc.task = task_spec_from_json(value);
    } else {
      throw ConfigError(key, "unknown key '" + key + "' (expected model, train, task)");
    }
  }
  const auto kind = rc.model.attention_kind;
  if ((kind == AttentionKind::gqa || kind == AttentionKind::wrapper) &&
      rc.train.seq_len > rc.model.max_seq_len) {
    throw ConfigError("train.seq_len", "exceeds model.max_seq_len " +
                                           std::to_string(rc.model.max_seq_len) +
                                           " for an attention model");
  }
  return rc;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot open " + path);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError("config", std::string("invalid JSON: ") + e.what());
  }
  return parse_config(j);
}

// ---- checkpoints ------------------------------------------------------------

std::vector<std::uint8_t> encode_checkpoint(const CheckpointData& data) {
  Writer w;
  w.put_bytes(kCheckpointMagic, 4);
  w.put(kCheckpointVersion);
  w.put_string(to_json(data.config).dump());
  w.put(static_cast<std::uint64_t>(data.params.size()));
  for (const auto& p : data.params) {
    w.put_string(p.name);
    const auto& shape = p.tensor.shape();
    w.put(static_cast<std::uint32_t>(shape.size()));
    for (auto e : shape) w.put(static_cast<std::uint64_t>(e));
  }
  Writer payload;
  for (const auto& p : data.params) {
    for (double v : p.tensor.values()) payload.put(static_cast<float>(v));
  }
  w.put_bytes(payload.out.data(), payload.out.size());
  w.put(fnv1a(payload.out));
  return w.out;
}

CheckpointData decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, CheckpointErrorKind::truncated);
  check_magic(r, kCheckpointMagic, "checkpoint");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointErrorKind::unsupported_version,
                          "checkpoint version " + std::to_string(version) + " (supported: " +
                              std::to_string(kCheckpointVersion) + ")");
  }
  CheckpointData data;
  const std::string config_text = r.get_string("config block");
  try {
    data.config = model_config_from_json(Json::parse(config_text));
  } catch (const std::exception& e) {
    throw CheckpointError(CheckpointErrorKind::bad_config, e.what());
  }
  const auto count = r.get<std::uint64_t>("parameter count");
  std::vector<std::pair<std::string, Shape>> table;
  std::size_t total = 0;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.get_string("name table");
    const auto ndim = r.get<std::uint32_t>("name table");
    Shape shape;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>("name table")));
    }
    total += shape_numel(shape);
    table.emplace_back(std::move(name), std::move(shape));
  }
  const std::size_t payload_bytes = total * sizeof(float);
  if (r.remaining() < payload_bytes + sizeof(std::uint64_t)) {
    throw CheckpointError(CheckpointErrorKind::truncated,
                          "payload needs " + std::to_string(payload_bytes + 8) + " bytes, " +
                              std::to_string(r.remaining()) + " present");
  }
  const auto payload = r.take(payload_bytes, "payload");
  const auto stored = r.get<std::uint64_t>("checksum");
  if (r.remaining() != 0) {
    throw CheckpointError(CheckpointErrorKind::truncated,
                          std::to_string(r.remaining()) + " unexpected trailing bytes");
  }
  if (fnv1a(payload) != stored) {
    throw CheckpointError(CheckpointErrorKind::checksum_mismatch, "payload checksum differs");
  }
  std::size_t offset = 0;
  for (auto& [name, shape] : table) {
    std::vector<double> values(shape_numel(shape));
    for (auto& v : values) {
      float f;
      std::memcpy(&f, payload.data() + offset, sizeof(float));
      offset += sizeof(float);
      v = f;
    }
    data.params.push_back({name, Tensor::from_values(shape, std::move(values), true)});
  }
  return data;
}

std::vector<std::uint8_t> checkpoint_bytes(const DecoderModel& model) {
  return encode_checkpoint({model.config, model.parameters()});
}

DecoderModel model_from_checkpoint(std::span<const std::uint8_t> bytes) {
  CheckpointData data = decode_checkpoint(bytes);
  DecoderModel model = build_model(data.config);
  std::map<std::string, const Tensor*> stored;
  for (const auto& p : data.params) stored[p.name] = &p.tensor;
  const auto params = model.parameters();
  for (const auto& p : params) {
    auto it = stored.find(p.name);
    if (it == stored.end()) {
      throw CheckpointError(CheckpointErrorKind::missing_parameter, p.name);
    }
    if (it->second->shape() != p.tensor.shape()) {
      throw CheckpointError(CheckpointErrorKind::shape_mismatch,
                            p.name + " stored as " + shape_str(it->second->shape()) +
                                ", model expects " + shape_str(p.tensor.shape()));
    }
    Tensor t = p.tensor;
    auto dst = t.mutable_values();
    const auto src = it->second->values();
    std::copy(src.begin(), src.end(), dst.begin());
    stored.erase(it);
  }
  if (!stored.empty()) {
    throw CheckpointError(CheckpointErrorKind::unknown_parameter, stored.begin()->first);
  }
  return model;
}

void save_checkpoint(const DecoderModel& model, const std::string& path) {
  write_file(path, checkpoint_bytes(model));
}

DecoderModel load_checkpoint(const std::string& path) {
  return model_from_checkpoint(read_file(path));
}

// ---- corpus files -----------------------------------------------------------

void save_corpus(std::span<const std::int32_t> tokens, std::uint32_t vocab_size,
                 const std::string& path) {
  Writer w;
  w.put_bytes(kCorpusMagic, 4);
  w.put(kCorpusVersion);
  w.put(vocab_size);
  w.put(static_cast<std::uint64_t>(tokens.size()));
  for (auto t : tokens) {
    if (t < 0 || static_cast<std::uint32_t>(t) >= vocab_size) {
      throw std::out_of_range("save_corpus: token " + std::to_string(t) + " outside vocab " +
                              std::to_string(vocab_size));
    }
    w.put(static_cast<std::uint32_t>(t));
  }
  write_file(path, w.out);
}

CorpusFile load_corpus(const std::string& path) {
  const auto bytes = read_file(path);
  Reader r(bytes, CheckpointErrorKind::truncated);
  check_magic(r, kCorpusMagic, "corpus");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCorpusVersion) {
    throw CheckpointError(CheckpointErrorKind::unsupported_version,
                          "corpus version " + std::to_string(version));
  }
  CorpusFile c;
  c.vocab_size = r.get<std::uint32_t>("vocab size");
  const auto count = r.get<std::uint64_t>("count");
  if (r.remaining() != count * sizeof(std::uint32_t)) {
    throw CheckpointError(CheckpointErrorKind::truncated,
                          "corpus declares " + std::to_string(count) + " tokens");
  }
  c.tokens.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto t = r.get<std::uint32_t>("tokens");
    if (t >= c.vocab_size) {
      throw std::out_of_range("load_corpus: token " + std::to_string(t) + " outside vocab");
    }
    c.tokens.push_back(static_cast<std::int32_t>(t));
  }
  return c;
}

// ---- hashing and files ------------------------------------------------------

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointErrorKind::io, "cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(CheckpointErrorKind::io, "cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError(CheckpointErrorKind::io, "short write to " + path);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(CheckpointErrorKind::io, "cannot replace " + path);
}

std::string git_blob_sha1(std::span<const std::uint8_t> bytes) {
  const std::string header = "blob " + std::to_string(bytes.size()) + '\0';
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  const bool ok = ctx && EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) &&
                  EVP_DigestUpdate(ctx, header.data(), header.size()) &&
                  EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) &&
                  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  if (!ok) throw std::runtime_error("git_blob_sha1: digest failed");
  std::ostringstream os;
  for (unsigned i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return os.str();
}

std::string file_hash(const std::string& path) { return git_blob_sha1(read_file(path)); }

// ---- run records ------------------------------------------------------------

Json RunManifest::to_json() const {
  return {{"stage", stage},
          {"variant", variant},
          {"config", config},
          {"inputs", inputs},
          {"corpora", corpora},
          {"output_path", output_path},
          {"output_hash", output_hash},
          {"seed", seed},
          {"step", step},
          {"tokens_seen", tokens_seen},
          {"metrics_path", metrics_path},
          {"results", results}};
}

RunManifest RunManifest::from_json(const Json& j) {
  RunManifest m;
  m.stage = j.at("stage").get<std::string>();
  m.variant = j.value("variant", std::string());
  m.config = j.at("config");
  m.inputs = j.value("inputs", std::map<std::string, std::string>());
  m.corpora = j.value("corpora", std::map<std::string, std::string>());
  m.output_path = j.value("output_path", std::string());
  m.output_hash = j.value("output_hash", std::string());
  m.seed = j.value("seed", std::uint64_t{0});
  m.step = j.value("step", std::size_t{0});
  m.tokens_seen = j.value("tokens_seen", std::size_t{0});
  m.metrics_path = j.value("metrics_path", std::string());
  m.results = j.value("results", Json::object());
  return m;
}

void write_manifest(const RunManifest& m, const std::string& path) {
  const std::string text = m.to_json().dump(2) + "\n";
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

RunManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError(CheckpointErrorKind::io, "cannot open " + path);
  return RunManifest::from_json(Json::parse(in));
}

MetricsWriter::MetricsWriter(const std::string& path, bool append)
    : path_(path), out_(path, append ? std::ios::app : std::ios::trunc) {
  if (!out_) throw CheckpointError(CheckpointErrorKind::io, "cannot open " + path);
}

void MetricsWriter::write(const Json& object) {
  out_ << object.dump() << '\n';
  out_.flush();
  if (!out_) throw CheckpointError(CheckpointErrorKind::io, "write failed on " + path_);
}

void MetricsWriter::write(const StepRecord& r) { write(to_json(r)); }

Json to_json(const StepRecord& r) {
  return {{"step", r.step},         {"loss", r.loss},   {"tokens_seen", r.tokens_seen},
          {"wall_ms", r.wall_ms},   {"stage", r.stage}, {"variant", r.variant}};
}

void emit_metrics(const TrainRun& run, std::size_t log_every, const std::string& path,
                  bool append) {
  if (log_every == 0) throw std::invalid_argument("emit_metrics: log_every must be positive");
  MetricsWriter w(path, append);
  const std::size_t per_step = run.step ? run.tokens_seen / run.step : 0;
  for (std::size_t i = 0; i < run.curve.size(); ++i) {
    const auto& pt = run.curve[i];
    if (pt.step % log_every != 0) continue;
    w.write(StepRecord{pt.step, pt.loss, per_step * pt.step,
                       i < run.wall_ms.size() ? run.wall_ms[i] : 0.0, run.stage, run.variant});
  }
}

// ---- resumable training state -----------------------------------------------

void save_train_state(const DecoderModel& model, const TrainRun& run, const std::string& path) {
  Json params = Json::object();
  for (const auto& p : model.parameters()) {
    params[p.name] = std::vector<double>(p.tensor.values().begin(), p.tensor.values().end());
  }
  Json moments = Json::object();
  for (const auto& [name, slot] : run.moments) moments[name] = {{"m", slot.m}, {"v", slot.v}};
  Json curve = Json::array();
  for (const auto& pt : run.curve) curve.push_back({pt.step, pt.loss});
  const Json state = {{"config", to_json(model.config)},
                      {"params", params},
                      {"stage", run.stage},
                      {"variant", run.variant},
                      {"seed", run.seed},
                      {"step", run.step},
                      {"tokens_seen", run.tokens_seen},
                      {"moments", moments},
                      {"curve", curve},
                      {"wall_ms", run.wall_ms}};
  Writer w;
  w.put_bytes(kStateMagic, 4);
  w.put(kStateVersion);
  const auto body = Json::to_cbor(state);
  w.put_bytes(body.data(), body.size());
  write_file(path, w.out);
}

TrainState load_train_state(const std::string& path) {
  const auto bytes = read_file(path);
  Reader r(bytes, CheckpointErrorKind::truncated);
  check_magic(r, kStateMagic, "training state");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kStateVersion) {
    throw CheckpointError(CheckpointErrorKind::unsupported_version,
                          "state version " + std::to_string(version));
  }
  Json state;
  try {
    state = Json::from_cbor(r.take(r.remaining(), "state body"));
  } catch (const Json::exception& e) {
    throw CheckpointError(CheckpointErrorKind::truncated, e.what());
  }
  TrainState out{build_model(model_config_from_json(state.at("config"))), {}};
  const auto& params = state.at("params");
  for (const auto& p : out.model.parameters()) {
    if (!params.contains(p.name)) {
      throw CheckpointError(CheckpointErrorKind::missing_parameter, p.name);
    }
    const auto values = params.at(p.name).get<std::vector<double>>();
    if (values.size() != p.tensor.numel()) {
      throw CheckpointError(CheckpointErrorKind::shape_mismatch, p.name);
    }
    Tensor t = p.tensor;
    std::copy(values.begin(), values.end(), t.mutable_values().begin());
  }
  TrainRun& run = out.run;
  run.stage = state.at("stage").get<std::string>();
  run.variant = state.at("variant").get<std::string>();
  run.seed = state.at("seed").get<std::uint64_t>();
  run.step = state.at("step").get<std::size_t>();
  run.tokens_seen = state.at("tokens_seen").get<std::size_t>();
  for (const auto& [name, slot] : state.at("moments").items()) {
    run.moments[name] = {slot.at("m").get<std::vector<double>>(),
                         slot.at("v").get<std::vector<double>>()};
  }
  for (const auto& pt : state.at("curve")) {
    run.curve.push_back({pt.at(0).get<std::size_t>(), pt.at(1).get<double>()});
  }
  run.wall_ms = state.at("wall_ms").get<std::vector<double>>();
  return out;
}

}  // namespace arwkv
