#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "json.hpp"
#include "plab/core/error.hpp"
#include "plab/harness/corpus.hpp"
#include "plab/metrics/repmetrics.hpp"
#include "plab/models/checkpoint.hpp"
#include "plab/objdist/objdist.hpp"
#include "plab/stats/stats.hpp"
#include "plab/trainer/trainer.hpp"

namespace plab {

inline constexpr const char* kVersion = "0.1.0";
inline constexpr int kRecordSchemaVersion = 2;

struct NamedModel {
  std::string name;
  ModelConfig config;
};

struct CorpusSpec {
  CorpusKind kind = CorpusKind::zipf_synthetic;
  std::size_t size = 4000;
  std::uint64_t seed = 1;
  std::string path;  // byte-text source, or a pre-generated corpus file
  ZipfOptions zipf;
};

struct ProbeSpec {
  std::size_t count = 290;
  std::uint64_t seed = 2;
};

struct PretrainSpec {
  std::size_t steps = 3000;
  double lr = 1e-3;
  std::size_t batch_size = 32;
};

struct FinetuneSpec {
  std::size_t steps = 200;
  std::size_t batch_size = 32;
  bool dropout = true;
  ConditionConfig condition;  // kind is overridden per cell
};

struct ScheduleSpec {
  std::size_t batches = 64;
  std::size_t batch_size = 8;
};

struct ExperimentSpec {
  std::string name = "experiment";
  std::vector<NamedModel> models;
  std::vector<ObjectiveKind> objectives;
  std::vector<ConditionKind> conditions{ConditionKind::standard};
  std::vector<std::uint64_t> seeds{0};
  CorpusSpec corpus;
  ProbeSpec probes;
  std::vector<double> depths = default_depths();
  std::vector<MetricKind> metrics{MetricKind::procrustes, MetricKind::cka, MetricKind::rsa};
  PretrainSpec pretrain;
  FinetuneSpec finetune;
  ScheduleSpec schedule;
  ObjectiveSettings settings;
  std::string output_dir = "plab_out";

  void validate() const {
    if (models.empty()) throw ConfigError("spec has no models");
    if (objectives.empty()) throw ConfigError("spec has no objectives");
    if (conditions.empty()) throw ConfigError("spec has no conditions");
    if (seeds.empty()) throw ConfigError("spec has no seeds");
    for (const auto& m : models) {
      m.config.validate();
      for (ObjectiveKind k : objectives) check_compatible(k, m.config);
    }
    for (std::size_t i = 0; i < depths.size(); ++i) {
      if (!(depths[i] > 0.0 && depths[i] <= 1.0)) throw ConfigError("depths must lie in (0, 1]");
      if (i > 0 && !(depths[i] > depths[i - 1])) throw ConfigError("depths must be strictly increasing");
    }
    if (pretrain.batch_size == 0 || finetune.batch_size == 0) throw ConfigError("batch sizes must be positive");
    finetune.condition.validate();
  }

  [[nodiscard]] const NamedModel& model(const std::string& name) const {
    for (const auto& m : models) {
      if (m.name == name) return m;
    }
    throw ConfigError("spec has no model named '" + name + "'");
  }
};

// ---- JSON -------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const ZipfOptions& z) {
  j = {{"vocab", z.vocab}, {"exponent", z.exponent}, {"min_len", z.min_len},
       {"max_len", z.max_len}, {"copy_prob", z.copy_prob}, {"max_lag", z.max_lag}};
}

inline void from_json(const nlohmann::json& j, ZipfOptions& z) {
  const ZipfOptions d;
  z.vocab = j.value("vocab", d.vocab);
  z.exponent = j.value("exponent", d.exponent);
  z.min_len = j.value("min_len", d.min_len);
  z.max_len = j.value("max_len", d.max_len);
  z.copy_prob = j.value("copy_prob", d.copy_prob);
  z.max_lag = j.value("max_lag", d.max_lag);
}

inline void to_json(nlohmann::json& j, const ConditionConfig& c) {
  j = {{"lr", c.lr},
       {"layer_decay", c.layer_decay},
       {"weight_decay", c.weight_decay},
       {"clip_norm", c.clip_norm},
       {"tau", c.trust.tau},
       {"trust_eps", c.trust.eps},
       {"lora", c.lora},
       {"micro_batches", c.micro_batches},
       {"freeze_embeddings_in_interior", c.freeze_embeddings_in_interior}};
}

inline void from_json(const nlohmann::json& j, ConditionConfig& c) {
  const ConditionConfig d;
  c.lr = j.value("lr", d.lr);
  c.layer_decay = j.value("layer_decay", d.layer_decay);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.clip_norm = j.value("clip_norm", d.clip_norm);
  c.trust.tau = j.value("tau", d.trust.tau);
  c.trust.eps = j.value("trust_eps", d.trust.eps);
  if (j.contains("lora")) c.lora = j.at("lora").get<LoRAConfig>();
  c.micro_batches = j.value("micro_batches", d.micro_batches);
  c.freeze_embeddings_in_interior = j.value("freeze_embeddings_in_interior", d.freeze_embeddings_in_interior);
}

inline void to_json(nlohmann::json& j, const ObjectiveSettings& s) {
  j = {{"mask_rate", s.mask_rate},
       {"span_p", s.span_p},
       {"temperature", s.temperature},
       {"barlow_lambda", s.barlow_lambda},
       {"bn_eps", s.bn_eps}};
  if (s.pooling) j["pooling"] = to_string(*s.pooling);
}

inline void from_json(const nlohmann::json& j, ObjectiveSettings& s) {
  const ObjectiveSettings d;
  s.mask_rate = j.value("mask_rate", d.mask_rate);
  s.span_p = j.value("span_p", d.span_p);
  s.temperature = j.value("temperature", d.temperature);
  s.barlow_lambda = j.value("barlow_lambda", d.barlow_lambda);
  s.bn_eps = j.value("bn_eps", d.bn_eps);
  if (j.contains("pooling")) {
    const auto p = j.at("pooling").get<std::string>();
    if (p == "mean") s.pooling = PoolMode::mean;
    else if (p == "last_token") s.pooling = PoolMode::last_token;
    else if (p == "cls") s.pooling = PoolMode::cls;
    else throw ConfigError("unknown pooling '" + p + "'");
  }
}

inline void to_json(nlohmann::json& j, const ExperimentSpec& s) {
  nlohmann::json models = nlohmann::json::array();
  for (const auto& m : s.models) models.push_back({{"name", m.name}, {"config", m.config}});
  std::vector<std::string> objectives, conditions, metrics;
  for (auto k : s.objectives) objectives.push_back(to_string(k));
  for (auto k : s.conditions) conditions.push_back(to_string(k));
  for (auto k : s.metrics) metrics.push_back(to_string(k));
  j = {{"name", s.name},
       {"models", models},
       {"objectives", objectives},
       {"conditions", conditions},
       {"seeds", s.seeds},
       {"corpus",
        {{"kind", to_string(s.corpus.kind)}, {"size", s.corpus.size}, {"seed", s.corpus.seed},
         {"path", s.corpus.path}, {"zipf", s.corpus.zipf}}},
       {"probes", {{"count", s.probes.count}, {"seed", s.probes.seed}}},
       {"depths", s.depths},
       {"metrics", metrics},
       {"pretrain", {{"steps", s.pretrain.steps}, {"lr", s.pretrain.lr}, {"batch_size", s.pretrain.batch_size}}},
       {"finetune",
        {{"steps", s.finetune.steps}, {"batch_size", s.finetune.batch_size}, {"dropout", s.finetune.dropout},
         {"condition", s.finetune.condition}}},
       {"schedule", {{"batches", s.schedule.batches}, {"batch_size", s.schedule.batch_size}}},
       {"settings", s.settings},
       {"output_dir", s.output_dir}};
}

inline void from_json(const nlohmann::json& j, ExperimentSpec& s) {
  const ExperimentSpec d;
  s.name = j.value("name", d.name);
  s.models.clear();
  for (const auto& m : j.at("models")) {
    NamedModel nm;
    nm.name = m.at("name").get<std::string>();
    nm.config = m.value("config", nlohmann::json::object()).get<ModelConfig>();
    s.models.push_back(std::move(nm));
  }
  s.objectives.clear();
  for (const auto& o : j.at("objectives")) s.objectives.push_back(parse_objective(o.get<std::string>()));
  if (j.contains("conditions")) {
    s.conditions.clear();
    for (const auto& c : j.at("conditions")) s.conditions.push_back(parse_condition(c.get<std::string>()));
  }
  s.seeds = j.value("seeds", d.seeds);
  if (j.contains("corpus")) {
    const auto& c = j.at("corpus");
    s.corpus.kind = parse_corpus_kind(c.value("kind", std::string("zipf-synthetic")));
    s.corpus.size = c.value("size", d.corpus.size);
    s.corpus.seed = c.value("seed", d.corpus.seed);
    s.corpus.path = c.value("path", std::string{});
    if (c.contains("zipf")) s.corpus.zipf = c.at("zipf").get<ZipfOptions>();
  }
  if (j.contains("probes")) {
    s.probes.count = j.at("probes").value("count", d.probes.count);
    s.probes.seed = j.at("probes").value("seed", d.probes.seed);
  }
  s.depths = j.value("depths", d.depths);
  if (j.contains("metrics")) {
    s.metrics.clear();
    for (const auto& m : j.at("metrics")) s.metrics.push_back(parse_metric(m.get<std::string>()));
  }
  if (j.contains("pretrain")) {
    const auto& p = j.at("pretrain");
    s.pretrain.steps = p.value("steps", d.pretrain.steps);
    s.pretrain.lr = p.value("lr", d.pretrain.lr);
    s.pretrain.batch_size = p.value("batch_size", d.pretrain.batch_size);
  }
  if (j.contains("finetune")) {
    const auto& f = j.at("finetune");
    s.finetune.steps = f.value("steps", d.finetune.steps);
    s.finetune.batch_size = f.value("batch_size", d.finetune.batch_size);
    s.finetune.dropout = f.value("dropout", d.finetune.dropout);
    if (f.contains("condition")) s.finetune.condition = f.at("condition").get<ConditionConfig>();
  }
  if (j.contains("schedule")) {
    s.schedule.batches = j.at("schedule").value("batches", d.schedule.batches);
    s.schedule.batch_size = j.at("schedule").value("batch_size", d.schedule.batch_size);
  }
  if (j.contains("settings")) s.settings = j.at("settings").get<ObjectiveSettings>();
  s.output_dir = j.value("output_dir", d.output_dir);
}

inline ExperimentSpec load_spec(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  ExperimentSpec s;
  try {
    s = j.get<ExperimentSpec>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  s.validate();
  return s;
}

/// Hash of everything that determines results (the output directory is excluded).
inline std::string spec_hash(const ExperimentSpec& s) {
  nlohmann::json j = s;
  j.erase("output_dir");
  return hex64(fnv1a(j.dump()));
}

// ---- Data -------------------------------------------------------------------

struct ExperimentData {
  std::vector<Sequence> train;
  std::vector<Sequence> probes;
  std::string corpus_hash;
  std::string probe_hash;
};

/// Training corpus plus a held-out probe set drawn from the same source.
inline ExperimentData load_data(const ExperimentSpec& spec) {
  ExperimentData d;
  if (spec.corpus.kind == CorpusKind::zipf_synthetic && spec.corpus.path.empty()) {
    d.train = generate_zipf_corpus(spec.corpus.size, spec.corpus.seed, spec.corpus.zipf);
    d.probes = generate_zipf_corpus(spec.probes.count, derive_seed(spec.corpus.seed, spec.probes.seed),
                                    spec.corpus.zipf);
  } else {
    std::vector<Sequence> all = spec.corpus.kind == CorpusKind::byte_text
                                    ? byte_corpus_from_text(read_text_file(spec.corpus.path))
                                    : read_corpus(spec.corpus.path);
    if (all.size() <= spec.probes.count) throw ConfigError("corpus too small to hold out the probe set");
    Rng rng(derive_seed(spec.corpus.seed, spec.probes.seed));
    rng.shuffle(all);
    d.probes.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(spec.probes.count));
    const std::size_t end = spec.corpus.size == 0 ? all.size()
                                                  : std::min(all.size(), spec.probes.count + spec.corpus.size);
    d.train.assign(all.begin() + static_cast<std::ptrdiff_t>(spec.probes.count),
                   all.begin() + static_cast<std::ptrdiff_t>(end));
  }
  std::size_t longest = 0;
  for (const auto& s : d.train) longest = std::max(longest, s.size());
  for (const auto& s : d.probes) longest = std::max(longest, s.size());
  for (const auto& m : spec.models) {
    if (longest > m.config.max_seq) throw ConfigError("corpus has sequences longer than max_seq of '" + m.name + "'");
  }
  d.corpus_hash = hex64(hash_sequences(d.train));
  d.probe_hash = hex64(hash_sequences(d.probes));
  return d;
}

// ---- Pretraining --------------------------------------------------------------

struct PretrainResult {
  Model model;
  std::size_t steps = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;
};

/// Trains a fresh model on its reference objective with a uniform learning rate.
inline PretrainResult pretrain(const ModelConfig& config, const std::vector<Sequence>& corpus, const PretrainSpec& spec,
                               std::uint64_t seed, const ObjectiveSettings& settings = {}) {
  PretrainResult r{Model::build(config, derive_seed(seed, 0x1417)), spec.steps, 0.0, 0.0};
  if (spec.steps == 0) return r;
  ConditionConfig cond;
  cond.kind = ConditionKind::uniform;
  cond.lr = spec.lr;
  TrainOptions opts;
  opts.steps = spec.steps;
  opts.batch_size = spec.batch_size;
  opts.seed = derive_seed(seed, 0x9e7);
  opts.settings = settings;
  const TrainResult tr = train(r.model, reference_objective(config), cond, corpus, opts);
  r.initial_loss = tr.losses.front().loss;
  // Mean over the last tenth of steps smooths out batch noise.
  const std::size_t tail = std::max<std::size_t>(1, tr.losses.size() / 10);
  double s = 0.0;
  for (std::size_t i = tr.losses.size() - tail; i < tr.losses.size(); ++i) s += tr.losses[i].loss;
  r.final_loss = s / static_cast<double>(tail);
  return r;
}

inline std::string pretrain_key(const ModelConfig& config, const PretrainSpec& spec, const std::string& corpus_hash,
                                std::uint64_t seed, const ObjectiveSettings& settings) {
  nlohmann::json j{{"config", config},
                   {"steps", spec.steps},
                   {"lr", spec.lr},
                   {"batch", spec.batch_size},
                   {"corpus", corpus_hash},
                   {"seed", seed},
                   {"settings", settings}};
  return hex64(fnv1a(j.dump()));
}

/// Loads a cached pretrained model from `dir` or trains and stores it there.
inline PretrainResult pretrain_cached(const std::string& dir, const ModelConfig& config,
                                      const std::vector<Sequence>& corpus, const std::string& corpus_hash,
                                      const PretrainSpec& spec, std::uint64_t seed,
                                      const ObjectiveSettings& settings = {}) {
  namespace fs = std::filesystem;
  const std::string key = pretrain_key(config, spec, corpus_hash, seed, settings);
  const fs::path ckpt = fs::path(dir) / ("pretrain-" + key + ".ckpt");
  const fs::path meta = fs::path(dir) / ("pretrain-" + key + ".meta.json");
  if (fs::exists(ckpt) && fs::exists(meta)) {
    std::ifstream ms(meta);
    const auto j = nlohmann::json::parse(ms);
    return PretrainResult{load_checkpoint(ckpt.string()), j.at("steps").get<std::size_t>(),
                          j.at("initial_loss").get<double>(), j.at("final_loss").get<double>()};
  }
  PretrainResult r = pretrain(config, corpus, spec, seed, settings);
  fs::create_directories(dir);
  save_checkpoint(r.model, ckpt.string());
  std::ofstream ms(meta);
  ms << nlohmann::json{{"steps", r.steps}, {"initial_loss", r.initial_loss}, {"final_loss", r.final_loss}}.dump(2)
     << '\n';
  return r;
}

// ---- Run records --------------------------------------------------------------

struct LossSummary {
  std::size_t steps = 0;
  double first = 0.0;
  double last = 0.0;
  double min = 0.0;
  double tail_mean = 0.0;
};

inline LossSummary summarize_losses(const std::vector<StepRecord>& losses) {
  LossSummary s;
  if (losses.empty()) return s;
  s.steps = losses.size();
  s.first = losses.front().loss;
  s.last = losses.back().loss;
  s.min = s.first;
  for (const auto& r : losses) s.min = std::min(s.min, r.loss);
  const std::size_t tail = std::max<std::size_t>(1, losses.size() / 10);
  for (std::size_t i = losses.size() - tail; i < losses.size(); ++i) s.tail_mean += losses[i].loss;
  s.tail_mean /= static_cast<double>(tail);
  return s;
}

struct RunRecord {
  std::string spec_hash;
  std::string model;
  ObjectiveKind objective = ObjectiveKind::CausalLM;
  ConditionKind condition = ConditionKind::standard;
  std::uint64_t seed = 0;
  std::string status = "ok";
  std::string error;
  std::string probe_hash;
  std::size_t probe_count = 0;
  std::size_t pretrain_steps = 0;
  double pretrain_final_loss = 0.0;
  LossSummary loss;
  std::map<MetricKind, DepthProfile> profiles;
  std::map<MetricKind, SlopeFit> slopes;
  std::optional<NormalizedProfile> normalized;  // from the CKA profile
  std::vector<RatioRecord> trust_trace;         // equal-step only
  double wall_time_s = 0.0;

  [[nodiscard]] std::string cell() const { return model + ":" + to_string(objective) + ":" + to_string(condition); }
  [[nodiscard]] bool ok() const { return status == "ok"; }
};

/// Deterministic part of a record: everything except wall time.
inline nlohmann::json record_payload(const RunRecord& r) {
  nlohmann::json profiles = nlohmann::json::object();
  for (const auto& [m, p] : r.profiles) profiles[to_string(m)] = {{"depths", p.depths}, {"values", p.values}};
  nlohmann::json slopes = nlohmann::json::object();
  for (const auto& [m, f] : r.slopes) {
    slopes[to_string(m)] = {{"alpha", f.alpha}, {"beta", f.beta}, {"residual_rms", f.residual_rms}};
  }
  nlohmann::json trace = nlohmann::json::array();
  for (const auto& t : r.trust_trace) trace.push_back({t.step, t.group, t.ratio, t.raw_ratio, t.direction_cos});
  return {{"schema", "plab.run_record"},
          {"schema_version", kRecordSchemaVersion},
          {"version", kVersion},
          {"spec_hash", r.spec_hash},
          {"model", r.model},
          {"objective", to_string(r.objective)},
          {"condition", to_string(r.condition)},
          {"seed", r.seed},
          {"status", r.status},
          {"error", r.error},
          {"probe_hash", r.probe_hash},
          {"probe_count", r.probe_count},
          {"pretrain", {{"steps", r.pretrain_steps}, {"final_loss", r.pretrain_final_loss}}},
          {"loss",
           {{"steps", r.loss.steps}, {"first", r.loss.first}, {"last", r.loss.last}, {"min", r.loss.min},
            {"tail_mean", r.loss.tail_mean}}},
          {"profiles", profiles},
          {"slopes", slopes},
          {"normalized_cka", r.normalized ? nlohmann::json(r.normalized->fractions) : nlohmann::json(nullptr)},
          {"trust_trace", trace}};
}

inline nlohmann::json record_json(const RunRecord& r) {
  return {{"payload", record_payload(r)}, {"wall_time_s", r.wall_time_s}};
}

inline RunRecord record_from_json(const nlohmann::json& j) {
  const nlohmann::json& p = j.contains("payload") ? j.at("payload") : j;
  if (p.value("schema", std::string{}) != "plab.run_record") throw IoError("not a run record");
  if (p.at("schema_version").get<int>() != kRecordSchemaVersion) throw IoError("unsupported run record version");
  RunRecord r;
  r.spec_hash = p.at("spec_hash").get<std::string>();
  r.model = p.at("model").get<std::string>();
  r.objective = parse_objective(p.at("objective").get<std::string>());
  r.condition = parse_condition(p.at("condition").get<std::string>());
  r.seed = p.at("seed").get<std::uint64_t>();
  r.status = p.at("status").get<std::string>();
  r.error = p.at("error").get<std::string>();
  r.probe_hash = p.at("probe_hash").get<std::string>();
  r.probe_count = p.at("probe_count").get<std::size_t>();
  r.pretrain_steps = p.at("pretrain").at("steps").get<std::size_t>();
  r.pretrain_final_loss = p.at("pretrain").at("final_loss").get<double>();
  const auto& l = p.at("loss");
  r.loss = LossSummary{l.at("steps").get<std::size_t>(), l.at("first").get<double>(), l.at("last").get<double>(),
                       l.at("min").get<double>(), l.at("tail_mean").get<double>()};
  for (const auto& [name, v] : p.at("profiles").items()) {
    DepthProfile dp;
    dp.metric = parse_metric(name);
    dp.depths = v.at("depths").get<std::vector<double>>();
    dp.values = v.at("values").get<std::vector<double>>();
    r.profiles.emplace(dp.metric, std::move(dp));
  }
  for (const auto& [name, v] : p.at("slopes").items()) {
    r.slopes.emplace(parse_metric(name), SlopeFit{v.at("alpha").get<double>(), v.at("beta").get<double>(),
                                                  v.at("residual_rms").get<double>()});
  }
  if (!p.at("normalized_cka").is_null()) {
    r.normalized = NormalizedProfile{p.at("normalized_cka").get<std::vector<double>>()};
  }
  for (const auto& t : p.at("trust_trace")) {
    r.trust_trace.push_back(
        {t.at(0).get<std::size_t>(), t.at(1).get<std::size_t>(), t.at(2).get<double>(), t.at(3).get<double>(),
         t.size() > 4 ? t.at(4).get<double>() : 1.0});
  }
  r.wall_time_s = j.value("wall_time_s", 0.0);
  return r;
}

inline std::string record_filename(const RunRecord& r) {
  return r.model + "__" + to_string(r.objective) + "__" + to_string(r.condition) + "__s" + std::to_string(r.seed) +
         ".json";
}

inline void write_record(const RunRecord& r, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const auto path = std::filesystem::path(dir) / record_filename(r);
  std::ofstream os(path);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  os << record_json(r).dump(2) << '\n';
}

inline std::vector<RunRecord> read_records(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("'" + dir + "' is not a directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<RunRecord> out;
  for (const auto& f : files) {
    std::ifstream is(f);
    const auto j = nlohmann::json::parse(is);
    const auto& p = j.contains("payload") ? j.at("payload") : j;
    if (p.value("schema", std::string{}) == "plab.run_record") out.push_back(record_from_json(j));
  }
  return out;
}

// ---- Cells ----------------------------------------------------------------------

struct CellSpec {
  std::string model;
  ObjectiveKind objective = ObjectiveKind::CausalLM;
  ConditionKind condition = ConditionKind::standard;
};

/// Parses MODEL:OBJ:COND.
inline CellSpec parse_cell(const std::string& text) {
  const auto a = text.find(':');
  const auto b = a == std::string::npos ? a : text.find(':', a + 1);
  if (a == std::string::npos || b == std::string::npos) throw ConfigError("cell must be MODEL:OBJ:COND, got '" + text + "'");
  return CellSpec{text.substr(0, a), parse_objective(text.substr(a + 1, b - a - 1)), parse_condition(text.substr(b + 1))};
}

struct CellOutput {
  RunRecord record;
  std::optional<Model> finetuned;
};

inline std::uint64_t finetune_seed(std::uint64_t seed, ObjectiveKind objective, ConditionKind condition) {
  return derive_seed(seed, fnv1a(to_string(objective)), fnv1a(to_string(condition)));
}

/// Fine-tunes one pretrained model for one (objective, condition, seed) and profiles the change.
inline CellOutput run_cell(const ExperimentSpec& spec, const ExperimentData& data, const PretrainResult& pre,
                           const CellSpec& cell, std::uint64_t seed, bool keep_model = false) {
  const auto start = std::chrono::steady_clock::now();
  CellOutput out;
  RunRecord& r = out.record;
  r.spec_hash = spec_hash(spec);
  r.model = cell.model;
  r.objective = cell.objective;
  r.condition = cell.condition;
  r.seed = seed;
  r.probe_hash = data.probe_hash;
  r.probe_count = data.probes.size();
  r.pretrain_steps = pre.steps;
  r.pretrain_final_loss = pre.final_loss;
  try {
    ConditionConfig cond = spec.finetune.condition;
    cond.kind = cell.condition;
    const std::uint64_t fs = finetune_seed(seed, cell.objective, cell.condition);
    Model m = prepare_condition(pre.model, cond, fs);
    TrainOptions opts;
    opts.steps = spec.finetune.steps;
    opts.batch_size = spec.finetune.batch_size;
    opts.seed = fs;
    opts.dropout = spec.finetune.dropout;
    opts.settings = spec.settings;
    const TrainResult tr = train(m, cell.objective, cond, data.train, opts);
    r.loss = summarize_losses(tr.losses);
    if (cell.condition == ConditionKind::equal_step) r.trust_trace = tr.ratios;
    r.profiles = profile_from_runs(pre.model, m, data.probes, spec.depths, spec.metrics);
    for (const auto& [metric, p] : r.profiles) r.slopes.emplace(metric, fit_locality_slope(p));
    auto cka = r.profiles.find(MetricKind::cka);
    if (cka != r.profiles.end()) {
      try {
        r.normalized = normalize_profile(cka->second);
      } catch (const Error&) {
        r.normalized.reset();  // all-zero change profile
      }
    }
    if (keep_model) out.finetuned = std::move(m);
  } catch (const std::exception& e) {
    r.status = "failed";
    r.error = e.what();
  }
  r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return out;
}

struct MatrixOptions {
  std::size_t jobs = 1;
  std::string cache_dir;  // empty: in-memory pretraining cache only
  std::optional<CellSpec> only_cell;
  std::optional<std::uint64_t> only_seed;
  bool keep_models = false;
};

struct MatrixResult {
  std::vector<RunRecord> records;
  std::vector<std::optional<Model>> finetuned;           // parallel to records when keep_models
  std::map<std::string, std::shared_ptr<const PretrainResult>> pretrained;  // key: model name + seed
};

inline std::string pretrained_name(const std::string& model, std::uint64_t seed) {
  return model + "@" + std::to_string(seed);
}

/// Runs every (model, objective, condition, seed) cell. Pretraining happens once
/// per (model config, seed); cells run on `jobs` worker threads and the result
/// order is the serial order regardless of scheduling.
inline MatrixResult run_matrix(const ExperimentSpec& spec, const ExperimentData& data, const MatrixOptions& opts = {}) {
  spec.validate();
  struct Task {
    CellSpec cell;
    std::uint64_t seed;
  };
  std::vector<Task> tasks;
  for (const auto& m : spec.models) {
    for (ObjectiveKind o : spec.objectives) {
      for (ConditionKind c : spec.conditions) {
        for (std::uint64_t s : spec.seeds) {
          if (opts.only_cell && (opts.only_cell->model != m.name || opts.only_cell->objective != o ||
                                 opts.only_cell->condition != c)) {
            continue;
          }
          if (opts.only_seed && *opts.only_seed != s) continue;
          tasks.push_back({CellSpec{m.name, o, c}, s});
        }
      }
    }
  }
  if (opts.only_cell && tasks.empty()) throw ConfigError("cell '" + opts.only_cell->model + ":" +
                                                         to_string(opts.only_cell->objective) + ":" +
                                                         to_string(opts.only_cell->condition) + "' is not in the spec");
  using Shared = std::shared_future<std::shared_ptr<const PretrainResult>>;
  std::mutex mu;
  std::map<std::string, Shared> cache;
  auto pretrained_for = [&](const std::string& model, std::uint64_t seed) {
    const std::string key = pretrained_name(model, seed);
    std::promise<std::shared_ptr<const PretrainResult>> promise;
    bool owner = false;
    Shared fut;
    {
      std::lock_guard<std::mutex> lock(mu);
      auto it = cache.find(key);
      if (it == cache.end()) {
        fut = promise.get_future().share();
        cache.emplace(key, fut);
        owner = true;
      } else {
        fut = it->second;
      }
    }
    if (owner) {
      try {
        const ModelConfig& cfg = spec.model(model).config;
        auto r = opts.cache_dir.empty()
                     ? pretrain(cfg, data.train, spec.pretrain, seed, spec.settings)
                     : pretrain_cached(opts.cache_dir, cfg, data.train, data.corpus_hash, spec.pretrain, seed,
                                       spec.settings);
        promise.set_value(std::make_shared<const PretrainResult>(std::move(r)));
      } catch (...) {
        promise.set_exception(std::current_exception());
      }
    }
    return fut.get();
  };

  MatrixResult result;
  result.records.resize(tasks.size());
  result.finetuned.resize(tasks.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < tasks.size(); i = next++) {
      const Task& t = tasks[i];
      try {
        const auto pre = pretrained_for(t.cell.model, t.seed);
        CellOutput out = run_cell(spec, data, *pre, t.cell, t.seed, opts.keep_models);
        result.records[i] = std::move(out.record);
        result.finetuned[i] = std::move(out.finetuned);
      } catch (const std::exception& e) {
        RunRecord r;
        r.spec_hash = spec_hash(spec);
        r.model = t.cell.model;
        r.objective = t.cell.objective;
        r.condition = t.cell.condition;
        r.seed = t.seed;
        r.probe_hash = data.probe_hash;
        r.probe_count = data.probes.size();
        r.status = "failed";
        r.error = std::string("pretraining failed: ") + e.what();
        result.records[i] = std::move(r);
      }
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(opts.jobs, tasks.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (auto& [key, fut] : cache) {
    try {
      result.pretrained.emplace(key, fut.get());
    } catch (const std::exception&) {
      // failure already recorded on the affected cells
    }
  }
  return result;
}

// ---- Probe swap -------------------------------------------------------------------

struct ProbeCheckCell {
  ObjectiveKind objective = ObjectiveKind::CausalLM;
  const Model* before = nullptr;
  const Model* after = nullptr;
};

struct ProbeCheckResult {
  double rho = 0.0;
  std::vector<double> slopes_original;
  std::vector<double> slopes_alternate;
};

/// Re-profiles fine-tuned models on an alternate probe set and correlates the
/// per-objective slopes with those from the original probes.
inline ProbeCheckResult second_probe_check(const std::vector<ProbeCheckCell>& cells,
                                           const std::vector<Sequence>& original,
                                           const std::vector<Sequence>& alternate,
                                           const std::vector<double>& depths = default_depths(),
                                           MetricKind metric = MetricKind::procrustes) {
  if (cells.size() < 3) throw ConfigError("probe check needs at least 3 objectives");
  ProbeCheckResult r;
  for (const auto& c : cells) {
    if (c.before == nullptr || c.after == nullptr) throw Error("probe check: missing model for " + to_string(c.objective));
    const auto a = profile_from_runs(*c.before, *c.after, original, depths, {metric});
    const auto b = profile_from_runs(*c.before, *c.after, alternate, depths, {metric});
    r.slopes_original.push_back(fit_locality_slope(a.at(metric)).alpha);
    r.slopes_alternate.push_back(fit_locality_slope(b.at(metric)).alpha);
  }
  r.rho = stats::spearman_rho(r.slopes_original, r.slopes_alternate);
  return r;
}

}  // namespace plab
