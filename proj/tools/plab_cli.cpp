#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <fmt/core.h>

#include "CLI11.hpp"
#include "plab/plab.hpp"

namespace fs = std::filesystem;
using namespace plab;

namespace {

struct GlobalOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t jobs = 1;
  std::string cell;
};

std::string output_dir(const GlobalOptions& g, const ExperimentSpec* spec) {
  if (const char* env = std::getenv("PLAB_OUT"); env != nullptr && *env != '\0') return env;
  if (!g.out.empty()) return g.out;
  return spec != nullptr ? spec->output_dir : "plab_out";
}

ExperimentSpec require_spec(const GlobalOptions& g, bool restrict_seeds = true) {
  if (g.config.empty()) throw ConfigError("--config is required for this command");
  ExperimentSpec spec = load_spec(g.config);
  if (g.seed && restrict_seeds) spec.seeds = {*g.seed};
  return spec;
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  os << j.dump(2) << '\n';
}

int cmd_gen_corpus(const GlobalOptions& g, const std::string& kind, std::size_t size, const std::string& input) {
  const fs::path out = output_dir(g, nullptr);
  fs::create_directories(out);
  std::vector<Sequence> corpus;
  ZipfOptions zipf;
  if (!g.config.empty()) zipf = load_spec(g.config).corpus.zipf;
  if (parse_corpus_kind(kind) == CorpusKind::zipf_synthetic) {
    corpus = generate_zipf_corpus(size, g.seed.value_or(0), zipf);
  } else {
    if (input.empty()) throw ConfigError("byte-text needs --input FILE");
    corpus = byte_corpus_from_text(read_text_file(input));
  }
  const fs::path path = out / "corpus.txt";
  write_corpus(corpus, path.string());
  fmt::print("wrote {} sequences to {} (hash {})\n", corpus.size(), path.string(), hex64(hash_sequences(corpus)));
  return 0;
}

int cmd_pretrain(const GlobalOptions& g) {
  const ExperimentSpec spec = require_spec(g);
  const ExperimentData data = load_data(spec);
  const fs::path cache = fs::path(output_dir(g, &spec)) / "pretrained";
  for (const auto& m : spec.models) {
    for (std::uint64_t seed : spec.seeds) {
      const auto r = pretrain_cached(cache.string(), m.config, data.train, data.corpus_hash, spec.pretrain, seed,
                                     spec.settings);
      fmt::print("{} seed {}: {} steps, loss {:.4f} -> {:.4f}\n", m.name, seed, r.steps, r.initial_loss, r.final_loss);
    }
  }
  return 0;
}

int cmd_run(const GlobalOptions& g, bool save_models) {
  // The seed filter goes through the matrix options so records keep the full spec's hash.
  const ExperimentSpec spec = require_spec(g, false);
  const ExperimentData data = load_data(spec);
  const fs::path out = output_dir(g, &spec);
  MatrixOptions opts;
  opts.jobs = g.jobs;
  opts.cache_dir = (out / "pretrained").string();
  if (!g.cell.empty()) opts.only_cell = parse_cell(g.cell);
  if (g.seed && std::find(spec.seeds.begin(), spec.seeds.end(), *g.seed) == spec.seeds.end()) {
    throw ConfigError(fmt::format("seed {} is not listed in the spec", *g.seed));
  }
  opts.only_seed = g.seed;
  opts.keep_models = save_models;
  const MatrixResult result = run_matrix(spec, data, opts);
  write_json(out / "spec.json", nlohmann::json(spec));
  int failed = 0;
  for (std::size_t i = 0; i < result.records.size(); ++i) {
    const RunRecord& r = result.records[i];
    write_record(r, (out / "records").string());
    if (save_models && i < result.finetuned.size() && result.finetuned[i]) {
      fs::create_directories(out / "models");
      fs::path ckpt = out / "models" / record_filename(r);
      ckpt.replace_extension(".ckpt");
      save_checkpoint(*result.finetuned[i], ckpt.string());
    }
    if (r.ok()) {
      fmt::print("{} seed {}: procrustes slope {:.4f}, cka slope {:.4f}\n", r.cell(), r.seed,
                 r.slopes.count(MetricKind::procrustes) ? r.slopes.at(MetricKind::procrustes).alpha : 0.0,
                 r.slopes.count(MetricKind::cka) ? r.slopes.at(MetricKind::cka).alpha : 0.0);
    } else {
      ++failed;
      fmt::print(stderr, "{} seed {}: FAILED: {}\n", r.cell(), r.seed, r.error);
    }
  }
  fmt::print("{} records in {}\n", result.records.size(), (out / "records").string());
  return failed == 0 ? 0 : 3;
}

int cmd_profile(const GlobalOptions& g, const std::string& before, const std::string& after,
                const std::string& probes_path) {
  if (before.empty() || after.empty() || probes_path.empty()) {
    throw ConfigError("profile needs --before CKPT --after CKPT --probes FILE");
  }
  const Model a = load_checkpoint(before), b = load_checkpoint(after);
  const auto probes = read_corpus(probes_path);
  const auto profiles = profile_from_runs(a, b, probes);
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [metric, p] : profiles) {
    const SlopeFit f = fit_locality_slope(p);
    j[to_string(metric)] = {{"depths", p.depths}, {"values", p.values}, {"alpha", f.alpha}, {"beta", f.beta}};
    fmt::print("{:<11} alpha {:+.4f} |", to_string(metric), f.alpha);
    for (double v : p.values) fmt::print(" {:.4g}", v);
    fmt::print("\n");
  }
  write_json(fs::path(output_dir(g, nullptr)) / "profile.json", j);
  return 0;
}

int cmd_distance(const GlobalOptions& g) {
  const ExperimentSpec spec = require_spec(g);
  const ExperimentData data = load_data(spec);
  const fs::path out = output_dir(g, &spec);
  const std::uint64_t seed = spec.seeds.front();
  const BatchSchedule schedule = make_schedule(data.train, spec.schedule.batches, spec.schedule.batch_size, seed);
  GradientOptions go;
  go.settings = spec.settings;
  for (const auto& m : spec.models) {
    const auto pre = pretrain_cached((out / "pretrained").string(), m.config, data.train, data.corpus_hash,
                                     spec.pretrain, seed, spec.settings);
    std::vector<ObjectiveKind> objectives{reference_objective(m.config)};
    for (ObjectiveKind k : spec.objectives) {
      if (k != objectives.front()) objectives.push_back(k);
    }
    const DistanceReport report = distance_report(pre.model, objectives, schedule, go, seed);
    write_json(out / "distances" / (m.name + ".json"), to_json_value(report));
    for (const auto& e : report.entries) {
      fmt::print("{} {:<12} procrustes {:.4f}  cosine {}  coherence {:.3f}\n", m.name, to_string(e.objective),
                 e.procrustes, e.cosine_full ? fmt::format("{:.4f}", *e.cosine_full) : std::string("incoherent"),
                 e.coherence.coherence);
    }
  }
  return 0;
}

int cmd_report(const GlobalOptions& g) {
  std::optional<ExperimentSpec> spec;
  if (!g.config.empty()) spec = require_spec(g);
  const fs::path out = output_dir(g, spec ? &*spec : nullptr);
  const auto records = read_records((out / "records").string());
  std::map<std::string, nlohmann::json> distances;
  if (fs::is_directory(out / "distances")) {
    for (const auto& e : fs::directory_iterator(out / "distances")) {
      if (e.path().extension() != ".json") continue;
      std::ifstream is(e.path());
      distances.emplace(e.path().stem().string(), nlohmann::json::parse(is));
    }
  }
  const ReportFiles files = emit_report(records, (out / "report").string(), distances);
  fmt::print("{} records -> {} CSV tables, {} SVG plots in {}\n", records.size(), files.csv.size(), files.svg.size(),
             (out / "report").string());
  return 0;
}

// Quick end-to-end sanity pass; the full gate is the acceptance binary.
int cmd_selftest() {
  int failures = 0;
  auto check = [&](bool ok, const std::string& what) {
    fmt::print("[{}] {}\n", ok ? "PASS" : "FAIL", what);
    failures += ok ? 0 : 1;
  };
  const SlopeFit f = fit_line(default_depths(), {0.066, 0.098, 0.113, 0.151, 0.205, 0.243, 0.330});
  check(std::abs(f.alpha - 0.265) <= 0.005, fmt::format("encoder slope fit = {:.4f}", f.alpha));
  check(stats::sign_test_pvalue(8, 9) == 0.0390625, "sign test 8/9");
  const std::vector<double> dist{0.0, 1.318, 1.406, 1.344, 1.353}, slope{0.259, 0.221, 1.089, 0.572, 0.533};
  check(std::abs(stats::spearman_rho(dist, slope) - 0.8) < 1e-12, "spearman on distance/slope pairs");

  ModelConfig c;
  c.layers = 2;
  c.d_model = 16;
  c.heads = 2;
  c.d_ff = 32;
  c.vocab = 64;
  c.max_seq = 16;
  Model m = Model::build(c, 1);
  ZipfOptions z;
  z.vocab = 60;
  z.max_len = 14;
  const auto corpus = generate_zipf_corpus(64, 2, z);
  ConditionConfig cond;
  cond.kind = ConditionKind::equal_step;
  cond.lr = 1e-3;
  TrainOptions o;
  o.steps = 5;
  o.batch_size = 8;
  const Model before = m;
  const auto tr = train(m, ObjectiveKind::CausalLM, cond, corpus, o);
  double worst = 0.0;
  for (const auto& r : tr.ratios) worst = std::max(worst, std::abs(r.ratio - cond.trust.tau) / cond.trust.tau);
  check(worst <= 1e-9, fmt::format("equal-step ratio error {:.2e}", worst));
  const auto prof = profile_from_runs(before, m, std::vector<Sequence>(corpus.begin(), corpus.begin() + 16));
  check(prof.size() == 3, "profile_from_runs produced three metrics");
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"plab: depthwise fine-tuning plasticity lab"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  GlobalOptions g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config, "experiment spec (JSON)")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "run only this seed");
  app.add_option("--out", g.out, "output directory (PLAB_OUT overrides)");
  app.add_option("--jobs", g.jobs, "worker threads for the run matrix")->check(CLI::PositiveNumber);
  app.add_option("--cell", g.cell, "run a single MODEL:OBJ:COND cell");

  std::string kind = "zipf-synthetic", input;
  std::size_t size = 4000;
  auto* gen = app.add_subcommand("gen-corpus", "write a corpus file");
  gen->add_option("--kind", kind, "zipf-synthetic or byte-text");
  gen->add_option("--size", size, "number of synthetic sequences");
  gen->add_option("--input", input, "text file for byte-text")->check(CLI::ExistingFile);

  auto* pre = app.add_subcommand("pretrain", "pretrain (and cache) every model of the spec");
  bool save_models = false;
  auto* run = app.add_subcommand("run", "run the experiment matrix and write run records");
  run->add_flag("--save-models", save_models, "also write fine-tuned checkpoints to OUT/models");

  std::string before, after, probes;
  auto* prof = app.add_subcommand("profile", "depth profile between two checkpoints");
  prof->add_option("--before", before, "checkpoint before fine-tuning")->check(CLI::ExistingFile);
  prof->add_option("--after", after, "checkpoint after fine-tuning")->check(CLI::ExistingFile);
  prof->add_option("--probes", probes, "probe corpus file")->check(CLI::ExistingFile);

  auto* dist = app.add_subcommand("distance", "objective distances from final-layer gradients");
  auto* rep = app.add_subcommand("report", "CSV tables and SVG plots from run records");
  auto* self = app.add_subcommand("selftest", "quick built-in checks");
  for (auto* sub : {gen, pre, run, prof, dist, rep, self}) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);
  if (seed_opt->count() > 0) g.seed = seed;

  try {
    if (gen->parsed()) return cmd_gen_corpus(g, kind, size, input);
    if (pre->parsed()) return cmd_pretrain(g);
    if (run->parsed()) return cmd_run(g, save_models);
    if (prof->parsed()) return cmd_profile(g, before, after, probes);
    if (dist->parsed()) return cmd_distance(g);
    if (rep->parsed()) return cmd_report(g);
    if (self->parsed()) return cmd_selftest();
  } catch (const plab::Error& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 2;
  }
  return 0;
}
