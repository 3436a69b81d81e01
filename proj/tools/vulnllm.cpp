// vulnllm: batch experiment runner.
//
//   vulnllm prepare <dataset> [--config f] [--set k=v]... [--seed n] [--out-dir d]
//   vulnllm index-build       [...]
//   vulnllm run <technique>   [...] [--backend name]
//   vulnllm report <run_id>... [...]
//
// Results root: --out-dir, else $VULNLLM_RESULTS, else ./results.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <iostream>
#include <map>
#include <string>

#include "vulnllm/corpus.hpp"
#include "vulnllm/embedding_index.hpp"
#include "vulnllm/evaluation.hpp"
#include "vulnllm/model_backend.hpp"
#include "vulnllm/prompting.hpp"
#include "vulnllm/tuning.hpp"
#include "vulnllm/visualization.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace vulnllm;
using vulnllm::detail::lower;
using vulnllm::detail::trim;

namespace {

const std::vector<std::string> kTechniques = {
    "zero-shot",           "few-shot-random",     "few-shot-cwe", "few-shot-rag",
    "finetune-generative", "finetune-classifier", "tt-finetune",  "double-finetune"};

// Error raised inside a named pipeline stage.
struct StageError : std::runtime_error {
  StageError(std::string stage, std::string message)
      : std::runtime_error(std::move(message)), stage(std::move(stage)) {}
  std::string stage;
};

template <typename F>
auto stage(const std::string& name, F&& body) -> decltype(body()) {
  try {
    return body();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(name, std::string(to_string(e.kind())) + ": " + e.what());
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

// ---------------------------------------------------------------------------
// Layered key=value configuration

class Config {
 public:
  void load_file(const fs::path& path) {
    std::istringstream in(read_file(path));
    std::string line;
    for (int n = 1; std::getline(in, line); ++n) {
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      if (trim(line).empty()) continue;
      require(line.find('=') != std::string::npos, ErrorKind::kFormat,
              path.string() + ":" + std::to_string(n) + ": expected key = value");
      set_pair(line);
    }
  }

  void set_pair(const std::string& pair) {
    const auto eq = pair.find('=');
    require(eq != std::string::npos, ErrorKind::kInvalidArgument,
            "expected key=value, got '" + pair + "'");
    const auto key = trim(pair.substr(0, eq));
    require(!key.empty(), ErrorKind::kInvalidArgument, "empty key in '" + pair + "'");
    values_[key] = trim(pair.substr(eq + 1));
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string str(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }
  std::optional<std::string> opt(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end() || it->second.empty()) return std::nullopt;
    return it->second;
  }
  double real(const std::string& key, double fallback) const {
    return parse<double>(key, fallback, [](const std::string& s, std::size_t* p) { return std::stod(s, p); });
  }
  long long integer(const std::string& key, long long fallback) const {
    return parse<long long>(key, fallback, [](const std::string& s, std::size_t* p) { return std::stoll(s, p); });
  }
  std::uint64_t u64(const std::string& key, std::uint64_t fallback) const {
    return parse<std::uint64_t>(key, fallback, [](const std::string& s, std::size_t* p) { return std::stoull(s, p); });
  }
  bool boolean(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const auto v = lower(it->second);
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    fail(ErrorKind::kInvalidArgument, "config key '" + key + "' expects a boolean, got '" + it->second + "'");
  }

  // Entries under "<prefix>." with the prefix removed.
  std::map<std::string, std::string> section(const std::string& prefix) const {
    std::map<std::string, std::string> out;
    const auto p = prefix + ".";
    for (const auto& [k, v] : values_)
      if (k.rfind(p, 0) == 0) out[k.substr(p.size())] = v;
    return out;
  }

  json to_json() const { return json(values_); }

 private:
  template <typename T, typename Parse>
  T parse(const std::string& key, T fallback, Parse fn) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t used = 0;
      T v = fn(it->second, &used);
      if (used == it->second.size()) return v;
    } catch (const std::exception&) {
    }
    fail(ErrorKind::kInvalidArgument, "config key '" + key + "' has malformed value '" + it->second + "'");
  }

  std::map<std::string, std::string> values_;
};

struct Common {
  std::vector<std::string> config_files;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> backend;
  std::optional<std::string> out_dir;
};

Config build_config(const Common& c) {
  return stage("config", [&] {
    Config cfg;
    for (const auto& f : c.config_files) cfg.load_file(f);
    for (const auto& o : c.overrides) cfg.set_pair(o);
    if (c.seed) cfg.set("seed", std::to_string(*c.seed));
    if (c.backend) cfg.set("backend", *c.backend);
    return cfg;
  });
}

fs::path results_root(const Common& c) {
  if (c.out_dir) return *c.out_dir;
  if (const char* env = std::getenv("VULNLLM_RESULTS"); env && *env) return env;
  return "results";
}

fs::path data_dir(const Config& cfg, const fs::path& root) {
  return cfg.str("data.dir", (root / "data").string());
}

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string short_hash(const json& j) { return sha256_hex(j.dump()).substr(0, 12); }

void write_json(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

std::uint64_t master_seed(const Config& cfg) { return cfg.u64("seed", 0); }

// ---------------------------------------------------------------------------
// prepare

IngestOptions ingest_options(const Config& cfg, const fs::path& dataset) {
  IngestOptions o;
  auto format = lower(cfg.str("input.format", "auto"));
  if (format == "auto") {
    const auto ext = lower(dataset.extension().string());
    format = ext == ".jsonl" || ext == ".json" ? "jsonl" : ext == ".tsv" ? "tsv" : "csv";
  }
  if (format == "jsonl") o.format = InputFormat::kJsonLines;
  else if (format == "tsv") o.delimiter = '\t';
  else require(format == "csv", ErrorKind::kInvalidArgument, "unknown input.format '" + format + "'");
  if (auto d = cfg.opt("input.delimiter")) {
    const auto text = *d == "\\t" || *d == "tab" ? std::string("\t") : *d;
    require(text.size() == 1, ErrorKind::kInvalidArgument, "input.delimiter must be one character");
    o.delimiter = text[0];
  }
  o.columns.code = cfg.str("input.code_column", o.columns.code);
  o.columns.label = cfg.str("input.label_column", o.columns.label);
  o.columns.cwe = cfg.opt("input.cwe_column");
  o.columns.id = cfg.opt("input.id_column");
  o.columns.split = cfg.opt("input.split_column");
  return o;
}

int cmd_prepare(const Common& common, const std::string& dataset) {
  const Config cfg = build_config(common);
  const fs::path root = results_root(common);
  const fs::path out = data_dir(cfg, root);
  const std::uint64_t seed = cfg.u64("split.seed", master_seed(cfg));

  const IngestResult ingested = stage("ingest", [&] {
    require(fs::exists(dataset), ErrorKind::kIo, "dataset not found: " + dataset);
    return ingest(dataset, ingest_options(cfg, dataset));
  });

  const DatasetSplit raw = stage("split", [&] {
    if (!ingested.split_tags.empty()) return split_by_tags(ingested.samples, ingested.split_tags);
    SplitRatios r;
    r.train = cfg.real("split.train", r.train);
    r.valid = cfg.real("split.valid", r.valid);
    r.test = cfg.real("split.test", r.test);
    return split(ingested.samples, r, seed);
  });

  const BalanceFlags flags{cfg.boolean("balance.train", true), cfg.boolean("balance.valid", true),
                           cfg.boolean("balance.test", true)};
  const DatasetSplit balanced = stage("balance", [&] { return balance_split(raw, flags); });

  stage("persist", [&] {
    const std::pair<const char*, const Samples*> raw_parts[] = {
        {"train", &raw.train}, {"valid", &raw.valid}, {"test", &raw.test}};
    const std::pair<const char*, const Samples*> parts[] = {
        {"train", &balanced.train}, {"valid", &balanced.valid}, {"test", &balanced.test}};
    json files = json::object();
    for (const auto& [name, s] : raw_parts) {
      write_file_atomic(out / "split" / (std::string(name) + ".jsonl"), to_jsonl(*s));
      files["split/" + std::string(name) + ".jsonl"] = {{"count", s->size()}, {"fingerprint", fingerprint(*s)}};
    }
    for (const auto& [name, s] : parts) {
      write_file_atomic(out / (std::string(name) + ".jsonl"), to_jsonl(*s));
      files[std::string(name) + ".jsonl"] = {{"count", s->size()}, {"fingerprint", fingerprint(*s)}};
    }
    json m;
    m["command"] = "prepare";
    m["dataset"] = fs::absolute(dataset).lexically_normal().string();
    m["dataset_fingerprint"] = fingerprint(ingested.samples);
    m["config"] = cfg.to_json();
    m["seeds"] = {{"split", seed}, {"balance", seed}};
    m["skipped_rows"] = ingested.skipped;
    m["published_split"] = !ingested.split_tags.empty();
    m["balance"] = {{"train", flags.train}, {"valid", flags.valid}, {"test", flags.test}};
    m["split"] = split_manifest(raw);
    m["files"] = files;
    write_json(out / "prepare_manifest.json", m);
  });

  std::printf("prepared %zu samples (%zu skipped) into %s\n", ingested.samples.size(), ingested.skipped,
              out.string().c_str());
  std::printf("  split    train=%zu valid=%zu test=%zu\n", raw.train.size(), raw.valid.size(), raw.test.size());
  std::printf("  balanced train=%zu valid=%zu test=%zu\n", balanced.train.size(), balanced.valid.size(),
              balanced.test.size());
  return 0;
}

// ---------------------------------------------------------------------------
// Shared run plumbing

std::unique_ptr<Backend> make_backend(const Config& cfg) {
  return stage("backend", [&] {
    auto options = cfg.section("backend");
    if (!options.count("seed")) options["seed"] = std::to_string(master_seed(cfg));
    return BackendRegistry::instance().create(cfg.str("backend", "toy"), options);
  });
}

TrainConfig train_config(const Config& cfg, const std::string& prefix, TrainConfig c) {
  c.epochs = static_cast<int>(cfg.integer(prefix + ".epochs", c.epochs));
  c.batch_size = static_cast<int>(cfg.integer(prefix + ".batch_size", c.batch_size));
  c.learning_rate = cfg.real(prefix + ".learning_rate", c.learning_rate);
  if (auto o = cfg.opt(prefix + ".optimizer")) c.optimizer = optimizer_from_string(*o);
  c.weight_decay = cfg.real(prefix + ".weight_decay", c.weight_decay);
  c.seed = cfg.u64(prefix + ".seed", master_seed(cfg));
  return c;
}

TestTimeConfig testtime_config(const Config& cfg) {
  TestTimeConfig t;
  t.k = static_cast<std::size_t>(cfg.integer("tt.k", static_cast<long long>(t.k)));
  t.train = train_config(cfg, "tt", t.train);
  t.accumulate = cfg.boolean("tt.accumulate", false);
  return t;
}

// Retrieval always embeds with the untuned backend so neighbour sets do not
// depend on the tuning state.
struct Retrieval {
  std::unique_ptr<Backend> embedder;
  FlatIndex index{1};
  QueryEmbedder query;
};

Retrieval build_retrieval(const Backend& base, std::span<const CodeSample> train) {
  Retrieval r;
  r.embedder = base.clone();
  const Backend* e = r.embedder.get();
  r.query = [e](const CodeSample& s) { return e->embed(s.code); };
  r.index = build_index(train, r.query);
  return r;
}

std::vector<PredictionRecord> prompt_predictions(const Backend& backend, const std::string& technique,
                                                 std::span<const CodeSample> train,
                                                 std::span<const CodeSample> test, const Config& cfg) {
  const std::uint64_t seed = master_seed(cfg);
  const auto max_tokens = static_cast<std::size_t>(cfg.integer("generate.max_new_tokens", 4));
  BalancedSelectionOptions balanced;
  balanced.per_class = static_cast<std::size_t>(cfg.integer("fewshot.per_class", 3));
  RetrievalConfig rag;
  rag.k = static_cast<std::size_t>(cfg.integer("rag.k", static_cast<long long>(rag.k)));

  std::optional<Retrieval> retrieval;
  std::optional<SampleLookup> lookup;
  if (technique == "few-shot-rag") {
    retrieval = stage("index", [&] { return build_retrieval(backend, train); });
    lookup.emplace(train);
  }

  std::vector<PredictionRecord> out;
  out.reserve(test.size());
  for (const auto& s : test) {
    const std::uint64_t sample_seed = mix_seed(seed, fnv1a64(s.id));
    FewShotSelection sel;
    RenderedPrompt prompt;
    if (technique == "zero-shot" || technique == "finetune-generative") {
      prompt = render_zero_shot(s.code);
    } else {
      auto o = balanced;
      o.exclude_id = s.id;
      if (technique == "few-shot-random") sel = select_random_balanced(train, sample_seed, o);
      else if (technique == "few-shot-cwe") sel = select_same_cwe(train, s.cwe, sample_seed, o);
      else sel = select_rag(retrieval->index, *lookup, retrieval->query(s), rag, s.id);
      prompt = render_few_shot(s.code, sel);
    }
    auto rec = predict_generative(backend, s, prompt, max_tokens);
    rec.degraded = sel.degraded;
    if (technique == "few-shot-rag")
      for (const auto& e : sel.examples) rec.retrieved.push_back({e.sample.id, e.distance.value_or(0.0)});
    out.push_back(std::move(rec));
  }
  return out;
}

struct RunOutcome {
  std::vector<PredictionRecord> predictions;
  std::optional<TuningRun> tuning;
};

RunOutcome execute(Backend& backend, const std::string& technique, const Samples& train,
                   const Samples& test, const Config& cfg) {
  RunOutcome r;
  const auto workers = static_cast<std::size_t>(cfg.integer("run.workers", 1));
  if (technique == "zero-shot" || technique.rfind("few-shot", 0) == 0) {
    r.predictions = stage("predict", [&] { return prompt_predictions(backend, technique, train, test, cfg); });
  } else if (technique == "finetune-generative") {
    r.tuning = stage("tune", [&] { return finetune_generative(backend, train, train_config(cfg, "train", {})); });
    r.predictions = stage("predict", [&] { return prompt_predictions(backend, technique, train, test, cfg); });
  } else if (technique == "finetune-classifier") {
    r.tuning = stage("tune", [&] { return finetune_classifier(backend, train, train_config(cfg, "train", {})); });
    r.predictions = stage("predict", [&] {
      std::vector<PredictionRecord> out;
      for (const auto& s : test) out.push_back(predict_classifier(backend, s));
      return out;
    });
  } else {
    auto retrieval = stage("index", [&] { return build_retrieval(backend, train); });
    const auto tt = testtime_config(cfg);
    if (technique == "tt-finetune") {
      r.predictions = stage("predict", [&] {
        return testtime_evaluate(backend, retrieval.index, train, test, retrieval.query, tt, workers);
      });
    } else {
      auto result = stage("tune", [&] {
        return double_finetune_evaluate(backend, train, retrieval.index, test, retrieval.query,
                                        train_config(cfg, "train", {}), tt, workers);
      });
      r.tuning = std::move(result.global_run);
      r.predictions = std::move(result.predictions);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// run

int cmd_run(const Common& common, const std::string& technique) {
  Config cfg = build_config(common);
  const fs::path root = results_root(common);
  const fs::path data = data_dir(cfg, root);

  Samples train, test;
  stage("load", [&] {
    train = read_jsonl(data / "train.jsonl");
    test = read_jsonl(data / cfg.str("run.eval_split", "test").append(".jsonl"));
    require(!test.empty(), ErrorKind::kInsufficientData, "evaluation split is empty");
  });
  const std::string data_fp = sha256_hex(fingerprint(train) + ":" + fingerprint(test));

  auto backend = make_backend(cfg);
  const std::string backend_name = backend->descriptor().name;

  const json identity = {{"command", "run"},
                         {"technique", technique},
                         {"backend", backend_name},
                         {"config", cfg.to_json()},
                         {"dataset_fingerprint", data_fp}};
  const std::string run_id = technique + "-" + short_hash(identity);
  const fs::path dir = root / "runs" / run_id;

  json manifest = identity;
  manifest["run_id"] = run_id;
  manifest["data_dir"] = fs::absolute(data).lexically_normal().string();
  manifest["data_name"] = cfg.str("data.name", fs::absolute(data).lexically_normal().filename().string());
  manifest["seeds"] = {{"master", master_seed(cfg)},
                       {"train", cfg.u64("train.seed", master_seed(cfg))},
                       {"tt", cfg.u64("tt.seed", master_seed(cfg))},
                       {"backend", cfg.u64("backend.seed", master_seed(cfg))}};
  manifest["started_at"] = utc_now();
  manifest["status"] = "running";
  manifest["artifacts"] = json::object();
  stage("persist", [&] {
    fs::remove_all(dir);
    write_json(dir / "manifest.json", manifest);
  });

  RunOutcome outcome = execute(*backend, technique, train, test, cfg);

  std::unordered_map<std::string, int> truth;
  for (const auto& s : test) truth[s.id] = s.label;
  const auto policy = lower(cfg.str("eval.unparseable", "error")) == "safe"
                          ? UnparseablePolicy::kFallbackToSafe
                          : UnparseablePolicy::kCountAsError;
  const EvalReport report = stage("evaluate", [&] {
    return evaluate_predictions(outcome.predictions, truth, policy, {run_id, data_fp});
  });

  json artifacts = {{"predictions", "predictions.jsonl"}, {"report", "report.json"}};
  stage("persist", [&] {
    std::string lines;
    for (const auto& p : outcome.predictions) {
      auto j = to_json(p);
      j["run_id"] = run_id;
      lines += j.dump() + "\n";
    }
    write_file_atomic(dir / "predictions.jsonl", lines);
    auto rj = to_json(report);
    rj["manifest"] = "manifest.json";
    write_json(dir / "report.json", rj);

    fs::create_directories(dir / "plots");
    json plots = json::array();
    std::vector<double> scores;
    std::vector<int> labels;
    for (const auto& p : outcome.predictions)
      if (p.score) {
        scores.push_back(*p.score);
        labels.push_back(truth.at(p.id));
      }
    const bool both = std::count(labels.begin(), labels.end(), 1) > 0 &&
                      std::count(labels.begin(), labels.end(), 0) > 0;
    if (scores.size() == outcome.predictions.size() && both) {
      const std::vector<NamedCurve> curves = {{technique, roc(scores, labels)}};
      emit_roc_plot(curves, dir / "plots" / "roc.svg", "ROC: " + run_id);
      plots.push_back("plots/roc.svg");
    }
    if (cfg.boolean("plots.projection", false)) {
      std::vector<EmbeddingVector> emb;
      std::vector<int> y;
      for (const auto& s : test) {
        emb.push_back(backend->embed(s.code));
        y.push_back(s.label);
      }
      ProjectionConfig pc;
      pc.seed = master_seed(cfg);
      pc.perplexity = std::min(pc.perplexity, std::max(1.0, (static_cast<double>(emb.size()) - 1) / 3));
      const auto pts = project_2d(emb, pc);
      emit_scatter_plot(pts, y, dir / "plots" / "projection.svg", "Test embeddings: " + run_id);
      write_file_atomic(dir / "plots" / "projection.csv", coordinates_table(pts, y));
      plots.push_back("plots/projection.svg");
      plots.push_back("plots/projection.csv");
    }
    artifacts["plots"] = plots;
    if (outcome.tuning) {
      outcome.tuning->run_id = run_id;
      persist_tuning_run(*outcome.tuning, *backend, dir / "tuning");
      artifacts["tuning"] = {{"manifest", "tuning/tuning_manifest.json"},
                             {"loss_trace", "tuning/loss.csv"},
                             {"checkpoint", "tuning/checkpoint.bin"}};
      manifest["tuning_warnings"] = outcome.tuning->warnings;
    }
    manifest["artifacts"] = artifacts;
    manifest["finished_at"] = utc_now();
    manifest["status"] = "complete";
    write_json(dir / "manifest.json", manifest);
  });

  std::printf("run %s\n", run_id.c_str());
  std::printf("  accuracy=%s macro_f1=%s auc=%s unparseable=%zu\n", format_fixed(report.accuracy, 3).c_str(),
              format_fixed(report.macro_f1, 3).c_str(),
              report.auc ? format_fixed(*report.auc, 3).c_str() : "n/a", report.unparseable);
  std::printf("  %s\n", dir.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// report

int cmd_report(const Common& common, const std::vector<std::string>& run_ids) {
  const Config cfg = build_config(common);
  const fs::path root = results_root(common);

  std::vector<TableRow> rows;
  std::vector<NamedCurve> curves;
  std::vector<std::string> notes;
  json sources = json::array();
  stage("report", [&] {
    for (const auto& id : run_ids) {
      const fs::path dir = root / "runs" / id;
      require(fs::exists(dir / "manifest.json"), ErrorKind::kIo, "missing run '" + id + "' under " + root.string());
      const auto manifest = json::parse(read_file(dir / "manifest.json"));
      require(manifest.value("status", "") == "complete", ErrorKind::kFormat, "run '" + id + "' did not complete");
      const auto report = report_from_json(json::parse(read_file(dir / "report.json")));
      rows.push_back({manifest.at("backend").get<std::string>(), manifest.at("technique").get<std::string>(),
                      manifest.value("data_name", std::string("data")), report});
      sources.push_back({{"run_id", id}, {"report_sha256", sha256_hex(read_file(dir / "report.json"))}});

      std::istringstream in(read_file(dir / "predictions.jsonl"));
      std::vector<double> scores;
      std::vector<int> labels;
      bool all_scored = true;
      std::unordered_map<std::string, int> truth;
      for (const auto& s : read_jsonl(fs::path(manifest.at("data_dir").get<std::string>()) /
                                      (cfg.str("run.eval_split", "test") + ".jsonl")))
        truth[s.id] = s.label;
      for (std::string line; std::getline(in, line);) {
        if (trim(line).empty()) continue;
        const auto p = prediction_from_json(json::parse(line));
        if (!p.score) {
          all_scored = false;
          break;
        }
        const auto it = truth.find(p.id);
        require(it != truth.end(), ErrorKind::kFormat, "prediction '" + p.id + "' not in the evaluation split");
        scores.push_back(*p.score);
        labels.push_back(it->second);
      }
      if (all_scored && !scores.empty()) curves.push_back({id, roc(scores, labels)});
      else notes.push_back("run " + id + " has no scores; ROC omitted");
    }
  });

  const std::string table = comparison_table(rows);
  const json identity = {{"command", "report"}, {"sources", sources}};
  const std::string report_id = "report-" + short_hash(identity);
  const fs::path dir = root / "reports" / report_id;
  stage("persist", [&] {
    json m = identity;
    m["report_id"] = report_id;
    m["notes"] = notes;
    m["artifacts"] = {{"table", "table.csv"}};
    write_file_atomic(dir / "table.csv", table);
    if (!curves.empty()) {
      emit_roc_plot(curves, dir / "roc.svg", "Comparative ROC curves");
      m["artifacts"]["roc"] = "roc.svg";
    }
    write_json(dir / "manifest.json", m);
  });

  std::fputs(table.c_str(), stdout);
  for (const auto& n : notes) std::fprintf(stderr, "note: %s\n", n.c_str());
  std::printf("report %s\n  %s\n", report_id.c_str(), dir.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// index-build

int cmd_index_build(const Common& common) {
  const Config cfg = build_config(common);
  const fs::path root = results_root(common);
  const fs::path data = data_dir(cfg, root);
  const auto split_name = cfg.str("index.split", "train");
  const Samples samples = stage("load", [&] { return read_jsonl(data / (split_name + ".jsonl")); });
  auto backend = make_backend(cfg);
  const FlatIndex index = stage("index", [&] { return build_retrieval(*backend, samples).index; });

  const json identity = {{"command", "index-build"},
                         {"backend", backend->descriptor().name},
                         {"config", cfg.to_json()},
                         {"dataset_fingerprint", fingerprint(samples)}};
  const std::string index_id = "index-" + short_hash(identity);
  const fs::path dir = root / "indexes" / index_id;
  stage("persist", [&] {
    index.save(dir / "index.bin");
    json m = identity;
    m["index_id"] = index_id;
    m["split"] = split_name;
    m["rows"] = index.size();
    m["dim"] = index.dim();
    m["artifacts"] = {{"index", "index.bin"}};
    write_json(dir / "manifest.json", m);
  });
  std::printf("index %s rows=%zu dim=%zu\n  %s\n", index_id.c_str(), index.size(), index.dim(),
              dir.string().c_str());
  return 0;
}

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_files, "key=value config file (repeatable, later wins)");
  app->add_option("--set", c.overrides, "override one config key (key=value)");
  app->add_option("--seed", c.seed, "master seed");
  app->add_option("--backend", c.backend, "backend name");
  app->add_option("--out-dir", c.out_dir, "results root (default $VULNLLM_RESULTS or ./results)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Vulnerability detection experiment runner"};
  app.require_subcommand(1);
  Common common;

  std::string dataset;
  auto* prepare = app.add_subcommand("prepare", "ingest, split and balance a dataset");
  prepare->add_option("dataset", dataset, "delimited table or JSON-lines file")->required();
  add_common(prepare, common);

  std::string technique;
  auto* run = app.add_subcommand("run", "run one technique end to end");
  run->add_option("technique", technique, "technique name")->required()->check(CLI::IsMember(kTechniques));
  add_common(run, common);

  std::vector<std::string> run_ids;
  auto* report = app.add_subcommand("report", "merge runs into a comparison table and ROC plot");
  report->add_option("run_ids", run_ids, "run ids")->required();
  add_common(report, common);

  auto* index_build = app.add_subcommand("index-build", "build the retrieval index over a split");
  add_common(index_build, common);

  CLI11_PARSE(app, argc, argv);

  const char* command = app.get_subcommands().front()->get_name().c_str();
  try {
    if (*prepare) return cmd_prepare(common, dataset);
    if (*run) return cmd_run(common, technique);
    if (*report) return cmd_report(common, run_ids);
    if (*index_build) return cmd_index_build(common);
  } catch (const StageError& e) {
    std::fprintf(stderr, "vulnllm %s: error [%s] %s\n", command, e.stage.c_str(), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "vulnllm %s: error %s\n", command, e.what());
    return 1;
  }
  return 1;
}
