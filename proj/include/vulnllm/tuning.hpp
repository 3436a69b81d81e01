#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "vulnllm/common.hpp"
#include "vulnllm/corpus.hpp"
#include "vulnllm/embedding_index.hpp"
#include "vulnllm/evaluation.hpp"
#include "vulnllm/model_backend.hpp"
#include "vulnllm/prompting.hpp"

namespace vulnllm {

enum class OptimizerKind { kSgd, kAdamW };

inline const char* to_string(OptimizerKind k) {
  return k == OptimizerKind::kSgd ? "sgd" : "paged_adamw_32bit";
}

inline OptimizerKind optimizer_from_string(const std::string& name) {
  if (name == "sgd") return OptimizerKind::kSgd;
  if (name == "adamw" || name == "paged_adamw_32bit") return OptimizerKind::kAdamW;
  fail(ErrorKind::kInvalidArgument, "unknown optimizer '" + name + "'");
}

struct TrainConfig {
  int epochs = 4;
  int batch_size = 16;
  double learning_rate = 2e-4;
  // Paging only affects where optimizer state lives; the arithmetic is AdamW.
  OptimizerKind optimizer = OptimizerKind::kAdamW;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;

  void validate(int min_epochs = 1) const {
    require(epochs >= min_epochs, ErrorKind::kInvalidArgument,
            "epochs must be >= " + std::to_string(min_epochs));
    require(batch_size >= 1, ErrorKind::kInvalidArgument, "batch_size must be >= 1");
    require(learning_rate > 0.0 && std::isfinite(learning_rate), ErrorKind::kInvalidArgument,
            "learning_rate must be > 0");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},         {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate}, {"optimizer", to_string(c.optimizer)},
          {"weight_decay", c.weight_decay},   {"seed", c.seed}};
}

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(std::span<double> params, std::span<const double> grad) = 0;
};

class SgdOptimizer final : public Optimizer {
 public:
  explicit SgdOptimizer(double lr) : lr_(lr) {}
  void step(std::span<double> params, std::span<const double> grad) override {
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr_ * grad[i];
  }

 private:
  double lr_;
};

// Decoupled weight decay Adam with bias correction.
class AdamWOptimizer final : public Optimizer {
 public:
  explicit AdamWOptimizer(const TrainConfig& c) : c_(c) {}
  void step(std::span<double> params, std::span<const double> grad) override {
    if (m_.size() != params.size()) {
      m_.assign(params.size(), 0.0);
      v_.assign(params.size(), 0.0);
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(c_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(c_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = c_.beta1 * m_[i] + (1.0 - c_.beta1) * grad[i];
      v_[i] = c_.beta2 * v_[i] + (1.0 - c_.beta2) * grad[i] * grad[i];
      const double mhat = m_[i] / bc1;
      const double vhat = v_[i] / bc2;
      params[i] -= c_.learning_rate * (mhat / (std::sqrt(vhat) + c_.epsilon) +
                                       c_.weight_decay * params[i]);
    }
  }

 private:
  TrainConfig c_;
  std::vector<double> m_, v_;
  std::uint64_t t_ = 0;
};

inline std::unique_ptr<Optimizer> make_optimizer(const TrainConfig& c) {
  if (c.optimizer == OptimizerKind::kSgd) return std::make_unique<SgdOptimizer>(c.learning_rate);
  return std::make_unique<AdamWOptimizer>(c);
}

struct TuningRun {
  std::string run_id;
  TrainConfig config;
  Fashion fashion = Fashion::kClassifier;
  std::vector<double> loss_trace;        // one mean batch loss per step
  std::vector<double> epoch_mean_loss;   // per epoch, mean of its step losses
  double wall_clock_seconds = 0.0;
  std::string data_fingerprint;
  std::string base_fingerprint;
  std::vector<std::string> warnings;
  std::optional<std::filesystem::path> checkpoint;
};

// Shuffled mini-batch descent over `examples`. Restores nothing: callers that
// need isolation snapshot first.
inline TuningRun train_examples(Backend& backend, Fashion fashion,
                                std::span<const TrainingExample> examples,
                                const TrainConfig& config, int min_epochs = 1) {
  config.validate(min_epochs);
  require(backend.descriptor().trainable, ErrorKind::kCapabilityMissing,
          "backend '" + backend.descriptor().name + "' is not trainable");
  require(!examples.empty(), ErrorKind::kInsufficientData, "empty training set");

  TuningRun run;
  run.config = config;
  run.fashion = fashion;
  run.base_fingerprint = backend.base_fingerprint();
  const auto started = std::chrono::steady_clock::now();

  auto optimizer = make_optimizer(config);
  std::vector<double> params = backend.parameters(fashion);
  std::vector<double> grad(params.size());
  std::vector<std::size_t> order(examples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(mix_seed(config.seed, 0x7a1));
  const auto batch = static_cast<std::size_t>(config.batch_size);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    seeded_shuffle(order, rng);
    double epoch_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += batch) {
      const std::size_t end = std::min(order.size(), begin + batch);
      std::fill(grad.begin(), grad.end(), 0.0);
      double loss = 0.0;
      for (std::size_t i = begin; i < end; ++i)
        loss += backend.loss_and_gradient(fashion, examples[order[i]], grad);
      const double n = static_cast<double>(end - begin);
      loss /= n;
      for (auto& g : grad) g /= n;
      if (!std::isfinite(loss)) {
        fail(ErrorKind::kDiverged, "non-finite loss at epoch " + std::to_string(epoch) +
                                       " step " + std::to_string(run.loss_trace.size()));
      }
      optimizer->step(params, grad);
      for (double v : params)
        require(std::isfinite(v), ErrorKind::kDiverged,
                "non-finite parameter after step " + std::to_string(run.loss_trace.size()));
      backend.set_parameters(fashion, params);
      run.loss_trace.push_back(loss);
      epoch_sum += loss;
      ++steps;
    }
    run.epoch_mean_loss.push_back(epoch_sum / static_cast<double>(steps));
  }
  run.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  require(backend.base_fingerprint() == run.base_fingerprint, ErrorKind::kDiverged,
          "frozen base weights changed during tuning");
  return run;
}

inline std::vector<TrainingExample> classifier_examples(std::span<const CodeSample> samples) {
  std::vector<TrainingExample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({s.code, s.label});
  return out;
}

// Each sample becomes its zero-shot prompt; the target is the label word that
// follows the cue, so only the answer is supervised.
inline std::vector<TrainingExample> generative_examples(std::span<const CodeSample> samples) {
  std::vector<TrainingExample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back({render_zero_shot(s.code).text, s.label});
  return out;
}

inline TuningRun finetune_generative(Backend& backend, std::span<const CodeSample> train,
                                     const TrainConfig& config) {
  require_capability(backend, backend.descriptor().capabilities.generative, "generative");
  auto examples = generative_examples(train);
  auto run = train_examples(backend, Fashion::kGenerative, examples, config);
  run.data_fingerprint = fingerprint(train);
  return run;
}

inline TuningRun finetune_classifier(Backend& backend, std::span<const CodeSample> train,
                                     const TrainConfig& config) {
  require_capability(backend, backend.descriptor().capabilities.classifier, "classifier");
  auto examples = classifier_examples(train);
  auto run = train_examples(backend, Fashion::kClassifier, examples, config);
  run.data_fingerprint = fingerprint(train);
  const auto counts = count_classes(train);
  if (counts.safe == 0 || counts.vulnerable == 0) {
    run.warnings.push_back("training set contains a single class; the head will drift toward a "
                           "constant prediction");
  }
  return run;
}

// ---------------------------------------------------------------------------
// Prediction helpers

inline PredictionRecord predict_classifier(const Backend& backend, const CodeSample& sample) {
  PredictionRecord r;
  r.id = sample.id;
  r.score = backend.classify(sample.code);
  r.label = *r.score > 0.5 ? 1 : 0;
  return r;
}

inline PredictionRecord predict_generative(const Backend& backend, const CodeSample& sample,
                                           const RenderedPrompt& prompt,
                                           std::size_t max_new_tokens = 4) {
  PredictionRecord r;
  r.id = sample.id;
  r.generated = backend.generate(prompt, max_new_tokens);
  r.label = to_label(parse_label(*r.generated));
  return r;
}

// ---------------------------------------------------------------------------
// Test-time and double fine-tuning

struct TestTimeConfig {
  std::size_t k = 6;
  // Defaults: one epoch over the retrieved neighbours in a single batch.
  TrainConfig train{1, 6, 2e-4, OptimizerKind::kSgd};
  // Keep per-sample updates instead of restoring after each prediction.
  bool accumulate = false;
};

using QueryEmbedder = std::function<EmbeddingVector(const CodeSample&)>;

// Snapshot, retrieve the k nearest train samples, tune the classifier on them
// with their true labels, predict, then restore. Divergence restores before
// the error propagates.
inline PredictionRecord testtime_finetune_predict(Backend& backend, const FlatIndex& index,
                                                  const SampleLookup& train,
                                                  const CodeSample& test,
                                                  const QueryEmbedder& embed,
                                                  const TestTimeConfig& config = {}) {
  require_capability(backend, backend.descriptor().capabilities.classifier, "classifier");
  const StateToken before = backend.snapshot();
  std::vector<Neighbor> neighbors;
  try {
    neighbors = index.query(embed(test), config.k);
  } catch (const Error& e) {
    throw Error(e.kind(), "retrieval failed for " + test.id + ": " + e.what());
  }
  Samples local;
  for (const auto& n : neighbors) local.push_back(train.at(n.id));

  PredictionRecord record;
  try {
    if (config.train.epochs > 0) {
      auto examples = classifier_examples(local);
      train_examples(backend, Fashion::kClassifier, examples, config.train, 0);
    }
    record = predict_classifier(backend, test);
  } catch (...) {
    backend.restore(before);
    throw;
  }
  if (!config.accumulate) backend.restore(before);
  record.retrieved = std::move(neighbors);
  return record;
}

// Runs test-time prediction for every test sample from the backend's current
// state. With workers > 1 each worker holds its own clone; accumulate mode
// is order dependent and always runs serially.
inline std::vector<PredictionRecord> testtime_evaluate(Backend& backend, const FlatIndex& index,
                                                       std::span<const CodeSample> train,
                                                       std::span<const CodeSample> test,
                                                       const QueryEmbedder& embed,
                                                       const TestTimeConfig& config = {},
                                                       std::size_t workers = 1) {
  const SampleLookup lookup(train);
  std::vector<PredictionRecord> out(test.size());
  if (workers <= 1 || config.accumulate || test.size() < 2) {
    for (std::size_t i = 0; i < test.size(); ++i)
      out[i] = testtime_finetune_predict(backend, index, lookup, test[i], embed, config);
    return out;
  }
  workers = std::min(workers, test.size());
  std::vector<std::unique_ptr<Backend>> clones;
  for (std::size_t w = 0; w < workers; ++w) clones.push_back(backend.clone());
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> threads;
    for (std::size_t w = 0; w < workers; ++w) {
      threads.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < test.size(); i += workers)
            out[i] = testtime_finetune_predict(*clones[w], index, lookup, test[i], embed, config);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

struct DoubleFinetuneResult {
  TuningRun global_run;
  std::vector<PredictionRecord> predictions;
};

// Global classifier tuning on the whole train set, then per-sample test-time
// tuning that restarts from the globally tuned state for every test sample.
inline DoubleFinetuneResult double_finetune_evaluate(Backend& backend,
                                                     std::span<const CodeSample> train,
                                                     const FlatIndex& index,
                                                     std::span<const CodeSample> test,
                                                     const QueryEmbedder& embed,
                                                     const TrainConfig& global_config,
                                                     const TestTimeConfig& tt_config = {},
                                                     std::size_t workers = 1) {
  DoubleFinetuneResult result;
  result.global_run = finetune_classifier(backend, train, global_config);
  result.predictions = testtime_evaluate(backend, index, train, test, embed, tt_config, workers);
  return result;
}

// ---------------------------------------------------------------------------
// Persistence: manifest JSON, loss trace table, backend checkpoint.

inline void persist_tuning_run(TuningRun& run, const Backend& backend,
                               const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::string loss_csv = "step,epoch,loss\n";
  const std::size_t total = run.loss_trace.size();
  const std::size_t epochs = run.epoch_mean_loss.size();
  const std::size_t per_epoch = epochs ? total / epochs : total;
  char buf[64];
  for (std::size_t i = 0; i < total; ++i) {
    std::snprintf(buf, sizeof(buf), "%.17g", run.loss_trace[i]);
    loss_csv += std::to_string(i) + "," + std::to_string(per_epoch ? i / per_epoch : 0) + "," +
                buf + "\n";
  }
  write_file_atomic(dir / "loss.csv", loss_csv);
  const auto ckpt = dir / "checkpoint.bin";
  backend.save_checkpoint(ckpt);
  run.checkpoint = ckpt;

  nlohmann::json m;
  m["run_id"] = run.run_id;
  m["fashion"] = run.fashion == Fashion::kClassifier ? "classifier" : "generative";
  m["config"] = to_json(run.config);
  m["seed"] = run.config.seed;
  m["data_fingerprint"] = run.data_fingerprint;
  m["base_fingerprint"] = run.base_fingerprint;
  m["steps"] = total;
  m["epoch_mean_loss"] = run.epoch_mean_loss;
  m["wall_clock_seconds"] = run.wall_clock_seconds;
  m["warnings"] = run.warnings;
  m["loss_trace"] = "loss.csv";
  m["checkpoint"] = "checkpoint.bin";
  m["content_hash"] = sha256_hex(loss_csv + read_file(ckpt));
  write_file_atomic(dir / "tuning_manifest.json", m.dump(2) + "\n");
}

}  // namespace vulnllm
