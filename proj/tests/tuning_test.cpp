#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "oracles.hpp"
#include "vulnllm/synthetic.hpp"
#include "vulnllm/tuning.hpp"

using namespace vulnllm;

namespace {

std::unordered_map<std::string, int> truth_of(const Samples& s) {
  std::unordered_map<std::string, int> out;
  for (const auto& x : s) out[x.id] = x.label;
  return out;
}

EvalReport classifier_report(const Backend& b, const Samples& test) {
  std::vector<PredictionRecord> recs;
  for (const auto& s : test) recs.push_back(predict_classifier(b, s));
  return evaluate_predictions(recs, truth_of(test));
}

TrainConfig toy_sgd() {
  TrainConfig c;
  c.optimizer = OptimizerKind::kSgd;
  return c;
}

struct ClusterSetup {
  Samples train, test;
  ToyBackend embedder;
  FlatIndex index{1};
  QueryEmbedder embed;

  ClusterSetup() {
    auto [tr, te] = synthetic::holdout(synthetic::cluster_local_corpus(), 5);
    train = std::move(tr);
    test = std::move(te);
    index = build_index(train, embedder.embedder());
    embed = [this](const CodeSample& s) { return embedder.embed(s.code); };
  }
};

}  // namespace

TEST(TrainConfig, DefaultsAndValidation) {
  TrainConfig c;
  EXPECT_EQ(c.epochs, 4);
  EXPECT_EQ(c.batch_size, 16);
  EXPECT_EQ(c.learning_rate, 2e-4);
  EXPECT_EQ(c.optimizer, OptimizerKind::kAdamW);
  EXPECT_STREQ(to_string(c.optimizer), "paged_adamw_32bit");
  EXPECT_EQ(optimizer_from_string("sgd"), OptimizerKind::kSgd);
  EXPECT_THROW(optimizer_from_string("lion"), Error);
  c.epochs = 0;
  EXPECT_THROW(c.validate(), Error);
  c.epochs = 1;
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), Error);
  c.batch_size = 1;
  c.learning_rate = 0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Optimizers, SgdAndAdamWSteps) {
  std::vector<double> p = {1.0, -2.0};
  const std::vector<double> g = {0.5, -1.0};
  SgdOptimizer sgd(0.1);
  sgd.step(p, g);
  EXPECT_DOUBLE_EQ(p[0], 0.95);
  EXPECT_DOUBLE_EQ(p[1], -1.9);

  TrainConfig c;
  c.learning_rate = 0.01;
  c.weight_decay = 0.1;
  AdamWOptimizer adam(c);
  std::vector<double> q = {1.0, -2.0};
  adam.step(q, g);
  // First bias-corrected step moves each coordinate by lr * sign(g) plus decay.
  EXPECT_NEAR(q[0], 1.0 - 0.01 * (1.0 + 0.1 * 1.0), 1e-9);
  EXPECT_NEAR(q[1], -2.0 - 0.01 * (-1.0 + 0.1 * -2.0), 1e-9);
}

TEST(FinetuneClassifier, PlantedCorpusReachesTarget) {
  auto [train, test] = synthetic::holdout(synthetic::planted_marker_corpus(), 5);
  ASSERT_EQ(train.size(), 160u);
  ToyBackend b;
  const auto base = b.base_fingerprint();
  const auto run = finetune_classifier(b, train, toy_sgd());
  EXPECT_EQ(run.loss_trace.size(), 40u);
  EXPECT_EQ(run.epoch_mean_loss.size(), 4u);
  EXPECT_LT(run.epoch_mean_loss.back(), run.epoch_mean_loss.front());
  EXPECT_EQ(b.base_fingerprint(), base);
  EXPECT_TRUE(run.warnings.empty());
  EXPECT_GE(classifier_report(b, test).per_class[1].f1, 0.95);
}

TEST(FinetuneClassifier, StrongTrainingGivesConfidentMarkerScore) {
  auto [train, test] = synthetic::holdout(synthetic::planted_marker_corpus(), 5);
  ToyBackend b;
  TrainConfig c;
  c.learning_rate = 0.01;
  c.epochs = 8;
  finetune_classifier(b, train, c);
  for (const auto& s : test) {
    if (s.label == 1) EXPECT_GT(b.classify(s.code), 0.9) << s.id;
    else EXPECT_LT(b.classify(s.code), 0.1) << s.id;
  }
}

TEST(FinetuneClassifier, SingleClassWarns) {
  Samples all_vulnerable;
  for (auto& s : synthetic::planted_marker_corpus())
    if (s.label == 1) all_vulnerable.push_back(s);
  ToyBackend b;
  const auto run = finetune_classifier(b, all_vulnerable, toy_sgd());
  ASSERT_EQ(run.warnings.size(), 1u);
  for (const auto& s : synthetic::planted_marker_corpus()) EXPECT_GT(b.classify(s.code), 0.5);
}

TEST(FinetuneClassifier, DeterministicAndBaseFrozen) {
  auto corpus = synthetic::planted_marker_corpus();
  ToyBackend a, b;
  TrainConfig c;
  c.seed = 3;
  const auto ra = finetune_classifier(a, corpus, c);
  const auto rb = finetune_classifier(b, corpus, c);
  EXPECT_EQ(ra.loss_trace, rb.loss_trace);
  EXPECT_EQ(a.parameters(Fashion::kClassifier), b.parameters(Fashion::kClassifier));
  EXPECT_EQ(ra.base_fingerprint, a.base_fingerprint());
  for (std::size_t l = 0; l < 4; ++l) EXPECT_EQ(a.base_weight(l), ToyBackend().base_weight(l));
}

TEST(FinetuneGenerative, LossDecreasesOnlyAdaptersMove) {
  auto corpus = synthetic::planted_marker_corpus();
  ToyBackend b;
  const auto head_before = b.head().weights;
  const auto base = b.base_fingerprint();
  const auto run = finetune_generative(b, corpus, TrainConfig{});
  EXPECT_LT(run.epoch_mean_loss.back(), run.epoch_mean_loss.front());
  EXPECT_LT(run.loss_trace.back(), run.loss_trace.front());
  EXPECT_EQ(b.head().weights, head_before);
  EXPECT_EQ(b.base_fingerprint(), base);

  ToyBackend again;
  EXPECT_EQ(finetune_generative(again, corpus, TrainConfig{}).loss_trace, run.loss_trace);
}

TEST(FinetuneGenerative, Preconditions) {
  auto corpus = synthetic::planted_marker_corpus();
  ToyBackend b;
  TrainConfig zero;
  zero.epochs = 0;
  EXPECT_THROW(finetune_generative(b, corpus, zero), Error);
  auto classifier_only = BackendRegistry::instance().create("toy-classifier");
  try {
    finetune_generative(*classifier_only, corpus, TrainConfig{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kCapabilityMissing);
  }
  EXPECT_THROW(finetune_generative(b, Samples{}, TrainConfig{}), Error);
}

TEST(Training, DivergenceAborts) {
  auto corpus = synthetic::planted_marker_corpus();
  ToyBackend b;
  TrainConfig c = toy_sgd();
  c.learning_rate = 1e300;
  try {
    finetune_classifier(b, corpus, c);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kDiverged);
  }
}

TEST(TestTime, NeighboursAllVulnerableGivePositive) {
  Samples train;
  for (int i = 0; i < 6; ++i)
    train.push_back({"near" + std::to_string(i), "alpha beta gamma v" + std::to_string(i), 1, {}, {}});
  for (int i = 0; i < 6; ++i)
    train.push_back({"far" + std::to_string(i), "{ } ; ; x" + std::to_string(i), 0, {}, {}});
  const CodeSample test{"t", "alpha beta gamma", 0, {}, {}};
  ToyBackend b;
  const auto index = build_index(train, b.embedder());
  const SampleLookup lookup(train);
  auto embed = [&](const CodeSample& s) { return b.embed(s.code); };
  const auto rec = testtime_finetune_predict(b, index, lookup, test, embed);
  EXPECT_EQ(rec.label, 1);
  ASSERT_EQ(rec.retrieved.size(), 6u);
  for (const auto& n : rec.retrieved) EXPECT_EQ(n.id.substr(0, 4), "near");
  EXPECT_EQ(b.classify(test.code), 0.5);  // restored
}

TEST(TestTime, ZeroStepsAndRepeatIsolation) {
  ClusterSetup cs;
  ToyBackend b;
  finetune_classifier(b, cs.train, toy_sgd());
  const SampleLookup lookup(cs.train);
  TestTimeConfig noop;
  noop.train.epochs = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    const auto rec = testtime_finetune_predict(b, cs.index, lookup, cs.test[i], cs.embed, noop);
    EXPECT_EQ(rec.score, b.classify(cs.test[i].code));
    TestTimeConfig strong;
    strong.train.learning_rate = 0.5;
    const auto first = testtime_finetune_predict(b, cs.index, lookup, cs.test[i], cs.embed, strong);
    const auto second = testtime_finetune_predict(b, cs.index, lookup, cs.test[i], cs.embed, strong);
    EXPECT_EQ(first, second);
    EXPECT_NE(first.score, rec.score);
  }
}

TEST(TestTime, DivergenceRestoresState) {
  ClusterSetup cs;
  ToyBackend b;
  const auto before = b.parameters(Fashion::kClassifier);
  TestTimeConfig bad;
  bad.train.learning_rate = 1e300;
  bad.train.epochs = 3;
  try {
    testtime_finetune_predict(b, cs.index, SampleLookup(cs.train), cs.test[0], cs.embed, bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kDiverged);
  }
  EXPECT_EQ(b.parameters(Fashion::kClassifier), before);
}

TEST(TestTime, AccumulateKeepsUpdates) {
  ClusterSetup cs;
  ToyBackend b;
  const auto before = b.parameters(Fashion::kClassifier);
  TestTimeConfig acc;
  acc.accumulate = true;
  testtime_finetune_predict(b, cs.index, SampleLookup(cs.train), cs.test[0], cs.embed, acc);
  EXPECT_NE(b.parameters(Fashion::kClassifier), before);
}

TEST(DoubleFinetune, NoopTestTimeEqualsOneStep) {
  ClusterSetup cs;
  ToyBackend one, two;
  finetune_classifier(one, cs.train, toy_sgd());
  TestTimeConfig noop;
  noop.train.epochs = 0;
  const auto res = double_finetune_evaluate(two, cs.train, cs.index, cs.test, cs.embed, toy_sgd(), noop);
  for (std::size_t i = 0; i < cs.test.size(); ++i) {
    const auto ref = predict_classifier(one, cs.test[i]);
    EXPECT_EQ(res.predictions[i].score, ref.score);
    EXPECT_EQ(res.predictions[i].label, ref.label);
  }
}

TEST(DoubleFinetune, BeatsOneStepOnClusterLocalLabels) {
  ClusterSetup cs;
  ToyBackend one, two;
  finetune_classifier(one, cs.train, toy_sgd());
  const double one_step = classifier_report(one, cs.test).macro_f1;
  const auto res = double_finetune_evaluate(two, cs.train, cs.index, cs.test, cs.embed, toy_sgd());
  const double dbl = evaluate_predictions(res.predictions, truth_of(cs.test)).macro_f1;
  EXPECT_GE(dbl, one_step);
  EXPECT_GT(dbl, 0.9);
}

TEST(DoubleFinetune, OrderInvariantAndParallelEqualsSerial) {
  ClusterSetup cs;
  ToyBackend b;
  finetune_classifier(b, cs.train, toy_sgd());
  TestTimeConfig tt;
  tt.train.learning_rate = 0.1;
  const auto serial = testtime_evaluate(b, cs.index, cs.train, cs.test, cs.embed, tt);
  auto shuffled = cs.test;
  std::mt19937_64 rng(99);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const auto permuted = testtime_evaluate(b, cs.index, cs.train, shuffled, cs.embed, tt);
  const auto parallel = testtime_evaluate(b, cs.index, cs.train, cs.test, cs.embed, tt, 3);
  std::unordered_map<std::string, PredictionRecord> by_id;
  for (const auto& r : permuted) by_id[r.id] = r;
  for (std::size_t i = 0; i < serial.size(); ++i) {
    EXPECT_EQ(serial[i], by_id.at(serial[i].id));
    EXPECT_EQ(serial[i], parallel[i]);
  }
}

TEST(Persistence, ManifestLossTableAndCheckpoint) {
  auto corpus = synthetic::planted_marker_corpus();
  const auto dir = oracle::temp_dir("tuning");
  std::string hashes[2];
  for (int rep = 0; rep < 2; ++rep) {
    ToyBackend b;
    auto run = finetune_classifier(b, corpus, toy_sgd());
    run.run_id = "unit";
    persist_tuning_run(run, b, dir / std::to_string(rep));
    const auto m = nlohmann::json::parse(read_file(dir / std::to_string(rep) / "tuning_manifest.json"));
    EXPECT_EQ(m["steps"], run.loss_trace.size());
    EXPECT_EQ(m["data_fingerprint"], fingerprint(corpus));
    hashes[rep] = m["content_hash"];
    const auto csv = read_file(dir / std::to_string(rep) / "loss.csv");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), static_cast<long>(run.loss_trace.size() + 1));
    ToyBackend reload;
    reload.load_checkpoint(dir / std::to_string(rep) / "checkpoint.bin");
    EXPECT_NEAR(reload.classify(corpus[0].code), b.classify(corpus[0].code), 1e-6);
  }
  EXPECT_EQ(hashes[0], hashes[1]);
  std::filesystem::remove_all(dir);
}
