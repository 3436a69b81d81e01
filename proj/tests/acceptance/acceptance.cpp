// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "vulnllm/corpus.hpp"
#include "vulnllm/embedding_index.hpp"
#include "vulnllm/evaluation.hpp"
#include "vulnllm/model_backend.hpp"
#include "vulnllm/prompting.hpp"
#include "vulnllm/synthetic.hpp"
#include "vulnllm/tuning.hpp"
#include "vulnllm/visualization.hpp"

using namespace vulnllm;

namespace {

// Collects the first few failure messages of one criterion.
class Check {
 public:
  void expect(bool ok, const std::string& what) {
    if (ok) return;
    ++failures_;
    if (messages_.size() < 3) messages_.push_back(what);
  }
  bool ok() const { return failures_ == 0; }
  std::string summary() const {
    std::string out = std::to_string(failures_) + " failure(s)";
    for (const auto& m : messages_) out += "; " + m;
    return out;
  }
  std::string note;

 private:
  int failures_ = 0;
  std::vector<std::string> messages_;
};

std::string num(double v, int decimals = 4) { return format_fixed(v, decimals); }

int g_failed = 0;

void criterion(const char* name, double limit_seconds, const std::function<void(Check&)>& body) {
  Check c;
  const auto start = std::chrono::steady_clock::now();
  try {
    body(c);
  } catch (const std::exception& e) {
    c.expect(false, std::string("exception: ") + e.what());
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (limit_seconds > 0) c.expect(secs < limit_seconds, "took " + num(secs, 2) + " s, limit " + num(limit_seconds, 0) + " s");
  const bool ok = c.ok();
  if (!ok) ++g_failed;
  std::printf("%s  %-28s %7.2fs  %s\n", ok ? "PASS" : "FAIL", name, secs,
              ok ? c.note.c_str() : c.summary().c_str());
  std::fflush(stdout);
}

std::vector<int> random_labels(Rng& rng, std::size_t n) {
  std::vector<int> out(n);
  for (auto& y : out) y = static_cast<int>(uniform_index(rng, 2));
  return out;
}

Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = scale * standard_normal(rng);
  return m;
}

void randomize(ToyBackend& b, std::uint64_t seed) {
  Rng rng(seed);
  for (const auto& layer : ToyBackend::kLayerNames) {
    auto ad = b.adapter(layer);
    if (!ad) continue;
    ad->B = random_matrix(ad->B.rows(), ad->B.cols(), rng, 0.1);
    b.set_adapter(layer, *ad);
  }
  b.head().weights = random_matrix(b.dim(), 1, rng);
  b.head().bias = 0.3;
}

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

// ---------------------------------------------------------------------------

void metric_oracle(Check& c) {
  Rng rng(101);
  for (int t = 0; t < 1000; ++t) {
    const auto n = 1 + uniform_index(rng, 64);
    const auto p = random_labels(rng, n), y = random_labels(rng, n);
    const auto r = metrics(confusion(p, y));
    const auto o = oracle::count_rates(p, y);
    bool same = r.accuracy == o.accuracy && r.macro_f1 == o.macro;
    for (int k = 0; k < 2; ++k)
      same = same && r.per_class[k].precision == o.precision[k] && r.per_class[k].recall == o.recall[k] &&
             r.per_class[k].f1 == o.f1[k];
    c.expect(same, "mismatch on set " + std::to_string(t));
  }
  const auto a = format_fixed(f1_score(0.43, 0.64), 3), b = format_fixed(f1_score(0.93, 0.91), 3);
  c.expect(a == "0.514", "f1(0.43,0.64) = " + a);
  c.expect(b == "0.920", "f1(0.93,0.91) = " + b);
  c.note = "1000 sets exact; f1(0.43,0.64)=" + a + ", f1(0.93,0.91)=" + b;
}

void auc_identity(Check& c) {
  Rng rng(202);
  double worst = 0;
  int sets = 0;
  while (sets < 200) {
    const auto n = 2 + uniform_index(rng, 300);
    std::vector<double> s(n);
    const bool coarse = sets % 3 == 0;
    for (auto& v : s) v = coarse ? static_cast<double>(uniform_index(rng, 10)) / 10.0 : uniform_unit(rng);
    const auto y = random_labels(rng, n);
    if (std::count(y.begin(), y.end(), 1) == 0 || std::count(y.begin(), y.end(), 0) == 0) continue;
    worst = std::max(worst, std::abs(auc(roc(s, y)) - oracle::pairwise_auc(s, y)));
    ++sets;
  }
  c.expect(worst <= 1e-9, "max deviation " + std::to_string(worst));
  char buf[64];
  std::snprintf(buf, sizeof(buf), "200 sets, max |diff| = %.2e", worst);
  c.note = buf;
}

void retrieval_exactness(Check& c) {
  Rng rng(303);
  for (int t = 0; t < 100; ++t) {
    const auto n = 1 + uniform_index(rng, 1000);
    const auto d = 1 + uniform_index(rng, 64);
    const bool coarse = t % 4 == 0;  // integer grid: many exact distance ties
    std::vector<std::vector<double>> rows(n, std::vector<double>(d));
    std::vector<std::string> ids(n);
    FlatIndex index(d);
    for (std::size_t i = 0; i < n; ++i) {
      for (auto& x : rows[i]) x = coarse ? static_cast<double>(uniform_index(rng, 3)) : standard_normal(rng);
      ids[i] = "s" + std::to_string(uniform_index(rng, 1u << 30)) + "-" + std::to_string(i);
      index.add(ids[i], rows[i]);
    }
    std::vector<double> q(d);
    for (auto& x : q) x = coarse ? static_cast<double>(uniform_index(rng, 3)) : standard_normal(rng);
    const auto k = 1 + uniform_index(rng, std::min<std::size_t>(n, 20));
    const auto got = index.query(q, k);
    const auto want = oracle::scan(rows, ids, q, k);
    bool same = got.size() == want.size();
    for (std::size_t i = 0; same && i < want.size(); ++i)
      same = got[i].id == want[i].first && std::abs(got[i].distance - want[i].second) <= 1e-9;
    c.expect(same, "index " + std::to_string(t) + " (N=" + std::to_string(n) + ", d=" + std::to_string(d) + ")");
  }
  c.note = "100 random indices match exhaustive scan";
}

void prompt_fidelity(Check& c) {
  const auto dir = std::filesystem::path(VULNLLM_GOLDEN_DIR);
  c.expect(render_zero_shot("int main(){}").text == read_file(dir / "zero_shot_example.txt"), "zero-shot golden");
  FewShotSelection sel;
  sel.examples.push_back(
      {{"e1", "void copy(char *in) { char buf[8]; strcpy(buf, in); }", 1, {}, {}}, "Vulnerable", {}});
  sel.examples.push_back({{"e2", "int add(int a, int b) { return a + b; }", 0, {}, {}}, "Safe", {}});
  const auto few = render_few_shot("int main(){}", sel).text;
  c.expect(few == read_file(dir / "few_shot_2ex.txt"), "few-shot golden");
  for (int y : {0, 1})
    c.expect(to_label(parse_label(std::string(label_word(y)))) == y, "label word round trip");
  const auto parsed = parse_prompt(few);
  c.expect(parsed.examples.size() == 2 && parsed.examples[0].second == "Vulnerable" &&
               parsed.examples[1].second == "Safe" && parsed.test_code == "int main(){}",
           "parse_prompt round trip");
  c.note = "golden files byte-identical; label words round-trip";
}

void adapter_math(Check& c) {
  Rng rng(404);
  double worst = 0;
  for (int t = 0; t < 100; ++t) {
    const auto d_out = static_cast<Eigen::Index>(1 + uniform_index(rng, 64));
    const auto d_in = static_cast<Eigen::Index>(1 + uniform_index(rng, 64));
    const int r = static_cast<int>(1 + uniform_index(rng, 16));
    LowRankAdapter ad;
    ad.rank = r;
    ad.alpha = 0.5 + 16 * uniform_unit(rng);
    ad.A = random_matrix(r, d_in, rng);
    ad.B = random_matrix(d_out, r, rng);
    const auto W = random_matrix(d_out, d_in, rng);
    const Eigen::VectorXd x = random_matrix(d_in, 1, rng);
    worst = std::max(worst, oracle::relative_error(apply_adapter(W, ad, x),
                                                   oracle::dense_adapter(W, ad.A, ad.B, ad.alpha, r, x)));
  }
  c.expect(worst <= 1e-6, "max relative error " + std::to_string(worst));

  ToyBackend plain;
  plain.detach_adapters();
  ToyBackend adapted;
  const Eigen::VectorXd w = random_matrix(adapted.dim(), 1, rng);
  plain.head().weights = w;
  adapted.head().weights = w;
  for (const char* code : {"void f(char *s) { char b[4]; strcpy(b, s); }", "int main(){}"}) {
    const auto prompt = render_zero_shot(code);
    c.expect(plain.embed(code) == adapted.embed(code), "embed changed by zero-init adapter");
    c.expect(plain.classify(code) == adapted.classify(code), "classify changed by zero-init adapter");
    c.expect(plain.generative_logit(prompt.text) == adapted.generative_logit(prompt.text),
             "generative logit changed by zero-init adapter");
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "100 cases, max rel err %.2e; zero-init outputs bit-identical", worst);
  c.note = buf;
}

void gradient_check(Check& c) {
  ToyBackend b;
  randomize(b, 505);
  const TrainingExample ex{"void f(char *s) { char b[4]; strcpy(b, s); }", 1};
  const auto fashion = Fashion::kClassifier;
  auto params = b.parameters(fashion);
  std::vector<double> grad(params.size(), 0.0), scratch(params.size());
  b.loss_and_gradient(fashion, ex, grad);
  auto loss_at = [&](const std::vector<double>& p) {
    b.set_parameters(fashion, p);
    return b.loss_and_gradient(fashion, ex, scratch);
  };
  Rng rng(506);
  const double h = 1e-5;
  int checked = 0;
  double worst = 0;
  for (int attempt = 0; checked < 20 && attempt < 5000; ++attempt) {
    const auto i = uniform_index(rng, params.size());
    if (std::abs(grad[i]) < 1e-5) continue;
    auto p = params;
    p[i] = params[i] + h;
    const double up = loss_at(p);
    p[i] = params[i] - h;
    const double down = loss_at(p);
    const double fd = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(fd - grad[i]) / std::max(std::abs(fd), std::abs(grad[i])));
    ++checked;
  }
  c.expect(checked == 20, "only " + std::to_string(checked) + " coordinates checked");
  c.expect(worst <= 1e-4, "max relative error " + std::to_string(worst));
  char buf[64];
  std::snprintf(buf, sizeof(buf), "20 coordinates, max rel err %.2e", worst);
  c.note = buf;
}

void balancing(Check& c) {
  Rng rng(606);
  for (int t = 0; t < 50; ++t) {
    const auto vul = 1 + uniform_index(rng, 200), safe = 1 + uniform_index(rng, 200);
    Samples s;
    for (std::size_t i = 0; i < vul + safe; ++i) s.push_back({"b" + std::to_string(i), "x", i < vul ? 1 : 0, {}, {}});
    std::shuffle(s.begin(), s.end(), rng);
    const auto seed = rng();
    const auto out = balance_undersample(s, seed);
    const auto cnt = count_classes(out);
    const auto minority = std::min(vul, safe);
    c.expect(cnt.safe == minority && cnt.vulnerable == minority, "parity at minority count");
    std::set<std::string> in_ids, out_ids;
    for (const auto& x : s) in_ids.insert(x.id);
    for (const auto& x : out) out_ids.insert(x.id);
    c.expect(out_ids.size() == out.size(), "duplicates in output");
    for (const auto& id : out_ids) c.expect(in_ids.count(id) > 0, "output not a subset");
    const int minority_label = vul <= safe ? 1 : 0;
    for (const auto& x : s)
      if (x.label == minority_label) c.expect(out_ids.count(x.id) > 0, "minority sample dropped");
    c.expect(balance_undersample(s, seed) == out, "not deterministic per seed");
  }
  c.note = "50 random sets: parity, minority kept, subset, deterministic";
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

void testtime_isolation(Check& c) {
  ClusterSetup cs;
  ToyBackend b;
  finetune_classifier(b, cs.train, toy_sgd());
  const auto before = b.snapshot();
  TestTimeConfig tt;
  tt.train.learning_rate = 0.1;
  const auto serial = testtime_evaluate(b, cs.index, cs.train, cs.test, cs.embed, tt);
  auto shuffled = cs.test;
  std::mt19937_64 rng(707);
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const auto permuted = testtime_evaluate(b, cs.index, cs.train, shuffled, cs.embed, tt);
  std::unordered_map<std::string, PredictionRecord> by_id;
  for (const auto& r : permuted) by_id[r.id] = r;
  for (const auto& r : serial) c.expect(r == by_id.at(r.id), "prediction for " + r.id + " depends on order");
  c.expect(b.snapshot().values() == before.values(), "backend state changed by test-time tuning");

  ToyBackend s;
  randomize(s, 708);
  const auto token = s.snapshot();
  const std::string code = "void f(char *s) { char b[4]; strcpy(b, s); }";
  const double p0 = s.classify(code);
  std::vector<double> g(s.parameter_count(Fashion::kClassifier));
  s.loss_and_gradient(Fashion::kClassifier, {code, 0}, g);
  auto p = s.parameters(Fashion::kClassifier);
  for (std::size_t i = 0; i < p.size(); ++i) p[i] -= 0.5 * g[i];
  s.set_parameters(Fashion::kClassifier, p);
  c.expect(s.classify(code) != p0, "update had no effect");
  s.restore(token);
  c.expect(s.classify(code) == p0 && s.snapshot().values() == token.values(), "restore not bit-exact");
  c.note = std::to_string(cs.test.size()) + " permuted predictions identical; restore bit-exact";
}

void end_to_end(Check& c) {
  auto [train, test] = synthetic::holdout(synthetic::planted_marker_corpus(), 5);
  ToyBackend b;
  const auto run = finetune_classifier(b, train, toy_sgd());
  const double f1 = classifier_report(b, test).per_class[1].f1;
  c.expect(f1 >= 0.95, "planted F1 " + num(f1, 3));

  ClusterSetup cs;
  ToyBackend one, two;
  finetune_classifier(one, cs.train, toy_sgd());
  const double one_step = classifier_report(one, cs.test).macro_f1;
  const auto res = double_finetune_evaluate(two, cs.train, cs.index, cs.test, cs.embed, toy_sgd());
  const double dbl = evaluate_predictions(res.predictions, truth_of(cs.test)).macro_f1;
  c.expect(dbl >= one_step, "double " + num(dbl, 3) + " < one-step " + num(one_step, 3));
  c.note = "planted F1=" + num(f1, 3) + " (" + std::to_string(run.loss_trace.size()) +
           " steps); cluster macro F1 double=" + num(dbl, 3) + " one-step=" + num(one_step, 3);
}

void projection(Check& c) {
  Rng rng(808);
  std::vector<EmbeddingVector> pts;
  std::vector<int> labels;
  for (int k = 0; k < 2; ++k)
    for (int i = 0; i < 100; ++i) {
      EmbeddingVector v(64);
      for (auto& x : v) x = standard_normal(rng);
      v[0] += k == 0 ? -6.0 : 6.0;
      pts.push_back(v);
      labels.push_back(k);
    }
  ProjectionConfig cfg;
  cfg.seed = 3;
  const double recovery = oracle::nearest_centroid_recovery(project_2d(pts, cfg), labels);
  c.expect(recovery >= 0.95, "blob recovery " + num(recovery, 3));

  const auto corpus = synthetic::planted_marker_corpus();
  const Samples sample(corpus.begin(), corpus.begin() + 80);
  std::vector<int> y;
  for (const auto& s : sample) y.push_back(s.label);
  auto project = [&](const ToyBackend& b) {
    std::vector<EmbeddingVector> e;
    for (const auto& s : sample) e.push_back(b.embed(s.code));
    ProjectionConfig pc;
    pc.perplexity = 15;
    pc.iterations = 500;
    return project_2d(e, pc);
  };
  ToyBackend untuned, tuned;
  TrainConfig tc;
  tc.learning_rate = 0.02;
  tc.epochs = 8;
  finetune_classifier(tuned, corpus, tc);
  const double before = silhouette(project(untuned), y);
  const double after = silhouette(project(tuned), y);
  c.expect(after > before, "silhouette " + num(after, 3) + " <= " + num(before, 3));
  c.note = "blob recovery " + num(recovery, 3) + "; silhouette " + num(before, 3) + " -> " + num(after, 3);
}

}  // namespace

int main() {
  const auto start = std::chrono::steady_clock::now();
  criterion("metric-oracle", 10, metric_oracle);
  criterion("auc-identity", 10, auc_identity);
  criterion("retrieval-exactness", 30, retrieval_exactness);
  criterion("prompt-fidelity", 0, prompt_fidelity);
  criterion("adapter-math", 0, adapter_math);
  criterion("gradient-check", 0, gradient_check);
  criterion("balancing", 0, balancing);
  criterion("test-time-isolation", 0, testtime_isolation);
  criterion("end-to-end-toy-pipeline", 60, end_to_end);
  criterion("projection-sanity", 0, projection);
  const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  criterion("full-suite-runtime", 0, [&](Check& c) {
    c.expect(total < 300, "acceptance took " + num(total, 1) + " s");
    c.expect(g_failed == 0, std::to_string(g_failed) + " criteria failed");
    c.note = "all criteria in " + num(total, 2) + " s (limit 300 s)";
  });
  return g_failed == 0 ? 0 : 1;
}
