#pragma once

#include <set>
#include <string>
#include <vector>

#include "vulnllm/common.hpp"
#include "vulnllm/corpus.hpp"

// Synthetic corpora with known structure, used to exercise the pipelines at
// desk scale with the toy backend.
namespace vulnllm::synthetic {

inline std::set<std::size_t> marker_buckets(const std::vector<std::string>& markers,
                                            std::size_t dim) {
  std::set<std::size_t> out;
  for (const auto& m : markers) out.insert(fnv1a64(m) % dim);
  return out;
}

// Identifiers v0, v1, ... whose hash bucket avoids every marker bucket, so a
// sample without a planted marker never carries marker mass.
inline std::vector<std::string> clean_vocabulary(std::size_t size, const std::string& prefix,
                                                 const std::set<std::size_t>& avoid,
                                                 std::size_t dim) {
  std::vector<std::string> out;
  for (std::size_t i = 0; out.size() < size; ++i) {
    auto word = prefix + std::to_string(i);
    if (!avoid.count(fnv1a64(word) % dim)) out.push_back(std::move(word));
  }
  return out;
}

inline const std::string& pick(const std::vector<std::string>& v, Rng& rng) {
  return v[uniform_index(rng, v.size())];
}

struct PlantedCorpusOptions {
  std::size_t size = 200;
  std::size_t dim = 256;
  // Tokens the backend treats as markers; none may appear in safe samples.
  std::vector<std::string> markers = {"strcpy", "gets", "sprintf"};
  // Tokens actually planted into vulnerable samples.
  std::vector<std::string> planted = {"strcpy"};
  // Patched counterparts planted at the same spot in safe samples.
  std::vector<std::string> counterparts = {"strncpy"};
  std::size_t vocabulary = 160;
  std::size_t min_statements = 3;
  std::size_t max_statements = 3;
  std::uint64_t seed = 0;
};

// Balanced corpus of small C-like functions. Vulnerable samples contain one
// call to a marker function; safe samples call its patched counterpart at the
// same spot and contain no marker. Vulnerable samples
// carry a CWE tag cycling through three weakness types.
inline Samples planted_marker_corpus(const PlantedCorpusOptions& o = {}) {
  const auto avoid = marker_buckets(o.markers, o.dim);
  const std::vector<std::string> skeleton = {"void", "char", "*", "(", ")", "{", "}",
                                             "=",    ";",    ","};
  auto checked = skeleton;
  checked.insert(checked.end(), o.counterparts.begin(), o.counterparts.end());
  for (const auto& t : checked)
    require(!avoid.count(fnv1a64(t) % o.dim), ErrorKind::kInvalidArgument,
            "skeleton token '" + t + "' collides with a marker bucket at this dim");
  const auto vocab = clean_vocabulary(o.vocabulary, "v", avoid, o.dim);
  static const std::vector<std::string> kCwes = {"CWE-119", "CWE-787", "CWE-20"};

  Rng rng(mix_seed(o.seed, 0x9a7));
  Samples out;
  for (std::size_t i = 0; i < o.size; ++i) {
    const int label = i % 2 == 0 ? 1 : 0;
    const std::size_t statements =
        o.min_statements + uniform_index(rng, o.max_statements - o.min_statements + 1);
    const std::size_t planted_at = uniform_index(rng, statements);
    std::string code = "void " + pick(vocab, rng) + "(char *" + pick(vocab, rng) + ") {\n";
    for (std::size_t s = 0; s < statements; ++s) {
      const auto& callee = s != planted_at ? pick(vocab, rng)
                           : label == 1  ? pick(o.planted, rng)
                                         : pick(o.counterparts, rng);
      code += "  " + pick(vocab, rng) + " = " + callee + "(" + pick(vocab, rng) + ", " +
              pick(vocab, rng) + ");\n";
    }
    code += "}\n";
    CodeSample sample;
    char id[32];
    std::snprintf(id, sizeof(id), "planted-%04zu", i);
    sample.id = id;
    sample.code = std::move(code);
    sample.label = label;
    if (label == 1) sample.cwe = kCwes[(i / 2) % kCwes.size()];
    sample.origin = "planted";
    out.push_back(std::move(sample));
  }
  return out;
}

struct ClusterCorpusOptions {
  std::size_t clusters = 4;
  std::size_t per_cluster = 40;
  std::size_t cluster_vocabulary = 8;
  std::size_t statements = 4;
  std::size_t flag_repeats = 3;
  std::size_t dim = 256;
  std::vector<std::string> markers = {"strcpy", "gets", "sprintf"};
  std::uint64_t seed = 0;
};

// Cluster-local labels: every sample belongs to one cluster (its identifiers
// come from that cluster's vocabulary) and either carries the flag token or
// its counterpart. In even clusters the flag means vulnerable, in odd
// clusters it means safe, so no single linear weighting of the flag is right
// for all clusters while a sample's neighbours share its label.
inline Samples cluster_local_corpus(const ClusterCorpusOptions& o = {}) {
  const auto avoid = marker_buckets(o.markers, o.dim);
  Rng rng(mix_seed(o.seed, 0xc1a));
  Samples out;
  for (std::size_t c = 0; c < o.clusters; ++c) {
    const auto vocab = clean_vocabulary(o.cluster_vocabulary, "c" + std::to_string(c) + "_", avoid,
                                        o.dim);
    for (std::size_t i = 0; i < o.per_cluster; ++i) {
      const bool flag = i % 2 == 0;
      const int label = (c % 2 == 0) == flag ? 1 : 0;
      std::string code = "void " + pick(vocab, rng) + "(char *" + pick(vocab, rng) + ") {\n";
      for (std::size_t s = 0; s < o.statements; ++s)
        code += "  " + pick(vocab, rng) + " = " + pick(vocab, rng) + "(" + pick(vocab, rng) + ");\n";
      for (std::size_t r = 0; r < o.flag_repeats; ++r)
        code += std::string("  ") + (flag ? "flag_on" : "flag_off") + "();\n";
      code += "}\n";
      CodeSample sample;
      char id[48];
      std::snprintf(id, sizeof(id), "cluster%zu-%04zu", c, i);
      sample.id = id;
      sample.code = std::move(code);
      sample.label = label;
      sample.origin = "cluster-local";
      out.push_back(std::move(sample));
    }
  }
  return out;
}

// Deterministic holdout: every `stride`-th sample goes to the returned test
// part, the rest to train.
inline std::pair<Samples, Samples> holdout(std::span<const CodeSample> samples, std::size_t stride) {
  Samples train, test;
  for (std::size_t i = 0; i < samples.size(); ++i)
    (i % stride == stride - 1 ? test : train).push_back(samples[i]);
  return {std::move(train), std::move(test)};
}

}  // namespace vulnllm::synthetic
