#pragma once

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "vulnllm/common.hpp"
#include "vulnllm/corpus.hpp"
#include "vulnllm/embedding_index.hpp"

namespace vulnllm {

inline constexpr std::string_view kInstruction =
    "Classify the source code into Vulnerable or Safe, and return the answer as the "
    "corresponding label.";
inline constexpr std::string_view kExamplesSuffix = " Here are some examples:";
inline constexpr std::string_view kCodeCue = "Code: ";
inline constexpr std::string_view kLabelCue = "Label: ";
inline constexpr std::string_view kVulnerableWord = "Vulnerable";
inline constexpr std::string_view kSafeWord = "Safe";

inline std::string_view label_word(int label) { return label == 1 ? kVulnerableWord : kSafeWord; }

enum class TemplateId { kZeroShot, kFewShot };

struct RenderedPrompt {
  std::string text;
  TemplateId template_id = TemplateId::kZeroShot;

  friend bool operator==(const RenderedPrompt&, const RenderedPrompt&) = default;
};

enum class SelectionStrategy { kRandomBalanced, kSameCwe, kRag };

inline const char* to_string(SelectionStrategy s) {
  switch (s) {
    case SelectionStrategy::kRandomBalanced: return "random-balanced";
    case SelectionStrategy::kSameCwe: return "same-cwe";
    case SelectionStrategy::kRag: return "rag";
  }
  return "unknown";
}

struct FewShotExample {
  CodeSample sample;
  std::string label_word;
  std::optional<double> distance;  // rag only
};

struct FewShotSelection {
  std::vector<FewShotExample> examples;
  SelectionStrategy strategy = SelectionStrategy::kRandomBalanced;
  std::optional<std::uint64_t> seed;
  // same-cwe: fewer than the requested matches existed and the deficit was
  // filled from random vulnerable samples.
  bool degraded = false;
};

// Zero-shot layout:
//   <instruction>\nCode: <code>\nLabel:
inline RenderedPrompt render_zero_shot(std::string_view code) {
  require(!code.empty(), ErrorKind::kInvalidArgument, "cannot render a prompt for empty code");
  std::string text;
  text.reserve(kInstruction.size() + code.size() + 16);
  text += kInstruction;
  text += '\n';
  text += kCodeCue;
  text += code;
  text += '\n';
  text += kLabelCue;
  return {std::move(text), TemplateId::kZeroShot};
}

// Few-shot layout:
//   <instruction> Here are some examples:\n
//   Code: <example>\nLabel: <word>\n        (repeated, in selection order)
//   Code: <code>\nLabel:
inline RenderedPrompt render_few_shot(std::string_view code, const FewShotSelection& selection) {
  require(!code.empty(), ErrorKind::kInvalidArgument, "cannot render a prompt for empty code");
  require(!selection.examples.empty(), ErrorKind::kInvalidArgument,
          "few-shot prompt needs at least one example");
  std::string text;
  text += kInstruction;
  text += kExamplesSuffix;
  text += '\n';
  for (const auto& ex : selection.examples) {
    require(!ex.sample.code.empty(), ErrorKind::kInvalidArgument, "empty example code");
    text += kCodeCue;
    text += ex.sample.code;
    text += '\n';
    text += kLabelCue;
    text += ex.label_word;
    text += '\n';
  }
  text += kCodeCue;
  text += code;
  text += '\n';
  text += kLabelCue;
  return {std::move(text), TemplateId::kFewShot};
}

// ---------------------------------------------------------------------------
// Example selection

namespace detail {

inline FewShotExample make_example(const CodeSample& s) {
  return {s, std::string(label_word(s.label)), std::nullopt};
}

// Uniform sample of `count` items from `pool` without replacement.
inline std::vector<const CodeSample*> sample_without_replacement(
    std::vector<const CodeSample*> pool, std::size_t count, Rng& rng) {
  for (std::size_t i = 0; i < count; ++i) {
    std::swap(pool[i], pool[i + uniform_index(rng, pool.size() - i)]);
  }
  pool.resize(count);
  return pool;
}

inline std::vector<const CodeSample*> class_pool(std::span<const CodeSample> train, int label,
                                                 const std::optional<std::string>& exclude_id) {
  std::vector<const CodeSample*> pool;
  for (const auto& s : train)
    if (s.label == label && (!exclude_id || s.id != *exclude_id)) pool.push_back(&s);
  return pool;
}

}  // namespace detail

struct BalancedSelectionOptions {
  std::size_t per_class = 3;  // 6 shots total
  std::optional<std::string> exclude_id;
};

// per_class vulnerable + per_class safe examples drawn uniformly, presented
// in a seeded shuffled order.
inline FewShotSelection select_random_balanced(std::span<const CodeSample> train,
                                               std::uint64_t seed,
                                               const BalancedSelectionOptions& opts = {}) {
  auto vulnerable = detail::class_pool(train, 1, opts.exclude_id);
  auto safe = detail::class_pool(train, 0, opts.exclude_id);
  require(vulnerable.size() >= opts.per_class && safe.size() >= opts.per_class,
          ErrorKind::kInsufficientData, "train set lacks enough examples of each class");
  Rng rng(mix_seed(seed, 0xf3));
  auto picked = detail::sample_without_replacement(std::move(vulnerable), opts.per_class, rng);
  auto picked_safe = detail::sample_without_replacement(std::move(safe), opts.per_class, rng);
  picked.insert(picked.end(), picked_safe.begin(), picked_safe.end());
  seeded_shuffle(picked, rng);

  FewShotSelection out;
  out.strategy = SelectionStrategy::kRandomBalanced;
  out.seed = seed;
  for (const auto* s : picked) out.examples.push_back(detail::make_example(*s));
  return out;
}

// Vulnerable examples share the test sample's CWE tag when possible; any
// shortfall is filled with random vulnerable samples and flagged degraded.
inline FewShotSelection select_same_cwe(std::span<const CodeSample> train,
                                        const std::optional<std::string>& test_cwe,
                                        std::uint64_t seed,
                                        const BalancedSelectionOptions& opts = {}) {
  require(!train.empty(), ErrorKind::kInsufficientData, "empty train set");
  auto vulnerable = detail::class_pool(train, 1, opts.exclude_id);
  auto safe = detail::class_pool(train, 0, opts.exclude_id);
  require(!vulnerable.empty(), ErrorKind::kInsufficientData, "train set has no vulnerable samples");
  require(!safe.empty(), ErrorKind::kInsufficientData, "train set has no safe samples");
  require(vulnerable.size() >= opts.per_class && safe.size() >= opts.per_class,
          ErrorKind::kInsufficientData, "train set lacks enough examples of each class");

  std::vector<const CodeSample*> matching, others;
  for (const auto* s : vulnerable) {
    (test_cwe && s->cwe && *s->cwe == *test_cwe ? matching : others).push_back(s);
  }
  Rng rng(mix_seed(seed, 0xc3e));
  FewShotSelection out;
  out.strategy = SelectionStrategy::kSameCwe;
  out.seed = seed;

  const std::size_t from_matching = std::min(opts.per_class, matching.size());
  auto picked = detail::sample_without_replacement(std::move(matching), from_matching, rng);
  if (from_matching < opts.per_class) {
    out.degraded = true;
    auto fill = detail::sample_without_replacement(std::move(others),
                                                   opts.per_class - from_matching, rng);
    picked.insert(picked.end(), fill.begin(), fill.end());
  }
  auto picked_safe = detail::sample_without_replacement(std::move(safe), opts.per_class, rng);
  picked.insert(picked.end(), picked_safe.begin(), picked_safe.end());
  seeded_shuffle(picked, rng);
  for (const auto* s : picked) out.examples.push_back(detail::make_example(*s));
  return out;
}

// Lookup from sample id to the train sample it names.
class SampleLookup {
 public:
  SampleLookup() = default;
  explicit SampleLookup(std::span<const CodeSample> samples) {
    for (const auto& s : samples) by_id_.emplace(s.id, &s);
  }

  const CodeSample& at(const std::string& id) const {
    auto it = by_id_.find(id);
    require(it != by_id_.end(), ErrorKind::kFormat, "unknown sample id " + id);
    return *it->second;
  }

 private:
  std::unordered_map<std::string, const CodeSample*> by_id_;
};

// The k nearest train samples, nearest first, labels carried unmodified.
inline FewShotSelection select_rag(const FlatIndex& index, const SampleLookup& train,
                                   std::span<const double> test_embedding,
                                   const RetrievalConfig& config = {},
                                   const std::optional<std::string>& exclude_id = std::nullopt) {
  std::unordered_set<std::string> exclude;
  if (exclude_id) exclude.insert(*exclude_id);
  FewShotSelection out;
  out.strategy = SelectionStrategy::kRag;
  for (const auto& n : index.query(test_embedding, config.k, exclude)) {
    auto ex = detail::make_example(train.at(n.id));
    ex.distance = n.distance;
    out.examples.push_back(std::move(ex));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parsing generated text

enum class ParsedLabel { kSafe = 0, kVulnerable = 1, kUnparseable = 2 };

// First whole-word, case-insensitive occurrence of "vulnerable" or "safe"
// decides the label. Word characters are [A-Za-z0-9_].
inline ParsedLabel parse_label(std::string_view generated) {
  auto is_word = [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
  };
  std::size_t i = 0;
  while (i < generated.size()) {
    if (!is_word(generated[i])) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < generated.size() && is_word(generated[j])) ++j;
    const auto word = detail::lower(generated.substr(i, j - i));
    if (word == "vulnerable") return ParsedLabel::kVulnerable;
    if (word == "safe") return ParsedLabel::kSafe;
    i = j;
  }
  return ParsedLabel::kUnparseable;
}

inline std::optional<int> to_label(ParsedLabel p) {
  if (p == ParsedLabel::kUnparseable) return std::nullopt;
  return static_cast<int>(p);
}

// Structured view of a rendered prompt, used by backends that consume the
// in-context examples. Code containing a line starting with the cues cannot
// be split unambiguously; such text ends up in the neighbouring field.
struct ParsedPrompt {
  std::vector<std::pair<std::string, std::string>> examples;  // code, label word
  std::string test_code;
};

inline ParsedPrompt parse_prompt(std::string_view text) {
  ParsedPrompt out;
  const std::string code_marker = std::string("\n") + std::string(kCodeCue);
  const std::string label_marker = std::string("\n") + std::string(kLabelCue);
  std::size_t pos = text.find(code_marker);
  if (pos == std::string_view::npos) {
    out.test_code = std::string(text);
    return out;
  }
  pos += code_marker.size();
  while (true) {
    const std::size_t label_at = text.find(label_marker, pos);
    if (label_at == std::string_view::npos) {
      out.test_code = std::string(text.substr(pos));
      return out;
    }
    std::string code(text.substr(pos, label_at - pos));
    const std::size_t word_begin = label_at + label_marker.size();
    const std::size_t next = text.find(code_marker, word_begin);
    if (next == std::string_view::npos) {
      out.test_code = std::move(code);
      return out;
    }
    out.examples.emplace_back(std::move(code),
                              std::string(text.substr(word_begin, next - word_begin)));
    pos = next + code_marker.size();
  }
}

}  // namespace vulnllm
