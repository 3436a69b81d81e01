#pragma once

#include <array>
#include <cctype>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "vulnllm/common.hpp"

namespace vulnllm {

// One source function with its binary label. label 1 = vulnerable.
struct CodeSample {
  std::string id;
  std::string code;
  int label = 0;
  std::optional<std::string> cwe;
  std::optional<std::string> origin;

  friend bool operator==(const CodeSample&, const CodeSample&) = default;
};

using Samples = std::vector<CodeSample>;

struct ClassCounts {
  std::size_t safe = 0;
  std::size_t vulnerable = 0;

  std::size_t total() const { return safe + vulnerable; }
  friend bool operator==(const ClassCounts&, const ClassCounts&) = default;
};

inline ClassCounts count_classes(std::span<const CodeSample> samples) {
  ClassCounts counts;
  for (const auto& s : samples) (s.label == 1 ? counts.vulnerable : counts.safe)++;
  return counts;
}

// ---------------------------------------------------------------------------
// Ingest

enum class InputFormat { kDelimited, kJsonLines };

struct ColumnMap {
  std::string code = "func_before";
  std::string label = "vul";
  std::optional<std::string> cwe;
  std::optional<std::string> id;
  // Pre-assigned split column (values train/valid/test) for published splits.
  std::optional<std::string> split;
};

struct IngestOptions {
  InputFormat format = InputFormat::kDelimited;
  ColumnMap columns;
  char delimiter = ',';
  std::optional<std::string> origin;
};

struct IngestResult {
  Samples samples;
  std::size_t skipped = 0;
  // id -> split tag, only populated when ColumnMap::split is set.
  std::map<std::string, std::string> split_tags;
};

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

inline std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// RFC 4180 style records: quoted fields may hold delimiters, doubled quotes
// and newlines. Returns one vector of fields per record.
inline std::vector<std::vector<std::string>> parse_delimited(std::string_view text, char delim) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool field_started = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    if (c == '"' && !field_started) {
      quoted = true;
      field_started = true;
    } else if (c == delim) {
      row.push_back(std::move(field));
      field.clear();
      field_started = false;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      field.clear();
      field_started = false;
      if (!(row.size() == 1 && row[0].empty())) rows.push_back(std::move(row));
      row.clear();
    } else {
      field.push_back(c);
      field_started = true;
    }
  }
  require(!quoted, ErrorKind::kFormat, "unterminated quoted field");
  if (field_started || !row.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace detail

// Accepts "0"/"1", integral numbers 0/1, and boolean words. Anything else is
// rejected so the caller can count the row as skipped.
inline std::optional<int> coerce_label(std::string_view raw) {
  const std::string v = detail::lower(detail::trim(raw));
  if (v == "0" || v == "false") return 0;
  if (v == "1" || v == "true") return 1;
  if (v.empty()) return std::nullopt;
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size() && (d == 0.0 || d == 1.0)) return static_cast<int>(d);
  } catch (const std::exception&) {
  }
  return std::nullopt;
}

inline std::optional<int> coerce_json_label(const nlohmann::json& value) {
  if (value.is_boolean()) return value.get<bool>() ? 1 : 0;
  if (value.is_number_integer() || value.is_number_unsigned()) {
    const auto i = value.get<long long>();
    if (i == 0 || i == 1) return static_cast<int>(i);
    return std::nullopt;
  }
  if (value.is_number_float()) {
    const double d = value.get<double>();
    if (d == 0.0 || d == 1.0) return static_cast<int>(d);
    return std::nullopt;
  }
  if (value.is_string()) return coerce_label(std::string_view(value.get_ref<const std::string&>()));
  return std::nullopt;
}

namespace detail {

struct RawRow {
  std::optional<std::string> code, label_text, cwe, id, split;
  std::optional<nlohmann::json> label_json;
};

inline void accept_row(IngestResult& result, std::unordered_set<std::string>& seen,
                       const RawRow& row, std::size_t row_index, const IngestOptions& opts,
                       const std::string& default_prefix) {
  std::optional<int> label;
  if (row.label_json) label = coerce_json_label(*row.label_json);
  else if (row.label_text) label = coerce_label(std::string_view(*row.label_text));
  if (!row.code || trim(*row.code).empty() || !label) {
    ++result.skipped;
    return;
  }
  CodeSample s;
  s.id = (row.id && !trim(*row.id).empty()) ? trim(*row.id)
                                            : default_prefix + ":" + std::to_string(row_index);
  require(seen.insert(s.id).second, ErrorKind::kFormat, "duplicate sample id " + s.id);
  s.code = *row.code;
  s.label = *label;
  if (row.cwe) {
    auto c = trim(*row.cwe);
    if (!c.empty()) s.cwe = std::move(c);
  }
  s.origin = opts.origin;
  if (row.split) result.split_tags[s.id] = lower(trim(*row.split));
  result.samples.push_back(std::move(s));
}

}  // namespace detail

// Parses a dataset held in memory. `source_name` seeds generated ids.
inline IngestResult ingest_text(std::string_view text, const IngestOptions& opts,
                                const std::string& source_name = "row") {
  IngestResult result;
  std::unordered_set<std::string> seen;
  const auto& cm = opts.columns;
  require(!cm.code.empty() && !cm.label.empty(), ErrorKind::kMissingColumn,
          "column map must name the code and label columns");

  if (opts.format == InputFormat::kDelimited) {
    auto rows = detail::parse_delimited(text, opts.delimiter);
    require(!rows.empty(), ErrorKind::kFormat, "missing header row");
    const auto& header = rows.front();
    auto find = [&](const std::string& name) -> std::optional<std::size_t> {
      for (std::size_t i = 0; i < header.size(); ++i)
        if (detail::trim(header[i]) == name) return i;
      return std::nullopt;
    };
    auto mandatory = [&](const std::string& name) {
      auto idx = find(name);
      require(idx.has_value(), ErrorKind::kMissingColumn, "mapped column not found: " + name);
      return *idx;
    };
    const auto code_col = mandatory(cm.code);
    const auto label_col = mandatory(cm.label);
    std::optional<std::size_t> cwe_col, id_col, split_col;
    if (cm.cwe) cwe_col = find(*cm.cwe);
    if (cm.id) id_col = mandatory(*cm.id);
    if (cm.split) split_col = mandatory(*cm.split);

    for (std::size_t r = 1; r < rows.size(); ++r) {
      const auto& fields = rows[r];
      auto at = [&](std::optional<std::size_t> col) -> std::optional<std::string> {
        if (!col || *col >= fields.size()) return std::nullopt;
        return fields[*col];
      };
      detail::RawRow raw;
      raw.code = at(code_col);
      raw.label_text = at(label_col);
      raw.cwe = at(cwe_col);
      raw.id = at(id_col);
      raw.split = at(split_col);
      detail::accept_row(result, seen, raw, r - 1, opts, source_name);
    }
  } else {
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t index = 0;
    bool code_seen = false, label_seen = false;
    while (std::getline(in, line)) {
      if (detail::trim(line).empty()) continue;
      const std::size_t row_index = index++;
      nlohmann::json obj;
      try {
        obj = nlohmann::json::parse(line);
      } catch (const nlohmann::json::parse_error&) {
        ++result.skipped;
        continue;
      }
      if (!obj.is_object()) {
        ++result.skipped;
        continue;
      }
      auto str = [&](const std::optional<std::string>& key) -> std::optional<std::string> {
        if (!key || !obj.contains(*key) || obj[*key].is_null()) return std::nullopt;
        const auto& v = obj[*key];
        return v.is_string() ? v.get<std::string>() : v.dump();
      };
      detail::RawRow raw;
      code_seen |= obj.contains(cm.code);
      label_seen |= obj.contains(cm.label);
      raw.code = obj.contains(cm.code) && obj[cm.code].is_string()
                     ? std::optional(obj[cm.code].get<std::string>())
                     : std::nullopt;
      if (obj.contains(cm.label)) raw.label_json = obj[cm.label];
      raw.cwe = str(cm.cwe);
      raw.id = str(cm.id);
      raw.split = str(cm.split);
      detail::accept_row(result, seen, raw, row_index, opts, source_name);
    }
    require(index == 0 || code_seen, ErrorKind::kMissingColumn,
            "mapped column not found: " + cm.code);
    require(index == 0 || label_seen, ErrorKind::kMissingColumn,
            "mapped column not found: " + cm.label);
  }
  require(!result.samples.empty(), ErrorKind::kNoValidRows,
          "no valid rows (skipped " + std::to_string(result.skipped) + ")");
  return result;
}

inline IngestResult ingest(const std::filesystem::path& path, const IngestOptions& opts) {
  require(std::filesystem::exists(path), ErrorKind::kIo, "missing file " + path.string());
  auto options = opts;
  if (!options.origin) options.origin = path.stem().string();
  return ingest_text(read_file(path), options, path.stem().string());
}

// ---------------------------------------------------------------------------
// Canonical JSON-lines sample format: {id, code, label, cwe?, origin?}

inline nlohmann::json to_json(const CodeSample& s) {
  nlohmann::json j = {{"id", s.id}, {"code", s.code}, {"label", s.label}};
  if (s.cwe) j["cwe"] = *s.cwe;
  if (s.origin) j["origin"] = *s.origin;
  return j;
}

inline CodeSample sample_from_json(const nlohmann::json& j) {
  CodeSample s;
  s.id = j.at("id").get<std::string>();
  s.code = j.at("code").get<std::string>();
  s.label = j.at("label").get<int>();
  if (j.contains("cwe") && j["cwe"].is_string()) s.cwe = j["cwe"].get<std::string>();
  if (j.contains("origin") && j["origin"].is_string()) s.origin = j["origin"].get<std::string>();
  require(s.label == 0 || s.label == 1, ErrorKind::kFormat, "label outside {0,1} for " + s.id);
  return s;
}

inline std::string to_jsonl(std::span<const CodeSample> samples) {
  std::string out;
  for (const auto& s : samples) {
    out += to_json(s).dump();
    out.push_back('\n');
  }
  return out;
}

inline Samples read_jsonl(const std::filesystem::path& path) {
  Samples out;
  std::istringstream in(read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    out.push_back(sample_from_json(nlohmann::json::parse(line)));
  }
  return out;
}

// Content fingerprint over the canonical serialization.
inline std::string fingerprint(std::span<const CodeSample> samples) {
  return sha256_hex(to_jsonl(samples));
}

// ---------------------------------------------------------------------------
// Split

struct SplitRatios {
  double train = 0.90;
  double valid = 0.05;
  double test = 0.05;
};

struct DatasetSplit {
  Samples train, valid, test;
  std::uint64_t seed = 0;
  SplitRatios ratios;
};

struct SplitSizes {
  std::size_t train, valid, test;
  friend bool operator==(const SplitSizes&, const SplitSizes&) = default;
};

inline void validate(const SplitRatios& r) {
  require(r.train > 0 && r.valid > 0 && r.test > 0, ErrorKind::kInvalidArgument,
          "split ratios must be positive");
  require(std::abs(r.train + r.valid + r.test - 1.0) <= 1e-9, ErrorKind::kInvalidArgument,
          "split ratios must sum to 1");
}

// valid and test get floor(N * ratio); the remainder goes to train. A part
// that would floor to zero takes one row from train so no split is empty.
inline SplitSizes split_sizes(std::size_t n, const SplitRatios& ratios) {
  validate(ratios);
  require(n >= 3, ErrorKind::kInsufficientData, "need at least 3 samples to split");
  auto part = [&](double ratio) {
    auto k = static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratio + 1e-9));
    return std::max<std::size_t>(k, 1);
  };
  const std::size_t valid = part(ratios.valid);
  const std::size_t test = part(ratios.test);
  require(valid + test < n, ErrorKind::kInsufficientData, "fewer samples than split parts");
  return {n - valid - test, valid, test};
}

inline DatasetSplit split(std::span<const CodeSample> samples, const SplitRatios& ratios,
                          std::uint64_t seed) {
  const auto sizes = split_sizes(samples.size(), ratios);
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(mix_seed(seed, 0x5b17));
  seeded_shuffle(order, rng);

  DatasetSplit out;
  out.seed = seed;
  out.ratios = ratios;
  // Parts keep input order so output files are stable under reordering of
  // the assignment permutation only.
  std::vector<int> part(samples.size(), 0);
  for (std::size_t i = 0; i < sizes.valid; ++i) part[order[i]] = 1;
  for (std::size_t i = sizes.valid; i < sizes.valid + sizes.test; ++i) part[order[i]] = 2;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    (part[i] == 0 ? out.train : part[i] == 1 ? out.valid : out.test).push_back(samples[i]);
  }
  return out;
}

// Adopts a published split: tags must be train/valid/test (validation and
// dev are accepted as aliases).
inline DatasetSplit split_by_tags(std::span<const CodeSample> samples,
                                  const std::map<std::string, std::string>& tags) {
  DatasetSplit out;
  for (const auto& s : samples) {
    auto it = tags.find(s.id);
    require(it != tags.end(), ErrorKind::kFormat, "no split tag for " + s.id);
    const auto& t = it->second;
    if (t == "train") out.train.push_back(s);
    else if (t == "valid" || t == "validation" || t == "dev") out.valid.push_back(s);
    else if (t == "test") out.test.push_back(s);
    else fail(ErrorKind::kFormat, "unknown split tag '" + t + "' for " + s.id);
  }
  const double n = static_cast<double>(samples.size());
  require(!out.train.empty() && !out.test.empty(), ErrorKind::kInsufficientData,
          "published split leaves train or test empty");
  out.ratios = {out.train.size() / n, out.valid.size() / n, out.test.size() / n};
  return out;
}

// ---------------------------------------------------------------------------
// Balancing

// Random under-sampling of the majority class down to the minority count.
// The minority class is kept intact and input order is preserved.
inline Samples balance_undersample(std::span<const CodeSample> samples, std::uint64_t seed) {
  const auto counts = count_classes(samples);
  require(counts.safe > 0 && counts.vulnerable > 0, ErrorKind::kInsufficientData,
          "balancing needs both classes present");
  if (counts.safe == counts.vulnerable) return Samples(samples.begin(), samples.end());

  const int majority = counts.safe > counts.vulnerable ? 0 : 1;
  const std::size_t keep = std::min(counts.safe, counts.vulnerable);
  std::vector<std::size_t> majority_rows;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].label == majority) majority_rows.push_back(i);

  Rng rng(mix_seed(seed, 0xba1a));
  // Partial Fisher-Yates: the first `keep` slots are a uniform subset.
  for (std::size_t i = 0; i < keep; ++i) {
    std::swap(majority_rows[i], majority_rows[i + uniform_index(rng, majority_rows.size() - i)]);
  }
  std::vector<bool> retained(samples.size(), false);
  for (std::size_t i = 0; i < keep; ++i) retained[majority_rows[i]] = true;

  Samples out;
  out.reserve(2 * keep);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].label != majority || retained[i]) out.push_back(samples[i]);
  }
  return out;
}

struct BalanceFlags {
  bool train = true;
  bool valid = true;
  bool test = true;
};

inline DatasetSplit balance_split(const DatasetSplit& in, const BalanceFlags& flags) {
  DatasetSplit out = in;
  if (flags.train) out.train = balance_undersample(in.train, mix_seed(in.seed, 1));
  if (flags.valid) out.valid = balance_undersample(in.valid, mix_seed(in.seed, 2));
  if (flags.test) out.test = balance_undersample(in.test, mix_seed(in.seed, 3));
  return out;
}

// Split manifest: ids per split plus seed and ratios.
inline nlohmann::json split_manifest(const DatasetSplit& s) {
  auto ids = [](const Samples& part) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& x : part) a.push_back(x.id);
    return a;
  };
  return {{"seed", s.seed},
          {"ratios", {s.ratios.train, s.ratios.valid, s.ratios.test}},
          {"train", ids(s.train)},
          {"valid", ids(s.valid)},
          {"test", ids(s.test)}};
}

}  // namespace vulnllm
