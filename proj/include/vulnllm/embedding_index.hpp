#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "vulnllm/common.hpp"
#include "vulnllm/corpus.hpp"

namespace vulnllm {

using EmbeddingVector = std::vector<double>;

// Component-wise arithmetic mean of a token-embedding sequence.
inline EmbeddingVector pool_mean(std::span<const EmbeddingVector> tokens) {
  require(!tokens.empty(), ErrorKind::kInvalidArgument, "pool_mean of an empty sequence");
  const std::size_t d = tokens.front().size();
  EmbeddingVector out(d, 0.0);
  for (const auto& t : tokens) {
    require(t.size() == d, ErrorKind::kDimensionMismatch, "token embeddings differ in dimension");
    for (std::size_t j = 0; j < d; ++j) out[j] += t[j];
  }
  const double n = static_cast<double>(tokens.size());
  for (auto& v : out) v /= n;
  return out;
}

struct RetrievalConfig {
  std::size_t k = 6;
};

struct Neighbor {
  std::string id;
  double distance = 0.0;  // true L2

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

// Exact L2 nearest-neighbour store. Rows are kept as 32-bit floats, which is
// also the on-disk representation, so a save/load cycle is bit-identical.
//
// File layout (little-endian):
//   char[8]  magic "VLFLATIX"
//   u32      version (1)
//   u64      N
//   u64      d
//   f32[N*d] row-major vectors
//   N x { u32 byte_length, byte_length bytes of UTF-8 id }
class FlatIndex {
 public:
  static constexpr char kMagic[8] = {'V', 'L', 'F', 'L', 'A', 'T', 'I', 'X'};
  static constexpr std::uint32_t kVersion = 1;

  explicit FlatIndex(std::size_t dim) : dim_(dim) {
    require(dim >= 1, ErrorKind::kInvalidArgument, "index dimension must be >= 1");
  }

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  const std::vector<std::string>& ids() const { return ids_; }

  std::span<const float> row(std::size_t i) const {
    return std::span<const float>(data_).subspan(i * dim_, dim_);
  }

  void add(std::string id, std::span<const double> vector) {
    require(vector.size() == dim_, ErrorKind::kDimensionMismatch,
            "vector for " + id + " has dimension " + std::to_string(vector.size()) +
                ", index expects " + std::to_string(dim_));
    for (double v : vector)
      require(std::isfinite(v), ErrorKind::kInvalidArgument, "non-finite embedding for " + id);
    require(id_set_.insert(id).second, ErrorKind::kInvalidArgument, "duplicate index id " + id);
    for (double v : vector) data_.push_back(static_cast<float>(v));
    ids_.push_back(std::move(id));
  }

  // k nearest rows by L2, ascending; ties broken by ascending id. Rows whose
  // id is in `exclude` are skipped (self-leakage guard for train queries).
  std::vector<Neighbor> query(std::span<const double> q, std::size_t k,
                              const std::unordered_set<std::string>& exclude = {}) const {
    require(q.size() == dim_, ErrorKind::kDimensionMismatch,
            "query dimension " + std::to_string(q.size()) + " != " + std::to_string(dim_));
    std::size_t eligible = size();
    for (const auto& id : exclude) eligible -= id_set_.count(id);
    require(k >= 1 && k <= eligible, ErrorKind::kOutOfRange,
            "k=" + std::to_string(k) + " outside [1, " + std::to_string(eligible) + "]");

    struct Hit {
      double sq;
      std::size_t row;
    };
    std::vector<Hit> hits;
    hits.reserve(eligible);
    for (std::size_t i = 0; i < size(); ++i) {
      if (!exclude.empty() && exclude.count(ids_[i])) continue;
      const float* r = data_.data() + i * dim_;
      double sq = 0.0;
      for (std::size_t j = 0; j < dim_; ++j) {
        const double diff = q[j] - static_cast<double>(r[j]);
        sq += diff * diff;
      }
      hits.push_back({sq, i});
    }
    auto before = [this](const Hit& a, const Hit& b) {
      if (a.sq != b.sq) return a.sq < b.sq;
      return ids_[a.row] < ids_[b.row];
    };
    std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(k), hits.end(),
                      before);
    std::vector<Neighbor> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) out.push_back({ids_[hits[i].row], std::sqrt(hits[i].sq)});
    return out;
  }

  std::string serialize() const {
    std::string out(kMagic, sizeof(kMagic));
    binio::put<std::uint32_t>(out, kVersion);
    binio::put<std::uint64_t>(out, size());
    binio::put<std::uint64_t>(out, dim_);
    for (float v : data_) binio::put<float>(out, v);
    for (const auto& id : ids_) {
      binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(id.size()));
      out += id;
    }
    return out;
  }

  static FlatIndex deserialize(std::string_view bytes) {
    binio::Reader in(bytes);
    require(in.bytes(sizeof(kMagic)) == std::string_view(kMagic, sizeof(kMagic)),
            ErrorKind::kFormat, "not a flat index file");
    require(in.get<std::uint32_t>() == kVersion, ErrorKind::kFormat, "unsupported index version");
    const auto n = in.get<std::uint64_t>();
    const auto d = in.get<std::uint64_t>();
    FlatIndex index(d);
    index.data_.resize(n * d);
    for (auto& v : index.data_) v = in.get<float>();
    for (std::uint64_t i = 0; i < n; ++i) {
      const auto len = in.get<std::uint32_t>();
      std::string id(in.bytes(len));
      require(index.id_set_.insert(id).second, ErrorKind::kFormat, "duplicate id in index file");
      index.ids_.push_back(std::move(id));
    }
    require(in.at_end(), ErrorKind::kFormat, "trailing bytes in index file");
    return index;
  }

  void save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }
  static FlatIndex load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

  friend bool operator==(const FlatIndex& a, const FlatIndex& b) {
    return a.dim_ == b.dim_ && a.ids_ == b.ids_ && a.data_ == b.data_;
  }

 private:
  std::size_t dim_;
  std::vector<float> data_;
  std::vector<std::string> ids_;
  std::unordered_set<std::string> id_set_;
};

using Embedder = std::function<EmbeddingVector(const CodeSample&)>;

// One row per sample in input order. An embedder failure aborts with the
// offending id attached.
inline FlatIndex build_index(std::span<const CodeSample> samples, const Embedder& embed) {
  require(!samples.empty(), ErrorKind::kInvalidArgument, "cannot index an empty sample set");
  std::optional<FlatIndex> index;
  for (const auto& s : samples) {
    EmbeddingVector v;
    try {
      v = embed(s);
    } catch (const Error& e) {
      throw Error(e.kind(), "embedding failed for " + s.id + ": " + e.what());
    }
    if (!index) index.emplace(v.size());
    index->add(s.id, v);
  }
  return std::move(*index);
}

}  // namespace vulnllm
