#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "vulnllm/common.hpp"
#include "vulnllm/embedding_index.hpp"
#include "vulnllm/prompting.hpp"

namespace vulnllm {

// ---------------------------------------------------------------------------
// Low-rank adapters

struct AdapterTarget {
  std::string name;
  bool learnable = true;
};

struct AdapterConfig {
  int rank = 16;
  double alpha = 8.0;
  std::vector<AdapterTarget> targets = {
      {"q_proj", true}, {"k_proj", true}, {"v_proj", true}, {"o_proj", true}};
  std::uint64_t init_seed = 0;

  void validate() const {
    require(rank >= 1, ErrorKind::kInvalidArgument, "adapter rank must be >= 1");
    require(alpha > 0.0, ErrorKind::kInvalidArgument, "adapter alpha must be > 0");
    require(!targets.empty(), ErrorKind::kInvalidArgument, "adapter target list is empty");
  }
};

// Trainable update W' = W + (alpha / r) * B * A around a frozen W (d_out x d_in).
struct LowRankAdapter {
  Eigen::MatrixXd A;  // r x d_in
  Eigen::MatrixXd B;  // d_out x r
  int rank = 1;
  double alpha = 1.0;

  double scale() const { return alpha / static_cast<double>(rank); }
  Eigen::Index d_in() const { return A.cols(); }
  Eigen::Index d_out() const { return B.rows(); }
};

// A ~ N(0, 1/d_in) from the seed, B = 0 so a fresh adapter adds nothing.
inline LowRankAdapter make_adapter(Eigen::Index d_out, Eigen::Index d_in, int rank, double alpha,
                                   std::uint64_t seed) {
  require(rank >= 1 && alpha > 0.0, ErrorKind::kInvalidArgument, "invalid adapter rank/alpha");
  LowRankAdapter a;
  a.rank = rank;
  a.alpha = alpha;
  a.A.resize(rank, d_in);
  Rng rng(seed);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(d_in));
  for (Eigen::Index i = 0; i < a.A.rows(); ++i)
    for (Eigen::Index j = 0; j < a.A.cols(); ++j) a.A(i, j) = stddev * standard_normal(rng);
  a.B = Eigen::MatrixXd::Zero(d_out, rank);
  return a;
}

// W x + (alpha/r) B (A x), never forming the dense d_out x d_in update.
inline Eigen::VectorXd apply_adapter(const Eigen::MatrixXd& W, const LowRankAdapter& adapter,
                                     const Eigen::VectorXd& x) {
  require(adapter.A.rows() == adapter.rank && adapter.B.cols() == adapter.rank,
          ErrorKind::kDimensionMismatch, "adapter factors disagree with rank");
  require(W.cols() == x.size() && adapter.A.cols() == W.cols() && adapter.B.rows() == W.rows(),
          ErrorKind::kDimensionMismatch, "adapter/weight/input shapes are inconsistent");
  const Eigen::VectorXd u = adapter.A * x;
  return W * x + adapter.scale() * (adapter.B * u);
}

// One logistic output unit over a d-dimensional representation.
struct ClassifierHead {
  Eigen::VectorXd weights;
  double bias = 0.0;

  static ClassifierHead zeros(Eigen::Index d) { return {Eigen::VectorXd::Zero(d), 0.0}; }

  double logit(const Eigen::VectorXd& h) const { return weights.dot(h) + bias; }
};

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// Binary cross-entropy on a logit, stable for large |z|.
inline double bce_with_logit(double z, int label) {
  return std::max(z, 0.0) - static_cast<double>(label) * z + std::log1p(std::exp(-std::abs(z)));
}

// ---------------------------------------------------------------------------
// Backend contract

struct Capabilities {
  bool generative = false;
  bool classifier = false;
  bool embedder = false;
};

struct BackendDescriptor {
  std::string name;
  Capabilities capabilities;
  std::size_t hidden_dim = 1;
  std::optional<int> quantization_bits;
  bool trainable = false;
};

// Which trainable set an optimisation step touches: generative tuning moves
// only adapters, classifier tuning moves adapters and the head.
enum class Fashion { kGenerative, kClassifier };

// Classifier fashion: text is the source code. Generative fashion: text is a
// rendered prompt and the label selects the target word.
struct TrainingExample {
  std::string text;
  int label = 0;
};

// Immutable copy of every trainable parameter. Tokens are bound to the
// backend instance and adapter layout that produced them.
class StateToken {
 public:
  StateToken() = default;
  StateToken(std::uint64_t owner, std::uint64_t serial, std::uint64_t layout,
             std::vector<double> values)
      : owner_(owner),
        serial_(serial),
        layout_(layout),
        values_(std::make_shared<const std::vector<double>>(std::move(values))) {}

  std::uint64_t owner() const { return owner_; }
  std::uint64_t serial() const { return serial_; }
  std::uint64_t layout() const { return layout_; }
  const std::vector<double>& values() const { return *values_; }
  bool valid() const { return static_cast<bool>(values_); }

  friend bool operator==(const StateToken& a, const StateToken& b) {
    return a.owner_ == b.owner_ && a.serial_ == b.serial_ && a.layout_ == b.layout_;
  }

 private:
  std::uint64_t owner_ = 0;
  std::uint64_t serial_ = 0;
  std::uint64_t layout_ = 0;
  std::shared_ptr<const std::vector<double>> values_;
};

class Backend {
 public:
  virtual ~Backend() = default;

  virtual const BackendDescriptor& descriptor() const = 0;

  virtual std::string generate(const RenderedPrompt& prompt, std::size_t max_new_tokens) const {
    (void)prompt;
    (void)max_new_tokens;
    missing("generative");
  }
  virtual EmbeddingVector embed(std::string_view code) const {
    (void)code;
    missing("embedder");
  }
  // Probability of the vulnerable class.
  virtual double classify(std::string_view code) const {
    (void)code;
    missing("classifier");
  }

  virtual StateToken snapshot() const = 0;
  virtual void restore(const StateToken& token) = 0;
  virtual std::unique_ptr<Backend> clone() const = 0;

  // Fingerprint of every frozen parameter; must never change under tuning.
  virtual std::string base_fingerprint() const = 0;

  // Trainable surface. Parameters are exposed as one flat vector per fashion
  // so optimisers and finite-difference checks stay backend-agnostic.
  virtual std::size_t parameter_count(Fashion) const { missing("trainable"); }
  virtual std::vector<double> parameters(Fashion) const { missing("trainable"); }
  virtual void set_parameters(Fashion, std::span<const double>) { missing("trainable"); }
  // Adds d(loss)/d(params) into `grad` and returns the example's loss.
  virtual double loss_and_gradient(Fashion, const TrainingExample&, std::span<double>) const {
    missing("trainable");
  }

  virtual void save_checkpoint(const std::filesystem::path&) const { missing("checkpoint"); }
  virtual void load_checkpoint(const std::filesystem::path&) { missing("checkpoint"); }

  // Embeds a sample; convenience for build_index.
  Embedder embedder() const {
    return [this](const CodeSample& s) { return embed(s.code); };
  }

 protected:
  [[noreturn]] void missing(const char* capability) const {
    fail(ErrorKind::kCapabilityMissing,
         "backend '" + descriptor().name + "' lacks the " + capability + " capability");
  }
};

inline void require_capability(const Backend& b, bool present, const char* capability) {
  require(present, ErrorKind::kCapabilityMissing,
          "backend '" + b.descriptor().name + "' lacks the " + capability + " capability");
}

// ---------------------------------------------------------------------------
// Checkpoint layout (little-endian):
//   char[8]  magic "VLCKPT01"
//   u32      tensor count
//   per tensor: u32 name length, name bytes, u32 rows, u32 cols,
//               f32[rows*cols] row-major values

struct NamedTensor {
  std::string name;
  Eigen::MatrixXd values;
};

inline std::string encode_checkpoint(const std::vector<NamedTensor>& tensors) {
  std::string out = "VLCKPT01";
  binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.values.rows()));
    binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.values.cols()));
    for (Eigen::Index i = 0; i < t.values.rows(); ++i)
      for (Eigen::Index j = 0; j < t.values.cols(); ++j)
        binio::put<float>(out, static_cast<float>(t.values(i, j)));
  }
  return out;
}

inline std::vector<NamedTensor> decode_checkpoint(std::string_view bytes) {
  binio::Reader in(bytes);
  require(in.bytes(8) == "VLCKPT01", ErrorKind::kFormat, "not a checkpoint file");
  const auto count = in.get<std::uint32_t>();
  std::vector<NamedTensor> out;
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedTensor t;
    t.name = std::string(in.bytes(in.get<std::uint32_t>()));
    const auto rows = in.get<std::uint32_t>();
    const auto cols = in.get<std::uint32_t>();
    t.values.resize(rows, cols);
    for (std::uint32_t i = 0; i < rows; ++i)
      for (std::uint32_t j = 0; j < cols; ++j) t.values(i, j) = in.get<float>();
    out.push_back(std::move(t));
  }
  require(in.at_end(), ErrorKind::kFormat, "trailing bytes in checkpoint");
  return out;
}

// ---------------------------------------------------------------------------
// Toy backend
//
// Desk-scale stand-in that honours the full contract:
//   * tokens: identifiers, numbers and single punctuation characters;
//   * token embedding: one-hot at bucket fnv1a64(token) mod d, mean pooled;
//   * backbone: four frozen orthogonal d x d projections (q, k, v, o) applied
//     in sequence, each optionally wrapped by a low-rank adapter;
//   * classifier: ClassifierHead on the backbone output;
//   * generation: a frozen label-word head scores "Vulnerable" vs "Safe".
//     It encodes prior knowledge of the marker tokens:
//       logit = strength * (marker_count / token_count - threshold)
//     for the unadapted backbone, plus an in-context term
//       icl_weight * mean_j sign_j * cos(h_test, h_example_j)
//     when the prompt carries examples. The word is "Vulnerable" iff the
//     logit is positive.

struct ToyBackendOptions {
  std::string name = "toy";
  std::size_t dim = 256;
  std::uint64_t seed = 0;
  Capabilities capabilities{true, true, true};
  std::vector<std::string> markers = {"strcpy", "gets", "sprintf"};
  double prior_strength = 8.0;
  double prior_threshold = 1e-3;
  double icl_weight = 0.5;
  enum class Pooling { kMean, kFirst } pooling = Pooling::kMean;
  std::optional<int> quantization_bits;
  AdapterConfig adapters;
};

class ToyBackend final : public Backend {
 public:
  static inline const std::vector<std::string> kLayerNames = {"q_proj", "k_proj", "v_proj",
                                                              "o_proj"};

  explicit ToyBackend(ToyBackendOptions options = {})
      : options_(std::move(options)), instance_id_(next_instance_id()) {
    require(options_.dim >= 1, ErrorKind::kInvalidArgument, "toy backend dim must be >= 1");
    descriptor_.name = options_.name;
    descriptor_.capabilities = options_.capabilities;
    descriptor_.hidden_dim = options_.dim;
    descriptor_.quantization_bits = options_.quantization_bits;
    descriptor_.trainable = true;
    base_ = make_base(options_);
    head_ = ClassifierHead::zeros(dim());
    attach_adapters(options_.adapters);
  }

  ToyBackend(const ToyBackend& other)
      : Backend(other),
        options_(other.options_),
        descriptor_(other.descriptor_),
        base_(other.base_),
        adapters_(other.adapters_),
        head_(other.head_),
        layout_(other.layout_),
        instance_id_(next_instance_id()) {}

  ToyBackend& operator=(const ToyBackend&) = delete;

  const BackendDescriptor& descriptor() const override { return descriptor_; }
  const ToyBackendOptions& options() const { return options_; }
  Eigen::Index dim() const { return static_cast<Eigen::Index>(options_.dim); }

  // Replaces every adapter with a fresh (B = 0) one. Outstanding snapshot
  // tokens become stale.
  void attach_adapters(const AdapterConfig& config) {
    config.validate();
    std::vector<std::optional<Slot>> slots(kLayerNames.size());
    for (const auto& t : config.targets) {
      auto it = std::find(kLayerNames.begin(), kLayerNames.end(), t.name);
      require(it != kLayerNames.end(), ErrorKind::kInvalidArgument,
              "toy backend has no weight matrix named '" + t.name + "'");
      const auto l = static_cast<std::size_t>(it - kLayerNames.begin());
      require(!slots[l].has_value(), ErrorKind::kInvalidArgument,
              "adapter target listed twice: " + t.name);
      slots[l] = Slot{make_adapter(dim(), dim(), config.rank, config.alpha,
                                   mix_seed(config.init_seed ^ options_.seed, 100 + l)),
                      t.learnable};
    }
    adapters_ = std::move(slots);
    options_.adapters = config;
    ++layout_;
  }

  void detach_adapters() {
    adapters_.assign(kLayerNames.size(), std::nullopt);
    ++layout_;
  }

  std::optional<LowRankAdapter> adapter(const std::string& layer) const {
    const auto& slot = adapters_[layer_index(layer)];
    if (!slot) return std::nullopt;
    return slot->adapter;
  }

  // Overwrites the factors of an attached adapter (shapes must match).
  void set_adapter(const std::string& layer, const LowRankAdapter& values) {
    auto& slot = adapters_[layer_index(layer)];
    require(slot.has_value(), ErrorKind::kInvalidArgument, "no adapter attached to " + layer);
    require(values.A.rows() == slot->adapter.A.rows() && values.A.cols() == slot->adapter.A.cols() &&
                values.B.rows() == slot->adapter.B.rows() &&
                values.B.cols() == slot->adapter.B.cols(),
            ErrorKind::kDimensionMismatch, "adapter factors have the wrong shape");
    slot->adapter.A = values.A;
    slot->adapter.B = values.B;
  }

  static std::size_t layer_index(const std::string& layer) {
    auto it = std::find(kLayerNames.begin(), kLayerNames.end(), layer);
    require(it != kLayerNames.end(), ErrorKind::kInvalidArgument, "unknown layer " + layer);
    return static_cast<std::size_t>(it - kLayerNames.begin());
  }

  ClassifierHead& head() { return head_; }
  const ClassifierHead& head() const { return head_; }

  static std::vector<std::string> tokenize(std::string_view code) {
    std::vector<std::string> tokens;
    std::size_t i = 0;
    auto ident = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; };
    while (i < code.size()) {
      const char c = code[i];
      if (std::isspace(static_cast<unsigned char>(c))) {
        ++i;
      } else if (ident(c)) {
        std::size_t j = i;
        while (j < code.size() && ident(code[j])) ++j;
        tokens.emplace_back(code.substr(i, j - i));
        i = j;
      } else {
        tokens.emplace_back(1, c);
        ++i;
      }
    }
    return tokens;
  }

  std::size_t bucket(std::string_view token) const { return fnv1a64(token) % options_.dim; }

  // Pooled token embedding fed to the backbone.
  Eigen::VectorXd pooled_input(std::string_view code) const {
    const auto tokens = tokenize(code);
    require(!tokens.empty(), ErrorKind::kInvalidArgument, "cannot embed empty code");
    Eigen::VectorXd x = Eigen::VectorXd::Zero(dim());
    if (options_.pooling == ToyBackendOptions::Pooling::kFirst) {
      x(static_cast<Eigen::Index>(bucket(tokens.front()))) = 1.0;
      return x;
    }
    for (const auto& t : tokens) x(static_cast<Eigen::Index>(bucket(t))) += 1.0;
    return x / static_cast<double>(tokens.size());
  }

  Eigen::VectorXd hidden(std::string_view code) const { return forward(pooled_input(code)).back(); }

  EmbeddingVector embed(std::string_view code) const override {
    require_capability(*this, descriptor_.capabilities.embedder, "embedder");
    const auto h = hidden(code);
    return EmbeddingVector(h.data(), h.data() + h.size());
  }

  double classify(std::string_view code) const override {
    require_capability(*this, descriptor_.capabilities.classifier, "classifier");
    return sigmoid(head_.logit(hidden(code)));
  }

  // Label-word logit for a rendered prompt (positive means "Vulnerable").
  double generative_logit(std::string_view prompt_text) const {
    const auto parsed = parse_prompt(prompt_text);
    const auto h = hidden(parsed.test_code);
    double z = base_->lm_weights.dot(h) + base_->lm_bias;
    if (!parsed.examples.empty() && options_.icl_weight != 0.0) {
      double acc = 0.0;
      const double hn = h.norm();
      for (const auto& [code, word] : parsed.examples) {
        const auto label = parse_label(word);
        if (label == ParsedLabel::kUnparseable) continue;
        const auto he = hidden(code);
        const double denom = hn * he.norm();
        const double cosine = denom > 0 ? h.dot(he) / denom : 0.0;
        acc += (label == ParsedLabel::kVulnerable ? 1.0 : -1.0) * cosine;
      }
      z += options_.icl_weight * acc / static_cast<double>(parsed.examples.size());
    }
    return z;
  }

  std::string generate(const RenderedPrompt& prompt, std::size_t max_new_tokens) const override {
    require_capability(*this, descriptor_.capabilities.generative, "generative");
    if (max_new_tokens == 0) return {};
    return std::string(generative_logit(prompt.text) > 0.0 ? kVulnerableWord : kSafeWord);
  }

  // --- trainable surface ----------------------------------------------------

  std::size_t parameter_count(Fashion fashion) const override {
    std::size_t n = 0;
    for (const auto& slot : adapters_)
      if (slot && slot->learnable)
        n += static_cast<std::size_t>(slot->adapter.A.size() + slot->adapter.B.size());
    if (fashion == Fashion::kClassifier) n += static_cast<std::size_t>(dim()) + 1;
    return n;
  }

  std::vector<double> parameters(Fashion fashion) const override {
    std::vector<double> out;
    out.reserve(parameter_count(fashion));
    for (const auto& slot : adapters_) {
      if (!slot || !slot->learnable) continue;
      append(out, slot->adapter.A);
      append(out, slot->adapter.B);
    }
    if (fashion == Fashion::kClassifier) {
      append(out, head_.weights);
      out.push_back(head_.bias);
    }
    return out;
  }

  void set_parameters(Fashion fashion, std::span<const double> values) override {
    require(values.size() == parameter_count(fashion), ErrorKind::kDimensionMismatch,
            "parameter vector has the wrong length");
    std::size_t pos = 0;
    for (auto& slot : adapters_) {
      if (!slot || !slot->learnable) continue;
      extract(values, pos, slot->adapter.A);
      extract(values, pos, slot->adapter.B);
    }
    if (fashion == Fashion::kClassifier) {
      extract(values, pos, head_.weights);
      head_.bias = values[pos++];
    }
  }

  double loss_and_gradient(Fashion fashion, const TrainingExample& example,
                           std::span<double> grad) const override {
    require(grad.size() == parameter_count(fashion), ErrorKind::kDimensionMismatch,
            "gradient buffer has the wrong length");
    require(example.label == 0 || example.label == 1, ErrorKind::kInvalidArgument,
            "training label outside {0,1}");
    double z;
    std::vector<Eigen::VectorXd> hs;
    Eigen::VectorXd g;
    if (fashion == Fashion::kClassifier) {
      require_capability(*this, descriptor_.capabilities.classifier, "classifier");
      hs = forward(pooled_input(example.text));
      z = head_.logit(hs.back());
      g = (sigmoid(z) - example.label) * head_.weights;
    } else {
      require_capability(*this, descriptor_.capabilities.generative, "generative");
      // The in-context term is treated as a constant; only the test code's
      // path through the backbone is differentiated.
      const auto parsed = parse_prompt(example.text);
      hs = forward(pooled_input(parsed.test_code));
      z = generative_logit(example.text);
      g = (sigmoid(z) - example.label) * base_->lm_weights;
    }
    const double dz = sigmoid(z) - example.label;

    // Offsets of each learnable adapter inside the flat vector.
    std::vector<std::size_t> offsets(adapters_.size(), 0);
    std::size_t pos = 0;
    for (std::size_t l = 0; l < adapters_.size(); ++l) {
      offsets[l] = pos;
      if (adapters_[l] && adapters_[l]->learnable)
        pos += static_cast<std::size_t>(adapters_[l]->adapter.A.size() +
                                        adapters_[l]->adapter.B.size());
    }
    if (fashion == Fashion::kClassifier) {
      const Eigen::VectorXd& h = hs.back();
      for (Eigen::Index i = 0; i < h.size(); ++i) grad[pos + static_cast<std::size_t>(i)] += dz * h(i);
      grad[pos + static_cast<std::size_t>(h.size())] += dz;
    }

    for (std::size_t l = adapters_.size(); l-- > 0;) {
      const Eigen::MatrixXd& W = base_->layers[l];
      const auto& slot = adapters_[l];
      if (!slot) {
        g = W.transpose() * g;
        continue;
      }
      const auto& ad = slot->adapter;
      const double s = ad.scale();
      const Eigen::VectorXd& h_in = hs[l];
      const Eigen::VectorXd t = ad.B.transpose() * g;
      if (slot->learnable) {
        const Eigen::VectorXd u = ad.A * h_in;
        std::size_t off = offsets[l];
        // dA = s * t h^T, dB = s * g u^T, both row-major.
        for (Eigen::Index i = 0; i < ad.A.rows(); ++i)
          for (Eigen::Index j = 0; j < ad.A.cols(); ++j) grad[off++] += s * t(i) * h_in(j);
        for (Eigen::Index i = 0; i < ad.B.rows(); ++i)
          for (Eigen::Index j = 0; j < ad.B.cols(); ++j) grad[off++] += s * g(i) * u(j);
      }
      g = W.transpose() * g + s * (ad.A.transpose() * t);
    }
    return bce_with_logit(z, example.label);
  }

  // --- state ----------------------------------------------------------------

  StateToken snapshot() const override {
    std::vector<double> values;
    for (const auto& slot : adapters_) {
      if (!slot) continue;
      append(values, slot->adapter.A);
      append(values, slot->adapter.B);
    }
    append(values, head_.weights);
    values.push_back(head_.bias);
    return StateToken(instance_id_, ++serial_, layout_, std::move(values));
  }

  void restore(const StateToken& token) override {
    require(token.valid(), ErrorKind::kStaleToken, "empty state token");
    require(token.owner() == instance_id_, ErrorKind::kStaleToken,
            "state token belongs to another backend instance");
    require(token.layout() == layout_, ErrorKind::kStaleToken,
            "state token predates an adapter re-attachment");
    const auto& values = token.values();
    std::size_t pos = 0;
    for (auto& slot : adapters_) {
      if (!slot) continue;
      extract(values, pos, slot->adapter.A);
      extract(values, pos, slot->adapter.B);
    }
    extract(values, pos, head_.weights);
    head_.bias = values[pos++];
  }

  std::unique_ptr<Backend> clone() const override { return std::make_unique<ToyBackend>(*this); }

  std::string base_fingerprint() const override {
    std::string bytes;
    for (const auto& W : base_->layers)
      bytes.append(reinterpret_cast<const char*>(W.data()),
                   static_cast<std::size_t>(W.size()) * sizeof(double));
    bytes.append(reinterpret_cast<const char*>(base_->lm_weights.data()),
                 static_cast<std::size_t>(base_->lm_weights.size()) * sizeof(double));
    binio::put<double>(bytes, base_->lm_bias);
    return sha256_hex(bytes);
  }

  const Eigen::MatrixXd& base_weight(std::size_t layer) const { return base_->layers.at(layer); }

  std::vector<NamedTensor> checkpoint_tensors() const {
    std::vector<NamedTensor> out;
    for (std::size_t l = 0; l < adapters_.size(); ++l) {
      if (!adapters_[l]) continue;
      out.push_back({kLayerNames[l] + ".lora_A", adapters_[l]->adapter.A});
      out.push_back({kLayerNames[l] + ".lora_B", adapters_[l]->adapter.B});
    }
    out.push_back({"head.weight", head_.weights.transpose()});
    out.push_back({"head.bias", Eigen::MatrixXd::Constant(1, 1, head_.bias)});
    return out;
  }

  void save_checkpoint(const std::filesystem::path& path) const override {
    write_file_atomic(path, encode_checkpoint(checkpoint_tensors()));
  }

  void load_checkpoint(const std::filesystem::path& path) override {
    auto tensors = decode_checkpoint(read_file(path));
    std::map<std::string, Eigen::MatrixXd> by_name;
    for (auto& t : tensors) by_name[t.name] = std::move(t.values);
    auto take = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) {
      auto it = by_name.find(name);
      require(it != by_name.end(), ErrorKind::kFormat, "checkpoint lacks tensor " + name);
      require(it->second.rows() == rows && it->second.cols() == cols, ErrorKind::kFormat,
              "checkpoint tensor " + name + " has the wrong shape");
      return it->second;
    };
    for (std::size_t l = 0; l < adapters_.size(); ++l) {
      if (!adapters_[l]) continue;
      auto& ad = adapters_[l]->adapter;
      ad.A = take(kLayerNames[l] + ".lora_A", ad.A.rows(), ad.A.cols());
      ad.B = take(kLayerNames[l] + ".lora_B", ad.B.rows(), ad.B.cols());
    }
    head_.weights = take("head.weight", 1, dim()).transpose();
    head_.bias = take("head.bias", 1, 1)(0, 0);
  }

 private:
  struct Slot {
    LowRankAdapter adapter;
    bool learnable = true;
  };

  struct BaseWeights {
    std::vector<Eigen::MatrixXd> layers;
    Eigen::VectorXd lm_weights;
    double lm_bias = 0.0;
  };

  static std::uint64_t next_instance_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  static std::shared_ptr<const BaseWeights> make_base(const ToyBackendOptions& o) {
    const auto d = static_cast<Eigen::Index>(o.dim);
    auto base = std::make_shared<BaseWeights>();
    Eigen::MatrixXd chain = Eigen::MatrixXd::Identity(d, d);
    for (std::size_t l = 0; l < kLayerNames.size(); ++l) {
      Rng rng(mix_seed(o.seed, l));
      Eigen::MatrixXd g(d, d);
      for (Eigen::Index i = 0; i < d; ++i)
        for (Eigen::Index j = 0; j < d; ++j) g(i, j) = standard_normal(rng);
      Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
      chain = q * chain;
      base->layers.push_back(std::move(q));
    }
    // Label-word head: pulls marker buckets through the orthogonal chain so
    // that lm_weights . (chain x) = strength * (marker mass of x).
    Eigen::VectorXd marker_mask = Eigen::VectorXd::Zero(d);
    for (const auto& m : o.markers) marker_mask(static_cast<Eigen::Index>(fnv1a64(m) % o.dim)) = 1.0;
    base->lm_weights = o.prior_strength * (chain * marker_mask);
    base->lm_bias = -o.prior_strength * o.prior_threshold;
    return base;
  }

  // Hidden states h_0 .. h_L for one pooled input.
  std::vector<Eigen::VectorXd> forward(const Eigen::VectorXd& x) const {
    std::vector<Eigen::VectorXd> hs;
    hs.reserve(kLayerNames.size() + 1);
    hs.push_back(x);
    for (std::size_t l = 0; l < kLayerNames.size(); ++l) {
      const auto& slot = adapters_[l];
      hs.push_back(slot ? apply_adapter(base_->layers[l], slot->adapter, hs.back())
                        : Eigen::VectorXd(base_->layers[l] * hs.back()));
    }
    return hs;
  }

  template <typename Derived>
  static void append(std::vector<double>& out, const Eigen::MatrixBase<Derived>& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) out.push_back(m(i, j));
  }

  template <typename Derived>
  static void extract(std::span<const double> values, std::size_t& pos,
                      Eigen::MatrixBase<Derived>& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = values[pos++];
  }

  ToyBackendOptions options_;
  BackendDescriptor descriptor_;
  std::shared_ptr<const BaseWeights> base_;
  std::vector<std::optional<Slot>> adapters_;
  ClassifierHead head_;
  std::uint64_t layout_ = 0;
  std::uint64_t instance_id_;
  mutable std::atomic<std::uint64_t> serial_{0};
};

// ---------------------------------------------------------------------------
// Registry

using BackendOptions = std::map<std::string, std::string>;
using BackendFactory = std::function<std::unique_ptr<Backend>(const BackendOptions&)>;

namespace detail {

inline std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(text);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline ToyBackendOptions toy_options(const BackendOptions& opts, std::string name,
                                     Capabilities caps) {
  ToyBackendOptions o;
  o.name = std::move(name);
  o.capabilities = caps;
  auto get = [&](const std::string& key) -> std::optional<std::string> {
    auto it = opts.find(key);
    if (it == opts.end()) return std::nullopt;
    return it->second;
  };
  try {
    if (auto v = get("dim")) o.dim = std::stoull(*v);
    if (auto v = get("seed")) o.seed = std::stoull(*v);
    if (auto v = get("markers")) o.markers = split_list(*v);
    if (auto v = get("prior_strength")) o.prior_strength = std::stod(*v);
    if (auto v = get("icl_weight")) o.icl_weight = std::stod(*v);
    if (auto v = get("quantization_bits")) o.quantization_bits = std::stoi(*v);
    if (auto v = get("rank")) o.adapters.rank = std::stoi(*v);
    if (auto v = get("alpha")) o.adapters.alpha = std::stod(*v);
    if (auto v = get("targets")) {
      o.adapters.targets.clear();
      for (const auto& t : split_list(*v)) o.adapters.targets.push_back({t, true});
    }
    if (auto v = get("frozen_targets")) {
      for (const auto& t : split_list(*v))
        for (auto& target : o.adapters.targets)
          if (target.name == t) target.learnable = false;
    }
    if (auto v = get("pooling")) {
      if (*v == "mean") o.pooling = ToyBackendOptions::Pooling::kMean;
      else if (*v == "first") o.pooling = ToyBackendOptions::Pooling::kFirst;
      else fail(ErrorKind::kInvalidArgument, "unknown pooling '" + *v + "'");
    }
  } catch (const std::invalid_argument&) {
    fail(ErrorKind::kInvalidArgument, "malformed toy backend option");
  } catch (const std::out_of_range&) {
    fail(ErrorKind::kInvalidArgument, "toy backend option out of range");
  }
  return o;
}

}  // namespace detail

class BackendRegistry {
 public:
  static BackendRegistry& instance() {
    static BackendRegistry registry;
    return registry;
  }

  void add(const std::string& name, BackendFactory factory) {
    std::lock_guard lock(mutex_);
    factories_[name] = std::move(factory);
  }

  std::unique_ptr<Backend> create(const std::string& name, const BackendOptions& options = {}) const {
    BackendFactory factory;
    {
      std::lock_guard lock(mutex_);
      auto it = factories_.find(name);
      require(it != factories_.end(), ErrorKind::kInvalidArgument, "unknown backend '" + name + "'");
      factory = it->second;
    }
    return factory(options);
  }

  std::vector<std::string> names() const {
    std::lock_guard lock(mutex_);
    std::vector<std::string> out;
    for (const auto& [n, _] : factories_) out.push_back(n);
    return out;
  }

 private:
  BackendRegistry() {
    factories_["toy"] = [](const BackendOptions& o) {
      return std::make_unique<ToyBackend>(detail::toy_options(o, "toy", {true, true, true}));
    };
    factories_["toy-classifier"] = [](const BackendOptions& o) {
      return std::make_unique<ToyBackend>(
          detail::toy_options(o, "toy-classifier", {false, true, true}));
    };
    factories_["toy-generative"] = [](const BackendOptions& o) {
      return std::make_unique<ToyBackend>(
          detail::toy_options(o, "toy-generative", {true, false, true}));
    };
  }

  mutable std::mutex mutex_;
  std::map<std::string, BackendFactory> factories_;
};

}  // namespace vulnllm
