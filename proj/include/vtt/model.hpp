#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "vtt/error.hpp"
#include "vtt/features.hpp"
#include "vtt/rng.hpp"
#include "vtt/tensor.hpp"
#include "vtt/tokenizer.hpp"

namespace vtt {

enum class AttentionKind { kMemoryScaledDot, kXLinear };

std::string to_string(AttentionKind kind);
AttentionKind attention_kind_from_string(const std::string& name);

struct ModelConfig {
  std::size_t n_enc = 8;
  std::size_t n_dec = 8;
  std::size_t n_heads = 8;
  std::size_t d_model = 512;
  std::size_t d_ff = 2048;
  std::size_t d_memory = 64;  // memory slots per encoder self-attention
  std::size_t vocab_size = 30522;
  std::size_t d_vision = kResNetFeatureDim;
  std::size_t d_audio = kVggishFeatureDim;
  std::size_t p_audio = 300;  // first positional index used by audio rows
  std::size_t l_max = 24;     // content tokens, excluding BOS/EOS
  AttentionKind attention = AttentionKind::kMemoryScaledDot;
  // Keep memory slots when the encoder uses X-linear attention.
  bool x_linear_memory = true;
  double dropout = 0.0;

  /// Throws ContractError when an invariant fails.
  void validate() const;
  std::size_t d_head() const { return d_model / n_heads; }
  bool encoder_uses_memory() const {
    return d_memory > 0 && (attention == AttentionKind::kMemoryScaledDot || x_linear_memory);
  }

  static ModelConfig paper();
  static ModelConfig desk();

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
/// Rejects unknown keys; missing keys keep their defaults.
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Sinusoidal position code: even dims sin(pos / 10000^(2i/d)), odd dims the
/// matching cosine.
std::vector<double> sinusoidal_pe(std::size_t pos, std::size_t d_model);

template <typename T>
struct Linear {
  Tensor<T> weight;  // in x out
  Tensor<T> bias;    // 1 x out
  Tensor<T> operator()(const Tensor<T>& x) const { return add_row(matmul(x, weight), bias); }
};

template <typename T>
struct NormWeights {
  Tensor<T> gamma;
  Tensor<T> beta;
};

/// Weights of the X-linear block, shared by all heads of one attention layer.
template <typename T>
struct XLinearWeights {
  Linear<T> embed;    // d_head -> d_head, bilinear feature embedding
  Linear<T> spatial;  // d_head -> 1, per-position attention logit
  Linear<T> channel;  // d_head -> d_head, channel gate from pooled features
};

template <typename T>
struct AttentionWeights {
  Linear<T> query, key, value, out;
  Tensor<T> memory_key;    // d_memory x d_model; undefined without memory
  Tensor<T> memory_value;  // d_memory x d_model
  std::optional<XLinearWeights<T>> x_linear;
};

template <typename T>
struct EncoderLayer {
  AttentionWeights<T> self_attn;
  NormWeights<T> norm1;
  Linear<T> ff1, ff2;
  NormWeights<T> norm2;
};

template <typename T>
struct DecoderLayer {
  AttentionWeights<T> self_attn;
  NormWeights<T> norm1;
  AttentionWeights<T> cross_attn;
  NormWeights<T> norm2;
  Linear<T> ff1, ff2;
  NormWeights<T> norm3;
};

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
};

/// softmax(q [k; M_k]^T / sqrt(d_head)) [v; M_v] for one head. Memory rows are
/// never masked; `mask` (when nonempty) covers the T_q x T_k block only.
/// Undefined memory tensors mean d_memory = 0.
template <typename T>
Tensor<T> memory_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           const Tensor<T>& memory_key, const Tensor<T>& memory_value,
                           const Mask& mask = {});

/// X-linear attention for one head. For query row i:
///   B_k = elu(k) * elu(q_i), B_v = elu(v) * elu(q_i)   (row broadcast)
///   E   = relu(embed(B_k))
///   beta_s = softmax over keys of spatial(E)
///   beta_c = sigmoid(channel(mean over keys of E))
///   out_i  = beta_c * (beta_s B_v)
/// Output has v's shape restricted to q's rows.
template <typename T>
Tensor<T> x_linear_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                             const XLinearWeights<T>& w, const Mask& mask = {});

/// Spatial attention rows (T_q x T_k) of the same block, for inspection.
template <typename T>
Tensor<T> x_linear_spatial_weights(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                   const XLinearWeights<T>& w, const Mask& mask = {});

/// Start/stop ids used by the decoders.
struct SequenceMarkers {
  int bos = 2;
  int eos = 3;
  static SequenceMarkers from(const Vocabulary& v) { return {v.bos(), v.eos()}; }
};

template <typename T>
class TransformerModel {
 public:
  /// Randomly initialized weights: linear maps U(-1/sqrt(d_in), 1/sqrt(d_in))
  /// with zero bias, token embeddings N(0, 0.02), memory slots
  /// N(0, 1/sqrt(d_model)), norms gamma=1 beta=0.
  TransformerModel(const ModelConfig& config, Rng& rng);

  const ModelConfig& config() const { return config_; }
  const std::vector<NamedParameter<T>>& parameters() const { return params_; }
  std::size_t parameter_count() const;
  const NamedParameter<T>& parameter(const std::string& name) const;

  /// Copies values from a model of identical configuration (any precision).
  template <typename U>
  void copy_parameters_from(const TransformerModel<U>& other);

  /// Vision rows get PE(0..T_v-1), audio rows PE(p_audio + j). Missing audio
  /// is replaced by one all-zero row.
  Tensor<T> embed_multimodal(const FeatureMatrix& frames, const FeatureMatrix* audio) const;

  /// Encoder output for one clip. `dropout_rng` enables dropout when the
  /// configured rate is positive.
  Tensor<T> encode(const VideoSample& sample, Rng* dropout_rng = nullptr) const;

  /// Decoder logits (tokens.size() x vocab_size) given encoder output. Row t
  /// depends only on tokens[0..t].
  Tensor<T> decode_logits(const Tensor<T>& encoded, std::span<const int> tokens,
                          Rng* dropout_rng = nullptr) const;

  Tensor<T> forward_teacher_forced(const VideoSample& sample, std::span<const int> tokens,
                                   Rng* dropout_rng = nullptr) const;

  // Exposed for tests and diagnostics.
  const Linear<T>& vision_embed() const { return vision_embed_; }
  const Linear<T>& audio_embed() const { return audio_embed_; }
  const Linear<T>& output_projection() const { return output_; }
  const std::vector<EncoderLayer<T>>& encoder_layers() const { return encoder_; }

 private:
  Tensor<T> attention(const AttentionWeights<T>& w, const Tensor<T>& queries,
                      const Tensor<T>& keys_values, const Mask& mask, bool x_linear) const;
  Tensor<T> dropout(const Tensor<T>& x, Rng* rng) const;

  void register_linear(const std::string& name, Linear<T>& l, std::size_t in, std::size_t out, Rng& rng);
  void register_norm(const std::string& name, NormWeights<T>& n, std::size_t width);
  void register_attention(const std::string& name, AttentionWeights<T>& a, bool memory, bool x_linear,
                          Rng& rng);
  void register_tensor(const std::string& name, Tensor<T>& t);

  ModelConfig config_;
  Linear<T> vision_embed_;
  Linear<T> audio_embed_;
  Tensor<T> token_embed_;
  std::vector<EncoderLayer<T>> encoder_;
  std::vector<DecoderLayer<T>> decoder_;
  Linear<T> output_;
  std::vector<NamedParameter<T>> params_;
};

template <typename T>
template <typename U>
void TransformerModel<T>::copy_parameters_from(const TransformerModel<U>& other) {
  if (!(other.config() == config_)) throw ContractError("copy_parameters_from: configuration mismatch");
  const auto& src = other.parameters();
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto dst = params_[i].tensor.mutable_values();
    auto s = src[i].tensor.values();
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = static_cast<T>(s[j]);
  }
}

/// Argmax decoding from BOS; ties resolve to the lowest id. Stops after EOS
/// or once l_max + 1 tokens follow BOS.
template <typename T>
TokenSequence greedy_decode(const TransformerModel<T>& model, const VideoSample& sample,
                            SequenceMarkers markers, std::size_t l_max);
template <typename T>
TokenSequence greedy_decode_encoded(const TransformerModel<T>& model, const Tensor<T>& encoded,
                                    SequenceMarkers markers, std::size_t l_max);

struct SampledCaption {
  TokenSequence ids;
  std::vector<double> log_probs;  // log p(ids[t+1] | ids[..t]) under the tempered policy
};

/// Independent multinomial rollouts at the given temperature.
template <typename T>
std::vector<SampledCaption> sample_decode(const TransformerModel<T>& model, const VideoSample& sample,
                                          std::size_t n, double temperature, Rng& rng,
                                          SequenceMarkers markers, std::size_t l_max);
template <typename T>
std::vector<SampledCaption> sample_decode_encoded(const TransformerModel<T>& model,
                                                  const Tensor<T>& encoded, std::size_t n,
                                                  double temperature, Rng& rng,
                                                  SequenceMarkers markers, std::size_t l_max);

/// Index of the largest entry, lowest index on ties.
template <typename T>
std::size_t argmax_lowest(std::span<const T> values);

// ---------------------------------------------------------------------------
// Checkpoints
//
// "VTTC" file: magic, u32 version, u32 parameter count, then per parameter
// u32 name length, UTF-8 name, u32 rank, rank x u32 extents, f32 LE values.
// The model configuration is stored next to it as JSON (same stem, .json).

inline constexpr char kCheckpointMagic[4] = {'V', 'T', 'T', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::filesystem::path checkpoint_config_path(const std::filesystem::path& checkpoint);

template <typename T>
void save_checkpoint(const TransformerModel<T>& model, const std::filesystem::path& path);

/// Reads the JSON config next to `path`, builds the model and fills it.
/// Throws FormatError when names, shapes or counts disagree with the config.
TransformerModel<float> load_checkpoint(const std::filesystem::path& path);

/// Fills an existing model from a checkpoint with matching layout.
template <typename T>
void load_checkpoint_into(TransformerModel<T>& model, const std::filesystem::path& path);

}  // namespace vtt
