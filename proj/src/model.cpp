#include "vtt/model.hpp"

#include <bit>
#include <cmath>
#include <limits>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "vtt/error.hpp"

namespace vtt {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

std::string to_string(AttentionKind kind) {
  return kind == AttentionKind::kXLinear ? "x_linear" : "memory_scaled_dot";
}

AttentionKind attention_kind_from_string(const std::string& name) {
  if (name == "memory_scaled_dot") return AttentionKind::kMemoryScaledDot;
  if (name == "x_linear") return AttentionKind::kXLinear;
  throw FormatError("unknown attention kind '" + name + "' (expected memory_scaled_dot or x_linear)");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ContractError("model config: " + what); };
  if (n_enc == 0 || n_dec == 0) fail("need at least one encoder and one decoder block");
  if (n_heads == 0 || d_model == 0) fail("n_heads and d_model must be positive");
  if (d_model % n_heads != 0) {
    fail("d_model " + std::to_string(d_model) + " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (d_ff == 0) fail("d_ff must be positive");
  if (vocab_size < 4) fail("vocab_size must hold the four special tokens");
  if (d_vision == 0 || d_audio == 0) fail("feature widths must be positive");
  if (p_audio == 0) fail("p_audio must admit at least one frame");
  if (l_max == 0) fail("l_max must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
}

ModelConfig ModelConfig::paper() { return ModelConfig{}; }

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.n_enc = 2;
  c.n_dec = 2;
  c.n_heads = 4;
  c.d_model = 32;
  c.d_ff = 64;
  c.d_memory = 8;
  c.vocab_size = 64;
  c.d_vision = 32;
  c.d_audio = 8;
  return c;
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"n_enc", c.n_enc},
           {"n_dec", c.n_dec},
           {"n_heads", c.n_heads},
           {"d_model", c.d_model},
           {"d_ff", c.d_ff},
           {"d_memory", c.d_memory},
           {"vocab_size", c.vocab_size},
           {"d_vision", c.d_vision},
           {"d_audio", c.d_audio},
           {"p_audio", c.p_audio},
           {"l_max", c.l_max},
           {"attention", to_string(c.attention)},
           {"x_linear_memory", c.x_linear_memory},
           {"dropout", c.dropout}};
}

void from_json(const json& j, ModelConfig& c) {
  if (!j.is_object()) throw FormatError("model config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "n_enc") c.n_enc = value.get<std::size_t>();
      else if (key == "n_dec") c.n_dec = value.get<std::size_t>();
      else if (key == "n_heads") c.n_heads = value.get<std::size_t>();
      else if (key == "d_model") c.d_model = value.get<std::size_t>();
      else if (key == "d_ff") c.d_ff = value.get<std::size_t>();
      else if (key == "d_memory") c.d_memory = value.get<std::size_t>();
      else if (key == "vocab_size") c.vocab_size = value.get<std::size_t>();
      else if (key == "d_vision") c.d_vision = value.get<std::size_t>();
      else if (key == "d_audio") c.d_audio = value.get<std::size_t>();
      else if (key == "p_audio") c.p_audio = value.get<std::size_t>();
      else if (key == "l_max") c.l_max = value.get<std::size_t>();
      else if (key == "attention") c.attention = attention_kind_from_string(value.get<std::string>());
      else if (key == "x_linear_memory") c.x_linear_memory = value.get<bool>();
      else if (key == "dropout") c.dropout = value.get<double>();
      else throw FormatError("model config: unknown key '" + key + "'");
    } catch (const json::exception& e) {
      throw FormatError("model config key '" + key + "': " + e.what());
    }
  }
}

std::vector<double> sinusoidal_pe(std::size_t pos, std::size_t d_model) {
  std::vector<double> pe(d_model);
  for (std::size_t i = 0; i < d_model; i += 2) {
    const double angle =
        static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d_model));
    pe[i] = std::sin(angle);
    if (i + 1 < d_model) pe[i + 1] = std::cos(angle);
  }
  return pe;
}

namespace {

template <typename T>
Tensor<T> positional_rows(std::size_t first, std::size_t count, std::size_t d_model) {
  std::vector<T> values;
  values.reserve(count * d_model);
  for (std::size_t r = 0; r < count; ++r)
    for (double v : sinusoidal_pe(first + r, d_model)) values.push_back(static_cast<T>(v));
  return Tensor<T>::from({count, d_model}, std::move(values));
}

template <typename T>
Tensor<T> to_tensor(const FeatureMatrix& m) {
  return Tensor<T>::from({m.rows, m.cols}, std::vector<T>(m.values.begin(), m.values.end()));
}

constexpr double kLayerNormEps = 1e-5;

}  // namespace

// ---------------------------------------------------------------------------
// Attention kernels

template <typename T>
Tensor<T> memory_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           const Tensor<T>& memory_key, const Tensor<T>& memory_value, const Mask& mask) {
  if (q.cols() != k.cols()) {
    throw DimensionError("memory_attention: query " + to_string(q.shape()) + " vs key " + to_string(k.shape()));
  }
  if (k.rows() != v.rows()) {
    throw DimensionError("memory_attention: key " + to_string(k.shape()) + " vs value " + to_string(v.shape()));
  }
  if (memory_key.defined() != memory_value.defined()) {
    throw ContractError("memory_attention: memory key and value must both be present or absent");
  }
  Tensor<T> keys = k, values = v;
  std::size_t slots = 0;
  if (memory_key.defined()) {
    if (memory_key.cols() != k.cols() || memory_value.cols() != v.cols() ||
        memory_key.rows() != memory_value.rows()) {
      throw DimensionError("memory_attention: memory " + to_string(memory_key.shape()) + "/" +
                           to_string(memory_value.shape()) + " vs key " + to_string(k.shape()));
    }
    slots = memory_key.rows();
    keys = concat_rows<T>({k, memory_key});
    values = concat_rows<T>({v, memory_value});
  }
  if (!mask.empty() && (mask.rows != q.rows() || mask.cols != k.rows())) {
    throw DimensionError("memory_attention: mask " + to_string(Shape{mask.rows, mask.cols}) +
                         " vs scores " + to_string(Shape{q.rows(), k.rows()}));
  }
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(q.cols()));
  auto scores = scale(matmul_nt(q, keys), inv_sqrt);
  auto weights = softmax_lastdim(scores, mask.with_extra_columns(slots));
  return matmul(weights, values);
}

namespace {

// Per-query pieces of the X-linear block.
template <typename T>
struct XLinearRow {
  Tensor<T> spatial;  // 1 x T_k
  Tensor<T> output;   // 1 x d
};

template <typename T>
std::vector<XLinearRow<T>> x_linear_rows(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                         const XLinearWeights<T>& w, const Mask& mask) {
  if (q.cols() != k.cols() || v.cols() != q.cols()) {
    throw DimensionError("x_linear_attention: query " + to_string(q.shape()) + ", key " +
                         to_string(k.shape()) + ", value " + to_string(v.shape()));
  }
  if (k.rows() != v.rows()) {
    throw DimensionError("x_linear_attention: key " + to_string(k.shape()) + " vs value " + to_string(v.shape()));
  }
  if (!mask.empty() && (mask.rows != q.rows() || mask.cols != k.rows())) {
    throw DimensionError("x_linear_attention: mask " + to_string(Shape{mask.rows, mask.cols}) +
                         " vs scores " + to_string(Shape{q.rows(), k.rows()}));
  }
  const std::size_t tk = k.rows();
  const auto ek = elu(k);
  const auto ev = elu(v);
  const auto eq = elu(q);
  std::vector<XLinearRow<T>> rows;
  rows.reserve(q.rows());
  for (std::size_t i = 0; i < q.rows(); ++i) {
    const auto qi = slice_rows(eq, i, 1);
    const auto bk = mul_row(ek, qi);
    const auto bv = mul_row(ev, qi);
    const auto embedded = relu(w.embed(bk));
    Mask row_mask;
    std::vector<std::uint8_t> keep(tk, 1);
    if (!mask.empty()) {
      row_mask = Mask{1, tk, std::vector<std::uint8_t>(tk, 0)};
      for (std::size_t c = 0; c < tk; ++c) {
        row_mask.blocked[c] = mask.is_blocked(i, c) ? 1 : 0;
        keep[c] = row_mask.blocked[c] ? 0 : 1;
      }
    }
    auto spatial = softmax_lastdim(transpose(w.spatial(embedded)), row_mask);
    const auto channel = sigmoid(w.channel(mean_rows(embedded, std::span<const std::uint8_t>(keep))));
    auto output = mul(channel, matmul(spatial, bv));
    rows.push_back({std::move(spatial), std::move(output)});
  }
  return rows;
}

}  // namespace

template <typename T>
Tensor<T> x_linear_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                             const XLinearWeights<T>& w, const Mask& mask) {
  auto rows = x_linear_rows(q, k, v, w, mask);
  std::vector<Tensor<T>> outs;
  outs.reserve(rows.size());
  for (auto& r : rows) outs.push_back(std::move(r.output));
  return concat_rows(outs);
}

template <typename T>
Tensor<T> x_linear_spatial_weights(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                   const XLinearWeights<T>& w, const Mask& mask) {
  auto rows = x_linear_rows(q, k, v, w, mask);
  std::vector<Tensor<T>> outs;
  outs.reserve(rows.size());
  for (auto& r : rows) outs.push_back(std::move(r.spatial));
  return concat_rows(outs);
}

// ---------------------------------------------------------------------------
// TransformerModel

template <typename T>
void TransformerModel<T>::register_tensor(const std::string& name, Tensor<T>& t) {
  params_.push_back({name, t});
}

template <typename T>
void TransformerModel<T>::register_linear(const std::string& name, Linear<T>& l, std::size_t in,
                                          std::size_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::vector<T> w(in * out);
  for (auto& x : w) x = static_cast<T>(rng.uniform(-bound, bound));
  l.weight = Tensor<T>::from({in, out}, std::move(w), true);
  l.bias = Tensor<T>::zeros({1, out}, true);
  register_tensor(name + ".weight", l.weight);
  register_tensor(name + ".bias", l.bias);
}

template <typename T>
void TransformerModel<T>::register_norm(const std::string& name, NormWeights<T>& n, std::size_t width) {
  n.gamma = Tensor<T>::from({1, width}, std::vector<T>(width, T(1)), true);
  n.beta = Tensor<T>::zeros({1, width}, true);
  register_tensor(name + ".gamma", n.gamma);
  register_tensor(name + ".beta", n.beta);
}

template <typename T>
void TransformerModel<T>::register_attention(const std::string& name, AttentionWeights<T>& a, bool memory,
                                             bool x_linear, Rng& rng) {
  const std::size_t d = config_.d_model;
  register_linear(name + ".query", a.query, d, d, rng);
  register_linear(name + ".key", a.key, d, d, rng);
  register_linear(name + ".value", a.value, d, d, rng);
  register_linear(name + ".out", a.out, d, d, rng);
  if (memory) {
    const double stddev = 1.0 / std::sqrt(static_cast<double>(d));
    for (auto* slot : {&a.memory_key, &a.memory_value}) {
      std::vector<T> m(config_.d_memory * d);
      for (auto& x : m) x = static_cast<T>(rng.normal(0.0, stddev));
      *slot = Tensor<T>::from({config_.d_memory, d}, std::move(m), true);
    }
    register_tensor(name + ".memory_key", a.memory_key);
    register_tensor(name + ".memory_value", a.memory_value);
  }
  if (x_linear) {
    const std::size_t dh = config_.d_head();
    XLinearWeights<T> xl;
    register_linear(name + ".xlinear.embed", xl.embed, dh, dh, rng);
    register_linear(name + ".xlinear.spatial", xl.spatial, dh, 1, rng);
    register_linear(name + ".xlinear.channel", xl.channel, dh, dh, rng);
    a.x_linear = std::move(xl);
  }
}

template <typename T>
TransformerModel<T>::TransformerModel(const ModelConfig& config, Rng& rng) : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model;
  const bool xlin = config_.attention == AttentionKind::kXLinear;

  register_linear("vision_embed", vision_embed_, config_.d_vision, d, rng);
  register_linear("audio_embed", audio_embed_, config_.d_audio, d, rng);
  {
    std::vector<T> e(config_.vocab_size * d);
    for (auto& x : e) x = static_cast<T>(rng.normal(0.0, 0.02));
    token_embed_ = Tensor<T>::from({config_.vocab_size, d}, std::move(e), true);
    register_tensor("token_embed", token_embed_);
  }

  encoder_.resize(config_.n_enc);
  for (std::size_t i = 0; i < config_.n_enc; ++i) {
    const std::string p = "enc." + std::to_string(i);
    auto& layer = encoder_[i];
    register_attention(p + ".self_attn", layer.self_attn, config_.encoder_uses_memory(), xlin, rng);
    register_norm(p + ".norm1", layer.norm1, d);
    register_linear(p + ".ff1", layer.ff1, d, config_.d_ff, rng);
    register_linear(p + ".ff2", layer.ff2, config_.d_ff, d, rng);
    register_norm(p + ".norm2", layer.norm2, d);
  }
  decoder_.resize(config_.n_dec);
  for (std::size_t i = 0; i < config_.n_dec; ++i) {
    const std::string p = "dec." + std::to_string(i);
    auto& layer = decoder_[i];
    register_attention(p + ".self_attn", layer.self_attn, false, false, rng);
    register_norm(p + ".norm1", layer.norm1, d);
    register_attention(p + ".cross_attn", layer.cross_attn, false, false, rng);
    register_norm(p + ".norm2", layer.norm2, d);
    register_linear(p + ".ff1", layer.ff1, d, config_.d_ff, rng);
    register_linear(p + ".ff2", layer.ff2, config_.d_ff, d, rng);
    register_norm(p + ".norm3", layer.norm3, d);
  }
  register_linear("output", output_, d, config_.vocab_size, rng);
}

template <typename T>
std::size_t TransformerModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <typename T>
const NamedParameter<T>& TransformerModel<T>::parameter(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p;
  throw ContractError("no parameter named '" + name + "'");
}

template <typename T>
Tensor<T> TransformerModel<T>::dropout(const Tensor<T>& x, Rng* rng) const {
  if (rng == nullptr || config_.dropout <= 0.0) return x;
  const double keep = 1.0 - config_.dropout;
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = rng->uniform() < keep ? static_cast<T>(1.0 / keep) : T(0);
  return mul(x, Tensor<T>::from(x.shape(), std::move(mask)));
}

template <typename T>
Tensor<T> TransformerModel<T>::embed_multimodal(const FeatureMatrix& frames, const FeatureMatrix* audio) const {
  if (frames.cols != config_.d_vision) {
    throw DimensionError("frame features have width " + std::to_string(frames.cols) + ", model expects " +
                         std::to_string(config_.d_vision));
  }
  if (frames.rows > config_.p_audio) {
    throw ContractError(std::to_string(frames.rows) + " frames collide with the audio offset " +
                        std::to_string(config_.p_audio));
  }
  const FeatureMatrix silence = audio ? FeatureMatrix{} : dummy_audio(1, config_.d_audio);
  const FeatureMatrix& sound = audio ? *audio : silence;
  if (sound.cols != config_.d_audio) {
    throw DimensionError("audio features have width " + std::to_string(sound.cols) + ", model expects " +
                         std::to_string(config_.d_audio));
  }
  const std::size_t d = config_.d_model;
  auto vision = add(vision_embed_(to_tensor<T>(frames)), positional_rows<T>(0, frames.rows, d));
  auto acoustic = add(audio_embed_(to_tensor<T>(sound)), positional_rows<T>(config_.p_audio, sound.rows, d));
  return concat_rows<T>({vision, acoustic});
}

template <typename T>
Tensor<T> TransformerModel<T>::attention(const AttentionWeights<T>& w, const Tensor<T>& queries,
                                         const Tensor<T>& keys_values, const Mask& mask, bool x_linear) const {
  const std::size_t heads = config_.n_heads, dh = config_.d_head();
  const auto q = w.query(queries);
  const auto k = w.key(keys_values);
  const auto v = w.value(keys_values);
  std::vector<Tensor<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto qh = slice_cols(q, h * dh, dh);
    const auto kh = slice_cols(k, h * dh, dh);
    const auto vh = slice_cols(v, h * dh, dh);
    Tensor<T> mk, mv;
    if (w.memory_key.defined()) {
      mk = slice_cols(w.memory_key, h * dh, dh);
      mv = slice_cols(w.memory_value, h * dh, dh);
    }
    if (x_linear) {
      const auto keys = mk.defined() ? concat_rows<T>({kh, mk}) : kh;
      const auto values = mv.defined() ? concat_rows<T>({vh, mv}) : vh;
      outs.push_back(x_linear_attention(qh, keys, values, *w.x_linear,
                                        mask.with_extra_columns(mk.defined() ? mk.rows() : 0)));
    } else {
      outs.push_back(memory_attention(qh, kh, vh, mk, mv, mask));
    }
  }
  return w.out(heads == 1 ? outs.front() : concat_cols(outs));
}

template <typename T>
Tensor<T> TransformerModel<T>::encode(const VideoSample& sample, Rng* dropout_rng) const {
  const T eps = static_cast<T>(kLayerNormEps);
  auto x = dropout(embed_multimodal(sample.frames, sample.audio ? &*sample.audio : nullptr), dropout_rng);
  const bool xlin = config_.attention == AttentionKind::kXLinear;
  for (const auto& layer : encoder_) {
    auto a = attention(layer.self_attn, x, x, Mask::none(), xlin);
    x = layer_norm(add(x, dropout(a, dropout_rng)), layer.norm1.gamma, layer.norm1.beta, eps);
    auto f = layer.ff2(relu(layer.ff1(x)));
    x = layer_norm(add(x, dropout(f, dropout_rng)), layer.norm2.gamma, layer.norm2.beta, eps);
  }
  return x;
}

template <typename T>
Tensor<T> TransformerModel<T>::decode_logits(const Tensor<T>& encoded, std::span<const int> tokens,
                                             Rng* dropout_rng) const {
  if (tokens.empty()) throw ContractError("decode_logits: empty token sequence");
  if (tokens.size() > config_.l_max + 2) {
    throw ContractError("decode_logits: " + std::to_string(tokens.size()) + " tokens exceed l_max + 2 = " +
                        std::to_string(config_.l_max + 2));
  }
  for (int id : tokens) {
    if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
      throw ContractError("decode_logits: token id " + std::to_string(id) + " outside vocabulary of " +
                          std::to_string(config_.vocab_size));
    }
  }
  const T eps = static_cast<T>(kLayerNormEps);
  const std::size_t d = config_.d_model;
  auto x = add(scale(gather_rows(token_embed_, tokens), static_cast<T>(std::sqrt(static_cast<double>(d)))),
               positional_rows<T>(0, tokens.size(), d));
  x = dropout(x, dropout_rng);
  const Mask causal = Mask::causal(tokens.size());
  for (const auto& layer : decoder_) {
    auto s = attention(layer.self_attn, x, x, causal, false);
    x = layer_norm(add(x, dropout(s, dropout_rng)), layer.norm1.gamma, layer.norm1.beta, eps);
    auto c = attention(layer.cross_attn, x, encoded, Mask::none(), false);
    x = layer_norm(add(x, dropout(c, dropout_rng)), layer.norm2.gamma, layer.norm2.beta, eps);
    auto f = layer.ff2(relu(layer.ff1(x)));
    x = layer_norm(add(x, dropout(f, dropout_rng)), layer.norm3.gamma, layer.norm3.beta, eps);
  }
  return output_(x);
}

template <typename T>
Tensor<T> TransformerModel<T>::forward_teacher_forced(const VideoSample& sample, std::span<const int> tokens,
                                                      Rng* dropout_rng) const {
  return decode_logits(encode(sample, dropout_rng), tokens, dropout_rng);
}

// ---------------------------------------------------------------------------
// Decoding

template <typename T>
std::size_t argmax_lowest(std::span<const T> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

template <typename T>
TokenSequence greedy_decode_encoded(const TransformerModel<T>& model, const Tensor<T>& encoded,
                                    SequenceMarkers markers, std::size_t l_max) {
  NoGradGuard no_grad;
  const std::size_t v = model.config().vocab_size;
  const std::size_t limit = std::min(l_max, model.config().l_max);
  TokenSequence ids{markers.bos};
  for (std::size_t step = 0; step <= limit; ++step) {
    const auto logits = model.decode_logits(encoded, ids);
    const auto last = logits.values().subspan((ids.size() - 1) * v, v);
    const int next = static_cast<int>(argmax_lowest(last));
    ids.push_back(next);
    if (next == markers.eos) break;
  }
  return ids;
}

template <typename T>
TokenSequence greedy_decode(const TransformerModel<T>& model, const VideoSample& sample,
                            SequenceMarkers markers, std::size_t l_max) {
  NoGradGuard no_grad;
  return greedy_decode_encoded(model, model.encode(sample), markers, l_max);
}

template <typename T>
std::vector<SampledCaption> sample_decode_encoded(const TransformerModel<T>& model, const Tensor<T>& encoded,
                                                  std::size_t n, double temperature, Rng& rng,
                                                  SequenceMarkers markers, std::size_t l_max) {
  if (n == 0) throw ContractError("sample_decode: n must be >= 1");
  if (!(temperature > 0.0)) throw ContractError("sample_decode: temperature must be positive");
  NoGradGuard no_grad;
  const std::size_t v = model.config().vocab_size;
  const std::size_t limit = std::min(l_max, model.config().l_max);
  std::vector<SampledCaption> out(n);
  std::vector<double> scaled(v), probs(v);
  for (auto& rollout : out) {
    rollout.ids = {markers.bos};
    for (std::size_t step = 0; step <= limit; ++step) {
      const auto logits = model.decode_logits(encoded, rollout.ids);
      const auto last = logits.values().subspan((rollout.ids.size() - 1) * v, v);
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < v; ++j) {
        scaled[j] = static_cast<double>(last[j]) / temperature;
        mx = std::max(mx, scaled[j]);
      }
      double total = 0.0;
      for (std::size_t j = 0; j < v; ++j) {
        probs[j] = std::exp(scaled[j] - mx);
        total += probs[j];
      }
      const std::size_t pick = rng.categorical(probs);
      rollout.log_probs.push_back(scaled[pick] - mx - std::log(total));
      rollout.ids.push_back(static_cast<int>(pick));
      if (static_cast<int>(pick) == markers.eos) break;
    }
  }
  return out;
}

template <typename T>
std::vector<SampledCaption> sample_decode(const TransformerModel<T>& model, const VideoSample& sample,
                                          std::size_t n, double temperature, Rng& rng, SequenceMarkers markers,
                                          std::size_t l_max) {
  NoGradGuard no_grad;
  return sample_decode_encoded(model, model.encode(sample), n, temperature, rng, markers, l_max);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  ByteReader(std::string bytes, std::string origin) : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

  std::uint32_t u32() {
    need(4);
    const auto* p = reinterpret_cast<const unsigned char*>(bytes_.data() + pos_);
    pos_ += 4;
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  }
  std::string text(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw LengthError(origin_ + ": truncated checkpoint");
  }
  std::string bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

std::string read_all(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

fs::path checkpoint_config_path(const fs::path& checkpoint) {
  fs::path p = checkpoint;
  p.replace_extension(".json");
  return p;
}

template <typename T>
void save_checkpoint(const TransformerModel<T>& model, const fs::path& path) {
  std::string buf(kCheckpointMagic, 4);
  put_u32(buf, kCheckpointVersion);
  put_u32(buf, static_cast<std::uint32_t>(model.parameters().size()));
  for (const auto& p : model.parameters()) {
    put_u32(buf, static_cast<std::uint32_t>(p.name.size()));
    buf += p.name;
    put_u32(buf, 2);
    put_u32(buf, static_cast<std::uint32_t>(p.tensor.rows()));
    put_u32(buf, static_cast<std::uint32_t>(p.tensor.cols()));
    for (T v : p.tensor.values()) put_u32(buf, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("error while writing " + path.string());
  }
  std::ofstream cfg(checkpoint_config_path(path), std::ios::binary | std::ios::trunc);
  if (!cfg) throw IoError("cannot write " + checkpoint_config_path(path).string());
  cfg << json(model.config()).dump(2) << '\n';
}

template <typename T>
void load_checkpoint_into(TransformerModel<T>& model, const fs::path& path) {
  ByteReader in(read_all(path), path.string());
  if (in.text(4) != std::string(kCheckpointMagic, 4)) throw FormatError(path.string() + ": bad magic, expected VTTC");
  if (const auto version = in.u32(); version != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto& params = model.parameters();
  const std::uint32_t count = in.u32();
  if (count != params.size()) {
    throw FormatError(path.string() + ": holds " + std::to_string(count) + " parameters, model has " +
                      std::to_string(params.size()));
  }
  for (const auto& p : params) {
    const std::string name = in.text(in.u32());
    if (name != p.name) throw FormatError(path.string() + ": expected parameter '" + p.name + "', found '" + name + "'");
    const std::uint32_t rank = in.u32();
    std::vector<std::size_t> extents(rank);
    std::size_t numel = 1;
    for (auto& e : extents) {
      e = in.u32();
      numel *= e;
    }
    if (rank != 2 || extents[0] != p.tensor.rows() || extents[1] != p.tensor.cols()) {
      throw FormatError(path.string() + ": parameter '" + name + "' shape differs from " + to_string(p.tensor.shape()));
    }
    auto dst = p.tensor.mutable_values();
    for (std::size_t i = 0; i < numel; ++i) dst[i] = static_cast<T>(std::bit_cast<float>(in.u32()));
  }
  if (!in.at_end()) throw FormatError(path.string() + ": trailing bytes after last parameter");
}

TransformerModel<float> load_checkpoint(const fs::path& path) {
  const auto cfg_path = checkpoint_config_path(path);
  ModelConfig config;
  try {
    json::parse(read_all(cfg_path)).get_to(config);
  } catch (const json::exception& e) {
    throw FormatError(cfg_path.string() + ": " + e.what());
  }
  Rng rng(0);
  TransformerModel<float> model(config, rng);
  load_checkpoint_into(model, path);
  return model;
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define VTT_INSTANTIATE_MODEL(T)                                                                          \
  template class TransformerModel<T>;                                                                    \
  template Tensor<T> memory_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,              \
                                      const Tensor<T>&, const Tensor<T>&, const Mask&);                  \
  template Tensor<T> x_linear_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,            \
                                        const XLinearWeights<T>&, const Mask&);                          \
  template Tensor<T> x_linear_spatial_weights(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                              const XLinearWeights<T>&, const Mask&);                    \
  template std::size_t argmax_lowest(std::span<const T>);                                                \
  template TokenSequence greedy_decode(const TransformerModel<T>&, const VideoSample&, SequenceMarkers,  \
                                       std::size_t);                                                     \
  template TokenSequence greedy_decode_encoded(const TransformerModel<T>&, const Tensor<T>&,             \
                                               SequenceMarkers, std::size_t);                            \
  template std::vector<SampledCaption> sample_decode(const TransformerModel<T>&, const VideoSample&,     \
                                                     std::size_t, double, Rng&, SequenceMarkers,         \
                                                     std::size_t);                                       \
  template std::vector<SampledCaption> sample_decode_encoded(const TransformerModel<T>&, const Tensor<T>&, \
                                                             std::size_t, double, Rng&, SequenceMarkers, \
                                                             std::size_t);                               \
  template void save_checkpoint(const TransformerModel<T>&, const fs::path&);                            \
  template void load_checkpoint_into(TransformerModel<T>&, const fs::path&);

VTT_INSTANTIATE_MODEL(float)
VTT_INSTANTIATE_MODEL(double)

#undef VTT_INSTANTIATE_MODEL

}  // namespace vtt
