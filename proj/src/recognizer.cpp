#include "kiss/recognizer.hpp"

#include <cmath>
#include <stdexcept>

#include "kiss/ops.hpp"

namespace kiss {

void TransformerConfig::validate() const {
  if (d_model == 0 || n_heads == 0) throw std::invalid_argument("transformer: d_model and n_heads must be positive");
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("transformer: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                                std::to_string(n_heads));
  }
  if (d_model % 2 != 0) throw std::invalid_argument("transformer: d_model must be even");
  if (d_ff == 0 || n_layers == 0) throw std::invalid_argument("transformer: d_ff and n_layers must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("transformer: dropout must lie in [0, 1)");
}

template <typename T>
Tensor<T> positional_encoding(std::size_t n_positions, std::size_t d_model) {
  if (d_model % 2 != 0) throw std::invalid_argument("positional_encoding: d_model " + std::to_string(d_model) + " is odd");
  std::vector<T> pe(n_positions * d_model);
  for (std::size_t n = 0; n < n_positions; ++n) {
    for (std::size_t i = 0; i < d_model / 2; ++i) {
      const double div = std::exp(static_cast<double>(2 * i) / static_cast<double>(d_model) * std::log(10000.0));
      const double arg = static_cast<double>(n) / div;
      pe[n * d_model + 2 * i] = static_cast<T>(std::sin(arg));
      pe[n * d_model + 2 * i + 1] = static_cast<T>(std::cos(arg));
    }
  }
  return Tensor<T>(Shape{n_positions, d_model}, std::move(pe));
}

template <typename T>
Tensor<T> causal_mask(std::size_t t) {
  std::vector<T> m(t * t, T(0));
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = i + 1; j < t; ++j) m[i * t + j] = static_cast<T>(-1e30);
  }
  return Tensor<T>(Shape{t, t}, std::move(m));
}

template <typename T>
AttentionResult<T> scaled_dot_product_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                                const Tensor<T>& mask) {
  if (q.rank() < 2 || k.rank() != q.rank() || v.rank() != q.rank()) {
    throw ShapeError("scaled_dot_product_attention: rank mismatch q " + to_string(q.shape()) + ", k " +
                     to_string(k.shape()) + ", v " + to_string(v.shape()));
  }
  const std::size_t r = q.rank();
  if (q.dim(r - 1) != k.dim(r - 1) || k.dim(r - 2) != v.dim(r - 2)) {
    throw ShapeError("scaled_dot_product_attention: dimension mismatch q " + to_string(q.shape()) + ", k " +
                     to_string(k.shape()) + ", v " + to_string(v.shape()));
  }
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(q.dim(r - 1))));
  auto scores = ops::mul_scalar(ops::matmul(q, ops::transpose(k, r - 2, r - 1)), scale);
  if (mask.defined()) {
    if (mask.rank() != 2 || mask.dim(0) != q.dim(r - 2) || mask.dim(1) != k.dim(r - 2)) {
      throw ShapeError("scaled_dot_product_attention: mask " + to_string(mask.shape()) + " does not match scores " +
                       to_string(scores.shape()));
    }
    scores = ops::add(scores, mask);
  }
  auto weights = ops::softmax(scores);
  return AttentionResult<T>{ops::matmul(weights, v), weights};
}

template <typename T>
AttentionResult<T> multi_head_attention(const Tensor<T>& query, const Tensor<T>& key_value, std::size_t n_heads,
                                        const AttentionParams<T>& p, const Tensor<T>& mask) {
  if (query.rank() != 3 || key_value.rank() != 3 || query.dim(0) != key_value.dim(0) ||
      query.dim(2) != key_value.dim(2)) {
    throw ShapeError("multi_head_attention: query " + to_string(query.shape()) + " and key/value " +
                     to_string(key_value.shape()) + " incompatible");
  }
  const std::size_t B = query.dim(0), Tq = query.dim(1), Tk = key_value.dim(1), d = query.dim(2);
  if (n_heads == 0 || d % n_heads != 0) {
    throw ShapeError("multi_head_attention: d_model " + std::to_string(d) + " not divisible by " +
                     std::to_string(n_heads) + " heads");
  }
  const std::size_t dh = d / n_heads;
  auto heads = [&](const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t t) {
    return ops::permute(ops::reshape(ops::linear(x, w, b), Shape{B, t, n_heads, dh}), {0, 2, 1, 3});
  };
  const auto q = heads(query, p.wq, p.bq, Tq);
  const auto k = heads(key_value, p.wk, p.bk, Tk);
  const auto v = heads(key_value, p.wv, p.bv, Tk);
  auto att = scaled_dot_product_attention(q, k, v, mask);
  auto merged = ops::reshape(ops::permute(att.output, {0, 2, 1, 3}), Shape{B, Tq, d});
  return AttentionResult<T>{ops::linear(merged, p.wo, p.bo), att.weights};
}

namespace {

template <typename T>
Tensor<T> xavier(ParameterStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                 std::mt19937_64& rng) {
  const T bound = static_cast<T>(std::sqrt(6.0 / static_cast<double>(in + out)));
  return store.add_uniform(name, Shape{in, out}, bound, rng);
}

template <typename T>
AttentionParams<T> make_attention(ParameterStore<T>& store, const std::string& p, std::size_t d,
                                  std::mt19937_64& rng) {
  AttentionParams<T> a;
  a.wq = xavier(store, p + ".wq", d, d, rng);
  a.bq = store.add(p + ".bq", Shape{d});
  a.wk = xavier(store, p + ".wk", d, d, rng);
  a.bk = store.add(p + ".bk", Shape{d});
  a.wv = xavier(store, p + ".wv", d, d, rng);
  a.bv = store.add(p + ".bv", Shape{d});
  a.wo = xavier(store, p + ".wo", d, d, rng);
  a.bo = store.add(p + ".bo", Shape{d});
  return a;
}

template <typename T>
LayerNormParams<T> make_norm(ParameterStore<T>& store, const std::string& p, std::size_t d) {
  return LayerNormParams<T>{store.add_constant(p + ".gamma", Shape{d}, T(1)), store.add(p + ".beta", Shape{d})};
}

template <typename T>
FeedForwardParams<T> make_ff(ParameterStore<T>& store, const std::string& p, std::size_t d, std::size_t d_ff,
                             std::mt19937_64& rng) {
  FeedForwardParams<T> f;
  f.w1 = xavier(store, p + ".w1", d, d_ff, rng);
  f.b1 = store.add(p + ".b1", Shape{d_ff});
  f.w2 = xavier(store, p + ".w2", d_ff, d, rng);
  f.b2 = store.add(p + ".b2", Shape{d});
  return f;
}

template <typename T>
Tensor<T> norm(const Tensor<T>& x, const LayerNormParams<T>& p) {
  return ops::layer_norm(x, p.gamma, p.beta);
}

template <typename T>
std::vector<DecodedSequence> argmax_sequences(const Tensor<T>& logits, std::size_t max_len) {
  const std::size_t B = logits.dim(0), N = logits.dim(1), C = logits.dim(2);
  const auto& vocab = Vocabulary::standard();
  const auto probs = ops::softmax(logits);
  std::vector<DecodedSequence> out(B);
  for (std::size_t b = 0; b < B; ++b) {
    auto& seq = out[b];
    seq.tokens.ids.assign(max_len, Vocabulary::kBlank);
    for (std::size_t n = 0; n < std::min(N, max_len); ++n) {
      const T* p = probs.data().data() + (b * N + n) * C;
      const auto best = static_cast<int>(std::max_element(p, p + C) - p);
      if (best == Vocabulary::kBlank) break;
      seq.tokens.ids[n] = best;
      seq.probabilities.push_back(static_cast<double>(p[best]));
      seq.text.push_back(vocab.symbol(best));
    }
  }
  return out;
}

}  // namespace

template <typename T>
Recognizer<T>::Recognizer(const TransformerConfig& config, const BackboneConfig& backbone, std::size_t n_positions,
                          bool softmax_heads, ParameterStore<T>& store, std::mt19937_64& rng)
    : config_(config), n_positions_(n_positions), softmax_heads_(softmax_heads) {
  config_.validate();
  if (n_positions == 0) throw std::invalid_argument("recognizer: n_positions must be positive");
  const std::size_t d = config_.d_model;
  const std::size_t C = Vocabulary::kClasses;
  backbone_ = Backbone<T>(backbone, "rec.backbone", store, rng);
  proj_weight_ = xavier(store, "rec.proj.weight", backbone.output_channels(), d, rng);
  proj_bias_ = store.add("rec.proj.bias", Shape{d});
  if (softmax_heads_) {
    const T bound = static_cast<T>(std::sqrt(6.0 / static_cast<double>(d + C)));
    head_weight_ = store.add_uniform("rec.heads.weight", Shape{n_positions, d, C}, bound, rng);
    head_bias_ = store.add("rec.heads.bias", Shape{n_positions, C});
    return;
  }
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "rec.encoder" + std::to_string(l);
    EncoderLayer<T> layer;
    layer.self_attn = make_attention(store, p + ".self_attn", d, rng);
    layer.norm1 = make_norm(store, p + ".norm1", d);
    layer.ff = make_ff(store, p + ".ff", d, config_.d_ff, rng);
    layer.norm2 = make_norm(store, p + ".norm2", d);
    encoder_.push_back(layer);
  }
  embedding_ = store.add_uniform("rec.embedding", Shape{C + 1, d},
                                 static_cast<T>(std::sqrt(3.0 / static_cast<double>(d))), rng);
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "rec.decoder" + std::to_string(l);
    DecoderLayer<T> layer;
    layer.self_attn = make_attention(store, p + ".self_attn", d, rng);
    layer.norm1 = make_norm(store, p + ".norm1", d);
    layer.cross_attn = make_attention(store, p + ".cross_attn", d, rng);
    layer.norm2 = make_norm(store, p + ".norm2", d);
    layer.ff = make_ff(store, p + ".ff", d, config_.d_ff, rng);
    layer.norm3 = make_norm(store, p + ".norm3", d);
    decoder_.push_back(layer);
  }
  cls_weight_ = xavier(store, "rec.classifier.weight", d, C, rng);
  cls_bias_ = store.add("rec.classifier.bias", Shape{C});
}

template <typename T>
Tensor<T> Recognizer<T>::roi_features(const Tensor<T>& crops, std::size_t batch) const {
  if (crops.rank() != 4 || crops.dim(0) != batch * n_positions_) {
    throw ShapeError("roi_features: crops " + to_string(crops.shape()) + " do not hold " +
                     std::to_string(n_positions_) + " ROIs for batch " + std::to_string(batch));
  }
  const auto pooled = global_pool(backbone_.extract_features(crops));
  const auto projected = ops::linear(pooled, proj_weight_, proj_bias_);
  return ops::reshape(projected, Shape{batch, n_positions_, config_.d_model});
}

template <typename T>
Tensor<T> Recognizer<T>::feed_forward(const Tensor<T>& x, const FeedForwardParams<T>& ff, bool training,
                                      std::mt19937_64& rng) const {
  auto h = ops::relu(ops::linear(x, ff.w1, ff.b1));
  h = ops::dropout(h, config_.dropout, rng, training);
  return ops::linear(h, ff.w2, ff.b2);
}

template <typename T>
Tensor<T> Recognizer<T>::encoder_layer(const Tensor<T>& x, const EncoderLayer<T>& layer, bool training,
                                       std::mt19937_64& rng) const {
  auto att = multi_head_attention(x, x, config_.n_heads, layer.self_attn, Tensor<T>());
  auto h = norm(ops::add(x, ops::dropout(att.output, config_.dropout, rng, training)), layer.norm1);
  auto f = feed_forward(h, layer.ff, training, rng);
  return norm(ops::add(h, ops::dropout(f, config_.dropout, rng, training)), layer.norm2);
}

template <typename T>
Tensor<T> Recognizer<T>::encode(const Tensor<T>& features, bool training, std::mt19937_64& rng) const {
  if (features.rank() != 3 || features.dim(2) != config_.d_model || features.dim(1) > n_positions_) {
    throw ShapeError("encode: features " + to_string(features.shape()) + " not (B, <=" +
                     std::to_string(n_positions_) + ", " + std::to_string(config_.d_model) + ")");
  }
  auto x = ops::add(features, positional_encoding<T>(features.dim(1), config_.d_model));
  x = ops::dropout(x, config_.dropout, rng, training);
  for (const auto& layer : encoder_) x = encoder_layer(x, layer, training, rng);
  return x;
}

template <typename T>
Tensor<T> Recognizer<T>::decoder_layer(const Tensor<T>& x, const Tensor<T>& memory, const DecoderLayer<T>& layer,
                                       const Tensor<T>& mask, bool training, std::mt19937_64& rng) const {
  auto self = multi_head_attention(x, x, config_.n_heads, layer.self_attn, mask);
  auto h = norm(ops::add(x, ops::dropout(self.output, config_.dropout, rng, training)), layer.norm1);
  auto cross = multi_head_attention(h, memory, config_.n_heads, layer.cross_attn, Tensor<T>());
  h = norm(ops::add(h, ops::dropout(cross.output, config_.dropout, rng, training)), layer.norm2);
  auto f = feed_forward(h, layer.ff, training, rng);
  return norm(ops::add(h, ops::dropout(f, config_.dropout, rng, training)), layer.norm3);
}

template <typename T>
Tensor<T> Recognizer<T>::decode_step(const std::vector<int>& tokens, std::size_t t, const Tensor<T>& memory,
                                     bool training, std::mt19937_64& rng) const {
  if (softmax_heads_) throw std::logic_error("decode_step: recognizer built with softmax heads");
  if (t == 0) throw std::invalid_argument("decode_step: empty prefix");
  if (t > n_positions_) {
    throw std::invalid_argument("decode_step: prefix length " + std::to_string(t) + " exceeds " +
                                std::to_string(n_positions_));
  }
  if (memory.rank() != 3 || memory.dim(2) != config_.d_model) {
    throw ShapeError("decode_step: memory " + to_string(memory.shape()) + " is not (B, N, d_model)");
  }
  const std::size_t B = memory.dim(0);
  if (tokens.size() != B * t) {
    throw ShapeError("decode_step: " + std::to_string(tokens.size()) + " tokens for batch " + std::to_string(B) +
                     " and prefix " + std::to_string(t));
  }
  const std::size_t d = config_.d_model;
  auto x = ops::embedding(embedding_, std::span<const int>(tokens), Shape{B, t});
  x = ops::mul_scalar(x, static_cast<T>(std::sqrt(static_cast<double>(d))));
  x = ops::add(x, positional_encoding<T>(t, d));
  x = ops::dropout(x, config_.dropout, rng, training);
  const auto mask = causal_mask<T>(t);
  for (const auto& layer : decoder_) x = decoder_layer(x, memory, layer, mask, training, rng);
  return ops::linear(x, cls_weight_, cls_bias_);
}

template <typename T>
Tensor<T> Recognizer<T>::teacher_forced_logits(const Tensor<T>& memory, const std::vector<TokenSequence>& targets,
                                               bool training, std::mt19937_64& rng) const {
  const std::size_t B = targets.size();
  const std::size_t N = n_positions_;
  std::vector<int> tokens(B * N);
  for (std::size_t b = 0; b < B; ++b) {
    if (targets[b].ids.size() != N) {
      throw ShapeError("teacher_forced_logits: target of length " + std::to_string(targets[b].ids.size()) +
                       ", expected " + std::to_string(N));
    }
    tokens[b * N] = Vocabulary::kBos;
    for (std::size_t n = 1; n < N; ++n) tokens[b * N + n] = targets[b].ids[n - 1];
  }
  return decode_step(tokens, N, memory, training, rng);
}

template <typename T>
std::vector<DecodedSequence> Recognizer<T>::greedy_decode(const Tensor<T>& memory, std::size_t max_len) const {
  NoGrad<T> no_grad;
  const std::size_t B = memory.dim(0);
  const std::size_t steps = std::min(max_len, n_positions_);
  const auto& vocab = Vocabulary::standard();
  std::vector<DecodedSequence> out(B);
  std::vector<bool> done(B, false);
  std::vector<std::vector<int>> prefix(B, std::vector<int>{Vocabulary::kBos});
  for (auto& s : out) s.tokens.ids.assign(max_len, Vocabulary::kBlank);
  std::mt19937_64 unused(0);
  for (std::size_t s = 0; s < steps; ++s) {
    std::vector<int> tokens;
    tokens.reserve(B * (s + 1));
    for (const auto& p : prefix) tokens.insert(tokens.end(), p.begin(), p.end());
    const auto logits = decode_step(tokens, s + 1, memory, false, unused);
    const auto last = ops::softmax(ops::slice(logits, 1, s, s + 1));
    const std::size_t C = Vocabulary::kClasses;
    bool all_done = true;
    for (std::size_t b = 0; b < B; ++b) {
      const T* p = last.data().data() + b * C;
      const auto best = static_cast<int>(std::max_element(p, p + C) - p);
      prefix[b].push_back(best);
      if (done[b]) continue;
      if (best == Vocabulary::kBlank) {
        done[b] = true;
        continue;
      }
      out[b].tokens.ids[s] = best;
      out[b].probabilities.push_back(static_cast<double>(p[best]));
      out[b].text.push_back(vocab.symbol(best));
      all_done = false;
    }
    if (all_done) break;
  }
  return out;
}

template <typename T>
Tensor<T> Recognizer<T>::softmax_logits(const Tensor<T>& features) const {
  if (!softmax_heads_) throw std::logic_error("softmax_logits: recognizer built with a transformer");
  if (features.rank() != 3 || features.dim(1) != n_positions_ || features.dim(2) != config_.d_model) {
    throw ShapeError("softmax_logits: features " + to_string(features.shape()) + " not (B, N, d_model)");
  }
  const auto per_position = ops::matmul(ops::permute(features, {1, 0, 2}), head_weight_);  // (N, B, 95)
  return ops::add(ops::permute(per_position, {1, 0, 2}), head_bias_);
}

template <typename T>
std::vector<DecodedSequence> Recognizer<T>::softmax_decode(const Tensor<T>& features) const {
  NoGrad<T> no_grad;
  return argmax_sequences(softmax_logits(features), n_positions_);
}

template <typename T>
Tensor<T> Recognizer<T>::forward(const Tensor<T>& crops, std::size_t batch, const std::vector<TokenSequence>& targets,
                                 bool training, std::mt19937_64& rng) const {
  const auto features = roi_features(crops, batch);
  if (softmax_heads_) return softmax_logits(features);
  return teacher_forced_logits(encode(features, training, rng), targets, training, rng);
}

template <typename T>
std::vector<DecodedSequence> Recognizer<T>::predict(const Tensor<T>& crops, std::size_t batch,
                                                    std::size_t max_len) const {
  NoGrad<T> no_grad;
  std::mt19937_64 unused(0);
  const auto features = roi_features(crops, batch);
  if (softmax_heads_) return argmax_sequences(softmax_logits(features), max_len);
  return greedy_decode(encode(features, false, unused), max_len);
}

template <typename T>
Tensor<T> recognition_loss(const Tensor<T>& logits, const std::vector<TokenSequence>& targets) {
  if (logits.rank() != 3 || logits.dim(0) != targets.size()) {
    throw ShapeError("recognition_loss: logits " + to_string(logits.shape()) + " for " +
                     std::to_string(targets.size()) + " targets");
  }
  const std::size_t B = logits.dim(0), N = logits.dim(1), C = logits.dim(2);
  std::vector<int> flat;
  flat.reserve(B * N);
  for (const auto& t : targets) {
    if (t.ids.size() != N) {
      throw ShapeError("recognition_loss: target length " + std::to_string(t.ids.size()) + ", expected " +
                       std::to_string(N));
    }
    flat.insert(flat.end(), t.ids.begin(), t.ids.end());
  }
  return ops::softmax_cross_entropy(ops::reshape(logits, Shape{B * N, C}), std::span<const int>(flat));
}

#define KISS_RECOGNIZER(T)                                                                                       \
  template class Recognizer<T>;                                                                                  \
  template Tensor<T> positional_encoding<T>(std::size_t, std::size_t);                                           \
  template Tensor<T> causal_mask<T>(std::size_t);                                                                \
  template AttentionResult<T> scaled_dot_product_attention<T>(const Tensor<T>&, const Tensor<T>&,                \
                                                              const Tensor<T>&, const Tensor<T>&);               \
  template AttentionResult<T> multi_head_attention<T>(const Tensor<T>&, const Tensor<T>&, std::size_t,           \
                                                      const AttentionParams<T>&, const Tensor<T>&);              \
  template Tensor<T> recognition_loss<T>(const Tensor<T>&, const std::vector<TokenSequence>&);

KISS_RECOGNIZER(float)
KISS_RECOGNIZER(double)

}  // namespace kiss
