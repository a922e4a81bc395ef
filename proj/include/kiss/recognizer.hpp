#pragma once

#include <random>
#include <string>
#include <vector>

#include "kiss/backbone.hpp"
#include "kiss/params.hpp"
#include "kiss/tensor.hpp"
#include "kiss/vocabulary.hpp"

namespace kiss {

struct TransformerConfig {
  std::size_t d_model = 128;
  std::size_t n_heads = 4;
  std::size_t d_ff = 512;
  std::size_t n_layers = 1;
  double dropout = 0.1;

  void validate() const;
};

/// Sinusoidal encoding (n_positions, d_model). Throws on odd d_model.
template <typename T>
Tensor<T> positional_encoding(std::size_t n_positions, std::size_t d_model);

/// Additive (t, t) mask: 0 on and below the diagonal, -1e30 above it. The
/// masked logits underflow to exactly zero weight after softmax.
template <typename T>
Tensor<T> causal_mask(std::size_t t);

template <typename T>
struct AttentionParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
struct AttentionResult {
  Tensor<T> output;
  Tensor<T> weights;  // (..., Tq, Tk)
};

/// softmax(q k^T / sqrt(d) + mask) v for q (..., Tq, d), k and v (..., Tk, d)
/// with identical leading dims. `mask` may be undefined or (Tq, Tk).
template <typename T>
AttentionResult<T> scaled_dot_product_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                                                const Tensor<T>& mask);

/// Query input (B, Tq, d_model), key/value input (B, Tk, d_model).
template <typename T>
AttentionResult<T> multi_head_attention(const Tensor<T>& query, const Tensor<T>& key_value, std::size_t n_heads,
                                        const AttentionParams<T>& params, const Tensor<T>& mask);

template <typename T>
struct FeedForwardParams {
  Tensor<T> w1, b1, w2, b2;
};

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma, beta;
};

template <typename T>
struct EncoderLayer {
  AttentionParams<T> self_attn;
  LayerNormParams<T> norm1;
  FeedForwardParams<T> ff;
  LayerNormParams<T> norm2;
};

template <typename T>
struct DecoderLayer {
  AttentionParams<T> self_attn;
  LayerNormParams<T> norm1;
  AttentionParams<T> cross_attn;
  LayerNormParams<T> norm2;
  FeedForwardParams<T> ff;
  LayerNormParams<T> norm3;
};

struct DecodedSequence {
  TokenSequence tokens;               // length max_len, blank padded
  std::vector<double> probabilities;  // one per emitted character
  std::string text;
};

/// Recognition network: per-ROI backbone features, transformer encoder and
/// autoregressive decoder. With `softmax_heads` the transformer is replaced by
/// N independent linear classifiers.
template <typename T>
class Recognizer {
 public:
  Recognizer() = default;
  Recognizer(const TransformerConfig& config, const BackboneConfig& backbone, std::size_t n_positions,
             bool softmax_heads, ParameterStore<T>& store, std::mt19937_64& rng);

  const TransformerConfig& config() const { return config_; }
  std::size_t n_positions() const { return n_positions_; }
  bool softmax_heads() const { return softmax_heads_; }
  const Backbone<T>& backbone() const { return backbone_; }

  /// crops (B * N, C, h, w) -> (B, N, d_model).
  Tensor<T> roi_features(const Tensor<T>& crops, std::size_t batch) const;
  /// (B, N, d_model) -> encoded memory of the same shape.
  Tensor<T> encode(const Tensor<T>& features, bool training, std::mt19937_64& rng) const;
  /// tokens (B, t) row-major with position 0 = BOS; returns logits (B, t, 95).
  Tensor<T> decode_step(const std::vector<int>& tokens, std::size_t t, const Tensor<T>& memory, bool training,
                        std::mt19937_64& rng) const;
  /// Decoder input BOS + targets[0..N-2]; logits (B, N, 95).
  Tensor<T> teacher_forced_logits(const Tensor<T>& memory, const std::vector<TokenSequence>& targets, bool training,
                                  std::mt19937_64& rng) const;
  std::vector<DecodedSequence> greedy_decode(const Tensor<T>& memory, std::size_t max_len) const;

  /// Softmax ablation: (B, N, d_model) features -> (B, N, 95) logits.
  Tensor<T> softmax_logits(const Tensor<T>& features) const;
  std::vector<DecodedSequence> softmax_decode(const Tensor<T>& features) const;

  /// Full recognizer: teacher-forced logits (B, N, 95) from crops.
  Tensor<T> forward(const Tensor<T>& crops, std::size_t batch, const std::vector<TokenSequence>& targets,
                    bool training, std::mt19937_64& rng) const;
  std::vector<DecodedSequence> predict(const Tensor<T>& crops, std::size_t batch, std::size_t max_len) const;

  const std::vector<EncoderLayer<T>>& encoder_layers() const { return encoder_; }
  const std::vector<DecoderLayer<T>>& decoder_layers() const { return decoder_; }

 private:
  Tensor<T> encoder_layer(const Tensor<T>& x, const EncoderLayer<T>& layer, bool training,
                          std::mt19937_64& rng) const;
  Tensor<T> decoder_layer(const Tensor<T>& x, const Tensor<T>& memory, const DecoderLayer<T>& layer,
                          const Tensor<T>& mask, bool training, std::mt19937_64& rng) const;
  Tensor<T> feed_forward(const Tensor<T>& x, const FeedForwardParams<T>& ff, bool training,
                         std::mt19937_64& rng) const;

  TransformerConfig config_;
  std::size_t n_positions_ = 0;
  bool softmax_heads_ = false;
  Backbone<T> backbone_;
  Tensor<T> proj_weight_, proj_bias_;
  std::vector<EncoderLayer<T>> encoder_;
  std::vector<DecoderLayer<T>> decoder_;
  Tensor<T> embedding_;
  Tensor<T> cls_weight_, cls_bias_;
  Tensor<T> head_weight_, head_bias_;  // softmax ablation: (N, d, 95), (N, 95)
};

/// Mean cross-entropy over every position (padding included) of logits
/// (B, N, 95) against blank-padded targets.
template <typename T>
Tensor<T> recognition_loss(const Tensor<T>& logits, const std::vector<TokenSequence>& targets);

}  // namespace kiss
