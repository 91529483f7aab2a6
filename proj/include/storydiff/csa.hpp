#pragma once

#include <compare>
#include <cstdint>
#include <vector>

#include "storydiff/attention.hpp"
#include "storydiff/rng.hpp"

namespace storydiff {

/// Knobs of consistent self-attention.
struct CsaConfig {
  float sampling_rate = 0.5f;
  int tile_size = 4;
  bool include_self = true;        // pool = whole tile (true) or the other images only
  bool per_image_sampling = false; // one shared draw per window, or one per image
  std::uint64_t seed = 0;

  void validate() const;
  int effective_tile(int batch) const;
};

/// Token features laid out [B, N, C].
class TokenBatch {
 public:
  TokenBatch() = default;
  explicit TokenBatch(Tensor data);

  int batch() const { return data_.dim(0); }
  int tokens() const { return data_.dim(1); }
  int channels() const { return data_.dim(2); }
  const Tensor& data() const { return data_; }
  Tensor image(int i) const;

 private:
  Tensor data_;
};

struct TokenRef {
  int image = 0;
  int token = 0;
  friend auto operator<=>(const TokenRef&, const TokenRef&) = default;
};

struct SampledTokens {
  Tensor tokens;  // [M, C]; empty when M == 0
  std::vector<TokenRef> source_indices;
  int count() const { return static_cast<int>(source_indices.size()); }
};

/// floor(rate * pool_size), guarded against representation error in rate.
int sample_count(int pool_size, float rate);

/// First `count` entries of a partial Fisher-Yates shuffle of 0..pool_size-1:
/// for i < count, swap(idx[i], idx[i + below(pool_size - i)]).
std::vector<int> sample_without_replacement(int pool_size, int count, RngStream& rng);

/// Uniform draw of floor(rate * rows) distinct pool rows. Row r is reported as
/// (r / tokens_per_image, r % tokens_per_image); 0 means one flat image.
SampledTokens rand_sample(const Tensor& pool, float rate, RngStream& rng, int tokens_per_image = 0);

/// [sampled; own] concatenation, the key/value source of one image.
Tensor build_paired_tokens(const Tensor& own, const SampledTokens& sampled);

/// Number of sliding windows of width w_eff covering each of b images.
std::vector<int> window_coverage(int b, int w_eff);

/// Instrumentation filled by consistent_self_attention.
struct CsaTrace {
  int windows = 0;
  int attention_calls = 0;
  int max_window_tokens = 0;  // tile tokens + sampled tokens entering one window
  int max_kv_length = 0;      // key/value rows seen by one image
  std::vector<std::vector<TokenRef>> samples;  // one entry per draw, in draw order

  void reset() { *this = CsaTrace{}; }
};

/// Consistent self-attention over tokens stacked as [B*N, C]. Windows of
/// W_eff images slide along the batch axis; window t draws from rng.child(t).
Var consistent_self_attention(const Var& tokens, int batch, int tokens_per_image, const AttentionWeights& w,
                              const CsaConfig& cfg, const RngStream& rng, CsaTrace* trace = nullptr);

TokenBatch consistent_self_attention(const TokenBatch& batch, const AttentionWeights& w, const CsaConfig& cfg,
                                     const RngStream& rng, CsaTrace* trace = nullptr);

}  // namespace storydiff
