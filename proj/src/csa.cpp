#include "storydiff/csa.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>

namespace storydiff {

void CsaConfig::validate() const {
  if (!(sampling_rate >= 0.0f && sampling_rate <= 1.0f)) {
    throw ContractError("sampling_rate must lie in [0, 1], got " + std::to_string(sampling_rate));
  }
  if (tile_size < 1) throw ContractError("tile_size must be >= 1, got " + std::to_string(tile_size));
}

int CsaConfig::effective_tile(int batch) const { return std::min(tile_size, batch); }

TokenBatch::TokenBatch(Tensor data) : data_(std::move(data)) {
  if (data_.rank() != 3) throw DimensionError("TokenBatch needs [B, N, C], got " + shape_string(data_.shape()));
}

Tensor TokenBatch::image(int i) const {
  return data_.reshaped({batch() * tokens(), channels()}).rows_slice(i * tokens(), tokens());
}

int sample_count(int pool_size, float rate) {
  if (pool_size <= 0) return 0;
  // Read the float as its shortest decimal (0.29f -> 0.29), then let 1e-9
  // absorb products like 0.29 * 100 = 28.999999999999996.
  char buf[32];
  const auto end = std::to_chars(buf, buf + sizeof buf, rate).ptr;
  double r = 0.0;
  std::from_chars(buf, end, r);
  const double m = std::floor(r * pool_size + 1e-9);
  return std::clamp(static_cast<int>(m), 0, pool_size);
}

std::vector<int> sample_without_replacement(int pool_size, int count, RngStream& rng) {
  if (count < 0 || count > pool_size) throw ContractError("sample count exceeds pool size");
  std::vector<int> idx(static_cast<std::size_t>(pool_size));
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = 0; i < count; ++i) {
    const auto j = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(pool_size - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(count));
  return idx;
}

SampledTokens rand_sample(const Tensor& pool, float rate, RngStream& rng, int tokens_per_image) {
  if (!(rate >= 0.0f && rate <= 1.0f)) throw ContractError("rand_sample: rate must lie in [0, 1]");
  const int rows = pool.rows();
  const int per = tokens_per_image > 0 ? tokens_per_image : std::max(rows, 1);
  const std::vector<int> picked = sample_without_replacement(rows, sample_count(rows, rate), rng);
  SampledTokens out;
  if (picked.empty()) return out;
  out.tokens = Tensor({static_cast<int>(picked.size()), pool.cols()});
  for (std::size_t i = 0; i < picked.size(); ++i) {
    out.tokens.matrix().row(static_cast<Eigen::Index>(i)) = pool.matrix().row(picked[i]);
    out.source_indices.push_back({picked[i] / per, picked[i] % per});
  }
  return out;
}

Tensor build_paired_tokens(const Tensor& own, const SampledTokens& sampled) {
  if (sampled.count() == 0) return own;
  if (sampled.tokens.cols() != own.cols()) {
    throw DimensionError("build_paired_tokens: channel mismatch " + shape_string(sampled.tokens.shape()) + " vs " +
                         shape_string(own.shape()));
  }
  Tensor out({sampled.count() + own.rows(), own.cols()});
  out.matrix().topRows(sampled.count()) = sampled.tokens.matrix();
  out.matrix().bottomRows(own.rows()) = own.matrix();
  return out;
}

std::vector<int> window_coverage(int b, int w_eff) {
  if (w_eff < 1 || w_eff > b) {
    throw ContractError("window_coverage: need 1 <= w_eff <= b, got w_eff=" + std::to_string(w_eff) +
                        " b=" + std::to_string(b));
  }
  std::vector<int> cov(static_cast<std::size_t>(b));
  for (int i = 0; i < b; ++i) cov[static_cast<std::size_t>(i)] = std::min({i, b - w_eff, w_eff - 1, b - 1 - i}) + 1;
  return cov;
}

namespace {

std::vector<TokenRef> to_refs(const std::vector<int>& rows, int n) {
  std::vector<TokenRef> refs;
  refs.reserve(rows.size());
  for (int r : rows) refs.push_back({r / n, r % n});
  return refs;
}

}  // namespace

Var consistent_self_attention(const Var& tokens, int batch, int tokens_per_image, const AttentionWeights& w,
                              const CsaConfig& cfg, const RngStream& rng, CsaTrace* trace) {
  cfg.validate();
  if (batch < 1) throw ContractError("consistent_self_attention: empty batch");
  if (tokens_per_image < 1 || tokens.rows() != batch * tokens_per_image) {
    throw DimensionError("consistent_self_attention: " + shape_string(tokens.shape()) + " is not " +
                         std::to_string(batch) + " images of " + std::to_string(tokens_per_image) + " tokens");
  }
  const int n = tokens_per_image;
  const int w_eff = cfg.effective_tile(batch);

  std::vector<Var> outputs;
  std::vector<int> targets;
  for (int t = 0; t + w_eff <= batch; ++t) {
    const RngStream window_rng = rng.child(static_cast<std::uint64_t>(t));
    const int tile_begin = t * n;
    const int tile_rows = w_eff * n;

    // Per image: global rows of the sampled tokens (before its own tokens).
    std::vector<std::vector<int>> sampled(static_cast<std::size_t>(w_eff));
    if (cfg.include_self && !cfg.per_image_sampling) {
      RngStream r = window_rng;
      std::vector<int> picked = sample_without_replacement(tile_rows, sample_count(tile_rows, cfg.sampling_rate), r);
      for (int& p : picked) p += tile_begin;
      if (trace) trace->samples.push_back(to_refs(picked, n));
      std::fill(sampled.begin(), sampled.end(), picked);
    } else {
      for (int i = 0; i < w_eff; ++i) {
        const int image = t + i;
        RngStream r = window_rng.child(static_cast<std::uint64_t>(image));
        std::vector<int> pool;
        pool.reserve(static_cast<std::size_t>(tile_rows));
        for (int row = tile_begin; row < tile_begin + tile_rows; ++row) {
          if (cfg.include_self || row / n != image) pool.push_back(row);
        }
        const int pool_size = static_cast<int>(pool.size());
        std::vector<int> picked = sample_without_replacement(pool_size, sample_count(pool_size, cfg.sampling_rate), r);
        for (int& p : picked) p = pool[static_cast<std::size_t>(p)];
        if (trace) trace->samples.push_back(to_refs(picked, n));
        sampled[static_cast<std::size_t>(i)] = std::move(picked);
      }
    }

    std::vector<int> q_rows(static_cast<std::size_t>(tile_rows));
    std::iota(q_rows.begin(), q_rows.end(), tile_begin);
    std::vector<int> kv_rows;
    std::vector<int> q_lengths(static_cast<std::size_t>(w_eff), n);
    std::vector<int> kv_lengths;
    std::vector<int> distinct;
    for (int i = 0; i < w_eff; ++i) {
      const auto& s = sampled[static_cast<std::size_t>(i)];
      kv_rows.insert(kv_rows.end(), s.begin(), s.end());
      for (int k = 0; k < n; ++k) kv_rows.push_back(tile_begin + i * n + k);
      kv_lengths.push_back(static_cast<int>(s.size()) + n);
      distinct.insert(distinct.end(), s.begin(), s.end());
    }

    const Var q_src = gather_rows(tokens, q_rows);
    const Var kv_src = gather_rows(tokens, kv_rows);
    outputs.push_back(attend(q_src, kv_src, kv_src, w, q_lengths, kv_lengths));
    targets.insert(targets.end(), q_rows.begin(), q_rows.end());

    if (trace) {
      std::sort(distinct.begin(), distinct.end());
      distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
      ++trace->windows;
      ++trace->attention_calls;
      trace->max_window_tokens = std::max(trace->max_window_tokens, tile_rows + static_cast<int>(distinct.size()));
      trace->max_kv_length =
          std::max(trace->max_kv_length, *std::max_element(kv_lengths.begin(), kv_lengths.end()));
    }
  }
  return average_into_rows(outputs, targets, batch * n);
}

TokenBatch consistent_self_attention(const TokenBatch& batch, const AttentionWeights& w, const CsaConfig& cfg,
                                     const RngStream& rng, CsaTrace* trace) {
  NoGradGuard no_grad;
  const int b = batch.batch();
  const int n = batch.tokens();
  const int c = batch.channels();
  const Var flat(batch.data().reshaped({b * n, c}));
  const Var out = consistent_self_attention(flat, b, n, w, cfg, rng, trace);
  return TokenBatch(out.value().reshaped({b, n, c}));
}

}  // namespace storydiff
