#pragma once

// Scale-wise autoregressive transformer: inputs built from the previous
// scale's tokens (up-downsampled through the frozen codebooks), block-causal
// attention over scales, fractional-position RoPE shared across scales,
// cross-attention to condition words, per-scale output heads sized to each
// codebook, and final-scale-weighted cross-entropy training.

#include <functional>
#include <string>
#include <vector>

#include "msm/corpus.hpp"
#include "msm/quantizer.hpp"
#include "msm/vae.hpp"

namespace msm {

struct SarConfig {
  int layers = 4;
  int heads = 4;
  int dim = 128;
  int ff_hidden = 256;
  double dropout = 0.0;
  double tau_max = 0.3;            // target-perturbation cap
  double perturb_prob = 0.5;       // per-sequence perturbation probability
  double final_scale_weight = 2.0; // w_Q
  double cond_dropout = 0.1;       // null-condition probability (CFG training)
  bool cumulative_input = false;   // ablation: feed the cumulative reconstruction

  void validate() const {
    require(dim % heads == 0, "sar: dim must be divisible by heads");
    require(dim % 2 == 0, "sar: dim must be even for RoPE");
    require(layers >= 1 && ff_hidden >= 1, "sar: bad block configuration");
    require(tau_max >= 0 && tau_max < 1, "sar: tau_max must be in [0, 1)");
  }
};

/// Flat-position bookkeeping: scale index, within-scale index, and the
/// normalized rotary position m / s_q * s_Q.
struct ScalePositionMap {
  std::vector<int> scale_of;
  std::vector<int> index_in_scale;
  std::vector<double> rotary;
  int total = 0;
};

ScalePositionMap scale_rope_positions(const ScaleSchedule& schedule);

/// Additive (1, 1, L, L) mask: entry (i, j) = 0 when scale(j) <= scale(i),
/// -inf otherwise. Full attention within a scale.
Tensor scale_causal_mask(const ScaleSchedule& schedule);

/// Batched condition: padded word ids with per-sample true lengths. Samples
/// marked null attend only to the learned null token.
struct CondBatch {
  std::vector<std::vector<int>> phrases;  // word ids per sample (empty => null)
  int batch() const { return static_cast<int>(phrases.size()); }
};

/// Per-layer cross-attention keys/values for a fixed condition, reusable
/// across every generation step.
struct CondContext {
  std::vector<Tensor> k, v;  // per layer, (B, H, W, Dh)
  Tensor mask;               // (B, 1, 1, W) additive
  Tensor pooled;             // (B, dim)
};

/// Append-only per-layer KV store for one generation session.
struct KvCache {
  std::vector<Tensor> k, v;  // per layer, (B, H, len, Dh)
  int length = 0;

  void reset(int layers) {
    k.assign(static_cast<size_t>(layers), Tensor());
    v.assign(static_cast<size_t>(layers), Tensor());
    length = 0;
  }
};

class SarModel {
 public:
  SarModel() = default;
  static SarModel create(Rng& rng, const SarConfig& cfg, const ScaleSchedule& schedule, int vocab,
                         int latent_dim, const std::vector<int>& codebook_sizes);

  /// Token-id view used to build transformer inputs (one entry per sample).
  using TokenBatch = std::vector<MultiScaleTokenSet>;

  /// Embedded input sequence of length total_tokens. In train_mode the token
  /// copies may be perturbed (uniform random valid ids) before embedding.
  Tensor build_input(const TokenBatch& tokens, const CondContext& cond, const CodebookBank& bank,
                     bool train_mode, Rng* rng) const;

  /// Condition context from word-id phrases (empty phrase = null condition).
  CondContext make_cond_context(const CondBatch& cond) const;

  /// Full training-style forward: per-scale logits, scale q sized V_q.
  std::vector<Tensor> forward(const TokenBatch& tokens, const CondContext& cond, const CodebookBank& bank,
                              bool train_mode, Rng* rng) const;

  /// Incremental forward over one scale block. Appends this block's K/V to
  /// the cache and returns the block's logits through the given scale head.
  Tensor forward_step(const Tensor& block_embed, int scale_index, KvCache& cache,
                      const CondContext& cond) const;

  /// Cache-free pass over an arbitrary prefix (the re-encode route of the
  /// cache-equivalence check).
  Tensor forward_prefix(const Tensor& x, const std::vector<double>& positions, const Tensor& mask,
                        const CondContext& cond) const {
    return blocks_forward(x, positions, mask, cond, nullptr);
  }
  const Tensor& head(int scale_index) const { return heads_[static_cast<size_t>(scale_index)]; }

  /// Embeds the input block for scale `scale_index` at inference time
  /// (scale 0 uses [sos]+condition; later scales consume prev_tokens).
  Tensor embed_step_input(int scale_index, const std::vector<std::vector<int32_t>>& prev_tokens,
                          const CondContext& cond, const CodebookBank& bank) const;

  const SarConfig& config() const { return cfg_; }
  const ScaleSchedule& schedule() const { return schedule_; }
  const ScalePositionMap& position_map() const { return posmap_; }
  const Tensor& causal_mask() const { return mask_; }
  int vocab() const { return vocab_; }
  int null_word_id() const { return vocab_; }  // extra table row
  const std::vector<int>& codebook_sizes() const { return head_sizes_; }
  int64_t train_step() const { return train_step_; }

  ParamList trainable_params();
  void save(const std::string& dir, uint64_t vae_bank_checksum, const std::string& extra_meta_json = "") const;
  static SarModel load(const std::string& dir, uint64_t expect_bank_checksum);

 private:
  friend struct SarTrainer;
  struct Block {
    Tensor attn_norm, wq, wk, wv, wo;
    Tensor cross_norm, cq, ck, cv, co;
    Tensor ffn_norm, w1, w3, w2;
  };

  Tensor blocks_forward(Tensor x, const std::vector<double>& positions, const Tensor& mask,
                        const CondContext& cond, KvCache* cache) const;
  Tensor pack_heads(const Tensor& t) const;    // (B, L, D) -> (B, H, L, Dh)
  Tensor unpack_heads(const Tensor& t) const;  // inverse
  Tensor broadcast_sos(int b) const;           // (B, 1, dim) view of the [sos] row
  static Tensor concat_heads_time(const Tensor& a, const Tensor& b);

  SarConfig cfg_;
  ScaleSchedule schedule_;
  ScalePositionMap posmap_;
  Tensor mask_;
  int vocab_ = 0;
  int latent_dim_ = 0;
  std::vector<int> head_sizes_;
  int64_t train_step_ = 0;

  Tensor word_table_;  // (vocab + 1, dim); last row is the null condition
  Tensor sos_;         // (1, dim)
  Tensor input_proj_;  // (latent_dim, dim)
  std::vector<Block> blocks_;
  Tensor final_norm_;
  std::vector<Tensor> heads_;  // per scale, (dim, V_q)
};

struct SarTrainConfig {
  int steps = 2000;
  int batch_size = 16;
  int eval_interval = 200;
  uint64_t seed = 2;
  double lr_target = 2e-4;
  int warmup_steps = 2000;
  std::string checkpoint_dir;
  std::string run_meta_json;
};

/// Tokenized training corpus: cached token sets plus their conditions.
struct TokenCache {
  ScaleSchedule schedule;
  uint64_t bank_checksum = 0;
  std::vector<MultiScaleTokenSet> tokens;
  std::vector<ConditionSpec> conditions;
  std::vector<Split> splits;

  static TokenCache build(const VaeModel& vae, const Corpus& corpus);
  void save(const std::string& dir) const;
  static TokenCache load(const std::string& dir);
};

struct SarTrainStats {
  double best_val_loss = 0.0;
  double final_train_accuracy = 0.0;  // next-scale token accuracy, last eval
  std::vector<double> val_loss_history;
  int64_t steps_run = 0;
};

struct SarTrainer {
  static SarTrainStats train(SarModel& model, const TokenCache& cache, const CodebookBank& bank,
                             uint64_t bank_checksum, const SarTrainConfig& cfg,
                             const volatile bool* interrupt = nullptr,
                             const std::function<void(int64_t, double)>& heartbeat = {});

  /// Weighted loss and per-scale CE on one batch, no grad. Returns
  /// (loss, per-scale CE values, token accuracy).
  struct EvalResult {
    double loss = 0.0;
    std::vector<double> per_scale_ce;
    double accuracy = 0.0;
  };
  static EvalResult evaluate(const SarModel& model, const TokenCache& cache, const CodebookBank& bank,
                             Split split, int max_items, uint64_t seed);

  /// Combines per-scale CE tensors with weights w_q (w_Q = final weight).
  static Tensor weighted_loss(const std::vector<Tensor>& per_scale_ce, double final_scale_weight);
};

}  // namespace msm
