#pragma once

// Multi-scale residual quantization. Each layer downsamples the residual to
// its scale, quantizes against a non-shared codebook, then dequantizes,
// upsamples back to the latent length and runs a per-layer recovery conv
// before the residual subtraction. Codebooks learn by EMA with dead-code
// resets; the commit loss carries the encoder/recovery gradients.

#include <optional>
#include <string>
#include <vector>

#include "msm/ops.hpp"
#include "msm/optim.hpp"
#include "msm/tensor.hpp"

namespace msm {

struct ScaleSchedule {
  std::vector<int> scales;  // strictly increasing, s_Q = latent length T

  int num_layers() const { return static_cast<int>(scales.size()); }
  int latent_len() const { return scales.back(); }
  int total_tokens() const;
  void validate() const;

  /// The Q=10 default: (3,6,10,15,20,25,30,36,42,49), 236 tokens.
  static ScaleSchedule default_schedule();
  /// Schedule for other Q over latent length T (power curve, s_Q = T).
  static ScaleSchedule for_layers(int q, int latent_len);
  static ScaleSchedule parse(const std::string& csv);
};

/// One codebook: V_q C-dim vectors plus EMA statistics and usage counters.
struct Codebook {
  Tensor vectors;                  // (V, C), never gradient-trained
  std::vector<double> ema_counts;  // V
  std::vector<double> ema_sums;    // V * C
  std::vector<int64_t> usage;      // hits since last reset
  std::vector<int> reset_cooldown;  // per-code batches left before reset eligibility
  int64_t batches_seen = 0;

  int size() const { return vectors.dim(0); }
  int dim() const { return vectors.dim(1); }
};

/// Two-layer conv (k=3, C->C) with ReLU, zero-init second conv plus skip so a
/// fresh net is exactly the identity.
struct RecoveryNet {
  Tensor w1, b1, w2, b2;

  static RecoveryNet init(Rng& rng, int channels);
  Tensor apply(const Tensor& x) const;  // x (B, T, C)
  void collect_params(const std::string& prefix, ParamList& out);
  int64_t param_count() const;
};

struct QuantizerConfig {
  int codebook_base = 64;   // V_1
  int codebook_step = 16;   // dV: V_q = V_1 + (q-1) dV
  bool l2_norm = true;      // cosine-similarity lookup
  double ema_decay = 0.99;
  double reset_threshold = 1.0;
  int reset_grace = 200;    // batches before a code may be reset
  double beta = 0.02;       // commitment weight
  bool shared_codebook = false;  // ablation flag: layer size fixed at V_1
};

struct CodebookBank {
  ScaleSchedule schedule;
  QuantizerConfig config;
  int dim = 0;
  std::vector<Codebook> books;
  std::vector<RecoveryNet> recovery;

  static CodebookBank init(Rng& rng, const ScaleSchedule& schedule, int dim, const QuantizerConfig& cfg);
  uint64_t checksum() const;
  void collect_params(ParamList& out);  // recovery nets only (codebooks are EMA)
  void collect_all_tensors(ParamList& out);  // includes codebook vectors, for checkpoints
};

struct MultiScaleTokenSet {
  std::vector<std::vector<int32_t>> layers;  // layer q holds s_q ids in [0, V_q)

  int num_layers() const { return static_cast<int>(layers.size()); }
  int total_tokens() const;
  bool operator==(const MultiScaleTokenSet& other) const { return layers == other.layers; }
};

/// Per-layer record kept by mtps_encode for the commit loss and EMA updates.
struct EncodeRecord {
  struct Layer {
    Tensor residual_in;    // z^(q), (B, T, C), graph-connected
    Tensor contribution;   // zhat^(q) = recovery(upsample(dequant)), graph-connected
    Tensor downsampled;    // detached d^(q) rows used as EMA targets, (B, s_q, C)
    std::vector<int32_t> indices;  // B * s_q assignments
  };
  std::vector<Layer> layers;
};

struct MtpsResult {
  std::vector<MultiScaleTokenSet> tokens;  // one per batch item
  Tensor zhat;                             // (B, T, C), sum of contributions
  EncodeRecord record;
};

/// Per-channel linear resize under the project-wide sampling rule.
Tensor resample(const Tensor& seq, int target_len);

/// Nearest-code indices for each row of z (L, C) or (B, L, C) flattened.
/// With l2_norm, argmax cosine similarity (zero-norm rows fall back to
/// Euclidean); without, argmin Euclidean distance. Ties -> smallest index.
std::vector<int32_t> quantize_nearest(const Tensor& z, const Codebook& book, bool use_l2norm);

MtpsResult mtps_encode(const Tensor& z, CodebookBank& bank, bool record_usage = false);
Tensor mtps_decode(const std::vector<MultiScaleTokenSet>& tokens, const CodebookBank& bank);
/// Decode only layers [0, layer_count) — the cumulative prefix sum.
Tensor mtps_decode_prefix(const std::vector<MultiScaleTokenSet>& tokens, const CodebookBank& bank,
                          int layer_count);

/// EMA accumulation for one batch of assignments, then dead-code resets
/// against rows drawn from the batch.
void ema_update(Codebook& book, const Tensor& rows, const std::vector<int32_t>& assignments, double decay);
int reset_dead_codes(Codebook& book, const Tensor& batch_rows, double threshold, int grace, Rng& rng);

/// Commit loss over the record: sum_q ||sg[z] - zhat||^2 + beta ||z - sg[zhat]||^2,
/// plain sums of squares (the trainer normalizes by element count).
Tensor commit_loss(const EncodeRecord& record, double beta);

/// Fraction of codes with at least one hit, per layer, on the usage counters.
std::vector<double> utilization(const CodebookBank& bank);

/// Token-set JSON (schedule, per-layer index arrays, bank checksum).
std::string token_set_to_json(const MultiScaleTokenSet& tokens, const ScaleSchedule& schedule,
                              uint64_t bank_checksum);
MultiScaleTokenSet token_set_from_json(const std::string& text, const ScaleSchedule& expect_schedule);

}  // namespace msm
