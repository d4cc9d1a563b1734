#pragma once

// Q-step generation over the frozen SAR + VAE pair: per-scale parallel
// sampling through an append-only KV cache, decaying classifier-free
// guidance (condition and null batched into one forward per step), and
// training-free editing via interpolated keep-masks.

#include <optional>
#include <string>
#include <vector>

#include "msm/sar.hpp"

namespace msm {

struct SamplerConfig {
  double temperature = 1.0;
  int top_k = 0;  // 0: full distribution
  bool greedy = false;
};

/// Linear CFG decay: w(1) = w_start down to w(Q) = w_end.
struct CfgSchedule {
  double w_start = 4.0;
  double w_end = 1.0;

  double weight(int step_1based, int total_steps) const {
    if (total_steps <= 1) return w_end;
    return w_start + (w_start - w_end) * (1.0 - step_1based) / (total_steps - 1);
  }
  void validate() const { require(w_start >= w_end, "cfg: weight must be non-increasing across steps"); }
};

/// logits_null + w * (logits_cond - logits_null), elementwise.
Tensor cfg_mix(const Tensor& logits_cond, const Tensor& logits_null, double w);

/// Categorical sampling per row of (N, V) logits after temperature scaling
/// and top-k filtering. greedy (or temperature 0) takes the argmax.
std::vector<int32_t> sample_tokens(const Tensor& logits, const SamplerConfig& cfg, Rng& rng);

/// Boolean selector over the latent timeline: true = generate, false = keep
/// the reference tokens.
struct EditMask {
  std::vector<bool> generate;

  int size() const { return static_cast<int>(generate.size()); }
  bool all_keep() const;
  bool all_generate() const;
  static EditMask full(int t, bool gen);
  /// prefix:F | suffix:F | range:a,b | file:PATH (F = fraction to generate).
  static EditMask parse_spec(const std::string& spec, int t);
  /// Linear resample to scale s, thresholded at 0.5; exact 0.5 generates.
  std::vector<bool> at_scale(int s) const;
};

struct StepTrace {
  int step = 0;
  double wall_ms = 0.0;
  int tokens = 0;
};

struct GenerationTrace {
  std::vector<StepTrace> steps;
  int forward_passes = 0;  // transformer invocations (CFG pair is batched into one)
  int cached_length = 0;
};

struct GenerateOptions {
  SamplerConfig sampler;
  CfgSchedule cfg;
  uint64_t seed = 0;
  bool uncond = false;     // null-condition path only, no guidance mixing
  int stop_after_scale = 0;  // 0 = run all Q steps (early-exit hook for tests)
};

struct EditPlan {
  std::vector<MultiScaleTokenSet> reference;  // ground-truth tokens per sample
  EditMask mask;
};

class Generator {
 public:
  Generator(const SarModel& sar, const VaeModel& vae);

  /// Batched token generation; phrases[i] empty means null condition for
  /// that sample. Per-sample RNG streams make results independent of batch
  /// packing. When `edit` is given, keep positions are overwritten with the
  /// reference tokens after each step's sampling, before cache insertion.
  std::vector<MultiScaleTokenSet> generate_tokens(const std::vector<std::vector<int>>& phrases,
                                                  const GenerateOptions& opt,
                                                  GenerationTrace* trace = nullptr,
                                                  const EditPlan* edit = nullptr) const;

  /// Reference route for the cache-equivalence check: logits of scale
  /// `scale_index` recomputed from the full prefix with the causal mask,
  /// no cache involved.
  Tensor logits_without_cache(const std::vector<MultiScaleTokenSet>& prefix_tokens, int scale_index,
                              const std::vector<std::vector<int>>& phrases, bool uncond) const;

  /// decode(mtps_decode(tokens)) + denormalization.
  MotionSequence decode_tokens(const MultiScaleTokenSet& tokens, const std::string& id = "gen") const;

  /// One conditioned sample end to end.
  struct Sample {
    MultiScaleTokenSet tokens;
    MotionSequence motion;
  };
  Sample generate(const std::vector<int>& phrase, const GenerateOptions& opt,
                  GenerationTrace* trace = nullptr) const;

  /// Training-free editing of a normalized reference sequence.
  Sample edit(const MotionSequence& reference, const EditMask& mask,
              const std::optional<std::vector<int>>& phrase, const GenerateOptions& opt,
              GenerationTrace* trace = nullptr) const;

  const SarModel& sar() const { return sar_; }
  const VaeModel& vae() const { return vae_; }

 private:
  static Tensor slice_dim1_units(const Tensor& x, int b0, int b1);  // rows of dim 0

  const SarModel& sar_;
  const VaeModel& vae_;
};

/// Motion writers for the CLI surfaces.
std::string motion_to_json(const MotionSequence& m);
std::string motion_to_csv(const MotionSequence& m);
std::string trace_to_csv(const GenerationTrace& trace);
std::vector<std::string> feature_names();

}  // namespace msm
