#pragma once

// Convolution-attention autoencoder around the multi-scale quantizer:
// 4x temporal compression via two stride-2 stages, GroupNorm+SiLU bottleneck
// residual blocks, one self-attention layer at the lowest resolution per
// side, nearest-resize+conv upsampling in the decoder.

#include <functional>
#include <optional>
#include <string>

#include "msm/corpus.hpp"
#include "msm/quantizer.hpp"

namespace msm {

struct VaeConfig {
  int channels = 128;      // C: conv width and latent dim
  int res_blocks = 2;      // residual blocks per stage
  int expansion = 2;       // bottleneck channel expansion r
  int groups = 8;          // GroupNorm groups
  int attn_heads = 4;      // heads of the bottleneck attention
  int attn_layers = 1;     // attention layers per side
  int64_t reference_param_budget = 0;  // 0: skip the budget check

  void validate() const {
    require(channels % groups == 0, "vae: channels must be divisible by groups");
    require(channels % attn_heads == 0, "vae: channels must be divisible by attention heads");
    require(res_blocks >= 1 && expansion >= 1 && attn_layers >= 0, "vae: bad block configuration");
  }
};

struct VaeTrainConfig {
  int steps = 600;
  int batch_size = 16;
  int eval_interval = 100;
  uint64_t seed = 1;
  bool bypass_quantizer = false;  // pure autoencoder mode
  double lr_target = 2e-4;
  int warmup_steps = 2000;
  double commit_weight = 1.0;     // on the element-normalized commit sum
  std::string checkpoint_dir;     // when set, best-val state is saved here
  std::string run_meta_json;      // echoed into the checkpoint meta
};

/// Per-block activation statistics captured on demand (group-variance probe).
struct ActivationStats {
  struct Block {
    std::string name;
    double min_group_var = 0.0;
    double max_group_var = 0.0;
  };
  std::vector<Block> blocks;
};

class VaeModel {
 public:
  VaeModel() = default;
  /// Fresh model with an initialized bank over the given schedule.
  static VaeModel init(Rng& rng, const VaeConfig& cfg, const ScaleSchedule& schedule,
                       const QuantizerConfig& qcfg, const CorpusStats& stats, double fps);

  /// m (B, F, D) normalized -> z (B, T=F/4, C). F must be divisible by 4.
  Tensor encode(const Tensor& m, ActivationStats* stats = nullptr) const;
  /// zhat (B, T, C) -> m (B, 4T, D), normalized feature space.
  Tensor decode(const Tensor& zhat) const;

  /// Frames the pipeline pads/crops to: 4 * s_Q.
  int frames_for_schedule() const { return 4 * bank_.schedule.latent_len(); }

  /// encode -> mtps_encode -> mtps_decode -> decode for one normalized
  /// sequence; pads to the schedule length and crops back.
  MotionSequence reconstruct(const MotionSequence& m) const;

  /// Tokenize one normalized sequence (padded to the schedule length).
  MultiScaleTokenSet tokenize(const MotionSequence& m) const;
  /// Decode tokens to a normalized (padded-length) motion tensor (1, F, D).
  Tensor detokenize(const std::vector<MultiScaleTokenSet>& tokens, int layer_count = -1) const;

  CodebookBank& bank() { return bank_; }
  const CodebookBank& bank() const { return bank_; }
  const VaeConfig& config() const { return cfg_; }
  const CorpusStats& stats() const { return stats_; }
  double fps() const { return fps_; }
  int64_t train_step() const { return train_step_; }

  ParamList trainable_params();      // encoder + decoder + recovery nets
  int64_t encoder_decoder_param_count() const;

  void save(const std::string& dir, const std::string& extra_meta_json = "") const;
  static VaeModel load(const std::string& dir);

  /// Pads a normalized sequence to `frames` by repeating the last frame.
  static Tensor pad_to_frames(const MotionSequence& m, int frames);

 private:
  friend struct VaeTrainer;
  VaeConfig cfg_;
  CodebookBank bank_;
  CorpusStats stats_;
  double fps_ = 20.0;
  int64_t train_step_ = 0;

  struct ResBlock {
    Tensor gn1_g, gn1_b, w_expand, b_expand;
    Tensor gn2_g, gn2_b, w_depth, b_depth;
    Tensor gn3_g, gn3_b, w_compress, b_compress;
  };
  struct AttnBlock {
    Tensor gn_g, gn_b, wq, wk, wv, wo;
  };
  struct Coder {
    Tensor stem_w, stem_b;
    std::vector<ResBlock> blocks;       // flattened per-stage blocks
    std::vector<Tensor> down_w, down_b;  // encoder only
    std::vector<Tensor> up_w, up_b;      // decoder only
    std::vector<AttnBlock> attn;
    Tensor head_gn_g, head_gn_b, head_w, head_b;
  };
  Coder enc_, dec_;

  Tensor res_block(const ResBlock& blk, const Tensor& x) const;
  Tensor attn_block(const AttnBlock& blk, const Tensor& x) const;
  static void collect_coder(const std::string& prefix, Coder& c, ParamList& out);
};

struct VaeTrainStats {
  double best_val_l1 = 0.0;
  int64_t steps_run = 0;
  std::vector<double> val_l1_history;
  int64_t skipped_nan_steps = 0;
};

struct VaeTrainer {
  /// Stage-1 training loop: L1 + commit through the quantizer with
  /// straight-through, EMA + resets each step, best-val checkpointing in
  /// memory. `interrupt` (optional) stops the loop at the next step.
  static VaeTrainStats train(VaeModel& model, const Corpus& corpus, const VaeTrainConfig& cfg,
                             const volatile bool* interrupt = nullptr,
                             const std::function<void(int64_t, double)>& heartbeat = {});

  /// Mean reconstruction L1 over a split's true (un-padded) frames.
  static double eval_l1(const VaeModel& model, const Corpus& corpus, Split split, int max_items = 0);
};

}  // namespace msm
