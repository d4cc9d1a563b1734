#pragma once

// Desk-scale evaluation: a small trained conv classifier provides the
// embedding space; Frechet distance on Gaussian fits, pool-based retrieval
// precision against class prototypes, multimodality, and wall-clock AIT.

#include <functional>
#include <string>
#include <vector>

#include "msm/corpus.hpp"
#include "msm/inference.hpp"
#include "msm/optim.hpp"

namespace msm {

constexpr int kEmbeddingDim = 64;  // fixed regardless of the class count

struct ExtractorTrainConfig {
  int steps = 400;
  int batch_size = 16;
  uint64_t seed = 5;
  double lr_target = 1e-3;
  int warmup_steps = 100;
  double accuracy_gate = 0.9;  // metrics refuse to run below this
};

class FeatureExtractor {
 public:
  FeatureExtractor() = default;
  static FeatureExtractor create(Rng& rng, int num_classes);

  /// (B, F, D) normalized motion -> (B, 64) embeddings (pre-head pooling).
  Tensor embed(const Tensor& m) const;
  /// (B, F, D) -> (B, K) logits.
  Tensor logits(const Tensor& m) const;
  std::vector<float> embed_one(const MotionSequence& m) const;

  int num_classes() const { return k_; }
  double val_accuracy() const { return val_accuracy_; }

  ParamList trainable_params();
  void save(const std::string& dir) const;
  static FeatureExtractor load(const std::string& dir);

  /// Trains on the corpus train split with random temporal crops; errors if
  /// the held-out accuracy gate is not reached.
  static FeatureExtractor train(const Corpus& corpus, const ExtractorTrainConfig& cfg,
                                const std::function<void(int64_t, double)>& heartbeat = {});
  static double accuracy(const FeatureExtractor& ex, const Corpus& corpus, Split split);

 private:
  int k_ = 0;
  double val_accuracy_ = 0.0;
  Tensor w1, b1, w2, b2, w3, b3;  // conv stack
  Tensor head_w, head_b;          // classifier
};

/// Frechet distance between Gaussian fits. Matrix square root via symmetric
/// eigendecomposition with negative eigenvalues clipped at 0; singular
/// covariances get a 1e-6 ridge (logged).
double frechet_from_moments(const std::vector<double>& mu_a, const std::vector<double>& cov_a,
                            const std::vector<double>& mu_b, const std::vector<double>& cov_b, int dim);

/// Fits moments to the two embedding sets (rows) and applies the closed form.
double desk_fid(const std::vector<std::vector<float>>& set_a, const std::vector<std::vector<float>>& set_b);

/// Mean embedding per class over a split of real data.
std::vector<std::vector<float>> class_prototypes(const FeatureExtractor& ex, const Corpus& corpus,
                                                 Split split);

struct RPrecision {
  double top1 = 0, top2 = 0, top3 = 0;
  bool reduced_pool = false;  // pool smaller than 32: non-comparable
};

/// 32-pool retrieval: each generated motion competes against 31 distractor
/// motions generated for other classes; ranking is by cosine similarity of
/// the motion embedding to the true class prototype. Chance level 1/32.
RPrecision r_precision_lite(const std::vector<std::vector<float>>& embeddings, const std::vector<int>& labels,
                            const std::vector<std::vector<float>>& prototypes, uint64_t seed, int pool = 32);

/// Mean Euclidean distance of each embedding to its true class prototype.
double mm_dist_lite(const std::vector<std::vector<float>>& embeddings, const std::vector<int>& labels,
                    const std::vector<std::vector<float>>& prototypes);

/// Mean pairwise embedding distance among repeated generations per
/// condition, averaged over conditions.
double multimodality(const std::vector<std::vector<std::vector<float>>>& per_condition_embeddings);

struct AitResult {
  double mean_seconds = 0;
  double std_seconds = 0;
  int samples = 0;
  std::vector<double> per_sample;
};

/// Wall-clock per-sample time of `run`; the first 5 runs are warmup and
/// excluded (none when n == 1).
AitResult measure_ait(const std::function<void()>& run, int n);

struct MetricValue {
  double mean = 0;
  double ci_halfwidth = 0;  // 95% over repeats
};

struct MetricReport {
  MetricValue fid, r1, r2, r3, mm_dist, multimodality;
  AitResult ait;
  int n_samples = 0;
  int repeats = 0;
  uint64_t seed = 0;
  bool reduced_pool = false;
  std::string protocol_note;
  std::string build_id;
  std::string to_json(const std::string& run_config_json = "") const;
  std::string per_repeat_csv() const;
  std::vector<std::vector<double>> repeat_values;  // rows: fid,r1,r2,r3,mm,mmod
};

struct EvalConfig {
  int repeats = 20;
  int samples_per_repeat = 64;
  int multimodality_conditions = 4;
  int multimodality_per_condition = 10;
  uint64_t seed = 9;
  int ait_samples = 0;  // 0: skip timing
  SamplerConfig sampler;
  CfgSchedule cfg;
};

/// Full evaluation protocol: per repeat, draw conditions from the test
/// split, generate, embed, and compute every metric; aggregates with 95%
/// CIs. Deterministic given the seed.
MetricReport run_evaluation(const Generator& gen, const FeatureExtractor& ex, const Corpus& corpus,
                            const EvalConfig& cfg,
                            const std::function<void(const std::string&)>& progress = {});

/// Cumulative decode after each scale prefix: FID per step plus top-1
/// retrieval at the first and last step (the step-wise trend probe).
struct StepwiseResult {
  std::vector<double> fid_per_step;
  double top1_first = 0, top1_last = 0;
};
StepwiseResult stepwise_eval(const Generator& gen, const FeatureExtractor& ex, const Corpus& corpus,
                             int n_samples, uint64_t seed, const SamplerConfig& sampler,
                             const CfgSchedule& cfg);

/// Mean |frame delta| at mask boundaries of an edited motion (un-normalized
/// feature space), for the continuity check against the corpus baseline.
double boundary_velocity(const MotionSequence& edited, const EditMask& mask);

}  // namespace msm
