#pragma once

// Synthetic conditioned-motion corpus: per-class kinematic generators over a
// 27-feature frame layout (3 root-velocity channels + 8 joints x 3 local
// positions), templated phrases over a closed vocabulary, stratified splits,
// and per-feature z-score normalization.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "msm/common.hpp"

namespace msm {

constexpr int kFeatureDim = 27;
constexpr int kNumJoints = 8;
constexpr int kMinFrames = 16;
constexpr int kMaxFrames = 200;
constexpr int kMaxClasses = 64;
constexpr int kMaxPhraseLen = 12;
constexpr int kMaxVocab = 128;

struct MotionSequence {
  std::string id;
  int frames = 0;
  int features = kFeatureDim;
  double fps = 20.0;
  std::vector<float> data;  // frames x features, row-major
  bool normalized = false;

  float& at(int f, int d) { return data[static_cast<size_t>(f) * features + d]; }
  float at(int f, int d) const { return data[static_cast<size_t>(f) * features + d]; }
  void validate() const;
};

struct ConditionSpec {
  int label_id = 0;
  std::vector<int> phrase;  // word ids, closed vocabulary
  std::string phrase_text;
};

struct CorpusStats {
  std::vector<float> mean;  // D
  std::vector<float> std;   // D, floored at 1e-8
};

enum class Split { kTrain, kVal, kTest };

std::string split_name(Split s);

struct CorpusItem {
  MotionSequence motion;
  ConditionSpec condition;
  Split split = Split::kTrain;
};

/// Closed phrase vocabulary shared by corpus, SAR conditioning and the CLI.
struct Vocabulary {
  std::vector<std::string> words;

  int size() const { return static_cast<int>(words.size()); }
  int id_of(const std::string& word) const;            // -1 when unknown
  std::vector<int> encode(const std::string& text) const;  // throws on unknown words
  std::string decode(const std::vector<int>& ids) const;
};

struct Corpus {
  std::vector<CorpusItem> items;
  Vocabulary vocabulary;
  std::vector<std::string> class_names;
  double fps = 20.0;
  std::optional<CorpusStats> stats;  // set once normalized (train-split stats)

  int num_classes() const { return static_cast<int>(class_names.size()); }
  std::vector<int> indices_of(Split s) const;
};

/// Per-sequence generator knobs. amplitude scales every joint deviation from
/// the rest pose (0 leaves the limbs exactly at rest).
struct MotionParams {
  double amplitude = 1.0;
  double frequency_scale = 1.0;
  double speed_scale = 1.0;
  double noise = 1.0;  // multiplied by amplitude as well
};

std::array<float, kNumJoints * 3> rest_pose();

/// One trajectory of `frames` frames for class `label` (deterministic in rng).
MotionSequence generate_sequence(int label, int k_classes, int frames, const MotionParams& params, Rng rng,
                                 const std::string& id, double fps = 20.0);

/// Full corpus: n_sequences round-robin over k_classes, frame counts uniform
/// in [64, 196] rounded down to a multiple of 4, one templated phrase each.
Corpus generate_corpus(uint64_t seed, int n_sequences, int k_classes);

/// Stratified, seeded split. Ratios must sum to 1 (+-1e-9); a split with a
/// positive ratio that would receive zero items of some class is an error.
void split_corpus(Corpus& corpus, double train_ratio, double val_ratio, double test_ratio, uint64_t seed);

/// Per-feature z-score with statistics from the train split only; applied to
/// every item in place. Constant features are floored at std 1e-8 (warning).
CorpusStats normalize_corpus(Corpus& corpus);

void denormalize_sequence(MotionSequence& seq, const CorpusStats& stats);
void normalize_sequence(MotionSequence& seq, const CorpusStats& stats);

CorpusStats compute_stats(const Corpus& corpus, Split split);

/// Directory layout: manifest.json + stats.json + one raw little-endian
/// float32 file per sequence (frames x features). Data on disk is raw
/// (un-normalized); stats.json carries the train-split statistics.
void save_corpus(const Corpus& corpus, const std::string& dir);
Corpus load_corpus(const std::string& dir);

/// Mean |frame-to-frame delta| over all features and items of a split; the
/// corpus-level velocity baseline used by the editing continuity check.
double mean_frame_velocity(const Corpus& corpus, Split split);

}  // namespace msm
