#include "msm/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

namespace msm {

namespace fs = std::filesystem;
using nlohmann::json;

void MotionSequence::validate() const {
  require(features == kFeatureDim || features > 0, "motion: feature dim must be positive");
  require(frames >= kMinFrames, "motion '" + id + "': frames " + std::to_string(frames) + " < " +
                                    std::to_string(kMinFrames));
  require(frames <= kMaxFrames, "motion '" + id + "': frames " + std::to_string(frames) + " > " +
                                    std::to_string(kMaxFrames));
  require(data.size() == static_cast<size_t>(frames) * features, "motion '" + id + "': data size mismatch");
  for (float v : data)
    require(std::isfinite(v), "motion '" + id + "': non-finite entry");
}

std::string split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

int Vocabulary::id_of(const std::string& word) const {
  for (size_t i = 0; i < words.size(); ++i)
    if (words[i] == word) return static_cast<int>(i);
  return -1;
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
  std::vector<int> out;
  std::istringstream iss(text);
  std::string w;
  while (iss >> w) {
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return std::tolower(c); });
    const int id = id_of(w);
    require(id >= 0, "condition word '" + w + "' is not in the corpus vocabulary");
    out.push_back(id);
  }
  require(!out.empty(), "condition phrase is empty");
  require(static_cast<int>(out.size()) <= kMaxPhraseLen, "condition phrase longer than " +
                                                             std::to_string(kMaxPhraseLen) + " words");
  return out;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && ids[i] < size(), "vocabulary: word id out of range");
    if (i) out += " ";
    out += words[static_cast<size_t>(ids[i])];
  }
  return out;
}

std::vector<int> Corpus::indices_of(Split s) const {
  std::vector<int> out;
  for (size_t i = 0; i < items.size(); ++i)
    if (items[i].split == s) out.push_back(static_cast<int>(i));
  return out;
}

// ---------------------------------------------------------------------------
// synthetic generator
// ---------------------------------------------------------------------------

namespace {

constexpr int kBaseClasses = 8;
const char* kClassNames[kBaseClasses] = {"walk", "run", "jump", "wave", "squat", "spin", "sit", "kick"};

struct Template {
  const char* verbs[3];
  const char* dir;
  const char* advs[3];
};

const Template kTemplates[kBaseClasses] = {
    {{"walks", "strolls", "marches"}, "forward", {"slowly", "steadily", "briskly"}},
    {{"runs", "jogs", "sprints"}, "forward", {"quickly", "rapidly", "hard"}},
    {{"jumps", "hops", "leaps"}, "upward", {"high", "repeatedly", "lightly"}},
    {{"waves", "greets", "signals"}, "overhead", {"warmly", "gently", "energetically"}},
    {{"squats", "crouches", "dips"}, "down", {"slowly", "steadily", "deeply"}},
    {{"spins", "twirls", "rotates"}, "around", {"smoothly", "quickly", "gracefully"}},
    {{"sits", "settles", "rests"}, "down", {"calmly", "gently", "slowly"}},
    {{"kicks", "strikes", "punts"}, "outward", {"sharply", "firmly", "vigorously"}},
};

const char* kStyleWords[8] = {"loosely", "stiffly", "softly", "heavily", "widely", "narrowly",
                              "evenly", "wildly"};

Vocabulary build_vocabulary(int k_classes) {
  Vocabulary v;
  auto add = [&v](const std::string& w) {
    if (v.id_of(w) < 0) v.words.push_back(w);
  };
  add("a");
  add("person");
  for (const auto& t : kTemplates) {
    for (const char* verb : t.verbs) add(verb);
    add(t.dir);
    for (const char* adv : t.advs) add(adv);
  }
  if (k_classes > kBaseClasses)
    for (const char* s : kStyleWords) add(s);
  require(v.size() <= kMaxVocab, "vocabulary exceeds the design bound");
  return v;
}

std::string class_name(int label) {
  const int base = label % kBaseClasses;
  if (label < kBaseClasses) return kClassNames[base];
  return std::string(kClassNames[base]) + "-v" + std::to_string(label / kBaseClasses);
}

// Joint order: head, torso, l_hand, r_hand, l_knee, r_knee, l_foot, r_foot.
constexpr float kRest[kNumJoints * 3] = {
    0.00f, 1.60f, 0.00f,   // head
    0.00f, 1.20f, 0.00f,   // torso
    -0.45f, 1.00f, 0.00f,  // l_hand
    0.45f, 1.00f, 0.00f,   // r_hand
    -0.12f, 0.50f, 0.00f,  // l_knee
    0.12f, 0.50f, 0.00f,   // r_knee
    -0.15f, 0.05f, 0.00f,  // l_foot
    0.15f, 0.05f, 0.00f,   // r_foot
};

enum Joint { kHead = 0, kTorso, kLHand, kRHand, kLKnee, kRKnee, kLFoot, kRFoot };

inline double smoothstep(double x) {
  x = std::clamp(x, 0.0, 1.0);
  return x * x * (3.0 - 2.0 * x);
}

}  // namespace

std::array<float, kNumJoints * 3> rest_pose() {
  std::array<float, kNumJoints * 3> out{};
  std::copy(std::begin(kRest), std::end(kRest), out.begin());
  return out;
}

MotionSequence generate_sequence(int label, int k_classes, int frames, const MotionParams& params, Rng rng,
                                 const std::string& id, double fps) {
  require(label >= 0 && label < k_classes, "generate_sequence: label out of range");
  MotionSequence seq;
  seq.id = id;
  seq.frames = frames;
  seq.fps = fps;
  seq.data.assign(static_cast<size_t>(frames) * kFeatureDim, 0.0f);

  const int base = label % kBaseClasses;
  // Variant classes beyond the 8 base patterns shift frequency and amplitude.
  const int variant = label / kBaseClasses;
  const double vfreq = 1.0 + 0.21 * variant;
  const double vamp = 1.0 + 0.12 * variant;

  const double A = params.amplitude * vamp;
  const double phase = rng.uniform(0.0, 6.283185307179586);
  const double fjit = rng.uniform(0.92, 1.08) * params.frequency_scale * vfreq;
  const double sjit = rng.uniform(0.88, 1.12) * params.speed_scale;
  const double noise_sd = 0.008 * params.noise * A;

  auto set_joint = [&seq](int f, int joint, int axis, double v) {
    seq.at(f, 3 + joint * 3 + axis) = static_cast<float>(v);
  };
  auto add_joint = [&seq](int f, int joint, int axis, double v) {
    seq.at(f, 3 + joint * 3 + axis) += static_cast<float>(v);
  };
  auto set_root = [&seq](int f, int axis, double v) { seq.at(f, axis) = static_cast<float>(v); };

  for (int f = 0; f < frames; ++f) {
    const double t = f / fps;
    for (int j = 0; j < kNumJoints; ++j)
      for (int a = 0; a < 3; ++a) set_joint(f, j, a, kRest[j * 3 + a]);

    switch (base) {
      case 0: {  // walk: steady root advance, anti-phase limb swing
        const double w = 6.283185307179586 * 1.4 * fjit;
        set_root(f, 0, 1.0 * sjit);
        add_joint(f, kLHand, 2, 0.25 * A * std::sin(w * t + phase));
        add_joint(f, kRHand, 2, -0.25 * A * std::sin(w * t + phase));
        add_joint(f, kLFoot, 2, 0.30 * A * std::sin(w * t + phase + 3.14159265));
        add_joint(f, kRFoot, 2, -0.30 * A * std::sin(w * t + phase + 3.14159265));
        add_joint(f, kLKnee, 2, 0.15 * A * std::sin(w * t + phase + 3.14159265));
        add_joint(f, kRKnee, 2, -0.15 * A * std::sin(w * t + phase + 3.14159265));
        add_joint(f, kHead, 1, 0.02 * A * std::sin(2.0 * w * t + phase));
        break;
      }
      case 1: {  // run: faster, larger, with vertical bounce
        const double w = 6.283185307179586 * 2.4 * fjit;
        set_root(f, 0, 2.4 * sjit);
        set_root(f, 1, 0.12 * A * std::sin(2.0 * w * t + phase));
        add_joint(f, kLHand, 2, 0.40 * A * std::sin(w * t + phase));
        add_joint(f, kRHand, 2, -0.40 * A * std::sin(w * t + phase));
        add_joint(f, kLFoot, 2, 0.48 * A * std::sin(w * t + phase + 3.14159265));
        add_joint(f, kRFoot, 2, -0.48 * A * std::sin(w * t + phase + 3.14159265));
        add_joint(f, kLFoot, 1, 0.10 * A * std::max(0.0, std::sin(w * t + phase + 3.14159265)));
        add_joint(f, kRFoot, 1, 0.10 * A * std::max(0.0, -std::sin(w * t + phase + 3.14159265)));
        break;
      }
      case 2: {  // jump: vertical root bursts, knee compression, arm raise
        const double w = 6.283185307179586 * 0.9 * fjit;
        const double c = std::sin(w * t + phase);
        set_root(f, 0, 0.1 * sjit);
        set_root(f, 1, 0.9 * A * c);
        add_joint(f, kLKnee, 1, -0.18 * A * (1.0 + std::cos(w * t + phase)) * 0.5);
        add_joint(f, kRKnee, 1, -0.18 * A * (1.0 + std::cos(w * t + phase)) * 0.5);
        add_joint(f, kLHand, 1, 0.30 * A * (1.0 - std::cos(w * t + phase)) * 0.5);
        add_joint(f, kRHand, 1, 0.30 * A * (1.0 - std::cos(w * t + phase)) * 0.5);
        break;
      }
      case 3: {  // wave: right hand raised and oscillating, root still
        const double w = 6.283185307179586 * 2.2 * fjit;
        set_root(f, 0, 0.05 * sjit);
        add_joint(f, kRHand, 1, 0.55 * A);
        add_joint(f, kRHand, 0, 0.12 * A * std::cos(w * t + phase));
        add_joint(f, kRHand, 2, 0.06 * A * std::sin(w * t + phase));
        add_joint(f, kHead, 0, 0.02 * A * std::cos(w * t + phase));
        break;
      }
      case 4: {  // squat: periodic vertical dip of head/torso/knees
        const double w = 6.283185307179586 * 0.8 * fjit;
        const double dip = (1.0 - std::cos(w * t + phase)) * 0.5;
        add_joint(f, kHead, 1, -0.28 * A * dip);
        add_joint(f, kTorso, 1, -0.22 * A * dip);
        add_joint(f, kLKnee, 0, -0.08 * A * dip);
        add_joint(f, kRKnee, 0, 0.08 * A * dip);
        add_joint(f, kLHand, 2, 0.18 * A * dip);
        add_joint(f, kRHand, 2, 0.18 * A * dip);
        break;
      }
      case 5: {  // spin: root velocity direction rotates, arms extended
        const double ws = 6.283185307179586 * 0.5 * fjit;
        const double w = 6.283185307179586 * 1.6 * fjit;
        set_root(f, 0, 0.8 * sjit * std::cos(ws * t + phase));
        set_root(f, 2, 0.8 * sjit * std::sin(ws * t + phase));
        add_joint(f, kLHand, 0, -0.18 * A - 0.06 * A * std::sin(w * t + phase));
        add_joint(f, kRHand, 0, 0.18 * A + 0.06 * A * std::sin(w * t + phase));
        add_joint(f, kLHand, 2, 0.10 * A * std::cos(w * t + phase));
        add_joint(f, kRHand, 2, -0.10 * A * std::cos(w * t + phase));
        break;
      }
      case 6: {  // sit: one smooth transition into a held pose
        const double s = smoothstep((t - 0.8) / 1.2);
        set_root(f, 0, 0.3 * sjit * (1.0 - s));
        add_joint(f, kHead, 1, -0.45 * A * s);
        add_joint(f, kTorso, 1, -0.35 * A * s);
        add_joint(f, kLKnee, 2, 0.25 * A * s);
        add_joint(f, kRKnee, 2, 0.25 * A * s);
        add_joint(f, kLKnee, 1, 0.05 * A * s);
        add_joint(f, kRKnee, 1, 0.05 * A * s);
        break;
      }
      default: {  // kick: periodic right-foot strikes with torso counter-lean
        const double w = 6.283185307179586 * 1.1 * fjit;
        const double pulse = std::pow(std::max(0.0, std::sin(w * t + phase)), 2.0);
        set_root(f, 0, 0.05 * sjit);
        add_joint(f, kRFoot, 2, 0.55 * A * pulse);
        add_joint(f, kRFoot, 1, 0.22 * A * pulse);
        add_joint(f, kRKnee, 2, 0.28 * A * pulse);
        add_joint(f, kTorso, 2, -0.08 * A * pulse);
        add_joint(f, kLHand, 2, 0.10 * A * pulse);
        break;
      }
    }

    if (noise_sd > 0.0)
      for (int j = 0; j < kNumJoints; ++j)
        for (int a = 0; a < 3; ++a) add_joint(f, j, a, rng.normal() * noise_sd);
  }
  return seq;
}

Corpus generate_corpus(uint64_t seed, int n_sequences, int k_classes) {
  require(k_classes >= 1, "generate_corpus: k_classes must be >= 1");
  require(k_classes <= kMaxClasses,
          "generate_corpus: k_classes " + std::to_string(k_classes) + " exceeds the vocabulary design bound " +
              std::to_string(kMaxClasses));
  require(n_sequences >= k_classes, "generate_corpus: n_sequences must be >= k_classes");

  Corpus corpus;
  corpus.vocabulary = build_vocabulary(k_classes);
  for (int k = 0; k < k_classes; ++k) corpus.class_names.push_back(class_name(k));

  Rng root(seed);
  for (int i = 0; i < n_sequences; ++i) {
    Rng rng = root.split(static_cast<uint64_t>(i));
    const int label = i % k_classes;
    // frame count uniform in [64, 196], multiple of 4 so T = F/4 is exact
    const int frames = 64 + 4 * static_cast<int>(rng.uniform_int((196 - 64) / 4 + 1));

    MotionParams params;
    params.amplitude = rng.uniform(0.85, 1.15);
    params.frequency_scale = 1.0;
    params.speed_scale = 1.0;

    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "seq-%06d", i);
    CorpusItem item;
    item.motion = generate_sequence(label, k_classes, frames, params, rng.split(1), idbuf, corpus.fps);

    const int base = label % kBaseClasses;
    const auto& tpl = kTemplates[base];
    const char* verb = tpl.verbs[rng.uniform_int(3)];
    const char* adv = tpl.advs[rng.uniform_int(3)];
    std::string text = std::string("a person ") + verb + " " + tpl.dir + " " + adv;
    if (label >= kBaseClasses) text += std::string(" ") + kStyleWords[(label / kBaseClasses - 1) % 8];
    item.condition.label_id = label;
    item.condition.phrase_text = text;
    item.condition.phrase = corpus.vocabulary.encode(text);
    corpus.items.push_back(std::move(item));
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// split / normalize
// ---------------------------------------------------------------------------

void split_corpus(Corpus& corpus, double train_ratio, double val_ratio, double test_ratio, uint64_t seed) {
  const double total = train_ratio + val_ratio + test_ratio;
  require(std::abs(total - 1.0) <= 1e-9, "split: ratios sum to " + std::to_string(total) + ", expected 1");
  require(train_ratio >= 0 && val_ratio >= 0 && test_ratio >= 0, "split: ratios must be non-negative");

  const int k = corpus.num_classes();
  std::vector<std::vector<int>> by_class(static_cast<size_t>(std::max(k, 1)));
  for (size_t i = 0; i < corpus.items.size(); ++i)
    by_class[static_cast<size_t>(corpus.items[i].condition.label_id)].push_back(static_cast<int>(i));

  Rng rng(seed);
  const double ratios[3] = {train_ratio, val_ratio, test_ratio};
  for (auto& members : by_class) {
    if (members.empty()) continue;
    // seeded Fisher-Yates within the class
    for (size_t i = members.size(); i > 1; --i)
      std::swap(members[i - 1], members[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(i)))]);

    // largest-remainder apportionment keeps each split within 1 of exact
    const int n = static_cast<int>(members.size());
    int counts[3];
    double rema[3];
    int assigned = 0;
    for (int s = 0; s < 3; ++s) {
      const double exact = ratios[s] * n;
      counts[s] = static_cast<int>(std::floor(exact));
      rema[s] = exact - counts[s];
      assigned += counts[s];
    }
    while (assigned < n) {
      int best = 0;
      for (int s = 1; s < 3; ++s)
        if (rema[s] > rema[best]) best = s;
      ++counts[best];
      rema[best] = -1;
      ++assigned;
    }
    for (int s = 0; s < 3; ++s)
      require(!(ratios[s] > 0.0 && counts[s] == 0),
              "split: the " + split_name(static_cast<Split>(s)) + " split would receive zero items of class '" +
                  corpus.class_names[static_cast<size_t>(corpus.items[static_cast<size_t>(members[0])]
                                                             .condition.label_id)] +
                  "'");
    int pos = 0;
    for (int s = 0; s < 3; ++s)
      for (int c = 0; c < counts[s]; ++c)
        corpus.items[static_cast<size_t>(members[static_cast<size_t>(pos++)])].split = static_cast<Split>(s);
  }
}

CorpusStats compute_stats(const Corpus& corpus, Split split) {
  const int d = kFeatureDim;
  std::vector<double> sum(static_cast<size_t>(d), 0.0), sumsq(static_cast<size_t>(d), 0.0);
  int64_t frames = 0;
  for (const auto& item : corpus.items) {
    if (item.split != split) continue;
    for (int f = 0; f < item.motion.frames; ++f)
      for (int j = 0; j < d; ++j) {
        const double v = item.motion.at(f, j);
        sum[static_cast<size_t>(j)] += v;
        sumsq[static_cast<size_t>(j)] += v * v;
      }
    frames += item.motion.frames;
  }
  require(frames > 0, "normalize: corpus has no items in the " + split_name(split) + " split");
  CorpusStats stats;
  stats.mean.resize(static_cast<size_t>(d));
  stats.std.resize(static_cast<size_t>(d));
  bool floored = false;
  for (int j = 0; j < d; ++j) {
    const double m = sum[static_cast<size_t>(j)] / static_cast<double>(frames);
    double var = sumsq[static_cast<size_t>(j)] / static_cast<double>(frames) - m * m;
    if (var < 0) var = 0;
    double sd = std::sqrt(var);
    if (sd < 1e-8) {
      sd = 1e-8;
      floored = true;
    }
    stats.mean[static_cast<size_t>(j)] = static_cast<float>(m);
    stats.std[static_cast<size_t>(j)] = static_cast<float>(sd);
  }
  if (floored)
    std::cerr << "[corpus] warning: constant feature detected, std floored at 1e-8\n";
  return stats;
}

void normalize_sequence(MotionSequence& seq, const CorpusStats& stats) {
  require(!seq.normalized, "normalize: sequence '" + seq.id + "' is already normalized");
  for (int f = 0; f < seq.frames; ++f)
    for (int j = 0; j < seq.features; ++j)
      seq.at(f, j) = (seq.at(f, j) - stats.mean[static_cast<size_t>(j)]) / stats.std[static_cast<size_t>(j)];
  seq.normalized = true;
}

void denormalize_sequence(MotionSequence& seq, const CorpusStats& stats) {
  require(seq.normalized, "denormalize: sequence '" + seq.id + "' is not normalized");
  for (int f = 0; f < seq.frames; ++f)
    for (int j = 0; j < seq.features; ++j)
      seq.at(f, j) = seq.at(f, j) * stats.std[static_cast<size_t>(j)] + stats.mean[static_cast<size_t>(j)];
  seq.normalized = false;
}

CorpusStats normalize_corpus(Corpus& corpus) {
  require(!corpus.items.empty(), "normalize: corpus is empty");
  CorpusStats stats = compute_stats(corpus, Split::kTrain);
  for (auto& item : corpus.items) normalize_sequence(item.motion, stats);
  corpus.stats = stats;
  return stats;
}

// ---------------------------------------------------------------------------
// disk format
// ---------------------------------------------------------------------------

void save_corpus(const Corpus& corpus, const std::string& dir) {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "msm-corpus-v1";
  manifest["fps"] = corpus.fps;
  manifest["feature_dim"] = kFeatureDim;
  manifest["classes"] = corpus.class_names;
  manifest["vocabulary"] = corpus.vocabulary.words;
  json seqs = json::array();
  for (const auto& item : corpus.items) {
    require(!item.motion.normalized, "save_corpus: data on disk must be raw (un-normalized)");
    json s;
    s["id"] = item.motion.id;
    s["file"] = item.motion.id + ".f32";
    s["frames"] = item.motion.frames;
    s["fps"] = item.motion.fps;
    s["label"] = item.condition.label_id;
    s["phrase"] = item.condition.phrase;
    s["phrase_text"] = item.condition.phrase_text;
    s["split"] = split_name(item.split);
    seqs.push_back(std::move(s));
    std::ofstream f(fs::path(dir) / (item.motion.id + ".f32"), std::ios::binary | std::ios::trunc);
    require(f.good(), "save_corpus: cannot write " + item.motion.id + ".f32");
    f.write(reinterpret_cast<const char*>(item.motion.data.data()),
            static_cast<std::streamsize>(item.motion.data.size() * sizeof(float)));
  }
  manifest["sequences"] = std::move(seqs);
  std::ofstream mf(fs::path(dir) / "manifest.json", std::ios::trunc);
  mf << manifest.dump(2) << "\n";

  if (corpus.stats) {
    json st;
    st["mean"] = corpus.stats->mean;
    st["std"] = corpus.stats->std;
    std::ofstream sf(fs::path(dir) / "stats.json", std::ios::trunc);
    sf << st.dump(2) << "\n";
  }
}

Corpus load_corpus(const std::string& dir) {
  const fs::path mpath = fs::path(dir) / "manifest.json";
  require(fs::exists(mpath), "load_corpus: no manifest.json under " + dir);
  std::ifstream mf(mpath);
  json manifest = json::parse(mf);
  require(manifest.value("format", "") == "msm-corpus-v1", "load_corpus: unsupported corpus format");

  Corpus corpus;
  corpus.fps = manifest.value("fps", 20.0);
  corpus.class_names = manifest.at("classes").get<std::vector<std::string>>();
  corpus.vocabulary.words = manifest.at("vocabulary").get<std::vector<std::string>>();
  const int d = manifest.value("feature_dim", kFeatureDim);
  require(d == kFeatureDim, "load_corpus: feature dim " + std::to_string(d) + " unsupported (expected " +
                                std::to_string(kFeatureDim) + ")");

  for (const auto& s : manifest.at("sequences")) {
    CorpusItem item;
    item.motion.id = s.at("id").get<std::string>();
    item.motion.frames = s.at("frames").get<int>();
    item.motion.fps = s.value("fps", corpus.fps);
    item.condition.label_id = s.at("label").get<int>();
    item.condition.phrase = s.at("phrase").get<std::vector<int>>();
    item.condition.phrase_text = s.value("phrase_text", "");
    const std::string sp = s.value("split", "train");
    item.split = sp == "val" ? Split::kVal : (sp == "test" ? Split::kTest : Split::kTrain);
    for (int w : item.condition.phrase)
      require(w >= 0 && w < corpus.vocabulary.size(), "load_corpus: phrase word id out of range");
    require(!item.condition.phrase.empty(), "load_corpus: empty phrase for " + item.motion.id);

    std::ifstream f(fs::path(dir) / s.at("file").get<std::string>(), std::ios::binary);
    require(f.good(), "load_corpus: missing data file for " + item.motion.id);
    item.motion.data.resize(static_cast<size_t>(item.motion.frames) * kFeatureDim);
    f.read(reinterpret_cast<char*>(item.motion.data.data()),
           static_cast<std::streamsize>(item.motion.data.size() * sizeof(float)));
    require(f.gcount() == static_cast<std::streamsize>(item.motion.data.size() * sizeof(float)),
            "load_corpus: short read for " + item.motion.id);
    item.motion.validate();
    corpus.items.push_back(std::move(item));
  }

  const fs::path spath = fs::path(dir) / "stats.json";
  if (fs::exists(spath)) {
    std::ifstream sf(spath);
    json st = json::parse(sf);
    CorpusStats stats;
    stats.mean = st.at("mean").get<std::vector<float>>();
    stats.std = st.at("std").get<std::vector<float>>();
    require(stats.mean.size() == kFeatureDim && stats.std.size() == kFeatureDim,
            "load_corpus: stats.json dimension mismatch");
    corpus.stats = stats;
  }
  return corpus;
}

double mean_frame_velocity(const Corpus& corpus, Split split) {
  double total = 0.0;
  int64_t count = 0;
  for (const auto& item : corpus.items) {
    if (item.split != split) continue;
    for (int f = 0; f + 1 < item.motion.frames; ++f)
      for (int j = 0; j < item.motion.features; ++j) {
        total += std::abs(item.motion.at(f + 1, j) - item.motion.at(f, j));
        ++count;
      }
  }
  require(count > 0, "mean_frame_velocity: no items in split");
  return total / static_cast<double>(count);
}

}  // namespace msm
