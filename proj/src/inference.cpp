#include "msm/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

namespace msm {

Tensor cfg_mix(const Tensor& logits_cond, const Tensor& logits_null, double w) {
  require(logits_cond.shape() == logits_null.shape(), "cfg_mix: shape mismatch");
  auto out = Tensor::zeros(logits_cond.shape());
  const float fw = static_cast<float>(w);
  for (int64_t i = 0; i < out.numel(); ++i)
    out.data()[i] = logits_null.data()[i] + fw * (logits_cond.data()[i] - logits_null.data()[i]);
  return out;
}

namespace {

int32_t argmax_row(const float* row, int v) {
  int best = 0;
  for (int j = 1; j < v; ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

int32_t sample_row(const float* row, int v, const SamplerConfig& cfg, Rng& rng) {
  if (cfg.greedy || cfg.temperature <= 0.0) return argmax_row(row, v);
  const int k = cfg.top_k == 0 ? v : std::min(cfg.top_k, v);
  // candidate set = indices of the k largest logits (ties keep smaller index)
  std::vector<int> idx(static_cast<size_t>(v));
  for (int j = 0; j < v; ++j) idx[static_cast<size_t>(j)] = j;
  if (k < v)
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [row](int a, int b) {
      if (row[a] != row[b]) return row[a] > row[b];
      return a < b;
    });
  double mx = -std::numeric_limits<double>::infinity();
  for (int j = 0; j < k; ++j) mx = std::max(mx, static_cast<double>(row[idx[static_cast<size_t>(j)]]));
  std::vector<double> p(static_cast<size_t>(k));
  double sum = 0.0;
  for (int j = 0; j < k; ++j) {
    p[static_cast<size_t>(j)] = std::exp((row[idx[static_cast<size_t>(j)]] - mx) / cfg.temperature);
    sum += p[static_cast<size_t>(j)];
  }
  const double u = rng.uniform() * sum;
  double acc = 0.0;
  for (int j = 0; j < k; ++j) {
    acc += p[static_cast<size_t>(j)];
    if (u < acc) return idx[static_cast<size_t>(j)];
  }
  return idx[static_cast<size_t>(k - 1)];
}

}  // namespace

std::vector<int32_t> sample_tokens(const Tensor& logits, const SamplerConfig& cfg, Rng& rng) {
  require(cfg.top_k >= 0, "sample_tokens: top_k < 1 (0 selects the full distribution)");
  require(cfg.greedy || cfg.temperature > 0.0, "sample_tokens: temperature must be > 0 unless greedy");
  const int v = logits.dim(logits.ndim() - 1);
  const int64_t rows = logits.numel() / v;
  std::vector<int32_t> out(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) out[static_cast<size_t>(r)] = sample_row(logits.data() + r * v, v, cfg, rng);
  return out;
}

// ---------------------------------------------------------------------------
// edit mask
// ---------------------------------------------------------------------------

bool EditMask::all_keep() const {
  for (bool g : generate)
    if (g) return false;
  return true;
}

bool EditMask::all_generate() const {
  for (bool g : generate)
    if (!g) return false;
  return true;
}

EditMask EditMask::full(int t, bool gen) {
  EditMask m;
  m.generate.assign(static_cast<size_t>(t), gen);
  return m;
}

EditMask EditMask::parse_spec(const std::string& spec, int t) {
  const auto colon = spec.find(':');
  require(colon != std::string::npos, "mask spec: expected kind:value, got '" + spec + "'");
  const std::string kind = spec.substr(0, colon);
  const std::string val = spec.substr(colon + 1);
  EditMask m = full(t, false);
  if (kind == "prefix") {
    // generate the leading fraction
    const double frac = std::stod(val);
    require(frac >= 0.0 && frac <= 1.0, "mask spec: fraction out of [0,1]");
    const int n = static_cast<int>(std::lround(frac * t));
    for (int i = 0; i < n; ++i) m.generate[static_cast<size_t>(i)] = true;
  } else if (kind == "suffix") {
    const double frac = std::stod(val);
    require(frac >= 0.0 && frac <= 1.0, "mask spec: fraction out of [0,1]");
    const int n = static_cast<int>(std::lround(frac * t));
    for (int i = t - n; i < t; ++i) m.generate[static_cast<size_t>(i)] = true;
  } else if (kind == "range") {
    const auto comma = val.find(',');
    require(comma != std::string::npos, "mask spec: range needs a,b");
    const int a = std::stoi(val.substr(0, comma));
    const int b = std::stoi(val.substr(comma + 1));
    require(0 <= a && a <= b && b <= t, "mask spec: range [" + std::to_string(a) + "," + std::to_string(b) +
                                            ") out of bounds for T=" + std::to_string(t));
    for (int i = a; i < b; ++i) m.generate[static_cast<size_t>(i)] = true;
  } else if (kind == "file") {
    std::ifstream f(val);
    require(f.good(), "mask spec: cannot read " + val);
    m.generate.clear();
    std::string tok;
    while (f >> tok) m.generate.push_back(tok != "0");
    require(static_cast<int>(m.generate.size()) == t,
            "mask spec: file holds " + std::to_string(m.generate.size()) + " entries, expected " +
                std::to_string(t));
  } else {
    fail("mask spec: unknown kind '" + kind + "' (prefix|suffix|range|file)");
  }
  return m;
}

std::vector<bool> EditMask::at_scale(int s) const {
  const int t = size();
  auto vals = Tensor::zeros({1, t, 1});
  for (int i = 0; i < t; ++i) vals.at(0, i, 0) = generate[static_cast<size_t>(i)] ? 1.0f : 0.0f;
  NoGradGuard ng;
  auto r = resize_linear(vals, s);
  std::vector<bool> out(static_cast<size_t>(s));
  for (int i = 0; i < s; ++i) out[static_cast<size_t>(i)] = r.at(0, i, 0) >= 0.5f;  // ties generate
  return out;
}

// ---------------------------------------------------------------------------
// generator
// ---------------------------------------------------------------------------

Generator::Generator(const SarModel& sar, const VaeModel& vae) : sar_(sar), vae_(vae) {
  require(sar.schedule().scales == vae.bank().schedule.scales,
          "generator: SAR and VAE schedules do not match");
}

std::vector<MultiScaleTokenSet> Generator::generate_tokens(const std::vector<std::vector<int>>& phrases,
                                                           const GenerateOptions& opt,
                                                           GenerationTrace* trace,
                                                           const EditPlan* edit) const {
  NoGradGuard ng;
  opt.cfg.validate();
  const int b = static_cast<int>(phrases.size());
  require(b > 0, "generate: empty batch");
  const auto& schedule = sar_.schedule();
  const int q = schedule.num_layers();
  const int last = opt.stop_after_scale > 0 ? std::min(opt.stop_after_scale, q) : q;
  const bool guided = !opt.uncond;
  if (edit) {
    require(static_cast<int>(edit->reference.size()) == b, "edit: reference batch mismatch");
    require(edit->mask.size() == schedule.latent_len(), "edit: mask length must equal the latent length");
  }

  // condition context: guided runs stack [cond | null] into one batch of 2B
  CondBatch cond;
  for (const auto& p : phrases) cond.phrases.push_back(opt.uncond ? std::vector<int>{} : p);
  if (guided)
    for (int bi = 0; bi < b; ++bi) cond.phrases.emplace_back();  // null halves
  auto ctx = sar_.make_cond_context(cond);

  const int fb = guided ? 2 * b : b;  // forward batch
  KvCache cache;
  cache.reset(sar_.config().layers);

  std::vector<Rng> streams;
  for (int bi = 0; bi < b; ++bi) streams.push_back(Rng(opt.seed).split(1000 + static_cast<uint64_t>(bi)));

  std::vector<MultiScaleTokenSet> out(static_cast<size_t>(b));
  std::vector<std::vector<int32_t>> prev(static_cast<size_t>(fb));

  int expected_len = 0;
  for (int si = 0; si < last; ++si) {
    const auto t0 = std::chrono::steady_clock::now();
    const int s = schedule.scales[static_cast<size_t>(si)];

    Tensor block = sar_.embed_step_input(si, prev, ctx, vae_.bank());
    Tensor logits = sar_.forward_step(block, si, cache, ctx);  // (fb, s, V)
    if (trace) ++trace->forward_passes;

    Tensor mixed;
    if (guided) {
      const double w = opt.cfg.weight(si + 1, q);
      auto lcond = slice_dim1_units(logits, 0, b);
      auto lnull = slice_dim1_units(logits, b, fb);
      mixed = cfg_mix(lcond, lnull, w);
    } else {
      mixed = logits;
    }

    const int v = mixed.dim(2);
    std::vector<bool> scale_keep;
    if (edit) {
      auto gen_mask = edit->mask.at_scale(s);
      scale_keep.resize(static_cast<size_t>(s));
      for (int m = 0; m < s; ++m) scale_keep[static_cast<size_t>(m)] = !gen_mask[static_cast<size_t>(m)];
    }

    for (int bi = 0; bi < b; ++bi) {
      std::vector<int32_t> ids(static_cast<size_t>(s));
      for (int m = 0; m < s; ++m)
        ids[static_cast<size_t>(m)] =
            sample_row(mixed.data() + (static_cast<size_t>(bi) * s + m) * v, v, opt.sampler,
                       streams[static_cast<size_t>(bi)]);
      if (edit)
        for (int m = 0; m < s; ++m)
          if (scale_keep[static_cast<size_t>(m)])
            ids[static_cast<size_t>(m)] =
                edit->reference[static_cast<size_t>(bi)].layers[static_cast<size_t>(si)][static_cast<size_t>(m)];
      out[static_cast<size_t>(bi)].layers.push_back(ids);
      prev[static_cast<size_t>(bi)] = ids;
      if (guided) prev[static_cast<size_t>(b + bi)] = ids;
    }

    expected_len += s;
    require(cache.length == expected_len, "kv cache: length invariant violated");
    if (trace) {
      const auto t1 = std::chrono::steady_clock::now();
      trace->steps.push_back(
          {si + 1, std::chrono::duration<double, std::milli>(t1 - t0).count(), b * s});
      trace->cached_length = cache.length;
    }
  }
  return out;
}

// slice rows [b0, b1) of dim 0 for a (B, s, V) tensor
Tensor Generator::slice_dim1_units(const Tensor& x, int b0, int b1) {
  const int s = x.dim(1), v = x.dim(2);
  auto out = Tensor::zeros({b1 - b0, s, v});
  std::copy(x.data() + static_cast<size_t>(b0) * s * v, x.data() + static_cast<size_t>(b1) * s * v,
            out.data());
  return out;
}

Tensor Generator::logits_without_cache(const std::vector<MultiScaleTokenSet>& prefix_tokens, int scale_index,
                                       const std::vector<std::vector<int>>& phrases, bool uncond) const {
  NoGradGuard ng;
  const int b = static_cast<int>(prefix_tokens.size());
  const auto& schedule = sar_.schedule();

  CondBatch cond;
  for (const auto& p : phrases) cond.phrases.push_back(uncond ? std::vector<int>{} : p);
  auto ctx = sar_.make_cond_context(cond);

  // prefix sub-schedule: scales 0..scale_index
  std::vector<double> positions;
  std::vector<int> scale_of;
  const int sq = schedule.latent_len();
  for (int si = 0; si <= scale_index; ++si) {
    const int s = schedule.scales[static_cast<size_t>(si)];
    for (int m = 0; m < s; ++m) {
      positions.push_back(static_cast<double>(m) / s * sq);
      scale_of.push_back(si);
    }
  }
  const int l = static_cast<int>(positions.size());
  auto mask = Tensor::zeros({1, 1, l, l});
  const float ninf = -std::numeric_limits<float>::infinity();
  for (int i = 0; i < l; ++i)
    for (int j = 0; j < l; ++j)
      if (scale_of[static_cast<size_t>(j)] > scale_of[static_cast<size_t>(i)])
        mask.values()[static_cast<size_t>(i) * l + j] = ninf;

  // embed each scale block and concatenate
  std::vector<Tensor> segments;
  std::vector<std::vector<int32_t>> dummy_prev(static_cast<size_t>(b));
  segments.push_back(sar_.embed_step_input(0, dummy_prev, ctx, vae_.bank()));
  for (int si = 1; si <= scale_index; ++si) {
    std::vector<std::vector<int32_t>> prev(static_cast<size_t>(b));
    for (int bi = 0; bi < b; ++bi)
      prev[static_cast<size_t>(bi)] = prefix_tokens[static_cast<size_t>(bi)].layers[static_cast<size_t>(si - 1)];
    segments.push_back(sar_.embed_step_input(si, prev, ctx, vae_.bank()));
  }
  auto x = concat_dim1(segments);
  auto h = sar_.forward_prefix(x, positions, mask, ctx);
  const int s_last = schedule.scales[static_cast<size_t>(scale_index)];
  return linear(slice_dim1(h, l - s_last, l), sar_.head(scale_index));
}

MotionSequence Generator::decode_tokens(const MultiScaleTokenSet& tokens, const std::string& id) const {
  NoGradGuard ng;
  auto m = vae_.detokenize({tokens});
  MotionSequence seq;
  seq.id = id;
  seq.fps = vae_.fps();
  seq.frames = m.dim(1);
  seq.normalized = true;
  seq.data.assign(m.data(), m.data() + m.numel());
  denormalize_sequence(seq, vae_.stats());
  return seq;
}

Generator::Sample Generator::generate(const std::vector<int>& phrase, const GenerateOptions& opt,
                                      GenerationTrace* trace) const {
  auto tokens = generate_tokens({phrase}, opt, trace);
  Sample s;
  s.tokens = tokens[0];
  s.motion = decode_tokens(tokens[0]);
  return s;
}

Generator::Sample Generator::edit(const MotionSequence& reference, const EditMask& mask,
                                  const std::optional<std::vector<int>>& phrase, const GenerateOptions& opt,
                                  GenerationTrace* trace) const {
  NoGradGuard ng;
  require(mask.size() == sar_.schedule().latent_len(), "edit: mask length must equal the latent length");
  auto gt = vae_.tokenize(reference);

  Sample s;
  if (mask.all_keep()) {
    // nothing to generate: the VAE reconstruction of the reference
    s.tokens = gt;
    s.motion = decode_tokens(gt, reference.id + "-edit");
    return s;
  }

  EditPlan plan;
  plan.reference = {gt};
  plan.mask = mask;
  GenerateOptions eopt = opt;
  eopt.uncond = !phrase.has_value();
  auto tokens = generate_tokens({phrase.value_or(std::vector<int>{})}, eopt, trace, &plan);
  s.tokens = tokens[0];
  s.motion = decode_tokens(tokens[0], reference.id + "-edit");
  return s;
}

// ---------------------------------------------------------------------------
// writers
// ---------------------------------------------------------------------------

std::vector<std::string> feature_names() {
  std::vector<std::string> names = {"root_vx", "root_vy", "root_vz"};
  const char* joints[kNumJoints] = {"head", "torso", "l_hand", "r_hand", "l_knee", "r_knee", "l_foot", "r_foot"};
  for (const char* j : joints)
    for (const char* a : {"x", "y", "z"}) names.push_back(std::string(j) + "_" + a);
  return names;
}

std::string motion_to_json(const MotionSequence& m) {
  std::ostringstream os;
  os << "{\n  \"id\": \"" << m.id << "\",\n  \"fps\": " << m.fps << ",\n  \"frames\": " << m.frames
     << ",\n  \"feature_names\": [";
  auto names = feature_names();
  for (size_t i = 0; i < names.size(); ++i) os << (i ? "," : "") << "\"" << names[i] << "\"";
  os << "],\n  \"data\": [";
  for (int f = 0; f < m.frames; ++f) {
    os << (f ? "," : "") << "\n    [";
    for (int d = 0; d < m.features; ++d) os << (d ? "," : "") << m.at(f, d);
    os << "]";
  }
  os << "\n  ]\n}\n";
  return os.str();
}

std::string motion_to_csv(const MotionSequence& m) {
  std::ostringstream os;
  auto names = feature_names();
  os << "frame";
  for (const auto& n : names) os << "," << n;
  os << "\n";
  for (int f = 0; f < m.frames; ++f) {
    os << f;
    for (int d = 0; d < m.features; ++d) os << "," << m.at(f, d);
    os << "\n";
  }
  return os.str();
}

std::string trace_to_csv(const GenerationTrace& trace) {
  std::ostringstream os;
  os << "step,wall_ms,tokens\n";
  for (const auto& s : trace.steps) os << s.step << "," << s.wall_ms << "," << s.tokens << "\n";
  return os.str();
}

}  // namespace msm
