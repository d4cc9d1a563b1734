#include "msm/sar.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <nlohmann/json.hpp>

#include "msm/checkpoint.hpp"

namespace msm {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// positions and mask
// ---------------------------------------------------------------------------

ScalePositionMap scale_rope_positions(const ScaleSchedule& schedule) {
  schedule.validate();
  ScalePositionMap map;
  const int sq = schedule.latent_len();
  for (int q = 0; q < schedule.num_layers(); ++q) {
    const int s = schedule.scales[static_cast<size_t>(q)];
    for (int m = 0; m < s; ++m) {
      map.scale_of.push_back(q);
      map.index_in_scale.push_back(m);
      map.rotary.push_back(static_cast<double>(m) / s * sq);
    }
  }
  map.total = static_cast<int>(map.rotary.size());
  return map;
}

Tensor scale_causal_mask(const ScaleSchedule& schedule) {
  const auto map = scale_rope_positions(schedule);
  const int l = map.total;
  auto mask = Tensor::zeros({1, 1, l, l});
  const float ninf = -std::numeric_limits<float>::infinity();
  for (int i = 0; i < l; ++i)
    for (int j = 0; j < l; ++j)
      if (map.scale_of[static_cast<size_t>(j)] > map.scale_of[static_cast<size_t>(i)])
        mask.values()[static_cast<size_t>(i) * l + j] = ninf;
  return mask;
}

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

SarModel SarModel::create(Rng& rng, const SarConfig& cfg, const ScaleSchedule& schedule, int vocab,
                          int latent_dim, const std::vector<int>& codebook_sizes) {
  cfg.validate();
  schedule.validate();
  require(static_cast<int>(codebook_sizes.size()) == schedule.num_layers(),
          "sar: one output head per quantizer layer required");
  SarModel m;
  m.cfg_ = cfg;
  m.schedule_ = schedule;
  m.posmap_ = scale_rope_positions(schedule);
  m.mask_ = scale_causal_mask(schedule);
  m.vocab_ = vocab;
  m.latent_dim_ = latent_dim;
  m.head_sizes_ = codebook_sizes;

  const int d = cfg.dim;
  auto lin = [&rng](int din, int dout) {
    const float sd = static_cast<float>(std::sqrt(1.0 / din));
    return Tensor::randn(rng, {din, dout}, sd).set_requires_grad(true);
  };
  auto norm_gain = [d]() { return Tensor::full({d}, 1.0f).set_requires_grad(true); };

  m.word_table_ = Tensor::randn(rng, {vocab + 1, d}, 0.02f).set_requires_grad(true);
  m.sos_ = Tensor::randn(rng, {1, d}, 0.02f).set_requires_grad(true);
  m.input_proj_ = lin(latent_dim, d);
  for (int i = 0; i < cfg.layers; ++i) {
    Block blk;
    blk.attn_norm = norm_gain();
    blk.wq = lin(d, d);
    blk.wk = lin(d, d);
    blk.wv = lin(d, d);
    blk.wo = lin(d, d);
    blk.cross_norm = norm_gain();
    blk.cq = lin(d, d);
    blk.ck = lin(d, d);
    blk.cv = lin(d, d);
    blk.co = lin(d, d);
    blk.ffn_norm = norm_gain();
    blk.w1 = lin(d, cfg.ff_hidden);
    blk.w3 = lin(d, cfg.ff_hidden);
    blk.w2 = lin(cfg.ff_hidden, d);
    m.blocks_.push_back(std::move(blk));
  }
  m.final_norm_ = norm_gain();
  for (int v : codebook_sizes) m.heads_.push_back(lin(d, v));
  return m;
}

Tensor SarModel::pack_heads(const Tensor& t) const {
  const int b = t.dim(0), l = t.dim(1);
  return swap_dims12(reshape(t, {b, l, cfg_.heads, cfg_.dim / cfg_.heads}));
}

Tensor SarModel::unpack_heads(const Tensor& t) const {
  const int b = t.dim(0), l = t.dim(2);
  return reshape(swap_dims12(t), {b, l, cfg_.dim});
}

CondContext SarModel::make_cond_context(const CondBatch& cond) const {
  const int b = cond.batch();
  require(b > 0, "cond: empty batch");
  int wmax = 1;
  for (const auto& p : cond.phrases) wmax = std::max(wmax, static_cast<int>(p.size()));

  // padded ids; empty phrases (and padding) use the learned null row
  IntArray ids({b, wmax}, std::vector<int32_t>(static_cast<size_t>(b) * wmax, static_cast<int32_t>(vocab_)));
  auto attn_mask = Tensor::zeros({b, 1, 1, wmax});
  auto pool_weight = Tensor::zeros({b, wmax, cfg_.dim});
  const float ninf = -std::numeric_limits<float>::infinity();
  for (int bi = 0; bi < b; ++bi) {
    const auto& phrase = cond.phrases[static_cast<size_t>(bi)];
    const int len = std::max<int>(1, static_cast<int>(phrase.size()));  // null occupies one slot
    for (size_t w = 0; w < phrase.size(); ++w) {
      require(phrase[w] >= 0 && phrase[w] < vocab_, "cond: word id out of vocabulary");
      ids.v[static_cast<size_t>(bi) * wmax + w] = phrase[w];
    }
    for (int w = 0; w < wmax; ++w) {
      const bool active = w < len;
      if (!active)
        attn_mask.values()[static_cast<size_t>(bi) * wmax + w] = ninf;
      for (int j = 0; j < cfg_.dim; ++j)
        pool_weight.at(bi, w, j) = active ? 1.0f / static_cast<float>(len) : 0.0f;
    }
  }

  auto emb = embedding(word_table_, ids);  // (B, W, dim)
  CondContext ctx;
  ctx.mask = attn_mask;
  ctx.pooled = scale(mean_dim1(mul(emb, pool_weight)), static_cast<float>(wmax));  // weighted sum
  for (const auto& blk : blocks_) {
    ctx.k.push_back(pack_heads(linear(emb, blk.ck)));
    ctx.v.push_back(pack_heads(linear(emb, blk.cv)));
  }
  return ctx;
}

Tensor SarModel::build_input(const TokenBatch& tokens, const CondContext& cond, const CodebookBank& bank,
                             bool train_mode, Rng* rng) const {
  const int b = static_cast<int>(tokens.size());
  require(b > 0 && cond.pooled.dim(0) == b, "build_input: batch size mismatch with condition");
  const int q = schedule_.num_layers();
  for (const auto& ts : tokens) {
    require(ts.num_layers() == q, "build_input: token set layer count mismatch");
    for (int si = 0; si < q; ++si)
      require(static_cast<int>(ts.layers[static_cast<size_t>(si)].size()) ==
                  schedule_.scales[static_cast<size_t>(si)],
              "build_input: token lengths do not match the schedule");
  }

  // working copies so train-mode perturbation never touches the targets
  std::vector<std::vector<std::vector<int32_t>>> work(static_cast<size_t>(b));
  for (int bi = 0; bi < b; ++bi) work[static_cast<size_t>(bi)] = tokens[static_cast<size_t>(bi)].layers;

  if (train_mode && cfg_.tau_max > 0 && rng) {
    // input slots carrying token ids: scales 1..Q-1 consume layers 0..Q-2
    std::vector<std::pair<int, int>> slots;  // (layer, position)
    for (int si = 1; si < q; ++si)
      for (int mpos = 0; mpos < schedule_.scales[static_cast<size_t>(si - 1)]; ++mpos)
        slots.emplace_back(si - 1, mpos);
    for (int bi = 0; bi < b; ++bi) {
      if (rng->uniform() >= cfg_.perturb_prob) continue;
      const double tau = rng->uniform(0.0, cfg_.tau_max);
      int count = static_cast<int>(std::floor(tau * posmap_.total));
      count = std::min<int>(count, static_cast<int>(slots.size()));
      // partial Fisher-Yates over the slot list
      std::vector<int> order(slots.size());
      for (size_t i = 0; i < slots.size(); ++i) order[i] = static_cast<int>(i);
      for (int i = 0; i < count; ++i) {
        const int64_t j = i + rng->uniform_int(static_cast<int64_t>(slots.size()) - i);
        std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
        const auto [layer, mpos] = slots[static_cast<size_t>(order[static_cast<size_t>(i)])];
        const int v = bank.books[static_cast<size_t>(layer)].size();
        work[static_cast<size_t>(bi)][static_cast<size_t>(layer)][static_cast<size_t>(mpos)] =
            static_cast<int32_t>(rng->uniform_int(v));
      }
    }
  }

  const int t = schedule_.latent_len();
  std::vector<Tensor> segments;
  // scale 0: [sos] + pooled condition, replicated s_1 times
  {
    auto seed_row = add(broadcast_sos(b), reshape(cond.pooled, {b, 1, cfg_.dim}));
    segments.push_back(resize_nearest(seed_row, schedule_.scales[0]));
  }
  // scale si >= 1: dequant layer si-1, resample s_{si-1} -> T -> s_si, project
  for (int si = 1; si < q; ++si) {
    const int s_prev = schedule_.scales[static_cast<size_t>(si - 1)];
    const int s_cur = schedule_.scales[static_cast<size_t>(si)];
    std::vector<int32_t> ids;
    ids.reserve(static_cast<size_t>(b) * s_prev);
    if (cfg_.cumulative_input) {
      // ablation path: embed the cumulative reconstruction instead
      std::vector<MultiScaleTokenSet> view(static_cast<size_t>(b));
      for (int bi = 0; bi < b; ++bi) view[static_cast<size_t>(bi)].layers = work[static_cast<size_t>(bi)];
      auto zc = mtps_decode_prefix(view, bank, si);  // (B, T, C)
      segments.push_back(linear(resample(zc, s_cur), input_proj_));
      continue;
    }
    for (int bi = 0; bi < b; ++bi)
      for (int32_t id : work[static_cast<size_t>(bi)][static_cast<size_t>(si - 1)]) ids.push_back(id);
    auto emb = embedding(bank.books[static_cast<size_t>(si - 1)].vectors, IntArray({b, s_prev}, ids));
    auto up = resample(emb, t);
    segments.push_back(linear(resample(up, s_cur), input_proj_));
  }
  return concat_dim1(segments);
}

Tensor SarModel::broadcast_sos(int b) const {
  auto out = Tensor::zeros({b, 1, cfg_.dim});
  for (int bi = 0; bi < b; ++bi)
    std::copy(sos_.data(), sos_.data() + cfg_.dim, out.data() + static_cast<size_t>(bi) * cfg_.dim);
  attach_backward(out, {sos_}, [s = sos_, b, d = cfg_.dim](detail::Node<float>& o) mutable {
    auto& g = s.grad();
    for (int bi = 0; bi < b; ++bi)
      for (int j = 0; j < d; ++j) g[static_cast<size_t>(j)] += o.g[static_cast<size_t>(bi) * d + j];
  });
  return out;
}

Tensor SarModel::blocks_forward(Tensor x, const std::vector<double>& positions, const Tensor& mask,
                                const CondContext& cond, KvCache* cache) const {
  for (size_t li = 0; li < blocks_.size(); ++li) {
    const auto& blk = blocks_[li];
    // self-attention (scale-RoPE on q and k)
    {
      auto h = rms_norm(x, blk.attn_norm);
      auto qh = rope(pack_heads(linear(h, blk.wq)), positions);
      auto kh = rope(pack_heads(linear(h, blk.wk)), positions);
      auto vh = pack_heads(linear(h, blk.wv));
      Tensor k_all = kh, v_all = vh;
      if (cache) {
        if (cache->k[li].defined()) {
          k_all = concat_heads_time(cache->k[li], kh);
          v_all = concat_heads_time(cache->v[li], vh);
        }
        cache->k[li] = k_all.detach();
        cache->v[li] = v_all.detach();
      }
      auto att = scaled_dot_attention(qh, k_all, v_all, mask);
      x = add(x, linear(unpack_heads(att), blk.wo));
    }
    // cross-attention to condition words (no positional encoding)
    {
      auto h = rms_norm(x, blk.cross_norm);
      auto qh = pack_heads(linear(h, blk.cq));
      auto att = scaled_dot_attention(qh, cond.k[li], cond.v[li], cond.mask);
      x = add(x, linear(unpack_heads(att), blk.co));
    }
    // SwiGLU
    {
      auto h = rms_norm(x, blk.ffn_norm);
      x = add(x, swiglu_ff(h, blk.w1, blk.w3, blk.w2));
    }
  }
  return rms_norm(x, final_norm_);
}

std::vector<Tensor> SarModel::forward(const TokenBatch& tokens, const CondContext& cond,
                                      const CodebookBank& bank, bool train_mode, Rng* rng) const {
  auto x = build_input(tokens, cond, bank, train_mode, rng);
  auto h = blocks_forward(x, posmap_.rotary, mask_, cond, nullptr);
  std::vector<Tensor> logits;
  int off = 0;
  for (int si = 0; si < schedule_.num_layers(); ++si) {
    const int s = schedule_.scales[static_cast<size_t>(si)];
    logits.push_back(linear(slice_dim1(h, off, off + s), heads_[static_cast<size_t>(si)]));
    off += s;
  }
  return logits;
}

Tensor SarModel::embed_step_input(int scale_index, const std::vector<std::vector<int32_t>>& prev_tokens,
                                  const CondContext& cond, const CodebookBank& bank) const {
  const int b = cond.pooled.dim(0);
  if (scale_index == 0)
    return resize_nearest(add(broadcast_sos(b), reshape(cond.pooled, {b, 1, cfg_.dim})), schedule_.scales[0]);
  const int s_prev = schedule_.scales[static_cast<size_t>(scale_index - 1)];
  const int s_cur = schedule_.scales[static_cast<size_t>(scale_index)];
  require(static_cast<int>(prev_tokens.size()) == b, "embed_step_input: batch mismatch");
  std::vector<int32_t> ids;
  ids.reserve(static_cast<size_t>(b) * s_prev);
  for (const auto& row : prev_tokens) {
    require(static_cast<int>(row.size()) == s_prev, "embed_step_input: previous-scale token count mismatch");
    ids.insert(ids.end(), row.begin(), row.end());
  }
  auto emb = embedding(bank.books[static_cast<size_t>(scale_index - 1)].vectors, IntArray({b, s_prev}, ids));
  auto up = resample(emb, schedule_.latent_len());
  return linear(resample(up, s_cur), input_proj_);
}

Tensor SarModel::forward_step(const Tensor& block_embed, int scale_index, KvCache& cache,
                              const CondContext& cond) const {
  const int s = schedule_.scales[static_cast<size_t>(scale_index)];
  require(block_embed.dim(1) == s, "forward_step: block length mismatch");
  std::vector<double> positions;
  const int sq = schedule_.latent_len();
  for (int m = 0; m < s; ++m) positions.push_back(static_cast<double>(m) / s * sq);
  // no mask: cached keys cover scales <= current only
  auto h = blocks_forward(block_embed, positions, Tensor(), cond, &cache);
  cache.length += s;
  return linear(h, heads_[static_cast<size_t>(scale_index)]);
}

// concatenate cached and fresh K/V along the time dim of (B, H, L, Dh)
Tensor SarModel::concat_heads_time(const Tensor& a, const Tensor& b) {
  const int ba = a.dim(0), h = a.dim(1), la = a.dim(2), dh = a.dim(3), lb = b.dim(2);
  require(b.dim(0) == ba && b.dim(1) == h && b.dim(3) == dh, "kv append: shape mismatch");
  auto out = Tensor::zeros({ba, h, la + lb, dh});
  for (int bi = 0; bi < ba; ++bi)
    for (int hi = 0; hi < h; ++hi) {
      const size_t dst0 = ((static_cast<size_t>(bi) * h + hi) * (la + lb)) * dh;
      std::copy(a.data() + ((static_cast<size_t>(bi) * h + hi) * la) * dh,
                a.data() + ((static_cast<size_t>(bi) * h + hi) * la + la) * dh, out.data() + dst0);
      std::copy(b.data() + ((static_cast<size_t>(bi) * h + hi) * lb) * dh,
                b.data() + ((static_cast<size_t>(bi) * h + hi) * lb + lb) * dh,
                out.data() + dst0 + static_cast<size_t>(la) * dh);
    }
  return out;
}

// ---------------------------------------------------------------------------
// params / persistence
// ---------------------------------------------------------------------------

ParamList SarModel::trainable_params() {
  ParamList out;
  out.push_back({"sar.word_table", word_table_});
  out.push_back({"sar.sos", sos_});
  out.push_back({"sar.input_proj", input_proj_});
  for (size_t i = 0; i < blocks_.size(); ++i) {
    auto& b = blocks_[i];
    const std::string p = "sar.block" + std::to_string(i);
    out.push_back({p + ".attn_norm", b.attn_norm});
    out.push_back({p + ".wq", b.wq});
    out.push_back({p + ".wk", b.wk});
    out.push_back({p + ".wv", b.wv});
    out.push_back({p + ".wo", b.wo});
    out.push_back({p + ".cross_norm", b.cross_norm});
    out.push_back({p + ".cq", b.cq});
    out.push_back({p + ".ck", b.ck});
    out.push_back({p + ".cv", b.cv});
    out.push_back({p + ".co", b.co});
    out.push_back({p + ".ffn_norm", b.ffn_norm});
    out.push_back({p + ".w1", b.w1});
    out.push_back({p + ".w3", b.w3});
    out.push_back({p + ".w2", b.w2});
  }
  out.push_back({"sar.final_norm", final_norm_});
  for (size_t i = 0; i < heads_.size(); ++i)
    out.push_back({"sar.head" + std::to_string(i), heads_[i]});
  return out;
}

void SarModel::save(const std::string& dir, uint64_t vae_bank_checksum,
                    const std::string& extra_meta_json) const {
  ParamList tensors = const_cast<SarModel*>(this)->trainable_params();
  json meta;
  meta["kind"] = "sar";
  meta["config"] = {{"layers", cfg_.layers},
                    {"heads", cfg_.heads},
                    {"dim", cfg_.dim},
                    {"ff_hidden", cfg_.ff_hidden},
                    {"dropout", cfg_.dropout},
                    {"tau_max", cfg_.tau_max},
                    {"perturb_prob", cfg_.perturb_prob},
                    {"final_scale_weight", cfg_.final_scale_weight},
                    {"cond_dropout", cfg_.cond_dropout},
                    {"cumulative_input", cfg_.cumulative_input}};
  meta["schedule"] = schedule_.scales;
  meta["vocab"] = vocab_;
  meta["latent_dim"] = latent_dim_;
  meta["codebook_sizes"] = head_sizes_;
  meta["vae_bank_checksum"] = hex64(vae_bank_checksum);
  meta["train_step"] = train_step_;
  if (!extra_meta_json.empty()) meta["run"] = json::parse(extra_meta_json);
  save_checkpoint(dir, tensors, meta.dump());
}

SarModel SarModel::load(const std::string& dir, uint64_t expect_bank_checksum) {
  Checkpoint ckpt = load_checkpoint(dir);
  json meta = json::parse(ckpt.meta_json);
  require(meta.value("kind", "") == "sar", "load: '" + dir + "' is not a SAR checkpoint");
  if (expect_bank_checksum != 0)
    require(meta.value("vae_bank_checksum", "") == hex64(expect_bank_checksum),
            "load: SAR checkpoint was trained against a different VAE bank (checksum mismatch)");

  SarConfig cfg;
  const auto& jc = meta.at("config");
  cfg.layers = jc.at("layers").get<int>();
  cfg.heads = jc.at("heads").get<int>();
  cfg.dim = jc.at("dim").get<int>();
  cfg.ff_hidden = jc.at("ff_hidden").get<int>();
  cfg.dropout = jc.at("dropout").get<double>();
  cfg.tau_max = jc.at("tau_max").get<double>();
  cfg.perturb_prob = jc.at("perturb_prob").get<double>();
  cfg.final_scale_weight = jc.at("final_scale_weight").get<double>();
  cfg.cond_dropout = jc.at("cond_dropout").get<double>();
  cfg.cumulative_input = jc.value("cumulative_input", false);

  ScaleSchedule schedule{meta.at("schedule").get<std::vector<int>>()};
  Rng rng(0);
  SarModel m = create(rng, cfg, schedule, meta.at("vocab").get<int>(), meta.at("latent_dim").get<int>(),
                      meta.at("codebook_sizes").get<std::vector<int>>());
  m.train_step_ = meta.value("train_step", 0);
  ParamList tensors = m.trainable_params();
  for (auto& p : tensors) {
    const Tensor& loaded = ckpt.get(p.name);
    require(loaded.shape() == p.tensor.shape(), "load: shape mismatch for '" + p.name + "'");
    p.tensor.values() = loaded.values();
  }
  return m;
}

// ---------------------------------------------------------------------------
// token cache
// ---------------------------------------------------------------------------

TokenCache TokenCache::build(const VaeModel& vae, const Corpus& corpus) {
  TokenCache cache;
  cache.schedule = vae.bank().schedule;
  cache.bank_checksum = vae.bank().checksum();
  for (const auto& item : corpus.items) {
    cache.tokens.push_back(vae.tokenize(item.motion));
    cache.conditions.push_back(item.condition);
    cache.splits.push_back(item.split);
  }
  return cache;
}

void TokenCache::save(const std::string& dir) const {
  fs::create_directories(dir);
  json manifest;
  manifest["format"] = "msm-tokens-v1";
  manifest["schedule"] = schedule.scales;
  manifest["bank_checksum"] = hex64(bank_checksum);
  json items = json::array();
  for (size_t i = 0; i < tokens.size(); ++i) {
    const std::string file = "tokens-" + std::to_string(i) + ".json";
    json it;
    it["file"] = file;
    it["label"] = conditions[i].label_id;
    it["phrase"] = conditions[i].phrase;
    it["phrase_text"] = conditions[i].phrase_text;
    it["split"] = split_name(splits[i]);
    items.push_back(std::move(it));
    std::ofstream f(fs::path(dir) / file, std::ios::trunc);
    f << token_set_to_json(tokens[i], schedule, bank_checksum) << "\n";
  }
  manifest["items"] = std::move(items);
  std::ofstream mf(fs::path(dir) / "manifest.json", std::ios::trunc);
  mf << manifest.dump(2) << "\n";
}

TokenCache TokenCache::load(const std::string& dir) {
  std::ifstream mf(fs::path(dir) / "manifest.json");
  require(mf.good(), "token cache: no manifest.json under " + dir);
  json manifest = json::parse(mf);
  require(manifest.value("format", "") == "msm-tokens-v1", "token cache: unsupported format");
  TokenCache cache;
  cache.schedule = ScaleSchedule{manifest.at("schedule").get<std::vector<int>>()};
  cache.bank_checksum = std::stoull(manifest.at("bank_checksum").get<std::string>(), nullptr, 16);
  for (const auto& it : manifest.at("items")) {
    std::ifstream f(fs::path(dir) / it.at("file").get<std::string>());
    require(f.good(), "token cache: missing " + it.at("file").get<std::string>());
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    cache.tokens.push_back(token_set_from_json(text, cache.schedule));
    ConditionSpec cond;
    cond.label_id = it.at("label").get<int>();
    cond.phrase = it.at("phrase").get<std::vector<int>>();
    cond.phrase_text = it.value("phrase_text", "");
    cache.conditions.push_back(std::move(cond));
    const std::string sp = it.value("split", "train");
    cache.splits.push_back(sp == "val" ? Split::kVal : (sp == "test" ? Split::kTest : Split::kTrain));
  }
  return cache;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

Tensor SarTrainer::weighted_loss(const std::vector<Tensor>& per_scale_ce, double final_scale_weight) {
  const int q = static_cast<int>(per_scale_ce.size());
  Tensor total;
  double wsum = 0.0;
  for (int i = 0; i < q; ++i) {
    const double w = (i == q - 1) ? final_scale_weight : 1.0;
    wsum += w;
    auto term = scale(per_scale_ce[static_cast<size_t>(i)], static_cast<float>(w));
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, static_cast<float>(1.0 / wsum));
}

namespace {

struct BatchView {
  SarModel::TokenBatch tokens;
  CondBatch cond;
};

BatchView assemble_batch(const TokenCache& cache, const std::vector<int>& pool, int bsz, Rng& rng,
                         double cond_dropout) {
  BatchView view;
  for (int bi = 0; bi < bsz; ++bi) {
    const int idx = pool[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(pool.size())))];
    view.tokens.push_back(cache.tokens[static_cast<size_t>(idx)]);
    if (cond_dropout > 0 && rng.uniform() < cond_dropout)
      view.cond.phrases.emplace_back();  // null condition
    else
      view.cond.phrases.push_back(cache.conditions[static_cast<size_t>(idx)].phrase);
  }
  return view;
}

std::vector<Tensor> per_scale_ce_terms(const SarModel& model, const std::vector<Tensor>& logits,
                                       const SarModel::TokenBatch& tokens) {
  const auto& schedule = model.schedule();
  std::vector<Tensor> terms;
  const int b = static_cast<int>(tokens.size());
  for (int si = 0; si < schedule.num_layers(); ++si) {
    const int s = schedule.scales[static_cast<size_t>(si)];
    const int v = model.codebook_sizes()[static_cast<size_t>(si)];
    std::vector<int32_t> targets;
    targets.reserve(static_cast<size_t>(b) * s);
    for (const auto& ts : tokens)
      targets.insert(targets.end(), ts.layers[static_cast<size_t>(si)].begin(),
                     ts.layers[static_cast<size_t>(si)].end());
    auto flat = reshape(logits[static_cast<size_t>(si)], {b * s, v});
    terms.push_back(cross_entropy_mean(flat, IntArray({b * s}, targets)));
  }
  return terms;
}

}  // namespace

SarTrainer::EvalResult SarTrainer::evaluate(const SarModel& model, const TokenCache& cache,
                                            const CodebookBank& bank, Split split, int max_items,
                                            uint64_t seed) {
  NoGradGuard ng;
  std::vector<int> pool;
  for (size_t i = 0; i < cache.splits.size(); ++i)
    if (cache.splits[i] == split) pool.push_back(static_cast<int>(i));
  require(!pool.empty(), "sar eval: empty split");
  Rng rng(seed);
  const int n = max_items > 0 ? std::min<int>(max_items, static_cast<int>(pool.size()))
                              : static_cast<int>(pool.size());

  EvalResult res;
  res.per_scale_ce.assign(static_cast<size_t>(model.schedule().num_layers()), 0.0);
  int64_t correct = 0, total_tok = 0;
  const int bsz = 8;
  int done = 0;
  while (done < n) {
    const int cur = std::min(bsz, n - done);
    BatchView view;
    for (int i = 0; i < cur; ++i) {
      const int idx = pool[static_cast<size_t>((done + i) % pool.size())];
      view.tokens.push_back(cache.tokens[static_cast<size_t>(idx)]);
      view.cond.phrases.push_back(cache.conditions[static_cast<size_t>(idx)].phrase);
    }
    auto ctx = model.make_cond_context(view.cond);
    auto logits = model.forward(view.tokens, ctx, bank, false, &rng);
    auto terms = per_scale_ce_terms(model, logits, view.tokens);
    for (size_t si = 0; si < terms.size(); ++si)
      res.per_scale_ce[si] += terms[si].at(0) * cur;
    for (size_t si = 0; si < logits.size(); ++si) {
      const auto& lg = logits[si];
      const int s = lg.dim(1), v = lg.dim(2);
      for (int bi = 0; bi < cur; ++bi)
        for (int m = 0; m < s; ++m) {
          const float* row = lg.data() + (static_cast<size_t>(bi) * s + m) * v;
          int arg = 0;
          for (int j = 1; j < v; ++j)
            if (row[j] > row[arg]) arg = j;
          if (arg == view.tokens[static_cast<size_t>(bi)].layers[si][static_cast<size_t>(m)]) ++correct;
          ++total_tok;
        }
    }
    done += cur;
  }
  for (auto& ce : res.per_scale_ce) ce /= n;
  double wsum = 0.0, loss = 0.0;
  const int q = model.schedule().num_layers();
  for (int si = 0; si < q; ++si) {
    const double w = (si == q - 1) ? model.config().final_scale_weight : 1.0;
    loss += w * res.per_scale_ce[static_cast<size_t>(si)];
    wsum += w;
  }
  res.loss = loss / wsum;
  res.accuracy = static_cast<double>(correct) / static_cast<double>(total_tok);
  return res;
}

SarTrainStats SarTrainer::train(SarModel& model, const TokenCache& cache, const CodebookBank& bank,
                                uint64_t bank_checksum, const SarTrainConfig& cfg,
                                const volatile bool* interrupt,
                                const std::function<void(int64_t, double)>& heartbeat) {
  require(cache.bank_checksum == bank.checksum(),
          "train_sar: token cache was produced by a different VAE bank (checksum mismatch)");
  require(cache.schedule.scales == model.schedule().scales, "train_sar: schedule mismatch with token cache");
  std::vector<int> pool;
  for (size_t i = 0; i < cache.splits.size(); ++i)
    if (cache.splits[i] == Split::kTrain) pool.push_back(static_cast<int>(i));
  require(!pool.empty(), "train_sar: empty train split in the token cache");

  ParamList params = model.trainable_params();
  AdamW::Config ocfg;
  ocfg.lr_target = cfg.lr_target;
  ocfg.warmup_steps = cfg.warmup_steps;
  AdamW opt(ocfg);
  Rng rng = Rng(cfg.seed).split(707);

  SarTrainStats stats;
  double best_val = std::numeric_limits<double>::infinity();
  for (int64_t step = 1; step <= cfg.steps; ++step) {
    if (interrupt && *interrupt) break;
    auto view = assemble_batch(cache, pool, cfg.batch_size, rng, model.config().cond_dropout);
    auto ctx = model.make_cond_context(view.cond);
    auto logits = model.forward(view.tokens, ctx, bank, true, &rng);
    auto terms = per_scale_ce_terms(model, logits, view.tokens);
    auto loss = weighted_loss(terms, model.config().final_scale_weight);

    opt.zero_grad(params);
    loss.backward();
    opt.step(params);
    model.train_step_ = step;
    if (heartbeat && (step % 25 == 0 || step == 1)) heartbeat(step, loss.at(0));

    if (step % cfg.eval_interval == 0 || step == cfg.steps) {
      auto ev = evaluate(model, cache, bank, Split::kVal, 32, cfg.seed + 13);
      stats.val_loss_history.push_back(ev.loss);
      if (ev.loss < best_val) {
        best_val = ev.loss;
        if (!cfg.checkpoint_dir.empty()) model.save(cfg.checkpoint_dir, bank_checksum, cfg.run_meta_json);
      }
    }
    stats.steps_run = step;
  }
  if (interrupt && *interrupt && !cfg.checkpoint_dir.empty()) {
    model.save(cfg.checkpoint_dir + "-interrupt", bank_checksum, cfg.run_meta_json);
    std::cerr << "[train-sar] interrupted at step " << stats.steps_run << ", state saved\n";
  }
  auto final_train = evaluate(model, cache, bank, Split::kTrain, 32, cfg.seed + 29);
  stats.final_train_accuracy = final_train.accuracy;
  stats.best_val_loss = best_val;
  return stats;
}

}  // namespace msm
