#include "msm/vae.hpp"

#include <chrono>
#include <cmath>
#include <iostream>

#include <nlohmann/json.hpp>

#include "msm/checkpoint.hpp"

namespace msm {

using nlohmann::json;

namespace {

Tensor conv_init(Rng& rng, int cout, int k, int cin, double gain = 2.0) {
  const float sd = static_cast<float>(std::sqrt(gain / (k * cin)));
  return Tensor::randn(rng, {cout, k, cin}, sd).set_requires_grad(true);
}

Tensor lin_init(Rng& rng, int din, int dout) {
  const float sd = static_cast<float>(std::sqrt(1.0 / din));
  return Tensor::randn(rng, {din, dout}, sd).set_requires_grad(true);
}

Tensor gn_gamma(int c) { return Tensor::full({c}, 1.0f).set_requires_grad(true); }
Tensor gn_beta(int c) { return Tensor::zeros({c}).set_requires_grad(true); }

void group_var_probe(const Tensor& x, int groups, const std::string& name, ActivationStats* stats) {
  if (!stats) return;
  const int b = x.dim(0), l = x.dim(1), c = x.dim(2), cg = c / groups;
  double mn = std::numeric_limits<double>::infinity(), mx = 0.0;
  for (int bi = 0; bi < b; ++bi)
    for (int gi = 0; gi < groups; ++gi) {
      double sum = 0.0, sumsq = 0.0;
      for (int li = 0; li < l; ++li)
        for (int j = 0; j < cg; ++j) {
          const double v = x.at(bi, li, gi * cg + j);
          sum += v;
          sumsq += v * v;
        }
      const double n = static_cast<double>(l) * cg;
      const double var = sumsq / n - (sum / n) * (sum / n);
      mn = std::min(mn, var);
      mx = std::max(mx, var);
    }
  stats->blocks.push_back({name, mn, mx});
}

}  // namespace

// ---------------------------------------------------------------------------
// construction
// ---------------------------------------------------------------------------

VaeModel VaeModel::init(Rng& rng, const VaeConfig& cfg, const ScaleSchedule& schedule,
                        const QuantizerConfig& qcfg, const CorpusStats& stats, double fps) {
  cfg.validate();
  schedule.validate();
  VaeModel m;
  m.cfg_ = cfg;
  m.stats_ = stats;
  m.fps_ = fps;
  m.bank_ = CodebookBank::init(rng, schedule, cfg.channels, qcfg);

  const int c = cfg.channels, r = cfg.expansion;
  auto make_res = [&](Coder& coder) {
    ResBlock blk;
    blk.gn1_g = gn_gamma(c);
    blk.gn1_b = gn_beta(c);
    blk.w_expand = conv_init(rng, r * c, 1, c);
    blk.b_expand = Tensor::zeros({r * c}).set_requires_grad(true);
    blk.gn2_g = gn_gamma(r * c);
    blk.gn2_b = gn_beta(r * c);
    blk.w_depth = conv_init(rng, r * c, 3, 1, 1.0);  // depthwise
    blk.b_depth = Tensor::zeros({r * c}).set_requires_grad(true);
    blk.gn3_g = gn_gamma(r * c);
    blk.gn3_b = gn_beta(r * c);
    // small-gain output conv keeps a fresh block near the identity
    blk.w_compress = conv_init(rng, c, 1, r * c, 0.02);
    blk.b_compress = Tensor::zeros({c}).set_requires_grad(true);
    coder.blocks.push_back(std::move(blk));
  };
  auto make_attn = [&](Coder& coder) {
    AttnBlock blk;
    blk.gn_g = gn_gamma(c);
    blk.gn_b = gn_beta(c);
    blk.wq = lin_init(rng, c, c);
    blk.wk = lin_init(rng, c, c);
    blk.wv = lin_init(rng, c, c);
    blk.wo = lin_init(rng, c, c);
    coder.attn.push_back(std::move(blk));
  };

  // encoder: stem, [stage blocks, down] x2, res+attn+res bottleneck, head
  m.enc_.stem_w = conv_init(rng, c, 3, kFeatureDim);
  m.enc_.stem_b = Tensor::zeros({c}).set_requires_grad(true);
  for (int stage = 0; stage < 2; ++stage) {
    for (int i = 0; i < cfg.res_blocks; ++i) make_res(m.enc_);
    m.enc_.down_w.push_back(conv_init(rng, c, 4, c));
    m.enc_.down_b.push_back(Tensor::zeros({c}).set_requires_grad(true));
  }
  make_res(m.enc_);
  for (int i = 0; i < cfg.attn_layers; ++i) make_attn(m.enc_);
  make_res(m.enc_);
  m.enc_.head_gn_g = gn_gamma(c);
  m.enc_.head_gn_b = gn_beta(c);
  m.enc_.head_w = conv_init(rng, c, 3, c);
  m.enc_.head_b = Tensor::zeros({c}).set_requires_grad(true);

  // decoder mirrors: stem, res+attn+res, [up, stage blocks] x2, head
  m.dec_.stem_w = conv_init(rng, c, 3, c);
  m.dec_.stem_b = Tensor::zeros({c}).set_requires_grad(true);
  make_res(m.dec_);
  for (int i = 0; i < cfg.attn_layers; ++i) make_attn(m.dec_);
  make_res(m.dec_);
  for (int stage = 0; stage < 2; ++stage) {
    m.dec_.up_w.push_back(conv_init(rng, c, 3, c));
    m.dec_.up_b.push_back(Tensor::zeros({c}).set_requires_grad(true));
    for (int i = 0; i < cfg.res_blocks; ++i) make_res(m.dec_);
  }
  m.dec_.head_gn_g = gn_gamma(c);
  m.dec_.head_gn_b = gn_beta(c);
  m.dec_.head_w = conv_init(rng, kFeatureDim, 3, c, 1.0);
  m.dec_.head_b = Tensor::zeros({kFeatureDim}).set_requires_grad(true);
  return m;
}

// ---------------------------------------------------------------------------
// blocks
// ---------------------------------------------------------------------------

Tensor VaeModel::res_block(const ResBlock& blk, const Tensor& x) const {
  auto h = silu(group_norm(x, blk.gn1_g, blk.gn1_b, cfg_.groups));
  h = conv1d(h, blk.w_expand, blk.b_expand, 1, 0);
  h = silu(group_norm(h, blk.gn2_g, blk.gn2_b, cfg_.groups));
  h = conv1d(h, blk.w_depth, blk.b_depth, 1, 1, cfg_.channels * cfg_.expansion);
  h = silu(group_norm(h, blk.gn3_g, blk.gn3_b, cfg_.groups));
  h = conv1d(h, blk.w_compress, blk.b_compress, 1, 0);
  return add(x, h);
}

Tensor VaeModel::attn_block(const AttnBlock& blk, const Tensor& x) const {
  const int b = x.dim(0), l = x.dim(1), c = x.dim(2);
  const int heads = cfg_.attn_heads, dh = c / heads;
  auto h = group_norm(x, blk.gn_g, blk.gn_b, cfg_.groups);
  auto pack = [&](const Tensor& t) { return swap_dims12(reshape(t, {b, l, heads, dh})); };
  auto att = scaled_dot_attention(pack(linear(h, blk.wq)), pack(linear(h, blk.wk)), pack(linear(h, blk.wv)));
  auto merged = reshape(swap_dims12(att), {b, l, c});
  return add(x, linear(merged, blk.wo));
}

// ---------------------------------------------------------------------------
// encode / decode
// ---------------------------------------------------------------------------

Tensor VaeModel::encode(const Tensor& m, ActivationStats* stats) const {
  require(m.ndim() == 3, "encode: expects (B, F, D)");
  require(m.dim(2) == kFeatureDim, "encode: feature dim mismatch");
  require(m.dim(1) % 4 == 0,
          "encode: frame count " + std::to_string(m.dim(1)) +
              " is not divisible by 4; crop to a multiple of 4 first (the corpus-side rounding rule)");
  auto h = conv1d(m, enc_.stem_w, enc_.stem_b, 1, 1);
  group_var_probe(h, cfg_.groups, "enc.stem", stats);
  size_t blk = 0;
  for (int stage = 0; stage < 2; ++stage) {
    for (int i = 0; i < cfg_.res_blocks; ++i) {
      h = res_block(enc_.blocks[blk++], h);
      group_var_probe(h, cfg_.groups, "enc.res" + std::to_string(blk), stats);
    }
    h = conv1d(h, enc_.down_w[static_cast<size_t>(stage)], enc_.down_b[static_cast<size_t>(stage)], 2, 1);
    group_var_probe(h, cfg_.groups, "enc.down" + std::to_string(stage), stats);
  }
  h = res_block(enc_.blocks[blk++], h);
  group_var_probe(h, cfg_.groups, "enc.mid0", stats);
  for (const auto& a : enc_.attn) {
    h = attn_block(a, h);
    group_var_probe(h, cfg_.groups, "enc.attn", stats);
  }
  h = res_block(enc_.blocks[blk++], h);
  group_var_probe(h, cfg_.groups, "enc.mid1", stats);
  h = silu(group_norm(h, enc_.head_gn_g, enc_.head_gn_b, cfg_.groups));
  return conv1d(h, enc_.head_w, enc_.head_b, 1, 1);
}

Tensor VaeModel::decode(const Tensor& zhat) const {
  require(zhat.ndim() == 3, "decode: expects (B, T, C)");
  require(zhat.dim(2) == cfg_.channels, "decode: latent dim mismatch");
  require(zhat.dim(1) >= bank_.schedule.scales.front(),
          "decode: latent length below the coarsest scale");
  auto h = conv1d(zhat, dec_.stem_w, dec_.stem_b, 1, 1);
  size_t blk = 0;
  h = res_block(dec_.blocks[blk++], h);
  for (const auto& a : dec_.attn) h = attn_block(a, h);
  h = res_block(dec_.blocks[blk++], h);
  for (int stage = 0; stage < 2; ++stage) {
    h = resize_nearest(h, h.dim(1) * 2);
    h = conv1d(h, dec_.up_w[static_cast<size_t>(stage)], dec_.up_b[static_cast<size_t>(stage)], 1, 1);
    for (int i = 0; i < cfg_.res_blocks; ++i) h = res_block(dec_.blocks[blk++], h);
  }
  h = silu(group_norm(h, dec_.head_gn_g, dec_.head_gn_b, cfg_.groups));
  return conv1d(h, dec_.head_w, dec_.head_b, 1, 1);
}

// ---------------------------------------------------------------------------
// pipeline helpers
// ---------------------------------------------------------------------------

Tensor VaeModel::pad_to_frames(const MotionSequence& m, int frames) {
  require(m.normalized, "pipeline: input must be normalized against the corpus stats (stats flag unset)");
  const int usable = (m.frames / 4) * 4;
  require(usable >= 4, "pipeline: sequence too short");
  const int keep = std::min(usable, frames);
  auto out = Tensor::zeros({1, frames, kFeatureDim});
  for (int f = 0; f < keep; ++f)
    for (int d = 0; d < kFeatureDim; ++d) out.at(0, f, d) = m.at(f, d);
  for (int f = keep; f < frames; ++f)
    for (int d = 0; d < kFeatureDim; ++d) out.at(0, f, d) = m.at(keep - 1, d);
  return out;
}

MultiScaleTokenSet VaeModel::tokenize(const MotionSequence& m) const {
  NoGradGuard ng;
  auto mt = pad_to_frames(m, frames_for_schedule());
  auto z = encode(mt);
  auto res = mtps_encode(z, const_cast<CodebookBank&>(bank_));
  return res.tokens[0];
}

Tensor VaeModel::detokenize(const std::vector<MultiScaleTokenSet>& tokens, int layer_count) const {
  NoGradGuard ng;
  const int layers = layer_count < 0 ? bank_.schedule.num_layers() : layer_count;
  auto zhat = mtps_decode_prefix(tokens, bank_, layers);
  return decode(zhat);
}

MotionSequence VaeModel::reconstruct(const MotionSequence& m) const {
  NoGradGuard ng;
  auto mt = pad_to_frames(m, frames_for_schedule());
  auto z = encode(mt);
  auto res = mtps_encode(z, const_cast<CodebookBank&>(bank_));
  auto out = decode(res.zhat);
  MotionSequence rec;
  rec.id = m.id + "-rec";
  rec.fps = m.fps;
  rec.normalized = true;
  rec.frames = std::min((m.frames / 4) * 4, frames_for_schedule());
  rec.data.resize(static_cast<size_t>(rec.frames) * kFeatureDim);
  for (int f = 0; f < rec.frames; ++f)
    for (int d = 0; d < kFeatureDim; ++d) rec.at(f, d) = out.at(0, f, d);
  return rec;
}

// ---------------------------------------------------------------------------
// params / persistence
// ---------------------------------------------------------------------------

void VaeModel::collect_coder(const std::string& prefix, Coder& c, ParamList& out) {
  out.push_back({prefix + ".stem_w", c.stem_w});
  out.push_back({prefix + ".stem_b", c.stem_b});
  for (size_t i = 0; i < c.blocks.size(); ++i) {
    auto& b = c.blocks[i];
    const std::string p = prefix + ".res" + std::to_string(i);
    out.push_back({p + ".gn1_g", b.gn1_g});
    out.push_back({p + ".gn1_b", b.gn1_b});
    out.push_back({p + ".w_expand", b.w_expand});
    out.push_back({p + ".b_expand", b.b_expand});
    out.push_back({p + ".gn2_g", b.gn2_g});
    out.push_back({p + ".gn2_b", b.gn2_b});
    out.push_back({p + ".w_depth", b.w_depth});
    out.push_back({p + ".b_depth", b.b_depth});
    out.push_back({p + ".gn3_g", b.gn3_g});
    out.push_back({p + ".gn3_b", b.gn3_b});
    out.push_back({p + ".w_compress", b.w_compress});
    out.push_back({p + ".b_compress", b.b_compress});
  }
  for (size_t i = 0; i < c.down_w.size(); ++i) {
    out.push_back({prefix + ".down" + std::to_string(i) + "_w", c.down_w[i]});
    out.push_back({prefix + ".down" + std::to_string(i) + "_b", c.down_b[i]});
  }
  for (size_t i = 0; i < c.up_w.size(); ++i) {
    out.push_back({prefix + ".up" + std::to_string(i) + "_w", c.up_w[i]});
    out.push_back({prefix + ".up" + std::to_string(i) + "_b", c.up_b[i]});
  }
  for (size_t i = 0; i < c.attn.size(); ++i) {
    auto& a = c.attn[i];
    const std::string p = prefix + ".attn" + std::to_string(i);
    out.push_back({p + ".gn_g", a.gn_g});
    out.push_back({p + ".gn_b", a.gn_b});
    out.push_back({p + ".wq", a.wq});
    out.push_back({p + ".wk", a.wk});
    out.push_back({p + ".wv", a.wv});
    out.push_back({p + ".wo", a.wo});
  }
  out.push_back({prefix + ".head_gn_g", c.head_gn_g});
  out.push_back({prefix + ".head_gn_b", c.head_gn_b});
  out.push_back({prefix + ".head_w", c.head_w});
  out.push_back({prefix + ".head_b", c.head_b});
}

ParamList VaeModel::trainable_params() {
  ParamList out;
  collect_coder("encoder", enc_, out);
  collect_coder("decoder", dec_, out);
  bank_.collect_params(out);
  return out;
}

int64_t VaeModel::encoder_decoder_param_count() const {
  ParamList out;
  collect_coder("encoder", const_cast<Coder&>(enc_), out);
  collect_coder("decoder", const_cast<Coder&>(dec_), out);
  int64_t n = 0;
  for (const auto& p : out) n += p.tensor.numel();
  return n;
}

void VaeModel::save(const std::string& dir, const std::string& extra_meta_json) const {
  ParamList tensors;
  auto* self = const_cast<VaeModel*>(this);
  collect_coder("encoder", self->enc_, tensors);
  collect_coder("decoder", self->dec_, tensors);
  self->bank_.collect_all_tensors(tensors);

  json meta;
  meta["kind"] = "vae";
  meta["config"] = {{"channels", cfg_.channels},
                    {"res_blocks", cfg_.res_blocks},
                    {"expansion", cfg_.expansion},
                    {"groups", cfg_.groups},
                    {"attn_heads", cfg_.attn_heads},
                    {"attn_layers", cfg_.attn_layers},
                    {"reference_param_budget", cfg_.reference_param_budget}};
  meta["quantizer"] = {{"codebook_base", bank_.config.codebook_base},
                       {"codebook_step", bank_.config.codebook_step},
                       {"l2_norm", bank_.config.l2_norm},
                       {"ema_decay", bank_.config.ema_decay},
                       {"reset_threshold", bank_.config.reset_threshold},
                       {"reset_grace", bank_.config.reset_grace},
                       {"beta", bank_.config.beta},
                       {"shared_codebook", bank_.config.shared_codebook}};
  meta["schedule"] = bank_.schedule.scales;
  meta["stats_mean"] = stats_.mean;
  meta["stats_std"] = stats_.std;
  meta["fps"] = fps_;
  meta["train_step"] = train_step_;
  meta["encoder_decoder_params"] = encoder_decoder_param_count();
  meta["bank_checksum"] = hex64(bank_.checksum());
  if (!extra_meta_json.empty()) meta["run"] = json::parse(extra_meta_json);
  save_checkpoint(dir, tensors, meta.dump());
}

VaeModel VaeModel::load(const std::string& dir) {
  Checkpoint ckpt = load_checkpoint(dir);
  json meta = json::parse(ckpt.meta_json);
  require(meta.value("kind", "") == "vae", "load: '" + dir + "' is not a VAE checkpoint");

  VaeConfig cfg;
  cfg.channels = meta.at("config").at("channels").get<int>();
  cfg.res_blocks = meta.at("config").at("res_blocks").get<int>();
  cfg.expansion = meta.at("config").at("expansion").get<int>();
  cfg.groups = meta.at("config").at("groups").get<int>();
  cfg.attn_heads = meta.at("config").at("attn_heads").get<int>();
  cfg.attn_layers = meta.at("config").at("attn_layers").get<int>();
  cfg.reference_param_budget = meta.at("config").value("reference_param_budget", 0);

  QuantizerConfig qcfg;
  qcfg.codebook_base = meta.at("quantizer").at("codebook_base").get<int>();
  qcfg.codebook_step = meta.at("quantizer").at("codebook_step").get<int>();
  qcfg.l2_norm = meta.at("quantizer").at("l2_norm").get<bool>();
  qcfg.ema_decay = meta.at("quantizer").at("ema_decay").get<double>();
  qcfg.reset_threshold = meta.at("quantizer").at("reset_threshold").get<double>();
  qcfg.reset_grace = meta.at("quantizer").at("reset_grace").get<int>();
  qcfg.beta = meta.at("quantizer").at("beta").get<double>();
  qcfg.shared_codebook = meta.at("quantizer").value("shared_codebook", false);

  ScaleSchedule schedule{meta.at("schedule").get<std::vector<int>>()};
  CorpusStats stats;
  stats.mean = meta.at("stats_mean").get<std::vector<float>>();
  stats.std = meta.at("stats_std").get<std::vector<float>>();

  Rng rng(0);
  VaeModel m = init(rng, cfg, schedule, qcfg, stats, meta.value("fps", 20.0));
  m.train_step_ = meta.value("train_step", 0);

  ParamList tensors;
  collect_coder("encoder", m.enc_, tensors);
  collect_coder("decoder", m.dec_, tensors);
  m.bank_.collect_all_tensors(tensors);
  for (auto& p : tensors) {
    const Tensor& loaded = ckpt.get(p.name);
    require(loaded.shape() == p.tensor.shape(), "load: shape mismatch for '" + p.name + "'");
    p.tensor.values() = loaded.values();
  }
  return m;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

double VaeTrainer::eval_l1(const VaeModel& model, const Corpus& corpus, Split split, int max_items) {
  NoGradGuard ng;
  auto idx = corpus.indices_of(split);
  require(!idx.empty(), "eval_l1: split is empty");
  if (max_items > 0 && static_cast<int>(idx.size()) > max_items) idx.resize(static_cast<size_t>(max_items));
  double total = 0.0;
  int64_t count = 0;
  for (int i : idx) {
    const auto& m = corpus.items[static_cast<size_t>(i)].motion;
    auto rec = model.reconstruct(m);
    for (int f = 0; f < rec.frames; ++f)
      for (int d = 0; d < kFeatureDim; ++d) {
        total += std::abs(rec.at(f, d) - m.at(f, d));
        ++count;
      }
  }
  return total / static_cast<double>(count);
}

VaeTrainStats VaeTrainer::train(VaeModel& model, const Corpus& corpus, const VaeTrainConfig& cfg,
                                const volatile bool* interrupt,
                                const std::function<void(int64_t, double)>& heartbeat) {
  require(corpus.stats.has_value(), "train_vae: corpus must be normalized and carry stats");
  auto train_idx = corpus.indices_of(Split::kTrain);
  require(!train_idx.empty(), "train_vae: empty train split");

  const int frames = model.frames_for_schedule();
  const int t = model.bank().schedule.latent_len();
  const int c = model.config().channels;
  const int q = model.bank().schedule.num_layers();

  ParamList params = model.trainable_params();
  AdamW::Config ocfg;
  ocfg.lr_target = cfg.lr_target;
  ocfg.warmup_steps = cfg.warmup_steps;
  AdamW opt(ocfg);

  Rng batch_rng = Rng(cfg.seed).split(101);
  Rng reset_rng = Rng(cfg.seed).split(202);

  VaeTrainStats stats;
  double initial_loss = -1.0;
  int divergent_steps = 0;
  double best_val = std::numeric_limits<double>::infinity();

  for (int64_t step = 1; step <= cfg.steps; ++step) {
    if (interrupt && *interrupt) break;

    // assemble a padded batch
    const int bsz = cfg.batch_size;
    auto batch = Tensor::zeros({bsz, frames, kFeatureDim});
    for (int bi = 0; bi < bsz; ++bi) {
      const int idx = train_idx[static_cast<size_t>(batch_rng.uniform_int(static_cast<int64_t>(train_idx.size())))];
      auto one = VaeModel::pad_to_frames(corpus.items[static_cast<size_t>(idx)].motion, frames);
      std::copy(one.data(), one.data() + one.numel(),
                batch.data() + static_cast<size_t>(bi) * frames * kFeatureDim);
    }

    Tensor loss;
    MtpsResult enc_res;
    auto z = model.encode(batch);
    if (cfg.bypass_quantizer) {
      loss = l1_loss(model.decode(z), batch);
    } else {
      enc_res = mtps_encode(z, model.bank());
      auto z_st = straight_through(z, enc_res.zhat.detach());
      auto recon = l1_loss(model.decode(z_st), batch);
      auto commit = commit_loss(enc_res.record, model.bank().config.beta);
      const float commit_norm =
          static_cast<float>(cfg.commit_weight / (static_cast<double>(bsz) * t * c));
      loss = add(recon, scale(commit, commit_norm));
    }

    const double loss_val = loss.at(0);
    if (initial_loss < 0 && std::isfinite(loss_val)) initial_loss = loss_val;
    if (!std::isfinite(loss_val) || loss_val > 10.0 * initial_loss) {
      if (++divergent_steps >= 500)
        fail("train_vae: diverged (loss " + std::to_string(loss_val) + " vs initial " +
             std::to_string(initial_loss) + " for 500 steps)");
    } else {
      divergent_steps = 0;
    }

    opt.zero_grad(params);
    loss.backward();
    opt.step(params);
    model.train_step_ = step;

    if (!cfg.bypass_quantizer) {
      auto& bank = model.bank();
      for (int layer = 0; layer < q; ++layer) {
        auto& rec = enc_res.record.layers[static_cast<size_t>(layer)];
        auto& book = bank.books[static_cast<size_t>(layer)];
        for (int32_t id : rec.indices) ++book.usage[static_cast<size_t>(id)];
        ema_update(book, rec.downsampled, rec.indices, bank.config.ema_decay);
        reset_dead_codes(book, rec.downsampled, bank.config.reset_threshold, bank.config.reset_grace,
                         reset_rng);
      }
    }

    if (heartbeat && (step % 25 == 0 || step == 1)) heartbeat(step, loss_val);

    if (step % cfg.eval_interval == 0 || step == cfg.steps) {
      const double val_l1 = eval_l1(model, corpus, Split::kVal, 32);
      stats.val_l1_history.push_back(val_l1);
      if (val_l1 < best_val) {
        best_val = val_l1;
        if (!cfg.checkpoint_dir.empty()) model.save(cfg.checkpoint_dir, cfg.run_meta_json);
      }
    }
    stats.steps_run = step;
  }
  if (interrupt && *interrupt && !cfg.checkpoint_dir.empty()) {
    model.save(cfg.checkpoint_dir + "-interrupt", cfg.run_meta_json);
    std::cerr << "[train-vae] interrupted at step " << stats.steps_run << ", state saved to "
              << cfg.checkpoint_dir << "-interrupt\n";
  }
  stats.best_val_l1 = best_val;
  stats.skipped_nan_steps = opt.skipped_steps();
  return stats;
}

}  // namespace msm
