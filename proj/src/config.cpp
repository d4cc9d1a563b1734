#include "msm/config.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

namespace msm {

using nlohmann::json;

ScaleSchedule RunConfig::resolved_schedule() const {
  if (q > 0) return ScaleSchedule::for_layers(q, corpus.f_max / 4);
  ScaleSchedule s{schedule};
  s.validate();
  return s;
}

std::string RunConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["out"] = out;
  j["corpus"] = {{"n", corpus.n},
                 {"k", corpus.k},
                 {"seed", corpus.seed},
                 {"ratios", {corpus.train_ratio, corpus.val_ratio, corpus.test_ratio}},
                 {"f_min", corpus.f_min},
                 {"f_max", corpus.f_max}};
  j["schedule"] = schedule;
  j["q"] = q;
  j["quantizer"] = {{"codebook_base", quantizer.codebook_base},
                    {"codebook_step", quantizer.codebook_step},
                    {"l2_norm", quantizer.l2_norm},
                    {"ema_decay", quantizer.ema_decay},
                    {"reset_threshold", quantizer.reset_threshold},
                    {"reset_grace", quantizer.reset_grace},
                    {"beta", quantizer.beta},
                    {"shared_codebook", quantizer.shared_codebook}};
  j["vae"] = {{"channels", vae.channels},
              {"res_blocks", vae.res_blocks},
              {"expansion", vae.expansion},
              {"groups", vae.groups},
              {"attn_heads", vae.attn_heads},
              {"attn_layers", vae.attn_layers},
              {"reference_param_budget", vae.reference_param_budget}};
  j["vae_train"] = {{"steps", vae_train.steps},
                    {"batch_size", vae_train.batch_size},
                    {"eval_interval", vae_train.eval_interval},
                    {"lr_target", vae_train.lr_target},
                    {"warmup_steps", vae_train.warmup_steps},
                    {"bypass_quantizer", vae_train.bypass_quantizer},
                    {"commit_weight", vae_train.commit_weight}};
  j["sar"] = {{"layers", sar.layers},
              {"heads", sar.heads},
              {"dim", sar.dim},
              {"ff_hidden", sar.ff_hidden},
              {"dropout", sar.dropout},
              {"tau_max", sar.tau_max},
              {"perturb_prob", sar.perturb_prob},
              {"final_scale_weight", sar.final_scale_weight},
              {"cond_dropout", sar.cond_dropout},
              {"cumulative_input", sar.cumulative_input}};
  j["sar_train"] = {{"steps", sar_train.steps},
                    {"batch_size", sar_train.batch_size},
                    {"eval_interval", sar_train.eval_interval},
                    {"lr_target", sar_train.lr_target},
                    {"warmup_steps", sar_train.warmup_steps}};
  j["infer"] = {{"cfg_start", infer.cfg_start},
                {"cfg_end", infer.cfg_end},
                {"temperature", infer.temperature},
                {"top_k", infer.top_k}};
  j["eval"] = {{"repeats", eval.repeats},
               {"samples_per_repeat", eval.samples_per_repeat},
               {"multimodality_conditions", eval.multimodality_conditions},
               {"multimodality_per_condition", eval.multimodality_per_condition},
               {"ait_samples", eval.ait_samples}};
  return j.dump(2);
}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    require(known.count(it.key()) > 0, "config: unknown key '" + where + it.key() + "'");
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void RunConfig::apply_json_text(const std::string& text) {
  json j = json::parse(text);
  reject_unknown(j, {"seed", "out", "corpus", "schedule", "q", "quantizer", "vae", "vae_train", "sar",
                     "sar_train", "infer", "eval"},
                 "");
  maybe(j, "seed", seed);
  maybe(j, "out", out);
  if (j.contains("corpus")) {
    const auto& c = j.at("corpus");
    reject_unknown(c, {"n", "k", "seed", "ratios", "f_min", "f_max"}, "corpus.");
    maybe(c, "n", corpus.n);
    maybe(c, "k", corpus.k);
    maybe(c, "seed", corpus.seed);
    maybe(c, "f_min", corpus.f_min);
    maybe(c, "f_max", corpus.f_max);
    if (c.contains("ratios")) {
      auto r = c.at("ratios").get<std::vector<double>>();
      require(r.size() == 3, "config: corpus.ratios must be [train, val, test]");
      corpus.train_ratio = r[0];
      corpus.val_ratio = r[1];
      corpus.test_ratio = r[2];
    }
  }
  maybe(j, "schedule", schedule);
  maybe(j, "q", q);
  if (j.contains("quantizer")) {
    const auto& c = j.at("quantizer");
    reject_unknown(c,
                   {"codebook_base", "codebook_step", "l2_norm", "ema_decay", "reset_threshold",
                    "reset_grace", "beta", "shared_codebook"},
                   "quantizer.");
    maybe(c, "codebook_base", quantizer.codebook_base);
    maybe(c, "codebook_step", quantizer.codebook_step);
    maybe(c, "l2_norm", quantizer.l2_norm);
    maybe(c, "ema_decay", quantizer.ema_decay);
    maybe(c, "reset_threshold", quantizer.reset_threshold);
    maybe(c, "reset_grace", quantizer.reset_grace);
    maybe(c, "beta", quantizer.beta);
    maybe(c, "shared_codebook", quantizer.shared_codebook);
  }
  if (j.contains("vae")) {
    const auto& c = j.at("vae");
    reject_unknown(
        c, {"channels", "res_blocks", "expansion", "groups", "attn_heads", "attn_layers", "reference_param_budget"},
        "vae.");
    maybe(c, "channels", vae.channels);
    maybe(c, "res_blocks", vae.res_blocks);
    maybe(c, "expansion", vae.expansion);
    maybe(c, "groups", vae.groups);
    maybe(c, "attn_heads", vae.attn_heads);
    maybe(c, "attn_layers", vae.attn_layers);
    maybe(c, "reference_param_budget", vae.reference_param_budget);
  }
  if (j.contains("vae_train")) {
    const auto& c = j.at("vae_train");
    reject_unknown(c,
                   {"steps", "batch_size", "eval_interval", "lr_target", "warmup_steps", "bypass_quantizer",
                    "commit_weight"},
                   "vae_train.");
    maybe(c, "steps", vae_train.steps);
    maybe(c, "batch_size", vae_train.batch_size);
    maybe(c, "eval_interval", vae_train.eval_interval);
    maybe(c, "lr_target", vae_train.lr_target);
    maybe(c, "warmup_steps", vae_train.warmup_steps);
    maybe(c, "bypass_quantizer", vae_train.bypass_quantizer);
    maybe(c, "commit_weight", vae_train.commit_weight);
  }
  if (j.contains("sar")) {
    const auto& c = j.at("sar");
    reject_unknown(c,
                   {"layers", "heads", "dim", "ff_hidden", "dropout", "tau_max", "perturb_prob",
                    "final_scale_weight", "cond_dropout", "cumulative_input"},
                   "sar.");
    maybe(c, "layers", sar.layers);
    maybe(c, "heads", sar.heads);
    maybe(c, "dim", sar.dim);
    maybe(c, "ff_hidden", sar.ff_hidden);
    maybe(c, "dropout", sar.dropout);
    maybe(c, "tau_max", sar.tau_max);
    maybe(c, "perturb_prob", sar.perturb_prob);
    maybe(c, "final_scale_weight", sar.final_scale_weight);
    maybe(c, "cond_dropout", sar.cond_dropout);
    maybe(c, "cumulative_input", sar.cumulative_input);
  }
  if (j.contains("sar_train")) {
    const auto& c = j.at("sar_train");
    reject_unknown(c, {"steps", "batch_size", "eval_interval", "lr_target", "warmup_steps"}, "sar_train.");
    maybe(c, "steps", sar_train.steps);
    maybe(c, "batch_size", sar_train.batch_size);
    maybe(c, "eval_interval", sar_train.eval_interval);
    maybe(c, "lr_target", sar_train.lr_target);
    maybe(c, "warmup_steps", sar_train.warmup_steps);
  }
  if (j.contains("infer")) {
    const auto& c = j.at("infer");
    reject_unknown(c, {"cfg_start", "cfg_end", "temperature", "top_k"}, "infer.");
    maybe(c, "cfg_start", infer.cfg_start);
    maybe(c, "cfg_end", infer.cfg_end);
    maybe(c, "temperature", infer.temperature);
    maybe(c, "top_k", infer.top_k);
  }
  if (j.contains("eval")) {
    const auto& c = j.at("eval");
    reject_unknown(c,
                   {"repeats", "samples_per_repeat", "multimodality_conditions",
                    "multimodality_per_condition", "ait_samples"},
                   "eval.");
    maybe(c, "repeats", eval.repeats);
    maybe(c, "samples_per_repeat", eval.samples_per_repeat);
    maybe(c, "multimodality_conditions", eval.multimodality_conditions);
    maybe(c, "multimodality_per_condition", eval.multimodality_per_condition);
    maybe(c, "ait_samples", eval.ait_samples);
  }
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), "config: cannot read " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  RunConfig cfg;
  cfg.apply_json_text(text);
  return cfg;
}

void RunConfig::write_run_json(const std::string& dir) const {
  std::filesystem::create_directories(dir);
  std::ofstream f(std::filesystem::path(dir) / "run.json", std::ios::trunc);
  require(f.good(), "config: cannot write run.json under " + dir);
  f << to_json() << "\n";
}

ConfigDiagnostics validate_config(const RunConfig& cfg) {
  ConfigDiagnostics d;
  auto err = [&d](const std::string& m) { d.errors.push_back(m); };
  auto warn = [&d](const std::string& m) { d.warnings.push_back(m); };

  // schedule against the latent length implied by the frame bounds
  ScaleSchedule sched;
  bool sched_ok = true;
  try {
    sched = cfg.resolved_schedule();
  } catch (const Error& e) {
    err(e.what());
    sched_ok = false;
  }
  const int implied_t = cfg.corpus.f_max / 4;
  if (sched_ok && sched.latent_len() != implied_t)
    err("schedule ends at " + std::to_string(sched.latent_len()) + " but the frame bound f_max=" +
        std::to_string(cfg.corpus.f_max) + " implies latent length T=" + std::to_string(implied_t));
  if (cfg.corpus.f_max % 4 != 0) err("corpus.f_max must be a multiple of 4");
  if (cfg.corpus.f_min < kMinFrames) err("corpus.f_min below the minimum sequence length");

  if (cfg.quantizer.codebook_base < 1) err("quantizer.codebook_base must be >= 1");
  if (cfg.quantizer.codebook_step < 0) err("quantizer.codebook_step must be >= 0");
  if (cfg.vae.channels % cfg.vae.groups != 0) err("vae.channels must be divisible by vae.groups");
  if (cfg.vae.channels % cfg.vae.attn_heads != 0) err("vae.channels must be divisible by vae.attn_heads");
  if (cfg.sar.dim % cfg.sar.heads != 0) err("sar.dim must be divisible by sar.heads");
  if (cfg.infer.cfg_start < cfg.infer.cfg_end) err("infer.cfg_start must be >= infer.cfg_end (decaying guidance)");
  if (cfg.infer.top_k < 0) err("infer.top_k < 1 (0 selects the full distribution)");
  if (cfg.infer.temperature < 0) err("infer.temperature must be >= 0");

  const double rsum = cfg.corpus.train_ratio + cfg.corpus.val_ratio + cfg.corpus.test_ratio;
  if (std::abs(rsum - 1.0) > 1e-9) err("corpus ratios sum to " + std::to_string(rsum) + ", expected 1");

  // paper-scale notices: runs are self-documenting about desk deviations
  if (sched_ok) {
    const int q = sched.num_layers();
    if (q != 10)
      warn("Q=" + std::to_string(q) + " deviates from the reference Q=10" +
           (q >= 6 && q <= 15 ? " (within the explored 6-15 ablation range)" : " (outside the explored 6-15 range)"));
  }
  if (cfg.sar.dim != 384 || cfg.sar.heads != 6 || cfg.sar.layers != 8)
    warn("desk-scale transformer (" + std::to_string(cfg.sar.layers) + " layers, " +
         std::to_string(cfg.sar.heads) + " heads, dim " + std::to_string(cfg.sar.dim) +
         ") deviates from the reference scale (8 layers, 6 heads, dim 384)");
  if (cfg.vae_train.batch_size != 256)
    warn("desk-scale VAE batch " + std::to_string(cfg.vae_train.batch_size) +
         " deviates from the reference batch 256");
  return d;
}

}  // namespace msm
