#include "msm/quantizer.hpp"

#include <cmath>
#include <iostream>

#include <nlohmann/json.hpp>

namespace msm {

using nlohmann::json;

int ScaleSchedule::total_tokens() const {
  int total = 0;
  for (int s : scales) total += s;
  return total;
}

void ScaleSchedule::validate() const {
  require(scales.size() >= 2, "schedule: needs at least 2 scales");
  require(scales.front() >= 1, "schedule: scales must be >= 1");
  for (size_t i = 1; i < scales.size(); ++i)
    require(scales[i] > scales[i - 1], "schedule: scales must be strictly increasing, got " +
                                           std::to_string(scales[i - 1]) + " then " + std::to_string(scales[i]));
}

ScaleSchedule ScaleSchedule::default_schedule() {
  return ScaleSchedule{{3, 6, 10, 15, 20, 25, 30, 36, 42, 49}};
}

ScaleSchedule ScaleSchedule::for_layers(int q, int latent_len) {
  require(q >= 2, "schedule: Q must be >= 2");
  require(latent_len >= q, "schedule: latent length must be >= Q");
  if (q == 10 && latent_len == 49) return default_schedule();
  ScaleSchedule s;
  int prev = 0;
  for (int i = 1; i <= q; ++i) {
    int v = static_cast<int>(std::lround(latent_len * std::pow(static_cast<double>(i) / q, 1.2)));
    v = std::max(v, prev + 1);
    if (i == q) v = latent_len;
    require(v > prev, "schedule: cannot fit " + std::to_string(q) + " scales into T=" + std::to_string(latent_len));
    s.scales.push_back(v);
    prev = v;
  }
  s.validate();
  return s;
}

ScaleSchedule ScaleSchedule::parse(const std::string& csv) {
  ScaleSchedule s;
  std::string tok;
  for (char c : csv + ",") {
    if (c == ',') {
      if (!tok.empty()) {
        s.scales.push_back(std::stoi(tok));
        tok.clear();
      }
    } else {
      tok += c;
    }
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// recovery net
// ---------------------------------------------------------------------------

RecoveryNet RecoveryNet::init(Rng& rng, int channels) {
  RecoveryNet net;
  const float sd = static_cast<float>(1.0 / std::sqrt(3.0 * channels));
  net.w1 = Tensor::randn(rng, {channels, 3, channels}, sd).set_requires_grad(true);
  net.b1 = Tensor::zeros({channels}).set_requires_grad(true);
  net.w2 = Tensor::zeros({channels, 3, channels}).set_requires_grad(true);  // zero: identity at init
  net.b2 = Tensor::zeros({channels}).set_requires_grad(true);
  return net;
}

Tensor RecoveryNet::apply(const Tensor& x) const {
  auto h = relu(conv1d(x, w1, b1, 1, 1));
  return add(x, conv1d(h, w2, b2, 1, 1));
}

void RecoveryNet::collect_params(const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".w1", w1});
  out.push_back({prefix + ".b1", b1});
  out.push_back({prefix + ".w2", w2});
  out.push_back({prefix + ".b2", b2});
}

int64_t RecoveryNet::param_count() const {
  return w1.numel() + b1.numel() + w2.numel() + b2.numel();
}

// ---------------------------------------------------------------------------
// bank
// ---------------------------------------------------------------------------

CodebookBank CodebookBank::init(Rng& rng, const ScaleSchedule& schedule, int dim, const QuantizerConfig& cfg) {
  schedule.validate();
  CodebookBank bank;
  bank.schedule = schedule;
  bank.config = cfg;
  bank.dim = dim;
  const int q = schedule.num_layers();
  for (int i = 0; i < q; ++i) {
    Codebook book;
    const int v = cfg.shared_codebook ? cfg.codebook_base : cfg.codebook_base + i * cfg.codebook_step;
    book.vectors = Tensor::randn(rng, {v, dim}, 0.5f);
    book.ema_counts.assign(static_cast<size_t>(v), 1.0);
    book.ema_sums.assign(static_cast<size_t>(v) * dim, 0.0);
    for (int c = 0; c < v; ++c)
      for (int d = 0; d < dim; ++d)
        book.ema_sums[static_cast<size_t>(c) * dim + d] = book.vectors.at(c, d);
    book.usage.assign(static_cast<size_t>(v), 0);
    book.reset_cooldown.assign(static_cast<size_t>(v), 0);
    bank.books.push_back(std::move(book));
    bank.recovery.push_back(RecoveryNet::init(rng, dim));
  }
  return bank;
}

uint64_t CodebookBank::checksum() const {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& book : books)
    h = fnv1a(book.vectors.data(), book.vectors.values().size() * sizeof(float), h);
  for (const auto& net : recovery) {
    h = fnv1a(net.w1.data(), net.w1.values().size() * sizeof(float), h);
    h = fnv1a(net.w2.data(), net.w2.values().size() * sizeof(float), h);
  }
  return h;
}

void CodebookBank::collect_params(ParamList& out) {
  for (size_t i = 0; i < recovery.size(); ++i)
    recovery[i].collect_params("quantizer.recovery" + std::to_string(i), out);
}

void CodebookBank::collect_all_tensors(ParamList& out) {
  collect_params(out);
  for (size_t i = 0; i < books.size(); ++i)
    out.push_back({"quantizer.codebook" + std::to_string(i), books[i].vectors});
}

int MultiScaleTokenSet::total_tokens() const {
  int total = 0;
  for (const auto& l : layers) total += static_cast<int>(l.size());
  return total;
}

// ---------------------------------------------------------------------------
// resample / nearest lookup
// ---------------------------------------------------------------------------

Tensor resample(const Tensor& seq, int target_len) {
  require(target_len >= 1, "resample: target length must be >= 1");
  if (seq.ndim() == 2) {
    auto batched = reshape(seq, {1, seq.dim(0), seq.dim(1)});
    auto out = resize_linear(batched, target_len);
    return reshape(out, {target_len, seq.dim(1)});
  }
  require(seq.ndim() == 3, "resample: expects (L, C) or (B, L, C)");
  return resize_linear(seq, target_len);
}

std::vector<int32_t> quantize_nearest(const Tensor& z, const Codebook& book, bool use_l2norm) {
  require(book.size() > 0, "quantize_nearest: empty codebook");
  const int c = book.dim();
  require(z.dim(z.ndim() - 1) == c, "quantize_nearest: latent dim " + std::to_string(z.dim(z.ndim() - 1)) +
                                        " vs codebook dim " + std::to_string(c));
  const int64_t rows = z.numel() / c;
  const int v = book.size();

  // Precompute code norms once per call; distance accumulation in double so
  // the exhaustive-scan oracle matches index-for-index.
  std::vector<double> code_norm(static_cast<size_t>(v));
  for (int k = 0; k < v; ++k) {
    double ss = 0.0;
    const float* row = book.vectors.data() + static_cast<size_t>(k) * c;
    for (int j = 0; j < c; ++j) ss += static_cast<double>(row[j]) * row[j];
    code_norm[static_cast<size_t>(k)] = std::sqrt(ss);
  }

  static thread_local int64_t zero_norm_warnings = 0;

  std::vector<int32_t> out(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const float* zr = z.data() + r * c;
    bool cosine = use_l2norm;
    if (cosine) {
      double zss = 0.0;
      for (int j = 0; j < c; ++j) zss += static_cast<double>(zr[j]) * zr[j];
      if (zss == 0.0) {
        cosine = false;  // zero-norm row: fall back to Euclidean for this row
        if (zero_norm_warnings++ == 0)
          std::cerr << "[quantizer] warning: zero-norm latent row, using Euclidean lookup for it\n";
      }
    }
    int best = 0;
    if (cosine) {
      double best_sim = -std::numeric_limits<double>::infinity();
      for (int k = 0; k < v; ++k) {
        const float* ck = book.vectors.data() + static_cast<size_t>(k) * c;
        double dot = 0.0;
        for (int j = 0; j < c; ++j) dot += static_cast<double>(zr[j]) * ck[j];
        const double denom = code_norm[static_cast<size_t>(k)];
        const double sim = denom > 0.0 ? dot / denom : -std::numeric_limits<double>::infinity();
        if (sim > best_sim) {  // strict: ties keep the smallest index
          best_sim = sim;
          best = k;
        }
      }
    } else {
      double best_d = std::numeric_limits<double>::infinity();
      for (int k = 0; k < v; ++k) {
        const float* ck = book.vectors.data() + static_cast<size_t>(k) * c;
        double d = 0.0;
        for (int j = 0; j < c; ++j) {
          const double diff = static_cast<double>(zr[j]) - ck[j];
          d += diff * diff;
        }
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
    }
    out[static_cast<size_t>(r)] = best;
  }
  return out;
}

// ---------------------------------------------------------------------------
// encode / decode
// ---------------------------------------------------------------------------

namespace {

Tensor dequant_rows(const Codebook& book, const std::vector<int32_t>& ids, int b, int s) {
  IntArray arr({b, s}, ids);
  return embedding(book.vectors, arr);  // codebook has requires_grad=false
}

}  // namespace

MtpsResult mtps_encode(const Tensor& z, CodebookBank& bank, bool record_usage) {
  require(z.ndim() == 3, "mtps_encode: expects (B, T, C)");
  const int b = z.dim(0), t = z.dim(1), c = z.dim(2);
  require(t == bank.schedule.latent_len(),
          "mtps_encode: latent length " + std::to_string(t) + " must equal the final scale " +
              std::to_string(bank.schedule.latent_len()));
  require(c == bank.dim, "mtps_encode: latent dim mismatch");
  require(static_cast<int>(bank.books.size()) == bank.schedule.num_layers(),
          "mtps_encode: bank has " + std::to_string(bank.books.size()) + " codebooks for " +
              std::to_string(bank.schedule.num_layers()) + " scales");

  MtpsResult res;
  res.tokens.assign(static_cast<size_t>(b), MultiScaleTokenSet{});
  Tensor residual = z;
  Tensor zhat;
  const int q = bank.schedule.num_layers();
  for (int layer = 0; layer < q; ++layer) {
    const int s = bank.schedule.scales[static_cast<size_t>(layer)];
    Tensor down = resample(residual, s);
    Tensor down_vals = down.detach();
    auto ids = quantize_nearest(down_vals, bank.books[static_cast<size_t>(layer)], bank.config.l2_norm);
    if (record_usage)
      for (int32_t id : ids) ++bank.books[static_cast<size_t>(layer)].usage[static_cast<size_t>(id)];

    Tensor embedded = dequant_rows(bank.books[static_cast<size_t>(layer)], ids, b, s);
    Tensor up = resample(embedded, t);
    Tensor contribution = bank.recovery[static_cast<size_t>(layer)].apply(up);

    EncodeRecord::Layer rec;
    rec.residual_in = residual;
    rec.contribution = contribution;
    rec.downsampled = down_vals;
    rec.indices = ids;
    res.record.layers.push_back(std::move(rec));

    for (int bi = 0; bi < b; ++bi)
      res.tokens[static_cast<size_t>(bi)].layers.emplace_back(ids.begin() + static_cast<int64_t>(bi) * s,
                                                              ids.begin() + static_cast<int64_t>(bi + 1) * s);

    zhat = layer == 0 ? contribution : add(zhat, contribution);
    residual = sub(residual, contribution);
  }
  res.zhat = zhat;
  return res;
}

static Tensor decode_layers(const std::vector<MultiScaleTokenSet>& tokens, const CodebookBank& bank,
                            int layer_count) {
  require(!tokens.empty(), "mtps_decode: empty batch");
  const int b = static_cast<int>(tokens.size());
  const int t = bank.schedule.latent_len();
  const int q = bank.schedule.num_layers();
  require(layer_count >= 1 && layer_count <= q, "mtps_decode: bad layer count");
  for (const auto& ts : tokens) {
    require(ts.num_layers() == q, "mtps_decode: token set has " + std::to_string(ts.num_layers()) +
                                      " layers, schedule expects " + std::to_string(q));
    for (int layer = 0; layer < q; ++layer) {
      const int s = bank.schedule.scales[static_cast<size_t>(layer)];
      require(static_cast<int>(ts.layers[static_cast<size_t>(layer)].size()) == s,
              "mtps_decode: layer " + std::to_string(layer) + " has " +
                  std::to_string(ts.layers[static_cast<size_t>(layer)].size()) + " tokens, schedule expects " +
                  std::to_string(s));
    }
  }

  Tensor zhat;
  for (int layer = 0; layer < layer_count; ++layer) {
    const int s = bank.schedule.scales[static_cast<size_t>(layer)];
    const int v = bank.books[static_cast<size_t>(layer)].size();
    std::vector<int32_t> ids;
    ids.reserve(static_cast<size_t>(b) * s);
    for (const auto& ts : tokens) {
      const auto& lay = ts.layers[static_cast<size_t>(layer)];
      for (size_t pos = 0; pos < lay.size(); ++pos) {
        require(lay[pos] >= 0 && lay[pos] < v,
                "mtps_decode: index " + std::to_string(lay[pos]) + " out of range [0," + std::to_string(v) +
                    ") at layer " + std::to_string(layer) + " position " + std::to_string(pos));
        ids.push_back(lay[pos]);
      }
    }
    Tensor embedded = dequant_rows(bank.books[static_cast<size_t>(layer)], ids, b, s);
    Tensor up = resample(embedded, t);
    Tensor contribution = bank.recovery[static_cast<size_t>(layer)].apply(up);
    zhat = layer == 0 ? contribution : add(zhat, contribution);
  }
  return zhat;
}

Tensor mtps_decode(const std::vector<MultiScaleTokenSet>& tokens, const CodebookBank& bank) {
  return decode_layers(tokens, bank, bank.schedule.num_layers());
}

Tensor mtps_decode_prefix(const std::vector<MultiScaleTokenSet>& tokens, const CodebookBank& bank,
                          int layer_count) {
  return decode_layers(tokens, bank, layer_count);
}

// ---------------------------------------------------------------------------
// EMA / resets / losses
// ---------------------------------------------------------------------------

void ema_update(Codebook& book, const Tensor& rows, const std::vector<int32_t>& assignments, double decay) {
  const int c = book.dim();
  const int64_t n = rows.numel() / c;
  if (n == 0) return;  // empty batch: no-op
  require(static_cast<int64_t>(assignments.size()) == n, "ema_update: assignment count mismatch");
  const int v = book.size();

  std::vector<double> batch_counts(static_cast<size_t>(v), 0.0);
  std::vector<double> batch_sums(static_cast<size_t>(v) * c, 0.0);
  for (int64_t r = 0; r < n; ++r) {
    const int32_t k = assignments[static_cast<size_t>(r)];
    batch_counts[static_cast<size_t>(k)] += 1.0;
    const float* src = rows.data() + r * c;
    double* dst = batch_sums.data() + static_cast<size_t>(k) * c;
    for (int j = 0; j < c; ++j) dst[j] += src[j];
  }
  for (int k = 0; k < v; ++k) {
    book.ema_counts[static_cast<size_t>(k)] =
        decay * book.ema_counts[static_cast<size_t>(k)] + (1.0 - decay) * batch_counts[static_cast<size_t>(k)];
    for (int j = 0; j < c; ++j) {
      const size_t idx = static_cast<size_t>(k) * c + j;
      book.ema_sums[idx] = decay * book.ema_sums[idx] + (1.0 - decay) * batch_sums[idx];
    }
    if (book.ema_counts[static_cast<size_t>(k)] > 1e-6 && batch_counts[static_cast<size_t>(k)] > 0.0) {
      for (int j = 0; j < c; ++j)
        book.vectors.at(k, j) = static_cast<float>(book.ema_sums[static_cast<size_t>(k) * c + j] /
                                                   book.ema_counts[static_cast<size_t>(k)]);
    }
  }
  ++book.batches_seen;
}

int reset_dead_codes(Codebook& book, const Tensor& batch_rows, double threshold, int grace, Rng& rng) {
  const int c = book.dim();
  const int64_t n = batch_rows.numel() / c;
  if (n == 0) return 0;
  int resets = 0;
  for (int k = 0; k < book.size(); ++k) {
    if (book.reset_cooldown[static_cast<size_t>(k)] > 0) {
      --book.reset_cooldown[static_cast<size_t>(k)];
      continue;
    }
    if (book.batches_seen < static_cast<int64_t>(grace)) continue;
    if (book.ema_counts[static_cast<size_t>(k)] >= threshold) continue;
    // reset to a random encoder output from the current batch
    const int64_t r = rng.uniform_int(n);
    const float* src = batch_rows.data() + r * c;
    for (int j = 0; j < c; ++j) {
      book.vectors.at(k, j) = src[j];
      book.ema_sums[static_cast<size_t>(k) * c + j] = src[j];
    }
    book.ema_counts[static_cast<size_t>(k)] = 1.0;
    book.usage[static_cast<size_t>(k)] = 0;
    book.reset_cooldown[static_cast<size_t>(k)] = grace;
    ++resets;
  }
  return resets;
}

Tensor commit_loss(const EncodeRecord& record, double beta) {
  require(!record.layers.empty(), "commit_loss: empty record");
  Tensor total;
  for (const auto& layer : record.layers) {
    auto codebook_side = sum_squares(sub(layer.residual_in.detach(), layer.contribution));
    auto encoder_side = sum_squares(sub(layer.residual_in, layer.contribution.detach()));
    auto term = add(codebook_side, scale(encoder_side, static_cast<float>(beta)));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

std::vector<double> utilization(const CodebookBank& bank) {
  std::vector<double> out;
  for (const auto& book : bank.books) {
    int used = 0;
    for (int64_t u : book.usage)
      if (u > 0) ++used;
    out.push_back(static_cast<double>(used) / book.size());
  }
  return out;
}

// ---------------------------------------------------------------------------
// token-set JSON
// ---------------------------------------------------------------------------

std::string token_set_to_json(const MultiScaleTokenSet& tokens, const ScaleSchedule& schedule,
                              uint64_t bank_checksum) {
  json j;
  j["schedule"] = schedule.scales;
  j["tokens"] = tokens.layers;
  j["bank_checksum"] = hex64(bank_checksum);
  return j.dump();
}

MultiScaleTokenSet token_set_from_json(const std::string& text, const ScaleSchedule& expect_schedule) {
  json j = json::parse(text);
  const auto sched = j.at("schedule").get<std::vector<int>>();
  require(sched == expect_schedule.scales, "token set: schedule mismatch with the loaded bank");
  MultiScaleTokenSet out;
  out.layers = j.at("tokens").get<std::vector<std::vector<int32_t>>>();
  require(static_cast<int>(out.layers.size()) == expect_schedule.num_layers(), "token set: layer count mismatch");
  for (size_t i = 0; i < out.layers.size(); ++i)
    require(static_cast<int>(out.layers[i].size()) == expect_schedule.scales[i],
            "token set: layer " + std::to_string(i) + " length mismatch");
  return out;
}

}  // namespace msm
