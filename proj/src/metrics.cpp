#include "msm/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "msm/checkpoint.hpp"

namespace msm {

using nlohmann::json;

// ---------------------------------------------------------------------------
// feature extractor
// ---------------------------------------------------------------------------

FeatureExtractor FeatureExtractor::create(Rng& rng, int num_classes) {
  FeatureExtractor ex;
  ex.k_ = num_classes;
  auto conv = [&rng](int cout, int k, int cin) {
    const float sd = static_cast<float>(std::sqrt(2.0 / (k * cin)));
    return Tensor::randn(rng, {cout, k, cin}, sd).set_requires_grad(true);
  };
  ex.w1 = conv(32, 5, kFeatureDim);
  ex.b1 = Tensor::zeros({32}).set_requires_grad(true);
  ex.w2 = conv(64, 5, 32);
  ex.b2 = Tensor::zeros({64}).set_requires_grad(true);
  ex.w3 = conv(kEmbeddingDim, 3, 64);
  ex.b3 = Tensor::zeros({kEmbeddingDim}).set_requires_grad(true);
  ex.head_w = Tensor::randn(rng, {kEmbeddingDim, num_classes},
                            static_cast<float>(std::sqrt(1.0 / kEmbeddingDim)))
                  .set_requires_grad(true);
  ex.head_b = Tensor::zeros({num_classes}).set_requires_grad(true);
  return ex;
}

Tensor FeatureExtractor::embed(const Tensor& m) const {
  auto h = silu(conv1d(m, w1, b1, 2, 2));
  h = silu(conv1d(h, w2, b2, 2, 2));
  h = silu(conv1d(h, w3, b3, 1, 1));
  return mean_dim1(h);  // global average pool -> (B, 64)
}

Tensor FeatureExtractor::logits(const Tensor& m) const { return linear(embed(m), head_w, head_b); }

std::vector<float> FeatureExtractor::embed_one(const MotionSequence& m) const {
  NoGradGuard ng;
  require(m.normalized, "extractor: motion must be normalized");
  auto t = Tensor::zeros({1, m.frames, kFeatureDim});
  std::copy(m.data.begin(), m.data.end(), t.data());
  auto e = embed(t);
  return std::vector<float>(e.data(), e.data() + kEmbeddingDim);
}

ParamList FeatureExtractor::trainable_params() {
  return {{"ex.w1", w1}, {"ex.b1", b1}, {"ex.w2", w2}, {"ex.b2", b2},
          {"ex.w3", w3}, {"ex.b3", b3}, {"ex.head_w", head_w}, {"ex.head_b", head_b}};
}

void FeatureExtractor::save(const std::string& dir) const {
  ParamList tensors = const_cast<FeatureExtractor*>(this)->trainable_params();
  json meta;
  meta["kind"] = "extractor";
  meta["classes"] = k_;
  meta["embedding_dim"] = kEmbeddingDim;
  meta["val_accuracy"] = val_accuracy_;
  save_checkpoint(dir, tensors, meta.dump());
}

FeatureExtractor FeatureExtractor::load(const std::string& dir) {
  Checkpoint ckpt = load_checkpoint(dir);
  json meta = json::parse(ckpt.meta_json);
  require(meta.value("kind", "") == "extractor", "load: '" + dir + "' is not an extractor checkpoint");
  Rng rng(0);
  FeatureExtractor ex = create(rng, meta.at("classes").get<int>());
  ex.val_accuracy_ = meta.value("val_accuracy", 0.0);
  for (auto& p : ex.trainable_params()) p.tensor.values() = ckpt.get(p.name).values();
  return ex;
}

double FeatureExtractor::accuracy(const FeatureExtractor& ex, const Corpus& corpus, Split split) {
  NoGradGuard ng;
  int correct = 0, total = 0;
  for (const auto& item : corpus.items) {
    if (item.split != split) continue;
    auto t = Tensor::zeros({1, item.motion.frames, kFeatureDim});
    std::copy(item.motion.data.begin(), item.motion.data.end(), t.data());
    auto lg = ex.logits(t);
    int arg = 0;
    for (int j = 1; j < ex.k_; ++j)
      if (lg.at(0, j) > lg.at(0, arg)) arg = j;
    correct += arg == item.condition.label_id;
    ++total;
  }
  require(total > 0, "extractor accuracy: empty split");
  return static_cast<double>(correct) / total;
}

FeatureExtractor FeatureExtractor::train(const Corpus& corpus, const ExtractorTrainConfig& cfg,
                                         const std::function<void(int64_t, double)>& heartbeat) {
  require(corpus.stats.has_value(), "extractor: corpus must be normalized");
  auto train_idx = corpus.indices_of(Split::kTrain);
  require(!train_idx.empty(), "extractor: empty train split");
  Rng rng(cfg.seed);
  FeatureExtractor ex = create(rng, corpus.num_classes());

  ParamList params = ex.trainable_params();
  AdamW::Config ocfg;
  ocfg.lr_target = cfg.lr_target;
  ocfg.warmup_steps = cfg.warmup_steps;
  AdamW opt(ocfg);

  for (int64_t step = 1; step <= cfg.steps; ++step) {
    // random temporal crop per batch keeps the embedding length-robust
    const int bsz = cfg.batch_size;
    int crop = 32 + 4 * static_cast<int>(rng.uniform_int(17));  // 32..96
    auto batch = Tensor::zeros({bsz, crop, kFeatureDim});
    std::vector<int32_t> labels(static_cast<size_t>(bsz));
    for (int bi = 0; bi < bsz; ++bi) {
      const auto& item =
          corpus.items[static_cast<size_t>(train_idx[static_cast<size_t>(rng.uniform_int(
              static_cast<int64_t>(train_idx.size())))])];
      const int f0 = item.motion.frames > crop
                         ? static_cast<int>(rng.uniform_int(item.motion.frames - crop + 1))
                         : 0;
      const int n = std::min(crop, item.motion.frames);
      for (int f = 0; f < n; ++f)
        for (int d = 0; d < kFeatureDim; ++d) batch.at(bi, f, d) = item.motion.at(f0 + f, d);
      for (int f = n; f < crop; ++f)
        for (int d = 0; d < kFeatureDim; ++d) batch.at(bi, f, d) = item.motion.at(item.motion.frames - 1, d);
      labels[static_cast<size_t>(bi)] = item.condition.label_id;
    }
    auto loss = cross_entropy_mean(ex.logits(batch), IntArray({bsz}, labels));
    opt.zero_grad(params);
    loss.backward();
    opt.step(params);
    if (heartbeat && (step % 50 == 0 || step == 1)) heartbeat(step, loss.at(0));
  }
  ex.val_accuracy_ = accuracy(ex, corpus, Split::kVal);
  require(ex.val_accuracy_ >= cfg.accuracy_gate,
          "extractor: held-out accuracy " + std::to_string(ex.val_accuracy_) + " is below the gate " +
              std::to_string(cfg.accuracy_gate) + "; metrics refuse to run (train longer or fix the corpus)");
  return ex;
}

// ---------------------------------------------------------------------------
// Frechet distance
// ---------------------------------------------------------------------------

namespace {

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major d x d).
/// Returns eigenvalues; eigenvectors land in v (columns).
void jacobi_eigen(std::vector<double>& a, std::vector<double>& v, std::vector<double>& eig, int d) {
  v.assign(static_cast<size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i) v[static_cast<size_t>(i) * d + i] = 1.0;
  auto A = [&a, d](int i, int j) -> double& { return a[static_cast<size_t>(i) * d + j]; };
  auto V = [&v, d](int i, int j) -> double& { return v[static_cast<size_t>(i) * d + j]; };
  for (int sweep = 0; sweep < 32; ++sweep) {
    double off = 0.0;
    for (int i = 0; i < d; ++i)
      for (int j = i + 1; j < d; ++j) off += A(i, j) * A(i, j);
    if (off < 1e-22) break;
    for (int p = 0; p < d - 1; ++p)
      for (int q = p + 1; q < d; ++q) {
        if (std::abs(A(p, q)) < 1e-300) continue;
        const double theta = (A(q, q) - A(p, p)) / (2.0 * A(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (int i = 0; i < d; ++i) {
          const double aip = A(i, p), aiq = A(i, q);
          A(i, p) = c * aip - s * aiq;
          A(i, q) = s * aip + c * aiq;
        }
        for (int i = 0; i < d; ++i) {
          const double api = A(p, i), aqi = A(q, i);
          A(p, i) = c * api - s * aqi;
          A(q, i) = s * api + c * aqi;
        }
        for (int i = 0; i < d; ++i) {
          const double vip = V(i, p), viq = V(i, q);
          V(i, p) = c * vip - s * viq;
          V(i, q) = s * vip + c * viq;
        }
      }
  }
  eig.resize(static_cast<size_t>(d));
  for (int i = 0; i < d; ++i) eig[static_cast<size_t>(i)] = a[static_cast<size_t>(i) * d + i];
}

/// PSD square root via eigendecomposition, negative eigenvalues clipped at 0.
std::vector<double> psd_sqrt(std::vector<double> m, int d) {
  std::vector<double> v, eig;
  jacobi_eigen(m, v, eig, d);
  for (auto& e : eig) e = e > 0 ? std::sqrt(e) : 0.0;
  std::vector<double> out(static_cast<size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      double acc = 0.0;
      for (int k = 0; k < d; ++k)
        acc += v[static_cast<size_t>(i) * d + k] * eig[static_cast<size_t>(k)] * v[static_cast<size_t>(j) * d + k];
      out[static_cast<size_t>(i) * d + j] = acc;
    }
  return out;
}

std::vector<double> matmul_d(const std::vector<double>& a, const std::vector<double>& b, int d) {
  std::vector<double> out(static_cast<size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i)
    for (int k = 0; k < d; ++k) {
      const double av = a[static_cast<size_t>(i) * d + k];
      if (av == 0.0) continue;
      for (int j = 0; j < d; ++j) out[static_cast<size_t>(i) * d + j] += av * b[static_cast<size_t>(k) * d + j];
    }
  return out;
}

}  // namespace

double frechet_from_moments(const std::vector<double>& mu_a, const std::vector<double>& cov_a,
                            const std::vector<double>& mu_b, const std::vector<double>& cov_b, int dim) {
  require(static_cast<int>(mu_a.size()) == dim && static_cast<int>(mu_b.size()) == dim,
          "frechet: mean dimension mismatch");
  require(static_cast<int>(cov_a.size()) == dim * dim && static_cast<int>(cov_b.size()) == dim * dim,
          "frechet: covariance dimension mismatch");

  double mean_term = 0.0;
  for (int i = 0; i < dim; ++i) {
    const double d = mu_a[static_cast<size_t>(i)] - mu_b[static_cast<size_t>(i)];
    mean_term += d * d;
  }

  // ridge for singular covariances
  auto ca = cov_a, cb = cov_b;
  auto trace = [dim](const std::vector<double>& m) {
    double t = 0.0;
    for (int i = 0; i < dim; ++i) t += m[static_cast<size_t>(i) * dim + i];
    return t;
  };
  {
    std::vector<double> tmp = ca, v, eig;
    jacobi_eigen(tmp, v, eig, dim);
    double mn = eig.empty() ? 0.0 : *std::min_element(eig.begin(), eig.end());
    std::vector<double> tmpb = cb;
    jacobi_eigen(tmpb, v, eig, dim);
    mn = std::min(mn, eig.empty() ? 0.0 : *std::min_element(eig.begin(), eig.end()));
    if (mn < 1e-10) {
      static thread_local bool warned = false;
      if (!warned) {
        std::cerr << "[metrics] note: near-singular covariance, adding 1e-6 ridge\n";
        warned = true;
      }
      for (int i = 0; i < dim; ++i) {
        ca[static_cast<size_t>(i) * dim + i] += 1e-6;
        cb[static_cast<size_t>(i) * dim + i] += 1e-6;
      }
    }
  }

  // tr((Sa Sb)^(1/2)) computed symmetrically as tr((Sa^1/2 Sb Sa^1/2)^1/2)
  auto sqrt_a = psd_sqrt(ca, dim);
  auto inner = matmul_d(matmul_d(sqrt_a, cb, dim), sqrt_a, dim);
  // symmetrize against round-off before the second root
  for (int i = 0; i < dim; ++i)
    for (int j = i + 1; j < dim; ++j) {
      const double m = 0.5 * (inner[static_cast<size_t>(i) * dim + j] + inner[static_cast<size_t>(j) * dim + i]);
      inner[static_cast<size_t>(i) * dim + j] = m;
      inner[static_cast<size_t>(j) * dim + i] = m;
    }
  auto cross_sqrt = psd_sqrt(inner, dim);
  const double value = mean_term + trace(ca) + trace(cb) - 2.0 * trace(cross_sqrt);
  return value > 0 ? value : 0.0;
}

double desk_fid(const std::vector<std::vector<float>>& set_a, const std::vector<std::vector<float>>& set_b) {
  require(set_a.size() >= 2 && set_b.size() >= 2, "desk_fid: each set needs at least 2 samples");
  const int d = static_cast<int>(set_a[0].size());
  auto moments = [d](const std::vector<std::vector<float>>& set, std::vector<double>& mu,
                     std::vector<double>& cov) {
    const int n = static_cast<int>(set.size());
    mu.assign(static_cast<size_t>(d), 0.0);
    for (const auto& row : set)
      for (int i = 0; i < d; ++i) mu[static_cast<size_t>(i)] += row[static_cast<size_t>(i)];
    for (auto& m : mu) m /= n;
    cov.assign(static_cast<size_t>(d) * d, 0.0);
    for (const auto& row : set)
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
          cov[static_cast<size_t>(i) * d + j] +=
              (row[static_cast<size_t>(i)] - mu[static_cast<size_t>(i)]) *
              (row[static_cast<size_t>(j)] - mu[static_cast<size_t>(j)]);
    for (auto& c : cov) c /= (n - 1);
  };
  std::vector<double> mu_a, cov_a, mu_b, cov_b;
  moments(set_a, mu_a, cov_a);
  moments(set_b, mu_b, cov_b);
  return frechet_from_moments(mu_a, cov_a, mu_b, cov_b, d);
}

// ---------------------------------------------------------------------------
// retrieval / diversity
// ---------------------------------------------------------------------------

std::vector<std::vector<float>> class_prototypes(const FeatureExtractor& ex, const Corpus& corpus,
                                                 Split split) {
  std::vector<std::vector<double>> acc(static_cast<size_t>(corpus.num_classes()),
                                       std::vector<double>(kEmbeddingDim, 0.0));
  std::vector<int> counts(static_cast<size_t>(corpus.num_classes()), 0);
  for (const auto& item : corpus.items) {
    if (item.split != split) continue;
    auto e = ex.embed_one(item.motion);
    auto& a = acc[static_cast<size_t>(item.condition.label_id)];
    for (int i = 0; i < kEmbeddingDim; ++i) a[static_cast<size_t>(i)] += e[static_cast<size_t>(i)];
    ++counts[static_cast<size_t>(item.condition.label_id)];
  }
  std::vector<std::vector<float>> out;
  for (size_t k = 0; k < acc.size(); ++k) {
    require(counts[k] > 0, "prototypes: class " + std::to_string(k) + " has no items in the split");
    std::vector<float> p(kEmbeddingDim);
    for (int i = 0; i < kEmbeddingDim; ++i)
      p[static_cast<size_t>(i)] = static_cast<float>(acc[k][static_cast<size_t>(i)] / counts[k]);
    out.push_back(std::move(p));
  }
  return out;
}

namespace {

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  double dot = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  const double denom = std::sqrt(na) * std::sqrt(nb);
  return denom > 0 ? dot / denom : 0.0;
}

double euclid(const std::vector<float>& a, const std::vector<float>& b) {
  double s = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace

RPrecision r_precision_lite(const std::vector<std::vector<float>>& embeddings, const std::vector<int>& labels,
                            const std::vector<std::vector<float>>& prototypes, uint64_t seed, int pool) {
  const int n = static_cast<int>(embeddings.size());
  require(n == static_cast<int>(labels.size()), "r_precision: label count mismatch");
  require(n >= 2, "r_precision: need at least 2 items");
  Rng rng(seed);
  RPrecision res;
  res.reduced_pool = n < pool;
  int evaluated = 0;
  for (int i = 0; i < n; ++i) {
    const int label = labels[static_cast<size_t>(i)];
    std::vector<int> others;
    for (int j = 0; j < n; ++j)
      if (labels[static_cast<size_t>(j)] != label) others.push_back(j);
    if (others.empty()) continue;  // no valid distractors for this item
    const int distractors = std::min(pool, n) - 1;
    const double true_affinity = cosine(embeddings[static_cast<size_t>(i)], prototypes[static_cast<size_t>(label)]);
    int beaten_by = 0;
    for (int d = 0; d < distractors; ++d) {
      const int j = others[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(others.size())))];
      if (cosine(embeddings[static_cast<size_t>(j)], prototypes[static_cast<size_t>(label)]) > true_affinity)
        ++beaten_by;
    }
    const int rank = 1 + beaten_by;
    res.top1 += rank <= 1;
    res.top2 += rank <= 2;
    res.top3 += rank <= 3;
    ++evaluated;
  }
  require(evaluated > 0, "r_precision: no item had other-class distractors");
  res.top1 /= evaluated;
  res.top2 /= evaluated;
  res.top3 /= evaluated;
  return res;
}

double mm_dist_lite(const std::vector<std::vector<float>>& embeddings, const std::vector<int>& labels,
                    const std::vector<std::vector<float>>& prototypes) {
  require(!embeddings.empty(), "mm_dist: empty set");
  double total = 0;
  for (size_t i = 0; i < embeddings.size(); ++i)
    total += euclid(embeddings[i], prototypes[static_cast<size_t>(labels[i])]);
  return total / static_cast<double>(embeddings.size());
}

double multimodality(const std::vector<std::vector<std::vector<float>>>& per_condition_embeddings) {
  require(!per_condition_embeddings.empty(), "multimodality: no conditions");
  double total = 0;
  int conditions = 0;
  for (const auto& group : per_condition_embeddings) {
    const int m = static_cast<int>(group.size());
    if (m < 2) continue;
    double s = 0;
    int pairs = 0;
    for (int i = 0; i < m; ++i)
      for (int j = i + 1; j < m; ++j) {
        s += euclid(group[static_cast<size_t>(i)], group[static_cast<size_t>(j)]);
        ++pairs;
      }
    total += s / pairs;
    ++conditions;
  }
  require(conditions > 0, "multimodality: need at least 2 generations per condition");
  return total / conditions;
}

AitResult measure_ait(const std::function<void()>& run, int n) {
  require(n >= 1, "measure_ait: n must be >= 1");
  const int warmup = n > 1 ? 5 : 0;
  for (int i = 0; i < warmup; ++i) run();
  AitResult res;
  res.samples = n;
  for (int i = 0; i < n; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    run();
    const auto t1 = std::chrono::steady_clock::now();
    res.per_sample.push_back(std::chrono::duration<double>(t1 - t0).count());
  }
  double sum = 0;
  for (double t : res.per_sample) sum += t;
  res.mean_seconds = sum / n;
  double var = 0;
  for (double t : res.per_sample) var += (t - res.mean_seconds) * (t - res.mean_seconds);
  res.std_seconds = n > 1 ? std::sqrt(var / (n - 1)) : 0.0;
  return res;
}

// ---------------------------------------------------------------------------
// evaluation protocol
// ---------------------------------------------------------------------------

namespace {

MetricValue aggregate(const std::vector<double>& vals) {
  MetricValue v;
  const int n = static_cast<int>(vals.size());
  for (double x : vals) v.mean += x;
  v.mean /= n;
  if (n > 1) {
    double var = 0;
    for (double x : vals) var += (x - v.mean) * (x - v.mean);
    v.ci_halfwidth = 1.96 * std::sqrt(var / (n - 1)) / std::sqrt(static_cast<double>(n));
  }
  return v;
}

}  // namespace

MetricReport run_evaluation(const Generator& gen, const FeatureExtractor& ex, const Corpus& corpus,
                            const EvalConfig& cfg,
                            const std::function<void(const std::string&)>& progress) {
  require(cfg.repeats >= 1, "eval: repeats must be >= 1");
  auto test_idx = corpus.indices_of(Split::kTest);
  require(!test_idx.empty(), "eval: empty test split");
  auto protos = class_prototypes(ex, corpus, Split::kTrain);

  // real-set embeddings, fixed across repeats
  std::vector<std::vector<float>> real_emb;
  for (int i : test_idx) real_emb.push_back(ex.embed_one(corpus.items[static_cast<size_t>(i)].motion));

  MetricReport report;
  report.n_samples = cfg.samples_per_repeat;
  report.repeats = cfg.repeats;
  report.seed = cfg.seed;
  report.protocol_note =
      "retrieval uses class-prototype cosine affinity in the desk extractor embedding space "
      "(replaces the external joint text-motion embedding of the standard protocol)";

  std::vector<double> fids, r1s, r2s, r3s, mms, mmods;
  for (int rep = 0; rep < cfg.repeats; ++rep) {
    Rng rng = Rng(cfg.seed).split(3000 + static_cast<uint64_t>(rep));
    // draw conditions from the test split
    std::vector<std::vector<int>> phrases;
    std::vector<int> labels;
    for (int i = 0; i < cfg.samples_per_repeat; ++i) {
      const auto& item =
          corpus.items[static_cast<size_t>(test_idx[static_cast<size_t>(rng.uniform_int(
              static_cast<int64_t>(test_idx.size())))])];
      phrases.push_back(item.condition.phrase);
      labels.push_back(item.condition.label_id);
    }
    GenerateOptions opt;
    opt.sampler = cfg.sampler;
    opt.cfg = cfg.cfg;
    opt.seed = rng.split(1).state();
    auto token_sets = gen.generate_tokens(phrases, opt);
    std::vector<std::vector<float>> emb;
    for (const auto& ts : token_sets) {
      auto motion = gen.decode_tokens(ts);
      normalize_sequence(motion, gen.vae().stats());
      emb.push_back(ex.embed_one(motion));
    }
    fids.push_back(desk_fid(emb, real_emb));
    auto rp = r_precision_lite(emb, labels, protos, rng.split(2).state());
    report.reduced_pool |= rp.reduced_pool;
    r1s.push_back(rp.top1);
    r2s.push_back(rp.top2);
    r3s.push_back(rp.top3);
    mms.push_back(mm_dist_lite(emb, labels, protos));

    // multimodality: repeated stochastic generations per condition
    std::vector<std::vector<std::vector<float>>> groups;
    for (int ci = 0; ci < cfg.multimodality_conditions; ++ci) {
      const auto& item =
          corpus.items[static_cast<size_t>(test_idx[static_cast<size_t>(rng.uniform_int(
              static_cast<int64_t>(test_idx.size())))])];
      std::vector<std::vector<int>> reps(static_cast<size_t>(cfg.multimodality_per_condition),
                                         item.condition.phrase);
      GenerateOptions mopt = opt;
      mopt.seed = rng.split(100 + static_cast<uint64_t>(ci)).state();
      auto sets = gen.generate_tokens(reps, mopt);
      std::vector<std::vector<float>> group;
      for (const auto& ts : sets) {
        auto motion = gen.decode_tokens(ts);
        normalize_sequence(motion, gen.vae().stats());
        group.push_back(ex.embed_one(motion));
      }
      groups.push_back(std::move(group));
    }
    mmods.push_back(multimodality(groups));
    report.repeat_values.push_back(
        {fids.back(), r1s.back(), r2s.back(), r3s.back(), mms.back(), mmods.back()});
    if (progress)
      progress("repeat " + std::to_string(rep + 1) + "/" + std::to_string(cfg.repeats) + " fid=" +
               std::to_string(fids.back()) + " r1=" + std::to_string(r1s.back()));
  }

  report.fid = aggregate(fids);
  report.r1 = aggregate(r1s);
  report.r2 = aggregate(r2s);
  report.r3 = aggregate(r3s);
  report.mm_dist = aggregate(mms);
  report.multimodality = aggregate(mmods);

  if (cfg.ait_samples > 0) {
    const auto& phrase = corpus.items[static_cast<size_t>(test_idx[0])].condition.phrase;
    GenerateOptions opt;
    opt.sampler = cfg.sampler;
    opt.cfg = cfg.cfg;
    uint64_t counter = 0;
    report.ait = measure_ait(
        [&]() {
          GenerateOptions o = opt;
          o.seed = cfg.seed + (counter++);
          gen.generate(phrase, o);
        },
        cfg.ait_samples);
  }
  return report;
}

StepwiseResult stepwise_eval(const Generator& gen, const FeatureExtractor& ex, const Corpus& corpus,
                             int n_samples, uint64_t seed, const SamplerConfig& sampler,
                             const CfgSchedule& cfg) {
  auto test_idx = corpus.indices_of(Split::kTest);
  require(!test_idx.empty(), "stepwise: empty test split");
  auto protos = class_prototypes(ex, corpus, Split::kTrain);
  std::vector<std::vector<float>> real_emb;
  for (int i : test_idx) real_emb.push_back(ex.embed_one(corpus.items[static_cast<size_t>(i)].motion));

  Rng rng(seed);
  std::vector<std::vector<int>> phrases;
  std::vector<int> labels;
  for (int i = 0; i < n_samples; ++i) {
    const auto& item = corpus.items[static_cast<size_t>(
        test_idx[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(test_idx.size())))])];
    phrases.push_back(item.condition.phrase);
    labels.push_back(item.condition.label_id);
  }
  GenerateOptions opt;
  opt.sampler = sampler;
  opt.cfg = cfg;
  opt.seed = seed + 17;
  auto token_sets = gen.generate_tokens(phrases, opt);

  StepwiseResult res;
  const int q = gen.sar().schedule().num_layers();
  for (int step = 1; step <= q; ++step) {
    std::vector<std::vector<float>> emb;
    for (const auto& ts : token_sets) {
      NoGradGuard ng;
      auto m = gen.vae().detokenize({ts}, step);
      MotionSequence seq;
      seq.id = "step";
      seq.fps = gen.vae().fps();
      seq.frames = m.dim(1);
      seq.normalized = true;
      seq.data.assign(m.data(), m.data() + m.numel());
      emb.push_back(ex.embed_one(seq));
    }
    res.fid_per_step.push_back(desk_fid(emb, real_emb));
    if (step == 1 || step == q) {
      auto rp = r_precision_lite(emb, labels, protos, seed + 23);
      if (step == 1)
        res.top1_first = rp.top1;
      else
        res.top1_last = rp.top1;
    }
  }
  return res;
}

double boundary_velocity(const MotionSequence& edited, const EditMask& mask) {
  // latent mask positions map to 4-frame spans; measure |delta| across the
  // frame boundaries where generate/keep flips
  const int t = mask.size();
  double total = 0;
  int count = 0;
  for (int i = 0; i + 1 < t; ++i) {
    if (mask.generate[static_cast<size_t>(i)] == mask.generate[static_cast<size_t>(i + 1)]) continue;
    const int f = std::min((i + 1) * 4, edited.frames - 1);
    for (int d = 0; d < edited.features; ++d) {
      total += std::abs(edited.at(f, d) - edited.at(f - 1, d));
      ++count;
    }
  }
  require(count > 0, "boundary_velocity: mask has no boundaries");
  return total / count;
}

// ---------------------------------------------------------------------------
// report serialization
// ---------------------------------------------------------------------------

std::string MetricReport::to_json(const std::string& run_config_json) const {
  json j;
  auto mv = [](const MetricValue& v) { return json{{"mean", v.mean}, {"ci95", v.ci_halfwidth}}; };
  j["fid"] = mv(fid);
  j["r_precision"] = {{"top1", mv(r1)}, {"top2", mv(r2)}, {"top3", mv(r3)}};
  j["mm_dist_lite"] = mv(mm_dist);
  j["multimodality"] = mv(multimodality);
  if (ait.samples > 0)
    j["ait_seconds"] = {{"mean", ait.mean_seconds}, {"std", ait.std_seconds}, {"samples", ait.samples}};
  j["n_samples"] = n_samples;
  j["repeats"] = repeats;
  j["seed"] = seed;
  j["reduced_pool"] = reduced_pool;
  j["protocol_note"] = protocol_note;
  j["build_id"] = build_id;
  if (!run_config_json.empty()) j["run_config"] = json::parse(run_config_json);
  return j.dump(2);
}

std::string MetricReport::per_repeat_csv() const {
  std::ostringstream os;
  os << "repeat,fid,top1,top2,top3,mm_dist_lite,multimodality\n";
  for (size_t i = 0; i < repeat_values.size(); ++i) {
    os << i;
    for (double v : repeat_values[i]) os << "," << v;
    os << "\n";
  }
  return os.str();
}

}  // namespace msm
