#pragma once

// Run configuration: defaults <- JSON config file <- command-line flags.
// Unknown keys are rejected; the merged view is echoed into run.json and
// every checkpoint so any artifact can be re-derived.

#include <string>
#include <vector>

#include "msm/metrics.hpp"
#include "msm/quantizer.hpp"
#include "msm/sar.hpp"
#include "msm/vae.hpp"

namespace msm {

struct CorpusConfig {
  int n = 2000;
  int k = 8;
  uint64_t seed = 7;
  double train_ratio = 0.8, val_ratio = 0.05, test_ratio = 0.15;
  int f_min = 64, f_max = 196;
};

struct InferConfig {
  double cfg_start = 4.0;
  double cfg_end = 1.0;
  double temperature = 1.0;
  int top_k = 0;  // 0 = full distribution
};

struct RunConfig {
  uint64_t seed = 7;
  std::string out = "out";
  CorpusConfig corpus;
  std::vector<int> schedule = ScaleSchedule::default_schedule().scales;
  int q = 0;  // alternative to an explicit schedule; 0 = use `schedule`
  QuantizerConfig quantizer;
  VaeConfig vae;
  VaeTrainConfig vae_train;
  SarConfig sar;
  SarTrainConfig sar_train;
  InferConfig infer;
  EvalConfig eval;

  ScaleSchedule resolved_schedule() const;
  std::string to_json() const;
  void apply_json_text(const std::string& text);   // rejects unknown keys
  static RunConfig from_file(const std::string& path);
  void write_run_json(const std::string& dir) const;
};

struct ConfigDiagnostics {
  std::vector<std::string> errors;
  std::vector<std::string> warnings;
  bool ok() const { return errors.empty(); }
};

/// Cross-field checks plus desk-vs-paper-scale notices.
ConfigDiagnostics validate_config(const RunConfig& cfg);

}  // namespace msm
