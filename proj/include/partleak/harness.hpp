#pragma once

// Experiment driver: backbone pretraining, late/early probing benchmark,
// part-model training and evaluation, run provenance and report tables.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "partleak/leakmetrics.hpp"
#include "partleak/params.hpp"
#include "partleak/partmodel.hpp"
#include "partleak/synthgen.hpp"
#include "partleak/vit.hpp"

namespace partleak::harness {

struct ExperimentConfig {
  synth::DatasetSpec data;
  bool data_seed_set = false;  // otherwise the dataset follows `seed`
  vit::ViTConfig vit;
  std::size_t parts = 4;  // K discovered parts
  partmodel::LossConfig loss;
  double temperature = 1.0;

  std::size_t epochs = 30;
  std::size_t pretrain_epochs = 30;
  std::size_t batch = 64;
  std::size_t base_batch = 64;
  double lr = 1e-3;        // shared LayerNorms and attribute heads
  double proto_lr = 1e-3;  // part prototypes
  double backbone_lr = 1e-4;  // stage-2 ViT
  double pretrain_lr = 1e-3;
  double clip = 2.0;
  double weight_decay = 0.05;

  std::size_t probe_epochs = 200;
  double probe_lr = 1e-2;
  double tau = 0.25;
  leak::KStarMode kstar = leak::KStarMode::PerSample;

  std::uint64_t seed = 0;

  void validate() const;
  /// Dataset spec with the effective seed applied.
  synth::DatasetSpec dataset_spec() const;
};

/// Flat JSON object; unknown keys are rejected.
ExperimentConfig config_from_json(const std::string& text);
void apply_config_json(ExperimentConfig& cfg, const std::string& text);
/// Canonical JSON (sorted keys) of every field.
std::string config_to_json(const ExperimentConfig& cfg);
/// FNV-1a 64 of the canonical JSON, as 16 hex digits.
std::string config_hash(const ExperimentConfig& cfg);

using Logger = std::function<void(const std::string&)>;

// ---- pretraining ----------------------------------------------------------

struct PretrainEpoch {
  std::size_t epoch;
  double loss, grad_norm;
};

struct PretrainResult {
  ParamStore backbone;  // ViT only, group "backbone"
  ParamStore head;      // CLS LayerNorm + linear attribute head
  std::vector<PretrainEpoch> curve;
  double train_map = 0.0, test_map = 0.0;
};

/// Trains the ViT with full attention to predict every attribute from the
/// CLS token.
PretrainResult pretrain_backbone(const ExperimentConfig& cfg, const synth::Dataset& ds, const Logger& log = {});
/// mAP of the CLS head on a split.
double cls_map(const ParamStore& backbone, const ParamStore& head, const vit::ViTConfig& vcfg, const synth::Split& split,
               const leak::AttributeSpec& spec);

// ---- probing benchmark ---------------------------------------------------

struct ModeResult {
  leak::ProbeMatrix matrix;
  leak::PSReport ps;
  leak::MPPOReport mppo;
};

struct BenchmarkResult {
  ModeResult late, early;
  leak::PartAssignment assignment;
  std::vector<double> mask_area;  // mean fraction of patches per part
  double prevalence = 0.0;        // mean attribute prevalence on the test split
  std::vector<std::string> warnings;
};

/// Ground-truth part masks, frozen backbone, probes per part, PS and MPPO
/// for late and early masking.
BenchmarkResult run_benchmark(const ExperimentConfig& cfg, const synth::Dataset& ds, const ParamStore& backbone,
                              const Logger& log = {});

// ---- part model ----------------------------------------------------------

struct TrainEpoch {
  std::size_t epoch;
  partmodel::LossBreakdown loss;  // batch means
};

struct EvalResult {
  double map_stage1 = 0.0, map_stage2 = 0.0, map_ensemble = 0.0;
  double nmi = 0.0, ari = 0.0, mppo = 0.0;
  std::vector<double> mask_area;     // per discovered part, foreground and background
  std::vector<double> presence_max;  // per part: max activation over the split
  std::vector<std::string> warnings;
};

struct TrainResult {
  ParamStore model;  // stage 1 (+ stage 2) parameters
  std::vector<TrainEpoch> curve;
  partmodel::LossBreakdown first_step;  // loss at step 0, before any update
  EvalResult eval;
};

/// Full parameter set for training: frozen backbone under "bb.", stage 1,
/// and stage 2 for two-stage variants.
ParamStore build_model(const ExperimentConfig& cfg, const ParamStore& backbone, std::size_t attributes,
                       partmodel::Variant variant, Rng& rng);

TrainResult train_model(const ExperimentConfig& cfg, const synth::Dataset& ds, const ParamStore& backbone,
                        partmodel::Variant variant, const Logger& log = {});
EvalResult evaluate_model(const ExperimentConfig& cfg, const synth::Dataset& ds, const ParamStore& model,
                          partmodel::Variant variant, const Logger& log = {});

// ---- artifacts ---------------------------------------------------------------

/// Fixed formatting for every number written to CSV.
std::string fmt(double v);

void write_text(const std::filesystem::path& p, const std::string& text);
std::string read_text(const std::filesystem::path& p);

/// Library and toolchain versions recorded in run.json.
std::map<std::string, std::string> versions();

/// run.json with command, config, config hash, seed and versions.
void write_run_record(const std::filesystem::path& dir, const std::string& command, const ExperimentConfig& cfg,
                      const std::map<std::string, std::string>& extra = {});

/// run.json of a report directory: input runs with their summary CRC-32.
void write_report_record(const std::filesystem::path& dir, const std::vector<std::filesystem::path>& runs);

void write_pretrain_artifacts(const std::filesystem::path& dir, const PretrainResult& r);
void write_benchmark_artifacts(const std::filesystem::path& dir, const BenchmarkResult& r,
                               const leak::AttributeSpec& spec);
void write_train_artifacts(const std::filesystem::path& dir, const TrainResult& r, partmodel::Variant variant);

/// Aggregates summary.csv of each run dir into report.csv (rows keyed by
/// command/variant and metric, mean and sample std over runs).
std::string make_report(const std::vector<std::filesystem::path>& runs);

const char* version();

/// Keeps freed tape buffers in the heap instead of returning them to the
/// OS after every step (glibc only; no-op elsewhere).
void tune_allocator();

}  // namespace partleak::harness
