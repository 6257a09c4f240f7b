#include "partleak/harness.hpp"

#include <zlib.h>

#include <cstdlib>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "partleak/ops.hpp"
#include "partleak/optim.hpp"
#include "partleak/probe.hpp"

namespace partleak::harness {

using nlohmann::json;

const char* version() { return "0.1.0"; }

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 << 20);  // glibc maximum
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

// ---- config --------------------------------------------------------------

void ExperimentConfig::validate() const {
  data.validate();
  vit.validate();
  loss.validate();
  if (vit.image_size != data.image_size || vit.patch_size != data.patch_size) {
    throw ValidationError("config: model and dataset disagree on image or patch size");
  }
  if (parts == 0) throw ValidationError("config: parts must be >= 1");
  if (!(temperature > 0)) throw ValidationError("config: temperature must be > 0");
  if (batch == 0 || base_batch == 0) throw ValidationError("config: batch sizes must be positive");
  for (double r : {lr, proto_lr, backbone_lr, pretrain_lr, probe_lr}) {
    if (!(r >= 0) || !std::isfinite(r)) throw ValidationError("config: learning rates must be finite and >= 0");
  }
  if (!(clip >= 0) || !(weight_decay >= 0)) throw ValidationError("config: clip and weight_decay must be >= 0");
  if (!(tau >= 0 && tau < 1)) throw ValidationError("config: tau must lie in [0, 1)");
}

synth::DatasetSpec ExperimentConfig::dataset_spec() const {
  synth::DatasetSpec s = data;
  if (!data_seed_set) s.seed = seed;
  return s;
}

namespace {

std::size_t as_size(const json& v, const std::string& k) {
  if (!v.is_number_unsigned()) throw ValidationError("config key '" + k + "' must be a non-negative integer");
  return v.get<std::size_t>();
}

double as_double(const json& v, const std::string& k) {
  if (!v.is_number()) throw ValidationError("config key '" + k + "' must be a number");
  return v.get<double>();
}

std::string as_string(const json& v, const std::string& k) {
  if (!v.is_string()) throw ValidationError("config key '" + k + "' must be a string");
  return v.get<std::string>();
}

}  // namespace

void apply_config_json(ExperimentConfig& c, const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("config must be a flat JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const json& v = it.value();
    if (k == "gt_parts") c.data.parts = as_size(v, k);
    else if (k == "colors") c.data.colors = as_size(v, k);
    else if (k == "rho") c.data.rho = as_double(v, k);
    else if (k == "n_train") c.data.n_train = as_size(v, k);
    else if (k == "n_val") c.data.n_val = as_size(v, k);
    else if (k == "n_test") c.data.n_test = as_size(v, k);
    else if (k == "image_size") c.data.image_size = c.vit.image_size = as_size(v, k);
    else if (k == "patch_size") c.data.patch_size = c.vit.patch_size = as_size(v, k);
    else if (k == "margin") c.data.margin = as_size(v, k);
    else if (k == "noise_std") c.data.noise_std = as_double(v, k);
    else if (k == "background") c.data.background = as_double(v, k);
    else if (k == "data_seed") {
      c.data.seed = as_size(v, k);
      c.data_seed_set = true;
    }
    else if (k == "embed_dim") c.vit.embed_dim = as_size(v, k);
    else if (k == "depth") c.vit.depth = as_size(v, k);
    else if (k == "heads") c.vit.heads = as_size(v, k);
    else if (k == "num_registers") c.vit.num_registers = as_size(v, k);
    else if (k == "mlp_ratio") c.vit.mlp_ratio = as_size(v, k);
    else if (k == "parts") c.parts = as_size(v, k);
    else if (k == "temperature") c.temperature = as_double(v, k);
    else if (k == "lambda_orth") c.loss.lambda_orth = as_double(v, k);
    else if (k == "lambda_tv") c.loss.lambda_tv = as_double(v, k);
    else if (k == "lambda_eq") c.loss.lambda_eq = as_double(v, k);
    else if (k == "lambda_p") c.loss.lambda_p = as_double(v, k);
    else if (k == "lambda_ent") c.loss.lambda_ent = as_double(v, k);
    else if (k == "ortho_eps") c.loss.eps = as_double(v, k);
    else if (k == "ortho_variant") {
      const std::string s = as_string(v, k);
      if (s == "decorrelated") c.loss.ortho = partmodel::OrthoVariant::Decorrelated;
      else if (s == "legacy") c.loss.ortho = partmodel::OrthoVariant::Legacy;
      else throw ValidationError("ortho_variant must be 'decorrelated' or 'legacy'");
    }
    else if (k == "epochs") c.epochs = as_size(v, k);
    else if (k == "pretrain_epochs") c.pretrain_epochs = as_size(v, k);
    else if (k == "batch") c.batch = as_size(v, k);
    else if (k == "base_batch") c.base_batch = as_size(v, k);
    else if (k == "lr") c.lr = as_double(v, k);
    else if (k == "proto_lr") c.proto_lr = as_double(v, k);
    else if (k == "backbone_lr") c.backbone_lr = as_double(v, k);
    else if (k == "pretrain_lr") c.pretrain_lr = as_double(v, k);
    else if (k == "clip") c.clip = as_double(v, k);
    else if (k == "weight_decay") c.weight_decay = as_double(v, k);
    else if (k == "probe_epochs") c.probe_epochs = as_size(v, k);
    else if (k == "probe_lr") c.probe_lr = as_double(v, k);
    else if (k == "tau") c.tau = as_double(v, k);
    else if (k == "kstar") {
      const std::string s = as_string(v, k);
      if (s == "per_sample") c.kstar = leak::KStarMode::PerSample;
      else if (s == "per_attribute_mean") c.kstar = leak::KStarMode::PerAttributeMean;
      else throw ValidationError("kstar must be 'per_sample' or 'per_attribute_mean'");
    }
    else if (k == "seed") c.seed = as_size(v, k);
    else throw ValidationError("unknown config key '" + k + "'");
  }
}

ExperimentConfig config_from_json(const std::string& text) {
  ExperimentConfig c;
  apply_config_json(c, text);
  c.validate();
  return c;
}

namespace {

json config_json(const ExperimentConfig& c) {
  json j;
  j["gt_parts"] = c.data.parts;
  j["colors"] = c.data.colors;
  j["rho"] = c.data.rho;
  j["n_train"] = c.data.n_train;
  j["n_val"] = c.data.n_val;
  j["n_test"] = c.data.n_test;
  j["image_size"] = c.data.image_size;
  j["patch_size"] = c.data.patch_size;
  j["margin"] = c.data.margin;
  j["noise_std"] = c.data.noise_std;
  j["background"] = c.data.background;
  j["data_seed"] = c.dataset_spec().seed;
  j["embed_dim"] = c.vit.embed_dim;
  j["depth"] = c.vit.depth;
  j["heads"] = c.vit.heads;
  j["num_registers"] = c.vit.num_registers;
  j["mlp_ratio"] = c.vit.mlp_ratio;
  j["parts"] = c.parts;
  j["temperature"] = c.temperature;
  j["lambda_orth"] = c.loss.lambda_orth;
  j["lambda_tv"] = c.loss.lambda_tv;
  j["lambda_eq"] = c.loss.lambda_eq;
  j["lambda_p"] = c.loss.lambda_p;
  j["lambda_ent"] = c.loss.lambda_ent;
  j["ortho_eps"] = c.loss.eps;
  j["ortho_variant"] = c.loss.ortho == partmodel::OrthoVariant::Legacy ? "legacy" : "decorrelated";
  j["epochs"] = c.epochs;
  j["pretrain_epochs"] = c.pretrain_epochs;
  j["batch"] = c.batch;
  j["base_batch"] = c.base_batch;
  j["lr"] = c.lr;
  j["proto_lr"] = c.proto_lr;
  j["backbone_lr"] = c.backbone_lr;
  j["pretrain_lr"] = c.pretrain_lr;
  j["clip"] = c.clip;
  j["weight_decay"] = c.weight_decay;
  j["probe_epochs"] = c.probe_epochs;
  j["probe_lr"] = c.probe_lr;
  j["tau"] = c.tau;
  j["kstar"] = c.kstar == leak::KStarMode::PerSample ? "per_sample" : "per_attribute_mean";
  j["seed"] = c.seed;
  return j;
}

}  // namespace

std::string config_to_json(const ExperimentConfig& cfg) { return config_json(cfg).dump(2); }

std::string config_hash(const ExperimentConfig& cfg) {
  const std::string s = config_json(cfg).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---- shared helpers ----------------------------------------------------------

namespace {

void say(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

std::size_t image_values(const vit::ViTConfig& v) { return v.channels * v.image_size * v.image_size; }

std::vector<std::size_t> shuffled(std::size_t n, Rng rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

struct Batch {
  std::vector<double> images, labels;
  std::size_t n = 0;
};

Batch gather(const synth::Split& s, std::span<const std::size_t> idx, std::size_t per_image, std::size_t attributes) {
  Batch b;
  b.n = idx.size();
  b.images.reserve(b.n * per_image);
  b.labels.reserve(b.n * attributes);
  for (std::size_t i : idx) {
    b.images.insert(b.images.end(), s.images.begin() + i * per_image, s.images.begin() + (i + 1) * per_image);
    for (std::size_t a = 0; a < attributes; ++a) b.labels.push_back(s.attributes[i * attributes + a]);
  }
  return b;
}

std::vector<std::size_t> range(std::size_t lo, std::size_t hi) {
  std::vector<std::size_t> r(hi - lo);
  std::iota(r.begin(), r.end(), lo);
  return r;
}

constexpr std::size_t kEvalChunk = 64;

ad::Tensor cls_logits(const BoundParams& p, const vit::ViTConfig& vcfg, const ad::Tensor& x) {
  const std::size_t B = x.dim(0);
  auto fm = vit::vit_forward(p, vcfg, x, vit::full_mask(B, vcfg.num_patches()));
  ad::Tensor cls = ad::reshape(vit::group_cls(fm, vcfg), {B, vcfg.embed_dim});
  return ad::linear(ad::layer_norm(cls, p["cls.ln_g"], p["cls.ln_b"]), p["cls.w"], p["cls.b"]);
}

double nan_to(double v, double fallback) { return std::isnan(v) ? fallback : v; }

}  // namespace

// ---- pretraining ------------------------------------------------------------

PretrainResult pretrain_backbone(const ExperimentConfig& cfg, const synth::Dataset& ds, const Logger& log) {
  cfg.validate();
  const vit::ViTConfig& vc = cfg.vit;
  const std::size_t A = ds.spec.attributes(), D = vc.embed_dim, per = image_values(vc);
  Rng init(cfg.seed, 101);
  ParamStore store = vit::init_vit(vc, init, 1, "backbone");
  store.add("cls.ln_g", {D}, std::vector<double>(D, 1.0), "backbone");
  store.add("cls.ln_b", {D}, std::vector<double>(D, 0.0), "backbone");
  std::vector<double> w(D * A);
  for (auto& x : w) x = init.normal(0.0, 0.02);
  store.add("cls.w", {D, A}, std::move(w), "backbone");
  store.add("cls.b", {A}, std::vector<double>(A, 0.0), "backbone");

  AdamWConfig oc;
  oc.clip_norm = cfg.clip;
  oc.weight_decay = cfg.weight_decay;
  AdamW opt(store, oc, {{"backbone", sqrt_scaled_lr(cfg.pretrain_lr, cfg.batch, cfg.base_batch)}});
  const std::size_t n = ds.train.n;
  const std::size_t steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
  const std::size_t total = steps_per_epoch * cfg.pretrain_epochs;
  Rng shuffle_rng(cfg.seed, 102);

  PretrainResult res;
  std::size_t step = 0;
  for (std::size_t e = 0; e < cfg.pretrain_epochs; ++e) {
    const auto order = shuffled(n, shuffle_rng.fork(e));
    double loss_sum = 0.0, norm_sum = 0.0;
    for (std::size_t s = 0; s < n; s += cfg.batch) {
      const std::size_t nb = std::min(cfg.batch, n - s);
      Batch b = gather(ds.train, std::span(order).subspan(s, nb), per, A);
      ad::Tape tape;
      BoundParams p = store.bind(tape, true);
      ad::Tensor x = tape.constant({nb, vc.channels, vc.image_size, vc.image_size}, std::move(b.images));
      ad::Tensor loss = ad::bce_with_logits(cls_logits(p, vc, x), b.labels);
      tape.backward(loss);
      norm_sum += opt.step(store, store.gradients(tape, p), cosine_factor(step++, total));
      loss_sum += loss.item();
    }
    res.curve.push_back({e, loss_sum / static_cast<double>(steps_per_epoch), norm_sum / static_cast<double>(steps_per_epoch)});
    say(log, "pretrain epoch " + std::to_string(e) + " loss " + fmt(res.curve.back().loss));
  }
  for (const auto& prm : store.all()) {
    if (prm.name.rfind("cls.", 0) == 0) res.head.add(prm.name, prm.shape, prm.value, "backbone");
    else res.backbone.add(prm.name, prm.shape, prm.value, "backbone");
  }
  const auto spec = ds.attribute_spec();
  res.train_map = cls_map(res.backbone, res.head, vc, ds.train, spec);
  res.test_map = ds.test.n ? cls_map(res.backbone, res.head, vc, ds.test, spec) : 0.0;
  return res;
}

double cls_map(const ParamStore& backbone, const ParamStore& head, const vit::ViTConfig& vc, const synth::Split& split,
               const leak::AttributeSpec& spec) {
  const std::size_t A = spec.size(), per = image_values(vc);
  ParamStore all = backbone;
  all.merge(head, "", "backbone");
  std::vector<double> logits;
  logits.reserve(split.n * A);
  for (std::size_t s = 0; s < split.n; s += kEvalChunk) {
    const std::size_t nb = std::min(kEvalChunk, split.n - s);
    ad::Tape tape;
    BoundParams p = all.bind(tape, false);
    ad::Tensor x = tape.constant({nb, vc.channels, vc.image_size, vc.image_size},
                                 std::vector<double>(split.images.begin() + s * per, split.images.begin() + (s + nb) * per));
    auto lg = cls_logits(p, vc, x).to_vector();
    logits.insert(logits.end(), lg.begin(), lg.end());
  }
  const auto cols = range(0, A);
  return leak::mean_ap(logits, split.labels(), split.n, A, cols).value;
}

// ---- benchmark ------------------------------------------------------------------

namespace {

std::vector<std::uint8_t> to_u8(const std::vector<double>& m) {
  std::vector<std::uint8_t> out(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i] > 0.5;
  return out;
}

std::vector<double> first_groups(const std::vector<double>& feats, std::size_t n, std::size_t groups, std::size_t keep,
                                 std::size_t dim) {
  std::vector<double> out;
  out.reserve(n * keep * dim);
  for (std::size_t i = 0; i < n; ++i) {
    auto b = feats.begin() + static_cast<std::ptrdiff_t>(i * groups * dim);
    out.insert(out.end(), b, b + static_cast<std::ptrdiff_t>(keep * dim));
  }
  return out;
}

}  // namespace

BenchmarkResult run_benchmark(const ExperimentConfig& cfg, const synth::Dataset& ds, const ParamStore& backbone,
                              const Logger& log) {
  cfg.validate();
  const auto spec = ds.attribute_spec();
  const vit::ViTConfig& vc = cfg.vit;
  const std::size_t G = spec.groups, HW = vc.num_patches(), D = vc.embed_dim, A = spec.size();
  if (ds.test.n == 0) throw ValidationError("benchmark: dataset has no test split");
  BenchmarkResult r;

  const auto mtr = synth::patch_masks(ds.train, ds.spec);
  const auto mte = synth::patch_masks(ds.test, ds.spec);
  say(log, "benchmark: late features");
  const auto late_tr = leak::extract_late(backbone, vc, ds.train.images, ds.train.n, mtr, G, &r.warnings);
  const auto late_te = leak::extract_late(backbone, vc, ds.test.images, ds.test.n, mte, G, &r.warnings);
  say(log, "benchmark: early features");
  const auto ltr = leak::masks_to_labels(mtr, ds.train.n, G, HW);
  const auto lte = leak::masks_to_labels(mte, ds.test.n, G, HW);
  const auto early_tr = first_groups(leak::extract_early(backbone, vc, ds.train.images, ds.train.n, ltr, G + 1),
                                     ds.train.n, G + 1, G, D);
  const auto early_te = first_groups(leak::extract_early(backbone, vc, ds.test.images, ds.test.n, lte, G + 1),
                                     ds.test.n, G + 1, G, D);

  const auto gt_u8 = to_u8(mte);
  r.assignment = leak::contingency(synth::patch_keypoints(ds.test, ds.spec), gt_u8, G, vc.grid(), vc.grid(), cfg.tau);
  leak::ProbeConfig pc{cfg.probe_epochs, cfg.probe_lr, cfg.seed};
  const auto ytr = ds.train.labels(), yte = ds.test.labels();
  auto run_mode = [&](const std::vector<double>& tr, const std::vector<double>& te, const char* name) {
    say(log, std::string("benchmark: probes (") + name + ")");
    ModeResult m;
    auto pr = leak::probe_matrix(tr, ytr, ds.train.n, te, yte, ds.test.n, G, D, spec, pc, &r.warnings);
    m.matrix = pr.matrix;
    m.ps = leak::part_specificity(m.matrix, r.assignment);
    m.mppo = leak::mppo(pr.test_logits, yte, gt_u8, gt_u8, ds.test.n, G, HW, spec, cfg.kstar, &r.warnings);
    return m;
  };
  r.late = run_mode(late_tr, late_te, "late");
  r.early = run_mode(early_tr, early_te, "early");

  r.mask_area.assign(G, 0.0);
  for (std::size_t i = 0; i < ds.test.n; ++i)
    for (std::size_t g = 0; g < G; ++g)
      for (std::size_t p = 0; p < HW; ++p) r.mask_area[g] += mte[(i * G + g) * HW + p];
  for (auto& a : r.mask_area) a /= static_cast<double>(ds.test.n * HW);
  double prev = 0.0;
  for (double y : yte) prev += y;
  r.prevalence = prev / static_cast<double>(ds.test.n * A);
  return r;
}

// ---- part model ------------------------------------------------------------------

namespace {

partmodel::ModelConfig model_config(const ExperimentConfig& cfg, std::size_t attributes, partmodel::Variant v) {
  partmodel::ModelConfig m;
  m.vit = cfg.vit;
  m.parts = cfg.parts;
  m.attributes = attributes;
  m.temperature = cfg.temperature;
  m.variant = v;
  m.loss = cfg.loss;
  return m;
}

void accumulate(partmodel::LossBreakdown& acc, const partmodel::LossBreakdown& b, double w) {
  acc.att_stage1 += w * b.att_stage1;
  acc.att_stage2 += w * b.att_stage2;
  acc.bg += w * b.bg;
  acc.decorr += w * b.decorr;
  acc.tv += w * b.tv;
  acc.eq += w * b.eq;
  acc.presence += w * b.presence;
  acc.entropy += w * b.entropy;
  acc.total += w * b.total;
}

}  // namespace

ParamStore build_model(const ExperimentConfig& cfg, const ParamStore& backbone, std::size_t attributes,
                       partmodel::Variant variant, Rng& rng) {
  ParamStore s;
  s.merge(backbone, "bb.", "backbone");
  const ParamStore s1 = partmodel::init_stage1(cfg.vit.embed_dim, cfg.parts, attributes, rng);
  for (const auto& p : s1.all()) s.add(p.name, p.shape, p.value, p.group);
  if (variant != partmodel::Variant::Single) {
    ParamStore s2 = partmodel::init_stage2(backbone, cfg.vit, cfg.parts, attributes, rng);
    for (const auto& p : s2.all()) s.add(p.name, p.shape, p.value, p.group);
  }
  return s;
}

TrainResult train_model(const ExperimentConfig& cfg, const synth::Dataset& ds, const ParamStore& backbone,
                        partmodel::Variant variant, const Logger& log) {
  cfg.validate();
  const std::size_t A = ds.spec.attributes(), per = image_values(cfg.vit);
  Rng init(cfg.seed, 201);
  TrainResult res;
  res.model = build_model(cfg, backbone, A, variant, init);
  const auto mcfg = model_config(cfg, A, variant);

  AdamWConfig oc;
  oc.clip_norm = cfg.clip;
  oc.weight_decay = cfg.weight_decay;
  const double lr = sqrt_scaled_lr(cfg.lr, cfg.batch, cfg.base_batch);
  AdamW opt(res.model, oc,
            {{"proto", sqrt_scaled_lr(cfg.proto_lr, cfg.batch, cfg.base_batch)}, {"stage1", lr}, {"stage2", lr},
             {"stage2_backbone", sqrt_scaled_lr(cfg.backbone_lr, cfg.batch, cfg.base_batch)}});
  const std::size_t n = ds.train.n;
  const std::size_t steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
  const std::size_t total = steps_per_epoch * cfg.epochs;
  Rng shuffle_rng(cfg.seed, 202), noise_rng(cfg.seed, 203);
  std::size_t step = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto order = shuffled(n, shuffle_rng.fork(e));
    partmodel::LossBreakdown acc;
    for (std::size_t s = 0; s < n; s += cfg.batch) {
      const std::size_t nb = std::min(cfg.batch, n - s);
      Batch b = gather(ds.train, std::span(order).subspan(s, nb), per, A);
      Rng rng = noise_rng.fork(step);
      ad::Tape tape;
      BoundParams p = res.model.bind(tape, true, {"backbone"});
      auto out = partmodel::model_forward(p, mcfg, b.images, nb, b.labels, &rng, true);
      if (step == 0) res.first_step = out.breakdown;
      tape.backward(out.loss);
      opt.step(res.model, res.model.gradients(tape, p), cosine_factor(step++, total));
      accumulate(acc, out.breakdown, 1.0 / static_cast<double>(steps_per_epoch));
    }
    res.curve.push_back({e, acc});
    say(log, partmodel::to_string(variant) + " epoch " + std::to_string(e) + " loss " + fmt(acc.total));
  }
  res.eval = evaluate_model(cfg, ds, res.model, variant, log);
  return res;
}

namespace {

struct SplitOutputs {
  std::vector<double> probs;     // [n, K+1, HW]
  std::vector<double> logits1;   // [n, A]
  std::vector<double> logits2;   // [n, A] (two-stage only)
  std::vector<double> features;  // [n, K, D] probed part features
};

SplitOutputs run_split(const ExperimentConfig& cfg, const synth::Split& split, const ParamStore& model,
                       const partmodel::ModelConfig& mcfg) {
  const std::size_t per = image_values(cfg.vit);
  SplitOutputs o;
  for (std::size_t s = 0; s < split.n; s += kEvalChunk) {
    const std::size_t nb = std::min(kEvalChunk, split.n - s);
    ad::Tape tape;
    BoundParams p = model.bind(tape, false);
    std::span<const double> im(split.images.data() + s * per, nb * per);
    auto out = partmodel::model_forward(p, mcfg, im, nb, {}, nullptr, false);
    auto append = [](std::vector<double>& dst, const ad::Tensor& t) {
      auto v = t.data();
      dst.insert(dst.end(), v.begin(), v.end());
    };
    append(o.probs, out.maps.probs);
    append(o.logits1, out.stage1.logits);
    if (out.stage2) {
      append(o.logits2, out.stage2->routing.logits);
      append(o.features, out.stage2->part_features);
    } else {
      append(o.features, out.raw.foreground);
    }
  }
  return o;
}

std::vector<int> argmax_labels(const std::vector<double>& probs, std::size_t n, std::size_t groups, std::size_t hw) {
  std::vector<int> lab(n * hw);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < hw; ++p) {
      std::size_t best = 0;
      for (std::size_t k = 1; k < groups; ++k) {
        if (probs[(i * groups + k) * hw + p] > probs[(i * groups + best) * hw + p]) best = k;
      }
      lab[i * hw + p] = static_cast<int>(best);
    }
  return lab;
}

}  // namespace

EvalResult evaluate_model(const ExperimentConfig& cfg, const synth::Dataset& ds, const ParamStore& model,
                          partmodel::Variant variant, const Logger& log) {
  const auto spec = ds.attribute_spec();
  const std::size_t A = spec.size(), K = cfg.parts, HW = cfg.vit.num_patches(), D = cfg.vit.embed_dim;
  const std::size_t G = spec.groups;
  if (ds.test.n == 0) throw ValidationError("evaluate: dataset has no test split");
  const auto mcfg = model_config(cfg, A, variant);
  say(log, "evaluate: forward passes");
  const SplitOutputs tr = run_split(cfg, ds.train, model, mcfg);
  const SplitOutputs te = run_split(cfg, ds.test, model, mcfg);
  const std::size_t n = ds.test.n;
  const auto yte = ds.test.labels();
  const auto cols = range(0, A);

  EvalResult r;
  r.map_stage1 = leak::mean_ap(te.logits1, yte, n, A, cols, &r.warnings).value;
  if (!te.logits2.empty()) {
    r.map_stage2 = leak::mean_ap(te.logits2, yte, n, A, cols, &r.warnings).value;
    r.map_ensemble = leak::mean_ap(partmodel::ensemble_logits(te.logits1, te.logits2), yte, n, A, cols).value;
  } else {
    r.map_stage2 = std::numeric_limits<double>::quiet_NaN();
    r.map_ensemble = r.map_stage1;
  }

  const auto labels = argmax_labels(te.probs, n, K + 1, HW);
  r.mask_area.assign(K + 1, 0.0);
  for (int l : labels) r.mask_area[static_cast<std::size_t>(l)] += 1.0;
  for (auto& a : r.mask_area) a /= static_cast<double>(n * HW);
  r.presence_max.assign(K + 1, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k <= K; ++k)
      for (std::size_t p = 0; p < HW; ++p) r.presence_max[k] = std::max(r.presence_max[k], te.probs[(i * (K + 1) + k) * HW + p]);

  const auto kp = synth::patch_keypoints(ds.test, ds.spec);
  std::vector<int> pred, truth;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t g = 0; g < G; ++g) {
      const std::size_t cell = static_cast<std::size_t>(kp.row[i * G + g]) * cfg.vit.grid() +
                               static_cast<std::size_t>(kp.col[i * G + g]);
      pred.push_back(labels[i * HW + cell]);
      truth.push_back(static_cast<int>(g));
    }
  if (std::set<int>(pred.begin(), pred.end()).size() < 2) {
    r.warnings.push_back("all keypoints fall in one discovered part; NMI and ARI set to 0");
    r.nmi = r.ari = 0.0;
  } else {
    const auto q = leak::nmi_ari(pred, truth);
    r.nmi = q.nmi;
    r.ari = q.ari;
  }

  say(log, "evaluate: probes");
  leak::ProbeConfig pc{cfg.probe_epochs, cfg.probe_lr, cfg.seed};
  auto pr = leak::probe_matrix(tr.features, ds.train.labels(), ds.train.n, te.features, yte, n, K, D, spec, pc,
                               &r.warnings);
  std::vector<std::uint8_t> discovered(n * K * HW, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < HW; ++p) {
      const auto l = static_cast<std::size_t>(labels[i * HW + p]);
      if (l < K) discovered[(i * K + l) * HW + p] = 1;
    }
  const auto gt = to_u8(synth::patch_masks(ds.test, ds.spec));
  r.mppo = nan_to(leak::mppo(pr.test_logits, yte, discovered, gt, n, K, HW, spec, cfg.kstar, &r.warnings).mppo, 0.0);
  return r;
}

// ---- artifacts ---------------------------------------------------------------------

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw ValidationError("cannot write " + p.string());
  f << text;
  if (!f) throw ValidationError("write failed for " + p.string());
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw ValidationError("cannot read " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::map<std::string, std::string> versions() {
  return {{"partleak", version()},
          {"compiler", __VERSION__},
          {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                        std::to_string(EIGEN_MINOR_VERSION)},
          {"zlib", ZLIB_VERSION},
          {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
}

void write_report_record(const std::filesystem::path& dir, const std::vector<std::filesystem::path>& runs) {
  json j;
  j["command"] = "report";
  json in = json::array();
  for (const auto& r : runs) {
    const std::string bytes = read_text(r / "summary.csv");
    const uLong crc = crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(bytes.data()),
                            static_cast<uInt>(bytes.size()));
    in.push_back({{"dir", r.string()}, {"summary_crc32", static_cast<std::uint32_t>(crc)}});
  }
  j["runs"] = in;
  j["versions"] = versions();
  write_text(dir / "run.json", j.dump(2) + "\n");
}

void write_run_record(const std::filesystem::path& dir, const std::string& command, const ExperimentConfig& cfg,
                      const std::map<std::string, std::string>& extra) {
  json j;
  j["command"] = command;
  j["seed"] = cfg.seed;
  j["config"] = config_json(cfg);
  j["config_hash"] = config_hash(cfg);
  j["versions"] = versions();
  for (const auto& [k, v] : extra) j[k] = v;
  write_text(dir / "run.json", j.dump(2) + "\n");
}

namespace {

std::string summary_csv(const std::vector<std::pair<std::string, double>>& rows) {
  std::string s = "metric,value\n";
  for (const auto& [k, v] : rows) s += k + "," + fmt(v) + "\n";
  return s;
}

std::string breakdown_header() { return "att_stage1,att_stage2,bg,decorr,tv,eq,presence,entropy,total"; }

std::string breakdown_row(const partmodel::LossBreakdown& b) {
  return fmt(b.att_stage1) + "," + fmt(b.att_stage2) + "," + fmt(b.bg) + "," + fmt(b.decorr) + "," + fmt(b.tv) + "," +
         fmt(b.eq) + "," + fmt(b.presence) + "," + fmt(b.entropy) + "," + fmt(b.total);
}

std::string matrix_csv(const leak::ProbeMatrix& m) {
  std::string s = "part";
  for (std::size_t g = 0; g < m.groups; ++g) s += ",group" + std::to_string(g);
  s += "\n";
  for (std::size_t k = 0; k < m.parts; ++k) {
    s += std::to_string(k);
    for (std::size_t g = 0; g < m.groups; ++g) s += "," + fmt(m.at(k, g));
    s += "\n";
  }
  return s;
}

// mean of matrix entries on / off the K+ assignment
std::pair<double, double> diag_offdiag(const leak::ProbeMatrix& m, const leak::PartAssignment& asg) {
  double on = 0, off = 0;
  std::size_t non = 0, noff = 0;
  for (std::size_t g = 0; g < m.groups; ++g) {
    for (std::size_t k : asg.k_plus[g]) on += m.at(k, g), ++non;
    for (std::size_t k : asg.k_minus[g]) off += m.at(k, g), ++noff;
  }
  return {non ? on / static_cast<double>(non) : 0.0, noff ? off / static_cast<double>(noff) : 0.0};
}

}  // namespace

void write_pretrain_artifacts(const std::filesystem::path& dir, const PretrainResult& r) {
  std::filesystem::create_directories(dir);
  save_checkpoint(r.backbone, dir / "backbone");
  save_checkpoint(r.head, dir / "head");
  std::string c = "epoch,loss,grad_norm\n";
  for (const auto& e : r.curve) c += std::to_string(e.epoch) + "," + fmt(e.loss) + "," + fmt(e.grad_norm) + "\n";
  write_text(dir / "pretrain_curve.csv", c);
  write_text(dir / "summary.csv", summary_csv({{"train_map", r.train_map}, {"test_map", r.test_map}}));
}

void write_benchmark_artifacts(const std::filesystem::path& dir, const BenchmarkResult& r,
                               const leak::AttributeSpec& spec) {
  std::filesystem::create_directories(dir);
  std::string m = "metric,part_or_attribute,masking_mode,value\n";
  for (const auto& [mode, res] : {std::pair<const char*, const ModeResult*>{"late", &r.late}, {"early", &r.early}}) {
    for (std::size_t g = 0; g < res->ps.per_group.size(); ++g) {
      m += std::string("ps,group") + std::to_string(g) + "," + mode + "," + fmt(res->ps.per_group[g]) + "\n";
    }
    m += std::string("ps,all,") + mode + "," + fmt(res->ps.ps) + "\n";
    for (std::size_t a = 0; a < res->mppo.per_attribute.size(); ++a) {
      const std::string name = a < spec.names.size() ? spec.names[a] : std::to_string(a);
      m += "mppo," + name + "," + mode + "," + fmt(res->mppo.per_attribute[a]) + "\n";
    }
    m += std::string("mppo,all,") + mode + "," + fmt(res->mppo.mppo) + "\n";
  }
  for (std::size_t g = 0; g < r.mask_area.size(); ++g) {
    m += "mask_area,group" + std::to_string(g) + ",gt," + fmt(r.mask_area[g]) + "\n";
  }
  write_text(dir / "metrics.csv", m);
  write_text(dir / "map_matrix_late.csv", matrix_csv(r.late.matrix));
  write_text(dir / "map_matrix_early.csv", matrix_csv(r.early.matrix));
  std::string c = "group";
  for (std::size_t k = 0; k < r.assignment.parts; ++k) c += ",part" + std::to_string(k);
  c += "\n";
  for (std::size_t g = 0; g < r.assignment.groups; ++g) {
    c += std::to_string(g);
    for (std::size_t k = 0; k < r.assignment.parts; ++k) c += "," + fmt(r.assignment.c[g * r.assignment.parts + k]);
    c += "\n";
  }
  write_text(dir / "contingency.csv", c);
  const auto [late_on, late_off] = diag_offdiag(r.late.matrix, r.assignment);
  const auto [early_on, early_off] = diag_offdiag(r.early.matrix, r.assignment);
  double area = 0;
  for (double a : r.mask_area) area += a;
  write_text(dir / "summary.csv",
             summary_csv({{"ps_late", r.late.ps.ps},
                          {"ps_early", r.early.ps.ps},
                          {"ps_gap", r.early.ps.ps - r.late.ps.ps},
                          {"mppo_late", r.late.mppo.mppo},
                          {"mppo_early", r.early.mppo.mppo},
                          {"map_matched_late", late_on},
                          {"map_unmatched_late", late_off},
                          {"map_matched_early", early_on},
                          {"map_unmatched_early", early_off},
                          {"prevalence", r.prevalence},
                          {"mask_area_mean", area / static_cast<double>(std::max<std::size_t>(1, r.mask_area.size()))}}));
}

void write_train_artifacts(const std::filesystem::path& dir, const TrainResult& r, partmodel::Variant variant) {
  std::filesystem::create_directories(dir);
  ParamStore trainable;
  for (const auto& p : r.model.all()) {
    if (p.group != "backbone") trainable.add(p.name, p.shape, p.value, p.group);
  }
  save_checkpoint(trainable, dir / "model");
  std::string c = "epoch," + breakdown_header() + "\n";
  for (const auto& e : r.curve) c += std::to_string(e.epoch) + "," + breakdown_row(e.loss) + "\n";
  write_text(dir / "loss_curve.csv", c);
  std::vector<std::pair<std::string, double>> rows{{"map_stage1", r.eval.map_stage1}};
  if (variant != partmodel::Variant::Single) {
    rows.emplace_back("map_stage2", r.eval.map_stage2);
    rows.emplace_back("map_ensemble", r.eval.map_ensemble);
  }
  rows.emplace_back("nmi", r.eval.nmi);
  rows.emplace_back("ari", r.eval.ari);
  rows.emplace_back("mppo", r.eval.mppo);
  for (std::size_t k = 0; k < r.eval.mask_area.size(); ++k) {
    rows.emplace_back("mask_area_part" + std::to_string(k), r.eval.mask_area[k]);
  }
  for (std::size_t k = 0; k < r.eval.presence_max.size(); ++k) {
    rows.emplace_back("presence_max_part" + std::to_string(k), r.eval.presence_max[k]);
  }
  write_text(dir / "summary.csv", summary_csv(rows));
}

std::string make_report(const std::vector<std::filesystem::path>& runs) {
  if (runs.empty()) throw ValidationError("report: no run directories given");
  // (group, metric) -> values in run order
  std::map<std::string, std::map<std::string, std::vector<double>>> table;
  for (const auto& dir : runs) {
    if (!std::filesystem::exists(dir / "run.json") || !std::filesystem::exists(dir / "summary.csv")) {
      throw ValidationError("report: " + dir.string() + " lacks run.json or summary.csv");
    }
    json rj;
    try {
      rj = json::parse(read_text(dir / "run.json"));
    } catch (const json::exception& e) {
      throw ValidationError("report: bad run.json in " + dir.string() + ": " + e.what());
    }
    std::string group = rj.value("command", std::string("?"));
    if (rj.contains("variant")) group += "/" + rj["variant"].get<std::string>();
    std::istringstream in(read_text(dir / "summary.csv"));
    std::string line;
    std::getline(in, line);
    if (line != "metric,value") throw ValidationError("report: unexpected summary header in " + dir.string());
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto comma = line.find(',');
      if (comma == std::string::npos) throw ValidationError("report: malformed summary row in " + dir.string());
      const std::string value = line.substr(comma + 1);
      table[group][line.substr(0, comma)].push_back(value == "nan" ? std::numeric_limits<double>::quiet_NaN()
                                                                   : std::stod(value));
    }
  }
  std::string out =
      "# synthetic desk-scale data with a toy pretrained backbone; values are not comparable to published "
      "foundation-model results\n";
  out += "group,metric,mean,std,n\n";
  for (const auto& [group, metrics] : table)
    for (const auto& [metric, vals] : metrics) {
      const double n = static_cast<double>(vals.size());
      double mean = 0.0;
      for (double v : vals) mean += v;
      mean /= n;
      double ss = 0.0;
      for (double v : vals) ss += (v - mean) * (v - mean);
      const double sd = vals.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
      out += group + "," + metric + "," + fmt(mean) + "," + fmt(sd) + "," + std::to_string(vals.size()) + "\n";
    }
  return out;
}

}  // namespace partleak::harness
