#include "advg/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "advg/errors.hpp"
#include "advg/io_util.hpp"
#include "advg/rng.hpp"

namespace advg {

namespace {
constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

std::string fmt_short(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}
}  // namespace

void TrainConfig::validate() const {
  if (max_epochs < 1) throw ContractError("train config: max_epochs must be >= 1");
  if (!(initial_step > min_step) || !(min_step > 0.0))
    throw ContractError("train config: need initial_step > min_step > 0");
  if (batch_size < 1) throw ContractError("train config: batch_size must be >= 1");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
    throw ContractError("train config: dropout_rate must be in [0,1)");
  if (weight_decay < 0.0) throw ContractError("train config: weight_decay must be >= 0");
  if (!(temperature > 0.0)) throw ContractError("train config: temperature must be positive");
  if (projected_dim < 1) throw ContractError("train config: projected_dim must be >= 1");
}

namespace {

struct Prepared {
  SparseProjection proj;
  Normalizer norm;
  std::vector<double> x_train;  // n x P, normalized
  std::vector<double> x_valid;
};

void project_all(const SparseProjection& proj, const LabeledDataset& data,
                 double* out, kernels::Exec ex) {
  const auto n = static_cast<std::int64_t>(data.size());
  const std::size_t p = proj.output_dim;
  if (ex == kernels::Exec::parallel) {
#pragma omp parallel for schedule(static)
    for (std::int64_t s = 0; s < n; ++s)
      proj.apply(data.vectors[static_cast<std::size_t>(s)],
                 out + static_cast<std::size_t>(s) * p);
  } else {
    for (std::int64_t s = 0; s < n; ++s)
      proj.apply(data.vectors[static_cast<std::size_t>(s)],
                 out + static_cast<std::size_t>(s) * p);
  }
}

Prepared prepare_inputs(const DataBundle& data, const TrainConfig& cfg,
                        kernels::Exec ex) {
  if (data.train.size() == 0 || data.valid.size() == 0)
    throw ContractError("train: nonempty train and valid splits required");
  if (data.train.dim == 0) throw ContractError("train: dataset dimension is zero");
  Prepared prep;
  const std::uint64_t proj_seed =
      cfg.projection_seed.value_or(derive_seed(cfg.seed, "projection"));
  prep.proj = SparseProjection::init(data.train.dim, cfg.projected_dim, proj_seed);
  const std::size_t p = cfg.projected_dim;
  prep.x_train.resize(data.train.size() * p);
  prep.x_valid.resize(data.valid.size() * p);
  project_all(prep.proj, data.train, prep.x_train.data(), ex);
  project_all(prep.proj, data.valid, prep.x_valid.data(), ex);
  prep.norm = Normalizer::fit(prep.x_train.data(), data.train.size(), p);
  for (std::size_t s = 0; s < data.train.size(); ++s)
    prep.norm.apply(prep.x_train.data() + s * p);
  for (std::size_t s = 0; s < data.valid.size(); ++s)
    prep.norm.apply(prep.x_valid.data() + s * p);
  return prep;
}

std::vector<DenseLayer> init_layers(Arch arch, std::uint32_t projected_dim,
                                    std::uint64_t seed) {
  std::vector<DenseLayer> layers;
  std::uint32_t in = projected_dim;
  for (std::uint32_t k = 0; k <= arch.hidden_count; ++k) {
    const std::uint32_t out = k == arch.hidden_count ? MlpModel::kClasses
                                                     : arch.hidden_dim;
    DenseLayer l;
    l.rows = out;
    l.cols = in;
    l.W.resize(static_cast<std::size_t>(out) * in);
    l.b.assign(out, 0.0);
    Rng rng(derive_seed(seed, "init", k));
    const double limit = std::sqrt(6.0 / (static_cast<double>(in) + out));
    for (auto& w : l.W) w = rng.uniform(-limit, limit);
    layers.push_back(std::move(l));
    in = out;
  }
  return layers;
}

struct AdamState {
  std::vector<std::vector<double>> mW, vW, mb, vb;
  std::uint64_t t = 0;
  explicit AdamState(const std::vector<DenseLayer>& layers) {
    for (const auto& l : layers) {
      mW.emplace_back(l.W.size(), 0.0);
      vW.emplace_back(l.W.size(), 0.0);
      mb.emplace_back(l.b.size(), 0.0);
      vb.emplace_back(l.b.size(), 0.0);
    }
  }
};

// probs and log-probs of softmax(z/T), safe against exp underflow.
inline void stable_probs2(const double* z, double T, double* p, double* logp) {
  const double s0 = z[0] / T, s1 = z[1] / T;
  const double m = std::max(s0, s1);
  const double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
  const double lse = m + std::log(e0 + e1);
  p[0] = e0 / (e0 + e1);
  p[1] = e1 / (e0 + e1);
  logp[0] = s0 - lse;
  logp[1] = s1 - lse;
}

double validation_error(const std::vector<DenseLayer>& layers,
                        const std::vector<double>& x,
                        const std::vector<std::uint8_t>& labels, std::size_t p,
                        kernels::Exec ex) {
  const std::size_t n = labels.size();
  const std::size_t hcount = layers.size() - 1;
  std::vector<double> cur(x);
  std::vector<double> next;
  std::size_t width = p;
  for (std::size_t k = 0; k < hcount; ++k) {
    const auto& l = layers[k];
    next.assign(n * l.rows, 0.0);
    kernels::affine_batch(ex, l.W.data(), l.b.data(), cur.data(), next.data(), n,
                          l.rows, l.cols);
    kernels::relu_inplace(next.data(), next.size());
    cur.swap(next);
    width = l.rows;
  }
  const auto& out = layers.back();
  next.assign(n * 2, 0.0);
  kernels::affine_batch(ex, out.W.data(), out.b.data(), cur.data(), next.data(), n,
                        out.rows, out.cols);
  (void)width;
  std::size_t wrong = 0;
  for (std::size_t s = 0; s < n; ++s) {
    // p_M >= 0.5 is logit comparison, so the temperature drops out here.
    const bool malware = next[s * 2 + 1] >= next[s * 2 + 0];
    if (malware != (labels[s] != 0)) ++wrong;
  }
  return static_cast<double>(wrong) / static_cast<double>(n);
}

struct CoreResult {
  std::vector<DenseLayer> layers;
  std::vector<EpochLog> log;
};

CoreResult train_core(const Prepared& prep, const LabeledDataset& train,
                      const LabeledDataset& valid, const SoftTargetSet& targets,
                      Arch arch, const TrainConfig& cfg, std::uint64_t seed,
                      kernels::Exec ex) {
  const std::size_t n = train.size();
  const std::size_t p = cfg.projected_dim;
  const std::size_t batch = std::min<std::size_t>(cfg.batch_size, n);
  const std::size_t hcount = arch.hidden_count;
  const double T = cfg.temperature;
  const double keep = 1.0 - cfg.dropout_rate;

  std::vector<DenseLayer> layers = init_layers(arch, static_cast<std::uint32_t>(p), seed);
  AdamState adam(layers);

  std::vector<DenseLayer> best_layers = layers;
  double best_error = std::numeric_limits<double>::infinity();
  double step = cfg.initial_step;

  std::vector<std::uint32_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<std::uint32_t>(i);

  // Batch workspaces.
  std::vector<std::vector<double>> act(hcount + 1), pre(hcount), mask(hcount),
      delta(hcount + 1);
  std::vector<double> xb(batch * p), tb(batch * 2), logits(batch * 2),
      dlogits(batch * 2);
  std::vector<std::vector<double>> gW(layers.size()), gb(layers.size());
  for (std::size_t k = 0; k < layers.size(); ++k) {
    gW[k].resize(layers[k].W.size());
    gb[k].resize(layers[k].b.size());
  }

  std::vector<EpochLog> log;
  for (std::uint32_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(seed, "shuffle", epoch));
    shuffle_rng.shuffle(order);
    Rng dropout_rng(derive_seed(seed, "dropout", epoch));

    double loss_sum = 0.0;
    std::size_t batch_count = 0;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t bn = std::min(batch, n - start);
      for (std::size_t s = 0; s < bn; ++s) {
        const std::uint32_t i = order[start + s];
        std::copy_n(prep.x_train.data() + static_cast<std::size_t>(i) * p, p,
                    xb.data() + s * p);
        tb[s * 2 + 0] = targets[i][0];
        tb[s * 2 + 1] = targets[i][1];
      }

      // Forward with inverted dropout on hidden activations.
      std::size_t width = p;
      const double* cur = xb.data();
      for (std::size_t k = 0; k < hcount; ++k) {
        const auto& l = layers[k];
        pre[k].assign(bn * l.rows, 0.0);
        kernels::affine_batch(ex, l.W.data(), l.b.data(), cur, pre[k].data(), bn,
                              l.rows, l.cols);
        act[k + 1] = pre[k];
        kernels::relu_inplace(act[k + 1].data(), act[k + 1].size());
        mask[k].resize(bn * l.rows);
        if (cfg.dropout_rate > 0.0) {
          for (auto& mval : mask[k])
            mval = dropout_rng.bernoulli(keep) ? 1.0 / keep : 0.0;
          for (std::size_t i = 0; i < act[k + 1].size(); ++i)
            act[k + 1][i] *= mask[k][i];
        } else {
          std::fill(mask[k].begin(), mask[k].end(), 1.0);
        }
        cur = act[k + 1].data();
        width = l.rows;
      }
      (void)width;
      const auto& out = layers[hcount];
      logits.assign(bn * 2, 0.0);
      kernels::affine_batch(ex, out.W.data(), out.b.data(), cur, logits.data(), bn,
                            out.rows, out.cols);

      double ce = 0.0;
      for (std::size_t s = 0; s < bn; ++s) {
        double prob[2], logp[2];
        stable_probs2(logits.data() + s * 2, T, prob, logp);
        ce -= tb[s * 2 + 0] * logp[0] + tb[s * 2 + 1] * logp[1];
        const double scale = 1.0 / (T * static_cast<double>(bn));
        dlogits[s * 2 + 0] = (prob[0] - tb[s * 2 + 0]) * scale;
        dlogits[s * 2 + 1] = (prob[1] - tb[s * 2 + 1]) * scale;
      }
      ce /= static_cast<double>(bn);
      double l2 = 0.0;
      if (cfg.weight_decay > 0.0)
        for (const auto& l : layers)
          for (double w : l.W) l2 += w * w;
      const double loss = ce + cfg.weight_decay * l2;
      if (!std::isfinite(loss))
        throw TrainingError("training diverged: non-finite loss at epoch " +
                            std::to_string(epoch) + " with step size " +
                            fmt_double(step));
      loss_sum += loss;
      ++batch_count;

      // Backward.
      kernels::weight_grad(ex, dlogits.data(), cur, gW[hcount].data(), bn, 2,
                           out.cols);
      kernels::bias_grad(ex, dlogits.data(), gb[hcount].data(), bn, 2);
      delta[hcount].assign(bn * out.cols, 0.0);
      kernels::affine_backward_batch(ex, out.W.data(), dlogits.data(),
                                     delta[hcount].data(), bn, 2, out.cols);
      for (std::size_t k = hcount; k-- > 0;) {
        const auto& l = layers[k];
        auto& dz = delta[k + 1];  // currently d loss / d act[k+1]
        for (std::size_t i = 0; i < dz.size(); ++i) {
          dz[i] *= mask[k][i];
          if (pre[k][i] <= 0.0) dz[i] = 0.0;
        }
        const double* below = k == 0 ? xb.data() : act[k].data();
        kernels::weight_grad(ex, dz.data(), below, gW[k].data(), bn, l.rows,
                             l.cols);
        kernels::bias_grad(ex, dz.data(), gb[k].data(), bn, l.rows);
        if (k > 0) {
          delta[k].assign(bn * l.cols, 0.0);
          kernels::affine_backward_batch(ex, l.W.data(), dz.data(), delta[k].data(),
                                         bn, l.rows, l.cols);
        }
      }
      if (cfg.weight_decay > 0.0)
        for (std::size_t k = 0; k < layers.size(); ++k)
          for (std::size_t i = 0; i < layers[k].W.size(); ++i)
            gW[k][i] += 2.0 * cfg.weight_decay * layers[k].W[i];

      ++adam.t;
      const double bias1 = 1.0 - std::pow(kBeta1, static_cast<double>(adam.t));
      const double bias2 = 1.0 - std::pow(kBeta2, static_cast<double>(adam.t));
      for (std::size_t k = 0; k < layers.size(); ++k) {
        kernels::adam_update(ex, layers[k].W.data(), adam.mW[k].data(),
                             adam.vW[k].data(), gW[k].data(), layers[k].W.size(),
                             step, kBeta1, kBeta2, kAdamEps, bias1, bias2);
        kernels::adam_update(ex, layers[k].b.data(), adam.mb[k].data(),
                             adam.vb[k].data(), gb[k].data(), layers[k].b.size(),
                             step, kBeta1, kBeta2, kAdamEps, bias1, bias2);
      }
    }

    const double verr =
        validation_error(layers, prep.x_valid, valid.labels, p, ex);
    log.push_back({epoch, step, loss_sum / static_cast<double>(batch_count), verr});

    if (verr < best_error) {
      best_error = verr;
      best_layers = layers;
    } else {
      step *= 0.5;
      if (step < cfg.min_step) break;
    }
  }
  return {std::move(best_layers), std::move(log)};
}

SoftTargetSet hard_targets(const LabeledDataset& data) {
  SoftTargetSet t(data.size());
  for (std::size_t i = 0; i < data.size(); ++i)
    t[i] = data.labels[i] ? std::array<double, 2>{0.0, 1.0}
                          : std::array<double, 2>{1.0, 0.0};
  return t;
}

MlpModel assemble(Prepared&& prep, CoreResult&& core, Arch arch,
                  const TrainConfig& cfg, const std::string& defense) {
  MlpModel m;
  m.projection = std::move(prep.proj);
  m.normalizer = std::move(prep.norm);
  m.layers = std::move(core.layers);
  m.hidden_count = arch.hidden_count;
  m.hidden_dim = arch.hidden_dim;
  m.temperature = cfg.temperature;
  m.train_seed = cfg.seed;
  m.defense = defense;
  m.check_shapes();
  return m;
}

}  // namespace

namespace {
void validate_arch(Arch arch) {
  if (arch.hidden_count < 1 || arch.hidden_dim < 1)
    throw ContractError("arch: hidden_count and hidden_dim must be >= 1");
}
}  // namespace

TrainResult train_baseline(const DataBundle& data, Arch arch,
                           const TrainConfig& cfg, kernels::Exec ex) {
  cfg.validate();
  validate_arch(arch);
  Prepared prep = prepare_inputs(data, cfg, ex);
  CoreResult core = train_core(prep, data.train, data.valid, hard_targets(data.train),
                               arch, cfg, cfg.seed, ex);
  const std::string defense =
      cfg.weight_decay > 0.0 ? "decay:D=" + fmt_short(cfg.weight_decay) : "none";
  auto log = core.log;
  return {assemble(std::move(prep), std::move(core), arch, cfg, defense),
          std::move(log)};
}

DistillResult train_distilled_full(const DataBundle& data, Arch arch,
                                   const TrainConfig& cfg, kernels::Exec ex) {
  cfg.validate();
  validate_arch(arch);
  if (cfg.temperature < 1.0)
    throw ContractError("train_distilled: temperature must be >= 1");

  Prepared prep = prepare_inputs(data, cfg, ex);

  DistillResult result;
  {
    CoreResult teacher_core =
        train_core(prep, data.train, data.valid, hard_targets(data.train), arch,
                   cfg, derive_seed(cfg.seed, "teacher"), ex);
    Prepared teacher_prep;  // teacher shares the projection and normalizer
    teacher_prep.proj = prep.proj;
    teacher_prep.norm = prep.norm;
    auto log = teacher_core.log;
    result.teacher = {assemble(std::move(teacher_prep), std::move(teacher_core),
                               arch, cfg, "distill-teacher:T=" + fmt_short(cfg.temperature)),
                      std::move(log)};
  }

  // Soft targets from the teacher at the distillation temperature.
  result.soft_targets.resize(data.train.size());
  const std::size_t p = cfg.projected_dim;
  const auto n = static_cast<std::int64_t>(data.train.size());
  const MlpModel& teacher = result.teacher.model;
  if (ex == kernels::Exec::parallel) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i)
      result.soft_targets[static_cast<std::size_t>(i)] =
          forward_projected(teacher,
                            prep.x_train.data() + static_cast<std::size_t>(i) * p)
              .probs;
  } else {
    for (std::int64_t i = 0; i < n; ++i)
      result.soft_targets[static_cast<std::size_t>(i)] =
          forward_projected(teacher,
                            prep.x_train.data() + static_cast<std::size_t>(i) * p)
              .probs;
  }

  CoreResult student_core =
      train_core(prep, data.train, data.valid, result.soft_targets, arch, cfg,
                 derive_seed(cfg.seed, "student"), ex);
  auto log = student_core.log;
  MlpModel student = assemble(std::move(prep), std::move(student_core), arch, cfg,
                              "distill:T=" + fmt_short(cfg.temperature));
  // Deployment uses the standard softmax; the probability scores go back to
  // their normal scale.
  student.temperature = 1.0;
  result.student = {std::move(student), std::move(log)};
  return result;
}

TrainResult train_distilled(const DataBundle& data, Arch arch,
                            const TrainConfig& cfg, kernels::Exec ex) {
  return train_distilled_full(data, arch, cfg, ex).student;
}

EnsembleResult train_ensemble(const DataBundle& data, Arch arch,
                              const TrainConfig& cfg, std::uint32_t ensemble_size,
                              kernels::Exec ex) {
  cfg.validate();
  if (ensemble_size % 2 == 0 || ensemble_size < 3)
    throw ContractError("train_ensemble: ensemble size must be odd and >= 3");
  EnsembleResult result;
  for (std::uint32_t e = 0; e < ensemble_size; ++e) {
    // Members differ in every parameter initialization, including the random
    // projection: majority voting protects only when members disagree.
    TrainConfig member_cfg = cfg;
    member_cfg.seed = cfg.seed + e;
    member_cfg.projection_seed = derive_seed(cfg.seed + e, "projection");
    TrainResult r = train_baseline(data, arch, member_cfg, ex);
    r.model.defense = "ensemble:E=" + std::to_string(ensemble_size) + ":member=" +
                      std::to_string(e);
    result.members.push_back(std::move(r.model));
    result.logs.push_back(std::move(r.log));
  }
  return result;
}

Vote predict_ensemble(std::span<const MlpModel> members, const SparseBinaryVector& x) {
  if (members.empty()) throw ContractError("predict_ensemble: empty model list");
  Vote v;
  v.member_count = static_cast<int>(members.size());
  double sum_pm = 0.0;
  for (const auto& m : members) {
    const double pm = forward(m, x).p_malware();
    sum_pm += pm;
    if (pm >= 0.5) ++v.votes_malware;
  }
  v.mean_p_malware = sum_pm / static_cast<double>(members.size());
  v.malware = v.votes_malware * 2 > v.member_count;
  return v;
}

std::string epoch_log_to_csv(std::span<const EpochLog> log) {
  std::string out = "epoch,step_size,train_loss,valid_error\n";
  for (const auto& e : log) {
    out += std::to_string(e.epoch);
    out += ',';
    out += fmt_double(e.step_size);
    out += ',';
    out += fmt_double(e.train_loss);
    out += ',';
    out += fmt_double(e.valid_error);
    out += '\n';
  }
  return out;
}

double weight_squared_norm(const MlpModel& model) {
  double sum = 0.0;
  for (const auto& l : model.layers)
    for (double w : l.W) sum += w * w;
  return sum;
}

}  // namespace advg
