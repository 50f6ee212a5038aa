#include "triplet/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

namespace triplet::train {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

Var leaf(Tensor t) { return make_var(std::move(t), false); }

/// [B,1,...] from B tensors of equal shape.
Tensor stack(const std::vector<const Tensor*>& items) {
  Shape shape = items.front()->shape();
  shape.insert(shape.begin(), {static_cast<std::int64_t>(items.size()), 1});
  Tensor out(shape);
  const std::size_t n = items.front()->numel();
  for (std::size_t b = 0; b < items.size(); ++b) {
    require_same_shape(*items[b], *items.front(), "batch stacking");
    std::copy(items[b]->ptr(), items[b]->ptr() + n, out.ptr() + b * n);
  }
  return out;
}

Tensor unstack(const Tensor& batch, std::size_t b) {
  Shape shape(batch.shape().begin() + 2, batch.shape().end());
  Tensor out(shape);
  const std::size_t n = out.numel();
  std::copy(batch.ptr() + b * n, batch.ptr() + (b + 1) * n, out.ptr());
  return out;
}

std::string num(double v) {
  if (std::isnan(v)) return "";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

nets::DenNet make_den(const config::RunConfig& c, std::uint64_t seed) {
  return nets::DenNet(c.dennet, data::derive_seed(seed, {1}));
}
nets::RecNet make_rec(const config::RunConfig& c, std::uint64_t seed) {
  return nets::RecNet(c.recnet, data::derive_seed(seed, {2}));
}
nets::AdvNet make_adv(const config::RunConfig& c, std::uint64_t seed) {
  return nets::AdvNet(c.advnet, data::derive_seed(seed, {3}));
}

enum Task { kP = 0, kF = 1, kI = 2 };

}  // namespace

std::string log_header() { return "step,stage,l_p,l_f,l_i_mse,l_g_adv,l_d_adv,w_p,w_f,w_i"; }

std::string log_line(const LogRow& r) {
  return std::to_string(r.step) + "," + std::to_string(r.stage) + "," + num(r.l_p) + "," + num(r.l_f) + "," +
         num(r.l_i_mse) + "," + num(r.l_g_adv) + "," + num(r.l_d_adv) + "," + num(r.w_p) + "," + num(r.w_f) + "," +
         num(r.w_i);
}

Pipeline::Pipeline(const config::RunConfig& cfg, std::uint64_t seed)
    : cfg_(cfg), den_(make_den(cfg, seed)), rec_(make_rec(cfg, seed)), adv_(make_adv(cfg, seed)) {
  cfg_.validate();
}

std::uint64_t Pipeline::hash() const {
  std::uint64_t h = den_.params().hash();
  h = h * 1099511628211ULL ^ rec_.params().hash();
  return h * 1099511628211ULL ^ adv_.params().hash();
}

void Pipeline::save(const fs::path& dir) const {
  fs::create_directories(dir);
  config::save_config(cfg_, dir / "config.json");
  den_.save(dir / "dennet");
  rec_.save(dir / "recnet");
  adv_.save(dir / "advnet");
}

Pipeline Pipeline::load(const fs::path& dir) {
  if (!fs::exists(dir / "config.json")) throw std::runtime_error("not a checkpoint directory: " + dir.string());
  Pipeline p(config::load_config(dir / "config.json"), 0);
  p.den_.load(dir / "dennet");
  p.rec_.load(dir / "recnet");
  p.adv_.load(dir / "advnet");
  return p;
}

std::vector<Pipeline::Inference> Pipeline::infer_batch(const std::vector<Tensor>& s_low) {
  if (s_low.empty()) return {};
  const auto geom = cfg_.geometry();
  for (const auto& s : s_low) {
    if (s.rank() != 3 || s.dim(0) != geom.n_angles || s.dim(1) != geom.n_bins) {
      throw ShapeError("infer: sinogram " + shape_str(s.shape()) + " does not match the configured geometry [" +
                       std::to_string(geom.n_angles) + "," + std::to_string(geom.n_bins) + ",Z]");
    }
  }
  std::vector<Inference> out(s_low.size());
  Tape tape(false);
  std::vector<const Tensor*> inputs;
  if (cfg_.train.use_dennet) {
    std::vector<const Tensor*> ptrs;
    for (const auto& s : s_low) ptrs.push_back(&s);
    const auto d = den_.forward(tape, leaf(stack(ptrs)), ops::NormMode::Eval);
    for (std::size_t b = 0; b < s_low.size(); ++b) {
      out[b].s_den = unstack(d.s_den->value, b);
      out[b].i_in = projection::fbp(out[b].s_den, geom, cfg_.data.filter);
    }
  } else {
    const auto opt = cfg_.data.pair_options();
    for (std::size_t b = 0; b < s_low.size(); ++b) {
      out[b].s_den = s_low[b];
      out[b].i_in = data::reconstruct(s_low[b], opt);
    }
  }
  for (const auto& o : out) inputs.push_back(&o.i_in);
  const auto r = rec_.forward(tape, leaf(stack(inputs)), ops::NormMode::Eval);
  for (std::size_t b = 0; b < out.size(); ++b) out[b].i_hat = unstack(r.image->value, b);
  return out;
}

Pipeline::Inference Pipeline::infer(const Tensor& s_low) { return std::move(infer_batch({s_low}).front()); }

namespace {

[[noreturn]] void abort_on_nan(const StageOptions& opt, int stage, std::int64_t step, const std::vector<Tensor>& batch,
                               const json& losses) {
  const fs::path dir = (opt.dump_dir.empty() ? fs::current_path() : opt.dump_dir) /
                       ("nan_dump_stage" + std::to_string(stage) + "_step" + std::to_string(step));
  fs::create_directories(dir);
  const char* names[4] = {"s_low", "s_std", "i_low", "i_std"};
  for (std::size_t i = 0; i < batch.size() && i < 4; ++i) save_tnsr(batch[i], dir / (std::string(names[i]) + ".tnsr"));
  std::ofstream(dir / "losses.json") << losses.dump(2) << '\n';
  throw TrainingError("non-finite loss in stage " + std::to_string(stage) + " at step " + std::to_string(step) +
                          "; batch dumped to " + dir.string(),
                      dir);
}

}  // namespace

StageResult run_stage(Pipeline& pipe, int stage, const std::vector<const data::Sample*>& samples, std::uint64_t seed,
                      const StageOptions& opt) {
  if (stage < 1 || stage > 3) throw std::invalid_argument("run_stage: stage must be 1, 2 or 3");
  const auto& cfg = pipe.config();
  const auto& sc = cfg.train.stages[static_cast<std::size_t>(stage - 1)];
  const bool use_den = cfg.train.use_dennet;
  StageResult result;
  if (samples.empty()) throw std::invalid_argument("run_stage: no training samples");
  if (sc.epochs == 0) return result;

  std::array<bool, 3> active{};
  if (stage == 1) {
    active[kP] = use_den && cfg.losses.use_projection;
  } else {
    active[kP] = stage == 3 && use_den && cfg.losses.use_projection;
    active[kF] = cfg.losses.use_frequency;
    active[kI] = true;
  }
  if (!std::any_of(active.begin(), active.end(), [](bool b) { return b; })) return result;

  auto& den = pipe.dennet();
  auto& rec = pipe.recnet();
  auto& adv = pipe.advnet();
  const bool den_trains = use_den && stage != 2;
  den.params().set_frozen(!den_trains);
  rec.params().set_frozen(stage == 1);
  adv.params().set_frozen(stage == 1);
  for (auto* g : {&den.params(), &rec.params(), &adv.params()}) g->reset_optimizer();
  const AdamConfig adam{static_cast<float>(sc.lr), static_cast<float>(cfg.train.beta1),
                        static_cast<float>(cfg.train.beta2), static_cast<float>(cfg.train.eps)};
  const auto geom = cfg.geometry();
  const auto filter = cfg.data.filter;

  // Stage 2 keeps the denoiser frozen in eval mode, so its reconstructions
  // are fixed and computed once.
  std::vector<Tensor> cached;
  if (stage == 2 && use_den) {
    cached.resize(samples.size());
    const std::size_t chunk = 8;
    for (std::size_t i = 0; i < samples.size(); i += chunk) {
      std::vector<const Tensor*> ptrs;
      for (std::size_t k = i; k < std::min(samples.size(), i + chunk); ++k) ptrs.push_back(&samples[k]->pair.s_low);
      Tape off(false);
      const auto d = den.forward(off, leaf(stack(ptrs)), ops::NormMode::Eval);
      for (std::size_t k = 0; k < ptrs.size(); ++k) cached[i + k] = projection::fbp(unstack(d.s_den->value, k), geom, filter);
    }
  }

  std::vector<int> tasks;
  for (int t = 0; t < 3; ++t)
    if (active[static_cast<std::size_t>(t)]) tasks.push_back(t);
  const std::size_t n_tasks = tasks.size();
  const bool balance = stage != 1 && n_tasks > 1 && cfg.losses.gradnorm;
  std::vector<double> weights(n_tasks, 1.0), initial;
  const Var& shared = active[kP] ? den.head_weight() : rec.last_encoder_weight();

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto bs = static_cast<std::size_t>(cfg.train.batch_size);
  std::int64_t step = opt.first_step;

  for (int epoch = 0; epoch < sc.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      if (opt.max_steps > 0 && result.steps >= opt.max_steps) return result;
      std::vector<const Tensor*> sl, ss, il, is, in;
      for (std::size_t k = start; k < std::min(order.size(), start + bs); ++k) {
        const auto* s = samples[order[k]];
        sl.push_back(&s->pair.s_low);
        ss.push_back(&s->pair.s_std);
        il.push_back(&s->pair.i_low);
        is.push_back(&s->pair.i_std);
        in.push_back(cached.empty() ? &s->pair.i_low : &cached[order[k]]);
      }
      const Tensor s_low = stack(sl), s_std = stack(ss), i_low = stack(il), i_std = stack(is);
      for (auto* g : {&den.params(), &rec.params(), &adv.params()}) g->zero_grad();

      LogRow row{step, stage, kNaN, kNaN, kNaN, kNaN, kNaN, kNaN, kNaN, kNaN};
      auto check = [&](double v, const char* name) {
        if (!std::isfinite(v)) abort_on_nan(opt, stage, step, {s_low, s_std, i_low, i_std}, {{name, num(v)}});
      };

      if (stage == 1) {
        Tape tape;
        const auto d = den.forward(tape, leaf(s_low), ops::NormMode::Train);
        Var lp = losses::projection_loss(tape, d.s_den, leaf(s_std));
        row.l_p = scalar_value(lp);
        row.w_p = 1.0;
        check(row.l_p, "l_p");
        tape.backward(lp);
        den.params().adam_step(adam);
      } else {
        Tape tape;
        Var x;
        Var s_den;
        if (stage == 3 && use_den) {
          s_den = den.forward(tape, leaf(s_low), ops::NormMode::Train).s_den;
          x = projection::fbp_op(tape, s_den, geom, filter);
        } else {
          x = leaf(stack(in));
        }
        const Var i_hat = rec.forward(tape, x, ops::NormMode::Train).image;
        const Var v_ilow = leaf(i_low), v_istd = leaf(i_std);

        {  // discriminator step on the detached prediction
          Tape td;
          Var ld = losses::discriminator_loss(td, adv, v_ilow, v_istd, ops::detach(i_hat));
          row.l_d_adv = scalar_value(ld);
          check(row.l_d_adv, "l_d_adv");
          td.backward(ld);
          adv.params().adam_step(adam);
          adv.params().zero_grad();
        }

        std::vector<Var> terms;
        if (active[kP]) {
          Var lp = losses::projection_loss(tape, s_den, leaf(s_std));
          row.l_p = scalar_value(lp);
          check(row.l_p, "l_p");
          terms.push_back(lp);
        }
        if (active[kF]) {
          Var lf = losses::frequency_loss_images(tape, i_hat, v_istd, cfg.losses.focal_alpha);
          row.l_f = scalar_value(lf);
          check(row.l_f, "l_f");
          terms.push_back(lf);
        }
        const auto img = losses::image_loss(tape, adv, i_hat, v_istd, v_ilow);
        row.l_i_mse = scalar_value(img.mse);
        row.l_g_adv = scalar_value(img.g_adv);
        check(row.l_i_mse, "l_i_mse");
        check(row.l_g_adv, "l_g_adv");
        terms.push_back(
            ops::weighted_sum(tape, {img.mse, img.g_adv}, {1.0f, static_cast<float>(cfg.losses.adversarial_weight)}));

        std::vector<double> task_losses, norms;
        for (const auto& t : terms) task_losses.push_back(scalar_value(t));
        if (balance) {
          for (const auto& t : terms) norms.push_back(losses::shared_grad_norm(tape, t, shared));
        }
        std::vector<float> wf(weights.begin(), weights.end());
        for (std::size_t k = 0; k < n_tasks; ++k) {
          double& slot = tasks[k] == kP ? row.w_p : tasks[k] == kF ? row.w_f : row.w_i;
          slot = weights[k];
        }
        Var total = ops::weighted_sum(tape, terms, wf);
        tape.backward(total);
        den.params().adam_step(adam);
        rec.params().adam_step(adam);
        adv.params().zero_grad();  // the generator step leaves the discriminator alone

        if (balance) {
          if (initial.empty()) initial = task_losses;
          const bool usable = std::all_of(norms.begin(), norms.end(), [](double g) { return std::isfinite(g) && g > 0; }) &&
                              std::all_of(task_losses.begin(), task_losses.end(), [](double l) { return l > 0; });
          // zero gradient norms (e.g. the zero-initialized output layer on
          // the very first step) leave the weights unchanged
          if (usable) weights = losses::gradnorm_update(weights, task_losses, norms, initial, cfg.losses.gradnorm_options);
        }
      }
      result.log.push_back(row);
      if (opt.log) *opt.log << opt.log_prefix << log_line(row) << std::endl;
      ++step;
      ++result.steps;
    }
  }
  return result;
}

FoldResult evaluate(Pipeline& pipe, int fold, const std::vector<const data::Sample*>& samples) {
  if (samples.empty()) throw std::invalid_argument("evaluate: fold " + std::to_string(fold) + " has no samples");
  FoldResult fr;
  fr.fold = fold;
  const std::size_t chunk = 8;
  for (std::size_t i = 0; i < samples.size(); i += chunk) {
    std::vector<Tensor> batch;
    for (std::size_t k = i; k < std::min(samples.size(), i + chunk); ++k) batch.push_back(samples[k]->pair.s_low);
    const auto out = pipe.infer_batch(batch);
    for (std::size_t k = 0; k < out.size(); ++k) {
      const auto* s = samples[i + k];
      const std::string id = "p" + std::to_string(s->phantom_id) + "_k" + std::to_string(s->patch_id);
      fr.samples.push_back(metrics::evaluate(id, out[k].i_hat, s->pair.i_std));
      fr.baseline.push_back(metrics::evaluate(id, s->pair.i_low, s->pair.i_std));
    }
  }
  fr.summary = metrics::mean_std(fr.samples).first;
  fr.summary.id = "fold" + std::to_string(fold);
  return fr;
}

TrainResult train_full(const config::RunConfig& cfg, const data::Dataset& ds, const fs::path& out) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const int n_ph = static_cast<int>(ds.phantom_fold.size());
  if (ds.samples.empty() || n_ph == 0) throw std::runtime_error("train_full: dataset is empty");
  for (const auto& s : ds.samples) {
    if (s.pair.s_low.rank() != 3 || s.pair.s_low.dim(0) != cfg.geometry().n_angles ||
        s.pair.s_low.dim(1) != cfg.geometry().n_bins) {
      throw std::runtime_error("train_full: dataset geometry does not match the run config");
    }
  }

  // test-phantom flag per fold
  std::vector<std::vector<bool>> test_sets;
  const int k = *std::max_element(ds.phantom_fold.begin(), ds.phantom_fold.end()) + 1;
  if (k == 1) {
    test_sets.push_back(data::holdout_split(n_ph, data::derive_seed(cfg.seed, {0x686f6c64ULL})));
  } else {
    for (int f = 0; f < k; ++f) {
      std::vector<bool> t(static_cast<std::size_t>(n_ph));
      for (int p = 0; p < n_ph; ++p) t[static_cast<std::size_t>(p)] = ds.phantom_fold[static_cast<std::size_t>(p)] == f;
      test_sets.push_back(std::move(t));
    }
  }
  if (cfg.train.max_folds > 0 && static_cast<int>(test_sets.size()) > cfg.train.max_folds) {
    test_sets.resize(static_cast<std::size_t>(cfg.train.max_folds));
  }

  if (!out.empty()) {
    fs::create_directories(out);
    config::save_config(cfg, out / "config.json");
  }
  TrainResult res;
  std::ofstream log;
  if (!out.empty()) {
    log.open(out / "train_log.csv");
    log << "fold," << log_header() << '\n';
  }
  for (std::size_t f = 0; f < test_sets.size(); ++f) {
    std::vector<const data::Sample*> train_set, test_set;
    for (const auto& s : ds.samples) {
      (test_sets[f].at(static_cast<std::size_t>(s.phantom_id)) ? test_set : train_set).push_back(&s);
    }
    if (train_set.empty() || test_set.empty()) {
      throw std::runtime_error("train_full: fold " + std::to_string(f) + " is missing training or test data");
    }
    Pipeline pipe(cfg, data::derive_seed(cfg.seed, {static_cast<std::uint64_t>(f), 0x6e6574ULL}));
    std::int64_t step = 0;
    for (int stage = 1; stage <= 3; ++stage) {
      StageOptions so;
      so.log = log.is_open() ? &log : nullptr;
      so.log_prefix = std::to_string(f) + ",";
      so.dump_dir = out;
      so.first_step = step;
      const auto r = run_stage(pipe, stage, train_set, data::derive_seed(cfg.seed, {static_cast<std::uint64_t>(f), 0x7374ULL,
                                                                                    static_cast<std::uint64_t>(stage)}),
                               so);
      step += r.steps;
    }
    res.folds.push_back(evaluate(pipe, static_cast<int>(f), test_set));
    if (!out.empty() && f + 1 == test_sets.size()) pipe.save(out / "checkpoint");
  }

  std::vector<metrics::MetricsRow> fold_rows;
  std::vector<double> psnrs, base;
  for (const auto& fr : res.folds) {
    fold_rows.push_back(fr.summary);
    for (const auto& r : fr.samples) psnrs.push_back(r.psnr);
    for (const auto& r : fr.baseline) base.push_back(r.psnr);
  }
  std::tie(res.mean, res.std) = metrics::mean_std(fold_rows);
  res.median_psnr = metrics::median(psnrs);
  res.baseline_median_psnr = metrics::median(base);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (!out.empty()) {
    std::ofstream m(out / "metrics.csv");
    auto rows = fold_rows;
    rows.push_back(res.mean);
    rows.push_back(res.std);
    metrics::write_csv(m, rows);
    std::ofstream s(out / "samples.csv"), b(out / "baseline.csv");
    std::vector<metrics::MetricsRow> all, all_base;
    for (const auto& fr : res.folds) {
      for (auto r : fr.samples) {
        r.id = "fold" + std::to_string(fr.fold) + "_" + r.id;
        all.push_back(r);
      }
      for (auto r : fr.baseline) {
        r.id = "fold" + std::to_string(fr.fold) + "_" + r.id;
        all_base.push_back(r);
      }
    }
    metrics::write_csv(s, all);
    metrics::write_csv(b, all_base);
  }
  return res;
}

}  // namespace triplet::train
