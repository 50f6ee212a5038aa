#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "triplet/trainer.hpp"

using namespace triplet;
using namespace triplet::train;

namespace {

const data::Dataset& tiny_dataset() {
  static const data::Dataset ds = data::build_dataset(config::preset("tiny").data, 3);
  return ds;
}

std::vector<const data::Sample*> all_samples(const data::Dataset& ds) {
  std::vector<const data::Sample*> v;
  for (const auto& s : ds.samples) v.push_back(&s);
  return v;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.ptr(), b.ptr(), a.numel() * sizeof(float)) == 0;
}

double median_of(std::vector<double> v) { return metrics::median(std::move(v)); }

std::filesystem::path temp_dir(const char* name) {
  auto d = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(d);
  return d;
}

}  // namespace

TEST_CASE("stage 2 leaves the frozen denoiser untouched") {
  const auto cfg = config::preset("tiny");
  Pipeline pipe(cfg, 1);
  const auto samples = all_samples(tiny_dataset());
  run_stage(pipe, 1, samples, 5);
  const auto den_hash = pipe.dennet().params().hash();
  const auto rec_hash = pipe.recnet().params().hash();
  const auto r = run_stage(pipe, 2, samples, 6);
  CHECK(r.steps == 2);
  CHECK(pipe.dennet().params().hash() == den_hash);
  CHECK(pipe.recnet().params().hash() != rec_hash);
  run_stage(pipe, 3, samples, 7);
  CHECK(pipe.dennet().params().hash() != den_hash);
}

TEST_CASE("stage 1 overfits a single pair") {
  auto cfg = config::preset("tiny");
  cfg.train.stages[0].epochs = 500;
  Pipeline pipe(cfg, 2);
  const auto& ds = tiny_dataset();
  const auto r = run_stage(pipe, 1, {&ds.samples.front()}, 9);
  REQUIRE(r.log.size() == 500);
  const double first = r.log.front().l_p;
  double best = first;
  std::size_t reached = 0;
  for (std::size_t i = 0; i < r.log.size(); ++i) {
    if (r.log[i].l_p < 0.1 * first && reached == 0) reached = i + 1;
    best = std::min(best, r.log[i].l_p);
  }
  INFO("initial " << first << " best " << best);
  CHECK(reached > 0);
  CHECK(reached <= 500);
  std::vector<double> head, tail;
  for (std::size_t i = 0; i < 50; ++i) {
    head.push_back(r.log[i].l_p);
    tail.push_back(r.log[r.log.size() - 1 - i].l_p);
  }
  CHECK(median_of(tail) < median_of(head));
}

TEST_CASE("identical seeds give identical loss curves") {
  const auto cfg = config::preset("tiny");
  const auto samples = all_samples(tiny_dataset());
  auto run = [&] {
    Pipeline pipe(cfg, 4);
    std::ostringstream log;
    StageOptions opt;
    opt.log = &log;
    for (int s = 1; s <= 3; ++s) run_stage(pipe, s, samples, 10 + static_cast<std::uint64_t>(s), opt);
    return log.str();
  };
  const auto a = run();
  CHECK(!a.empty());
  CHECK(a == run());
}

TEST_CASE("gradnorm weights sum to the active task count at every step") {
  auto cfg = config::preset("tiny");
  cfg.train.stages = {{{1, 1e-3}, {3, 1e-3}, {3, 1e-4}}};
  Pipeline pipe(cfg, 5);
  const auto samples = all_samples(tiny_dataset());
  run_stage(pipe, 1, samples, 1);
  for (int stage : {2, 3}) {
    const auto r = run_stage(pipe, stage, samples, 2);
    for (const auto& row : r.log) {
      const double sum = (stage == 3 ? row.w_p : 0.0) + row.w_f + row.w_i;
      CHECK(sum == doctest::Approx(stage == 3 ? 3.0 : 2.0).epsilon(1e-9));
      CHECK(row.w_f > 0.0);
      CHECK(row.w_i > 0.0);
      CHECK(std::isfinite(row.l_d_adv));
      CHECK(std::isfinite(row.l_g_adv));
    }
  }
}

TEST_CASE("training log csv header") {
  CHECK(log_header() == "step,stage,l_p,l_f,l_i_mse,l_g_adv,l_d_adv,w_p,w_f,w_i");
  LogRow r{3, 1, 0.5, std::nan(""), std::nan(""), std::nan(""), std::nan(""), 1.0, std::nan(""), std::nan("")};
  CHECK(log_line(r) == "3,1,0.5,,,,,1,,");
}

TEST_CASE("untrained pipeline reduces to fbp of the low-dose sinogram") {
  const auto cfg = config::preset("tiny");
  Pipeline pipe(cfg, 6);
  const auto& s = tiny_dataset().samples.front();
  const auto out = pipe.infer(s.pair.s_low);
  CHECK(bitwise_equal(out.s_den, s.pair.s_low));
  CHECK(out.i_hat.shape() == Shape{16, 16, 8});
  CHECK(bitwise_equal(out.i_hat, projection::fbp(s.pair.s_low, cfg.geometry(), cfg.data.filter)));
  CHECK(bitwise_equal(out.i_hat, s.pair.i_low));

  CHECK_THROWS_AS(pipe.infer(Tensor(Shape{9, 24, 8})), ShapeError);
}

TEST_CASE("inference is pure and checkpoints round-trip bitwise") {
  const auto cfg = config::preset("tiny");
  Pipeline pipe(cfg, 7);
  const auto samples = all_samples(tiny_dataset());
  for (int s = 1; s <= 3; ++s) run_stage(pipe, s, samples, 20 + static_cast<std::uint64_t>(s));
  std::vector<Tensor> batch;
  for (const auto* s : samples) batch.push_back(s->pair.s_low);
  REQUIRE(batch.size() == 8);
  const auto before = pipe.hash();
  const auto first = pipe.infer_batch(batch);
  CHECK(pipe.hash() == before);
  const auto second = pipe.infer_batch(batch);
  for (std::size_t i = 0; i < 8; ++i) CHECK(bitwise_equal(first[i].i_hat, second[i].i_hat));
  // batch composition does not change a sample's output in eval mode
  CHECK(bitwise_equal(pipe.infer(batch[3]).i_hat, first[3].i_hat));

  const auto dir = temp_dir("triplet_ckpt_roundtrip");
  pipe.save(dir);
  Pipeline back = Pipeline::load(dir);
  CHECK(back.hash() == before);
  const auto again = back.infer_batch(batch);
  for (std::size_t i = 0; i < 8; ++i) CHECK(bitwise_equal(again[i].i_hat, first[i].i_hat));
  std::filesystem::remove_all(dir);
}

TEST_CASE("non-finite loss aborts with a dump of the batch") {
  auto cfg = config::preset("tiny");
  data::Dataset ds = tiny_dataset();
  ds.samples[0].pair.s_std[0] = std::nanf("");
  std::vector<const data::Sample*> one{&ds.samples[0]};
  Pipeline pipe(cfg, 8);
  StageOptions opt;
  opt.dump_dir = temp_dir("triplet_nan_dump");
  try {
    run_stage(pipe, 1, one, 1, opt);
    FAIL("expected a TrainingError");
  } catch (const TrainingError& e) {
    CHECK(std::filesystem::exists(e.dump_dir / "s_std.tnsr"));
    CHECK(std::filesystem::exists(e.dump_dir / "losses.json"));
    CHECK(std::isnan(load_tnsr(e.dump_dir / "s_std.tnsr")[0]));
  }
  std::filesystem::remove_all(opt.dump_dir);
}

TEST_CASE("full training writes fold rows plus mean and std") {
  auto cfg = config::preset("tiny");
  cfg.train.max_folds = 0;
  const auto out = temp_dir("triplet_train_full");
  const auto res = train_full(cfg, tiny_dataset(), out);
  CHECK(res.folds.size() == 2);
  std::ifstream in(out / "metrics.csv");
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  REQUIRE(lines.size() == 5);
  CHECK(lines[0] == metrics::csv_header());
  CHECK(lines[1].rfind("fold0,", 0) == 0);
  CHECK(lines[2].rfind("fold1,", 0) == 0);
  CHECK(lines[3].rfind("mean,", 0) == 0);
  CHECK(lines[4].rfind("std,", 0) == 0);
  CHECK(std::filesystem::exists(out / "checkpoint" / "recnet" / "manifest.json"));
  std::ifstream log(out / "train_log.csv");
  std::string header;
  std::getline(log, header);
  CHECK(header == "fold," + log_header());

  // each fold tests only its own phantoms
  const auto& ds = tiny_dataset();
  for (const auto& fr : res.folds) {
    for (const auto& row : fr.samples) {
      const int phantom = std::stoi(row.id.substr(1, row.id.find('_') - 1));
      CHECK(ds.phantom_fold[static_cast<std::size_t>(phantom)] == fr.fold);
    }
  }
  std::filesystem::remove_all(out);
}

TEST_CASE("a single fold falls back to a disjoint 80/20 phantom split") {
  auto cfg = config::preset("tiny");
  cfg.data.n_phantoms = 5;
  cfg.data.folds = 1;
  cfg.data.patches_per_phantom = 1;
  const auto ds = data::build_dataset(cfg.data, 4);
  const auto res = train_full(cfg, ds);
  REQUIRE(res.folds.size() == 1);
  CHECK(res.folds[0].samples.size() == 1);  // one of five phantoms held out
  CHECK(std::isfinite(res.median_psnr));
}

TEST_CASE("config mismatch and empty folds are rejected") {
  auto cfg = config::preset("tiny");
  cfg.data.n_angles = 12;
  CHECK_THROWS_AS(train_full(cfg, tiny_dataset()), std::runtime_error);
}

TEST_CASE("run configs survive a json round-trip and partial files patch a preset") {
  for (const auto& name : config::preset_names()) {
    const auto c = config::preset(name);
    const auto back = nlohmann::json(c).get<config::RunConfig>();
    CHECK(nlohmann::json(back) == nlohmann::json(c));
  }
  const auto p = nlohmann::json::parse(R"({"preset": "tiny", "method": "I", "data": {"n_angles": 12}})")
                     .get<config::RunConfig>();
  CHECK(p.data.n_angles == 12);
  CHECK(p.data.n_phantoms == config::preset("tiny").data.n_phantoms);
  CHECK_FALSE(p.recnet.wavelet);
  CHECK_FALSE(p.train.use_dennet);
  auto bad = config::preset("desk");
  bad.data.patch = {30, 30, 16};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
