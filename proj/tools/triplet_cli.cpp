#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "triplet/config.hpp"
#include "triplet/datagen.hpp"
#include "triplet/metrics.hpp"
#include "triplet/platform.hpp"
#include "triplet/trainer.hpp"
#include "triplet/wavelet.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace triplet;

namespace {

// Options shared by every subcommand.
struct Common {
  std::string config_path;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "JSON run config (keys override the preset)")->check(CLI::ExistingFile);
  cmd->add_option("--preset", c.preset, "named preset when no config file is given (default desk)");
  cmd->add_option("--seed", c.seed, "master seed (overrides the config)");
  cmd->add_option("--out", c.out, "output directory (default $TRIPLET_WORKSPACE or .)");
}

config::RunConfig resolve_config(const Common& c) {
  config::RunConfig cfg = c.config_path.empty() ? config::preset(c.preset.empty() ? "desk" : c.preset)
                                                : config::load_config(c.config_path);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

fs::path out_dir(const Common& c) {
  fs::path d;
  if (!c.out.empty()) {
    d = c.out;
  } else if (const char* ws = std::getenv("TRIPLET_WORKSPACE"); ws && *ws) {
    d = ws;
  } else {
    d = ".";
  }
  fs::create_directories(d);
  return d;
}

data::Dataset dataset_for(const config::RunConfig& cfg, const std::string& dataset_dir) {
  if (!dataset_dir.empty()) {
    auto ds = data::load_dataset(dataset_dir);
    if (json(ds.config) != json(cfg.data)) {
      throw std::runtime_error("dataset at " + dataset_dir + " was built with a different data config");
    }
    return ds;
  }
  return data::build_dataset(cfg.data, cfg.seed);
}

void write_json(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(2) << '\n'; }

json read_sidecar(const fs::path& tensor_path) {
  const fs::path p = fs::path(tensor_path.string() + ".json");
  if (!fs::exists(p)) return json::object();
  std::ifstream in(p);
  return json::parse(in);
}

void print_train_summary(const train::TrainResult& r, const fs::path& out) {
  std::cout << metrics::csv_header() << '\n';
  for (const auto& f : r.folds) std::cout << metrics::csv_line(f.summary) << '\n';
  std::cout << metrics::csv_line(r.mean) << '\n' << metrics::csv_line(r.std) << '\n';
  std::cout << "# median_psnr=" << r.median_psnr << " baseline_median_psnr=" << r.baseline_median_psnr
            << " seconds=" << r.seconds << " out=" << out.string() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  platform::ensure_blas_coretype(argc, argv);

  CLI::App app{"Low-dose PET enhancement pipeline: data simulation, training, inference and evaluation"};
  app.require_subcommand(1);
  Common common;

  auto* phantom = app.add_subcommand("phantom", "generate one synthetic phantom volume");
  add_common(phantom, common);
  bool phantom_preprocess = false;
  phantom->add_flag("--preprocess", phantom_preprocess, "also write the clamped, normalized volume");

  auto* simulate = app.add_subcommand("simulate", "build the paired dataset described by the config");
  add_common(simulate, common);

  auto* trainc = app.add_subcommand("train", "three-stage training with per-fold evaluation");
  add_common(trainc, common);
  std::string dataset_dir;
  trainc->add_option("--dataset", dataset_dir, "dataset directory from `simulate` (built on the fly if omitted)");

  auto* infer = app.add_subcommand("infer", "run a checkpoint on a low-dose sinogram");
  add_common(infer, common);
  std::string ckpt, infer_input;
  infer->add_option("--checkpoint", ckpt, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
  infer->add_option("--input", infer_input, "low-dose sinogram [angles,bins,Z] (.tnsr)")->required()->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "metrics of a prediction against a reference");
  add_common(eval, common);
  std::string pred, ref, eval_id;
  bool diff_png = false;
  eval->add_option("--pred", pred, "predicted volume (.tnsr)")->required()->check(CLI::ExistingFile);
  eval->add_option("--ref", ref, "reference volume (.tnsr)")->required()->check(CLI::ExistingFile);
  eval->add_option("--id", eval_id, "row id (default: prediction file stem)");
  eval->add_flag("--diff-png", diff_png, "write |pred-ref| mid-slice PNGs to --out");

  auto* xform = app.add_subcommand("xform", "radon/fbp/dwt/idwt utilities on TNSR files");
  add_common(xform, common);
  std::string op, x_input, x_output, x_filter = "ramp";
  int x_levels = 1, x_angles = 0, x_image = 0;
  xform->add_option("op", op, "radon | fbp | dwt | idwt")->required()->check(CLI::IsMember({"radon", "fbp", "dwt", "idwt"}));
  xform->add_option("--input", x_input, "input tensor")->required()->check(CLI::ExistingFile);
  xform->add_option("--output", x_output, "output file (default <out>/<op>.tnsr)");
  xform->add_option("--levels", x_levels, "wavelet levels for dwt")->check(CLI::PositiveNumber);
  xform->add_option("--angles", x_angles, "projection angles for radon (default from config)");
  xform->add_option("--image-size", x_image, "image size for fbp when the sinogram has no sidecar");
  xform->add_option("--filter", x_filter, "fbp filter")->check(CLI::IsMember({"ramp", "hann"}));

  auto* ablate = app.add_subcommand("ablate", "train and evaluate one ablation method");
  add_common(ablate, common);
  std::string method;
  ablate->add_option("--method", method, "I | II | III | IV | V")->required()->check(
      CLI::IsMember({"I", "II", "III", "IV", "V"}));
  ablate->add_option("--dataset", dataset_dir, "dataset directory from `simulate`");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help() << std::flush;
    return 2;
  }

  try {
    const auto cfg = resolve_config(common);
    const fs::path out = out_dir(common);

    if (phantom->parsed()) {
      const auto ph = data::generate_phantom(cfg.data.phantom, cfg.seed);
      save_tnsr(ph.volume, out / "phantom.tnsr");
      if (phantom_preprocess) save_tnsr(data::preprocess(ph.volume, cfg.data.normalization), out / "phantom_pre.tnsr");
      json desc = json::array();
      for (const auto& e : ph.structures) {
        const char* kind = e.kind == data::Ellipsoid::Kind::Background ? "background"
                           : e.kind == data::Ellipsoid::Kind::Lesion   ? "lesion"
                                                                       : "organ";
        desc.push_back({{"kind", kind}, {"center", e.center}, {"axes", e.axes}, {"angle", e.angle}, {"intensity", e.intensity}});
      }
      write_json(out / "phantom.json", {{"seed", cfg.seed}, {"structures", desc}});
      std::cout << (out / "phantom.tnsr").string() << '\n';
    } else if (simulate->parsed()) {
      const auto ds = data::build_dataset(cfg.data, cfg.seed);
      data::save_dataset(ds, out / "dataset");
      std::cout << (out / "dataset").string() << " samples=" << ds.samples.size() << '\n';
    } else if (trainc->parsed()) {
      const auto ds = dataset_for(cfg, dataset_dir);
      print_train_summary(train::train_full(cfg, ds, out), out);
    } else if (ablate->parsed()) {
      auto mcfg = config::with_method(cfg, config::parse_method(method));
      mcfg.name = "method-" + method;
      const auto ds = dataset_for(mcfg, dataset_dir);
      const fs::path dir = out / mcfg.name;
      print_train_summary(train::train_full(mcfg, ds, dir), dir);
    } else if (infer->parsed()) {
      auto pipe = train::Pipeline::load(ckpt);
      const auto r = pipe.infer(load_tnsr(infer_input));
      save_tnsr(r.s_den, out / "s_den.tnsr");
      save_tnsr(r.i_in, out / "i_in.tnsr");
      save_tnsr(r.i_hat, out / "i_hat.tnsr");
      std::cout << (out / "i_hat.tnsr").string() << '\n';
    } else if (eval->parsed()) {
      const Tensor p = load_tnsr(pred), r = load_tnsr(ref);
      const std::string id = eval_id.empty() ? fs::path(pred).stem().string() : eval_id;
      std::cout << metrics::csv_header() << '\n' << metrics::csv_line(metrics::evaluate(id, p, r)) << '\n';
      if (diff_png) metrics::write_mid_slices(metrics::diff_map(p, r), out, id + "_diff");
    } else if (xform->parsed()) {
      const Tensor in = load_tnsr(x_input);
      const fs::path target = x_output.empty() ? out / (op + ".tnsr") : fs::path(x_output);
      if (target.has_parent_path()) fs::create_directories(target.parent_path());
      json side;
      Tensor result;
      if (op == "radon") {
        if (in.rank() != 3 || in.dim(0) != in.dim(1)) throw ShapeError("radon: expected [N,N,Z], got " + shape_str(in.shape()));
        const auto g = projection::Geometry::for_image(static_cast<int>(in.dim(0)), x_angles > 0 ? x_angles : cfg.data.n_angles);
        result = projection::forward_project(in, g);
        side = {{"image_size", g.image_size}, {"n_angles", g.n_angles}, {"n_bins", g.n_bins}};
      } else if (op == "fbp") {
        const json s = read_sidecar(x_input);
        const int size = x_image > 0 ? x_image : s.value("image_size", 0);
        if (size <= 0) throw std::invalid_argument("fbp: pass --image-size (no geometry sidecar next to the input)");
        if (in.rank() != 3) throw ShapeError("fbp: expected [angles,bins,Z], got " + shape_str(in.shape()));
        auto g = projection::Geometry::for_image(size, static_cast<int>(in.dim(0)));
        if (g.n_bins != in.dim(1)) throw ShapeError("fbp: sinogram bins do not match image size " + std::to_string(size));
        result = projection::fbp(in, g, projection::parse_filter(x_filter));
      } else if (op == "dwt") {
        const bool flat = in.rank() == 3;
        const Tensor vol = flat ? in.reshaped(Shape{1, in.dim(0), in.dim(1), in.dim(2)}) : in;
        result = wavelet::dwt3(vol, x_levels).to_tensor();
        side = {{"levels", x_levels},
                {"input_shape", in.shape()},
                {"band_order", "channel = band * C + c; band = sum_l (4*d_l + 2*h_l + w_l) * 8^(l-1), 0 = low"}};
      } else {
        const json s = read_sidecar(x_input);
        const int levels = s.value("levels", x_levels);
        Tensor rec = wavelet::idwt3(wavelet::SubbandSet::from_tensor(in, levels));
        if (s.contains("input_shape")) rec = rec.reshaped(s.at("input_shape").get<Shape>());
        result = std::move(rec);
      }
      save_tnsr(result, target);
      if (!side.is_null()) write_json(fs::path(target.string() + ".json"), side);
      std::cout << target.string() << '\n';
    }
    return 0;
  } catch (const train::TrainingError& e) {
    std::cerr << json({{"error", "training"}, {"message", e.what()}, {"dump", e.dump_dir.string()}}).dump() << '\n';
  } catch (const ShapeError& e) {
    std::cerr << json({{"error", "shape"}, {"message", e.what()}}).dump() << '\n';
  } catch (const std::invalid_argument& e) {
    std::cerr << json({{"error", "invalid_argument"}, {"message", e.what()}}).dump() << '\n';
  } catch (const std::exception& e) {
    std::cerr << json({{"error", "runtime"}, {"message", e.what()}}).dump() << '\n';
  }
  return 1;
}
