#include "triplet/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

namespace triplet::data {

namespace fs = std::filesystem;
using nlohmann::json;

std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> tags) {
  // splitmix64 chained over the tags
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  std::uint64_t h = mix(master);
  for (auto t : tags) h = mix(h ^ mix(t + 0x632be59bd9b4e019ULL));
  return h;
}

namespace {

double uniform(std::mt19937_64& rng, double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); }

bool inside(const Ellipsoid& e, double r, double c, double s) {
  const double dr = r - e.center[0], dc = c - e.center[1], ds = s - e.center[2];
  const double cs = std::cos(e.angle), sn = std::sin(e.angle);
  const double u = (cs * dr + sn * dc) / e.axes[0];
  const double v = (-sn * dr + cs * dc) / e.axes[1];
  const double w = ds / e.axes[2];
  return u * u + v * v + w * w <= 1.0;
}

void paint(Tensor& vol, const Ellipsoid& e) {
  const auto n0 = vol.dim(0), n1 = vol.dim(1), n2 = vol.dim(2);
  for (std::int64_t r = 0; r < n0; ++r)
    for (std::int64_t c = 0; c < n1; ++c)
      for (std::int64_t s = 0; s < n2; ++s)
        if (inside(e, static_cast<double>(r), static_cast<double>(c), static_cast<double>(s)))
          vol[static_cast<std::size_t>((r * n1 + c) * n2 + s)] = static_cast<float>(e.intensity);
}

void blur_axis(Tensor& vol, int axis, const std::vector<double>& k) {
  const std::int64_t n[3] = {vol.dim(0), vol.dim(1), vol.dim(2)};
  const std::int64_t stride[3] = {n[1] * n[2], n[2], 1};
  const auto half = static_cast<std::int64_t>(k.size() / 2);
  const Tensor src = vol;
  for (std::int64_t r = 0; r < n[0]; ++r)
    for (std::int64_t c = 0; c < n[1]; ++c)
      for (std::int64_t s = 0; s < n[2]; ++s) {
        const std::int64_t idx[3] = {r, c, s};
        const std::int64_t base = r * stride[0] + c * stride[1] + s - idx[axis] * stride[axis];
        double acc = 0.0;
        for (std::int64_t t = -half; t <= half; ++t) {
          const std::int64_t p = std::clamp<std::int64_t>(idx[axis] + t, 0, n[axis] - 1);
          acc += k[static_cast<std::size_t>(t + half)] * src[static_cast<std::size_t>(base + p * stride[axis])];
        }
        vol[static_cast<std::size_t>(r * stride[0] + c * stride[1] + s)] = static_cast<float>(acc);
      }
}

void gaussian_blur(Tensor& vol, double sigma) {
  if (!(sigma > 0.0)) return;
  const int half = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * half + 1));
  double total = 0.0;
  for (int t = -half; t <= half; ++t) total += k[static_cast<std::size_t>(t + half)] = std::exp(-0.5 * t * t / (sigma * sigma));
  for (auto& v : k) v /= total;
  for (int axis = 0; axis < 3; ++axis) blur_axis(vol, axis, k);
}

}  // namespace

Phantom generate_phantom(const PhantomConfig& cfg, std::uint64_t seed) {
  const int n = cfg.size[0], z = cfg.size[2];
  if (cfg.size[0] != cfg.size[1]) throw std::invalid_argument("generate_phantom: slices must be square");
  if (n < 8 || z < 8) throw std::invalid_argument("generate_phantom: N and Z must be at least 8");
  if (cfg.n_structures < 0) throw std::invalid_argument("generate_phantom: n_structures must be nonnegative");
  if (!(cfg.intensity_min >= 0.0 && cfg.intensity_max > cfg.intensity_min)) {
    throw std::invalid_argument("generate_phantom: intensity range must satisfy 0 <= min < max");
  }
  std::mt19937_64 rng(seed);
  const double lo = cfg.intensity_min, hi = cfg.intensity_max, span = hi - lo;
  const double mid = (n - 1) / 2.0, zmid = (z - 1) / 2.0;

  Phantom ph;
  ph.seed = seed;
  ph.volume = Tensor(Shape{n, n, z});

  Ellipsoid body;
  body.kind = Ellipsoid::Kind::Background;
  body.center = {mid + uniform(rng, -0.03, 0.03) * n, mid + uniform(rng, -0.03, 0.03) * n, zmid};
  body.axes = {uniform(rng, 0.34, 0.42) * n, uniform(rng, 0.28, 0.38) * n, uniform(rng, 0.6, 0.8) * z};
  body.angle = uniform(rng, -0.3, 0.3);
  body.intensity = uniform(rng, lo, lo + 0.25 * span);
  ph.structures.push_back(body);

  const int n_lesions = cfg.n_structures / 3;
  const int n_organs = cfg.n_structures - n_lesions;
  // centres are drawn inside the body's inner region, in body coordinates
  auto interior_point = [&](double frac) {
    const double rad = frac * std::sqrt(uniform(rng, 0.0, 1.0));
    const double phi = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const double u = rad * std::cos(phi) * body.axes[0], v = rad * std::sin(phi) * body.axes[1];
    const double cs = std::cos(body.angle), sn = std::sin(body.angle);
    return std::array<double, 3>{body.center[0] + cs * u - sn * v, body.center[1] + sn * u + cs * v,
                                 zmid + uniform(rng, -0.3, 0.3) * z};
  };
  for (int i = 0; i < n_organs; ++i) {
    Ellipsoid e;
    e.center = interior_point(0.6);
    e.axes = {uniform(rng, 0.06, 0.16) * n, uniform(rng, 0.06, 0.16) * n, uniform(rng, 0.2, 0.45) * z};
    e.angle = uniform(rng, 0.0, std::numbers::pi);
    e.intensity = uniform(rng, lo, hi);
    ph.structures.push_back(e);
  }
  for (int i = 0; i < n_lesions; ++i) {
    Ellipsoid e;
    e.kind = Ellipsoid::Kind::Lesion;
    e.center = interior_point(0.7);
    const double r = uniform(rng, 1.5, 3.0);
    e.axes = {r, r, r};
    e.intensity = uniform(rng, hi - 0.25 * span, hi);
    ph.structures.push_back(e);
  }
  for (const auto& e : ph.structures) paint(ph.volume, e);
  gaussian_blur(ph.volume, cfg.blur_sigma);
  for (auto& v : ph.volume.vec()) v = std::max(v, 0.0f);
  return ph;
}

Normalization parse_normalization(const std::string& name) {
  if (name == "minmax") return Normalization::MinMax;
  if (name == "zscore") return Normalization::ZScore;
  throw std::invalid_argument("unknown normalization '" + name + "' (expected minmax|zscore)");
}

std::string to_string(Normalization n) { return n == Normalization::MinMax ? "minmax" : "zscore"; }

std::pair<float, float> percentile_bounds(const Tensor& volume, double lo, double hi) {
  if (volume.empty()) throw std::invalid_argument("percentile_bounds: empty volume");
  std::vector<float> v = volume.vec();
  std::sort(v.begin(), v.end());
  const double last = static_cast<double>(v.size() - 1);
  const auto ilo = static_cast<std::size_t>(std::floor(lo * last));
  const auto ihi = static_cast<std::size_t>(std::ceil(hi * last));
  return {v[ilo], v[ihi]};
}

Tensor preprocess(const Tensor& volume, Normalization mode) {
  if (volume.empty()) throw std::invalid_argument("preprocess: empty volume");
  const auto [plo, phi] = percentile_bounds(volume);
  Tensor out(volume.shape());
  if (!(phi > plo)) return out;
  for (std::size_t i = 0; i < volume.numel(); ++i) out[i] = std::clamp(volume[i], plo, phi);
  if (mode == Normalization::MinMax) {
    const double range = static_cast<double>(phi) - plo;
    for (auto& v : out.vec()) v = static_cast<float>((v - static_cast<double>(plo)) / range);
  } else {
    const double mean = out.mean();
    double var = 0.0;
    for (float v : out.vec()) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(out.numel()));
    for (auto& v : out.vec()) v = static_cast<float>((v - mean) / sd);
  }
  return out;
}

namespace {

void check_patch_extent(const Tensor& volume, std::array<std::int64_t, 3> patch) {
  if (volume.rank() != 3) throw ShapeError("extract_patches: expected a [N,N,Z] volume, got " + shape_str(volume.shape()));
  for (std::size_t a = 0; a < 3; ++a) {
    if (patch[a] < 1 || patch[a] > volume.dim(a)) {
      throw std::invalid_argument("extract_patches: patch extent " + std::to_string(patch[a]) + " on axis " +
                                  std::to_string(a) + " does not fit volume extent " + std::to_string(volume.dim(a)));
    }
  }
}

std::vector<std::int64_t> active_voxels(const Tensor& volume, double threshold) {
  const double cut = threshold * volume.max();
  std::vector<std::int64_t> idx;
  for (std::size_t i = 0; i < volume.numel(); ++i)
    if (volume[i] > cut) idx.push_back(static_cast<std::int64_t>(i));
  return idx;
}

}  // namespace

std::vector<Patch> extract_patches(const Tensor& volume, std::array<std::int64_t, 3> patch, int n_patches,
                                   double threshold, std::uint64_t seed) {
  check_patch_extent(volume, patch);
  if (n_patches < 0) throw std::invalid_argument("extract_patches: n_patches must be nonnegative");
  const std::int64_t n[3] = {volume.dim(0), volume.dim(1), volume.dim(2)};
  std::mt19937_64 rng(seed);
  const auto active = active_voxels(volume, threshold);
  std::vector<char> covered(volume.numel(), 0);

  auto pick_origin_around = [&](std::int64_t flat) {
    const std::int64_t pos[3] = {flat / (n[1] * n[2]), (flat / n[2]) % n[1], flat % n[2]};
    std::array<std::int64_t, 3> o{};
    for (int a = 0; a < 3; ++a) {
      const std::int64_t lo = std::max<std::int64_t>(0, pos[a] - patch[a] + 1);
      const std::int64_t hi = std::min(pos[a], n[a] - patch[a]);
      o[a] = std::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
    }
    return o;
  };

  std::vector<Patch> out;
  for (int k = 0; k < n_patches; ++k) {
    std::array<std::int64_t, 3> o{};
    if (active.empty()) {
      for (int a = 0; a < 3; ++a) o[a] = std::uniform_int_distribution<std::int64_t>(0, n[a] - patch[a])(rng);
    } else {
      std::vector<std::int64_t> open;
      for (auto i : active)
        if (!covered[static_cast<std::size_t>(i)]) open.push_back(i);
      const auto& pool = open.empty() ? active : open;
      o = pick_origin_around(pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)]);
    }
    Patch p;
    p.origin = o;
    p.data = Tensor(Shape{patch[0], patch[1], patch[2]});
    for (std::int64_t r = 0; r < patch[0]; ++r)
      for (std::int64_t c = 0; c < patch[1]; ++c)
        for (std::int64_t s = 0; s < patch[2]; ++s) {
          const std::int64_t src = ((o[0] + r) * n[1] + o[1] + c) * n[2] + o[2] + s;
          p.data[static_cast<std::size_t>((r * patch[1] + c) * patch[2] + s)] = volume[static_cast<std::size_t>(src)];
          covered[static_cast<std::size_t>(src)] = 1;
        }
    out.push_back(std::move(p));
  }
  return out;
}

double patch_coverage(const Tensor& volume, std::array<std::int64_t, 3> patch,
                      const std::vector<std::array<std::int64_t, 3>>& origins, double threshold) {
  check_patch_extent(volume, patch);
  const auto active = active_voxels(volume, threshold);
  if (active.empty()) return 1.0;
  const std::int64_t n1 = volume.dim(1), n2 = volume.dim(2);
  std::size_t hit = 0;
  for (auto i : active) {
    const std::int64_t pos[3] = {i / (n1 * n2), (i / n2) % n1, i % n2};
    for (const auto& o : origins) {
      bool in = true;
      for (int a = 0; a < 3; ++a) in = in && pos[a] >= o[a] && pos[a] < o[a] + patch[a];
      if (in) {
        ++hit;
        break;
      }
    }
  }
  return static_cast<double>(hit) / static_cast<double>(active.size());
}

Reconstructor parse_reconstructor(const std::string& name) {
  if (name == "fbp") return Reconstructor::Fbp;
  if (name == "osem") return Reconstructor::Osem;
  throw std::invalid_argument("unknown reconstructor '" + name + "' (expected fbp|osem)");
}

std::string to_string(Reconstructor r) { return r == Reconstructor::Fbp ? "fbp" : "osem"; }

Tensor reconstruct(const Tensor& sinogram, const PairOptions& opt) {
  if (opt.reconstructor == Reconstructor::Fbp) return projection::fbp(sinogram, opt.geometry, opt.filter);
  projection::OsemOptions o;
  o.iterations = opt.osem_iterations;
  o.subsets = opt.osem_subsets;
  return projection::mlem_osem(sinogram, opt.geometry, o);
}

SamplePair make_pair(const Tensor& patch, const PairOptions& opt, std::uint64_t seed) {
  SamplePair p;
  p.s_std = projection::forward_project(patch, opt.geometry);
  for (auto& v : p.s_std.vec()) v = std::max(v, 0.0f);
  p.s_low = projection::simulate_low_dose(p.s_std, opt.dose, opt.count_scale, seed);
  p.i_std = reconstruct(p.s_std, opt);
  p.i_low = reconstruct(p.s_low, opt);
  return p;
}

std::vector<int> split_folds(int n_phantoms, int k, std::uint64_t seed) {
  if (k < 1) throw std::invalid_argument("split_folds: k must be at least 1");
  if (n_phantoms < k) {
    throw std::invalid_argument("split_folds: " + std::to_string(n_phantoms) + " phantoms cannot fill " +
                                std::to_string(k) + " folds");
  }
  std::vector<int> order(static_cast<std::size_t>(n_phantoms));
  for (int i = 0; i < n_phantoms; ++i) order[static_cast<std::size_t>(i)] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<int> fold(static_cast<std::size_t>(n_phantoms));
  for (int r = 0; r < n_phantoms; ++r) fold[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] = r % k;
  return fold;
}

std::vector<bool> holdout_split(int n_phantoms, std::uint64_t seed, double test_fraction) {
  if (n_phantoms < 2) throw std::invalid_argument("holdout_split: need at least 2 phantoms");
  std::vector<int> order(static_cast<std::size_t>(n_phantoms));
  for (int i = 0; i < n_phantoms; ++i) order[static_cast<std::size_t>(i)] = i;
  std::mt19937_64 rng(derive_seed(seed, {0x686f6c64ULL}));
  std::shuffle(order.begin(), order.end(), rng);
  const int n_test = std::clamp(static_cast<int>(std::lround(test_fraction * n_phantoms)), 1, n_phantoms - 1);
  std::vector<bool> test(static_cast<std::size_t>(n_phantoms), false);
  for (int r = 0; r < n_test; ++r) test[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] = true;
  return test;
}

projection::Geometry DatasetConfig::geometry() const {
  if (patch[0] != patch[1]) throw std::invalid_argument("dataset config: patches must be square in-plane");
  return projection::Geometry::for_image(patch[0], n_angles);
}

PairOptions DatasetConfig::pair_options() const {
  PairOptions o;
  o.geometry = geometry();
  o.dose = dose;
  o.count_scale = count_scale;
  o.reconstructor = reconstructor;
  o.filter = filter;
  o.osem_iterations = osem_iterations;
  o.osem_subsets = osem_subsets;
  return o;
}

void to_json(json& j, const PhantomConfig& c) {
  j = {{"size", c.size},
       {"n_structures", c.n_structures},
       {"intensity_min", c.intensity_min},
       {"intensity_max", c.intensity_max},
       {"blur_sigma", c.blur_sigma}};
}

void from_json(const json& j, PhantomConfig& c) {
  c.size = j.value("size", c.size);
  c.n_structures = j.value("n_structures", c.n_structures);
  c.intensity_min = j.value("intensity_min", c.intensity_min);
  c.intensity_max = j.value("intensity_max", c.intensity_max);
  c.blur_sigma = j.value("blur_sigma", c.blur_sigma);
}

void to_json(json& j, const DatasetConfig& c) {
  j = {{"phantom", c.phantom},
       {"n_phantoms", c.n_phantoms},
       {"patch", c.patch},
       {"patches_per_phantom", c.patches_per_phantom},
       {"activity_threshold", c.activity_threshold},
       {"normalization", to_string(c.normalization)},
       {"n_angles", c.n_angles},
       {"dose", c.dose},
       {"count_scale", c.count_scale},
       {"reconstructor", to_string(c.reconstructor)},
       {"filter", c.filter == projection::Filter::Ramp ? "ramp" : "hann"},
       {"osem_iterations", c.osem_iterations},
       {"osem_subsets", c.osem_subsets},
       {"folds", c.folds}};
}

void from_json(const json& j, DatasetConfig& c) {
  if (j.contains("phantom")) c.phantom = j.at("phantom").get<PhantomConfig>();
  c.n_phantoms = j.value("n_phantoms", c.n_phantoms);
  c.patch = j.value("patch", c.patch);
  c.patches_per_phantom = j.value("patches_per_phantom", c.patches_per_phantom);
  c.activity_threshold = j.value("activity_threshold", c.activity_threshold);
  if (j.contains("normalization")) c.normalization = parse_normalization(j.at("normalization").get<std::string>());
  c.n_angles = j.value("n_angles", c.n_angles);
  c.dose = j.value("dose", c.dose);
  c.count_scale = j.value("count_scale", c.count_scale);
  if (j.contains("reconstructor")) c.reconstructor = parse_reconstructor(j.at("reconstructor").get<std::string>());
  if (j.contains("filter")) c.filter = projection::parse_filter(j.at("filter").get<std::string>());
  c.osem_iterations = j.value("osem_iterations", c.osem_iterations);
  c.osem_subsets = j.value("osem_subsets", c.osem_subsets);
  c.folds = j.value("folds", c.folds);
}

Dataset build_dataset(const DatasetConfig& cfg, std::uint64_t seed) {
  if (cfg.n_phantoms < 1) throw std::invalid_argument("build_dataset: n_phantoms must be positive");
  Dataset ds;
  ds.config = cfg;
  ds.seed = seed;
  ds.phantom_fold = cfg.folds > 1 ? split_folds(cfg.n_phantoms, cfg.folds, derive_seed(seed, {0x666f6c64ULL}))
                                  : std::vector<int>(static_cast<std::size_t>(cfg.n_phantoms), 0);
  const auto opt = cfg.pair_options();
  const std::array<std::int64_t, 3> patch{cfg.patch[0], cfg.patch[1], cfg.patch[2]};
  for (int p = 0; p < cfg.n_phantoms; ++p) {
    const auto ps = static_cast<std::uint64_t>(p);
    const Phantom ph = generate_phantom(cfg.phantom, derive_seed(seed, {ps, 1}));
    const Tensor vol = preprocess(ph.volume, cfg.normalization);
    auto patches = extract_patches(vol, patch, cfg.patches_per_phantom, cfg.activity_threshold, derive_seed(seed, {ps, 2}));
    for (std::size_t k = 0; k < patches.size(); ++k) {
      Sample s;
      s.phantom_id = p;
      s.patch_id = static_cast<int>(k);
      s.origin = patches[k].origin;
      s.pair = make_pair(patches[k].data, opt, derive_seed(seed, {ps, 3, k}));
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

std::string config_hash(const json& j) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : j.dump()) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

namespace {

constexpr const char* kFields[4] = {"s_std", "s_low", "i_std", "i_low"};

fs::path sample_dir(const fs::path& dir, int phantom, int patch) {
  return dir / std::to_string(phantom) / std::to_string(patch);
}

}  // namespace

void save_dataset(const Dataset& ds, const fs::path& dir) {
  fs::create_directories(dir);
  json samples = json::array();
  for (const auto& s : ds.samples) {
    const auto d = sample_dir(dir, s.phantom_id, s.patch_id);
    fs::create_directories(d);
    save_tnsr(s.pair.s_std, d / "s_std.tnsr");
    save_tnsr(s.pair.s_low, d / "s_low.tnsr");
    save_tnsr(s.pair.i_std, d / "i_std.tnsr");
    save_tnsr(s.pair.i_low, d / "i_low.tnsr");
    samples.push_back({{"phantom", s.phantom_id},
                       {"patch", s.patch_id},
                       {"origin", s.origin},
                       {"fold", ds.fold_of(s)},
                       {"noise_seed", derive_seed(ds.seed, {static_cast<std::uint64_t>(s.phantom_id), 3,
                                                            static_cast<std::uint64_t>(s.patch_id)})}});
  }
  const json cfg = ds.config;
  const json manifest = {{"format", "triplet-dataset"},
                         {"version", 1},
                         {"seed", ds.seed},
                         {"config", cfg},
                         {"config_hash", config_hash(cfg)},
                         {"phantom_fold", ds.phantom_fold},
                         {"samples", samples}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

Dataset load_dataset(const fs::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw std::runtime_error("dataset manifest not found: " + path.string());
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw std::runtime_error("dataset manifest is not valid JSON: " + std::string(e.what()));
  }
  if (m.value("format", "") != "triplet-dataset") throw std::runtime_error("not a dataset manifest: " + path.string());
  Dataset ds;
  ds.config = m.at("config").get<DatasetConfig>();
  if (m.at("config_hash").get<std::string>() != config_hash(json(ds.config))) {
    throw std::runtime_error("dataset manifest config hash mismatch");
  }
  ds.seed = m.at("seed").get<std::uint64_t>();
  ds.phantom_fold = m.at("phantom_fold").get<std::vector<int>>();
  for (const auto& e : m.at("samples")) {
    Sample s;
    s.phantom_id = e.at("phantom").get<int>();
    s.patch_id = e.at("patch").get<int>();
    s.origin = e.at("origin").get<std::array<std::int64_t, 3>>();
    if (s.phantom_id < 0 || static_cast<std::size_t>(s.phantom_id) >= ds.phantom_fold.size()) {
      throw std::runtime_error("dataset manifest references unknown phantom " + std::to_string(s.phantom_id));
    }
    const auto d = sample_dir(dir, s.phantom_id, s.patch_id);
    Tensor* fields[4] = {&s.pair.s_std, &s.pair.s_low, &s.pair.i_std, &s.pair.i_low};
    for (int f = 0; f < 4; ++f) {
      const auto file = d / (std::string(kFields[f]) + ".tnsr");
      if (!fs::exists(file)) throw std::runtime_error("dataset file missing: " + file.string());
      *fields[f] = load_tnsr(file);
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace triplet::data
