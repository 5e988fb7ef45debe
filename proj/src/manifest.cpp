#include "xraysep/manifest.hpp"

#include <fstream>
#include <json.hpp>
#include <set>

#include "xraysep/image_io.hpp"

namespace xraysep {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

void reject_unknown(const json& obj, const std::set<std::string>& known,
                    const std::string& where) {
  for (const auto& [key, _] : obj.items()) {
    if (!known.count(key)) {
      throw DataError(where + ": unknown key '" + key + "'");
    }
  }
}

template <typename V>
V field(const json& obj, const char* key, V fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<V>();
  } catch (const json::exception& e) {
    throw DataError(where + ": bad value for '" + key + "': " + e.what());
  }
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : (base / path).lexically_normal();
}

std::string relative_if_under(const fs::path& base, const fs::path& p) {
  const fs::path rel = p.lexically_relative(base);
  if (!rel.empty() && *rel.begin() != "..") return rel.generic_string();
  return p.generic_string();
}

ImagePlane load_gray(const fs::path& path) {
  ImagePlane img = load_png(path);
  return img.channels() == 3 ? luminance(img) : img;
}

}  // namespace

RunConfig load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read manifest " + path.string());
  json root;
  try {
    root = json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("manifest " + path.string() + ": " + e.what());
  }
  const std::string where = "manifest " + path.string();
  if (!root.is_object()) throw DataError(where + ": expected an object");
  reject_unknown(root, {"r1", "r2", "x", "x1", "x2", "patch_size", "overlap", "train"},
                 where);
  const fs::path base = path.parent_path();
  RunConfig cfg;
  for (const char* key : {"r1", "r2", "x"}) {
    if (!root.contains(key)) throw DataError(where + ": missing '" + key + "'");
  }
  cfg.data.r1 = resolve(base, field<std::string>(root, "r1", "", where));
  cfg.data.r2 = resolve(base, field<std::string>(root, "r2", "", where));
  cfg.data.x = resolve(base, field<std::string>(root, "x", "", where));
  if (root.contains("x1") != root.contains("x2")) {
    throw DataError(where + ": give both 'x1' and 'x2' or neither");
  }
  if (root.contains("x1")) {
    cfg.data.x1 = resolve(base, field<std::string>(root, "x1", "", where));
    cfg.data.x2 = resolve(base, field<std::string>(root, "x2", "", where));
  }
  cfg.data.patch_size = field<std::size_t>(root, "patch_size", 64, where);
  cfg.data.overlap = field<std::size_t>(root, "overlap", 56, where);

  if (root.contains("train")) {
    const json& t = root.at("train");
    const std::string tw = where + " (train)";
    if (!t.is_object()) throw DataError(tw + ": expected an object");
    reject_unknown(t, {"seed", "epochs", "batch_size", "lr", "lambda", "width",
                       "baseline_width", "snapshot_epochs",
                       "squared_reconstruction", "normalize_energy"},
                   tw);
    TrainConfig& tc = cfg.train;
    tc.seed = field<std::uint64_t>(t, "seed", tc.seed, tw);
    tc.epochs = field<std::size_t>(t, "epochs", tc.epochs, tw);
    tc.batch_size = field<std::size_t>(t, "batch_size", tc.batch_size, tw);
    tc.lr = field<double>(t, "lr", tc.lr, tw);
    if (t.contains("lambda")) {
      const auto l = field<std::vector<double>>(t, "lambda", {}, tw);
      if (l.size() != 4) throw DataError(tw + ": 'lambda' needs 4 values");
      tc.lambdas = {l[0], l[1], l[2], l[3]};
    }
    tc.model.width = field<std::size_t>(t, "width", tc.model.width, tw);
    tc.model.baseline_width =
        field<std::size_t>(t, "baseline_width", tc.model.baseline_width, tw);
    tc.snapshot_epochs = field<std::vector<std::size_t>>(
        t, "snapshot_epochs", tc.snapshot_epochs, tw);
    tc.variant.squared_reconstruction = field<bool>(
        t, "squared_reconstruction", tc.variant.squared_reconstruction, tw);
    tc.variant.normalize_energy =
        field<bool>(t, "normalize_energy", tc.variant.normalize_energy, tw);
  }
  return cfg;
}

void save_manifest(const fs::path& path, const DataManifest& data,
                   const std::optional<TrainConfig>& train) {
  const fs::path base = path.parent_path();
  nlohmann::ordered_json root;
  root["r1"] = relative_if_under(base, data.r1);
  root["r2"] = relative_if_under(base, data.r2);
  root["x"] = relative_if_under(base, data.x);
  if (data.has_truth()) {
    root["x1"] = relative_if_under(base, *data.x1);
    root["x2"] = relative_if_under(base, *data.x2);
  }
  root["patch_size"] = data.patch_size;
  root["overlap"] = data.overlap;
  if (train) {
    const LossWeights& l = train->lambdas;
    root["train"] = {{"seed", train->seed},
                     {"epochs", train->epochs},
                     {"batch_size", train->batch_size},
                     {"lr", train->lr},
                     {"lambda", {l.lambda1, l.lambda2, l.lambda3, l.lambda4}},
                     {"width", train->model.width},
                     {"baseline_width", train->model.baseline_width},
                     {"snapshot_epochs", train->snapshot_epochs}};
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << root.dump(2) << '\n';
}

void check_readable(const DataManifest& data) {
  std::vector<fs::path> paths{data.r1, data.r2, data.x};
  if (data.x1) paths.push_back(*data.x1);
  if (data.x2) paths.push_back(*data.x2);
  for (const auto& p : paths) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw DataError("cannot read " + p.string());
  }
}

SeparationProblem load_problem(const DataManifest& data) {
  check_readable(data);
  SeparationProblem problem;
  problem.r1 = load_png(data.r1);
  problem.r2 = load_png(data.r2);
  if (problem.r1.channels() != 3 || problem.r2.channels() != 3) {
    throw DataError("r1 and r2 must be RGB images");
  }
  problem.x = load_gray(data.x);
  if (data.has_truth()) {
    problem.x1_truth = load_gray(*data.x1);
    problem.x2_truth = load_gray(*data.x2);
  }
  const auto same_size = [&](const ImagePlane& img, const fs::path& p) {
    if (img.height() != problem.x.height() || img.width() != problem.x.width()) {
      throw DataError(p.string() + " is " + std::to_string(img.height()) + "x" +
                      std::to_string(img.width()) + ", expected " +
                      std::to_string(problem.x.height()) + "x" +
                      std::to_string(problem.x.width()));
    }
  };
  same_size(problem.r1, data.r1);
  same_size(problem.r2, data.r2);
  if (problem.x1_truth) same_size(*problem.x1_truth, *data.x1);
  if (problem.x2_truth) same_size(*problem.x2_truth, *data.x2);
  problem.patch_size = data.patch_size;
  problem.overlap = data.overlap;
  return problem;
}

void save_mix_sidecar(const fs::path& path, const MixResult& mix,
                      double raw_max) {
  nlohmann::ordered_json root;
  root["factor"] = mix.factor;
  root["raw_max"] = raw_max;
  root["rescaled"] = mix.factor != 1.0;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << root.dump(2) << '\n';
}

}  // namespace xraysep
