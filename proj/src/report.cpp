#include "xraysep/report.hpp"

#include <fmt/format.h>

#include <array>
#include <fstream>
#include <json.hpp>
#include <set>

#include "xraysep/image_io.hpp"

namespace xraysep {
namespace {

std::ofstream open_text(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

std::string num(double v) { return fmt::format("{:.10g}", v); }

std::array<double, 4> as_array(const LossWeights& w) {
  return {w.lambda1, w.lambda2, w.lambda3, w.lambda4};
}

}  // namespace

void write_loss_csv(const std::filesystem::path& path,
                    const std::vector<LossBreakdown>& history) {
  auto out = open_text(path);
  out << "epoch,l1,l2,l3,l4,l5,total\n";
  for (std::size_t e = 0; e < history.size(); ++e) {
    const auto& h = history[e];
    out << (e + 1) << ',' << num(h.l1) << ',' << num(h.l2) << ',' << num(h.l3)
        << ',' << num(h.l4) << ',' << num(h.l5) << ',' << num(h.total) << '\n';
  }
}

void write_baseline_loss_csv(const std::filesystem::path& path,
                             const std::vector<double>& history) {
  auto out = open_text(path);
  out << "epoch,loss\n";
  for (std::size_t e = 0; e < history.size(); ++e) {
    out << (e + 1) << ',' << num(history[e]) << '\n';
  }
}

void write_sweep_csv(const std::filesystem::path& path,
                     const SweepReport& report) {
  auto out = open_text(path);
  out << "lambda1,lambda2,lambda3,lambda4,mean_mse,freq_separated,"
         "freq_one_sided,freq_leakage,trials\n";
  for (const auto& e : report.entries) {
    out << num(e.lambdas.lambda1) << ',' << num(e.lambdas.lambda2) << ','
        << num(e.lambdas.lambda3) << ',' << num(e.lambdas.lambda4) << ','
        << (e.mean_mse ? num(*e.mean_mse) : std::string()) << ','
        << num(e.frequencies[0]) << ',' << num(e.frequencies[1]) << ','
        << num(e.frequencies[2]) << ',' << e.trials << '\n';
  }
}

void write_sweep_json(const std::filesystem::path& path,
                      const SweepReport& report) {
  nlohmann::ordered_json root;
  root["entries"] = nlohmann::ordered_json::array();
  for (const auto& e : report.entries) {
    nlohmann::ordered_json entry;
    entry["lambda"] = as_array(e.lambdas);
    entry["trials"] = e.trials;
    entry["mean_mse"] = e.mean_mse ? nlohmann::ordered_json(*e.mean_mse)
                                   : nlohmann::ordered_json(nullptr);
    entry["frequencies"] = {{"separated", e.frequencies[0]},
                            {"one_sided", e.frequencies[1]},
                            {"leakage", e.frequencies[2]}};
    entry["runs"] = nlohmann::ordered_json::array();
    for (const auto& r : e.records) {
      nlohmann::ordered_json run;
      run["seed"] = r.seed;
      run["outcome"] = outcome_name(r.outcome.label);
      run["energy_ratio"] = r.outcome.energy_ratio;
      run["correlation"] = r.outcome.correlation;
      run["mse"] = r.mse ? nlohmann::ordered_json(*r.mse)
                         : nlohmann::ordered_json(nullptr);
      run["recombination_error"] = r.recombination_error;
      run["final_total_loss"] = r.final_loss.total;
      entry["runs"].push_back(run);
    }
    root["entries"].push_back(entry);
  }
  auto out = open_text(path);
  out << root.dump(2) << '\n';
}

bool write_mse_surface(const std::filesystem::path& path,
                       const SweepReport& report) {
  if (report.entries.empty()) return false;
  std::array<std::set<double>, 4> values;
  for (const auto& e : report.entries) {
    if (!e.mean_mse) return false;
    const auto l = as_array(e.lambdas);
    for (std::size_t k = 0; k < 4; ++k) values[k].insert(l[k]);
  }
  std::vector<std::size_t> axes;
  for (std::size_t k = 0; k < 4; ++k) {
    if (values[k].size() > 1) axes.push_back(k);
  }
  if (axes.size() != 2) return false;
  const std::vector<double> rows(values[axes[0]].begin(), values[axes[0]].end());
  const std::vector<double> cols(values[axes[1]].begin(), values[axes[1]].end());
  auto out = open_text(path);
  out << fmt::format("lambda{}\\lambda{}", axes[0] + 1, axes[1] + 1);
  for (const double c : cols) out << ',' << num(c);
  out << '\n';
  for (const double r : rows) {
    out << num(r);
    for (const double c : cols) {
      out << ',';
      for (const auto& e : report.entries) {
        const auto l = as_array(e.lambdas);
        if (l[axes[0]] == r && l[axes[1]] == c) {
          out << num(*e.mean_mse);
          break;
        }
      }
    }
    out << '\n';
  }
  return true;
}

void write_snapshots(const std::filesystem::path& dir,
                     const SeparationResult& result) {
  for (const auto& [epoch, s] : result.snapshots) {
    const std::string prefix = "epoch_" + std::to_string(epoch) + "_";
    save_png(dir / (prefix + "r1hat.png"), s.r1_hat, 8);
    save_png(dir / (prefix + "r2hat.png"), s.r2_hat, 8);
    save_png(dir / (prefix + "x1hat.png"), s.x1_hat, 16);
    save_png(dir / (prefix + "x2hat.png"), s.x2_hat, 16);
  }
}

}  // namespace xraysep
