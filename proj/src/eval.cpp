#include "sliceprop/eval.hpp"

#include "sliceprop/errors.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>

namespace sliceprop {

namespace {

void require_binary(const Eigen::Ref<const Image<float>>& m, const char* what) {
  if (((m != 0.0f) && (m != 1.0f)).any()) throw InvariantError(std::string("dice: ") + what + " is not binary");
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

double pstd_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / double(v.size()));
}

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw PersistenceError(path.string(), "cannot open for writing");
  out << std::setprecision(9);
  return out;
}

}  // namespace

double dice(const Eigen::Ref<const Image<float>>& pred, const Eigen::Ref<const Image<float>>& gt) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols()) throw ShapeError("dice: shapes differ");
  require_binary(pred, "prediction");
  require_binary(gt, "ground truth");
  const double p = pred.sum();
  const double g = gt.sum();
  if (p + g == 0.0) return 1.0;
  return 2.0 * double((pred * gt).sum()) / (p + g);
}

double dice(const MaskVolume& pred, const MaskVolume& gt) {
  if (pred.shape != gt.shape) throw ShapeError("dice: volume shapes differ");
  const Eigen::Map<const Image<float>> p(pred.data.data(), 1, Index(pred.data.size()));
  const Eigen::Map<const Image<float>> g(gt.data.data(), 1, Index(gt.data.size()));
  return dice(p, g);
}

std::vector<DecayPoint> dice_decay_curve(const MaskVolume& pred, const MaskVolume& gt, int annotated_index,
                                         EmptyPolicy policy) {
  if (pred.shape != gt.shape) throw ShapeError("dice_decay_curve: shapes differ");
  std::map<int, std::pair<double, int>> groups;
  for (int z = 0; z < gt.shape.depth; ++z) {
    if (policy == EmptyPolicy::skip && pred.slice(z).sum() == 0.0f && gt.slice(z).sum() == 0.0f) continue;
    auto& g = groups[std::abs(z - annotated_index)];
    g.first += dice(pred.slice(z), gt.slice(z));
    g.second += 1;
  }
  std::vector<DecayPoint> out;
  for (const auto& [d, g] : groups) out.push_back({d, g.first / g.second, g.second});
  return out;
}

VolumeScore score_volume(const MaskVolume& pred, const MaskVolume& gt, int annotated_index, const std::string& family) {
  VolumeScore s;
  s.volume_id = gt.id;
  s.family = family;
  s.annotated_index = annotated_index;
  for (int z = 0; z < gt.shape.depth; ++z) s.slice_dice.push_back(dice(pred.slice(z), gt.slice(z)));
  s.volume_dice = dice(pred, gt);
  return s;
}

double RunResult::mean() const {
  std::vector<double> v;
  for (const auto& s : volumes) v.push_back(s.volume_dice);
  return mean_of(v);
}

double RunResult::stddev() const {
  std::vector<double> v;
  for (const auto& s : volumes) v.push_back(s.volume_dice);
  return pstd_of(v);
}

std::vector<SummaryRow> summarize_runs(const std::vector<RunResult>& results) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const RunResult*>> groups;
  for (const auto& r : results) {
    if (!groups.count(r.run_id)) order.push_back(r.run_id);
    groups[r.run_id].push_back(&r);
  }
  std::vector<SummaryRow> rows;
  for (const auto& id : order) {
    SummaryRow row;
    row.run = id;
    std::vector<double> means;
    std::map<std::string, std::vector<double>> fam;
    for (const RunResult* r : groups[id]) {
      means.push_back(r->mean());
      for (const auto& s : r->volumes) fam[s.family].push_back(s.volume_dice);
    }
    row.mean = mean_of(means);
    row.std = pstd_of(means);
    row.n = static_cast<int>(means.size());
    for (const auto& [f, v] : fam) row.family_mean[f] = mean_of(v);
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_results_csv(const std::vector<RunResult>& results, const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "run,seed,volume,family,z,dice\n";
  for (const auto& r : results)
    for (const auto& v : r.volumes)
      for (std::size_t z = 0; z < v.slice_dice.size(); ++z)
        out << r.run_id << "," << r.seed << "," << v.volume_id << "," << v.family << "," << z << "," << v.slice_dice[z]
            << "\n";
}

void write_summary_csv(const std::vector<SummaryRow>& rows, const std::filesystem::path& path) {
  std::set<std::string> families;
  for (const auto& r : rows)
    for (const auto& [f, _] : r.family_mean) families.insert(f);
  auto out = open_csv(path);
  out << "run,mean,std,n";
  for (const auto& f : families) out << ",mean_" << f;
  out << "\n";
  for (const auto& r : rows) {
    out << r.run << "," << r.mean << "," << r.std << "," << r.n;
    for (const auto& f : families) {
      out << ",";
      if (auto it = r.family_mean.find(f); it != r.family_mean.end()) out << it->second;
    }
    out << "\n";
  }
}

std::vector<DecayRow> decay_table(const std::vector<RunResult>& results) {
  std::vector<std::string> order;
  std::map<std::string, std::map<int, std::pair<double, int>>> acc;
  for (const auto& r : results) {
    if (!acc.count(r.run_id)) order.push_back(r.run_id);
    auto& runs = acc[r.run_id];
    for (const auto& v : r.volumes)
      for (std::size_t z = 0; z < v.slice_dice.size(); ++z) {
        auto& cell = runs[std::abs(int(z) - v.annotated_index)];
        cell.first += v.slice_dice[z];
        cell.second += 1;
      }
  }
  std::vector<DecayRow> rows;
  for (const auto& id : order)
    for (const auto& [d, cell] : acc[id]) rows.push_back({id, d, cell.first / cell.second});
  return rows;
}

void write_decay_csv(const std::vector<DecayRow>& rows, const std::filesystem::path& path) {
  auto out = open_csv(path);
  out << "run,distance,mean_dice\n";
  for (const auto& r : rows) out << r.run << "," << r.distance << "," << r.mean_dice << "\n";
}

}  // namespace sliceprop
