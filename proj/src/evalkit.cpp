#include "fermi/evalkit.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <ostream>
#include <set>

#include "fermi/errors.hpp"

namespace fermi::evalkit {

namespace {

void check_two_classes(const ScoredChallenge& s) {
  if (s.scores.size() != s.labels.size())
    throw ValidationError("scored challenge: score/label count mismatch");
  if (s.scores.empty()) throw ValidationError("scored challenge: empty");
  bool pos = false, neg = false;
  for (int y : s.labels) {
    if (y == 1)
      pos = true;
    else if (y == 0)
      neg = true;
    else
      throw ValidationError("scored challenge: labels must be 0 or 1");
  }
  if (!pos || !neg)
    throw ValidationError("scored challenge: both classes must be present");
}

}  // namespace

double auc(const ScoredChallenge& scored) {
  check_two_classes(scored);
  const std::size_t n = scored.scores.size();
  // Midrank formulation of the Mann-Whitney statistic; ties get the average
  // rank of their run, which counts tied pairs exactly 0.5.
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return scored.scores[a] < scored.scores[b];
  });
  std::vector<double> rank(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scored.scores[idx[j + 1]] == scored.scores[idx[i]]) ++j;
    double mid = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = mid;
    i = j + 1;
  }
  double rank_sum = 0.0;
  std::size_t members = 0;
  for (std::size_t k = 0; k < n; ++k)
    if (scored.labels[k] == 1) {
      rank_sum += rank[k];
      ++members;
    }
  const double m = static_cast<double>(members);
  const double u = rank_sum - m * (m + 1.0) / 2.0;
  return u / (m * static_cast<double>(n - members));
}

double tpr_at_fpr(const ScoredChallenge& scored, double fpr_target) {
  check_two_classes(scored);
  if (fpr_target < 0.0 || fpr_target > 1.0)
    throw ValidationError("tpr_at_fpr: target must lie in [0,1]");
  std::set<double> candidates(scored.scores.begin(), scored.scores.end());
  std::size_t n_members = 0, n_non = 0;
  for (int y : scored.labels) (y == 1 ? n_members : n_non) += 1;

  // Ascending scan: the first (smallest) threshold whose FPR is within the
  // target is the conservative operating point.
  for (double tau : candidates) {
    std::size_t fp = 0;
    for (std::size_t i = 0; i < scored.scores.size(); ++i)
      if (scored.labels[i] == 0 && scored.scores[i] >= tau) ++fp;
    double fpr = static_cast<double>(fp) / static_cast<double>(n_non);
    if (fpr <= fpr_target) {
      std::size_t tp = 0;
      for (std::size_t i = 0; i < scored.scores.size(); ++i)
        if (scored.labels[i] == 1 && scored.scores[i] >= tau) ++tp;
      return static_cast<double>(tp) / static_cast<double>(n_members);
    }
  }
  return 0.0;  // even the highest threshold exceeds the target
}

TargetMetrics compute_metrics(const ScoredChallenge& scored) {
  return {auc(scored), tpr_at_fpr(scored, 0.1), tpr_at_fpr(scored, 0.01)};
}

AttackReport aggregate(const std::string& variant,
                       const std::vector<ScoredChallenge>& per_target) {
  if (per_target.empty()) throw ValidationError("aggregate: no targets");
  AttackReport report;
  report.variant = variant;
  for (const ScoredChallenge& s : per_target)
    report.per_target.push_back(compute_metrics(s));

  const double n = static_cast<double>(report.per_target.size());
  auto collect = [&](auto member) {
    double mean = 0.0;
    for (const TargetMetrics& t : report.per_target) mean += t.*member;
    mean /= n;
    double var = 0.0;
    for (const TargetMetrics& t : report.per_target) {
      double d = t.*member - mean;
      var += d * d;
    }
    return std::pair<double, double>(mean, std::sqrt(var / n));
  };
  auto [am, as] = collect(&TargetMetrics::auc);
  auto [t10m, t10s] = collect(&TargetMetrics::tpr_at_10);
  auto [t1m, t1s] = collect(&TargetMetrics::tpr_at_1);
  report.mean = {am, t10m, t1m};
  report.stddev = {as, t10s, t1s};
  return report;
}

std::vector<TimestepCurve> timestep_curves(const diffusion::DiffusionModel& model,
                                           const std::vector<rel::RecordView>& records,
                                           const std::vector<int>& labels,
                                           const fingerprint::ProbeConfig& config) {
  if (records.size() != labels.size() || records.empty())
    throw ValidationError("timestep_curves: records / labels mismatch");
  for (int y : labels)
    if (y != 0 && y != 1) throw UsageError("timestep_curves: challenge must be labeled");
  config.validate(model.schedule.T);

  Matrix encoded = model.encoder.encode_batch(records);
  std::vector<TimestepCurve> curves;
  for (std::size_t t : config.timesteps) {
    Matrix eps = fingerprint::probe_noise(config, t, model.row_width());
    std::vector<double> member_vals, non_vals;
    for (std::size_t i = 0; i < records.size(); ++i) {
      std::vector<double> losses =
          diffusion::per_sample_loss_batch(model, encoded.row(i), t, eps);
      double mean = std::accumulate(losses.begin(), losses.end(), 0.0) /
                    static_cast<double>(losses.size());
      (labels[i] == 1 ? member_vals : non_vals).push_back(mean);
    }
    auto stats = [](const std::vector<double>& v) {
      if (v.empty()) return std::pair<double, double>(0.0, 0.0);
      double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      double var = 0.0;
      for (double x : v) var += (x - mean) * (x - mean);
      return std::pair<double, double>(mean, std::sqrt(var / static_cast<double>(v.size())));
    };
    auto [mm, ms] = stats(member_vals);
    auto [nm, ns] = stats(non_vals);
    curves.push_back({t, mm, ms, nm, ns});
  }
  return curves;
}

void write_curves_csv(std::ostream& os, const std::vector<TimestepCurve>& curves) {
  os << "t,member_mean,member_std,nonmember_mean,nonmember_std\n";
  auto fmt = [](double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
  };
  for (const TimestepCurve& c : curves)
    os << c.t << ',' << fmt(c.member_mean) << ',' << fmt(c.member_std) << ','
       << fmt(c.nonmember_mean) << ',' << fmt(c.nonmember_std) << "\n";
}

double ks_statistic(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw ValidationError("ks_statistic: empty sample");
  std::vector<double> sa(a.begin(), a.end()), sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  double d = 0.0;
  std::size_t i = 0, j = 0;
  while (i < sa.size() || j < sb.size()) {
    double x = i < sa.size() && (j >= sb.size() || sa[i] <= sb[j]) ? sa[i] : sb[j];
    while (i < sa.size() && sa[i] <= x) ++i;
    while (j < sb.size() && sb[j] <= x) ++j;
    double fa = static_cast<double>(i) / static_cast<double>(sa.size());
    double fb = static_cast<double>(j) / static_cast<double>(sb.size());
    d = std::max(d, std::abs(fa - fb));
  }
  return d;
}

double tvd_categorical(std::span<const double> a, std::span<const double> b,
                       std::size_t n_categories) {
  if (a.empty() || b.empty()) throw ValidationError("tvd: empty sample");
  std::vector<double> pa(n_categories, 0.0), pb(n_categories, 0.0);
  for (double v : a) pa.at(static_cast<std::size_t>(v)) += 1.0;
  for (double v : b) pb.at(static_cast<std::size_t>(v)) += 1.0;
  double d = 0.0;
  for (std::size_t k = 0; k < n_categories; ++k)
    d += std::abs(pa[k] / static_cast<double>(a.size()) -
                  pb[k] / static_cast<double>(b.size()));
  return d / 2.0;
}

namespace {

std::vector<double> column(const Matrix& m, std::size_t j) {
  std::vector<double> v(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) v[i] = m(i, j);
  return v;
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    syy += y[i] * y[i];
    sxy += x[i] * y[i];
  }
  double cov = n * sxy - sx * sy;
  double vx = n * sxx - sx * sx;
  double vy = n * syy - sy * sy;
  if (vx <= 0.0 || vy <= 0.0) return 0.0;  // degenerate column
  return cov / std::sqrt(vx * vy);
}

void check_layout(const rel::RowLayout& layout, const Matrix& real,
                  const Matrix& synthetic) {
  if (real.cols() != layout.cols.size() || synthetic.cols() != layout.cols.size())
    throw ValidationError("fidelity metric: column count does not match layout");
  if (real.rows() == 0 || synthetic.rows() == 0)
    throw ValidationError("fidelity metric: empty table");
}

}  // namespace

double shape_metric(const rel::RowLayout& layout, const Matrix& real,
                    const Matrix& synthetic) {
  check_layout(layout, real, synthetic);
  double total = 0.0;
  for (std::size_t j = 0; j < layout.cols.size(); ++j) {
    std::vector<double> r = column(real, j), s = column(synthetic, j);
    total += layout.cols[j].kind == rel::ColKind::Numeric
                 ? ks_statistic(r, s)
                 : tvd_categorical(r, s, layout.cols[j].categories.size());
  }
  return total / static_cast<double>(layout.cols.size());
}

double trend_metric(const rel::RowLayout& layout, const Matrix& real,
                    const Matrix& synthetic) {
  check_layout(layout, real, synthetic);
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < layout.cols.size(); ++a)
    for (std::size_t b = a + 1; b < layout.cols.size(); ++b) {
      if (layout.cols[a].kind != layout.cols[b].kind) continue;
      std::vector<double> ra = column(real, a), rb = column(real, b);
      std::vector<double> sa = column(synthetic, a), sb = column(synthetic, b);
      if (layout.cols[a].kind == rel::ColKind::Numeric) {
        total += std::abs(pearson(ra, rb) - pearson(sa, sb));
      } else {
        // TVD between the joint contingency tables of the pair.
        std::size_t ka = layout.cols[a].categories.size();
        std::size_t kb = layout.cols[b].categories.size();
        std::vector<double> joint_r(ka * kb, 0.0), joint_s(ka * kb, 0.0);
        for (std::size_t i = 0; i < ra.size(); ++i)
          joint_r[static_cast<std::size_t>(ra[i]) * kb + static_cast<std::size_t>(rb[i])] += 1.0;
        for (std::size_t i = 0; i < sa.size(); ++i)
          joint_s[static_cast<std::size_t>(sa[i]) * kb + static_cast<std::size_t>(sb[i])] += 1.0;
        double d = 0.0;
        for (std::size_t k = 0; k < joint_r.size(); ++k)
          d += std::abs(joint_r[k] / static_cast<double>(ra.size()) -
                        joint_s[k] / static_cast<double>(sa.size()));
        total += d / 2.0;
      }
      ++pairs;
    }
  return pairs == 0 ? 0.0 : total / static_cast<double>(pairs);
}

}  // namespace fermi::evalkit
