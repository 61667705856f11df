#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fermi/diffusion.hpp"
#include "fermi/fingerprint.hpp"
#include "fermi/mat.hpp"
#include "fermi/relstore.hpp"

namespace fermi::evalkit {

// Membership scores with ground-truth labels for one target model.
struct ScoredChallenge {
  std::vector<double> scores;  // in [0,1]
  std::vector<int> labels;     // 0 / 1
};

// Exact Mann-Whitney pair statistic: fraction of (member, non-member) pairs
// where the member scores higher, ties counted 0.5. No binning.
double auc(const ScoredChallenge& scored);

// Conservative TPR at a fixed FPR: threshold is the smallest score value
// whose empirical FPR (predictions at score >= threshold) does not exceed
// the target; no interpolation. Returns 0 if no score value qualifies.
double tpr_at_fpr(const ScoredChallenge& scored, double fpr_target);

struct TargetMetrics {
  double auc = 0.0;
  double tpr_at_10 = 0.0;  // FPR = 0.1
  double tpr_at_1 = 0.0;   // FPR = 0.01
};

TargetMetrics compute_metrics(const ScoredChallenge& scored);

// Cross-target aggregation: mean and population standard deviation
// (divide by N) per metric.
struct AttackReport {
  std::string variant;
  std::vector<TargetMetrics> per_target;
  TargetMetrics mean;
  TargetMetrics stddev;
};

AttackReport aggregate(const std::string& variant,
                       const std::vector<ScoredChallenge>& per_target);

// Per-timestep loss statistics over a labeled challenge: per record the mean
// loss over the probe noise draws, then mean/std (population) per class.
struct TimestepCurve {
  std::size_t t = 0;
  double member_mean = 0.0, member_std = 0.0;
  double nonmember_mean = 0.0, nonmember_std = 0.0;
};

std::vector<TimestepCurve> timestep_curves(const diffusion::DiffusionModel& model,
                                           const std::vector<rel::RecordView>& records,
                                           const std::vector<int>& labels,
                                           const fingerprint::ProbeConfig& config);

void write_curves_csv(std::ostream& os, const std::vector<TimestepCurve>& curves);

// Column-marginal fidelity: Kolmogorov-Smirnov statistic for numeric
// columns, total variation distance for categorical columns.
double ks_statistic(std::span<const double> a, std::span<const double> b);
double tvd_categorical(std::span<const double> a, std::span<const double> b,
                       std::size_t n_categories);

// Mean column-marginal distance over all columns of a table pair. Attribute
// matrices must follow the same layout (kind mismatch is an error).
double shape_metric(const rel::RowLayout& layout, const Matrix& real,
                    const Matrix& synthetic);

// Mean pairwise-dependence distance: |Pearson difference| over numeric column
// pairs, TVD between joint contingency tables over categorical pairs.
double trend_metric(const rel::RowLayout& layout, const Matrix& real,
                    const Matrix& synthetic);

}  // namespace fermi::evalkit
