#include "fermi/evalkit.hpp"

#include <cmath>
#include <set>
#include <sstream>

#include "doctest.h"
#include "fermi/errors.hpp"
#include "fermi/rng.hpp"
#include "test_util.hpp"

using namespace fermi;
using namespace fermi::evalkit;

namespace {

ScoredChallenge make_scored(std::vector<double> member_scores,
                            std::vector<double> non_scores) {
  ScoredChallenge s;
  for (double v : member_scores) {
    s.scores.push_back(v);
    s.labels.push_back(1);
  }
  for (double v : non_scores) {
    s.scores.push_back(v);
    s.labels.push_back(0);
  }
  return s;
}

// O(n^2) pair-count oracle, ties 0.5.
double auc_bruteforce(const ScoredChallenge& s) {
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < s.scores.size(); ++i) {
    if (s.labels[i] != 1) continue;
    for (std::size_t j = 0; j < s.scores.size(); ++j) {
      if (s.labels[j] != 0) continue;
      ++pairs;
      if (s.scores[i] > s.scores[j])
        total += 1.0;
      else if (s.scores[i] == s.scores[j])
        total += 0.5;
    }
  }
  return total / static_cast<double>(pairs);
}

// Full-sweep oracle: best TPR over every candidate threshold whose FPR is
// within the target (prediction rule: score >= threshold).
double tpr_bruteforce(const ScoredChallenge& s, double target) {
  std::set<double> candidates(s.scores.begin(), s.scores.end());
  std::size_t n_members = 0, n_non = 0;
  for (int y : s.labels) (y == 1 ? n_members : n_non) += 1;
  double best = 0.0;
  for (double tau : candidates) {
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < s.scores.size(); ++i) {
      if (s.scores[i] < tau) continue;
      (s.labels[i] == 1 ? tp : fp) += 1;
    }
    if (static_cast<double>(fp) / static_cast<double>(n_non) <= target)
      best = std::max(best, static_cast<double>(tp) / static_cast<double>(n_members));
  }
  return best;
}

ScoredChallenge random_scored(std::uint64_t seed) {
  RngStream rng(seed);
  std::size_t m = 2 + rng.uniform_index(12);
  std::size_t n = 2 + rng.uniform_index(12);
  ScoredChallenge s;
  auto draw = [&] {
    // Quantized scores so ties actually occur.
    return rng.uniform() < 0.5 ? std::floor(rng.uniform() * 8.0) / 8.0 : rng.uniform();
  };
  for (std::size_t i = 0; i < m; ++i) {
    s.scores.push_back(draw());
    s.labels.push_back(1);
  }
  for (std::size_t i = 0; i < n; ++i) {
    s.scores.push_back(draw());
    s.labels.push_back(0);
  }
  return s;
}

}  // namespace

TEST_CASE("auc: perfect separation, ties, hand-enumerated case") {
  CHECK(auc(make_scored({0.9, 0.8}, {0.1, 0.2})) == 1.0);
  CHECK(auc(make_scored({0.5, 0.5}, {0.5, 0.5})) == 0.5);
  CHECK(auc(make_scored({0.9, 0.4}, {0.6, 0.1})) == doctest::Approx(0.75));
  CHECK_THROWS_AS(auc(make_scored({0.5}, {})), ValidationError);
}

TEST_CASE("auc: exact agreement with the O(n^2) oracle on 200 random sets") {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    ScoredChallenge s = random_scored(seed);
    CHECK(auc(s) == auc_bruteforce(s));
  }
}

TEST_CASE("auc: invariant under strictly monotone score transforms") {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    ScoredChallenge s = random_scored(seed * 7 + 1);
    ScoredChallenge warped = s;
    for (double& v : warped.scores) v = std::tanh(3.0 * v) + 0.2 * v * v * v;
    CHECK(auc(s) == auc_bruteforce(warped));
    CHECK(auc(warped) == auc(s));
  }
}

TEST_CASE("tpr_at_fpr: hand threshold sweeps") {
  // FPR 0 attainable at tau = 0.7, so every member clears it.
  CHECK(tpr_at_fpr(make_scored({0.9, 0.8, 0.7}, {0.6, 0.5, 0.4}), 0.1) == 1.0);
  // All scores tied: any threshold marks every non-member positive.
  CHECK(tpr_at_fpr(make_scored({0.5, 0.5}, {0.5, 0.5}), 0.1) == 0.0);
  // Target 1.0 accepts the lowest threshold.
  CHECK(tpr_at_fpr(make_scored({0.2, 0.9}, {0.5, 0.6}), 1.0) == 1.0);
  CHECK_THROWS_AS(tpr_at_fpr(make_scored({0.5}, {}), 0.1), ValidationError);
}

TEST_CASE("tpr_at_fpr: full-sweep oracle on 200 random sets at both operating points") {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    ScoredChallenge s = random_scored(seed + 1000);
    for (double target : {0.1, 0.01, 0.3}) {
      CHECK(tpr_at_fpr(s, target) == tpr_bruteforce(s, target));
    }
  }
}

TEST_CASE("perfect attack: AUC 1 and TPR@0.01 = 1") {
  ScoredChallenge s = make_scored({0.9, 0.95, 0.99}, {0.3, 0.2, 0.1});
  CHECK(auc(s) == 1.0);
  CHECK(tpr_at_fpr(s, 0.01) == 1.0);
}

TEST_CASE("aggregate: mean and population std across targets") {
  ScoredChallenge a = make_scored({0.9, 0.8}, {0.1, 0.2});  // AUC 1.0
  ScoredChallenge b = make_scored({0.9, 0.4}, {0.6, 0.1});  // AUC 0.75

  AttackReport single = aggregate("single", {a});
  CHECK(single.per_target.size() == 1);
  CHECK(single.stddev.auc == 0.0);

  AttackReport both = aggregate("fermi", {a, b});
  CHECK(both.mean.auc == doctest::Approx(0.875));
  CHECK(both.stddev.auc == doctest::Approx(0.125));

  // Hand check of the {0.8, 0.6} example: mean 0.7, population std 0.1.
  double mean = (0.8 + 0.6) / 2.0;
  double sd = std::sqrt(((0.8 - mean) * (0.8 - mean) + (0.6 - mean) * (0.6 - mean)) / 2.0);
  CHECK(mean == doctest::Approx(0.7));
  CHECK(sd == doctest::Approx(0.1));

  CHECK_THROWS_AS(aggregate("x", {}), ValidationError);
}

TEST_CASE("timestep_curves: oracle denoiser gives all-zero member means") {
  auto model = testutil::oracle_stub(2);
  fingerprint::ProbeConfig cfg{{1}, 4, 3};

  auto layout = model.encoder.layout_ptr();
  rel::RecordView r;
  r.layout = layout;
  r.values = {1.0, 1.0};  // encodes to 0 under the stub's encoder? no: mean 1, spread exists
  // Use the decoded-zero record: encoder.decode of the zero vector.
  std::vector<double> zero(model.encoder.encoded_width(), 0.0);
  rel::RecordView r0 = model.encoder.decode(zero);
  rel::RecordView r1 = r0;

  auto curves = timestep_curves(model, {r0, r1}, {1, 0}, cfg);
  REQUIRE(curves.size() == 1);
  CHECK(curves[0].t == 1);
  CHECK(curves[0].member_mean == 0.0);
  CHECK(curves[0].nonmember_mean == 0.0);

  CHECK_THROWS_AS(timestep_curves(model, {r0, r1}, {1, 2}, cfg), UsageError);
}

TEST_CASE("timestep_curves: row count equals probed timestep count, csv shape") {
  auto d = testutil::make_bench(20, 5);
  auto trained = diffusion::train_diffusion(d.encoded, d.encoder,
                                            diffusion::ViewTag::Single,
                                            testutil::small_config(30), 3);
  fingerprint::ProbeConfig cfg{{5, 10, 20, 50}, 3, 9};
  std::vector<int> labels(d.records.size());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i < 10 ? 1 : 0;
  auto curves = timestep_curves(trained.model, d.records, labels, cfg);
  CHECK(curves.size() == 4);

  std::stringstream csv;
  write_curves_csv(csv, curves);
  std::string text = csv.str();
  CHECK(text.find("t,member_mean,member_std,nonmember_mean,nonmember_std\n") == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 5);
}

TEST_CASE("shape metric: identical tables give 0, hand KS and TVD cases") {
  rel::RowLayout layout;
  layout.cols = {{"n", rel::ColKind::Numeric, {}},
                 {"k", rel::ColKind::Categorical, {"a", "b"}}};
  Matrix real = Matrix::from_rows({{0.0, 0.0}, {1.0, 1.0}});
  CHECK(shape_metric(layout, real, real) == 0.0);
  CHECK(trend_metric(layout, real, real) == 0.0);

  // Numeric A = {0,0}, B = {1,1}: step CDFs never overlap, KS = 1.
  std::vector<double> a{0.0, 0.0}, b{1.0, 1.0};
  CHECK(ks_statistic(a, b) == 1.0);

  // Categorical marginals (0.5, 0.5) vs (1.0, 0.0): TVD = 0.5.
  std::vector<double> ca{0.0, 1.0}, cb{0.0, 0.0};
  CHECK(tvd_categorical(ca, cb, 2) == 0.5);

  // Mixed table: KS = 1 on the numeric column, TVD = 0.5 on the categorical.
  Matrix synth = Matrix::from_rows({{1.0, 0.0}, {1.0, 0.0}});
  CHECK(shape_metric(layout, real, synth) == doctest::Approx(0.75));

  rel::RowLayout other;
  other.cols = {{"n", rel::ColKind::Numeric, {}}};
  CHECK_THROWS_AS(shape_metric(other, real, synth), ValidationError);
}

TEST_CASE("trend metric: pearson difference over numeric pairs") {
  rel::RowLayout layout;
  layout.cols = {{"x", rel::ColKind::Numeric, {}}, {"y", rel::ColKind::Numeric, {}}};
  // Perfectly correlated real pair vs perfectly anti-correlated synthetic.
  Matrix real = Matrix::from_rows({{0, 0}, {1, 1}, {2, 2}});
  Matrix synth = Matrix::from_rows({{0, 2}, {1, 1}, {2, 0}});
  CHECK(trend_metric(layout, real, synth) == doctest::Approx(2.0));

  // Categorical joint-contingency TVD.
  rel::RowLayout cat;
  cat.cols = {{"a", rel::ColKind::Categorical, {"u", "v"}},
              {"b", rel::ColKind::Categorical, {"u", "v"}}};
  Matrix rc = Matrix::from_rows({{0, 0}, {1, 1}});
  Matrix sc = Matrix::from_rows({{0, 1}, {1, 0}});
  CHECK(trend_metric(cat, rc, sc) == doctest::Approx(1.0));

  // Single column: no pairs, trend 0 by convention.
  rel::RowLayout one;
  one.cols = {{"x", rel::ColKind::Numeric, {}}};
  Matrix r1 = Matrix::from_rows({{0.0}, {1.0}});
  CHECK(trend_metric(one, r1, r1) == 0.0);
}
