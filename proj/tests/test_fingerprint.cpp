#include "fermi/fingerprint.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "doctest.h"
#include "fermi/errors.hpp"
#include "fermi/workers.hpp"
#include "test_util.hpp"

using namespace fermi;
using namespace fermi::fingerprint;
using testutil::make_bench;
using testutil::oracle_stub;
using testutil::small_config;

TEST_CASE("probe config: default dimensionality is 7 x 500 = 3500") {
  ProbeConfig cfg = ProbeConfig::defaults(1);
  CHECK(cfg.timesteps == std::vector<std::size_t>{5, 10, 20, 30, 40, 50, 100});
  CHECK(cfg.dim() == 3500);
  cfg.validate(100);
  CHECK_THROWS_AS(cfg.validate(99), ValidationError);

  ProbeConfig unsorted{{10, 5}, 4, 0};
  CHECK_THROWS_AS(unsorted.validate(100), ValidationError);
  ProbeConfig no_noise{{5}, 0, 0};
  CHECK_THROWS_AS(no_noise.validate(100), ValidationError);
}

TEST_CASE("probe noise: derived from (seed, t, index) only") {
  ProbeConfig cfg{{3, 9}, 5, 42};
  auto a = probe_noise_one(cfg, 3, 2, 7);
  auto b = probe_noise_one(cfg, 3, 2, 7);
  CHECK(a == b);
  CHECK(probe_noise_one(cfg, 9, 2, 7) != a);
  CHECK(probe_noise_one(cfg, 3, 3, 7) != a);

  ProbeConfig other = cfg;
  other.master_seed = 43;
  CHECK(probe_noise_one(other, 3, 2, 7) != a);

  Matrix bank = probe_noise(cfg, 3, 7);
  for (std::size_t j = 0; j < cfg.noise_count; ++j) {
    auto row = probe_noise_one(cfg, 3, j, 7);
    for (std::size_t k = 0; k < 7; ++k) CHECK(bank(j, k) == row[k]);
  }
}

TEST_CASE("extract_fingerprint: oracle stub yields an all-zero fingerprint") {
  auto model = oracle_stub(3);
  ProbeConfig cfg{{1}, 1, 5};
  std::vector<double> x0(3, 0.0);
  LossFingerprint fp = extract_fingerprint(model, x0, cfg);
  CHECK(fp.values == std::vector<double>{0.0});
}

TEST_CASE("extract_fingerprint: deterministic, shared-noise coordinates") {
  auto d = make_bench(24, 3);
  auto trained = diffusion::train_diffusion(d.encoded, d.encoder,
                                            diffusion::ViewTag::Single,
                                            small_config(40), 7);
  ProbeConfig cfg{{5, 10, 20}, 4, 99};

  LossFingerprint a = extract_fingerprint(trained.model, d.encoded.row(0), cfg);
  LossFingerprint b = extract_fingerprint(trained.model, d.encoded.row(0), cfg);
  CHECK(a.values == b.values);
  CHECK(a.values.size() == cfg.dim());

  // Entry (t_k, j) must equal the per-sample loss under the re-derived
  // shared noise vector; identical for any record in the run.
  LossFingerprint other = extract_fingerprint(trained.model, d.encoded.row(5), cfg);
  for (std::size_t k = 0; k < cfg.timesteps.size(); ++k)
    for (std::size_t j = 0; j < cfg.noise_count; ++j) {
      std::vector<double> eps =
          probe_noise_one(cfg, cfg.timesteps[k], j, trained.model.row_width());
      CHECK(a.values[k * cfg.noise_count + j] ==
            diffusion::per_sample_loss(trained.model, d.encoded.row(0),
                                       cfg.timesteps[k], eps));
      CHECK(other.values[k * cfg.noise_count + j] ==
            diffusion::per_sample_loss(trained.model, d.encoded.row(5),
                                       cfg.timesteps[k], eps));
    }

  std::vector<double> wrong(trained.model.row_width() + 1, 0.0);
  CHECK_THROWS_AS(extract_fingerprint(trained.model, wrong, cfg), ValidationError);
}

TEST_CASE("extract_set: ordering invariance and worker-count invariance") {
  auto d = make_bench(16, 11);
  auto trained = diffusion::train_diffusion(d.encoded, d.encoder,
                                            diffusion::ViewTag::Single,
                                            small_config(30), 13);
  ProbeConfig cfg{{5, 20}, 3, 1};

  std::vector<int> labels(d.records.size());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = i % 2;

  FingerprintSet base = extract_set(trained.model, d.records, labels, cfg);

  WorkerPool pool(4);
  FingerprintSet parallel = extract_set(trained.model, d.records, labels, cfg, &pool);
  REQUIRE(parallel.rows.size() == base.rows.size());
  for (std::size_t i = 0; i < base.rows.size(); ++i) {
    CHECK(parallel.rows[i].id == base.rows[i].id);
    CHECK(parallel.rows[i].values == base.rows[i].values);
  }

  // Shuffling the challenge permutes rows but leaves values unchanged.
  std::vector<rel::RecordView> shuffled = d.records;
  std::reverse(shuffled.begin(), shuffled.end());
  std::vector<int> rlabels(labels.rbegin(), labels.rend());
  FingerprintSet rev = extract_set(trained.model, shuffled, rlabels, cfg);
  for (std::size_t i = 0; i < base.rows.size(); ++i) {
    const LossFingerprint& f = rev.rows[base.rows.size() - 1 - i];
    CHECK(f.id == base.rows[i].id);
    CHECK(f.values == base.rows[i].values);
  }
}

TEST_CASE("extract_paired: alignment, labels, and shapes") {
  auto d = make_bench(120, 17);
  rel::ExperimentSplit split = rel::make_split(d.db, "child", 2, 1, 20, 5);

  ProbeConfig cfg{{5, 10}, 3, 21};
  ShadowEnsemble shadows;
  rel::DatabaseView view(d.db, nullptr);
  for (std::size_t s = 0; s < 2; ++s) {
    std::vector<rel::RecordView> rows, merged_rows;
    for (std::int64_t pk : split.shadow_partitions[s]) {
      rows.push_back(view.record_by_pk("child", pk));
      merged_rows.push_back(rel::augment(view, rows.back(), rel::SideInfo::Pcsi));
    }
    rel::Encoder enc_s = rel::Encoder::fit(d.db.layout("child"), rows);
    rel::Encoder enc_m = rel::Encoder::fit(merged_rows[0].layout, merged_rows);
    shadows.single.push_back(diffusion::train_diffusion(enc_s.encode_batch(rows), enc_s,
                                                        diffusion::ViewTag::Single,
                                                        small_config(20), 100 + s)
                                 .model);
    shadows.merged.push_back(diffusion::train_diffusion(enc_m.encode_batch(merged_rows),
                                                        enc_m,
                                                        diffusion::ViewTag::MergedPcsi,
                                                        small_config(20), 200 + s)
                                 .model);
  }

  AccessLog log;
  PairedFeatureSet paired = extract_paired(d.db, shadows, split, cfg, 10, 10,
                                           rel::SideInfo::Pcsi, 7, &log);
  CHECK(paired.size() == 40);  // 2 shadows x (10 + 10)
  CHECK(paired.single_features.cols() == cfg.dim());
  CHECK(paired.multi_features.cols() == cfg.dim());

  for (std::size_t i = 0; i < paired.size(); ++i) {
    CHECK((paired.labels[i] == 0 || paired.labels[i] == 1));
    // Label oracle from the split table.
    bool member = split.is_member(static_cast<std::int64_t>(paired.record_ids[i]),
                                  paired.shadow_index[i]);
    CHECK(paired.labels[i] == (member ? 1 : 0));
    if (paired.labels[i] == 0)
      CHECK_FALSE(split.in_any_partition(static_cast<std::int64_t>(paired.record_ids[i])));
  }
  CHECK(log.count("table-read:parent") > 0);

  // Balanced per shadow model.
  for (std::uint32_t s = 0; s < 2; ++s) {
    int pos = 0, neg = 0;
    for (std::size_t i = 0; i < paired.size(); ++i)
      if (paired.shadow_index[i] == s) (paired.labels[i] ? pos : neg) += 1;
    CHECK(pos == 10);
    CHECK(neg == 10);
  }

  CHECK_THROWS_AS(extract_paired(d.db, shadows, split, cfg, 10, 5,
                                 rel::SideInfo::Pcsi, 7),
                  ValidationError);
  ShadowEnsemble misaligned;
  misaligned.single = shadows.single;
  CHECK_THROWS_AS(extract_paired(d.db, misaligned, split, cfg, 10, 10,
                                 rel::SideInfo::Pcsi, 7),
                  ValidationError);
}

TEST_CASE("feature stats: z-score with shadow statistics") {
  Matrix shadow = Matrix::from_rows({{1.0, 5.0}, {3.0, 5.0}});
  FeatureStats st = FeatureStats::fit(shadow);

  Matrix normed = st.apply(shadow);
  for (std::size_t j = 0; j < 2; ++j) {
    double mu = (normed(0, j) + normed(1, j)) / 2.0;
    CHECK(std::abs(mu) < 1e-9);
  }
  // Constant dimension: std floored at 1e-8, output 0.
  CHECK(normed(0, 1) == 0.0);
  CHECK(normed(1, 1) == 0.0);
  CHECK(st.stdev[1] == 1e-8);

  // Target features are normalized with the shadow statistics, not their own.
  Matrix target = Matrix::from_rows({{2.0, 6.0}});
  Matrix tn = st.apply(target);
  CHECK(tn(0, 0) == doctest::Approx((2.0 - st.mean[0]) / st.stdev[0]));
  CHECK(tn(0, 1) == doctest::Approx((6.0 - 5.0) / 1e-8));

  CHECK_THROWS_AS(FeatureStats::fit(Matrix(0, 3)), ValidationError);
  CHECK_THROWS_AS(st.apply(Matrix(1, 3)), ValidationError);
}

TEST_CASE("fingerprint file: bitwise round trip and csv mirror") {
  auto model = oracle_stub(2);
  ProbeConfig cfg{{1}, 3, 17};
  std::vector<double> r0{0.0, 0.0};
  FingerprintSet set;
  set.config = cfg;
  for (std::uint64_t id = 0; id < 3; ++id) {
    LossFingerprint fp = extract_fingerprint(model, r0, cfg);
    fp.id = id;
    fp.label = id == 2 ? kUnlabeled : static_cast<std::uint8_t>(id % 2);
    set.rows.push_back(std::move(fp));
  }

  std::stringstream buf;
  set.save(buf, 0xABCDULL);
  std::uint64_t hash = 0;
  FingerprintSet loaded = FingerprintSet::load(buf, &hash);
  CHECK(hash == 0xABCDULL);
  CHECK(loaded.config == set.config);
  REQUIRE(loaded.rows.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(loaded.rows[i].id == set.rows[i].id);
    CHECK(loaded.rows[i].label == set.rows[i].label);
    CHECK(loaded.rows[i].values == set.rows[i].values);
  }
  std::stringstream buf2;
  loaded.save(buf2, 0xABCDULL);
  CHECK(buf.str() == buf2.str());

  std::stringstream csv;
  set.write_csv(csv);
  CHECK(csv.str().find("id,label,t1_e0,t1_e1,t1_e2") == 0);

  CHECK_THROWS_AS(loaded.labels(), UsageError);  // row 2 unlabeled
}
