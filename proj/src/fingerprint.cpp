#include "fermi/fingerprint.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>

#include "fermi/errors.hpp"
#include "fermi/io.hpp"
#include "fermi/rng.hpp"

namespace fermi::fingerprint {

namespace {
constexpr char kMagic[4] = {'F', 'M', 'I', '1'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void ProbeConfig::validate(std::size_t schedule_T) const {
  if (timesteps.empty()) throw ValidationError("probe config: no timesteps");
  if (noise_count < 1) throw ValidationError("probe config: noise count must be >= 1");
  for (std::size_t i = 0; i < timesteps.size(); ++i) {
    if (timesteps[i] < 1 || timesteps[i] > schedule_T)
      throw ValidationError("probe config: timestep " + std::to_string(timesteps[i]) +
                            " outside schedule range 1.." + std::to_string(schedule_T));
    if (i > 0 && timesteps[i] <= timesteps[i - 1])
      throw ValidationError("probe config: timesteps must be strictly ascending");
  }
}

ProbeConfig ProbeConfig::defaults(std::uint64_t master_seed) {
  return ProbeConfig{{5, 10, 20, 30, 40, 50, 100}, 500, master_seed};
}

std::vector<double> probe_noise_one(const ProbeConfig& config, std::size_t t,
                                    std::size_t noise_index, std::size_t width) {
  RngStream stream = RngStream(config.master_seed).derive("probe-noise", t, noise_index);
  std::vector<double> eps(width);
  for (double& v : eps) v = stream.gaussian();
  return eps;
}

Matrix probe_noise(const ProbeConfig& config, std::size_t t, std::size_t width) {
  Matrix m(config.noise_count, width);
  for (std::size_t j = 0; j < config.noise_count; ++j) {
    std::vector<double> eps = probe_noise_one(config, t, j, width);
    std::copy(eps.begin(), eps.end(), m.row(j).begin());
  }
  return m;
}

LossFingerprint extract_fingerprint(const diffusion::DiffusionModel& model,
                                    std::span<const double> encoded_row,
                                    const ProbeConfig& config) {
  config.validate(model.schedule.T);
  LossFingerprint fp;
  fp.values.reserve(config.dim());
  for (std::size_t t : config.timesteps) {
    Matrix eps = probe_noise(config, t, model.row_width());
    std::vector<double> losses =
        diffusion::per_sample_loss_batch(model, encoded_row, t, eps);
    fp.values.insert(fp.values.end(), losses.begin(), losses.end());
  }
  return fp;
}

Matrix FingerprintSet::features() const {
  Matrix m(rows.size(), dim());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].values.size() != dim())
      throw ValidationError("fingerprint set: inconsistent row width");
    std::copy(rows[i].values.begin(), rows[i].values.end(), m.row(i).begin());
  }
  return m;
}

std::vector<int> FingerprintSet::labels() const {
  std::vector<int> out;
  out.reserve(rows.size());
  for (const LossFingerprint& r : rows) {
    if (r.label != 0 && r.label != 1)
      throw UsageError("fingerprint set: unlabeled record " + std::to_string(r.id));
    out.push_back(r.label);
  }
  return out;
}

void save_probe_config(std::ostream& os, const ProbeConfig& config) {
  io::write_u32(os, static_cast<std::uint32_t>(config.timesteps.size()));
  for (std::size_t t : config.timesteps) io::write_u32(os, static_cast<std::uint32_t>(t));
  io::write_u32(os, static_cast<std::uint32_t>(config.noise_count));
  io::write_u64(os, config.master_seed);
}

ProbeConfig load_probe_config(std::istream& is) {
  ProbeConfig config;
  std::uint32_t n_t = io::read_u32(is);
  config.timesteps.resize(n_t);
  for (std::uint32_t i = 0; i < n_t; ++i) config.timesteps[i] = io::read_u32(is);
  config.noise_count = io::read_u32(is);
  config.master_seed = io::read_u64(is);
  return config;
}

void FingerprintSet::save(std::ostream& os, std::uint64_t config_hash) const {
  io::write_magic(os, kMagic);
  io::write_u32(os, kVersion);
  io::write_u64(os, config_hash);
  io::write_u32(os, static_cast<std::uint32_t>(dim()));
  io::write_u64(os, rows.size());
  save_probe_config(os, config);
  for (const LossFingerprint& r : rows) {
    if (r.values.size() != dim())
      throw ValidationError("fingerprint set: inconsistent row width");
    io::write_u64(os, r.id);
    io::write_u8(os, r.label);
    for (double v : r.values) io::write_f64(os, v);
  }
}

FingerprintSet FingerprintSet::load(std::istream& is, std::uint64_t* config_hash) {
  io::expect_magic(is, kMagic);
  if (io::read_u32(is) != kVersion)
    throw ValidationError("fingerprint file: unsupported version");
  std::uint64_t hash = io::read_u64(is);
  if (config_hash) *config_hash = hash;
  std::uint32_t d = io::read_u32(is);
  std::uint64_t count = io::read_u64(is);
  FingerprintSet set;
  set.config = load_probe_config(is);
  if (set.config.dim() != d)
    throw ValidationError("fingerprint file: dimension does not match probe config");
  set.rows.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    LossFingerprint& r = set.rows[i];
    r.id = io::read_u64(is);
    r.label = io::read_u8(is);
    r.values.resize(d);
    for (std::uint32_t j = 0; j < d; ++j) r.values[j] = io::read_f64(is);
  }
  return set;
}

void FingerprintSet::save_file(const std::string& path, std::uint64_t config_hash) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write fingerprint file '" + path + "'");
  save(os, config_hash);
}

FingerprintSet FingerprintSet::load_file(const std::string& path,
                                         std::uint64_t* config_hash) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open fingerprint file '" + path + "'");
  return load(is, config_hash);
}

void FingerprintSet::write_csv(std::ostream& os) const {
  os << "id,label";
  for (std::size_t t : config.timesteps)
    for (std::size_t j = 0; j < config.noise_count; ++j)
      os << ",t" << t << "_e" << j;
  os << "\n";
  for (const LossFingerprint& r : rows) {
    os << r.id << ',' << static_cast<int>(r.label);
    for (double v : r.values) {
      char buf[64];
      auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
      os << ',' << std::string_view(buf, static_cast<std::size_t>(ptr - buf));
    }
    os << "\n";
  }
}

namespace {

// Shared-noise matrices per probed timestep, computed once per (config, width).
std::vector<Matrix> noise_bank(const ProbeConfig& config, std::size_t width) {
  std::vector<Matrix> bank;
  bank.reserve(config.timesteps.size());
  for (std::size_t t : config.timesteps) bank.push_back(probe_noise(config, t, width));
  return bank;
}

std::vector<double> fingerprint_with_bank(const diffusion::DiffusionModel& model,
                                          std::span<const double> encoded_row,
                                          const ProbeConfig& config,
                                          const std::vector<Matrix>& bank) {
  std::vector<double> values;
  values.reserve(config.dim());
  for (std::size_t k = 0; k < config.timesteps.size(); ++k) {
    std::vector<double> losses = diffusion::per_sample_loss_batch(
        model, encoded_row, config.timesteps[k], bank[k]);
    values.insert(values.end(), losses.begin(), losses.end());
  }
  return values;
}

}  // namespace

FingerprintSet extract_set(const diffusion::DiffusionModel& model,
                           const std::vector<rel::RecordView>& records,
                           const std::vector<int>& labels, const ProbeConfig& config,
                           WorkerPool* pool) {
  config.validate(model.schedule.T);
  if (!labels.empty() && labels.size() != records.size())
    throw ValidationError("extract_set: label count mismatch");

  FingerprintSet set;
  set.config = config;
  set.rows.resize(records.size());

  std::vector<Matrix> bank = noise_bank(config, model.row_width());
  Matrix encoded = model.encoder.encode_batch(records);

  auto task = [&](std::size_t i) {
    LossFingerprint& fp = set.rows[i];
    fp.id = records[i].id;
    fp.label = labels.empty() ? kUnlabeled : static_cast<std::uint8_t>(labels[i]);
    fp.values = fingerprint_with_bank(model, encoded.row(i), config, bank);
  };
  if (pool)
    pool->run(records.size(), task);
  else
    for (std::size_t i = 0; i < records.size(); ++i) task(i);
  return set;
}

void PairedFeatureSet::validate() const {
  if (single_features.rows() != labels.size() ||
      multi_features.rows() != labels.size() || record_ids.size() != labels.size() ||
      shadow_index.size() != labels.size())
    throw ValidationError("paired feature set: misaligned streams");
  for (int y : labels)
    if (y != 0 && y != 1)
      throw ValidationError("paired feature set: labels must be 0 or 1");
}

PairedFeatureSet extract_paired(const rel::Database& db, const ShadowEnsemble& shadows,
                                const rel::ExperimentSplit& split,
                                const ProbeConfig& config, std::size_t members,
                                std::size_t nonmembers, rel::SideInfo side,
                                std::uint64_t seed, AccessLog* log, WorkerPool* pool) {
  const std::size_t S = split.shadow_partitions.size();
  if (shadows.single.size() != S || shadows.merged.size() != S)
    throw ValidationError("extract_paired: shadow ensembles misaligned with split (" +
                          std::to_string(shadows.single.size()) + "/" +
                          std::to_string(shadows.merged.size()) + " models for " +
                          std::to_string(S) + " partitions)");
  if (members != nonmembers)
    throw ValidationError("extract_paired: member/non-member counts must be balanced");
  if (S == 0 || members == 0)
    throw ValidationError("extract_paired: empty selection");

  RngStream rng(seed);
  rel::DatabaseView view(db, log);

  struct Selected {
    std::size_t shadow;
    std::int64_t pk;
    int label;
  };
  std::vector<Selected> picks;
  for (std::size_t s = 0; s < S; ++s) {
    std::vector<std::int64_t> mem = split.shadow_partitions[s];
    if (mem.size() < members)
      throw PoolExhaustedError("extract_paired: shadow partition " + std::to_string(s) +
                               " has " + std::to_string(mem.size()) + " rows, need " +
                               std::to_string(members));
    RngStream m_rng = rng.derive("paired-members", s);
    m_rng.shuffle(mem);
    for (std::size_t i = 0; i < members; ++i) picks.push_back({s, mem[i], 1});

    std::vector<std::int64_t> non = split.pool;
    if (non.size() < nonmembers)
      throw PoolExhaustedError("extract_paired: pool has " + std::to_string(non.size()) +
                               " rows, need " + std::to_string(nonmembers));
    RngStream n_rng = rng.derive("paired-nonmembers", s);
    n_rng.shuffle(non);
    for (std::size_t i = 0; i < nonmembers; ++i) picks.push_back({s, non[i], 0});
  }

  // Materialize records and joins sequentially (the access log is not
  // thread-safe); the numeric extraction below is the parallel part.
  std::vector<rel::RecordView> plain(picks.size());
  std::vector<rel::RecordView> augmented(picks.size());
  for (std::size_t i = 0; i < picks.size(); ++i) {
    plain[i] = view.record_by_pk(split.target_table, picks[i].pk);
    augmented[i] = rel::augment(view, plain[i], side);
  }

  PairedFeatureSet out;
  const std::size_t d_single = config.dim();
  out.single_features = Matrix(picks.size(), d_single);
  out.multi_features = Matrix(picks.size(), d_single);
  out.labels.resize(picks.size());
  out.record_ids.resize(picks.size());
  out.shadow_index.resize(picks.size());

  // One noise bank per distinct row width.
  std::vector<Matrix> single_bank, multi_bank;
  if (!shadows.single.empty()) {
    single_bank = noise_bank(config, shadows.single[0].row_width());
    multi_bank = noise_bank(config, shadows.merged[0].row_width());
    for (const auto& m : shadows.single) config.validate(m.schedule.T);
    for (const auto& m : shadows.merged) config.validate(m.schedule.T);
  }

  auto task = [&](std::size_t i) {
    const Selected& pick = picks[i];
    const diffusion::DiffusionModel& ms = shadows.single[pick.shadow];
    const diffusion::DiffusionModel& mm = shadows.merged[pick.shadow];
    std::vector<double> enc_single = ms.encoder.encode(plain[i]);
    std::vector<double> enc_multi = mm.encoder.encode(augmented[i]);
    std::vector<double> fs = fingerprint_with_bank(ms, enc_single, config, single_bank);
    std::vector<double> fm = fingerprint_with_bank(mm, enc_multi, config, multi_bank);
    std::copy(fs.begin(), fs.end(), out.single_features.row(i).begin());
    std::copy(fm.begin(), fm.end(), out.multi_features.row(i).begin());
    out.labels[i] = pick.label;
    out.record_ids[i] = static_cast<std::uint64_t>(pick.pk);
    out.shadow_index[i] = static_cast<std::uint32_t>(pick.shadow);
  };
  if (pool)
    pool->run(picks.size(), task);
  else
    for (std::size_t i = 0; i < picks.size(); ++i) task(i);

  out.validate();
  return out;
}

FeatureStats FeatureStats::fit(const Matrix& features) {
  if (features.rows() == 0) throw ValidationError("feature stats: empty set");
  FeatureStats st;
  st.mean.assign(features.cols(), 0.0);
  st.stdev.assign(features.cols(), 0.0);
  const double n = static_cast<double>(features.rows());
  for (std::size_t i = 0; i < features.rows(); ++i)
    for (std::size_t j = 0; j < features.cols(); ++j) st.mean[j] += features(i, j);
  for (double& m : st.mean) m /= n;
  for (std::size_t i = 0; i < features.rows(); ++i)
    for (std::size_t j = 0; j < features.cols(); ++j) {
      double d = features(i, j) - st.mean[j];
      st.stdev[j] += d * d;
    }
  for (double& s : st.stdev) s = std::max(std::sqrt(s / n), 1e-8);
  return st;
}

FeatureStats FeatureStats::identity(std::size_t dim) {
  FeatureStats st;
  st.mean.assign(dim, 0.0);
  st.stdev.assign(dim, 1.0);
  return st;
}

Matrix FeatureStats::apply(const Matrix& features) const {
  if (features.cols() != mean.size())
    throw ValidationError("feature stats: width mismatch");
  Matrix out(features.rows(), features.cols());
  for (std::size_t i = 0; i < features.rows(); ++i)
    for (std::size_t j = 0; j < features.cols(); ++j)
      out(i, j) = (features(i, j) - mean[j]) / stdev[j];
  return out;
}

void FeatureStats::save(std::ostream& os) const {
  io::write_u32(os, static_cast<std::uint32_t>(mean.size()));
  for (double v : mean) io::write_f64(os, v);
  for (double v : stdev) io::write_f64(os, v);
}

FeatureStats FeatureStats::load(std::istream& is) {
  FeatureStats st;
  std::uint32_t n = io::read_u32(is);
  st.mean.resize(n);
  st.stdev.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) st.mean[i] = io::read_f64(is);
  for (std::uint32_t i = 0; i < n; ++i) st.stdev[i] = io::read_f64(is);
  return st;
}

}  // namespace fermi::fingerprint
