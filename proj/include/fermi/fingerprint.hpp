#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fermi/access.hpp"
#include "fermi/diffusion.hpp"
#include "fermi/mat.hpp"
#include "fermi/relstore.hpp"
#include "fermi/workers.hpp"

namespace fermi::fingerprint {

// Which timesteps to probe and how many noise draws per timestep. The master
// seed pins the shared noise set: epsilon depends only on (seed, t, noise
// index), never on the record, so fingerprint coordinates are comparable
// across records, models and runs.
struct ProbeConfig {
  std::vector<std::size_t> timesteps;  // sorted ascending
  std::size_t noise_count = 500;
  std::uint64_t master_seed = 0;

  std::size_t dim() const { return timesteps.size() * noise_count; }
  void validate(std::size_t schedule_T) const;
  bool operator==(const ProbeConfig&) const = default;

  static ProbeConfig defaults(std::uint64_t master_seed);
};

// The shared noise vector for (t, noise index) at a given row width.
std::vector<double> probe_noise_one(const ProbeConfig& config, std::size_t t,
                                    std::size_t noise_index, std::size_t width);
// All noise_count draws for one timestep, stacked (noise_count x width).
Matrix probe_noise(const ProbeConfig& config, std::size_t t, std::size_t width);

constexpr std::uint8_t kUnlabeled = 255;

struct LossFingerprint {
  std::uint64_t id = 0;
  std::uint8_t label = kUnlabeled;  // 0, 1, or kUnlabeled
  std::vector<double> values;       // ordered (t ascending, noise index ascending)
};

// Per-sample denoising losses of one record at every probed (t, eps).
LossFingerprint extract_fingerprint(const diffusion::DiffusionModel& model,
                                    std::span<const double> encoded_row,
                                    const ProbeConfig& config);

// A batch of fingerprints plus the probe configuration that produced them.
struct FingerprintSet {
  ProbeConfig config;
  std::vector<LossFingerprint> rows;

  std::size_t dim() const { return config.dim(); }
  Matrix features() const;
  std::vector<int> labels() const;  // requires all rows labeled

  void save(std::ostream& os, std::uint64_t config_hash) const;
  static FingerprintSet load(std::istream& is, std::uint64_t* config_hash = nullptr);
  void save_file(const std::string& path, std::uint64_t config_hash) const;
  static FingerprintSet load_file(const std::string& path,
                                  std::uint64_t* config_hash = nullptr);
  void write_csv(std::ostream& os) const;
};

// Extracts fingerprints for many records against one model, parallel over
// records; output order matches input order regardless of worker count.
FingerprintSet extract_set(const diffusion::DiffusionModel& model,
                           const std::vector<rel::RecordView>& records,
                           const std::vector<int>& labels, const ProbeConfig& config,
                           WorkerPool* pool = nullptr);

// Aligned (single, multi, label) feature triples across all shadow models.
struct PairedFeatureSet {
  Matrix single_features;  // n x d_single
  Matrix multi_features;   // n x d_multi
  std::vector<int> labels;
  std::vector<std::uint64_t> record_ids;
  std::vector<std::uint32_t> shadow_index;

  std::size_t size() const { return labels.size(); }
  void validate() const;
};

// Index-aligned single-table and merged-table shadow models.
struct ShadowEnsemble {
  std::vector<diffusion::DiffusionModel> single;
  std::vector<diffusion::DiffusionModel> merged;
};

// Per shadow model s: `members` rows from its training partition plus
// `nonmembers` pool rows, each yielding (Phi_single(x), Phi_multi(x~), y).
PairedFeatureSet extract_paired(const rel::Database& db, const ShadowEnsemble& shadows,
                                const rel::ExperimentSplit& split,
                                const ProbeConfig& config, std::size_t members,
                                std::size_t nonmembers, rel::SideInfo side,
                                std::uint64_t seed, AccessLog* log = nullptr,
                                WorkerPool* pool = nullptr);

// Per-dimension z-score statistics fitted on shadow features and applied
// unchanged to target features at inference time.
struct FeatureStats {
  std::vector<double> mean, stdev;

  static FeatureStats fit(const Matrix& features);
  static FeatureStats identity(std::size_t dim);
  Matrix apply(const Matrix& features) const;
  std::size_t dim() const { return mean.size(); }

  void save(std::ostream& os) const;
  static FeatureStats load(std::istream& is);
};

void save_probe_config(std::ostream& os, const ProbeConfig& config);
ProbeConfig load_probe_config(std::istream& is);

}  // namespace fermi::fingerprint
