#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "fermi/access.hpp"
#include "fermi/mat.hpp"
#include "fermi/nncore.hpp"
#include "fermi/relstore.hpp"

namespace fermi::diffusion {

// Discrete-time variance schedule: beta_t with alpha_t = 1 - beta_t and
// alpha_bar_t the running product (index 0 holds t = 1).
struct NoiseSchedule {
  std::size_t T = 0;
  std::vector<double> beta, alpha, alpha_bar;

  double beta_at(std::size_t t) const { return beta.at(t - 1); }
  double alpha_at(std::size_t t) const { return alpha.at(t - 1); }
  double alpha_bar_at(std::size_t t) const { return alpha_bar.at(t - 1); }
};

// Linear beta interpolation between beta_start and beta_end over T steps.
NoiseSchedule make_schedule(std::size_t T, double beta_start, double beta_end);

enum class ViewTag : std::uint8_t { Single = 0, MergedPcsi = 1, MergedFrsi = 2 };
std::string view_tag_name(ViewTag tag);

// Sinusoidal embedding of t/T, appended to the encoded row as denoiser input.
std::vector<double> timestep_embedding(std::size_t t, std::size_t T, std::size_t dim);

// x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, exactly.
Matrix forward_diffuse(const Matrix& x0, std::size_t t, const Matrix& eps,
                       const NoiseSchedule& schedule);

struct DiffusionModel {
  NoiseSchedule schedule;
  nn::DenseNet denoiser;  // input: encoded row + timestep embedding
  rel::Encoder encoder;
  ViewTag view = ViewTag::Single;
  std::size_t temb_dim = 16;

  std::size_t row_width() const { return encoder.encoded_width(); }
  void validate() const;
};

struct DiffusionTrainConfig {
  std::size_t T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::size_t hidden = 256;
  std::size_t hidden_layers = 3;
  std::size_t temb_dim = 16;
  std::size_t epochs = 500;
  double lr = 1e-3;
  std::size_t batch = 256;
};

struct TrainedDiffusion {
  DiffusionModel model;
  double final_loss = 0.0;  // mean training loss of the last epoch
};

// Minimizes the denoising objective by mini-batch Adam with uniform t in
// {1..T} and fresh Gaussian noise per example per step. Deterministic under
// the seed. Rows must already be encoded with `encoder`.
TrainedDiffusion train_diffusion(const Matrix& encoded_rows, const rel::Encoder& encoder,
                                 ViewTag view, const DiffusionTrainConfig& config,
                                 std::uint64_t seed);

// Squared L2 norm of the noise-prediction error for one record at one
// timestep under one noise draw. Inference mode: no randomness beyond eps.
double per_sample_loss(const DiffusionModel& model, std::span<const double> x0,
                       std::size_t t, std::span<const double> eps);

// Batched variant: one loss per row of eps_batch (shared x0 and t).
std::vector<double> per_sample_loss_batch(const DiffusionModel& model,
                                          std::span<const double> x0, std::size_t t,
                                          const Matrix& eps_batch);

// Ancestral sampling from x_T ~ N(0, I) using the standard posterior mean
// with predicted noise and variance beta-tilde. Returns encoded rows.
Matrix sample_rows(const DiffusionModel& model, std::size_t n, std::uint64_t seed);

// Decoded synthetic release: table rows via the model's encoder.
std::vector<rel::RecordView> sample_records(const DiffusionModel& model, std::size_t n,
                                            std::uint64_t seed);

// Model checkpoints (magic "FMDM"): schedule + encoder statistics + denoiser.
void save_diffusion(std::ostream& os, const DiffusionModel& model,
                    std::uint64_t config_hash);
DiffusionModel load_diffusion(std::istream& is, std::uint64_t* config_hash = nullptr);
void save_diffusion_file(const std::string& path, const DiffusionModel& model,
                         std::uint64_t config_hash);
// Checkpoint loads are access-logged under the supplied name so threat-model
// audits can prove which models a code path opened.
DiffusionModel load_diffusion_file(const std::string& path, AccessLog* log = nullptr,
                                   const std::string& log_name = {},
                                   std::uint64_t* config_hash = nullptr);

}  // namespace fermi::diffusion
