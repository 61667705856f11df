#pragma once

// Shared fixtures for the module test suites: a small generated relational
// database with fitted encoder, fast diffusion-training configs, and a
// denoiser stub whose prediction equals the injected noise bit for bit.

#include <memory>
#include <vector>

#include "fermi/diffusion.hpp"
#include "fermi/relstore.hpp"

namespace testutil {

struct BenchData {
  fermi::rel::Database db;
  fermi::rel::Encoder encoder;
  fermi::Matrix encoded;
  std::vector<fermi::rel::RecordView> records;
};

inline BenchData make_bench(std::size_t rows, std::uint64_t seed, double rho = 0.9) {
  using namespace fermi;
  BenchData d{rel::generate_benchmark({2, rows, rho, seed}), {}, {}, {}};
  rel::DatabaseView view(d.db, nullptr);
  for (std::size_t i = 0; i < d.db.row_count("child"); ++i)
    d.records.push_back(view.record("child", i));
  d.encoder = rel::Encoder::fit(d.db.layout("child"), d.records);
  d.encoded = d.encoder.encode_batch(d.records);
  return d;
}

inline fermi::diffusion::DiffusionTrainConfig small_config(std::size_t epochs) {
  fermi::diffusion::DiffusionTrainConfig cfg;
  cfg.T = 100;
  cfg.hidden = 64;
  cfg.hidden_layers = 2;
  cfg.epochs = epochs;
  cfg.lr = 1e-3;
  return cfg;
}

// alpha_bar = 0.75 makes sqrt(1 - alpha_bar) = 0.5 and its inverse both
// powers of two, so with x0 = 0 the linear read-out reproduces eps exactly.
inline fermi::diffusion::DiffusionModel oracle_stub(std::size_t width) {
  using namespace fermi;
  diffusion::DiffusionModel m;
  m.schedule = diffusion::make_schedule(1, 0.25, 0.25);
  m.temb_dim = 16;

  auto layout = std::make_shared<rel::RowLayout>();
  for (std::size_t j = 0; j < width; ++j)
    layout->cols.push_back({"n" + std::to_string(j), rel::ColKind::Numeric, {}});
  rel::RecordView r0;
  r0.layout = layout;
  r0.values.assign(width, 0.0);
  rel::RecordView r1 = r0;
  r1.values.assign(width, 2.0);
  m.encoder = rel::Encoder::fit(layout, {r0, r1});

  nn::NetSpec spec;
  spec.layers.push_back({width + m.temb_dim, width, nn::Activation::Identity,
                         nn::NormKind::None, 0.0});
  RngStream rng(1);
  m.denoiser = nn::DenseNet(spec, rng);
  auto params = m.denoiser.params();
  *params[0] = Matrix(width + m.temb_dim, width, 0.0);
  for (std::size_t j = 0; j < width; ++j) (*params[0])(j, j) = 2.0;
  *params[1] = Matrix(1, width, 0.0);
  m.validate();
  return m;
}

}  // namespace testutil
