#include "fermi/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "fermi/errors.hpp"
#include "fermi/io.hpp"

namespace fermi::diffusion {

namespace {
constexpr char kMagic[4] = {'F', 'M', 'D', 'M'};
constexpr std::uint32_t kVersion = 1;
constexpr double kTwoPi = 6.283185307179586476925286766559;
}  // namespace

NoiseSchedule make_schedule(std::size_t T, double beta_start, double beta_end) {
  if (T < 1) throw ValidationError("schedule: T must be >= 1");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
    throw ValidationError("schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(T);
  s.alpha.resize(T);
  s.alpha_bar.resize(T);
  double prod = 1.0;
  for (std::size_t i = 0; i < T; ++i) {
    double frac = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
    s.beta[i] = beta_start + (beta_end - beta_start) * frac;
    s.alpha[i] = 1.0 - s.beta[i];
    prod *= s.alpha[i];
    s.alpha_bar[i] = prod;
  }
  return s;
}

std::string view_tag_name(ViewTag tag) {
  switch (tag) {
    case ViewTag::Single: return "single";
    case ViewTag::MergedPcsi: return "merged-pcsi";
    case ViewTag::MergedFrsi: return "merged-frsi";
  }
  return "?";
}

std::vector<double> timestep_embedding(std::size_t t, std::size_t T, std::size_t dim) {
  if (dim % 2 != 0) throw ValidationError("timestep embedding dim must be even");
  std::vector<double> emb(dim);
  double u = static_cast<double>(t) / static_cast<double>(T);
  for (std::size_t k = 0; k < dim / 2; ++k) {
    double angle = kTwoPi * u * static_cast<double>(1ULL << k);
    emb[2 * k] = std::sin(angle);
    emb[2 * k + 1] = std::cos(angle);
  }
  return emb;
}

Matrix forward_diffuse(const Matrix& x0, std::size_t t, const Matrix& eps,
                       const NoiseSchedule& schedule) {
  if (t < 1 || t > schedule.T)
    throw ValidationError("forward_diffuse: t out of range");
  if (!x0.same_shape(eps))
    throw ValidationError("forward_diffuse: noise shape mismatch");
  const double a = std::sqrt(schedule.alpha_bar_at(t));
  const double b = std::sqrt(1.0 - schedule.alpha_bar_at(t));
  Matrix xt(x0.rows(), x0.cols());
  for (std::size_t i = 0; i < x0.size(); ++i)
    xt.data()[i] = a * x0.data()[i] + b * eps.data()[i];
  return xt;
}

void DiffusionModel::validate() const {
  if (denoiser.input_dim() != row_width() + temb_dim)
    throw ValidationError("diffusion model: denoiser input dim must equal row width + embedding dim");
  if (denoiser.output_dim() != row_width())
    throw ValidationError("diffusion model: denoiser output dim must equal row width");
  if (schedule.T == 0) throw ValidationError("diffusion model: empty schedule");
}

namespace {

// Rows with timestep embeddings appended; one shared t for the whole batch.
Matrix with_embedding(const Matrix& xt, std::size_t t, std::size_t T,
                      std::size_t temb_dim) {
  std::vector<double> emb = timestep_embedding(t, T, temb_dim);
  Matrix input(xt.rows(), xt.cols() + temb_dim);
  for (std::size_t i = 0; i < xt.rows(); ++i) {
    std::copy(xt.row(i).begin(), xt.row(i).end(), input.row(i).begin());
    std::copy(emb.begin(), emb.end(), input.row(i).begin() + static_cast<long>(xt.cols()));
  }
  return input;
}

}  // namespace

TrainedDiffusion train_diffusion(const Matrix& encoded_rows, const rel::Encoder& encoder,
                                 ViewTag view, const DiffusionTrainConfig& config,
                                 std::uint64_t seed) {
  if (encoded_rows.rows() == 0)
    throw ValidationError("train_diffusion: no training rows");
  if (encoded_rows.cols() != encoder.encoded_width())
    throw ValidationError("train_diffusion: rows do not match encoder width");

  const std::size_t w = encoded_rows.cols();
  RngStream rng(seed);

  TrainedDiffusion result;
  result.model.schedule = make_schedule(config.T, config.beta_start, config.beta_end);
  result.model.encoder = encoder;
  result.model.view = view;
  result.model.temb_dim = config.temb_dim;

  nn::NetSpec spec;
  std::size_t in = w + config.temb_dim;
  for (std::size_t k = 0; k < config.hidden_layers; ++k) {
    spec.layers.push_back({in, config.hidden, nn::Activation::Relu, nn::NormKind::None, 0.0});
    in = config.hidden;
  }
  spec.layers.push_back({in, w, nn::Activation::Identity, nn::NormKind::None, 0.0});
  RngStream init = rng.derive("init");
  result.model.denoiser = nn::DenseNet(spec, init);
  result.model.validate();

  nn::DenseNet& net = result.model.denoiser;
  auto params = net.params();
  nn::AdamState adam(params, {config.lr});

  RngStream steps = rng.derive("steps");
  std::vector<std::size_t> order(encoded_rows.rows());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    steps.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch) {
      const std::size_t bs = std::min(config.batch, order.size() - start);
      Matrix x0(bs, w), eps(bs, w);
      std::vector<std::size_t> ts(bs);
      for (std::size_t i = 0; i < bs; ++i) {
        const std::size_t row = order[start + i];
        std::copy(encoded_rows.row(row).begin(), encoded_rows.row(row).end(),
                  x0.row(i).begin());
        ts[i] = 1 + steps.uniform_index(config.T);
        for (std::size_t j = 0; j < w; ++j) eps(i, j) = steps.gaussian();
      }
      // Per-example timestep means per-example embedding; build input row-wise.
      Matrix input(bs, w + config.temb_dim);
      for (std::size_t i = 0; i < bs; ++i) {
        const double a = std::sqrt(result.model.schedule.alpha_bar_at(ts[i]));
        const double b = std::sqrt(1.0 - result.model.schedule.alpha_bar_at(ts[i]));
        for (std::size_t j = 0; j < w; ++j)
          input(i, j) = a * x0(i, j) + b * eps(i, j);
        std::vector<double> emb = timestep_embedding(ts[i], config.T, config.temb_dim);
        std::copy(emb.begin(), emb.end(), input.row(i).begin() + static_cast<long>(w));
      }
      auto trace = net.train_forward(input, nullptr);
      auto lv = nn::loss_mse(trace.layers.back().out, eps);
      auto grads = net.backward(trace, lv.grad);
      adam.step(params, grads.params);
      epoch_loss += lv.value;
      ++n_batches;
    }
    result.final_loss = epoch_loss / static_cast<double>(n_batches);
  }
  return result;
}

double per_sample_loss(const DiffusionModel& model, std::span<const double> x0,
                       std::size_t t, std::span<const double> eps) {
  Matrix eps_m = Matrix::from_row(eps);
  return per_sample_loss_batch(model, x0, t, eps_m)[0];
}

std::vector<double> per_sample_loss_batch(const DiffusionModel& model,
                                          std::span<const double> x0, std::size_t t,
                                          const Matrix& eps_batch) {
  const std::size_t w = model.row_width();
  if (x0.size() != w)
    throw ValidationError("per_sample_loss: record width does not match model");
  if (eps_batch.cols() != w)
    throw ValidationError("per_sample_loss: noise width does not match model");
  if (t < 1 || t > model.schedule.T)
    throw ValidationError("per_sample_loss: t out of range");

  const double a = std::sqrt(model.schedule.alpha_bar_at(t));
  const double b = std::sqrt(1.0 - model.schedule.alpha_bar_at(t));
  Matrix xt(eps_batch.rows(), w);
  for (std::size_t i = 0; i < eps_batch.rows(); ++i)
    for (std::size_t j = 0; j < w; ++j)
      xt(i, j) = a * x0[j] + b * eps_batch(i, j);
  Matrix input = with_embedding(xt, t, model.schedule.T, model.temb_dim);
  Matrix pred = model.denoiser.forward(input);

  std::vector<double> losses(eps_batch.rows());
  for (std::size_t i = 0; i < eps_batch.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < w; ++j) {
      double d = eps_batch(i, j) - pred(i, j);
      s += d * d;
    }
    losses[i] = s;
  }
  return losses;
}

Matrix sample_rows(const DiffusionModel& model, std::size_t n, std::uint64_t seed) {
  const std::size_t w = model.row_width();
  if (n == 0) return Matrix(0, w);
  const NoiseSchedule& sch = model.schedule;
  RngStream rng = RngStream(seed).derive("sample");

  Matrix x(n, w);
  for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] = rng.gaussian();

  for (std::size_t t = sch.T; t >= 1; --t) {
    Matrix input = with_embedding(x, t, sch.T, model.temb_dim);
    Matrix eps_hat = model.denoiser.forward(input);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(sch.alpha_at(t));
    const double eps_coef = sch.beta_at(t) / std::sqrt(1.0 - sch.alpha_bar_at(t));
    for (std::size_t i = 0; i < x.size(); ++i)
      x.data()[i] = inv_sqrt_alpha * (x.data()[i] - eps_coef * eps_hat.data()[i]);
    if (t > 1) {
      const double prev_bar = sch.alpha_bar_at(t - 1);
      const double beta_tilde =
          (1.0 - prev_bar) / (1.0 - sch.alpha_bar_at(t)) * sch.beta_at(t);
      const double sigma = std::sqrt(beta_tilde);
      for (std::size_t i = 0; i < x.size(); ++i)
        x.data()[i] += sigma * rng.gaussian();
    }
  }
  return x;
}

std::vector<rel::RecordView> sample_records(const DiffusionModel& model, std::size_t n,
                                            std::uint64_t seed) {
  Matrix rows = sample_rows(model, n, seed);
  std::vector<rel::RecordView> out;
  out.reserve(n);
  for (std::size_t i = 0; i < rows.rows(); ++i) {
    rel::RecordView rv = model.encoder.decode(rows.row(i));
    rv.id = i;
    rv.source = "synthetic";
    out.push_back(std::move(rv));
  }
  return out;
}

void save_diffusion(std::ostream& os, const DiffusionModel& model,
                    std::uint64_t config_hash) {
  io::write_magic(os, kMagic);
  io::write_u32(os, kVersion);
  io::write_u64(os, config_hash);
  io::write_u8(os, static_cast<std::uint8_t>(model.view));
  io::write_u32(os, static_cast<std::uint32_t>(model.temb_dim));
  io::write_u32(os, static_cast<std::uint32_t>(model.schedule.T));
  for (double b : model.schedule.beta) io::write_f64(os, b);
  model.encoder.save(os);
  model.denoiser.save(os);
}

DiffusionModel load_diffusion(std::istream& is, std::uint64_t* config_hash) {
  io::expect_magic(is, kMagic);
  if (io::read_u32(is) != kVersion)
    throw ValidationError("diffusion checkpoint: unsupported version");
  std::uint64_t hash = io::read_u64(is);
  if (config_hash) *config_hash = hash;
  DiffusionModel model;
  model.view = static_cast<ViewTag>(io::read_u8(is));
  model.temb_dim = io::read_u32(is);
  std::size_t T = io::read_u32(is);
  model.schedule.T = T;
  model.schedule.beta.resize(T);
  model.schedule.alpha.resize(T);
  model.schedule.alpha_bar.resize(T);
  double prod = 1.0;
  for (std::size_t i = 0; i < T; ++i) {
    model.schedule.beta[i] = io::read_f64(is);
    model.schedule.alpha[i] = 1.0 - model.schedule.beta[i];
    prod *= model.schedule.alpha[i];
    model.schedule.alpha_bar[i] = prod;
  }
  model.encoder = rel::Encoder::load(is);
  model.denoiser = nn::DenseNet::load(is);
  model.validate();
  return model;
}

void save_diffusion_file(const std::string& path, const DiffusionModel& model,
                         std::uint64_t config_hash) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write checkpoint '" + path + "'");
  save_diffusion(os, model, config_hash);
}

DiffusionModel load_diffusion_file(const std::string& path, AccessLog* log,
                                   const std::string& log_name,
                                   std::uint64_t* config_hash) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open checkpoint '" + path + "'");
  if (log) log->record(checkpoint_read_key(log_name.empty() ? path : log_name));
  return load_diffusion(is, config_hash);
}

}  // namespace fermi::diffusion
