#pragma once

// Central finite-difference gradient oracle shared by the unit and
// acceptance suites. Independent of the analytic backward pass it checks.

#include <cmath>
#include <functional>
#include <vector>

#include "fermi/mat.hpp"
#include "fermi/nncore.hpp"
#include "fermi/rng.hpp"

namespace gradcheck {

// Guarded relative error: the denominator is floored at `scale` so that
// coordinates below the finite-difference resolution are compared on an
// absolute scale. Double-precision central differences cannot resolve
// cancellation-small gradients to any relative accuracy.
inline double rel_err(double a, double b, double scale = 0.1) {
  double denom = std::max({std::abs(a), std::abs(b), scale});
  return std::abs(a - b) / denom;
}

enum class LossKind { Mse, Bce };

struct NetCase {
  fermi::nn::NetSpec spec;
  fermi::Matrix batch;
  fermi::Matrix target;       // Mse
  std::vector<int> labels;    // Bce
  LossKind loss = LossKind::Mse;
  std::uint64_t init_seed = 0;
  std::uint64_t dropout_seed = 0;
};

// Train-mode loss of the case evaluated from scratch; dropout masks are
// reproduced via the fixed dropout seed so the loss is a deterministic
// function of the parameters.
inline double case_loss(fermi::nn::DenseNet& net, const NetCase& c) {
  fermi::RngStream rng(c.dropout_seed);
  auto trace = net.train_forward(c.batch, &rng);
  const fermi::Matrix& out = trace.layers.back().out;
  if (c.loss == LossKind::Mse) return fermi::nn::loss_mse(out, c.target).value;
  return fermi::nn::loss_bce(out, c.labels).value;
}

struct GradCheckResult {
  double max_param_err = 0.0;
  double max_input_err = 0.0;
};

// Compares analytic gradients (params and input) against central finite
// differences with step h.
inline GradCheckResult check_gradients(const NetCase& c, double h = 1e-4) {
  using namespace fermi;
  RngStream init(c.init_seed);
  nn::DenseNet net(c.spec, init);

  RngStream drop(c.dropout_seed);
  auto trace = net.train_forward(c.batch, &drop);
  const Matrix& out = trace.layers.back().out;
  nn::LossValue lv = c.loss == LossKind::Mse ? nn::loss_mse(out, c.target)
                                             : nn::loss_bce(out, c.labels);
  nn::Gradients grads = net.backward(trace, lv.grad);

  GradCheckResult res;
  auto params = net.params();
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t k = 0; k < params[p]->size(); ++k) {
      double saved = params[p]->data()[k];
      params[p]->data()[k] = saved + h;
      double lp = case_loss(net, c);
      params[p]->data()[k] = saved - h;
      double lm = case_loss(net, c);
      params[p]->data()[k] = saved;
      double fd = (lp - lm) / (2.0 * h);
      res.max_param_err =
          std::max(res.max_param_err, rel_err(grads.params[p].data()[k], fd));
    }
  }

  NetCase ci = c;
  for (std::size_t k = 0; k < c.batch.size(); ++k) {
    ci.batch = c.batch;
    ci.batch.data()[k] = c.batch.data()[k] + h;
    double lp = case_loss(net, ci);
    ci.batch.data()[k] = c.batch.data()[k] - h;
    double lm = case_loss(net, ci);
    double fd = (lp - lm) / (2.0 * h);
    res.max_input_err =
        std::max(res.max_input_err, rel_err(grads.input.data()[k], fd));
  }
  return res;
}

// Random small net covering every activation/normalization/dropout variant,
// with an occasional residual block.
inline NetCase random_case(std::uint64_t seed) {
  using namespace fermi;
  RngStream rng(seed);
  NetCase c;
  c.init_seed = rng.next_u64();
  c.dropout_seed = rng.next_u64();

  std::size_t depth = 1 + rng.uniform_index(4);
  std::size_t in = 1 + rng.uniform_index(16);
  std::vector<std::size_t> dims{in};
  for (std::size_t k = 0; k < depth; ++k) dims.push_back(1 + rng.uniform_index(16));

  bool bce = rng.uniform() < 0.25;
  if (bce) dims.back() = 1;

  for (std::size_t k = 0; k < depth; ++k) {
    nn::LayerSpec ls;
    ls.in = dims[k];
    ls.out = dims[k + 1];
    ls.act = static_cast<nn::Activation>(rng.uniform_index(3));
    ls.norm = static_cast<nn::NormKind>(rng.uniform_index(3));
    ls.dropout = rng.uniform() < 0.3 ? 0.2 + 0.3 * rng.uniform() : 0.0;
    c.spec.layers.push_back(ls);
  }
  // Try to add one residual group over a dimension-preserving span.
  for (std::size_t first = 0; first < depth && c.spec.residual_groups.empty(); ++first)
    for (std::size_t last = first; last < depth; ++last)
      if (dims[first] == dims[last + 1] && rng.uniform() < 0.5) {
        c.spec.residual_groups.emplace_back(first, last);
        break;
      }

  std::size_t batch = 4 + rng.uniform_index(4);
  c.batch = Matrix(batch, in);
  for (std::size_t i = 0; i < c.batch.size(); ++i) c.batch.data()[i] = rng.gaussian();
  if (bce) {
    c.loss = LossKind::Bce;
    for (std::size_t i = 0; i < batch; ++i)
      c.labels.push_back(i % 2 == 0 ? 1 : 0);
  } else {
    c.loss = LossKind::Mse;
    c.target = Matrix(batch, dims.back());
    for (std::size_t i = 0; i < c.target.size(); ++i)
      c.target.data()[i] = rng.gaussian();
  }
  return c;
}

// Finite differences are only a valid oracle away from ReLU kinks and away
// from near-degenerate normalization statistics, where the loss has extreme
// curvature. Rejects cases whose forward pass sits too close to either.
inline bool well_conditioned(const NetCase& c) {
  using namespace fermi;
  RngStream init(c.init_seed);
  nn::DenseNet net(c.spec, init);
  RngStream drop(c.dropout_seed);
  auto trace = net.train_forward(c.batch, &drop);
  for (std::size_t k = 0; k < c.spec.layers.size(); ++k) {
    const auto& ls = c.spec.layers[k];
    const auto& t = trace.layers[k];
    if (ls.act == nn::Activation::Relu)
      for (std::size_t i = 0; i < t.normed.size(); ++i)
        if (std::abs(t.normed.data()[i]) < 1e-3) return false;
    if (ls.norm != nn::NormKind::None)
      for (std::size_t i = 0; i < t.inv_std.size(); ++i)
        if (t.inv_std.data()[i] > 1.0 / std::sqrt(0.05)) return false;
  }
  return true;
}

inline NetCase conditioned_random_case(std::uint64_t seed) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    NetCase c = random_case(seed * 1009 + attempt);
    if (well_conditioned(c)) return c;
  }
}

}  // namespace gradcheck
