#include "fermi/nncore.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>

#include "fermi/errors.hpp"
#include "fermi/io.hpp"

namespace fermi::nn {

namespace {
constexpr double kNormEps = 1e-5;
constexpr char kMagic[4] = {'F', 'M', 'N', 'N'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void NetSpec::validate() const {
  if (layers.empty()) throw ValidationError("net spec: no layers");
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const LayerSpec& l = layers[k];
    if (l.in == 0 || l.out == 0) throw ValidationError("net spec: zero-sized layer");
    if (l.dropout < 0.0 || l.dropout >= 1.0)
      throw ValidationError("net spec: dropout rate must lie in [0,1)");
    if (k > 0 && layers[k - 1].out != l.in)
      throw ValidationError("net spec: layer " + std::to_string(k) +
                            " input dim does not match previous output dim");
  }
  std::vector<char> used(layers.size(), 0);
  for (const auto& [first, last] : residual_groups) {
    if (first > last || last >= layers.size())
      throw ValidationError("net spec: residual group out of range");
    if (layers[first].in != layers[last].out)
      throw ValidationError("net spec: residual group requires equal in/out dims");
    for (std::size_t k = first; k <= last; ++k) {
      if (used[k]) throw ValidationError("net spec: overlapping residual groups");
      used[k] = 1;
    }
  }
}

DenseNet::DenseNet(NetSpec spec, RngStream& rng) : spec_(std::move(spec)) {
  spec_.validate();
  layers_.reserve(spec_.layers.size());
  for (const LayerSpec& ls : spec_.layers) {
    Layer layer;
    layer.spec = ls;
    layer.w = Matrix(ls.in, ls.out);
    layer.b = Matrix(1, ls.out, 0.0);
    // He-uniform for ReLU, Xavier-uniform otherwise.
    double limit = ls.act == Activation::Relu
                       ? std::sqrt(6.0 / static_cast<double>(ls.in))
                       : std::sqrt(6.0 / static_cast<double>(ls.in + ls.out));
    for (std::size_t i = 0; i < layer.w.size(); ++i)
      layer.w.data()[i] = rng.uniform(-limit, limit);
    if (ls.norm != NormKind::None) {
      layer.gamma = Matrix(1, ls.out, 1.0);
      layer.beta = Matrix(1, ls.out, 0.0);
      layer.run_mean = Matrix(1, ls.out, 0.0);
      layer.run_var = Matrix(1, ls.out, 1.0);
    }
    layers_.push_back(std::move(layer));
  }
}

std::size_t DenseNet::input_dim() const {
  return layers_.empty() ? 0 : layers_.front().spec.in;
}
std::size_t DenseNet::output_dim() const {
  return layers_.empty() ? 0 : layers_.back().spec.out;
}

ForwardTrace DenseNet::run(const Matrix& batch, Mode mode, RngStream* rng,
                           bool mutate) {
  if (batch.cols() != input_dim())
    throw ValidationError("forward: batch width " + std::to_string(batch.cols()) +
                          " does not match net input dim " +
                          std::to_string(input_dim()));
  ForwardTrace trace;
  trace.mode = mode;
  trace.input = batch;
  trace.layers.resize(layers_.size());

  std::map<std::size_t, std::size_t> group_by_first, group_by_last;
  for (std::size_t g = 0; g < spec_.residual_groups.size(); ++g) {
    group_by_first[spec_.residual_groups[g].first] = g;
    group_by_last[spec_.residual_groups[g].second] = g;
  }
  std::vector<Matrix> group_inputs(spec_.residual_groups.size());

  const Matrix* x = &trace.input;
  const std::size_t batch_rows = batch.rows();
  for (std::size_t k = 0; k < layers_.size(); ++k) {
    Layer& layer = layers_[k];
    ForwardTrace::PerLayer& t = trace.layers[k];
    if (auto it = group_by_first.find(k); it != group_by_first.end())
      group_inputs[it->second] = *x;

    t.affine = matmul(*x, layer.w);
    add_row_vector(t.affine, layer.b);

    const std::size_t out = layer.spec.out;
    switch (layer.spec.norm) {
      case NormKind::None:
        t.normed = t.affine;
        break;
      case NormKind::Batch: {
        t.xhat = Matrix(batch_rows, out);
        t.inv_std = Matrix(1, out);
        Matrix mean(1, out), var(1, out);
        if (mode == Mode::Train) {
          for (std::size_t j = 0; j < out; ++j) {
            double mu = 0.0;
            for (std::size_t i = 0; i < batch_rows; ++i) mu += t.affine(i, j);
            mu /= static_cast<double>(batch_rows);
            double s2 = 0.0;
            for (std::size_t i = 0; i < batch_rows; ++i) {
              double d = t.affine(i, j) - mu;
              s2 += d * d;
            }
            s2 /= static_cast<double>(batch_rows);
            mean(0, j) = mu;
            var(0, j) = s2;
          }
          if (mutate) {
            for (std::size_t j = 0; j < out; ++j) {
              layer.run_mean(0, j) = 0.9 * layer.run_mean(0, j) + 0.1 * mean(0, j);
              layer.run_var(0, j) = 0.9 * layer.run_var(0, j) + 0.1 * var(0, j);
            }
          }
        } else {
          mean = layer.run_mean;
          var = layer.run_var;
        }
        for (std::size_t j = 0; j < out; ++j)
          t.inv_std(0, j) = 1.0 / std::sqrt(var(0, j) + kNormEps);
        t.normed = Matrix(batch_rows, out);
        for (std::size_t i = 0; i < batch_rows; ++i)
          for (std::size_t j = 0; j < out; ++j) {
            double xh = (t.affine(i, j) - mean(0, j)) * t.inv_std(0, j);
            t.xhat(i, j) = xh;
            t.normed(i, j) = layer.gamma(0, j) * xh + layer.beta(0, j);
          }
        break;
      }
      case NormKind::Layer: {
        t.xhat = Matrix(batch_rows, out);
        t.inv_std = Matrix(batch_rows, 1);
        t.normed = Matrix(batch_rows, out);
        for (std::size_t i = 0; i < batch_rows; ++i) {
          double mu = 0.0;
          for (std::size_t j = 0; j < out; ++j) mu += t.affine(i, j);
          mu /= static_cast<double>(out);
          double s2 = 0.0;
          for (std::size_t j = 0; j < out; ++j) {
            double d = t.affine(i, j) - mu;
            s2 += d * d;
          }
          s2 /= static_cast<double>(out);
          double inv = 1.0 / std::sqrt(s2 + kNormEps);
          t.inv_std(i, 0) = inv;
          for (std::size_t j = 0; j < out; ++j) {
            double xh = (t.affine(i, j) - mu) * inv;
            t.xhat(i, j) = xh;
            t.normed(i, j) = layer.gamma(0, j) * xh + layer.beta(0, j);
          }
        }
        break;
      }
    }

    switch (layer.spec.act) {
      case Activation::Identity:
        t.activated = t.normed;
        break;
      case Activation::Relu:
        t.activated = t.normed;
        for (std::size_t i = 0; i < t.activated.size(); ++i)
          if (t.activated.data()[i] < 0.0) t.activated.data()[i] = 0.0;
        break;
      case Activation::Sigmoid:
        t.activated = t.normed;
        for (std::size_t i = 0; i < t.activated.size(); ++i)
          t.activated.data()[i] = sigmoid(t.activated.data()[i]);
        break;
    }

    if (mode == Mode::Train && layer.spec.dropout > 0.0) {
      if (!rng)
        throw UsageError("train-mode forward with dropout requires an rng stream");
      const double keep = 1.0 - layer.spec.dropout;
      t.mask = Matrix(batch_rows, out);
      t.out = t.activated;
      for (std::size_t i = 0; i < t.mask.size(); ++i) {
        // Inverted dropout: surviving units scaled by 1/keep at train time.
        double m = rng->uniform() < keep ? 1.0 / keep : 0.0;
        t.mask.data()[i] = m;
        t.out.data()[i] *= m;
      }
    } else {
      t.out = t.activated;
    }

    if (auto it = group_by_last.find(k); it != group_by_last.end()) {
      const Matrix& gin = group_inputs[it->second];
      for (std::size_t i = 0; i < t.out.size(); ++i)
        t.out.data()[i] += gin.data()[i];
    }
    x = &t.out;
  }
  return trace;
}

Matrix DenseNet::forward(const Matrix& batch) const {
  // Infer mode never mutates; the const_cast only reaches the shared
  // non-mutating path.
  ForwardTrace t =
      const_cast<DenseNet*>(this)->run(batch, Mode::Infer, nullptr, false);
  return t.layers.back().out;
}

ForwardTrace DenseNet::train_forward(const Matrix& batch, RngStream* rng) {
  return run(batch, Mode::Train, rng, true);
}

ForwardTrace DenseNet::infer_forward_traced(const Matrix& batch) const {
  return const_cast<DenseNet*>(this)->run(batch, Mode::Infer, nullptr, false);
}

Gradients DenseNet::backward(const ForwardTrace& trace, const Matrix& upstream) const {
  if (trace.layers.size() != layers_.size())
    throw UsageError("backward: trace does not match this net");
  if (!upstream.same_shape(trace.layers.back().out))
    throw ValidationError("backward: upstream gradient shape mismatch");

  std::map<std::size_t, std::size_t> group_by_first, group_by_last;
  for (std::size_t g = 0; g < spec_.residual_groups.size(); ++g) {
    group_by_first[spec_.residual_groups[g].first] = g;
    group_by_last[spec_.residual_groups[g].second] = g;
  }
  std::vector<Matrix> skip_grads(spec_.residual_groups.size());

  Gradients grads;
  std::vector<std::vector<Matrix>> per_layer(layers_.size());

  Matrix cur = upstream;
  for (std::size_t ri = layers_.size(); ri-- > 0;) {
    const Layer& layer = layers_[ri];
    const ForwardTrace::PerLayer& t = trace.layers[ri];
    const std::size_t out = layer.spec.out;
    const std::size_t rows = cur.rows();

    if (auto it = group_by_last.find(ri); it != group_by_last.end())
      skip_grads[it->second] = cur;

    // Dropout.
    if (!t.mask.empty())
      for (std::size_t i = 0; i < cur.size(); ++i)
        cur.data()[i] *= t.mask.data()[i];

    // Activation.
    switch (layer.spec.act) {
      case Activation::Identity:
        break;
      case Activation::Relu:
        for (std::size_t i = 0; i < cur.size(); ++i)
          if (t.activated.data()[i] <= 0.0) cur.data()[i] = 0.0;
        break;
      case Activation::Sigmoid:
        for (std::size_t i = 0; i < cur.size(); ++i) {
          double s = t.activated.data()[i];
          cur.data()[i] *= s * (1.0 - s);
        }
        break;
    }

    // Normalization.
    Matrix d_gamma, d_beta;
    if (layer.spec.norm != NormKind::None) {
      d_gamma = Matrix(1, out);
      d_beta = Matrix(1, out);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < out; ++j) {
          d_gamma(0, j) += cur(i, j) * t.xhat(i, j);
          d_beta(0, j) += cur(i, j);
        }
      // d wrt xhat.
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < out; ++j) cur(i, j) *= layer.gamma(0, j);

      if (layer.spec.norm == NormKind::Batch) {
        if (trace.mode == Mode::Train) {
          const double n = static_cast<double>(rows);
          Matrix sum_d(1, out), sum_dx(1, out);
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < out; ++j) {
              sum_d(0, j) += cur(i, j);
              sum_dx(0, j) += cur(i, j) * t.xhat(i, j);
            }
          Matrix dx(rows, out);
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < out; ++j)
              dx(i, j) = t.inv_std(0, j) / n *
                         (n * cur(i, j) - sum_d(0, j) - t.xhat(i, j) * sum_dx(0, j));
          cur = std::move(dx);
        } else {
          // Frozen statistics are constants.
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < out; ++j) cur(i, j) *= t.inv_std(0, j);
        }
      } else {  // Layer norm: statistics are per-row in both modes.
        const double d = static_cast<double>(out);
        Matrix dx(rows, out);
        for (std::size_t i = 0; i < rows; ++i) {
          double sum_d = 0.0, sum_dx = 0.0;
          for (std::size_t j = 0; j < out; ++j) {
            sum_d += cur(i, j);
            sum_dx += cur(i, j) * t.xhat(i, j);
          }
          for (std::size_t j = 0; j < out; ++j)
            dx(i, j) = t.inv_std(i, 0) / d *
                       (d * cur(i, j) - sum_d - t.xhat(i, j) * sum_dx);
        }
        cur = std::move(dx);
      }
    }

    // Affine.
    const Matrix& x_in = ri == 0 ? trace.input : trace.layers[ri - 1].out;
    Matrix dw = matmul_tn(x_in, cur);
    Matrix db(1, out);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < out; ++j) db(0, j) += cur(i, j);
    cur = matmul_nt(cur, layer.w);

    if (auto it = group_by_first.find(ri); it != group_by_first.end()) {
      const Matrix& sk = skip_grads[it->second];
      for (std::size_t i = 0; i < cur.size(); ++i) cur.data()[i] += sk.data()[i];
    }

    per_layer[ri].push_back(std::move(dw));
    per_layer[ri].push_back(std::move(db));
    if (layer.spec.norm != NormKind::None) {
      per_layer[ri].push_back(std::move(d_gamma));
      per_layer[ri].push_back(std::move(d_beta));
    }
  }

  for (auto& v : per_layer)
    for (auto& g : v) grads.params.push_back(std::move(g));
  grads.input = std::move(cur);
  return grads;
}

std::vector<Matrix*> DenseNet::params() {
  std::vector<Matrix*> p;
  for (Layer& l : layers_) {
    p.push_back(&l.w);
    p.push_back(&l.b);
    if (l.spec.norm != NormKind::None) {
      p.push_back(&l.gamma);
      p.push_back(&l.beta);
    }
  }
  return p;
}

std::vector<const Matrix*> DenseNet::params() const {
  std::vector<const Matrix*> p;
  for (const Layer& l : layers_) {
    p.push_back(&l.w);
    p.push_back(&l.b);
    if (l.spec.norm != NormKind::None) {
      p.push_back(&l.gamma);
      p.push_back(&l.beta);
    }
  }
  return p;
}

std::size_t DenseNet::param_count() const {
  std::size_t n = 0;
  for (const Matrix* m : params()) n += m->size();
  return n;
}

void DenseNet::save(std::ostream& os) const {
  io::write_magic(os, kMagic);
  io::write_u32(os, kVersion);
  io::write_u32(os, static_cast<std::uint32_t>(layers_.size()));
  for (const Layer& l : layers_) {
    io::write_u32(os, static_cast<std::uint32_t>(l.spec.in));
    io::write_u32(os, static_cast<std::uint32_t>(l.spec.out));
    io::write_u8(os, static_cast<std::uint8_t>(l.spec.act));
    io::write_u8(os, static_cast<std::uint8_t>(l.spec.norm));
    io::write_f64(os, l.spec.dropout);
  }
  io::write_u32(os, static_cast<std::uint32_t>(spec_.residual_groups.size()));
  for (const auto& [first, last] : spec_.residual_groups) {
    io::write_u32(os, static_cast<std::uint32_t>(first));
    io::write_u32(os, static_cast<std::uint32_t>(last));
  }
  for (const Layer& l : layers_) {
    io::write_matrix(os, l.w);
    io::write_matrix(os, l.b);
    if (l.spec.norm != NormKind::None) {
      io::write_matrix(os, l.gamma);
      io::write_matrix(os, l.beta);
      io::write_matrix(os, l.run_mean);
      io::write_matrix(os, l.run_var);
    }
  }
}

DenseNet DenseNet::load(std::istream& is) {
  io::expect_magic(is, kMagic);
  if (io::read_u32(is) != kVersion)
    throw ValidationError("network checkpoint: unsupported version");
  DenseNet net;
  std::uint32_t n_layers = io::read_u32(is);
  net.spec_.layers.resize(n_layers);
  net.layers_.resize(n_layers);
  for (std::uint32_t k = 0; k < n_layers; ++k) {
    LayerSpec& ls = net.spec_.layers[k];
    ls.in = io::read_u32(is);
    ls.out = io::read_u32(is);
    ls.act = static_cast<Activation>(io::read_u8(is));
    ls.norm = static_cast<NormKind>(io::read_u8(is));
    ls.dropout = io::read_f64(is);
    net.layers_[k].spec = ls;
  }
  std::uint32_t n_groups = io::read_u32(is);
  for (std::uint32_t g = 0; g < n_groups; ++g) {
    std::size_t first = io::read_u32(is);
    std::size_t last = io::read_u32(is);
    net.spec_.residual_groups.emplace_back(first, last);
  }
  for (std::uint32_t k = 0; k < n_layers; ++k) {
    Layer& l = net.layers_[k];
    l.w = io::read_matrix(is);
    l.b = io::read_matrix(is);
    if (l.spec.norm != NormKind::None) {
      l.gamma = io::read_matrix(is);
      l.beta = io::read_matrix(is);
      l.run_mean = io::read_matrix(is);
      l.run_var = io::read_matrix(is);
    }
  }
  net.spec_.validate();
  return net;
}

bool operator==(const DenseNet& a, const DenseNet& b) {
  if (a.layers_.size() != b.layers_.size()) return false;
  if (a.spec_.residual_groups != b.spec_.residual_groups) return false;
  for (std::size_t k = 0; k < a.layers_.size(); ++k) {
    const Layer& la = a.layers_[k];
    const Layer& lb = b.layers_[k];
    if (la.spec.in != lb.spec.in || la.spec.out != lb.spec.out ||
        la.spec.act != lb.spec.act || la.spec.norm != lb.spec.norm ||
        la.spec.dropout != lb.spec.dropout)
      return false;
    if (!bitwise_equal(la.w, lb.w) || !bitwise_equal(la.b, lb.b)) return false;
    if (la.spec.norm != NormKind::None &&
        (!bitwise_equal(la.gamma, lb.gamma) || !bitwise_equal(la.beta, lb.beta) ||
         !bitwise_equal(la.run_mean, lb.run_mean) ||
         !bitwise_equal(la.run_var, lb.run_var)))
      return false;
  }
  return true;
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

LossValue loss_mse(const Matrix& pred, const Matrix& target) {
  if (!pred.same_shape(target)) throw ValidationError("loss_mse: shape mismatch");
  if (pred.rows() == 0) throw ValidationError("loss_mse: empty batch");
  LossValue lv;
  lv.grad = Matrix(pred.rows(), pred.cols());
  const double inv_b = 1.0 / static_cast<double>(pred.rows());
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    double d = pred.data()[i] - target.data()[i];
    total += d * d;
    lv.grad.data()[i] = 2.0 * d * inv_b;
  }
  lv.value = total * inv_b;
  return lv;
}

LossValue loss_bce(const Matrix& logits, const std::vector<int>& labels) {
  if (logits.cols() != 1) throw ValidationError("loss_bce: logits must be B x 1");
  if (logits.rows() != labels.size())
    throw ValidationError("loss_bce: label count mismatch");
  if (logits.rows() == 0) throw ValidationError("loss_bce: empty batch");
  for (int y : labels)
    if (y != 0 && y != 1) throw ValidationError("loss_bce: labels must be 0 or 1");
  LossValue lv;
  lv.grad = Matrix(logits.rows(), 1);
  const double inv_b = 1.0 / static_cast<double>(logits.rows());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    double z = logits(i, 0);
    double y = static_cast<double>(labels[i]);
    // log(1 + e^-|z|) + max(z,0) - z*y, the overflow-safe form.
    total += std::log1p(std::exp(-std::abs(z))) + std::max(z, 0.0) - z * y;
    lv.grad(i, 0) = (sigmoid(z) - y) * inv_b;
  }
  lv.value = total * inv_b;
  return lv;
}

AdamState::AdamState(const std::vector<Matrix*>& params, AdamConfig cfg)
    : cfg_(cfg) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const Matrix* p : params) {
    m_.emplace_back(p->rows(), p->cols());
    v_.emplace_back(p->rows(), p->cols());
  }
}

void AdamState::step(const std::vector<Matrix*>& params,
                     const std::vector<Matrix>& grads, double lr_scale) {
  if (params.size() != m_.size() || grads.size() != m_.size())
    throw ValidationError("adam_step: parameter/gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i)
    if (!params[i]->same_shape(m_[i]) || !grads[i].same_shape(m_[i]))
      throw ValidationError("adam_step: shape mismatch at parameter " +
                            std::to_string(i));
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  const double lr = cfg_.lr * lr_scale;
  for (std::size_t i = 0; i < params.size(); ++i) {
    double* p = params[i]->data();
    double* m = m_[i].data();
    double* v = v_[i].data();
    const double* g = grads[i].data();
    for (std::size_t k = 0; k < m_[i].size(); ++k) {
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
      double mhat = m[k] / bc1;
      double vhat = v[k] / bc2;
      p[k] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

void adam_step(AdamState& state, const std::vector<Matrix*>& params,
               const std::vector<Matrix>& grads, double lr_scale) {
  state.step(params, grads, lr_scale);
}

double cosine_lr_scale(std::size_t epoch, std::size_t total_epochs) {
  if (total_epochs <= 1) return 1.0;
  double x = static_cast<double>(epoch) / static_cast<double>(total_epochs - 1);
  return 0.55 + 0.45 * std::cos(3.14159265358979323846 * x);
}

}  // namespace fermi::nn
