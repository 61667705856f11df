#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <utility>
#include <vector>

#include "fermi/mat.hpp"
#include "fermi/rng.hpp"

namespace fermi::nn {

enum class Activation : std::uint8_t { Identity = 0, Relu = 1, Sigmoid = 2 };
enum class NormKind : std::uint8_t { None = 0, Batch = 1, Layer = 2 };
enum class Mode { Train, Infer };

// One affine layer plus its post-ops. Per-layer order is fixed:
// affine -> normalization -> activation -> dropout.
struct LayerSpec {
  std::size_t in = 0;
  std::size_t out = 0;
  Activation act = Activation::Identity;
  NormKind norm = NormKind::None;
  double dropout = 0.0;  // [0, 1); ignored in infer mode
};

struct NetSpec {
  std::vector<LayerSpec> layers;
  // Inclusive [first, last] layer spans whose input is added to their output.
  // Spans must be disjoint and dimension-preserving.
  std::vector<std::pair<std::size_t, std::size_t>> residual_groups;

  void validate() const;
};

struct Layer {
  LayerSpec spec;
  Matrix w;  // in x out
  Matrix b;  // 1 x out
  // Present when spec.norm != None.
  Matrix gamma, beta;  // 1 x out
  // Batch-norm running statistics (EMA, momentum 0.1), used in infer mode.
  Matrix run_mean, run_var;  // 1 x out
};

// Cached activations from one training-mode forward pass; everything
// backward() needs to replay the pass in reverse.
struct ForwardTrace {
  Mode mode = Mode::Train;
  Matrix input;
  struct PerLayer {
    Matrix affine;   // pre-norm
    Matrix xhat;     // normalized (pre scale/shift), batch/layer norm only
    Matrix inv_std;  // 1 x out (batch) or rows x 1 (layer)
    Matrix normed;   // post norm (== affine when norm == None)
    Matrix activated;
    Matrix mask;     // inverted-dropout mask (already scaled), empty if unused
    Matrix out;
  };
  std::vector<PerLayer> layers;
};

struct Gradients {
  std::vector<Matrix> params;  // same order as DenseNet::params()
  Matrix input;                // dL/d(batch input)
};

// Minimal dense network: explicit forward/backward, fixed layer kinds.
// Immutable during inference; training mutates it from one writer at a time.
class DenseNet {
 public:
  DenseNet() = default;
  // He-uniform init for ReLU layers, Xavier-uniform otherwise; seeded.
  DenseNet(NetSpec spec, RngStream& rng);

  std::size_t input_dim() const;
  std::size_t output_dim() const;
  const NetSpec& spec() const { return spec_; }
  const std::vector<Layer>& layers() const { return layers_; }

  // Inference-mode forward: no dropout, frozen normalization statistics,
  // no randomness, no mutation. Safe to call concurrently.
  Matrix forward(const Matrix& batch) const;

  // Training-mode forward. Caches activations, applies dropout through the
  // supplied stream (required when any dropout rate > 0), and updates
  // batch-norm running statistics.
  ForwardTrace train_forward(const Matrix& batch, RngStream* rng);

  // Inference-mode forward that also records a trace, for gradient flow
  // through a frozen net. Does not mutate the net.
  ForwardTrace infer_forward_traced(const Matrix& batch) const;

  // Gradients of a scalar loss with upstream dL/d(output) for the same batch
  // that produced `trace`.
  Gradients backward(const ForwardTrace& trace, const Matrix& upstream) const;

  // Flattened parameter list: per layer W, b, then gamma, beta when present.
  std::vector<Matrix*> params();
  std::vector<const Matrix*> params() const;
  std::size_t param_count() const;

  void save(std::ostream& os) const;
  static DenseNet load(std::istream& is);

  friend bool operator==(const DenseNet& a, const DenseNet& b);

 private:
  ForwardTrace run(const Matrix& batch, Mode mode, RngStream* rng, bool mutate);

  NetSpec spec_;
  std::vector<Layer> layers_;
};

// Mean over the batch of the squared L2 norm of (pred - target) per row;
// gradient 2(pred - target)/B.
struct LossValue {
  double value = 0.0;
  Matrix grad;
};
LossValue loss_mse(const Matrix& pred, const Matrix& target);

// Numerically stable mean binary cross-entropy on logits (B x 1);
// gradient (sigmoid(logit) - label)/B.
LossValue loss_bce(const Matrix& logits, const std::vector<int>& labels);

double sigmoid(double z);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class AdamState {
 public:
  AdamState() = default;
  AdamState(const std::vector<Matrix*>& params, AdamConfig cfg);

  // Standard bias-corrected Adam update; lr_scale multiplies the configured
  // learning rate (cosine schedule hook).
  void step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads,
            double lr_scale = 1.0);

  std::uint64_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  std::vector<Matrix> m_, v_;
  std::uint64_t t_ = 0;
};

void adam_step(AdamState& state, const std::vector<Matrix*>& params,
               const std::vector<Matrix>& grads, double lr_scale = 1.0);

// Cosine decay from 1.0 at epoch 0 to 0.1 at the final epoch.
double cosine_lr_scale(std::size_t epoch, std::size_t total_epochs);

}  // namespace fermi::nn
