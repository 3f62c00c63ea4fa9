#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <stdexcept>

namespace sprune {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using ByteMatrix = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;

// Batches are stored column-wise: one sample per column. Feature maps are
// flattened per sample with index c*H*W + y*W + x.

enum class Activation { Identity, LeakyRelu };

struct LossKind {
  enum class Type { GaussianNll, CategoricalCe };
  Type type = Type::CategoricalCe;
  double tau = 1.0;  // Gaussian precision, unused for CE
};

struct LossGrad {
  double loss = 0.0;  // summed over the batch
  Matrix dzeta;       // gradient w.r.t. output-layer pre-activations
};

struct ConvSpec {
  int in_c = 0, in_h = 0, in_w = 0;
  int out_c = 0, k = 0;
  int out_h() const { return in_h - k + 1; }
  int out_w() const { return in_w - k + 1; }
  int in_size() const { return in_c * in_h * in_w; }
  int out_size() const { return out_c * out_h() * out_w(); }
  int patch_size() const { return in_c * k * k; }
};

struct PoolSpec {
  int c = 0, h = 0, w = 0;  // input geometry; h and w must be even
  int out_h() const { return h / 2; }
  int out_w() const { return w / 2; }
  int in_size() const { return c * h * w; }
  int out_size() const { return c * out_h() * out_w(); }
};

struct PoolResult {
  Matrix out;
  ByteMatrix argmax;  // winner position 0..3 inside each 2x2 block
};

struct ConvGrads {
  Matrix dkernels;
  Vector dbias;
  Matrix dfmap;
};

Matrix affine_forward(const Matrix& weights, const Vector& bias, const Matrix& z);

// kernels: out_c x (in_c*k*k), fmap: in_size x B, valid padding, stride 1
Matrix conv2d_forward(const ConvSpec& cs, const Matrix& kernels,
                      const Vector& bias, const Matrix& fmap);
ConvGrads conv2d_backward(const ConvSpec& cs, const Matrix& kernels,
                          const Matrix& fmap, const Matrix& dout);

PoolResult pool_forward(const PoolSpec& ps, const Matrix& fmap);
Matrix pool_backward(const PoolSpec& ps, const ByteMatrix& argmax,
                     const Matrix& dout);

Matrix apply_activation(Activation act, double slope, const Matrix& zeta);
Matrix activation_grad(Activation act, double slope, const Matrix& zeta);

Matrix softmax_columns(const Matrix& logits);

// outputs are pre-activations of the last layer: identity outputs for
// GaussianNll, logits for CategoricalCe (softmax fused with the loss).
LossGrad loss_and_grad(const LossKind& kind, const Matrix& outputs,
                       const Matrix& targets);

void check_finite(const Matrix& m, const char* what);

}  // namespace sprune
