#include "sprune/tensor.hpp"

#include <cmath>

namespace sprune {

namespace {

// patch matrix for one sample: patch_size x (out_h*out_w)
Matrix im2col(const ConvSpec& cs, const Eigen::Ref<const Vector>& sample) {
  const int oh = cs.out_h(), ow = cs.out_w();
  Matrix patches(cs.patch_size(), oh * ow);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      int col = oy * ow + ox;
      int row = 0;
      for (int c = 0; c < cs.in_c; ++c) {
        for (int ky = 0; ky < cs.k; ++ky) {
          int base = c * cs.in_h * cs.in_w + (oy + ky) * cs.in_w + ox;
          for (int kx = 0; kx < cs.k; ++kx) {
            patches(row++, col) = sample(base + kx);
          }
        }
      }
    }
  }
  return patches;
}

}  // namespace

Matrix affine_forward(const Matrix& weights, const Vector& bias,
                      const Matrix& z) {
  if (weights.cols() != z.rows() || weights.rows() != bias.size()) {
    throw std::invalid_argument("affine_forward: shape mismatch");
  }
  return (weights * z).colwise() + bias;
}

Matrix conv2d_forward(const ConvSpec& cs, const Matrix& kernels,
                      const Vector& bias, const Matrix& fmap) {
  if (cs.k > cs.in_h || cs.k > cs.in_w) {
    throw std::invalid_argument("conv2d_forward: kernel larger than input");
  }
  if (fmap.rows() != cs.in_size() || kernels.rows() != cs.out_c ||
      kernels.cols() != cs.patch_size() || bias.size() != cs.out_c) {
    throw std::invalid_argument("conv2d_forward: shape mismatch");
  }
  const int oh = cs.out_h(), ow = cs.out_w();
  Matrix out(cs.out_size(), fmap.cols());
  for (Eigen::Index i = 0; i < fmap.cols(); ++i) {
    Matrix patches = im2col(cs, fmap.col(i));
    Matrix res = kernels * patches;  // out_c x (oh*ow)
    res.colwise() += bias;
    // res is out_c x (oh*ow); remap to channel-major layout
    for (int c = 0; c < cs.out_c; ++c) {
      for (int p = 0; p < oh * ow; ++p) {
        out(c * oh * ow + p, i) = res(c, p);
      }
    }
  }
  return out;
}

ConvGrads conv2d_backward(const ConvSpec& cs, const Matrix& kernels,
                          const Matrix& fmap, const Matrix& dout) {
  const int oh = cs.out_h(), ow = cs.out_w();
  ConvGrads g;
  g.dkernels = Matrix::Zero(cs.out_c, cs.patch_size());
  g.dbias = Vector::Zero(cs.out_c);
  g.dfmap = Matrix::Zero(fmap.rows(), fmap.cols());
  for (Eigen::Index i = 0; i < fmap.cols(); ++i) {
    Matrix patches = im2col(cs, fmap.col(i));
    Matrix d(cs.out_c, oh * ow);
    for (int c = 0; c < cs.out_c; ++c) {
      for (int p = 0; p < oh * ow; ++p) {
        d(c, p) = dout(c * oh * ow + p, i);
      }
    }
    g.dkernels.noalias() += d * patches.transpose();
    g.dbias += d.rowwise().sum();
    Matrix dpatches = kernels.transpose() * d;  // patch_size x (oh*ow)
    // scatter-add (col2im)
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        int col = oy * ow + ox;
        int row = 0;
        for (int c = 0; c < cs.in_c; ++c) {
          for (int ky = 0; ky < cs.k; ++ky) {
            int base = c * cs.in_h * cs.in_w + (oy + ky) * cs.in_w + ox;
            for (int kx = 0; kx < cs.k; ++kx) {
              g.dfmap(base + kx, i) += dpatches(row++, col);
            }
          }
        }
      }
    }
  }
  return g;
}

PoolResult pool_forward(const PoolSpec& ps, const Matrix& fmap) {
  if (ps.h % 2 != 0 || ps.w % 2 != 0) {
    throw std::invalid_argument("pool_forward: odd spatial dimensions");
  }
  if (fmap.rows() != ps.in_size()) {
    throw std::invalid_argument("pool_forward: shape mismatch");
  }
  const int oh = ps.out_h(), ow = ps.out_w();
  PoolResult r;
  r.out.resize(ps.out_size(), fmap.cols());
  r.argmax.resize(ps.out_size(), fmap.cols());
  for (Eigen::Index i = 0; i < fmap.cols(); ++i) {
    for (int c = 0; c < ps.c; ++c) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          int best = 0;
          double bestv = -std::numeric_limits<double>::infinity();
          for (int j = 0; j < 4; ++j) {
            int y = 2 * oy + j / 2, x = 2 * ox + j % 2;
            double v = fmap(c * ps.h * ps.w + y * ps.w + x, i);
            if (v > bestv) {  // first-index tie-break
              bestv = v;
              best = j;
            }
          }
          int o = c * oh * ow + oy * ow + ox;
          r.out(o, i) = bestv;
          r.argmax(o, i) = static_cast<std::uint8_t>(best);
        }
      }
    }
  }
  return r;
}

Matrix pool_backward(const PoolSpec& ps, const ByteMatrix& argmax,
                     const Matrix& dout) {
  const int oh = ps.out_h(), ow = ps.out_w();
  Matrix din = Matrix::Zero(ps.in_size(), dout.cols());
  for (Eigen::Index i = 0; i < dout.cols(); ++i) {
    for (int c = 0; c < ps.c; ++c) {
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          int o = c * oh * ow + oy * ow + ox;
          int j = argmax(o, i);
          int y = 2 * oy + j / 2, x = 2 * ox + j % 2;
          din(c * ps.h * ps.w + y * ps.w + x, i) += dout(o, i);
        }
      }
    }
  }
  return din;
}

Matrix apply_activation(Activation act, double slope, const Matrix& zeta) {
  switch (act) {
    case Activation::Identity:
      return zeta;
    case Activation::LeakyRelu:
      return zeta.unaryExpr([slope](double v) { return v > 0.0 ? v : slope * v; });
  }
  throw std::logic_error("unknown activation");
}

Matrix activation_grad(Activation act, double slope, const Matrix& zeta) {
  switch (act) {
    case Activation::Identity:
      return Matrix::Ones(zeta.rows(), zeta.cols());
    case Activation::LeakyRelu:
      // subgradient at 0 equals the leak slope
      return zeta.unaryExpr([slope](double v) { return v > 0.0 ? 1.0 : slope; });
  }
  throw std::logic_error("unknown activation");
}

Matrix softmax_columns(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.cols(); ++i) {
    Vector col = logits.col(i);
    double m = col.maxCoeff();
    Vector e = (col.array() - m).exp();
    p.col(i) = e / e.sum();
  }
  return p;
}

LossGrad loss_and_grad(const LossKind& kind, const Matrix& outputs,
                       const Matrix& targets) {
  if (outputs.rows() != targets.rows() || outputs.cols() != targets.cols()) {
    throw std::invalid_argument("loss_and_grad: shape mismatch");
  }
  LossGrad lg;
  if (kind.type == LossKind::Type::GaussianNll) {
    if (kind.tau <= 0.0) {
      throw std::invalid_argument("loss_and_grad: tau must be positive");
    }
    Matrix diff = outputs - targets;
    double n = static_cast<double>(outputs.rows());
    double constant = 0.5 * n * (std::log(2.0 * M_PI) - std::log(kind.tau));
    lg.loss = 0.5 * kind.tau * diff.squaredNorm() +
              constant * static_cast<double>(outputs.cols());
    lg.dzeta = kind.tau * diff;
  } else {
    for (Eigen::Index i = 0; i < targets.cols(); ++i) {
      double s = 0.0;
      for (Eigen::Index r = 0; r < targets.rows(); ++r) {
        double v = targets(r, i);
        if (v != 0.0 && v != 1.0) {
          throw std::invalid_argument("loss_and_grad: CE target not one-hot");
        }
        s += v;
      }
      if (s != 1.0) {
        throw std::invalid_argument("loss_and_grad: CE target not one-hot");
      }
    }
    Matrix probs = softmax_columns(outputs);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < targets.cols(); ++i) {
      for (Eigen::Index r = 0; r < targets.rows(); ++r) {
        if (targets(r, i) == 1.0) {
          loss -= std::log(std::max(probs(r, i), 1e-300));
        }
      }
    }
    lg.loss = loss;
    lg.dzeta = probs - targets;
  }
  return lg;
}

void check_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) {
    throw std::runtime_error(std::string("non-finite values in ") + what);
  }
}

}  // namespace sprune
