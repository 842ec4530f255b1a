#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <algorithm>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "marginpick/core/rng.hpp"
#include "marginpick/tensor/graph.hpp"

// Differentiable operations over N x C x H x W tensors.
//
// Only bias-add and per-channel affine broadcast; everything else requires
// matching shapes. Batch loops run in a fixed order so results do not depend
// on how many runs share the machine.

namespace mp::ops {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

namespace detail {

inline void expect_rank(const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) fail(ErrorKind::shape, what, " must have rank ", rank, ", got ", to_string(s));
}

inline void expect_args(std::span<const Shape> in, std::size_t lo, std::size_t hi) {
  if (in.size() < lo || in.size() > hi) {
    fail(ErrorKind::shape, "expected ", lo, "..", hi, " arguments, got ", in.size());
  }
}

template <typename T>
void add_into(Tensor<T>* dst, std::span<const T> src) {
  if (!dst) return;
  auto d = dst->data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reductions

template <typename T>
class AddOp final : public Op<T> {
 public:
  std::string_view kind() const override { return "add"; }
  Shape output_shape(std::span<const Shape> in) const override {
    detail::expect_args(in, 2, 2);
    if (in[0] != in[1]) fail(ErrorKind::shape, "add operands ", to_string(in[0]), " vs ", to_string(in[1]));
    return in[0];
  }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const RunContext&) override {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*in[0])[i] + (*in[1])[i];
  }
  void backward(std::span<const Tensor<T>* const>, const Tensor<T>&, const Tensor<T>& gout,
                std::span<Tensor<T>* const> gin) override {
    detail::add_into(gin[0], gout.data());
    detail::add_into(gin[1], gout.data());
  }
};

template <typename T>
class MulOp final : public Op<T> {
 public:
  std::string_view kind() const override { return "mul"; }
  Shape output_shape(std::span<const Shape> in) const override {
    detail::expect_args(in, 2, 2);
    if (in[0] != in[1]) fail(ErrorKind::shape, "mul operands ", to_string(in[0]), " vs ", to_string(in[1]));
    return in[0];
  }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const RunContext&) override {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*in[0])[i] * (*in[1])[i];
  }
  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, const Tensor<T>& gout,
                std::span<Tensor<T>* const> gin) override {
    for (int k = 0; k < 2; ++k) {
      if (!gin[k]) continue;
      const Tensor<T>& other = *in[1 - k];
      for (std::size_t i = 0; i < gout.size(); ++i) (*gin[k])[i] += gout[i] * other[i];
    }
  }
};

template <typename T>
class SumOp final : public Op<T> {
 public:
  std::string_view kind() const override { return "sum"; }
  Shape output_shape(std::span<const Shape> in) const override {
    detail::expect_args(in, 1, 1);
    return {};
  }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const RunContext&) override {
    double s = 0.0;
    for (T v : in[0]->data()) s += v;
    out[0] = static_cast<T>(s);
  }
  void backward(std::span<const Tensor<T>* const>, const Tensor<T>&, const Tensor<T>& gout,
                std::span<Tensor<T>* const> gin) override {
    if (!gin[0]) return;
    for (T& g : gin[0]->data()) g += gout[0];
  }
};

template <typename T>
class ReluOp final : public Op<T> {
 public:
  std::string_view kind() const override { return "relu"; }
  Shape output_shape(std::span<const Shape> in) const override {
    detail::expect_args(in, 1, 1);
    return in[0];
  }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const RunContext&) override {
    const Tensor<T>& x = *in[0];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T{0} || x[i] != x[i] ? x[i] : T{0};  // NaN passes through
  }
  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, const Tensor<T>& gout,
                std::span<Tensor<T>* const> gin) override {
    if (!gin[0]) return;
    const Tensor<T>& x = *in[0];
    for (std::size_t i = 0; i < gout.size(); ++i) {
      if (x[i] > T{0}) (*gin[0])[i] += gout[i];
    }
  }
  std::uint64_t branch_signature(std::span<const Tensor<T>* const> in,
                                 const Tensor<T>&) const override {
    std::uint64_t h = 0, word = 0;
    const Tensor<T>& x = *in[0];
    for (std::size_t i = 0; i < x.size(); ++i) {
      word = (word << 1) | (x[i] > T{0} ? 1u : 0u);
      if (i % 64 == 63) h = hash_combine(h, word), word = 0;
    }
    return hash_combine(h, word);
  }
};

// (N, ...) -> (N, prod(...))
template <typename T>
class FlattenOp final : public Op<T> {
 public:
  std::string_view kind() const override { return "flatten"; }
  Shape output_shape(std::span<const Shape> in) const override {
    detail::expect_args(in, 1, 1);
    if (in[0].empty()) fail(ErrorKind::shape, "flatten needs a batch dimension");
    return {in[0][0], shape_size(in[0]) / std::max<std::size_t>(in[0][0], 1)};
  }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const RunContext&) override {
    std::copy(in[0]->data().begin(), in[0]->data().end(), out.data().begin());
  }
  void backward(std::span<const Tensor<T>* const>, const Tensor<T>&, const Tensor<T>& gout,
                std::span<Tensor<T>* const> gin) override {
    detail::add_into(gin[0], gout.data());
  }
};

// ---------------------------------------------------------------------------
// Dense layers

// (N,K) x (K,M) -> (N,M)
template <typename T>
class MatMulOp final : public Op<T> {
 public:
  std::string_view kind() const override { return "matmul"; }
  Shape output_shape(std::span<const Shape> in) const override {
    detail::expect_args(in, 2, 2);
    detail::expect_rank(in[0], 2, "matmul lhs");
    detail::expect_rank(in[1], 2, "matmul rhs");
    if (in[0][1] != in[1][0]) {
      fail(ErrorKind::shape, "matmul inner extents differ: ", to_string(in[0]), " x ", to_string(in[1]));
    }
    return {in[0][0], in[1][1]};
  }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const RunContext&) override {
    const auto& a = *in[0];
    const auto& b = *in[1];
    ConstMatMap<T> A(a.ptr(), a.dim(0), a.dim(1));
    ConstMatMap<T> B(b.ptr(), b.dim(0), b.dim(1));
    MatMap<T> Y(out.ptr(), out.dim(0), out.dim(1));
    Y.noalias() = A * B;
  }
  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, const Tensor<T>& gout,
                std::span<Tensor<T>* const> gin) override {
    const auto& a = *in[0];
    const auto& b = *in[1];
    ConstMatMap<T> A(a.ptr(), a.dim(0), a.dim(1));
    ConstMatMap<T> B(b.ptr(), b.dim(0), b.dim(1));
    ConstMatMap<T> G(gout.ptr(), gout.dim(0), gout.dim(1));
    if (gin[0]) MatMap<T>(gin[0]->ptr(), a.dim(0), a.dim(1)).noalias() += G * B.transpose();
    if (gin[1]) MatMap<T>(gin[1]->ptr(), b.dim(0), b.dim(1)).noalias() += A.transpose() * G;
  }
};

// y = x W^T + b with x (N,K), W (M,K), b (M).
template <typename T>
class LinearOp final : public Op<T> {
 public:
  std::string_view kind() const override { return "linear"; }
  Shape output_shape(std::span<const Shape> in) const override {
    detail::expect_args(in, 2, 3);
    detail::expect_rank(in[0], 2, "linear input");
    detail::expect_rank(in[1], 2, "linear weight");
    if (in[0][1] != in[1][1]) {
      fail(ErrorKind::shape, "linear expects ", in[1][1], " input features, got ", in[0][1]);
    }
    if (in.size() == 3 && in[2] != Shape{in[1][0]}) {
      fail(ErrorKind::shape, "linear bias must be (", in[1][0], "), got ", to_string(in[2]));
    }
    return {in[0][0], in[1][0]};
  }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const RunContext&) override {
    const auto& x = *in[0];
    const auto& w = *in[1];
    ConstMatMap<T> X(x.ptr(), x.dim(0), x.dim(1));
    ConstMatMap<T> W(w.ptr(), w.dim(0), w.dim(1));
    MatMap<T> Y(out.ptr(), out.dim(0), out.dim(1));
    // Row by row so each sample's result is independent of the batch.
    for (Eigen::Index n = 0; n < X.rows(); ++n) Y.row(n).noalias() = X.row(n) * W.transpose();
    if (in.size() == 3) {
      const auto& b = *in[2];
      for (std::size_t n = 0; n < out.dim(0); ++n) {
        for (std::size_t m = 0; m < out.dim(1); ++m) Y(n, m) += b[m];
      }
    }
  }
  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, const Tensor<T>& gout,
                std::span<Tensor<T>* const> gin) override {
    const auto& x = *in[0];
    const auto& w = *in[1];
    ConstMatMap<T> X(x.ptr(), x.dim(0), x.dim(1));
    ConstMatMap<T> W(w.ptr(), w.dim(0), w.dim(1));
    ConstMatMap<T> G(gout.ptr(), gout.dim(0), gout.dim(1));
    if (gin[0]) {
      MatMap<T> GX(gin[0]->ptr(), x.dim(0), x.dim(1));
      for (Eigen::Index n = 0; n < G.rows(); ++n) GX.row(n).noalias() += G.row(n) * W;
    }
    if (gin[1]) MatMap<T>(gin[1]->ptr(), w.dim(0), w.dim(1)).noalias() += G.transpose() * X;
    if (in.size() == 3 && gin[2]) {
      for (std::size_t n = 0; n < gout.dim(0); ++n) {
        for (std::size_t m = 0; m < gout.dim(1); ++m) (*gin[2])[m] += G(n, m);
      }
    }
  }
};

// 2-D convolution, zero padding, as an im2col GEMM per sample. Each sample
// goes through the same arithmetic, so a row's result does not depend on
// what else is in the batch.
template <typename T>
class Conv2dOp final : public Op<T> {
 public:
  Conv2dOp(std::size_t stride, std::size_t pad) : stride_(stride), pad_(pad) {}

  std::string_view kind() const override { return "conv2d"; }

  Shape output_shape(std::span<const Shape> in) const override {
    detail::expect_args(in, 2, 3);
    detail::expect_rank(in[0], 4, "conv input");
    detail::expect_rank(in[1], 4, "conv weight");
    const Shape& x = in[0];
    const Shape& w = in[1];
    if (x[1] != w[1]) fail(ErrorKind::shape, "conv expects ", w[1], " input channels, got ", x[1]);
    if (in.size() == 3 && in[2] != Shape{w[0]}) {
      fail(ErrorKind::shape, "conv bias must be (", w[0], "), got ", to_string(in[2]));
    }
    if (x[2] + 2 * pad_ < w[2] || x[3] + 2 * pad_ < w[3]) {
      fail(ErrorKind::config, "conv kernel ", w[2], "x", w[3], " larger than padded input ",
           to_string(x), ": spatial extent reaches 0");
    }
    return {x[0], w[0], (x[2] + 2 * pad_ - w[2]) / stride_ + 1, (x[3] + 2 * pad_ - w[3]) / stride_ + 1};
  }

  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const RunContext&) override {
    const auto& x = *in[0];
    const auto& w = *in[1];
    const Geometry g = geometry(x.shape(), w.shape(), out.shape());
    ConstMatMap<T> Wm(w.ptr(), g.O, g.K);
    for (std::size_t n = 0; n < g.N; ++n) {
      im2col(x, g, n);
      ConstMatMap<T> Col(col_.data(), g.K, g.P);
      MatMap<T> Y(out.ptr() + n * g.O * g.P, g.O, g.P);
      Y.noalias() = Wm * Col;
      if (in.size() == 3) {
        for (std::size_t o = 0; o < g.O; ++o) Y.row(o).array() += (*in[2])[o];
      }
    }
  }

  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>& out, const Tensor<T>& gout,
                std::span<Tensor<T>* const> gin) override {
    const auto& x = *in[0];
    const auto& w = *in[1];
    const Geometry g = geometry(x.shape(), w.shape(), out.shape());
    ConstMatMap<T> Wm(w.ptr(), g.O, g.K);
    if (gin[0]) gcol_.resize(g.K * g.P);
    for (std::size_t n = 0; n < g.N; ++n) {
      ConstMatMap<T> G(gout.ptr() + n * g.O * g.P, g.O, g.P);
      if (gin[1]) {
        im2col(x, g, n);
        ConstMatMap<T> Col(col_.data(), g.K, g.P);
        MatMap<T>(gin[1]->ptr(), g.O, g.K).noalias() += G * Col.transpose();
      }
      if (gin[0]) {
        MatMap<T>(gcol_.data(), g.K, g.P).noalias() = Wm.transpose() * G;
        col2im(*gin[0], g, n);
      }
    }
    if (in.size() == 3 && gin[2]) {
      for (std::size_t o = 0; o < g.O; ++o) {
        double s = 0.0;
        for (std::size_t n = 0; n < g.N; ++n) {
          const T* src = gout.ptr() + (n * g.O + o) * g.P;
          for (std::size_t p = 0; p < g.P; ++p) s += src[p];
        }
        (*gin[2])[o] += static_cast<T>(s);
      }
    }
  }

 private:
  struct Geometry {
    std::size_t N, C, H, W, O, KH, KW, OH, OW, K, P;
  };

  Geometry geometry(const Shape& x, const Shape& w, const Shape& y) const {
    Geometry g{};
    g.N = x[0];
    g.C = x[1];
    g.H = x[2];
    g.W = x[3];
    g.O = w[0];
    g.KH = w[2];
    g.KW = w[3];
    g.OH = y[2];
    g.OW = y[3];
    g.K = g.C * g.KH * g.KW;
    g.P = g.OH * g.OW;
    return g;
  }

  // Columns of one sample, (K, P); rebuilt in backward rather than kept for
  // the whole batch so the buffer stays cache-sized.
  void im2col(const Tensor<T>& x, const Geometry& g, std::size_t n) {
    col_.assign(g.K * g.P, T{0});
    {
      for (std::size_t c = 0; c < g.C; ++c) {
        const T* plane = x.ptr() + (n * g.C + c) * g.H * g.W;
        for (std::size_t i = 0; i < g.KH; ++i) {
          for (std::size_t j = 0; j < g.KW; ++j) {
            T* dst = col_.data() + ((c * g.KH + i) * g.KW + j) * g.P;
            for (std::size_t oh = 0; oh < g.OH; ++oh) {
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride_ + i) -
                                        static_cast<std::ptrdiff_t>(pad_);
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.H)) continue;
              const T* src = plane + ih * g.W;
              for (std::size_t ow = 0; ow < g.OW; ++ow) {
                const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride_ + j) -
                                          static_cast<std::ptrdiff_t>(pad_);
                if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.W)) dst[oh * g.OW + ow] = src[iw];
              }
            }
          }
        }
      }
    }
  }

  void col2im(Tensor<T>& gx, const Geometry& g, std::size_t n) const {
    for (std::size_t c = 0; c < g.C; ++c) {
      T* plane = gx.ptr() + (n * g.C + c) * g.H * g.W;
      for (std::size_t i = 0; i < g.KH; ++i) {
        for (std::size_t j = 0; j < g.KW; ++j) {
          const T* src = gcol_.data() + ((c * g.KH + i) * g.KW + j) * g.P;
          for (std::size_t oh = 0; oh < g.OH; ++oh) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride_ + i) -
                                      static_cast<std::ptrdiff_t>(pad_);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.H)) continue;
            T* dst = plane + ih * g.W;
            for (std::size_t ow = 0; ow < g.OW; ++ow) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride_ + j) -
                                        static_cast<std::ptrdiff_t>(pad_);
              if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.W)) dst[iw] += src[oh * g.OW + ow];
            }
          }
        }
      }
    }
  }

  std::size_t stride_;
  std::size_t pad_;
  std::vector<T> col_;
  std::vector<T> gcol_;
};

// ---------------------------------------------------------------------------
// Pooling

enum class PoolKind { average, max };

template <typename T>
class Pool2dOp final : public Op<T> {
 public:
  Pool2dOp(PoolKind kind, std::size_t window, std::size_t stride)
      : pool_(kind), window_(window), stride_(stride) {}

  std::string_view kind() const override { return pool_ == PoolKind::max ? "max_pool" : "avg_pool"; }

  Shape output_shape(std::span<const Shape> in) const override {
    detail::expect_args(in, 1, 1);
    detail::expect_rank(in[0], 4, "pool input");
    const Shape& x = in[0];
    if (x[2] < window_ || x[3] < window_) {
      fail(ErrorKind::config, "pool window ", window_, " exceeds spatial extent ", x[2], "x", x[3]);
    }
    return {x[0], x[1], (x[2] - window_) / stride_ + 1, (x[3] - window_) / stride_ + 1};
  }

  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const RunContext&) override {
    const auto& x = *in[0];
    const std::size_t planes = x.dim(0) * x.dim(1);
    const std::size_t H = x.dim(2), W = x.dim(3), OH = out.dim(2), OW = out.dim(3);
    if (pool_ == PoolKind::max) argmax_.resize(out.size());
    const T inv = T{1} / static_cast<T>(window_ * window_);
    for (std::size_t p = 0; p < planes; ++p) {
      const T* src = x.ptr() + p * H * W;
      for (std::size_t oh = 0; oh < OH; ++oh) {
        for (std::size_t ow = 0; ow < OW; ++ow) {
          const std::size_t o = (p * OH + oh) * OW + ow;
          if (pool_ == PoolKind::max) {
            std::size_t best = (oh * stride_) * W + ow * stride_;
            for (std::size_t i = 0; i < window_; ++i) {
              for (std::size_t j = 0; j < window_; ++j) {
                const std::size_t idx = (oh * stride_ + i) * W + ow * stride_ + j;
                if (src[idx] > src[best]) best = idx;
              }
            }
            argmax_[o] = p * H * W + best;
            out[o] = src[best];
          } else {
            T s{0};
            for (std::size_t i = 0; i < window_; ++i) {
              for (std::size_t j = 0; j < window_; ++j) s += src[(oh * stride_ + i) * W + ow * stride_ + j];
            }
            out[o] = s * inv;
          }
        }
      }
    }
  }

  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>& out, const Tensor<T>& gout,
                std::span<Tensor<T>* const> gin) override {
    if (!gin[0]) return;
    Tensor<T>& gx = *gin[0];
    if (pool_ == PoolKind::max) {
      for (std::size_t o = 0; o < gout.size(); ++o) gx[argmax_[o]] += gout[o];
      return;
    }
    const auto& x = *in[0];
    const std::size_t planes = x.dim(0) * x.dim(1);
    const std::size_t H = x.dim(2), W = x.dim(3), OH = out.dim(2), OW = out.dim(3);
    const T inv = T{1} / static_cast<T>(window_ * window_);
    for (std::size_t p = 0; p < planes; ++p) {
      T* dst = gx.ptr() + p * H * W;
      for (std::size_t oh = 0; oh < OH; ++oh) {
        for (std::size_t ow = 0; ow < OW; ++ow) {
          const T g = gout[(p * OH + oh) * OW + ow] * inv;
          for (std::size_t i = 0; i < window_; ++i) {
            for (std::size_t j = 0; j < window_; ++j) dst[(oh * stride_ + i) * W + ow * stride_ + j] += g;
          }
        }
      }
    }
  }

 private:
  std::uint64_t branch_signature(std::span<const Tensor<T>* const>,
                                 const Tensor<T>&) const override {
    std::uint64_t h = 0;
    if (pool_ == PoolKind::max) {
      for (std::size_t a : argmax_) h = hash_combine(h, a);
    }
    return h;
  }

  PoolKind pool_;
  std::size_t window_;
  std::size_t stride_;
  std::vector<std::size_t> argmax_;
};

// (N,C,H,W) -> (N,C)
template <typename T>
class GlobalAvgPoolOp final : public Op<T> {
 public:
  std::string_view kind() const override { return "global_avg_pool"; }
  Shape output_shape(std::span<const Shape> in) const override {
    detail::expect_args(in, 1, 1);
    detail::expect_rank(in[0], 4, "global pool input");
    return {in[0][0], in[0][1]};
  }
  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const RunContext&) override {
    const auto& x = *in[0];
    const std::size_t hw = x.dim(2) * x.dim(3);
    for (std::size_t p = 0; p < out.size(); ++p) {
      double s = 0.0;
      for (std::size_t i = 0; i < hw; ++i) s += x[p * hw + i];
      out[p] = static_cast<T>(s / static_cast<double>(hw));
    }
  }
  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, const Tensor<T>& gout,
                std::span<Tensor<T>* const> gin) override {
    if (!gin[0]) return;
    const std::size_t hw = in[0]->dim(2) * in[0]->dim(3);
    const T inv = T{1} / static_cast<T>(hw);
    for (std::size_t p = 0; p < gout.size(); ++p) {
      for (std::size_t i = 0; i < hw; ++i) (*gin[0])[p * hw + i] += gout[p] * inv;
    }
  }
};

// ---------------------------------------------------------------------------
// Normalization

inline constexpr double kNormEpsilon = 1e-5;

/// Standardizes contiguous channel groups of each sample, then applies a
/// per-channel affine. groups == C gives instance norm, groups == 1 layer norm.
/// Arguments: x, gamma (C), beta (C).
template <typename T>
class GroupStandardizeOp final : public Op<T> {
 public:
  GroupStandardizeOp(std::size_t groups, std::string_view name) : groups_(groups), name_(name) {}

  std::string_view kind() const override { return name_; }

  Shape output_shape(std::span<const Shape> in) const override {
    detail::expect_args(in, 3, 3);
    detail::expect_rank(in[0], 4, "normalization input");
    const std::size_t C = in[0][1];
    if (groups_ != 0 && C % groups_ != 0) {
      fail(ErrorKind::config, "group count ", groups_, " does not divide ", C, " channels");
    }
    if (in[1] != Shape{C} || in[2] != Shape{C}) fail(ErrorKind::shape, "affine parameters must be (", C, ")");
    return in[0];
  }

  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const RunContext&) override {
    const auto& x = *in[0];
    const auto& gamma = *in[1];
    const auto& beta = *in[2];
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    const std::size_t G = groups(C), cpg = C / G, len = cpg * HW;
    xhat_.resize(x.size());
    inv_std_.resize(N * G);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t g = 0; g < G; ++g) {
        const std::size_t base = (n * C + g * cpg) * HW;
        double mean = 0.0;
        for (std::size_t i = 0; i < len; ++i) mean += x[base + i];
        mean /= static_cast<double>(len);
        double var = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
          const double d = x[base + i] - mean;
          var += d * d;
        }
        var /= static_cast<double>(len);
        const double inv = 1.0 / std::sqrt(var + kNormEpsilon);
        inv_std_[n * G + g] = inv;
        for (std::size_t i = 0; i < len; ++i) {
          const std::size_t c = g * cpg + i / HW;
          const double xh = (x[base + i] - mean) * inv;
          xhat_[base + i] = xh;
          out[base + i] = static_cast<T>(xh * gamma[c] + beta[c]);
        }
      }
    }
  }

  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, const Tensor<T>& gout,
                std::span<Tensor<T>* const> gin) override {
    const auto& x = *in[0];
    const auto& gamma = *in[1];
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    const std::size_t G = groups(C), cpg = C / G, len = cpg * HW;
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t base = (n * C + c) * HW;
        double sg = 0.0, sgx = 0.0;
        for (std::size_t i = 0; i < HW; ++i) {
          sg += gout[base + i];
          sgx += gout[base + i] * xhat_[base + i];
        }
        if (gin[1]) (*gin[1])[c] += static_cast<T>(sgx);
        if (gin[2]) (*gin[2])[c] += static_cast<T>(sg);
      }
      if (!gin[0]) continue;
      for (std::size_t g = 0; g < G; ++g) {
        const std::size_t base = (n * C + g * cpg) * HW;
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
          const double gh = gout[base + i] * static_cast<double>(gamma[g * cpg + i / HW]);
          m1 += gh;
          m2 += gh * xhat_[base + i];
        }
        m1 /= static_cast<double>(len);
        m2 /= static_cast<double>(len);
        const double inv = inv_std_[n * G + g];
        for (std::size_t i = 0; i < len; ++i) {
          const double gh = gout[base + i] * static_cast<double>(gamma[g * cpg + i / HW]);
          (*gin[0])[base + i] += static_cast<T>(inv * (gh - m1 - xhat_[base + i] * m2));
        }
      }
    }
  }

 private:
  std::size_t groups(std::size_t C) const { return groups_ == 0 ? C : groups_; }

  std::size_t groups_;  // 0 means one group per channel
  std::string_view name_;
  std::vector<double> xhat_;
  std::vector<double> inv_std_;
};

/// Per-channel standardization over (N,H,W). Training mode uses batch
/// statistics and updates the running estimates; evaluation uses the running
/// estimates. Arguments: x, gamma (C), beta (C).
template <typename T>
class BatchNormOp final : public Op<T> {
 public:
  BatchNormOp(Tensor<T>* running_mean, Tensor<T>* running_var, double momentum = 0.1)
      : running_mean_(running_mean), running_var_(running_var), momentum_(momentum) {}

  std::string_view kind() const override { return "batch_norm"; }

  Shape output_shape(std::span<const Shape> in) const override {
    detail::expect_args(in, 3, 3);
    detail::expect_rank(in[0], 4, "batch norm input");
    const std::size_t C = in[0][1];
    if (in[1] != Shape{C} || in[2] != Shape{C}) fail(ErrorKind::shape, "affine parameters must be (", C, ")");
    if (running_mean_->shape() != Shape{C} || running_var_->shape() != Shape{C}) {
      fail(ErrorKind::shape, "running statistics must be (", C, ")");
    }
    return in[0];
  }

  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const RunContext& ctx) override {
    const auto& x = *in[0];
    const auto& gamma = *in[1];
    const auto& beta = *in[2];
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    training_ = ctx.training;
    inv_std_.resize(C);
    xhat_.resize(x.size());
    for (std::size_t c = 0; c < C; ++c) {
      double mean, var;
      if (training_) {
        const double count = static_cast<double>(N * HW);
        mean = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t i = 0; i < HW; ++i) mean += x[(n * C + c) * HW + i];
        }
        mean /= count;
        var = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t i = 0; i < HW; ++i) {
            const double d = x[(n * C + c) * HW + i] - mean;
            var += d * d;
          }
        }
        const double unbiased = count > 1 ? var / (count - 1) : 0.0;
        var /= count;
        (*running_mean_)[c] = static_cast<T>((1 - momentum_) * (*running_mean_)[c] + momentum_ * mean);
        (*running_var_)[c] = static_cast<T>((1 - momentum_) * (*running_var_)[c] + momentum_ * unbiased);
      } else {
        mean = (*running_mean_)[c];
        var = (*running_var_)[c];
      }
      const double inv = 1.0 / std::sqrt(var + kNormEpsilon);
      inv_std_[c] = inv;
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t i = 0; i < HW; ++i) {
          const std::size_t k = (n * C + c) * HW + i;
          xhat_[k] = (x[k] - mean) * inv;
          out[k] = static_cast<T>(xhat_[k] * gamma[c] + beta[c]);
        }
      }
    }
  }

  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, const Tensor<T>& gout,
                std::span<Tensor<T>* const> gin) override {
    const auto& x = *in[0];
    const auto& gamma = *in[1];
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    const double count = static_cast<double>(N * HW);
    for (std::size_t c = 0; c < C; ++c) {
      double sg = 0.0, sgx = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t i = 0; i < HW; ++i) {
          const std::size_t k = (n * C + c) * HW + i;
          sg += gout[k];
          sgx += gout[k] * xhat_[k];
        }
      }
      if (gin[1]) (*gin[1])[c] += static_cast<T>(sgx);
      if (gin[2]) (*gin[2])[c] += static_cast<T>(sg);
      if (!gin[0]) continue;
      const double gm = gamma[c];
      const double inv = inv_std_[c];
      for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t i = 0; i < HW; ++i) {
          const std::size_t k = (n * C + c) * HW + i;
          double gx = gout[k] * gm * inv;
          if (training_) gx -= gm * inv * (sg + xhat_[k] * sgx) / count;
          (*gin[0])[k] += static_cast<T>(gx);
        }
      }
    }
  }

 private:
  Tensor<T>* running_mean_;
  Tensor<T>* running_var_;
  double momentum_;
  bool training_ = false;
  std::vector<double> xhat_;
  std::vector<double> inv_std_;
};

/// Divisive normalization across `size` neighbouring channels:
/// y_c = x_c / (k + alpha/size * sum x_{c'}^2)^beta.
template <typename T>
class LocalResponseNormOp final : public Op<T> {
 public:
  LocalResponseNormOp(std::size_t size = 5, double alpha = 1e-4, double beta = 0.75, double k = 2.0)
      : size_(size), alpha_(alpha), beta_(beta), k_(k) {}

  std::string_view kind() const override { return "local_response_norm"; }

  Shape output_shape(std::span<const Shape> in) const override {
    detail::expect_args(in, 1, 1);
    detail::expect_rank(in[0], 4, "local response norm input");
    return in[0];
  }

  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const RunContext&) override {
    const auto& x = *in[0];
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    scale_.resize(x.size());
    const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(size_ / 2);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t c = 0; c < C; ++c) {
        const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(c) - half);
        const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(C - 1, static_cast<std::ptrdiff_t>(c) + half);
        for (std::size_t i = 0; i < HW; ++i) {
          double s = 0.0;
          for (std::ptrdiff_t cc = lo; cc <= hi; ++cc) {
            const double v = x[(n * C + cc) * HW + i];
            s += v * v;
          }
          const std::size_t k = (n * C + c) * HW + i;
          scale_[k] = k_ + alpha_ / static_cast<double>(size_) * s;
          out[k] = static_cast<T>(x[k] * std::pow(scale_[k], -beta_));
        }
      }
    }
  }

  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, const Tensor<T>& gout,
                std::span<Tensor<T>* const> gin) override {
    if (!gin[0]) return;
    const auto& x = *in[0];
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(size_ / 2);
    const double coef = -2.0 * beta_ * alpha_ / static_cast<double>(size_);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t i = 0; i < HW; ++i) {
        for (std::size_t j = 0; j < C; ++j) {
          const std::size_t kj = (n * C + j) * HW + i;
          double g = gout[kj] * std::pow(scale_[kj], -beta_);
          // Every output channel whose window contains j contributes.
          const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(j) - half);
          const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(C - 1, static_cast<std::ptrdiff_t>(j) + half);
          double acc = 0.0;
          for (std::ptrdiff_t c = lo; c <= hi; ++c) {
            const std::size_t kc = (n * C + c) * HW + i;
            acc += gout[kc] * x[kc] * std::pow(scale_[kc], -beta_ - 1.0);
          }
          g += coef * x[kj] * acc;
          (*gin[0])[kj] += static_cast<T>(g);
        }
      }
    }
  }

 private:
  std::size_t size_;
  double alpha_, beta_, k_;
  std::vector<double> scale_;
};

// ---------------------------------------------------------------------------
// Dropout and loss

/// Inverted dropout. The keep/drop decision for unit i at step s is a pure
/// function of (seed, s, i).
template <typename T>
class DropoutOp final : public Op<T> {
 public:
  DropoutOp(double rate, std::uint64_t seed) : rate_(rate), seed_(seed) {
    if (!(rate >= 0.0 && rate < 1.0)) fail(ErrorKind::argument, "dropout rate must be in [0,1), got ", rate);
  }

  std::string_view kind() const override { return "dropout"; }

  Shape output_shape(std::span<const Shape> in) const override {
    detail::expect_args(in, 1, 1);
    return in[0];
  }

  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const RunContext& ctx) override {
    const auto& x = *in[0];
    active_ = ctx.training && rate_ > 0.0;
    if (!active_) {
      std::copy(x.data().begin(), x.data().end(), out.data().begin());
      return;
    }
    mask_.resize(x.size());
    const std::uint64_t key = hash_combine(seed_, ctx.step);
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate_));
    for (std::size_t i = 0; i < x.size(); ++i) {
      mask_[i] = counter_uniform(key, i) < rate_ ? T{0} : keep_scale;
      out[i] = x[i] * mask_[i];
    }
  }

  void backward(std::span<const Tensor<T>* const>, const Tensor<T>&, const Tensor<T>& gout,
                std::span<Tensor<T>* const> gin) override {
    if (!gin[0]) return;
    if (!active_) {
      detail::add_into(gin[0], gout.data());
      return;
    }
    for (std::size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i] * mask_[i];
  }

 private:
  double rate_;
  std::uint64_t seed_;
  bool active_ = false;
  std::vector<T> mask_;
};

/// Mean softmax cross-entropy. Arguments: logits (N,M), labels (N) holding
/// class indices as values. Output is a scalar.
template <typename T>
class SoftmaxCrossEntropyOp final : public Op<T> {
 public:
  std::string_view kind() const override { return "softmax_cross_entropy"; }

  Shape output_shape(std::span<const Shape> in) const override {
    detail::expect_args(in, 2, 2);
    detail::expect_rank(in[0], 2, "logits");
    if (in[1] != Shape{in[0][0]}) fail(ErrorKind::shape, "labels must be (", in[0][0], ")");
    return {};
  }

  void forward(std::span<const Tensor<T>* const> in, Tensor<T>& out, const RunContext&) override {
    const auto& z = *in[0];
    const auto& y = *in[1];
    const std::size_t N = z.dim(0), M = z.dim(1);
    prob_.resize(z.size());
    double loss = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t label = label_at(y, n, M);
      double zmax = -std::numeric_limits<double>::infinity();
      for (std::size_t m = 0; m < M; ++m) zmax = std::max<double>(zmax, z[n * M + m]);
      double s = 0.0;
      for (std::size_t m = 0; m < M; ++m) s += std::exp(z[n * M + m] - zmax);
      const double lse = zmax + std::log(s);
      for (std::size_t m = 0; m < M; ++m) prob_[n * M + m] = std::exp(z[n * M + m] - lse);
      loss += lse - z[n * M + label];
    }
    out[0] = static_cast<T>(loss / static_cast<double>(N));
  }

  void backward(std::span<const Tensor<T>* const> in, const Tensor<T>&, const Tensor<T>& gout,
                std::span<Tensor<T>* const> gin) override {
    if (!gin[0]) return;
    const auto& z = *in[0];
    const auto& y = *in[1];
    const std::size_t N = z.dim(0), M = z.dim(1);
    const double scale = static_cast<double>(gout[0]) / static_cast<double>(N);
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t label = label_at(y, n, M);
      for (std::size_t m = 0; m < M; ++m) {
        const double target = m == label ? 1.0 : 0.0;
        (*gin[0])[n * M + m] += static_cast<T>(scale * (prob_[n * M + m] - target));
      }
    }
  }

 private:
  static std::size_t label_at(const Tensor<T>& y, std::size_t n, std::size_t M) {
    const double v = y[n];
    if (!(v >= 0.0) || v >= static_cast<double>(M) || v != std::floor(v)) {
      fail(ErrorKind::argument, "label ", v, " at row ", n, " is not a class index");
    }
    return static_cast<std::size_t>(v);
  }

  std::vector<double> prob_;
};

// ---------------------------------------------------------------------------
// Graph-building helpers

template <typename T>
NodeId add(Graph<T>& g, NodeId a, NodeId b, std::string name = {}) {
  return g.apply(std::make_unique<AddOp<T>>(), {a, b}, std::move(name));
}
template <typename T>
NodeId mul(Graph<T>& g, NodeId a, NodeId b, std::string name = {}) {
  return g.apply(std::make_unique<MulOp<T>>(), {a, b}, std::move(name));
}
template <typename T>
NodeId sum(Graph<T>& g, NodeId a, std::string name = {}) {
  return g.apply(std::make_unique<SumOp<T>>(), {a}, std::move(name));
}
template <typename T>
NodeId relu(Graph<T>& g, NodeId a, std::string name = {}) {
  return g.apply(std::make_unique<ReluOp<T>>(), {a}, std::move(name));
}
template <typename T>
NodeId flatten(Graph<T>& g, NodeId a, std::string name = {}) {
  return g.apply(std::make_unique<FlattenOp<T>>(), {a}, std::move(name));
}
template <typename T>
NodeId matmul(Graph<T>& g, NodeId a, NodeId b, std::string name = {}) {
  return g.apply(std::make_unique<MatMulOp<T>>(), {a, b}, std::move(name));
}
template <typename T>
NodeId linear(Graph<T>& g, NodeId x, NodeId w, NodeId b, std::string name = {}) {
  return g.apply(std::make_unique<LinearOp<T>>(), {x, w, b}, std::move(name));
}
template <typename T>
NodeId conv2d(Graph<T>& g, NodeId x, NodeId w, std::optional<NodeId> b, std::size_t stride,
              std::size_t pad, std::string name = {}) {
  std::vector<NodeId> args{x, w};
  if (b) args.push_back(*b);
  return g.apply(std::make_unique<Conv2dOp<T>>(stride, pad), std::move(args), std::move(name));
}
template <typename T>
NodeId pool2d(Graph<T>& g, NodeId x, PoolKind kind, std::size_t window = 3, std::size_t stride = 2,
              std::string name = {}) {
  return g.apply(std::make_unique<Pool2dOp<T>>(kind, window, stride), {x}, std::move(name));
}
template <typename T>
NodeId global_avg_pool(Graph<T>& g, NodeId x, std::string name = {}) {
  return g.apply(std::make_unique<GlobalAvgPoolOp<T>>(), {x}, std::move(name));
}
template <typename T>
NodeId dropout(Graph<T>& g, NodeId x, double rate, std::uint64_t seed, std::string name = {}) {
  return g.apply(std::make_unique<DropoutOp<T>>(rate, seed), {x}, std::move(name));
}
template <typename T>
NodeId softmax_cross_entropy(Graph<T>& g, NodeId logits, NodeId labels, std::string name = {}) {
  return g.apply(std::make_unique<SoftmaxCrossEntropyOp<T>>(), {logits, labels}, std::move(name));
}

}  // namespace mp::ops
