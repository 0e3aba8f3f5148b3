#pragma once

#include <vector>

#include "edgexc/tensor.hpp"

namespace edgexc {

enum class Mode { train, eval };

// ---------------------------------------------------------------------------
// Dense convolution, NCHW. Weight layout [Cout, Cin, kh, kw]. Implemented as
// im2col + GEMM; the naive loop equivalent lives in the test oracles.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                 const ConvGeometry& g);

template <typename T>
struct ConvGrads {
    Tensor<T> dx, dw, dbias;
};

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const ConvGeometry& g,
                             const Tensor<T>& dy, bool with_bias = false);

// Depthwise convolution with depth multiplier 1: weight [C, 1, kh, kw],
// channel c of the output depends only on channel c of the input.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, const ConvGeometry& g);

template <typename T>
struct DepthwiseGrads {
    Tensor<T> dx, dw;
};

template <typename T>
DepthwiseGrads<T> depthwise_conv2d_backward(const Tensor<T>& x, const Tensor<T>& w,
                                            const ConvGeometry& g, const Tensor<T>& dy);

// ---------------------------------------------------------------------------
// Batch normalization over (N, H, W) per channel.
// train: normalize by batch statistics (biased variance), update running
//        stats as new = (1 - momentum) * old + momentum * batch.
// eval:  normalize by the running statistics; never mutates them.
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNormCache {
    Tensor<T> mean;    // [C]
    Tensor<T> invstd;  // [C], 1/sqrt(var + eps)
};

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode, T momentum,
                      T epsilon, BatchNormCache<T>* cache = nullptr);

template <typename T>
struct BatchNormGrads {
    Tensor<T> dx, dgamma, dbeta;
};

template <typename T>
BatchNormGrads<T> batchnorm2d_backward(const Tensor<T>& x, const Tensor<T>& gamma,
                                       const BatchNormCache<T>& cache, const Tensor<T>& dy);

// ---------------------------------------------------------------------------
// Pointwise / pooling / classifier ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& x);

// gradient convention at exactly 0: zero (mask is x > 0)
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy);

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, const ConvGeometry& g);

// Routes each dy element to its window's argmax; ties break on the first
// index in row-major window order. Padding cells are never winners.
template <typename T>
Tensor<T> maxpool2d_backward(const Tensor<T>& x, const ConvGeometry& g, const Tensor<T>& dy);

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x);  // [N,C,H,W] -> [N,C]

template <typename T>
Tensor<T> global_avg_pool_backward(const std::vector<int64_t>& x_shape, const Tensor<T>& dy);

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias);

template <typename T>
struct LinearGrads {
    Tensor<T> dx, dw, dbias;
};

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy);

// Row-wise, max-subtracted softmax. Exposed for tests and evaluation.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

// Mean negative log-likelihood over the batch plus its logits gradient
// (softmax - onehot) / N, fused for stability.
template <typename T>
struct SoftmaxCrossEntropy {
    T loss;
    Tensor<T> dlogits;
};

template <typename T>
SoftmaxCrossEntropy<T> softmax_cross_entropy(const Tensor<T>& logits,
                                             const std::vector<int>& labels);

}  // namespace edgexc
