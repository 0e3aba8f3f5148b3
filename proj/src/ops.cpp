#include "edgexc/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>

#include "edgexc/threading.hpp"

namespace edgexc {

namespace {

void gemm(bool ta, bool tb, int64_t M, int64_t N, int64_t K, const float* A, int64_t lda,
          const float* B, int64_t ldb, float* C, int64_t ldc) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                static_cast<int>(M), static_cast<int>(N), static_cast<int>(K), 1.0f, A,
                static_cast<int>(lda), B, static_cast<int>(ldb), 0.0f, C, static_cast<int>(ldc));
}

void gemm(bool ta, bool tb, int64_t M, int64_t N, int64_t K, const double* A, int64_t lda,
          const double* B, int64_t ldb, double* C, int64_t ldc) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                static_cast<int>(M), static_cast<int>(N), static_cast<int>(K), 1.0, A,
                static_cast<int>(lda), B, static_cast<int>(ldb), 0.0, C, static_cast<int>(ldc));
}

template <typename T>
void require_rank(const Tensor<T>& t, int rank, const char* what) {
    if (t.rank() != rank)
        throw ShapeError(std::string(what) + " must be rank " + std::to_string(rank) + ", got " +
                         shape_str(t.shape()));
}

// Expanded patch matrix: row r = (c*kh + i)*kw + j, column ((n*OH + oh)*OW + ow).
// Out-of-bounds input positions contribute zeros.
template <typename T>
void im2col(const Tensor<T>& x, const ConvGeometry& g, int64_t OH, int64_t OW, T* col) {
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t kh = g.kernel_h, kw = g.kernel_w, s = g.stride, p = g.padding;
    const int64_t cols = N * OH * OW;
    const T* xd = x.data();

    parallel_for(C * kh * kw, [&](int64_t lo, int64_t hi) {
        for (int64_t r = lo; r < hi; ++r) {
            const int64_t c = r / (kh * kw);
            const int64_t i = (r / kw) % kh;
            const int64_t j = r % kw;
            T* row = col + r * cols;
            for (int64_t n = 0; n < N; ++n) {
                const T* plane = xd + (n * C + c) * H * W;
                for (int64_t oh = 0; oh < OH; ++oh) {
                    const int64_t ih = oh * s - p + i;
                    T* out = row + (n * OH + oh) * OW;
                    if (ih < 0 || ih >= H) {
                        std::fill(out, out + OW, T(0));
                        continue;
                    }
                    const T* src = plane + ih * W;
                    for (int64_t ow = 0; ow < OW; ++ow) {
                        const int64_t iw = ow * s - p + j;
                        out[ow] = (iw >= 0 && iw < W) ? src[iw] : T(0);
                    }
                }
            }
        }
    });
}

// Scatter-add of a patch matrix back into image space. Parallel over channels:
// all rows of one channel are handled by the same worker, so the overlapping
// adds within a channel stay single-threaded and deterministic.
template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, int64_t OH, int64_t OW, Tensor<T>& dx) {
    const int64_t N = dx.dim(0), C = dx.dim(1), H = dx.dim(2), W = dx.dim(3);
    const int64_t kh = g.kernel_h, kw = g.kernel_w, s = g.stride, p = g.padding;
    const int64_t cols = N * OH * OW;
    T* xd = dx.data();

    parallel_for(C, [&](int64_t clo, int64_t chi) {
        for (int64_t c = clo; c < chi; ++c) {
            for (int64_t i = 0; i < kh; ++i) {
                for (int64_t j = 0; j < kw; ++j) {
                    const T* row = col + ((c * kh + i) * kw + j) * cols;
                    for (int64_t n = 0; n < N; ++n) {
                        T* plane = xd + (n * C + c) * H * W;
                        for (int64_t oh = 0; oh < OH; ++oh) {
                            const int64_t ih = oh * s - p + i;
                            if (ih < 0 || ih >= H) continue;
                            const T* src = row + (n * OH + oh) * OW;
                            T* dst = plane + ih * W;
                            for (int64_t ow = 0; ow < OW; ++ow) {
                                const int64_t iw = ow * s - p + j;
                                if (iw >= 0 && iw < W) dst[iw] += src[ow];
                            }
                        }
                    }
                }
            }
        }
    });
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                 const ConvGeometry& g) {
    require_rank(x, 4, "conv2d input");
    require_rank(w, 4, "conv2d weight");
    if (w.dim(2) != g.kernel_h || w.dim(3) != g.kernel_w)
        throw ShapeError("conv2d weight " + shape_str(w.shape()) + " does not match geometry kernel " +
                         std::to_string(g.kernel_h) + "x" + std::to_string(g.kernel_w));
    if (x.dim(1) != w.dim(1))
        throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(w.shape()));
    const int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t Cout = w.dim(0);
    const int64_t OH = g.out_h(H), OW = g.out_w(W);
    const int64_t K = Cin * g.kernel_h * g.kernel_w;
    const int64_t cols = N * OH * OW;
    if (bias && (bias->rank() != 1 || bias->dim(0) != Cout))
        throw ShapeError("conv2d bias must be [" + std::to_string(Cout) + "], got " +
                         shape_str(bias->shape()));

    std::vector<T> col(static_cast<size_t>(K * cols));
    im2col(x, g, OH, OW, col.data());

    Tensor<T> y({N, Cout, OH, OW});
    if (N == 1) {
        // [Cout, OH*OW] is already the output layout for a single image
        gemm(false, false, Cout, cols, K, w.data(), K, col.data(), cols, y.data(), cols);
    } else {
        std::vector<T> y0(static_cast<size_t>(Cout * cols));
        gemm(false, false, Cout, cols, K, w.data(), K, col.data(), cols, y0.data(), cols);
        T* yd = y.data();
        parallel_for(N, [&](int64_t nlo, int64_t nhi) {
            for (int64_t n = nlo; n < nhi; ++n)
                for (int64_t co = 0; co < Cout; ++co)
                    std::memcpy(yd + (n * Cout + co) * OH * OW, y0.data() + (co * N + n) * OH * OW,
                                sizeof(T) * static_cast<size_t>(OH * OW));
        });
    }
    if (bias) {
        T* yd = y.data();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t co = 0; co < Cout; ++co) {
                const T b = (*bias)[co];
                T* p = yd + (n * Cout + co) * OH * OW;
                for (int64_t i = 0; i < OH * OW; ++i) p[i] += b;
            }
    }
    return y;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const ConvGeometry& g,
                             const Tensor<T>& dy, bool with_bias) {
    require_rank(dy, 4, "conv2d cotangent");
    const int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t Cout = w.dim(0);
    const int64_t OH = g.out_h(H), OW = g.out_w(W);
    if (dy.dim(0) != N || dy.dim(1) != Cout || dy.dim(2) != OH || dy.dim(3) != OW)
        throw ShapeError("conv2d_backward cotangent " + shape_str(dy.shape()) + " does not match output [" +
                         std::to_string(N) + "," + std::to_string(Cout) + "," + std::to_string(OH) + "," +
                         std::to_string(OW) + "]");
    const int64_t K = Cin * g.kernel_h * g.kernel_w;
    const int64_t cols = N * OH * OW;

    // gather dy into [Cout, cols]
    std::vector<T> dy0_store;
    const T* dy0 = dy.data();
    if (N != 1) {
        dy0_store.resize(static_cast<size_t>(Cout * cols));
        const T* dyd = dy.data();
        parallel_for(N, [&](int64_t nlo, int64_t nhi) {
            for (int64_t n = nlo; n < nhi; ++n)
                for (int64_t co = 0; co < Cout; ++co)
                    std::memcpy(dy0_store.data() + (co * N + n) * OH * OW, dyd + (n * Cout + co) * OH * OW,
                                sizeof(T) * static_cast<size_t>(OH * OW));
        });
        dy0 = dy0_store.data();
    }

    std::vector<T> col(static_cast<size_t>(K * cols));
    im2col(x, g, OH, OW, col.data());

    ConvGrads<T> out;
    out.dw = Tensor<T>(w.shape());
    gemm(false, true, Cout, K, cols, dy0, cols, col.data(), cols, out.dw.data(), K);

    std::vector<T> dcol(static_cast<size_t>(K * cols));
    gemm(true, false, K, cols, Cout, w.data(), K, dy0, cols, dcol.data(), cols);
    out.dx = Tensor<T>(x.shape());
    col2im_add(dcol.data(), g, OH, OW, out.dx);

    if (with_bias) {
        out.dbias = Tensor<T>({Cout});
        for (int64_t co = 0; co < Cout; ++co) {
            double acc = 0.0;
            const T* p = dy0 + co * cols;
            for (int64_t i = 0; i < cols; ++i) acc += static_cast<double>(p[i]);
            out.dbias[co] = static_cast<T>(acc);
        }
    }
    return out;
}

template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& w, const ConvGeometry& g) {
    require_rank(x, 4, "depthwise input");
    require_rank(w, 4, "depthwise weight");
    if (w.dim(1) != 1)
        throw ConfigError("depthwise depth multiplier must be 1, got weight " + shape_str(w.shape()));
    if (w.dim(0) != x.dim(1))
        throw ShapeError("depthwise channel mismatch: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(w.shape()));
    if (w.dim(2) != g.kernel_h || w.dim(3) != g.kernel_w)
        throw ShapeError("depthwise weight " + shape_str(w.shape()) + " does not match geometry kernel");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t kh = g.kernel_h, kw = g.kernel_w, s = g.stride, p = g.padding;
    const int64_t OH = g.out_h(H), OW = g.out_w(W);

    Tensor<T> y({N, C, OH, OW});
    const T* xd = x.data();
    const T* wd = w.data();
    T* yd = y.data();
    parallel_for(N * C, [&](int64_t lo, int64_t hi) {
        for (int64_t nc = lo; nc < hi; ++nc) {
            const int64_t c = nc % C;
            const T* plane = xd + nc * H * W;
            const T* ker = wd + c * kh * kw;
            T* out = yd + nc * OH * OW;
            for (int64_t oh = 0; oh < OH; ++oh) {
                for (int64_t ow = 0; ow < OW; ++ow) {
                    T acc = 0;
                    for (int64_t i = 0; i < kh; ++i) {
                        const int64_t ih = oh * s - p + i;
                        if (ih < 0 || ih >= H) continue;
                        for (int64_t j = 0; j < kw; ++j) {
                            const int64_t iw = ow * s - p + j;
                            if (iw < 0 || iw >= W) continue;
                            acc += plane[ih * W + iw] * ker[i * kw + j];
                        }
                    }
                    out[oh * OW + ow] = acc;
                }
            }
        }
    });
    return y;
}

template <typename T>
DepthwiseGrads<T> depthwise_conv2d_backward(const Tensor<T>& x, const Tensor<T>& w,
                                            const ConvGeometry& g, const Tensor<T>& dy) {
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t kh = g.kernel_h, kw = g.kernel_w, s = g.stride, p = g.padding;
    const int64_t OH = g.out_h(H), OW = g.out_w(W);
    if (dy.dim(0) != N || dy.dim(1) != C || dy.dim(2) != OH || dy.dim(3) != OW)
        throw ShapeError("depthwise_backward cotangent " + shape_str(dy.shape()) + " mismatch");

    DepthwiseGrads<T> out;
    out.dx = Tensor<T>(x.shape());
    out.dw = Tensor<T>(w.shape());
    const T* xd = x.data();
    const T* wd = w.data();
    const T* dyd = dy.data();
    T* dxd = out.dx.data();
    T* dwd = out.dw.data();

    // parallel over channels so each worker owns its dw[c] accumulator
    parallel_for(C, [&](int64_t clo, int64_t chi) {
        for (int64_t c = clo; c < chi; ++c) {
            const T* ker = wd + c * kh * kw;
            T* dker = dwd + c * kh * kw;
            for (int64_t n = 0; n < N; ++n) {
                const T* plane = xd + (n * C + c) * H * W;
                const T* dout = dyd + (n * C + c) * OH * OW;
                T* dplane = dxd + (n * C + c) * H * W;
                for (int64_t oh = 0; oh < OH; ++oh) {
                    for (int64_t ow = 0; ow < OW; ++ow) {
                        const T gY = dout[oh * OW + ow];
                        if (gY == T(0)) continue;
                        for (int64_t i = 0; i < kh; ++i) {
                            const int64_t ih = oh * s - p + i;
                            if (ih < 0 || ih >= H) continue;
                            for (int64_t j = 0; j < kw; ++j) {
                                const int64_t iw = ow * s - p + j;
                                if (iw < 0 || iw >= W) continue;
                                dplane[ih * W + iw] += ker[i * kw + j] * gY;
                                dker[i * kw + j] += plane[ih * W + iw] * gY;
                            }
                        }
                    }
                }
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, Mode mode, T momentum,
                      T epsilon, BatchNormCache<T>* cache) {
    require_rank(x, 4, "batchnorm input");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    for (const Tensor<T>* t : {&gamma, &beta, &running_mean, &running_var})
        if (t->rank() != 1 || t->dim(0) != C)
            throw ShapeError("batchnorm per-channel tensors must be [" + std::to_string(C) + "], got " +
                             shape_str(t->shape()));

    const int64_t m = N * H * W;
    Tensor<T> y(x.shape());
    const T* xd = x.data();
    T* yd = y.data();
    const int64_t HW = H * W;

    if (mode == Mode::train) {
        if (m < 2)
            throw NumericError("batchnorm train mode needs N*H*W >= 2 per channel (degenerate variance), got " +
                               std::to_string(m));
        Tensor<T> mean({C}), invstd({C});
        parallel_for(C, [&](int64_t clo, int64_t chi) {
            for (int64_t c = clo; c < chi; ++c) {
                double sum = 0.0;
                for (int64_t n = 0; n < N; ++n) {
                    const T* p = xd + (n * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) sum += static_cast<double>(p[i]);
                }
                const double mu = sum / static_cast<double>(m);
                double ss = 0.0;
                for (int64_t n = 0; n < N; ++n) {
                    const T* p = xd + (n * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) {
                        const double d = static_cast<double>(p[i]) - mu;
                        ss += d * d;
                    }
                }
                const double var = ss / static_cast<double>(m);
                const double is = 1.0 / std::sqrt(var + static_cast<double>(epsilon));
                mean[c] = static_cast<T>(mu);
                invstd[c] = static_cast<T>(is);
                const T gc = gamma[c], bc = beta[c], mu_t = mean[c], is_t = invstd[c];
                for (int64_t n = 0; n < N; ++n) {
                    const T* p = xd + (n * C + c) * HW;
                    T* q = yd + (n * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) q[i] = gc * (p[i] - mu_t) * is_t + bc;
                }
                running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * static_cast<T>(mu);
                running_var[c] = (T(1) - momentum) * running_var[c] + momentum * static_cast<T>(var);
            }
        });
        if (cache) {
            cache->mean = std::move(mean);
            cache->invstd = std::move(invstd);
        }
    } else {
        parallel_for(C, [&](int64_t clo, int64_t chi) {
            for (int64_t c = clo; c < chi; ++c) {
                const T is = T(1) / std::sqrt(running_var[c] + epsilon);
                const T gc = gamma[c], bc = beta[c], mu = running_mean[c];
                for (int64_t n = 0; n < N; ++n) {
                    const T* p = xd + (n * C + c) * HW;
                    T* q = yd + (n * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) q[i] = gc * (p[i] - mu) * is + bc;
                }
            }
        });
    }
    return y;
}

template <typename T>
BatchNormGrads<T> batchnorm2d_backward(const Tensor<T>& x, const Tensor<T>& gamma,
                                       const BatchNormCache<T>& cache, const Tensor<T>& dy) {
    if (!x.same_shape(dy))
        throw ShapeError("batchnorm_backward cotangent " + shape_str(dy.shape()) + " vs input " +
                         shape_str(x.shape()));
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t HW = H * W;
    const int64_t m = N * HW;

    BatchNormGrads<T> out;
    out.dx = Tensor<T>(x.shape());
    out.dgamma = Tensor<T>({C});
    out.dbeta = Tensor<T>({C});
    const T* xd = x.data();
    const T* dyd = dy.data();
    T* dxd = out.dx.data();

    parallel_for(C, [&](int64_t clo, int64_t chi) {
        for (int64_t c = clo; c < chi; ++c) {
            const T mu = cache.mean[c], is = cache.invstd[c];
            double s1 = 0.0, s2 = 0.0;  // sum dy, sum dy*xhat
            for (int64_t n = 0; n < N; ++n) {
                const T* px = xd + (n * C + c) * HW;
                const T* pd = dyd + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) {
                    const double xh = static_cast<double>((px[i] - mu) * is);
                    s1 += static_cast<double>(pd[i]);
                    s2 += static_cast<double>(pd[i]) * xh;
                }
            }
            out.dbeta[c] = static_cast<T>(s1);
            out.dgamma[c] = static_cast<T>(s2);
            const double scale = static_cast<double>(gamma[c]) * static_cast<double>(is) / static_cast<double>(m);
            for (int64_t n = 0; n < N; ++n) {
                const T* px = xd + (n * C + c) * HW;
                const T* pd = dyd + (n * C + c) * HW;
                T* pq = dxd + (n * C + c) * HW;
                for (int64_t i = 0; i < HW; ++i) {
                    const double xh = static_cast<double>((px[i] - mu) * is);
                    pq[i] = static_cast<T>(scale * (static_cast<double>(m) * pd[i] - s1 - xh * s2));
                }
            }
        }
    });
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    Tensor<T> y(x.shape());
    const T* p = x.data();
    T* q = y.data();
    const int64_t n = x.size();
    for (int64_t i = 0; i < n; ++i) q[i] = p[i] > T(0) ? p[i] : T(0);
    return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
    if (!x.same_shape(dy))
        throw ShapeError("relu_backward shape mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(dy.shape()));
    Tensor<T> dx(x.shape());
    const T* p = x.data();
    const T* d = dy.data();
    T* q = dx.data();
    const int64_t n = x.size();
    for (int64_t i = 0; i < n; ++i) q[i] = p[i] > T(0) ? d[i] : T(0);
    return dx;
}

template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, const ConvGeometry& g) {
    require_rank(x, 4, "maxpool input");
    if (g.padding >= g.kernel_h || g.padding >= g.kernel_w)
        throw GeometryError("maxpool padding must be smaller than the kernel");
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t OH = g.out_h(H), OW = g.out_w(W);
    const int64_t kh = g.kernel_h, kw = g.kernel_w, s = g.stride, p = g.padding;

    Tensor<T> y({N, C, OH, OW});
    const T* xd = x.data();
    T* yd = y.data();
    parallel_for(N * C, [&](int64_t lo, int64_t hi) {
        for (int64_t nc = lo; nc < hi; ++nc) {
            const T* plane = xd + nc * H * W;
            T* out = yd + nc * OH * OW;
            for (int64_t oh = 0; oh < OH; ++oh) {
                for (int64_t ow = 0; ow < OW; ++ow) {
                    T best = T(0);
                    bool first = true;
                    for (int64_t i = 0; i < kh; ++i) {
                        const int64_t ih = oh * s - p + i;
                        if (ih < 0 || ih >= H) continue;
                        for (int64_t j = 0; j < kw; ++j) {
                            const int64_t iw = ow * s - p + j;
                            if (iw < 0 || iw >= W) continue;
                            const T v = plane[ih * W + iw];
                            if (first || v > best) {
                                best = v;
                                first = false;
                            }
                        }
                    }
                    out[oh * OW + ow] = best;
                }
            }
        }
    });
    return y;
}

template <typename T>
Tensor<T> maxpool2d_backward(const Tensor<T>& x, const ConvGeometry& g, const Tensor<T>& dy) {
    const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int64_t OH = g.out_h(H), OW = g.out_w(W);
    if (dy.dim(0) != N || dy.dim(1) != C || dy.dim(2) != OH || dy.dim(3) != OW)
        throw ShapeError("maxpool_backward cotangent " + shape_str(dy.shape()) + " mismatch");
    const int64_t kh = g.kernel_h, kw = g.kernel_w, s = g.stride, p = g.padding;

    Tensor<T> dx(x.shape());
    const T* xd = x.data();
    const T* dyd = dy.data();
    T* dxd = dx.data();
    parallel_for(N * C, [&](int64_t lo, int64_t hi) {
        for (int64_t nc = lo; nc < hi; ++nc) {
            const T* plane = xd + nc * H * W;
            const T* dout = dyd + nc * OH * OW;
            T* dplane = dxd + nc * H * W;
            for (int64_t oh = 0; oh < OH; ++oh) {
                for (int64_t ow = 0; ow < OW; ++ow) {
                    int64_t arg = -1;
                    T best = T(0);
                    for (int64_t i = 0; i < kh; ++i) {
                        const int64_t ih = oh * s - p + i;
                        if (ih < 0 || ih >= H) continue;
                        for (int64_t j = 0; j < kw; ++j) {
                            const int64_t iw = ow * s - p + j;
                            if (iw < 0 || iw >= W) continue;
                            const T v = plane[ih * W + iw];
                            if (arg < 0 || v > best) {
                                best = v;
                                arg = ih * W + iw;
                            }
                        }
                    }
                    if (arg >= 0) dplane[arg] += dout[oh * OW + ow];
                }
            }
        }
    });
    return dx;
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    require_rank(x, 4, "global_avg_pool input");
    const int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor<T> y({N, C});
    const T* xd = x.data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
        double acc = 0.0;
        const T* p = xd + nc * HW;
        for (int64_t i = 0; i < HW; ++i) acc += static_cast<double>(p[i]);
        y[nc] = static_cast<T>(acc / static_cast<double>(HW));
    }
    return y;
}

template <typename T>
Tensor<T> global_avg_pool_backward(const std::vector<int64_t>& x_shape, const Tensor<T>& dy) {
    if (x_shape.size() != 4) throw ShapeError("global_avg_pool_backward expects a rank-4 input shape");
    const int64_t N = x_shape[0], C = x_shape[1], HW = x_shape[2] * x_shape[3];
    if (dy.rank() != 2 || dy.dim(0) != N || dy.dim(1) != C)
        throw ShapeError("global_avg_pool_backward cotangent " + shape_str(dy.shape()) + " mismatch");
    Tensor<T> dx(x_shape);
    T* q = dx.data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const T v = dy[nc] / static_cast<T>(HW);
        T* p = q + nc * HW;
        for (int64_t i = 0; i < HW; ++i) p[i] = v;
    }
    return dx;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    require_rank(x, 2, "linear input");
    require_rank(w, 2, "linear weight");
    if (x.dim(1) != w.dim(1))
        throw ShapeError("linear feature mismatch: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(w.shape()));
    const int64_t N = x.dim(0), Din = x.dim(1), Dout = w.dim(0);
    if (bias.rank() != 1 || bias.dim(0) != Dout)
        throw ShapeError("linear bias must be [" + std::to_string(Dout) + "], got " + shape_str(bias.shape()));
    Tensor<T> y({N, Dout});
    gemm(false, true, N, Dout, Din, x.data(), Din, w.data(), Din, y.data(), Dout);
    T* yd = y.data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t k = 0; k < Dout; ++k) yd[n * Dout + k] += bias[k];
    return y;
}

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy) {
    const int64_t N = x.dim(0), Din = x.dim(1), Dout = w.dim(0);
    if (dy.rank() != 2 || dy.dim(0) != N || dy.dim(1) != Dout)
        throw ShapeError("linear_backward cotangent " + shape_str(dy.shape()) + " mismatch");
    LinearGrads<T> out;
    out.dx = Tensor<T>({N, Din});
    out.dw = Tensor<T>({Dout, Din});
    out.dbias = Tensor<T>({Dout});
    gemm(false, false, N, Din, Dout, dy.data(), Dout, w.data(), Din, out.dx.data(), Din);
    gemm(true, false, Dout, Din, N, dy.data(), Dout, x.data(), Din, out.dw.data(), Din);
    for (int64_t k = 0; k < Dout; ++k) {
        double acc = 0.0;
        for (int64_t n = 0; n < N; ++n) acc += static_cast<double>(dy[n * Dout + k]);
        out.dbias[k] = static_cast<T>(acc);
    }
    return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
    require_rank(logits, 2, "softmax input");
    const int64_t N = logits.dim(0), K = logits.dim(1);
    Tensor<T> p(logits.shape());
    for (int64_t n = 0; n < N; ++n) {
        const T* row = logits.data() + n * K;
        T* out = p.data() + n * K;
        T mx = row[0];
        for (int64_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
        double sum = 0.0;
        for (int64_t k = 0; k < K; ++k) {
            const double e = std::exp(static_cast<double>(row[k] - mx));
            out[k] = static_cast<T>(e);
            sum += e;
        }
        const T inv = static_cast<T>(1.0 / sum);
        for (int64_t k = 0; k < K; ++k) out[k] *= inv;
    }
    return p;
}

template <typename T>
SoftmaxCrossEntropy<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
    require_rank(logits, 2, "softmax_cross_entropy logits");
    const int64_t N = logits.dim(0), K = logits.dim(1);
    if (static_cast<int64_t>(labels.size()) != N)
        throw ShapeError("softmax_cross_entropy needs " + std::to_string(N) + " labels, got " +
                         std::to_string(labels.size()));
    for (int64_t n = 0; n < N; ++n)
        if (labels[static_cast<size_t>(n)] < 0 || labels[static_cast<size_t>(n)] >= K)
            throw DataError("label out of range at row " + std::to_string(n) + ": " +
                            std::to_string(labels[static_cast<size_t>(n)]) + " not in [0," +
                            std::to_string(K) + ")");

    SoftmaxCrossEntropy<T> out;
    out.dlogits = Tensor<T>(logits.shape());
    double loss = 0.0;
    for (int64_t n = 0; n < N; ++n) {
        const T* row = logits.data() + n * K;
        T* drow = out.dlogits.data() + n * K;
        T mx = row[0];
        for (int64_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
        double sum = 0.0;
        for (int64_t k = 0; k < K; ++k) sum += std::exp(static_cast<double>(row[k] - mx));
        const double logsum = std::log(sum);
        const int y = labels[static_cast<size_t>(n)];
        loss += -(static_cast<double>(row[y] - mx) - logsum);
        for (int64_t k = 0; k < K; ++k) {
            const double p = std::exp(static_cast<double>(row[k] - mx)) / sum;
            drow[k] = static_cast<T>((p - (k == y ? 1.0 : 0.0)) / static_cast<double>(N));
        }
    }
    out.loss = static_cast<T>(loss / static_cast<double>(N));
    return out;
}

// explicit instantiations: float is the training precision, double backs the
// gradient-check suites
#define EDGEXC_INSTANTIATE_OPS(T)                                                                    \
    template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>*,              \
                                 const ConvGeometry&);                                               \
    template ConvGrads<T> conv2d_backward<T>(const Tensor<T>&, const Tensor<T>&, const ConvGeometry&, \
                                             const Tensor<T>&, bool);                               \
    template Tensor<T> depthwise_conv2d<T>(const Tensor<T>&, const Tensor<T>&, const ConvGeometry&); \
    template DepthwiseGrads<T> depthwise_conv2d_backward<T>(const Tensor<T>&, const Tensor<T>&,     \
                                                            const ConvGeometry&, const Tensor<T>&); \
    template Tensor<T> batchnorm2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,         \
                                      Tensor<T>&, Tensor<T>&, Mode, T, T, BatchNormCache<T>*);      \
    template BatchNormGrads<T> batchnorm2d_backward<T>(const Tensor<T>&, const Tensor<T>&,          \
                                                       const BatchNormCache<T>&, const Tensor<T>&); \
    template Tensor<T> relu<T>(const Tensor<T>&);                                                   \
    template Tensor<T> relu_backward<T>(const Tensor<T>&, const Tensor<T>&);                        \
    template Tensor<T> maxpool2d<T>(const Tensor<T>&, const ConvGeometry&);                         \
    template Tensor<T> maxpool2d_backward<T>(const Tensor<T>&, const ConvGeometry&, const Tensor<T>&); \
    template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                        \
    template Tensor<T> global_avg_pool_backward<T>(const std::vector<int64_t>&, const Tensor<T>&);  \
    template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
    template LinearGrads<T> linear_backward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
    template Tensor<T> softmax<T>(const Tensor<T>&);                                                \
    template SoftmaxCrossEntropy<T> softmax_cross_entropy<T>(const Tensor<T>&, const std::vector<int>&);

EDGEXC_INSTANTIATE_OPS(float)
EDGEXC_INSTANTIATE_OPS(double)

#undef EDGEXC_INSTANTIATE_OPS

}  // namespace edgexc
