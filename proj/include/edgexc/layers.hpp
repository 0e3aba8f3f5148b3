#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "edgexc/ops.hpp"
#include "edgexc/tensor.hpp"

namespace edgexc {

// Architecture-wide conventions: 3x3 kernels with padding 1 for conv and
// separable conv, 3x3 stride-2 padding-1 max pooling, 1x1 projection skips.
// Convolutions carry no bias; every one is immediately followed by batch norm.
inline constexpr int64_t kConvKernel = 3;
inline constexpr int64_t kPoolKernel = 3;
inline constexpr double kBnMomentum = 0.1;
inline constexpr double kBnEpsilon = 1e-5;

enum class LayerKind { conv, sepconv, maxpool };
enum class SkipKind { identity, projection };
enum class ResidualKind { none, single, double_skip };

struct ResidualSpec {
    ResidualKind kind = ResidualKind::none;
    SkipKind skip = SkipKind::identity;

    bool operator==(const ResidualSpec& o) const {
        if (kind != o.kind) return false;
        return kind == ResidualKind::none || skip == o.skip;
    }
};

struct LayerSpec {
    LayerKind kind = LayerKind::conv;
    int64_t in = 0;
    int64_t out = 0;
    int64_t stride = 1;
    // 1 only for the internal projection-skip convolution; regular layers are
    // fixed at 3x3 and this field is not serialized.
    int64_t kernel = kConvKernel;

    bool operator==(const LayerSpec& o) const {
        return kind == o.kind && in == o.in && out == o.out && stride == o.stride && kernel == o.kernel;
    }

    ConvGeometry geometry() const {
        ConvGeometry g;
        g.kernel_h = g.kernel_w = kernel;
        g.padding = kernel == 1 ? 0 : 1;
        g.stride = stride;
        return g;
    }
};

// A module: ordered layers (an optional trailing maxpool) plus its residual
// annotation. double_skip splits the conv layers into two consecutive
// sub-blocks of ceil(n/2) and floor(n/2) layers, each with its own skip.
struct ModuleSpec {
    std::vector<LayerSpec> layers;
    ResidualSpec residual;

    bool operator==(const ModuleSpec& o) const {
        return layers == o.layers && residual == o.residual;
    }
};

struct SeparableConvSpec {
    int64_t in_channels = 0;
    int64_t out_channels = 0;
    int64_t kernel = kConvKernel;
    int64_t stride = 1;
    int64_t depth_multiplier = 1;
};

// ---------------------------------------------------------------------------
// Separable convolution: per-channel spatial filter, then 1x1 cross-channel.
// ---------------------------------------------------------------------------

template <typename T>
struct SepConvCache {
    Tensor<T> dw_out;  // depthwise output, input of the pointwise step
};

template <typename T>
Tensor<T> separable_conv(const Tensor<T>& x, const SeparableConvSpec& spec, const Tensor<T>& dw_w,
                         const Tensor<T>& pw_w, SepConvCache<T>* cache = nullptr);

template <typename T>
struct SepConvGrads {
    Tensor<T> dx, d_dw, d_pw;
};

template <typename T>
SepConvGrads<T> separable_conv_backward(const Tensor<T>& x, const SeparableConvSpec& spec,
                                        const Tensor<T>& dw_w, const Tensor<T>& pw_w,
                                        const SepConvCache<T>& cache, const Tensor<T>& dy);

// ---------------------------------------------------------------------------
// Layer unit: conv or separable conv, batch norm, optional ReLU.
// ---------------------------------------------------------------------------

template <typename T>
struct LayerParams {
    Tensor<T> w;   // conv [out,in,k,k]; sepconv pointwise [out,in,1,1]
    Tensor<T> dw;  // sepconv depthwise [in,1,3,3]; empty for plain conv
    Tensor<T> gamma, beta;
    Tensor<T> running_mean, running_var;
};

template <typename T>
struct LayerGrads {
    Tensor<T> w, dw, gamma, beta;
};

template <typename T>
struct LayerUnitCache {
    Tensor<T> x;
    Tensor<T> dw_out;    // sepconv only
    Tensor<T> conv_out;  // pre-BN
    BatchNormCache<T> bn;
    Tensor<T> bn_out;  // pre-ReLU; cached only when the unit applies ReLU
    bool relu = false;
};

template <typename T>
Tensor<T> layer_unit_forward(const Tensor<T>& x, const LayerSpec& spec, LayerParams<T>& params,
                             Mode mode, bool relu_after, LayerUnitCache<T>* cache = nullptr);

template <typename T>
Tensor<T> layer_unit_backward(const Tensor<T>& dy, const LayerSpec& spec, const LayerParams<T>& params,
                              const LayerUnitCache<T>& cache, LayerGrads<T>& grads);

// ---------------------------------------------------------------------------
// Module execution
// ---------------------------------------------------------------------------

template <typename T>
struct ModuleParams {
    std::vector<LayerParams<T>> layers;     // conv layers only, in order
    std::optional<LayerParams<T>> proj;     // 1x1 projection skip (+BN)
};

template <typename T>
struct ModuleGrads {
    std::vector<LayerGrads<T>> layers;
    std::optional<LayerGrads<T>> proj;
};

template <typename T>
struct ModuleCache {
    std::vector<Tensor<T>> sub_inputs;              // input of each sub-block
    std::vector<LayerUnitCache<T>> layer_caches;    // one per conv layer
    Tensor<T> pool_in;                              // maxpool input when present
    std::optional<LayerUnitCache<T>> proj;
};

// Static structure of a module: which layer-list entries are conv layers,
// where the pool sits, and the sub-block split.
struct ModuleLayout {
    std::vector<int> conv_indices;                  // into ModuleSpec::layers
    std::vector<std::pair<int, int>> sub_ranges;    // [begin,end) over conv_indices
    bool has_pool = false;
};

ModuleLayout analyze_module(const ModuleSpec& spec);

// Projection skip stride must undo the body's total downsampling.
int64_t module_total_stride(const ModuleSpec& spec);

template <typename T>
Tensor<T> module_forward(const Tensor<T>& x, const ModuleSpec& spec, ModuleParams<T>& params,
                         Mode mode, ModuleCache<T>* cache = nullptr);

template <typename T>
Tensor<T> module_backward(const Tensor<T>& dy, const ModuleSpec& spec, const ModuleParams<T>& params,
                          const ModuleCache<T>& cache, ModuleGrads<T>& grads);

// Additive skip around a body of layers; thin alias over module_forward for
// wrappers that are pure residual units.
template <typename T>
Tensor<T> residual_forward(const Tensor<T>& x, const ModuleSpec& wrap, ModuleParams<T>& params,
                           Mode mode, ModuleCache<T>* cache = nullptr) {
    if (wrap.residual.kind == ResidualKind::none)
        throw ConfigError("residual_forward requires a skip annotation");
    return module_forward(x, wrap, params, mode, cache);
}

}  // namespace edgexc
