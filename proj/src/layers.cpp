#include "edgexc/layers.hpp"

#include <cmath>

namespace edgexc {

namespace {

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
    if (!a.same_shape(b))
        throw ShapeError("residual add shape mismatch: body " + shape_str(a.shape()) + " vs skip " +
                         shape_str(b.shape()));
    T* pa = a.data();
    const T* pb = b.data();
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) pa[i] += pb[i];
}

ConvGeometry pool_geometry(const LayerSpec& spec) {
    ConvGeometry g;
    g.kernel_h = g.kernel_w = kPoolKernel;
    g.padding = 1;
    g.stride = spec.stride;
    return g;
}

LayerSpec projection_spec(int64_t in, int64_t out, int64_t stride) {
    LayerSpec s;
    s.kind = LayerKind::conv;
    s.in = in;
    s.out = out;
    s.stride = stride;
    s.kernel = 1;
    return s;
}

}  // namespace

template <typename T>
Tensor<T> separable_conv(const Tensor<T>& x, const SeparableConvSpec& spec, const Tensor<T>& dw_w,
                         const Tensor<T>& pw_w, SepConvCache<T>* cache) {
    if (spec.depth_multiplier != 1)
        throw ConfigError("separable_conv supports depth multiplier 1 only, got " +
                          std::to_string(spec.depth_multiplier));
    if (x.dim(1) != spec.in_channels)
        throw ShapeError("separable_conv channel mismatch: input " + shape_str(x.shape()) +
                         " vs spec in_channels " + std::to_string(spec.in_channels));
    ConvGeometry dg;
    dg.kernel_h = dg.kernel_w = spec.kernel;
    dg.padding = spec.kernel / 2;
    dg.stride = spec.stride;
    Tensor<T> mid = depthwise_conv2d(x, dw_w, dg);

    ConvGeometry pg;
    pg.kernel_h = pg.kernel_w = 1;
    if (pw_w.dim(0) != spec.out_channels || pw_w.dim(1) != spec.in_channels)
        throw ShapeError("separable_conv pointwise weight " + shape_str(pw_w.shape()) +
                         " does not match spec channels");
    Tensor<T> y = conv2d(mid, pw_w, nullptr, pg);
    if (cache) cache->dw_out = std::move(mid);
    return y;
}

template <typename T>
SepConvGrads<T> separable_conv_backward(const Tensor<T>& x, const SeparableConvSpec& spec,
                                        const Tensor<T>& dw_w, const Tensor<T>& pw_w,
                                        const SepConvCache<T>& cache, const Tensor<T>& dy) {
    ConvGeometry pg;
    pg.kernel_h = pg.kernel_w = 1;
    ConvGrads<T> pw_grads = conv2d_backward(cache.dw_out, pw_w, pg, dy, false);

    ConvGeometry dg;
    dg.kernel_h = dg.kernel_w = spec.kernel;
    dg.padding = spec.kernel / 2;
    dg.stride = spec.stride;
    DepthwiseGrads<T> dw_grads = depthwise_conv2d_backward(x, dw_w, dg, pw_grads.dx);

    SepConvGrads<T> out;
    out.dx = std::move(dw_grads.dx);
    out.d_dw = std::move(dw_grads.dw);
    out.d_pw = std::move(pw_grads.dw);
    return out;
}

template <typename T>
Tensor<T> layer_unit_forward(const Tensor<T>& x, const LayerSpec& spec, LayerParams<T>& params,
                             Mode mode, bool relu_after, LayerUnitCache<T>* cache) {
    Tensor<T> conv_out;
    Tensor<T> dw_out;
    if (spec.kind == LayerKind::sepconv) {
        SeparableConvSpec sc;
        sc.in_channels = spec.in;
        sc.out_channels = spec.out;
        sc.stride = spec.stride;
        SepConvCache<T> sep_cache;
        conv_out = separable_conv(x, sc, params.dw, params.w, &sep_cache);
        dw_out = std::move(sep_cache.dw_out);
    } else if (spec.kind == LayerKind::conv) {
        conv_out = conv2d(x, params.w, nullptr, spec.geometry());
    } else {
        throw ConfigError("layer_unit_forward does not handle pooling layers");
    }

    BatchNormCache<T> bn_cache;
    Tensor<T> bn_out = batchnorm2d(conv_out, params.gamma, params.beta, params.running_mean,
                                   params.running_var, mode, static_cast<T>(kBnMomentum),
                                   static_cast<T>(kBnEpsilon), cache ? &bn_cache : nullptr);
    Tensor<T> y = relu_after ? relu(bn_out) : bn_out;

    if (cache) {
        cache->x = x;
        cache->dw_out = std::move(dw_out);
        cache->conv_out = std::move(conv_out);
        cache->bn = std::move(bn_cache);
        cache->relu = relu_after;
        if (relu_after) cache->bn_out = std::move(bn_out);
    }
    return y;
}

template <typename T>
Tensor<T> layer_unit_backward(const Tensor<T>& dy, const LayerSpec& spec, const LayerParams<T>& params,
                              const LayerUnitCache<T>& cache, LayerGrads<T>& grads) {
    const Tensor<T>* d = &dy;
    Tensor<T> d_relu;
    if (cache.relu) {
        d_relu = relu_backward(cache.bn_out, dy);
        d = &d_relu;
    }

    BatchNormGrads<T> bn_grads = batchnorm2d_backward(cache.conv_out, params.gamma, cache.bn, *d);
    grads.gamma = std::move(bn_grads.dgamma);
    grads.beta = std::move(bn_grads.dbeta);

    if (spec.kind == LayerKind::sepconv) {
        SeparableConvSpec sc;
        sc.in_channels = spec.in;
        sc.out_channels = spec.out;
        sc.stride = spec.stride;
        SepConvCache<T> sep_cache;
        sep_cache.dw_out = cache.dw_out;
        SepConvGrads<T> sg =
            separable_conv_backward(cache.x, sc, params.dw, params.w, sep_cache, bn_grads.dx);
        grads.w = std::move(sg.d_pw);
        grads.dw = std::move(sg.d_dw);
        return std::move(sg.dx);
    }
    ConvGrads<T> cg = conv2d_backward(cache.x, params.w, spec.geometry(), bn_grads.dx, false);
    grads.w = std::move(cg.dw);
    return std::move(cg.dx);
}

ModuleLayout analyze_module(const ModuleSpec& spec) {
    ModuleLayout layout;
    for (size_t i = 0; i < spec.layers.size(); ++i) {
        const LayerSpec& l = spec.layers[i];
        if (l.kind == LayerKind::maxpool) {
            if (i + 1 != spec.layers.size())
                throw ConfigError("maxpool must be the last layer of a module");
            layout.has_pool = true;
        } else {
            layout.conv_indices.push_back(static_cast<int>(i));
        }
    }
    const int n = static_cast<int>(layout.conv_indices.size());
    if (spec.residual.kind == ResidualKind::double_skip) {
        if (n < 2) throw ConfigError("double_skip needs at least two conv layers");
        if (layout.has_pool) throw ConfigError("double_skip modules cannot carry a pool");
        if (spec.residual.skip == SkipKind::projection)
            throw ConfigError("double_skip with projection skips is not supported");
        const int split = (n + 1) / 2;
        layout.sub_ranges = {{0, split}, {split, n}};
    } else {
        layout.sub_ranges = {{0, n}};
    }
    return layout;
}

int64_t module_total_stride(const ModuleSpec& spec) {
    int64_t s = 1;
    for (const LayerSpec& l : spec.layers) s *= l.stride;
    return s;
}

template <typename T>
Tensor<T> module_forward(const Tensor<T>& x, const ModuleSpec& spec, ModuleParams<T>& params,
                         Mode mode, ModuleCache<T>* cache) {
    const ModuleLayout layout = analyze_module(spec);
    if (params.layers.size() != layout.conv_indices.size())
        throw ShapeError("module_forward: " + std::to_string(layout.conv_indices.size()) +
                         " conv layers but " + std::to_string(params.layers.size()) + " parameter sets");
    if (cache) cache->layer_caches.resize(layout.conv_indices.size());

    Tensor<T> cur = x;
    const bool residual = spec.residual.kind != ResidualKind::none;
    const size_t n_sub = layout.sub_ranges.size();
    for (size_t sb = 0; sb < n_sub; ++sb) {
        Tensor<T> sub_in = cur;
        if (cache) cache->sub_inputs.push_back(sub_in);
        const auto [begin, end] = layout.sub_ranges[sb];
        for (int li = begin; li < end; ++li) {
            const LayerSpec& lspec = spec.layers[static_cast<size_t>(layout.conv_indices[static_cast<size_t>(li)])];
            cur = layer_unit_forward(cur, lspec, params.layers[static_cast<size_t>(li)], mode,
                                     /*relu_after=*/true,
                                     cache ? &cache->layer_caches[static_cast<size_t>(li)] : nullptr);
        }
        const bool last_sub = sb + 1 == n_sub;
        if (last_sub && layout.has_pool) {
            const LayerSpec& pspec = spec.layers.back();
            if (cache) cache->pool_in = cur;
            cur = maxpool2d(cur, pool_geometry(pspec));
        }
        if (residual) {
            if (spec.residual.skip == SkipKind::identity) {
                add_inplace(cur, sub_in);
            } else {
                if (!params.proj)
                    throw ShapeError("projection skip parameters missing");
                const LayerSpec pspec =
                    projection_spec(sub_in.dim(1), cur.dim(1), module_total_stride(spec));
                LayerUnitCache<T> proj_cache;
                Tensor<T> skip = layer_unit_forward(sub_in, pspec, *params.proj, mode,
                                                    /*relu_after=*/false, cache ? &proj_cache : nullptr);
                if (cache) cache->proj = std::move(proj_cache);
                add_inplace(cur, skip);
            }
        }
    }
    return cur;
}

template <typename T>
Tensor<T> module_backward(const Tensor<T>& dy, const ModuleSpec& spec, const ModuleParams<T>& params,
                          const ModuleCache<T>& cache, ModuleGrads<T>& grads) {
    const ModuleLayout layout = analyze_module(spec);
    grads.layers.resize(layout.conv_indices.size());
    const bool residual = spec.residual.kind != ResidualKind::none;

    Tensor<T> d = dy;
    for (size_t sb = layout.sub_ranges.size(); sb-- > 0;) {
        Tensor<T> d_skip;  // gradient flowing into the sub-block input via the skip
        if (residual) {
            if (spec.residual.skip == SkipKind::identity) {
                d_skip = d;
            } else {
                const Tensor<T>& sub_in = cache.sub_inputs[sb];
                const LayerSpec pspec = projection_spec(sub_in.dim(1), d.dim(1), module_total_stride(spec));
                grads.proj.emplace();
                d_skip = layer_unit_backward(d, pspec, *params.proj, *cache.proj, *grads.proj);
            }
        }
        const bool last_sub = sb + 1 == layout.sub_ranges.size();
        if (last_sub && layout.has_pool) {
            const LayerSpec& pspec = spec.layers.back();
            d = maxpool2d_backward(cache.pool_in, pool_geometry(pspec), d);
        }
        const auto [begin, end] = layout.sub_ranges[sb];
        for (int li = end; li-- > begin;) {
            const LayerSpec& lspec = spec.layers[static_cast<size_t>(layout.conv_indices[static_cast<size_t>(li)])];
            d = layer_unit_backward(d, lspec, params.layers[static_cast<size_t>(li)],
                                    cache.layer_caches[static_cast<size_t>(li)],
                                    grads.layers[static_cast<size_t>(li)]);
        }
        if (residual) add_inplace(d, d_skip);
    }
    return d;
}

#define EDGEXC_INSTANTIATE_LAYERS(T)                                                                  \
    template Tensor<T> separable_conv<T>(const Tensor<T>&, const SeparableConvSpec&, const Tensor<T>&, \
                                         const Tensor<T>&, SepConvCache<T>*);                        \
    template SepConvGrads<T> separable_conv_backward<T>(const Tensor<T>&, const SeparableConvSpec&,  \
                                                        const Tensor<T>&, const Tensor<T>&,          \
                                                        const SepConvCache<T>&, const Tensor<T>&);   \
    template Tensor<T> layer_unit_forward<T>(const Tensor<T>&, const LayerSpec&, LayerParams<T>&,    \
                                             Mode, bool, LayerUnitCache<T>*);                        \
    template Tensor<T> layer_unit_backward<T>(const Tensor<T>&, const LayerSpec&,                    \
                                              const LayerParams<T>&, const LayerUnitCache<T>&,       \
                                              LayerGrads<T>&);                                       \
    template Tensor<T> module_forward<T>(const Tensor<T>&, const ModuleSpec&, ModuleParams<T>&, Mode, \
                                         ModuleCache<T>*);                                           \
    template Tensor<T> module_backward<T>(const Tensor<T>&, const ModuleSpec&, const ModuleParams<T>&, \
                                          const ModuleCache<T>&, ModuleGrads<T>&);

EDGEXC_INSTANTIATE_LAYERS(float)
EDGEXC_INSTANTIATE_LAYERS(double)

#undef EDGEXC_INSTANTIATE_LAYERS

}  // namespace edgexc
