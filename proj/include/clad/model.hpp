#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "clad/config.hpp"
#include "clad/errors.hpp"
#include "clad/rng.hpp"
#include "clad/tensor.hpp"

namespace clad {

// The complete named-parameter set of both encoders and both decoders.
// The shallow-encoder ablation leaves conv2/conv3 empty and sizes proj_v
// for the 8 channels of conv1; everything else dispatches on that.
template <typename T>
struct ModelParamsT {
    int image_size = 0;
    int channels = 0;

    TensorT<T> conv1_w, conv1_b;  // 8 x C x 3 x 3
    TensorT<T> conv2_w, conv2_b;  // 16 x 8 x 3 x 3
    TensorT<T> conv3_w, conv3_b;  // 16 x 16 x 3 x 3
    TensorT<T> proj_v_w, proj_v_b;
    TensorT<T> token_table;  // |vocab| x token_dim
    TensorT<T> proj_t_w, proj_t_b;
    TensorT<T> expand_w, expand_b;  // 16*(s/8)^2 x d
    TensorT<T> deconv1_w, deconv1_b;
    TensorT<T> deconv2_w, deconv2_b;
    TensorT<T> deconv3_w, deconv3_b;  // C x 16 x 3 x 3
    TensorT<T> bow_w, bow_b;          // |vocab| x d

    bool shallow() const { return conv2_w.empty(); }

    // Canonical order; drives init draws, checkpoints and checksums.
    std::vector<std::pair<std::string, TensorT<T>*>> named() {
        std::vector<std::pair<std::string, TensorT<T>*>> all = {
            {"conv1_w", &conv1_w},     {"conv1_b", &conv1_b},
            {"conv2_w", &conv2_w},     {"conv2_b", &conv2_b},
            {"conv3_w", &conv3_w},     {"conv3_b", &conv3_b},
            {"proj_v_w", &proj_v_w},   {"proj_v_b", &proj_v_b},
            {"token_table", &token_table},
            {"proj_t_w", &proj_t_w},   {"proj_t_b", &proj_t_b},
            {"expand_w", &expand_w},   {"expand_b", &expand_b},
            {"deconv1_w", &deconv1_w}, {"deconv1_b", &deconv1_b},
            {"deconv2_w", &deconv2_w}, {"deconv2_b", &deconv2_b},
            {"deconv3_w", &deconv3_w}, {"deconv3_b", &deconv3_b},
            {"bow_w", &bow_w},         {"bow_b", &bow_b},
        };
        std::vector<std::pair<std::string, TensorT<T>*>> present;
        for (auto& [name, t] : all)
            if (!t->empty()) present.emplace_back(name, t);
        return present;
    }

    std::vector<std::pair<std::string, const TensorT<T>*>> named() const {
        auto mut = const_cast<ModelParamsT*>(this)->named();
        std::vector<std::pair<std::string, const TensorT<T>*>> out;
        for (auto& [name, t] : mut) out.emplace_back(name, t);
        return out;
    }

    void enable_grads() {
        for (auto& [name, t] : named()) t->enable_grad();
    }
};

using ModelParams = ModelParamsT<float>;

// Result of the visual encoder: the embedding plus the post-ReLU activation
// maps of the last convolutional stage, retained for Grad-CAM. `tape` is set
// when the forward pass was recorded for a later backward.
template <typename T>
struct VisualForwardT {
    TensorT<T> z_v;
    TensorT<T> activations;
    std::shared_ptr<TapeT<T>> tape;
};

using VisualForward = VisualForwardT<float>;

namespace detail {

inline double xavier_bound(int fan_in, int fan_out) {
    return std::sqrt(6.0 / (static_cast<double>(fan_in) + fan_out));
}

template <typename T>
TensorT<T> xavier_conv(Xoshiro256ss& rng, int co, int ci, int kh, int kw) {
    const double s = xavier_bound(ci * kh * kw, co * kh * kw);
    TensorT<T> t = TensorT<T>::zeros({co, ci, kh, kw});
    for (size_t i = 0; i < t.size(); ++i)
        t.data()[i] = static_cast<T>(rng.uniform(-s, s));
    return t;
}

template <typename T>
TensorT<T> xavier_matrix(Xoshiro256ss& rng, int out, int in) {
    const double s = xavier_bound(in, out);
    TensorT<T> t = TensorT<T>::zeros({out, in});
    for (size_t i = 0; i < t.size(); ++i)
        t.data()[i] = static_cast<T>(rng.uniform(-s, s));
    return t;
}

}  // namespace detail

// Xavier-uniform weights, zero biases, xoshiro256** stream from config.seed.
// Draws happen in the canonical parameter order, so equal seeds give
// bitwise-identical parameters. encoder_stages=1 builds the shallow variant.
template <typename T>
ModelParamsT<T> init_params_t(const Config& config, int encoder_stages = 3) {
    config.validate();
    if (encoder_stages != 1 && encoder_stages != 3)
        throw UsageError("init_params: encoder_stages must be 1 or 3");
    const int d = config.embed_dim;
    const int s = config.image_size;
    const int c = config.channels;
    const int vocab_size = static_cast<int>(config.vocab.size());
    const int feat = encoder_stages == 3 ? 16 : 8;
    Xoshiro256ss rng(config.seed);

    ModelParamsT<T> p;
    p.image_size = s;
    p.channels = c;
    p.conv1_w = detail::xavier_conv<T>(rng, 8, c, 3, 3);
    p.conv1_b = TensorT<T>::zeros({8});
    if (encoder_stages == 3) {
        p.conv2_w = detail::xavier_conv<T>(rng, 16, 8, 3, 3);
        p.conv2_b = TensorT<T>::zeros({16});
        p.conv3_w = detail::xavier_conv<T>(rng, 16, 16, 3, 3);
        p.conv3_b = TensorT<T>::zeros({16});
    }
    p.proj_v_w = detail::xavier_matrix<T>(rng, d, feat);
    p.proj_v_b = TensorT<T>::zeros({d});
    p.token_table = detail::xavier_matrix<T>(rng, vocab_size, config.token_dim);
    p.proj_t_w = detail::xavier_matrix<T>(rng, d, config.token_dim);
    p.proj_t_b = TensorT<T>::zeros({d});
    const int expand_dim = 16 * (s / 8) * (s / 8);
    p.expand_w = detail::xavier_matrix<T>(rng, expand_dim, d);
    p.expand_b = TensorT<T>::zeros({expand_dim});
    p.deconv1_w = detail::xavier_conv<T>(rng, 16, 16, 3, 3);
    p.deconv1_b = TensorT<T>::zeros({16});
    p.deconv2_w = detail::xavier_conv<T>(rng, 16, 16, 3, 3);
    p.deconv2_b = TensorT<T>::zeros({16});
    p.deconv3_w = detail::xavier_conv<T>(rng, c, 16, 3, 3);
    p.deconv3_b = TensorT<T>::zeros({c});
    p.bow_w = detail::xavier_matrix<T>(rng, vocab_size, d);
    p.bow_b = TensorT<T>::zeros({vocab_size});
    p.enable_grads();
    return p;
}

inline ModelParams init_params(const Config& config, int encoder_stages = 3) {
    return init_params_t<float>(config, encoder_stages);
}

// z_v = f_v(I): strided conv stack with ReLU, global average pool over the
// last activation maps, affine projection to the embedding dimension.
template <typename T>
VisualForwardT<T> encode_image(const ModelParamsT<T>& params,
                               const TensorT<T>& image) {
    detail::require_rank(image, 3, "encode_image", "image");
    if (image.dim(0) != params.channels)
        throw DimensionError("encode_image: image has " +
                             std::to_string(image.dim(0)) +
                             " channels, model expects " +
                             std::to_string(params.channels));
    if (image.dim(1) != params.image_size || image.dim(2) != params.image_size)
        throw DimensionError("encode_image: image is " + image.shape_str() +
                             ", model expects " +
                             std::to_string(params.image_size) + "x" +
                             std::to_string(params.image_size));
    for (size_t i = 0; i < image.size(); ++i) {
        const T v = image.data()[i];
        if (v < T(0) || v > T(1))
            throw UsageError("encode_image: pixel values must lie in [0,1]");
    }
    TensorT<T> a = relu(conv2d(image, params.conv1_w, params.conv1_b, 2, 1));
    if (!params.shallow()) {
        a = relu(conv2d(a, params.conv2_w, params.conv2_b, 2, 1));
        a = relu(conv2d(a, params.conv3_w, params.conv3_b, 2, 1));
    }
    TensorT<T> pooled = global_avg_pool(a);
    VisualForwardT<T> fwd;
    fwd.z_v = affine(params.proj_v_w, params.proj_v_b, pooled);
    fwd.activations = a;
    return fwd;
}

// z_t = f_t(T): mean of token embeddings (bag-of-words, order-invariant),
// affine projection to the embedding dimension.
template <typename T>
TensorT<T> encode_text(const ModelParamsT<T>& params,
                       const std::vector<int>& tokens) {
    if (tokens.empty()) throw UsageError("encode_text: empty token list");
    TensorT<T> pooled = embed_mean(params.token_table, tokens);
    return affine(params.proj_t_w, params.proj_t_b, pooled);
}

// f_v^{-1}: affine expansion to 16 x s/8 x s/8, then three nearest-neighbor
// upsample + conv stages (ReLU on the first two, plain affine on the last).
template <typename T>
TensorT<T> decode_image(const ModelParamsT<T>& params, const TensorT<T>& z_v) {
    detail::require_rank(z_v, 1, "decode_image", "embedding");
    if (z_v.dim(0) != params.expand_w.dim(1))
        throw DimensionError("decode_image: embedding has dim " +
                             std::to_string(z_v.dim(0)) + ", model expects " +
                             std::to_string(params.expand_w.dim(1)));
    const int s8 = params.image_size / 8;
    TensorT<T> x = affine(params.expand_w, params.expand_b, z_v);
    x = reshape(x, {16, s8, s8});
    x = relu(conv2d(upsample_nearest2x(x), params.deconv1_w, params.deconv1_b,
                    1, 1));
    x = relu(conv2d(upsample_nearest2x(x), params.deconv2_w, params.deconv2_b,
                    1, 1));
    x = conv2d(upsample_nearest2x(x), params.deconv3_w, params.deconv3_b, 1, 1);
    return x;
}

// f_t^{-1}: affine map to a |vocab|-dim bag-of-words reconstruction.
template <typename T>
TensorT<T> decode_text(const ModelParamsT<T>& params, const TensorT<T>& z_t) {
    detail::require_rank(z_t, 1, "decode_text", "embedding");
    if (z_t.dim(0) != params.bow_w.dim(1))
        throw DimensionError("decode_text: embedding has dim " +
                             std::to_string(z_t.dim(0)) + ", model expects " +
                             std::to_string(params.bow_w.dim(1)));
    return affine(params.bow_w, params.bow_b, z_t);
}

// Binary bag-of-words indicator over the vocabulary; the target of f_t^{-1}.
template <typename T>
TensorT<T> bow_target(int vocab_size, const std::vector<int>& tokens) {
    TensorT<T> t = TensorT<T>::zeros({vocab_size});
    for (int id : tokens) {
        if (id < 0 || id >= vocab_size)
            throw UsageError("bow_target: token id out of range");
        t.data()[id] = T(1);
    }
    return t;
}

// FNV-1a over the float32 little-endian bytes of all parameters in
// canonical order; pins init reproducibility in tests and reports.
template <typename T>
uint64_t param_checksum(const ModelParamsT<T>& params) {
    uint64_t h = 0xCBF29CE484222325ULL;
    for (auto& [name, t] : params.named()) {
        h = fnv1a64(name.data(), name.size(), h);
        std::vector<float> as_f32(t->size());
        for (size_t i = 0; i < t->size(); ++i)
            as_f32[i] = static_cast<float>(t->data()[i]);
        h = checksum_floats(as_f32, h);
    }
    return h;
}

}  // namespace clad
