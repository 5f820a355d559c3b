#pragma once

// Encoder-decoder segmentation network with plain (UNet) or nested dense
// (UNet++) skip pathways. Forward and reverse-mode passes are written out
// by hand; everything is templated on the scalar type so the same code runs
// in float for training and in double for gradient checking.
//
// Node X(i,j): level i (0 = full resolution), column j.
//   X(0,0)    = block(input)
//   X(i,0)    = block(maxpool2(X(i-1,0)))
//   X(i,j>0)  = block(concat(skips, upsample2(X(i+1,j-1))))
// where skips are X(i,0..j-1) for nested_dense and X(i,0) alone for
// plain_skip; plain_skip only builds the decoder nodes with i + j = L-1.
// block = conv3x3 -> relu -> conv3x3 -> relu. The head is a 1x1 conv on
// X(0,L-1) followed by a logistic sigmoid.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "msgen/error.hpp"
#include "msgen/rng.hpp"

namespace msgen::segnet {

enum class SkipKind { plain_skip, nested_dense };

inline const char* to_string(SkipKind k) { return k == SkipKind::plain_skip ? "plain_skip" : "nested_dense"; }

inline SkipKind parse_skip_kind(const std::string& s)
{
    if (s == "plain_skip" || s == "unet") return SkipKind::plain_skip;
    if (s == "nested_dense" || s == "unet++" || s == "unetpp") return SkipKind::nested_dense;
    throw ValidationError("unknown topology '" + s + "' (expected plain_skip or nested_dense)");
}

struct Topology {
    SkipKind kind = SkipKind::nested_dense;
    std::size_t depth = 3;
    std::size_t base_channels = 8;
    std::size_t multiplier = 2;

    [[nodiscard]] std::size_t channels(std::size_t level) const
    {
        std::size_t c = base_channels;
        for (std::size_t i = 0; i < level; ++i) c *= multiplier;
        return c;
    }

    void validate(std::size_t side = 0) const
    {
        if (depth < 2) throw ValidationError("topology depth must be >= 2");
        if (base_channels < 1) throw ValidationError("topology base_channels must be >= 1");
        if (multiplier < 1) throw ValidationError("topology multiplier must be >= 1");
        if (side != 0 && side % (std::size_t{1} << (depth - 1)) != 0)
            throw ValidationError("input side " + std::to_string(side) + " is not divisible by 2^(depth-1)");
    }

    bool operator==(const Topology&) const = default;
};

struct ConvShape {
    std::size_t in = 0, out = 0;
    std::size_t weight_offset = 0, bias_offset = 0;
    [[nodiscard]] std::size_t weight_count() const { return out * in * 9; }
};

struct Node {
    std::size_t level = 0, column = 0;
    std::vector<std::size_t> skips;      // same-level source node indices
    std::ptrdiff_t below = -1;           // X(i+1,j-1), upsampled; -1 if none
    std::ptrdiff_t pooled = -1;          // X(i-1,0), max-pooled; -1 if none
    ConvShape conv1, conv2;

    [[nodiscard]] std::string name() const
    {
        return "X(" + std::to_string(level) + "," + std::to_string(column) + ")";
    }
};

/// Node graph plus parameter layout. Parameters are one flat vector:
/// per node in evaluation order, conv1 weights [out][in][3][3], conv1 bias,
/// conv2 weights, conv2 bias; then head weights [C0] and head bias.
class Network {
  public:
    Network() = default;
    explicit Network(Topology t) : topology_(t)
    {
        topology_.validate();
        const std::size_t L = topology_.depth;
        auto find = [this](std::size_t i, std::size_t j) -> std::ptrdiff_t {
            for (std::size_t k = 0; k < nodes_.size(); ++k)
                if (nodes_[k].level == i && nodes_[k].column == j) return static_cast<std::ptrdiff_t>(k);
            return -1;
        };
        std::size_t offset = 0;
        auto add_conv = [&offset](std::size_t in, std::size_t out) {
            ConvShape c{in, out, offset, 0};
            offset += c.weight_count();
            c.bias_offset = offset;
            offset += out;
            return c;
        };
        for (std::size_t j = 0; j < L; ++j) {
            for (std::size_t i = 0; i + j < L; ++i) {
                if (j > 0 && topology_.kind == SkipKind::plain_skip && i + j != L - 1) continue;
                Node n;
                n.level = i;
                n.column = j;
                std::size_t in = 0;
                if (j == 0) {
                    if (i == 0) {
                        in = 1;
                    } else {
                        n.pooled = find(i - 1, 0);
                        in = topology_.channels(i - 1);
                    }
                } else {
                    const std::size_t nskips = topology_.kind == SkipKind::nested_dense ? j : 1;
                    for (std::size_t s = 0; s < nskips; ++s) {
                        n.skips.push_back(static_cast<std::size_t>(find(i, s)));
                        in += topology_.channels(i);
                    }
                    n.below = find(i + 1, j - 1);
                    in += topology_.channels(i + 1);
                }
                const std::size_t out = topology_.channels(i);
                n.conv1 = add_conv(in, out);
                n.conv2 = add_conv(out, out);
                nodes_.push_back(std::move(n));
            }
        }
        head_weight_offset_ = offset;
        offset += topology_.channels(0);
        head_bias_offset_ = offset;
        offset += 1;
        param_count_ = offset;
        output_node_ = static_cast<std::size_t>(find(0, L - 1));
    }

    [[nodiscard]] const Topology& topology() const { return topology_; }
    [[nodiscard]] const std::vector<Node>& nodes() const { return nodes_; }
    [[nodiscard]] std::size_t param_count() const { return param_count_; }
    [[nodiscard]] std::size_t head_weight_offset() const { return head_weight_offset_; }
    [[nodiscard]] std::size_t head_bias_offset() const { return head_bias_offset_; }
    [[nodiscard]] std::size_t output_node() const { return output_node_; }

  private:
    Topology topology_;
    std::vector<Node> nodes_;
    std::size_t param_count_ = 0;
    std::size_t head_weight_offset_ = 0;
    std::size_t head_bias_offset_ = 0;
    std::size_t output_node_ = 0;
};

template <typename T>
struct ModelParams {
    Network network;
    std::vector<T> values;

    ModelParams() = default;
    explicit ModelParams(const Topology& t) : network(t), values(network.param_count(), T(0)) {}

    template <typename U>
    [[nodiscard]] ModelParams<U> cast() const
    {
        ModelParams<U> out;
        out.network = network;
        out.values.assign(values.begin(), values.end());
        return out;
    }
};

/// Uniform(+-sqrt(6 / (fan_in + fan_out))) weights, zero biases.
template <typename T>
ModelParams<T> init_params(const Topology& t, std::uint64_t seed)
{
    ModelParams<T> p(t);
    Rng rng(seed);
    auto fill = [&](const ConvShape& c, std::size_t kernel) {
        const double limit = std::sqrt(6.0 / static_cast<double>((c.in + c.out) * kernel));
        for (std::size_t k = 0; k < c.weight_count(); ++k)
            p.values[c.weight_offset + k] = static_cast<T>(rng.uniform(-limit, limit));
    };
    for (const auto& n : p.network.nodes()) {
        fill(n.conv1, 9);
        fill(n.conv2, 9);
    }
    const std::size_t c0 = t.channels(0);
    const double limit = std::sqrt(6.0 / static_cast<double>(c0 + 1));
    for (std::size_t k = 0; k < c0; ++k)
        p.values[p.network.head_weight_offset() + k] = static_cast<T>(rng.uniform(-limit, limit));
    return p;
}

namespace kernels {

// in: [cin][h][w] -> padded [cin][h+2][w+2]
template <typename T>
void pad1(std::span<const T> in, std::size_t cin, std::size_t h, std::size_t w, std::vector<T>& out)
{
    const std::size_t pw = w + 2, ph = h + 2;
    out.assign(cin * ph * pw, T(0));
    for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t y = 0; y < h; ++y)
            std::copy_n(in.data() + (c * h + y) * w, w, out.data() + (c * ph + y + 1) * pw + 1);
}

// 3x3 same convolution on a pre-padded input.
template <typename T>
void conv3x3(std::span<const T> padded, std::size_t cin, std::size_t h, std::size_t w, std::span<const T> weights,
             std::span<const T> bias, std::size_t cout, std::span<T> out)
{
    const std::size_t pw = w + 2, plane = (h + 2) * pw;
    for (std::size_t o = 0; o < cout; ++o) {
        T* dst_plane = out.data() + o * h * w;
        std::fill_n(dst_plane, h * w, bias[o]);
        for (std::size_t c = 0; c < cin; ++c) {
            const T* k = weights.data() + (o * cin + c) * 9;
            const T* src_plane = padded.data() + c * plane;
            for (std::size_t y = 0; y < h; ++y) {
                T* dst = dst_plane + y * w;
                for (std::size_t ky = 0; ky < 3; ++ky) {
                    const T* row = src_plane + (y + ky) * pw;
                    const T k0 = k[ky * 3], k1 = k[ky * 3 + 1], k2 = k[ky * 3 + 2];
                    for (std::size_t x = 0; x < w; ++x) dst[x] += k0 * row[x] + k1 * row[x + 1] + k2 * row[x + 2];
                }
            }
        }
    }
}

// Reverse of conv3x3: accumulates weight/bias gradients and writes the
// gradient with respect to the padded input.
template <typename T>
void conv3x3_backward(std::span<const T> padded, std::size_t cin, std::size_t h, std::size_t w,
                      std::span<const T> weights, std::size_t cout, std::span<const T> grad_out,
                      std::span<T> grad_weights, std::span<T> grad_bias, std::vector<T>& grad_padded)
{
    const std::size_t pw = w + 2, plane = (h + 2) * pw;
    grad_padded.assign(cin * plane, T(0));
    for (std::size_t o = 0; o < cout; ++o) {
        const T* g_plane = grad_out.data() + o * h * w;
        T bsum = 0;
        for (std::size_t i = 0; i < h * w; ++i) bsum += g_plane[i];
        grad_bias[o] += bsum;
        for (std::size_t c = 0; c < cin; ++c) {
            const T* k = weights.data() + (o * cin + c) * 9;
            T* gk = grad_weights.data() + (o * cin + c) * 9;
            const T* src_plane = padded.data() + c * plane;
            T* gsrc_plane = grad_padded.data() + c * plane;
            T acc[9] = {};
            for (std::size_t y = 0; y < h; ++y) {
                const T* g = g_plane + y * w;
                for (std::size_t ky = 0; ky < 3; ++ky) {
                    const T* row = src_plane + (y + ky) * pw;
                    T* grow = gsrc_plane + (y + ky) * pw;
                    const T k0 = k[ky * 3], k1 = k[ky * 3 + 1], k2 = k[ky * 3 + 2];
                    // fixed 4-lane partial sums: vectorizable, same order every run
                    T l0[4] = {}, l1[4] = {}, l2[4] = {};
                    std::size_t x = 0;
                    for (; x + 4 <= w; x += 4)
                        for (std::size_t l = 0; l < 4; ++l) {
                            const T gx = g[x + l];
                            l0[l] += gx * row[x + l];
                            l1[l] += gx * row[x + l + 1];
                            l2[l] += gx * row[x + l + 2];
                        }
                    for (std::size_t l = 0; x < w; ++x, ++l) {
                        l0[l] += g[x] * row[x];
                        l1[l] += g[x] * row[x + 1];
                        l2[l] += g[x] * row[x + 2];
                    }
                    T a0 = 0, a1 = 0, a2 = 0;
                    for (std::size_t l = 0; l < 4; ++l) {
                        a0 += l0[l];
                        a1 += l1[l];
                        a2 += l2[l];
                    }
                    for (std::size_t x = 0; x < w; ++x) grow[x] += k0 * g[x];
                    for (std::size_t x = 0; x < w; ++x) grow[x + 1] += k1 * g[x];
                    for (std::size_t x = 0; x < w; ++x) grow[x + 2] += k2 * g[x];
                    acc[ky * 3] += a0;
                    acc[ky * 3 + 1] += a1;
                    acc[ky * 3 + 2] += a2;
                }
            }
            for (int t = 0; t < 9; ++t) gk[t] += acc[t];
        }
    }
}

template <typename T>
void relu(std::span<T> v)
{
    for (auto& x : v) x = x > T(0) ? x : T(0);
}

} // namespace kernels

/// Per-sample activations kept for the reverse pass.
template <typename T>
struct Workspace {
    struct NodeState {
        std::size_t h = 0, w = 0;
        std::vector<T> input_padded;   // concatenated input, padded
        std::vector<T> hidden;         // after conv1 + relu
        std::vector<T> hidden_padded;
        std::vector<T> output;         // after conv2 + relu
        std::vector<std::uint32_t> pool_argmax;  // for pooled-input nodes
        std::vector<T> grad_output;
    };
    std::vector<NodeState> nodes;
    std::vector<T> logits;
    std::vector<T> probs;
    std::vector<T> scratch_in, scratch_grad, scratch_grad2;
};

template <typename T>
void check_finite(std::span<const T> v, const std::string& where)
{
    for (const T& x : v)
        if (!std::isfinite(x)) throw NumericalError("non-finite activation in " + where);
}

/// Forward pass for one h x w image; probabilities are left in ws.probs.
template <typename T>
void forward_sample(const ModelParams<T>& p, std::span<const T> image, std::size_t h, std::size_t w, Workspace<T>& ws)
{
    const Network& net = p.network;
    const auto& nodes = net.nodes();
    const std::span<const T> params(p.values);
    ws.nodes.resize(nodes.size());
    for (std::size_t k = 0; k < nodes.size(); ++k) {
        const Node& n = nodes[k];
        auto& st = ws.nodes[k];
        st.h = h >> n.level;
        st.w = w >> n.level;
        const std::size_t hw = st.h * st.w;
        auto& in = ws.scratch_in;
        in.resize(n.conv1.in * hw);
        if (n.column == 0 && n.level == 0) {
            std::copy(image.begin(), image.end(), in.begin());
        } else if (n.column == 0) {
            const auto& src = ws.nodes[static_cast<std::size_t>(n.pooled)];
            st.pool_argmax.resize(n.conv1.in * hw);
            for (std::size_t c = 0; c < n.conv1.in; ++c)
                for (std::size_t y = 0; y < st.h; ++y)
                    for (std::size_t x = 0; x < st.w; ++x) {
                        std::uint32_t best = static_cast<std::uint32_t>((c * src.h + 2 * y) * src.w + 2 * x);
                        for (std::uint32_t dy = 0; dy < 2; ++dy)
                            for (std::uint32_t dx = 0; dx < 2; ++dx) {
                                const auto idx =
                                    static_cast<std::uint32_t>((c * src.h + 2 * y + dy) * src.w + 2 * x + dx);
                                if (src.output[idx] > src.output[best]) best = idx;
                            }
                        in[(c * st.h + y) * st.w + x] = src.output[best];
                        st.pool_argmax[(c * st.h + y) * st.w + x] = best;
                    }
        } else {
            std::size_t ch = 0;
            for (std::size_t s : n.skips) {
                const auto& src = ws.nodes[s].output;
                std::copy(src.begin(), src.end(), in.begin() + static_cast<std::ptrdiff_t>(ch * hw));
                ch += nodes[s].conv2.out;
            }
            const auto& b = ws.nodes[static_cast<std::size_t>(n.below)];
            const std::size_t bc = nodes[static_cast<std::size_t>(n.below)].conv2.out;
            for (std::size_t c = 0; c < bc; ++c)
                for (std::size_t y = 0; y < st.h; ++y)
                    for (std::size_t x = 0; x < st.w; ++x)
                        in[((ch + c) * st.h + y) * st.w + x] = b.output[(c * b.h + y / 2) * b.w + x / 2];
        }
        kernels::pad1<T>(in, n.conv1.in, st.h, st.w, st.input_padded);
        st.hidden.resize(n.conv1.out * hw);
        kernels::conv3x3<T>(st.input_padded, n.conv1.in, st.h, st.w,
                            params.subspan(n.conv1.weight_offset, n.conv1.weight_count()),
                            params.subspan(n.conv1.bias_offset, n.conv1.out), n.conv1.out, st.hidden);
        kernels::relu<T>(st.hidden);
        kernels::pad1<T>(st.hidden, n.conv2.in, st.h, st.w, st.hidden_padded);
        st.output.resize(n.conv2.out * hw);
        kernels::conv3x3<T>(st.hidden_padded, n.conv2.in, st.h, st.w,
                            params.subspan(n.conv2.weight_offset, n.conv2.weight_count()),
                            params.subspan(n.conv2.bias_offset, n.conv2.out), n.conv2.out, st.output);
        kernels::relu<T>(st.output);
        check_finite<T>(st.output, n.name());
    }

    const auto& top = ws.nodes[net.output_node()];
    const std::size_t c0 = nodes[net.output_node()].conv2.out;
    const std::size_t hw = h * w;
    ws.logits.assign(hw, params[net.head_bias_offset()]);
    for (std::size_t c = 0; c < c0; ++c) {
        const T wc = params[net.head_weight_offset() + c];
        const T* src = top.output.data() + c * hw;
        for (std::size_t i = 0; i < hw; ++i) ws.logits[i] += wc * src[i];
    }
    check_finite<T>(ws.logits, "head");
    ws.probs.resize(hw);
    for (std::size_t i = 0; i < hw; ++i) {
        const T z = ws.logits[i];
        // stable logistic
        ws.probs[i] = z >= T(0) ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
    }
}

/// Reverse pass; grad_logits is dLoss/dlogit per pixel. Gradients are
/// accumulated into grad (same layout as the parameters).
template <typename T>
void backward_sample(const ModelParams<T>& p, std::span<const T> grad_logits, Workspace<T>& ws, std::span<T> grad)
{
    const Network& net = p.network;
    const auto& nodes = net.nodes();
    const std::span<const T> params(p.values);
    for (auto& st : ws.nodes) st.grad_output.assign(st.output.size(), T(0));

    const std::size_t out_k = net.output_node();
    auto& top = ws.nodes[out_k];
    const std::size_t hw0 = top.h * top.w;
    const std::size_t c0 = nodes[out_k].conv2.out;
    T gb = 0;
    for (std::size_t i = 0; i < hw0; ++i) gb += grad_logits[i];
    grad[net.head_bias_offset()] += gb;
    for (std::size_t c = 0; c < c0; ++c) {
        const T wc = params[net.head_weight_offset() + c];
        const T* act = top.output.data() + c * hw0;
        T* g = top.grad_output.data() + c * hw0;
        T acc = 0;
        for (std::size_t i = 0; i < hw0; ++i) {
            acc += grad_logits[i] * act[i];
            g[i] += wc * grad_logits[i];
        }
        grad[net.head_weight_offset() + c] += acc;
    }

    for (std::size_t k = nodes.size(); k-- > 0;) {
        const Node& n = nodes[k];
        auto& st = ws.nodes[k];
        const std::size_t hw = st.h * st.w;
        auto& g_out = st.grad_output;
        for (std::size_t i = 0; i < g_out.size(); ++i)
            if (!(st.output[i] > T(0))) g_out[i] = T(0);

        kernels::conv3x3_backward<T>(st.hidden_padded, n.conv2.in, st.h, st.w,
                                     params.subspan(n.conv2.weight_offset, n.conv2.weight_count()), n.conv2.out,
                                     g_out, grad.subspan(n.conv2.weight_offset, n.conv2.weight_count()),
                                     grad.subspan(n.conv2.bias_offset, n.conv2.out), ws.scratch_grad);
        // unpad + relu mask of the hidden layer
        auto& g_hidden = ws.scratch_grad2;
        g_hidden.resize(n.conv1.out * hw);
        const std::size_t pw = st.w + 2, plane = (st.h + 2) * pw;
        for (std::size_t c = 0; c < n.conv1.out; ++c)
            for (std::size_t y = 0; y < st.h; ++y)
                for (std::size_t x = 0; x < st.w; ++x) {
                    const std::size_t i = (c * st.h + y) * st.w + x;
                    g_hidden[i] = st.hidden[i] > T(0) ? ws.scratch_grad[c * plane + (y + 1) * pw + x + 1] : T(0);
                }
        kernels::conv3x3_backward<T>(st.input_padded, n.conv1.in, st.h, st.w,
                                     params.subspan(n.conv1.weight_offset, n.conv1.weight_count()), n.conv1.out,
                                     g_hidden, grad.subspan(n.conv1.weight_offset, n.conv1.weight_count()),
                                     grad.subspan(n.conv1.bias_offset, n.conv1.out), ws.scratch_grad);
        const auto& g_in = ws.scratch_grad;  // padded gradient of the concatenated input
        auto in_grad = [&](std::size_t c, std::size_t y, std::size_t x) {
            return g_in[c * plane + (y + 1) * pw + x + 1];
        };

        if (n.column == 0 && n.level == 0) continue;
        if (n.column == 0) {
            auto& src = ws.nodes[static_cast<std::size_t>(n.pooled)];
            for (std::size_t c = 0; c < n.conv1.in; ++c)
                for (std::size_t y = 0; y < st.h; ++y)
                    for (std::size_t x = 0; x < st.w; ++x)
                        src.grad_output[st.pool_argmax[(c * st.h + y) * st.w + x]] += in_grad(c, y, x);
            continue;
        }
        std::size_t ch = 0;
        for (std::size_t s : n.skips) {
            auto& src = ws.nodes[s];
            const std::size_t sc = nodes[s].conv2.out;
            for (std::size_t c = 0; c < sc; ++c)
                for (std::size_t y = 0; y < st.h; ++y)
                    for (std::size_t x = 0; x < st.w; ++x) src.grad_output[(c * st.h + y) * st.w + x] += in_grad(ch + c, y, x);
            ch += sc;
        }
        auto& b = ws.nodes[static_cast<std::size_t>(n.below)];
        const std::size_t bc = nodes[static_cast<std::size_t>(n.below)].conv2.out;
        for (std::size_t c = 0; c < bc; ++c)
            for (std::size_t y = 0; y < st.h; ++y)
                for (std::size_t x = 0; x < st.w; ++x)
                    b.grad_output[(c * b.h + y / 2) * b.w + x / 2] += in_grad(ch + c, y, x);
    }
}

inline constexpr double bce_epsilon = 1e-7;

/// Sum over pixels of -[w y ln p + (1-w)(1-y) ln(1-p)] with p clamped to
/// [eps, 1-eps]. Returns the sum; callers divide by the pixel count.
template <typename T>
double weighted_bce_sum(std::span<const T> probs, std::span<const std::uint8_t> masks, double w)
{
    if (probs.size() != masks.size())
        throw ValidationError("weighted_bce: shape mismatch");
    double loss = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const double p = std::clamp(static_cast<double>(probs[i]), bce_epsilon, 1.0 - bce_epsilon);
        loss -= masks[i] ? w * std::log(p) : (1.0 - w) * std::log(1.0 - p);
    }
    return loss;
}

/// Mean weighted BCE over all pixels.
template <typename T>
double weighted_bce(std::span<const T> probs, std::span<const std::uint8_t> masks, double w)
{
    if (probs.empty()) return 0.0;
    return weighted_bce_sum(probs, masks, w) / static_cast<double>(probs.size());
}

/// d(loss)/d(logit) for each pixel, scaled by 1/normalizer. The clamp only
/// guards the logarithm; saturated pixels keep the unclamped gradient so a
/// confidently wrong prediction can still recover.
template <typename T>
void weighted_bce_logit_grad(std::span<const T> probs, std::span<const std::uint8_t> masks, double w,
                             double normalizer, std::span<T> out)
{
    const double inv = 1.0 / normalizer;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const double p = static_cast<double>(probs[i]);
        const double g = masks[i] ? -w * (1.0 - p) : (1.0 - w) * p;
        out[i] = static_cast<T>(g * inv);
    }
}

/// A batch of same-sized images (B x h x w), row-major.
template <typename T>
struct Batch {
    std::size_t count = 0, h = 0, w = 0;
    std::vector<T> images;
    std::vector<std::uint8_t> masks;  // may be empty for inference

    [[nodiscard]] std::span<const T> image(std::size_t b) const
    {
        return std::span<const T>(images).subspan(b * h * w, h * w);
    }
    [[nodiscard]] std::span<const std::uint8_t> mask(std::size_t b) const
    {
        return std::span<const std::uint8_t>(masks).subspan(b * h * w, h * w);
    }
};

template <typename T>
void check_batch(const ModelParams<T>& p, const Batch<T>& batch, bool need_masks)
{
    if (batch.h != batch.w)
        throw ValidationError("input must be square, got " + std::to_string(batch.h) + "x" + std::to_string(batch.w));
    p.network.topology().validate(batch.h);
    if (batch.images.size() != batch.count * batch.h * batch.w)
        throw ValidationError("batch image buffer does not match its shape");
    if (need_masks && batch.masks.size() != batch.images.size())
        throw ValidationError("batch masks do not match the image shape");
    if (p.values.size() != p.network.param_count())
        throw ValidationError("parameter vector does not match the topology");
}

/// Probabilities for each image, B x h x w.
template <typename T>
std::vector<T> forward(const ModelParams<T>& p, const Batch<T>& batch)
{
    check_batch(p, batch, false);
    Workspace<T> ws;
    std::vector<T> out(batch.images.size());
    for (std::size_t b = 0; b < batch.count; ++b) {
        forward_sample(p, batch.image(b), batch.h, batch.w, ws);
        std::copy(ws.probs.begin(), ws.probs.end(), out.begin() + static_cast<std::ptrdiff_t>(b * batch.h * batch.w));
    }
    return out;
}

template <typename T>
struct GradientResult {
    double loss = 0;          // mean weighted BCE over the batch
    std::vector<T> grad;      // same layout as ModelParams::values
};

/// Exact gradient of the mean weighted BCE of forward(p, batch).
template <typename T>
GradientResult<T> gradients(const ModelParams<T>& p, const Batch<T>& batch, double pos_weight, Workspace<T>& ws)
{
    check_batch(p, batch, true);
    GradientResult<T> r;
    r.grad.assign(p.values.size(), T(0));
    const std::size_t hw = batch.h * batch.w;
    const double normalizer = static_cast<double>(batch.count * hw);
    std::vector<T> dz(hw);
    for (std::size_t b = 0; b < batch.count; ++b) {
        forward_sample(p, batch.image(b), batch.h, batch.w, ws);
        r.loss += weighted_bce_sum<T>(ws.probs, batch.mask(b), pos_weight);
        weighted_bce_logit_grad<T>(ws.probs, batch.mask(b), pos_weight, normalizer, dz);
        backward_sample<T>(p, dz, ws, r.grad);
    }
    r.loss /= normalizer;
    return r;
}

template <typename T>
GradientResult<T> gradients(const ModelParams<T>& p, const Batch<T>& batch, double pos_weight)
{
    Workspace<T> ws;
    return gradients(p, batch, pos_weight, ws);
}

} // namespace msgen::segnet
