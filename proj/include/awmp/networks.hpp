#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "awmp/autodiff.hpp"
#include "awmp/rng.hpp"
#include "awmp/tensor.hpp"

namespace awmp {

constexpr double kLogStdMin = -20.0;
constexpr double kLogStdMax = 2.0;

/// Output head interpretation of the final linear layer.
enum class Head {
    linear,         // Q(s,a) and V(s): raw value(s)
    gaussian,       // policy: columns are [mean | log_std] per component,
                    // log_std clamped to [kLogStdMin, kLogStdMax]
    softmax,        // prior network: probabilities over components
};

/// Fully-connected ReLU network. Weights are stored as [in, out] matrices so
/// a batch forward is a plain row-major matmul chain.
struct MlpParams {
    std::vector<Tensor> weights;
    std::vector<Tensor> biases;
    Head head = Head::linear;
    std::string name;

    std::size_t input_dim() const { return weights.front().shape()[0]; }
    std::size_t output_dim() const { return weights.back().shape()[1]; }
    std::size_t layer_count() const { return weights.size(); }

    /// Uniform fan-in init, final layer optionally scaled down (policy heads
    /// start near-deterministic around zero actions).
    static MlpParams make(std::string name, std::size_t in, const std::vector<std::size_t>& hidden,
                          std::size_t out, Head head, Rng& rng, double final_scale = 1.0) {
        MlpParams p;
        p.name = std::move(name);
        p.head = head;
        std::vector<std::size_t> dims;
        dims.push_back(in);
        for (std::size_t h : hidden) dims.push_back(h);
        dims.push_back(out);
        for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(dims[l]));
            const double s = (l + 2 == dims.size()) ? final_scale : 1.0;
            Tensor w = Tensor::zeros({dims[l], dims[l + 1]});
            for (std::size_t i = 0; i < w.size(); ++i) w[i] = s * rng.uniform(-bound, bound);
            Tensor b = Tensor::zeros({dims[l + 1]});
            for (std::size_t i = 0; i < b.size(); ++i) b[i] = s * rng.uniform(-bound, bound);
            p.weights.push_back(std::move(w));
            p.biases.push_back(std::move(b));
        }
        return p;
    }

    template <class F>
    void for_each_param(F f) {
        for (std::size_t l = 0; l < weights.size(); ++l) {
            f(weights[l]);
            f(biases[l]);
        }
    }
    template <class F>
    void for_each_param(F f) const {
        for (std::size_t l = 0; l < weights.size(); ++l) {
            f(weights[l]);
            f(biases[l]);
        }
    }

    std::size_t param_tensor_count() const { return 2 * weights.size(); }

    /// Batched forward on plain tensors, no tape. Input [B, in] -> [B, out].
    /// Hidden activations are ReLU; the head post-processing matches the
    /// tape path bit for bit (shared kernels).
    Tensor forward(const Tensor& x) const {
        if (x.rank() != 2 || x.shape()[1] != input_dim())
            throw std::invalid_argument(name + ": input width " + x.shape_str() + " != " +
                                        std::to_string(input_dim()));
        Tensor h = x;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            Tensor z = Tensor::zeros({h.shape()[0], weights[l].shape()[1]});
            matmul_accum(h.data(), weights[l].data(), z.data(), h.shape()[0], h.shape()[1],
                         weights[l].shape()[1]);
            const std::size_t N = z.shape()[1];
            for (std::size_t r = 0; r < z.shape()[0]; ++r)
                for (std::size_t j = 0; j < N; ++j) z(r, j) += biases[l][j];
            const bool last = (l + 1 == weights.size());
            if (!last)
                for (std::size_t i = 0; i < z.size(); ++i) z[i] = z[i] > 0.0 ? z[i] : 0.0;
            h = std::move(z);
        }
        apply_head_plain(h);
        return h;
    }

    std::vector<double> forward1(std::span<const double> x) const {
        Tensor in = Tensor::zeros({1, x.size()});
        std::copy(x.begin(), x.end(), in.data());
        Tensor out = forward(in);
        return std::vector<double>(out.data(), out.data() + out.size());
    }

    /// Registers every parameter tensor as a tape leaf (canonical order:
    /// w0, b0, w1, b1, ...). Leaves alias copies of the current values.
    std::vector<ad::Var> register_leaves(ad::Tape& tape, bool needs_grad = true) const {
        std::vector<ad::Var> leaves;
        for_each_param([&](const Tensor& t) { leaves.push_back(tape.leaf(t, needs_grad)); });
        return leaves;
    }

    /// Tape forward from registered leaves; mirrors forward().
    ad::Var forward_tape(ad::Tape& tape, const std::vector<ad::Var>& leaves, ad::Var x) const {
        ad::Var h = forward_tape_raw(tape, leaves, x);
        switch (head) {
            case Head::softmax: return tape.softmax_rows(h);
            case Head::gaussian: return clamp_log_std_tape(tape, h);
            default: return h;
        }
    }

    /// Tape forward up to the final linear layer, head untouched (losses
    /// that want log-softmax build it from these logits).
    ad::Var forward_tape_raw(ad::Tape& tape, const std::vector<ad::Var>& leaves, ad::Var x) const {
        ad::Var h = x;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            ad::Var z = tape.add(tape.matmul(h, leaves[2 * l]), leaves[2 * l + 1]);
            h = (l + 1 == weights.size()) ? z : tape.relu(z);
        }
        return h;
    }

    /// Gradients after backward, same order as register_leaves.
    std::vector<Tensor> collect_grads(const ad::Tape& tape,
                                      const std::vector<ad::Var>& leaves) const {
        std::vector<Tensor> g;
        g.reserve(leaves.size());
        for (ad::Var v : leaves) g.push_back(tape.grad(v));
        return g;
    }

private:
    void apply_head_plain(Tensor& z) const {
        switch (head) {
            case Head::softmax:
                softmax_rows_inplace(z.data(), z.shape()[0], z.shape()[1]);
                break;
            case Head::gaussian: {
                // second half of the columns are log-stds
                const std::size_t N = z.shape()[1];
                const std::size_t half = N / 2;
                for (std::size_t r = 0; r < z.shape()[0]; ++r)
                    for (std::size_t j = half; j < N; ++j)
                        z(r, j) = std::min(std::max(z(r, j), kLogStdMin), kLogStdMax);
                break;
            }
            default: break;
        }
    }

    ad::Var clamp_log_std_tape(ad::Tape& tape, ad::Var z) const {
        const std::size_t N = tape.value(z).shape()[1];
        const std::size_t half = N / 2;
        ad::Var means = tape.slice_cols(z, 0, half);
        ad::Var logstd = tape.clamp(tape.slice_cols(z, half, N), kLogStdMin, kLogStdMax);
        return tape.concat_cols({means, logstd});
    }
};

// --- Adam -------------------------------------------------------------------

/// Per-network Adam state; moments mirror the parameter tensor list.
struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    long step = 0;
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static AdamState make(const MlpParams& p, double lr = 3e-4) {
        AdamState s;
        s.lr = lr;
        p.for_each_param([&](const Tensor& t) {
            s.m.push_back(Tensor::zeros(t.shape()));
            s.v.push_back(Tensor::zeros(t.shape()));
        });
        return s;
    }
};

/// Standard Adam with bias correction. Throws on non-finite gradients,
/// naming the network.
inline void adam_step(AdamState& st, MlpParams& params, const std::vector<Tensor>& grads) {
    if (grads.size() != st.m.size())
        throw std::invalid_argument(params.name + ": adam_step gradient count mismatch");
    st.step += 1;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    std::size_t k = 0;
    params.for_each_param([&](Tensor& t) {
        const Tensor& g = grads[k];
        if (!g.all_finite())
            throw std::runtime_error("non-finite gradient in network '" + params.name + "'");
        Tensor& m = st.m[k];
        Tensor& v = st.v[k];
        for (std::size_t i = 0; i < t.size(); ++i) {
            m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g[i];
            v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            t[i] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
        }
        ++k;
    });
}

// --- target network tracking -------------------------------------------------

/// target <- tau * online + (1 - tau) * target, elementwise.
inline void polyak_update(const MlpParams& online, MlpParams& target, double tau) {
    if (tau <= 0.0 || tau > 1.0) throw std::invalid_argument("polyak_update: tau out of (0,1]");
    for (std::size_t l = 0; l < online.weights.size(); ++l) {
        for (std::size_t i = 0; i < online.weights[l].size(); ++i)
            target.weights[l][i] = tau * online.weights[l][i] + (1.0 - tau) * target.weights[l][i];
        for (std::size_t i = 0; i < online.biases[l].size(); ++i)
            target.biases[l][i] = tau * online.biases[l][i] + (1.0 - tau) * target.biases[l][i];
    }
}

/// Online/target pair with its smoothing constant.
struct TargetPair {
    MlpParams online;
    MlpParams target;
    double tau = 0.005;

    static TargetPair make(MlpParams params, double tau) {
        TargetPair p;
        p.target = params;  // exact copy at start
        p.online = std::move(params);
        p.tau = tau;
        return p;
    }

    void update() { polyak_update(online, target, tau); }
};

// --- checkpoint format --------------------------------------------------------
//
// Flat little-endian binary layout, see docs/file_formats.md:
//   magic "AWMPCKPT" | u32 version(=1) | u32 network count
//   per network: u32 name length | name bytes | u8 head | u32 tensor count
//     per tensor: u32 rank | u64 dims... | f64 data (row-major)

namespace detail {
inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}
inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}
inline std::uint64_t get_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}
inline void put_f64(std::ostream& os, double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, 8);
    put_u64(os, v);
}
inline double get_f64(std::istream& is) {
    std::uint64_t v = get_u64(is);
    double d;
    std::memcpy(&d, &v, 8);
    return d;
}
}  // namespace detail

inline void save_networks(std::ostream& os, const std::vector<const MlpParams*>& nets) {
    os.write("AWMPCKPT", 8);
    detail::put_u32(os, 1);
    detail::put_u32(os, static_cast<std::uint32_t>(nets.size()));
    for (const MlpParams* net : nets) {
        detail::put_u32(os, static_cast<std::uint32_t>(net->name.size()));
        os.write(net->name.data(), static_cast<std::streamsize>(net->name.size()));
        const unsigned char head = static_cast<unsigned char>(net->head);
        os.write(reinterpret_cast<const char*>(&head), 1);
        detail::put_u32(os, static_cast<std::uint32_t>(net->param_tensor_count()));
        net->for_each_param([&](const Tensor& t) {
            detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
            for (std::size_t d : t.shape()) detail::put_u64(os, d);
            for (std::size_t i = 0; i < t.size(); ++i) detail::put_f64(os, t[i]);
        });
    }
}

inline std::vector<MlpParams> load_networks(std::istream& is) {
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, "AWMPCKPT", 8) != 0)
        throw std::runtime_error("checkpoint: bad magic");
    const std::uint32_t version = detail::get_u32(is);
    if (version != 1) throw std::runtime_error("checkpoint: unsupported version");
    const std::uint32_t count = detail::get_u32(is);
    std::vector<MlpParams> nets;
    for (std::uint32_t n = 0; n < count; ++n) {
        MlpParams p;
        const std::uint32_t name_len = detail::get_u32(is);
        p.name.resize(name_len);
        is.read(p.name.data(), name_len);
        unsigned char head;
        is.read(reinterpret_cast<char*>(&head), 1);
        p.head = static_cast<Head>(head);
        const std::uint32_t tcount = detail::get_u32(is);
        std::vector<Tensor> tensors;
        for (std::uint32_t t = 0; t < tcount; ++t) {
            const std::uint32_t rank = detail::get_u32(is);
            std::vector<std::size_t> shape(rank);
            for (std::uint32_t d = 0; d < rank; ++d)
                shape[d] = static_cast<std::size_t>(detail::get_u64(is));
            Tensor ten = Tensor::zeros(shape);
            for (std::size_t i = 0; i < ten.size(); ++i) ten[i] = detail::get_f64(is);
            tensors.push_back(std::move(ten));
        }
        if (!is) throw std::runtime_error("checkpoint: truncated file");
        if (tensors.size() % 2 != 0) throw std::runtime_error("checkpoint: odd tensor count");
        for (std::size_t t = 0; t < tensors.size(); t += 2) {
            p.weights.push_back(std::move(tensors[t]));
            p.biases.push_back(std::move(tensors[t + 1]));
        }
        nets.push_back(std::move(p));
    }
    return nets;
}

inline void save_checkpoint(const std::string& path, const std::vector<const MlpParams*>& nets) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    save_networks(os, nets);
}

inline std::vector<MlpParams> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    return load_networks(is);
}

}  // namespace awmp
