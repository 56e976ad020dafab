#include "waicflow/numcore.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <string>

#include "waicflow/errors.hpp"

namespace waicflow {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw ShapeError("matrix data has " + std::to_string(data_.size()) + " values, expected " +
                         std::to_string(rows_ * cols_));
    }
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r) {
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    }
    return t;
}

Matrix Matrix::select_rows(std::span<const std::size_t> indices) const {
    Matrix out(indices.size(), cols_);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        auto src = row(indices[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

Matrix Matrix::col_block(std::size_t first, std::size_t count) const {
    if (first + count > cols_) throw ShapeError("column block out of range");
    Matrix out(rows_, count);
    for (std::size_t r = 0; r < rows_; ++r) {
        auto src = row(r).subspan(first, count);
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return out;
}

std::vector<std::size_t> Rng::permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), std::size_t{0});
    // Fisher-Yates driven by our own stream so the result does not depend on
    // the standard library's shuffle algorithm.
    for (std::size_t i = n; i > 1; --i) {
        const auto j = static_cast<std::size_t>(next_u64() % i);
        std::swap(p[i - 1], p[j]);
    }
    return p;
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) noexcept {
    std::uint64_t z = (a ^ b) + 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

Matrix gaussian_init(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
    if (fan_in == 0 || fan_out == 0) throw ArchitectureError("layer with zero fan-in or fan-out");
    const double sd = std::sqrt(1.0 / static_cast<double>(fan_in));
    Matrix w(fan_out, fan_in);
    for (double& v : w.values()) v = sd * rng.normal();
    return w;
}

// ---------------------------------------------------------------------------
// Mlp

Mlp::Mlp(std::array<DenseLayer, kDepth> layers) : layers_(std::move(layers)) {
    for (std::size_t k = 0; k < kDepth; ++k) {
        const auto& l = layers_[k];
        if (l.weight.rows() == 0 || l.weight.cols() == 0) {
            throw ArchitectureError("layer " + std::to_string(k) + " has an empty weight matrix");
        }
        if (l.bias.size() != l.weight.rows()) {
            throw ShapeError("layer " + std::to_string(k) + ": bias length " + std::to_string(l.bias.size()) +
                             " != out dim " + std::to_string(l.weight.rows()));
        }
        if (k > 0 && layers_[k - 1].weight.rows() != l.weight.cols()) {
            throw ShapeError("layer " + std::to_string(k) + ": in dim " + std::to_string(l.weight.cols()) +
                             " != previous out dim " + std::to_string(layers_[k - 1].weight.rows()));
        }
    }
}

Mlp Mlp::zeros(std::size_t in, std::size_t hidden, std::size_t out) {
    if (in == 0 || hidden == 0 || out == 0) throw ArchitectureError("zero-width layer");
    return Mlp({DenseLayer{Matrix(hidden, in), Vector(hidden, 0.0)},
                DenseLayer{Matrix(hidden, hidden), Vector(hidden, 0.0)},
                DenseLayer{Matrix(out, hidden), Vector(out, 0.0)}});
}

Mlp Mlp::gaussian(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) {
    auto w1 = gaussian_init(rng, in, hidden);
    auto w2 = gaussian_init(rng, hidden, hidden);
    auto w3 = gaussian_init(rng, hidden, out);
    return Mlp({DenseLayer{std::move(w1), Vector(hidden, 0.0)},
                DenseLayer{std::move(w2), Vector(hidden, 0.0)},
                DenseLayer{std::move(w3), Vector(out, 0.0)}});
}

std::size_t Mlp::param_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weight.size() + l.bias.size();
    return n;
}

Vector Mlp::flatten() const {
    Vector out(param_count());
    flatten_into(out);
    return out;
}

void Mlp::flatten_into(std::span<double> out) const {
    if (out.size() != param_count()) throw ShapeError("flatten target has wrong length");
    auto it = out.begin();
    for (const auto& l : layers_) {
        it = std::copy(l.weight.values().begin(), l.weight.values().end(), it);
        it = std::copy(l.bias.begin(), l.bias.end(), it);
    }
}

void Mlp::assign(std::span<const double> params) {
    if (params.size() != param_count()) {
        throw ShapeError("parameter vector has " + std::to_string(params.size()) + " values, net needs " +
                         std::to_string(param_count()));
    }
    auto it = params.begin();
    for (auto& l : layers_) {
        auto w = l.weight.values();
        std::copy(it, it + static_cast<std::ptrdiff_t>(w.size()), w.begin());
        it += static_cast<std::ptrdiff_t>(w.size());
        std::copy(it, it + static_cast<std::ptrdiff_t>(l.bias.size()), l.bias.begin());
        it += static_cast<std::ptrdiff_t>(l.bias.size());
    }
}

// ---------------------------------------------------------------------------
// Kernels. C (m x n, row-major) += A * B with A addressed through strides so
// a transposed operand needs no copy, and B row-major (k x n). The k loop is
// always ascending, so results do not depend on blocking.

namespace {

struct StridedView {
    const double* data;
    std::size_t row_stride;  // step in i
    std::size_t col_stride;  // step in k
    double operator()(std::size_t i, std::size_t k) const { return data[i * row_stride + k * col_stride]; }
};

constexpr std::size_t kMr = 4;
constexpr std::size_t kNr = 8;
constexpr std::size_t kLaneWidth = 4;
constexpr std::size_t kLanes = kNr / kLaneWidth;

typedef double Lane __attribute__((vector_size(kLaneWidth * sizeof(double))));

inline Lane load_lane(const double* p) {
    Lane v;
    std::memcpy(&v, p, sizeof(Lane));
    return v;
}

inline void store_lane(double* p, Lane v) { std::memcpy(p, &v, sizeof(Lane)); }

void gemm_accumulate(std::size_t m, std::size_t n, std::size_t k, StridedView a, const double* b, std::size_t ldb,
                     double* c, std::size_t ldc) {
    const std::size_t m_main = m - m % kMr;
    const std::size_t n_main = n - n % kNr;
    for (std::size_t i0 = 0; i0 < m_main; i0 += kMr) {
        for (std::size_t j0 = 0; j0 < n_main; j0 += kNr) {
            Lane acc[kMr][kLanes];
            for (std::size_t r = 0; r < kMr; ++r) {
                for (std::size_t v = 0; v < kLanes; ++v) acc[r][v] = load_lane(c + (i0 + r) * ldc + j0 + v * kLaneWidth);
            }
            for (std::size_t kk = 0; kk < k; ++kk) {
                const double* brow = b + kk * ldb + j0;
                Lane bv[kLanes];
                for (std::size_t v = 0; v < kLanes; ++v) bv[v] = load_lane(brow + v * kLaneWidth);
                for (std::size_t r = 0; r < kMr; ++r) {
                    const double av = a(i0 + r, kk);
                    for (std::size_t v = 0; v < kLanes; ++v) acc[r][v] += av * bv[v];
                }
            }
            for (std::size_t r = 0; r < kMr; ++r) {
                for (std::size_t v = 0; v < kLanes; ++v) store_lane(c + (i0 + r) * ldc + j0 + v * kLaneWidth, acc[r][v]);
            }
        }
        for (std::size_t r = 0; r < kMr; ++r) {
            for (std::size_t j = n_main; j < n; ++j) {
                double acc = c[(i0 + r) * ldc + j];
                for (std::size_t kk = 0; kk < k; ++kk) acc += a(i0 + r, kk) * b[kk * ldb + j];
                c[(i0 + r) * ldc + j] = acc;
            }
        }
    }
    for (std::size_t i = m_main; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = c[i * ldc + j];
            for (std::size_t kk = 0; kk < k; ++kk) acc += a(i, kk) * b[kk * ldb + j];
            c[i * ldc + j] = acc;
        }
    }
}

Matrix relu_of(const Matrix& pre) {
    Matrix out = pre;
    for (double& v : out.values()) v = relu(v);
    return out;
}

// out = in * W^T + b.
void dense_forward(const Matrix& in, const DenseLayer& layer, Matrix& out) {
    const std::size_t n_in = layer.weight.cols();
    const std::size_t n_out = layer.weight.rows();
    out = Matrix(in.rows(), n_out);
    for (std::size_t r = 0; r < in.rows(); ++r) std::copy(layer.bias.begin(), layer.bias.end(), out.row(r).begin());
    const Matrix wt = layer.weight.transposed();
    gemm_accumulate(in.rows(), n_out, n_in, StridedView{in.values().data(), n_in, 1}, wt.values().data(), n_out,
                    out.values().data(), n_out);
}

}  // namespace

MlpBatchResult mlp_forward(const Mlp& net, const Matrix& inputs) {
    if (inputs.cols() != net.input_dim()) {
        throw ShapeError("mlp_forward: layer 0 expects input dim " + std::to_string(net.input_dim()) + ", got " +
                         std::to_string(inputs.cols()));
    }
    MlpBatchResult res;
    res.cache.input = inputs;
    dense_forward(inputs, net.layer(0), res.cache.pre_activations[0]);
    for (std::size_t k = 1; k < Mlp::kDepth; ++k) {
        dense_forward(relu_of(res.cache.pre_activations[k - 1]), net.layer(k), res.cache.pre_activations[k]);
    }
    res.output = res.cache.pre_activations[Mlp::kDepth - 1];
    return res;
}

MlpResult mlp_forward(const Mlp& net, std::span<const double> input) {
    Matrix x(1, input.size(), Vector(input.begin(), input.end()));
    auto batch = mlp_forward(net, x);
    auto out = batch.output.values();
    return {Vector(out.begin(), out.end()), std::move(batch.cache)};
}

void mlp_backward_accumulate(const Mlp& net, const MlpCache& cache, const Matrix& upstream,
                             std::span<double> param_grads, Matrix* input_grads) {
    const std::size_t batch = cache.input.rows();
    if (cache.input.cols() != net.input_dim()) throw ShapeError("mlp_backward: cache input does not match layer 0");
    for (std::size_t k = 0; k < Mlp::kDepth; ++k) {
        const auto& pa = cache.pre_activations[k];
        if (pa.rows() != batch || pa.cols() != net.layer(k).weight.rows()) {
            throw ShapeError("mlp_backward: cache does not match layer " + std::to_string(k));
        }
    }
    if (upstream.rows() != batch || upstream.cols() != net.output_dim()) {
        throw ShapeError("mlp_backward: upstream gradient shape does not match layer 2 output");
    }
    if (param_grads.size() != net.param_count()) throw ShapeError("mlp_backward: gradient buffer has wrong length");

    // Offsets of each layer's block in the flattened layout.
    std::array<std::size_t, Mlp::kDepth> offset{};
    for (std::size_t k = 1; k < Mlp::kDepth; ++k) {
        offset[k] = offset[k - 1] + net.layer(k - 1).weight.size() + net.layer(k - 1).bias.size();
    }

    Matrix delta = upstream;  // dL/d(pre-activation) of the current layer
    for (std::size_t kk = Mlp::kDepth; kk-- > 0;) {
        const auto& l = net.layer(kk);
        const std::size_t n_out = l.weight.rows();
        const std::size_t n_in = l.weight.cols();
        const Matrix act = kk == 0 ? cache.input : relu_of(cache.pre_activations[kk - 1]);
        double* gw = param_grads.data() + offset[kk];
        double* gb = gw + l.weight.size();

        // dW += delta^T * act, db += column sums of delta.
        gemm_accumulate(n_out, n_in, batch, StridedView{delta.values().data(), 1, n_out}, act.values().data(), n_in,
                        gw, n_in);
        for (std::size_t b = 0; b < batch; ++b) {
            const double* d = delta.row(b).data();
            for (std::size_t o = 0; o < n_out; ++o) gb[o] += d[o];
        }

        if (kk == 0 && input_grads == nullptr) break;
        // d(input) = delta * W, masked by the ReLU derivative below layer 0.
        Matrix next(batch, n_in);
        gemm_accumulate(batch, n_in, n_out, StridedView{delta.values().data(), n_out, 1}, l.weight.values().data(),
                        n_in, next.values().data(), n_in);
        if (kk == 0) {
            *input_grads = std::move(next);
        } else {
            const auto& pre = cache.pre_activations[kk - 1];
            auto nv = next.values();
            auto pv = pre.values();
            for (std::size_t i = 0; i < nv.size(); ++i) nv[i] *= relu_grad(pv[i]);
            delta = std::move(next);
        }
    }
}

MlpGradients mlp_backward(const Mlp& net, const MlpCache& cache, const Matrix& upstream) {
    MlpGradients g{Vector(net.param_count(), 0.0), Matrix()};
    mlp_backward_accumulate(net, cache, upstream, g.params, &g.input);
    return g;
}

MlpGradients mlp_backward(const Mlp& net, const MlpCache& cache, std::span<const double> upstream) {
    Matrix up(1, upstream.size(), Vector(upstream.begin(), upstream.end()));
    return mlp_backward(net, cache, up);
}

// ---------------------------------------------------------------------------
// Adam

void adam_step(AdamState& state, std::span<double> params, std::span<const double> grads) {
    const std::size_t n = params.size();
    if (grads.size() != n || state.first_moment.size() != n || state.second_moment.size() != n) {
        throw ShapeError("adam_step: params, grads and moments must have equal length");
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(grads[i])) {
            throw TrainingError("adam_step: non-finite gradient at component " + std::to_string(i), i);
        }
    }
    const auto& h = state.hyper;
    state.step_ += 1;
    const double t = static_cast<double>(state.step_);
    const double bc1 = 1.0 - std::pow(h.beta1, t);
    const double bc2 = 1.0 - std::pow(h.beta2, t);
    double* m = state.first_moment.data();
    double* v = state.second_moment.data();
    for (std::size_t i = 0; i < n; ++i) {
        const double g = grads[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        const double m_hat = m[i] / bc1;
        const double v_hat = v[i] / bc2;
        params[i] -= h.learning_rate * m_hat / (std::sqrt(v_hat) + h.epsilon);
    }
}

}  // namespace waicflow
