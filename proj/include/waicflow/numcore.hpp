#pragma once

// Small deterministic numerics: a row-major matrix, a seeded RNG, a
// three-layer ReLU perceptron with hand-written backprop and Adam.
// Everything is double precision.

#include <array>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace waicflow {

using Vector = std::vector<double>;

class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }

    Matrix transposed() const;
    /// Rows picked in the given order (duplicates allowed).
    Matrix select_rows(std::span<const std::size_t> indices) const;
    /// Contiguous column range [first, first + count).
    Matrix col_block(std::size_t first, std::size_t count) const;

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// Seeded generator. Same seed and same call sequence give the same stream.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t next_u64() { return engine_(); }
    /// Uniform on [0, 1).
    double uniform() { return std::generate_canonical<double, 53>(engine_); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    double normal() { return normal_(engine_); }

    /// Uniformly random permutation of 0..n-1.
    std::vector<std::size_t> permutation(std::size_t n);

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

/// splitmix64 finalizer over a ^ b; derives well-spread child seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) noexcept;

/// fan_in x fan_out weights are drawn i.i.d. N(0, 1/fan_in); the returned
/// matrix is fan_out x fan_in (row = output unit).
Matrix gaussian_init(Rng& rng, std::size_t fan_in, std::size_t fan_out);

inline double relu(double v) noexcept { return v > 0.0 ? v : 0.0; }
/// Subgradient convention: relu'(0) = 0.
inline double relu_grad(double pre_activation) noexcept { return pre_activation > 0.0 ? 1.0 : 0.0; }

struct DenseLayer {
    Matrix weight;  // out x in
    Vector bias;    // out

    bool operator==(const DenseLayer&) const = default;
};

/// Fully connected net with exactly three weight layers:
/// out = W3 relu(W2 relu(W1 x + b1) + b2) + b3.
class Mlp {
public:
    static constexpr std::size_t kDepth = 3;

    Mlp() = default;
    explicit Mlp(std::array<DenseLayer, kDepth> layers);

    static Mlp zeros(std::size_t in, std::size_t hidden, std::size_t out);
    static Mlp gaussian(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng);

    std::size_t input_dim() const { return layers_[0].weight.cols(); }
    std::size_t output_dim() const { return layers_[kDepth - 1].weight.rows(); }
    std::size_t hidden_dim() const { return layers_[0].weight.rows(); }

    const std::array<DenseLayer, kDepth>& layers() const noexcept { return layers_; }
    DenseLayer& layer(std::size_t k) { return layers_.at(k); }
    const DenseLayer& layer(std::size_t k) const { return layers_.at(k); }

    /// Flattened order: W1 (row-major), b1, W2, b2, W3, b3.
    std::size_t param_count() const;
    Vector flatten() const;
    void flatten_into(std::span<double> out) const;
    void assign(std::span<const double> params);

    bool operator==(const Mlp&) const = default;

private:
    std::array<DenseLayer, kDepth> layers_;
};

struct MlpCache {
    Matrix input;                                // batch x in
    std::array<Matrix, Mlp::kDepth> pre_activations;  // last one is the output
};

struct MlpBatchResult {
    Matrix output;
    MlpCache cache;
};

struct MlpResult {
    Vector output;
    MlpCache cache;
};

struct MlpGradients {
    Vector params;  // same layout as Mlp::flatten(), summed over the batch
    Matrix input;   // batch x in
};

/// Row-wise forward pass over a batch (one sample per row).
MlpBatchResult mlp_forward(const Mlp& net, const Matrix& inputs);
MlpResult mlp_forward(const Mlp& net, std::span<const double> input);

/// Backprop of upstream dL/d(output) (batch x out) through a cached pass.
MlpGradients mlp_backward(const Mlp& net, const MlpCache& cache, const Matrix& upstream);
MlpGradients mlp_backward(const Mlp& net, const MlpCache& cache, std::span<const double> upstream);

/// Allocation-light variant used by training: adds parameter gradients into
/// `param_grads` and writes input gradients into `input_grads` if non-null.
void mlp_backward_accumulate(const Mlp& net, const MlpCache& cache, const Matrix& upstream,
                             std::span<double> param_grads, Matrix* input_grads);

struct AdamHyper {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

class AdamState {
public:
    AdamState() = default;
    AdamState(std::size_t n_params, AdamHyper hyper)
        : hyper(hyper), first_moment(n_params, 0.0), second_moment(n_params, 0.0) {}

    std::uint64_t step_count() const noexcept { return step_; }

    AdamHyper hyper;
    Vector first_moment;
    Vector second_moment;

private:
    friend void adam_step(AdamState&, std::span<double>, std::span<const double>);
    std::uint64_t step_ = 0;
};

/// Bias-corrected Adam update in place. Throws TrainingError naming the
/// first non-finite gradient component; nothing is modified in that case.
void adam_step(AdamState& state, std::span<double> params, std::span<const double> grads);

}  // namespace waicflow
