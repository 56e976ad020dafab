#pragma once

// Invertible network built from single-sided affine coupling blocks, each
// followed by a fixed permutation. Latent prior is N(0, I_n).

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "waicflow/numcore.hpp"

namespace waicflow {

struct FlowConfig {
    std::size_t input_dim = 8;
    std::size_t n_blocks = 10;
    std::size_t hidden_width = 64;
    double clamp_alpha = 2.0;
};

/// y1 = x1, y2 = x2 * exp(s_hat(x1)) + t(x1) with the split at ceil(n/2) and
/// s_hat = alpha * tanh(s / alpha). The subnet emits (s, t) concatenated.
class CouplingBlock {
public:
    CouplingBlock(std::size_t dim, Mlp subnet, double clamp_alpha);

    std::size_t dim() const noexcept { return dim_; }
    std::size_t split() const noexcept { return (dim_ + 1) / 2; }
    std::size_t transformed() const noexcept { return dim_ - split(); }
    double clamp_alpha() const noexcept { return clamp_alpha_; }

    const Mlp& subnet() const noexcept { return subnet_; }
    Mlp& subnet() noexcept { return subnet_; }

    double clamp(double s) const;

    bool operator==(const CouplingBlock&) const = default;

private:
    std::size_t dim_;
    Mlp subnet_;
    double clamp_alpha_;
};

/// Fixed coordinate shuffle: out[i] = in[perm[i]].
class Permutation {
public:
    explicit Permutation(std::vector<std::size_t> perm);
    static Permutation identity(std::size_t n);
    static Permutation random(std::size_t n, Rng& rng);

    std::size_t size() const noexcept { return perm_.size(); }
    const std::vector<std::size_t>& indices() const noexcept { return perm_; }

    void apply(std::span<const double> in, std::span<double> out) const;
    void apply_inverse(std::span<const double> in, std::span<double> out) const;

    bool operator==(const Permutation&) const = default;

private:
    std::vector<std::size_t> perm_;
};

/// Fixed per-coordinate standardization u = (x - shift) / scale applied
/// before the first block. Identity unless fitted from training data.
struct InputScaling {
    Vector shift;
    Vector scale;

    static InputScaling identity(std::size_t n);
    static InputScaling fit(const Matrix& data);
    double log_det() const;
    bool operator==(const InputScaling&) const = default;
};

class FlowModel {
public:
    FlowModel(InputScaling scaling, std::vector<CouplingBlock> blocks, std::vector<Permutation> perms,
              std::uint64_t seed = 0);

    /// Gaussian-initialized subnets, seeded random permutations.
    static FlowModel random(const FlowConfig& config, std::uint64_t seed);
    /// All-zero subnets (each block is the identity). Permutations are
    /// seeded shuffles unless `identity_perms` is set.
    static FlowModel identity(const FlowConfig& config, std::uint64_t seed, bool identity_perms = false);

    std::size_t input_dim() const noexcept { return scaling_.shift.size(); }
    std::size_t n_blocks() const noexcept { return blocks_.size(); }
    std::size_t hidden_width() const { return blocks_.front().subnet().hidden_dim(); }
    double clamp_alpha() const { return blocks_.front().clamp_alpha(); }
    FlowConfig config() const;

    const std::vector<CouplingBlock>& blocks() const noexcept { return blocks_; }
    std::vector<CouplingBlock>& blocks() noexcept { return blocks_; }
    const std::vector<Permutation>& permutations() const noexcept { return perms_; }

    const InputScaling& scaling() const noexcept { return scaling_; }
    void set_scaling(InputScaling scaling);

    std::size_t param_count() const;
    Vector flatten() const;
    void flatten_into(std::span<double> out) const;
    void assign(std::span<const double> params);

    std::uint64_t seed() const noexcept { return seed_; }
    const std::vector<double>& loss_curve() const noexcept { return loss_curve_; }
    void set_loss_curve(std::vector<double> curve) { loss_curve_ = std::move(curve); }

    bool operator==(const FlowModel&) const = default;

private:
    InputScaling scaling_;
    std::vector<CouplingBlock> blocks_;
    std::vector<Permutation> perms_;
    std::uint64_t seed_ = 0;
    std::vector<double> loss_curve_;
};

struct CouplingResult {
    Vector y;
    double logdet = 0.0;
};

CouplingResult coupling_forward(const CouplingBlock& block, std::span<const double> x);
Vector coupling_inverse(const CouplingBlock& block, std::span<const double> y);

struct FlowResult {
    Vector z;
    double logdet = 0.0;  // includes the input scaling term
};

struct FlowBatchResult {
    Matrix z;
    Vector logdet;
};

FlowResult flow_forward(const FlowModel& model, std::span<const double> x);
FlowBatchResult flow_forward(const FlowModel& model, const Matrix& xs);
Vector flow_inverse(const FlowModel& model, std::span<const double> z);
Matrix flow_inverse(const FlowModel& model, const Matrix& zs);

/// log p(x) = -|f(x)|^2 / 2 - (n/2) log(2 pi) + log|det Jf(x)|.
double log_likelihood(const FlowModel& model, std::span<const double> x);
Vector log_likelihood(const FlowModel& model, const Matrix& xs);

struct LossAndGrad {
    double loss = 0.0;
    Vector grads;  // layout of FlowModel::flatten()
};

/// Mean negative log-likelihood over the rows of `batch` and its gradient
/// with respect to every subnet parameter.
LossAndGrad nll_loss_and_grad(const FlowModel& model, const Matrix& batch);

/// Draws latent N(0, I) rows and maps them back through the inverse flow.
Matrix sample(const FlowModel& model, Rng& rng, std::size_t count);

}  // namespace waicflow
