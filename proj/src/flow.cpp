#include "waicflow/flow.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "waicflow/errors.hpp"

namespace waicflow {

namespace {

bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

}  // namespace

// ---------------------------------------------------------------------------
// CouplingBlock / Permutation / InputScaling

CouplingBlock::CouplingBlock(std::size_t dim, Mlp subnet, double clamp_alpha)
    : dim_(dim), subnet_(std::move(subnet)), clamp_alpha_(clamp_alpha) {
    if (dim_ < 2) throw ArchitectureError("coupling block needs dimension >= 2, got " + std::to_string(dim_));
    if (!(clamp_alpha_ > 0.0)) throw ArchitectureError("clamp_alpha must be positive");
    if (subnet_.input_dim() != split() || subnet_.output_dim() != 2 * transformed()) {
        throw ShapeError("coupling subnet must map " + std::to_string(split()) + " -> " +
                         std::to_string(2 * transformed()) + " values");
    }
}

double CouplingBlock::clamp(double s) const { return clamp_alpha_ * std::tanh(s / clamp_alpha_); }

Permutation::Permutation(std::vector<std::size_t> perm) : perm_(std::move(perm)) {
    std::vector<bool> seen(perm_.size(), false);
    for (auto p : perm_) {
        if (p >= perm_.size() || seen[p]) throw FormatError("permutation is not a bijection");
        seen[p] = true;
    }
}

Permutation Permutation::identity(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    return Permutation(std::move(p));
}

Permutation Permutation::random(std::size_t n, Rng& rng) { return Permutation(rng.permutation(n)); }

void Permutation::apply(std::span<const double> in, std::span<double> out) const {
    for (std::size_t i = 0; i < perm_.size(); ++i) out[i] = in[perm_[i]];
}

void Permutation::apply_inverse(std::span<const double> in, std::span<double> out) const {
    for (std::size_t i = 0; i < perm_.size(); ++i) out[perm_[i]] = in[i];
}

InputScaling InputScaling::identity(std::size_t n) { return {Vector(n, 0.0), Vector(n, 1.0)}; }

InputScaling InputScaling::fit(const Matrix& data) {
    if (data.rows() < 2) throw UsageError("input scaling needs at least two rows");
    const std::size_t n = data.cols();
    InputScaling s{Vector(n, 0.0), Vector(n, 0.0)};
    for (std::size_t r = 0; r < data.rows(); ++r) {
        for (std::size_t c = 0; c < n; ++c) s.shift[c] += data(r, c);
    }
    for (auto& m : s.shift) m /= static_cast<double>(data.rows());
    for (std::size_t r = 0; r < data.rows(); ++r) {
        for (std::size_t c = 0; c < n; ++c) {
            const double d = data(r, c) - s.shift[c];
            s.scale[c] += d * d;
        }
    }
    for (auto& v : s.scale) {
        v = std::sqrt(v / static_cast<double>(data.rows()));
        if (!(v > 0.0)) v = 1.0;  // constant column: leave unscaled
    }
    return s;
}

double InputScaling::log_det() const {
    double ld = 0.0;
    for (double s : scale) ld -= std::log(s);
    return ld;
}

// ---------------------------------------------------------------------------
// FlowModel

FlowModel::FlowModel(InputScaling scaling, std::vector<CouplingBlock> blocks, std::vector<Permutation> perms,
                     std::uint64_t seed)
    : scaling_(std::move(scaling)), blocks_(std::move(blocks)), perms_(std::move(perms)), seed_(seed) {
    const std::size_t n = scaling_.shift.size();
    if (scaling_.scale.size() != n) throw ShapeError("input scaling shift/scale length mismatch");
    if (blocks_.empty()) throw ArchitectureError("flow needs at least one coupling block");
    if (blocks_.size() != perms_.size()) throw ArchitectureError("every coupling block needs one permutation");
    for (std::size_t k = 0; k < blocks_.size(); ++k) {
        if (blocks_[k].dim() != n || perms_[k].size() != n) {
            throw ShapeError("block " + std::to_string(k) + " does not match input dim " + std::to_string(n));
        }
    }
    for (double s : scaling_.scale) {
        if (!(s > 0.0) || !std::isfinite(s)) throw DomainError("input scale must be positive and finite");
    }
}

FlowModel FlowModel::random(const FlowConfig& config, std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t n = config.input_dim;
    if (n < 2) throw ArchitectureError("flow input dim must be >= 2");
    const std::size_t h = (n + 1) / 2;
    std::vector<CouplingBlock> blocks;
    std::vector<Permutation> perms;
    for (std::size_t k = 0; k < config.n_blocks; ++k) {
        blocks.emplace_back(n, Mlp::gaussian(h, config.hidden_width, 2 * (n - h), rng), config.clamp_alpha);
        perms.push_back(Permutation::random(n, rng));
    }
    return FlowModel(InputScaling::identity(n), std::move(blocks), std::move(perms), seed);
}

FlowModel FlowModel::identity(const FlowConfig& config, std::uint64_t seed, bool identity_perms) {
    Rng rng(seed);
    const std::size_t n = config.input_dim;
    if (n < 2) throw ArchitectureError("flow input dim must be >= 2");
    const std::size_t h = (n + 1) / 2;
    std::vector<CouplingBlock> blocks;
    std::vector<Permutation> perms;
    for (std::size_t k = 0; k < config.n_blocks; ++k) {
        blocks.emplace_back(n, Mlp::zeros(h, config.hidden_width, 2 * (n - h)), config.clamp_alpha);
        perms.push_back(identity_perms ? Permutation::identity(n) : Permutation::random(n, rng));
    }
    return FlowModel(InputScaling::identity(n), std::move(blocks), std::move(perms), seed);
}

FlowConfig FlowModel::config() const { return {input_dim(), n_blocks(), hidden_width(), clamp_alpha()}; }

void FlowModel::set_scaling(InputScaling scaling) {
    if (scaling.shift.size() != input_dim() || scaling.scale.size() != input_dim()) {
        throw ShapeError("input scaling does not match model dim");
    }
    scaling_ = std::move(scaling);
}

std::size_t FlowModel::param_count() const {
    std::size_t n = 0;
    for (const auto& b : blocks_) n += b.subnet().param_count();
    return n;
}

Vector FlowModel::flatten() const {
    Vector out(param_count());
    flatten_into(out);
    return out;
}

void FlowModel::flatten_into(std::span<double> out) const {
    if (out.size() != param_count()) throw ShapeError("flatten target has wrong length");
    std::size_t off = 0;
    for (const auto& b : blocks_) {
        const auto k = b.subnet().param_count();
        b.subnet().flatten_into(out.subspan(off, k));
        off += k;
    }
}

void FlowModel::assign(std::span<const double> params) {
    if (params.size() != param_count()) throw ShapeError("parameter vector length does not match model");
    std::size_t off = 0;
    for (auto& b : blocks_) {
        const auto k = b.subnet().param_count();
        b.subnet().assign(params.subspan(off, k));
        off += k;
    }
}

// ---------------------------------------------------------------------------
// Coupling transforms (batch form; one sample per row)

namespace {

struct CouplingTrace {
    Matrix input;     // block input (batch x n)
    MlpCache subnet;  // subnet pass on the first half
    Matrix log_scale; // clamped s_hat (batch x m)
};

// Applies one block to `x` in place; returns per-row logdet added to `logdet`.
void coupling_apply(const CouplingBlock& block, Matrix& x, Vector& logdet, CouplingTrace* trace) {
    const std::size_t h = block.split();
    const std::size_t m = block.transformed();
    auto net = mlp_forward(block.subnet(), x.col_block(0, h));
    if (trace != nullptr) trace->input = x;
    Matrix log_scale(x.rows(), m);
    for (std::size_t b = 0; b < x.rows(); ++b) {
        auto out = net.output.row(b);
        auto row = x.row(b);
        double ld = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            const double s = block.clamp(out[j]);
            log_scale(b, j) = s;
            ld += s;
            row[h + j] = row[h + j] * std::exp(s) + out[m + j];
        }
        logdet[b] += ld;
    }
    if (trace != nullptr) {
        trace->subnet = std::move(net.cache);
        trace->log_scale = std::move(log_scale);
    }
}

void coupling_unapply(const CouplingBlock& block, Matrix& y) {
    const std::size_t h = block.split();
    const std::size_t m = block.transformed();
    auto net = mlp_forward(block.subnet(), y.col_block(0, h));
    for (std::size_t b = 0; b < y.rows(); ++b) {
        auto out = net.output.row(b);
        auto row = y.row(b);
        for (std::size_t j = 0; j < m; ++j) {
            row[h + j] = (row[h + j] - out[m + j]) * std::exp(-block.clamp(out[j]));
        }
    }
}

void permute_rows(const Permutation& p, Matrix& x) {
    Vector tmp(x.cols());
    for (std::size_t b = 0; b < x.rows(); ++b) {
        p.apply(x.row(b), tmp);
        std::copy(tmp.begin(), tmp.end(), x.row(b).begin());
    }
}

void unpermute_rows(const Permutation& p, Matrix& x) {
    Vector tmp(x.cols());
    for (std::size_t b = 0; b < x.rows(); ++b) {
        p.apply_inverse(x.row(b), tmp);
        std::copy(tmp.begin(), tmp.end(), x.row(b).begin());
    }
}

Matrix as_row(std::span<const double> v) { return Matrix(1, v.size(), Vector(v.begin(), v.end())); }

Vector row_vector(const Matrix& m, std::size_t r) { return Vector(m.row(r).begin(), m.row(r).end()); }

void scale_in(const InputScaling& s, Matrix& x) {
    for (std::size_t b = 0; b < x.rows(); ++b) {
        auto row = x.row(b);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] = (row[c] - s.shift[c]) / s.scale[c];
    }
}

void scale_out(const InputScaling& s, Matrix& x) {
    for (std::size_t b = 0; b < x.rows(); ++b) {
        auto row = x.row(b);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] = row[c] * s.scale[c] + s.shift[c];
    }
}

const double kLogTwoPi = std::log(2.0 * std::numbers::pi);

}  // namespace

CouplingResult coupling_forward(const CouplingBlock& block, std::span<const double> x) {
    if (x.size() != block.dim()) {
        throw ShapeError("coupling_forward: expected dim " + std::to_string(block.dim()) + ", got " +
                         std::to_string(x.size()));
    }
    Matrix m = as_row(x);
    Vector ld(1, 0.0);
    coupling_apply(block, m, ld, nullptr);
    return {row_vector(m, 0), ld[0]};
}

Vector coupling_inverse(const CouplingBlock& block, std::span<const double> y) {
    if (y.size() != block.dim()) throw ShapeError("coupling_inverse: dimension mismatch");
    if (!all_finite(y)) throw DomainError("coupling_inverse: non-finite input");
    Matrix m = as_row(y);
    coupling_unapply(block, m);
    return row_vector(m, 0);
}

FlowBatchResult flow_forward(const FlowModel& model, const Matrix& xs) {
    if (xs.cols() != model.input_dim()) {
        throw ShapeError("flow_forward: model dim " + std::to_string(model.input_dim()) + ", input dim " +
                         std::to_string(xs.cols()));
    }
    FlowBatchResult res{xs, Vector(xs.rows(), model.scaling().log_det())};
    scale_in(model.scaling(), res.z);
    for (std::size_t k = 0; k < model.n_blocks(); ++k) {
        coupling_apply(model.blocks()[k], res.z, res.logdet, nullptr);
        permute_rows(model.permutations()[k], res.z);
        if (!all_finite(res.z.values()) || !all_finite(res.logdet)) {
            throw LikelihoodError("non-finite value after coupling block " + std::to_string(k), k);
        }
    }
    return res;
}

FlowResult flow_forward(const FlowModel& model, std::span<const double> x) {
    auto r = flow_forward(model, as_row(x));
    return {row_vector(r.z, 0), r.logdet[0]};
}

Matrix flow_inverse(const FlowModel& model, const Matrix& zs) {
    if (zs.cols() != model.input_dim()) throw ShapeError("flow_inverse: dimension mismatch");
    if (!all_finite(zs.values())) throw DomainError("flow_inverse: non-finite input");
    Matrix x = zs;
    for (std::size_t k = model.n_blocks(); k-- > 0;) {
        unpermute_rows(model.permutations()[k], x);
        coupling_unapply(model.blocks()[k], x);
    }
    scale_out(model.scaling(), x);
    return x;
}

Vector flow_inverse(const FlowModel& model, std::span<const double> z) {
    return row_vector(flow_inverse(model, as_row(z)), 0);
}

Vector log_likelihood(const FlowModel& model, const Matrix& xs) {
    auto f = flow_forward(model, xs);
    const double n = static_cast<double>(model.input_dim());
    Vector out(xs.rows());
    for (std::size_t b = 0; b < xs.rows(); ++b) {
        double sq = 0.0;
        for (double v : f.z.row(b)) sq += v * v;
        out[b] = -0.5 * sq - 0.5 * n * kLogTwoPi + f.logdet[b];
    }
    return out;
}

double log_likelihood(const FlowModel& model, std::span<const double> x) {
    return log_likelihood(model, as_row(x))[0];
}

LossAndGrad nll_loss_and_grad(const FlowModel& model, const Matrix& batch) {
    if (batch.rows() == 0) throw UsageError("nll_loss_and_grad: empty batch");
    if (batch.cols() != model.input_dim()) throw ShapeError("nll_loss_and_grad: dimension mismatch");

    const std::size_t nb = model.n_blocks();
    const std::size_t rows = batch.rows();
    const double inv_rows = 1.0 / static_cast<double>(rows);

    Matrix x = batch;
    scale_in(model.scaling(), x);
    Vector logdet(rows, model.scaling().log_det());
    std::vector<CouplingTrace> traces(nb);
    for (std::size_t k = 0; k < nb; ++k) {
        coupling_apply(model.blocks()[k], x, logdet, &traces[k]);
        permute_rows(model.permutations()[k], x);
        if (!all_finite(x.values()) || !all_finite(logdet)) {
            throw LikelihoodError("non-finite value after coupling block " + std::to_string(k), k);
        }
    }

    LossAndGrad res{0.0, Vector(model.param_count(), 0.0)};
    const double n = static_cast<double>(model.input_dim());
    for (std::size_t b = 0; b < rows; ++b) {
        double sq = 0.0;
        for (double v : x.row(b)) sq += v * v;
        res.loss += 0.5 * sq + 0.5 * n * kLogTwoPi - logdet[b];
    }
    res.loss *= inv_rows;

    // d loss / d z = z / rows; walk the blocks backwards.
    Matrix grad = x;
    for (double& g : grad.values()) g *= inv_rows;

    std::vector<std::size_t> offsets(nb, 0);
    for (std::size_t k = 1; k < nb; ++k) offsets[k] = offsets[k - 1] + model.blocks()[k - 1].subnet().param_count();

    for (std::size_t k = nb; k-- > 0;) {
        const auto& block = model.blocks()[k];
        const auto& tr = traces[k];
        const std::size_t h = block.split();
        const std::size_t m = block.transformed();
        const double alpha = block.clamp_alpha();
        unpermute_rows(model.permutations()[k], grad);

        Matrix upstream(rows, 2 * m);
        for (std::size_t b = 0; b < rows; ++b) {
            auto g = grad.row(b);
            auto in = tr.input.row(b);
            for (std::size_t j = 0; j < m; ++j) {
                const double s_hat = tr.log_scale(b, j);
                const double e = std::exp(s_hat);
                const double dy2 = g[h + j];
                const double ds_hat = dy2 * in[h + j] * e - inv_rows;  // -logdet term
                const double r = s_hat / alpha;
                upstream(b, j) = ds_hat * (1.0 - r * r);
                upstream(b, m + j) = dy2;
                g[h + j] = dy2 * e;
            }
        }
        Matrix dx1;
        const auto pc = block.subnet().param_count();
        mlp_backward_accumulate(block.subnet(), tr.subnet, upstream,
                                std::span<double>(res.grads).subspan(offsets[k], pc), &dx1);
        for (std::size_t b = 0; b < rows; ++b) {
            auto g = grad.row(b);
            auto d = dx1.row(b);
            for (std::size_t j = 0; j < h; ++j) g[j] += d[j];
        }
    }
    return res;
}

Matrix sample(const FlowModel& model, Rng& rng, std::size_t count) {
    if (count == 0) throw UsageError("sample: count must be >= 1");
    Matrix z(count, model.input_dim());
    for (double& v : z.values()) v = rng.normal();
    return flow_inverse(model, z);
}

}  // namespace waicflow
