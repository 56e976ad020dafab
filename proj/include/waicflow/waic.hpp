#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "waicflow/flow.hpp"
#include "waicflow/numcore.hpp"

namespace waicflow {

struct TrainConfig {
    FlowConfig arch;
    std::size_t batch_size = 256;
    std::size_t epochs = 30;
    AdamHyper adam;
    /// Learning rate is multiplied by `lr_decay` after each third of training.
    double lr_decay = 0.5;
    /// Fit per-coordinate standardization on the training data.
    bool standardize = true;
};

/// Trains one flow by maximum likelihood. The loss curve stored on the model
/// holds the mean NLL before training followed by one entry per epoch
/// (running mean over that epoch's mini-batches).
FlowModel train_member(const TrainConfig& config, const Matrix& train_data, std::uint64_t seed);

/// Mean NLL of `data` under `model`.
double mean_nll(const FlowModel& model, const Matrix& data);

/// Independently trained flows sharing architecture and input dimension.
class Ensemble {
public:
    explicit Ensemble(std::vector<FlowModel> members);

    std::size_t size() const noexcept { return members_.size(); }
    std::size_t input_dim() const { return members_.front().input_dim(); }
    const std::vector<FlowModel>& members() const noexcept { return members_; }
    std::vector<std::uint64_t> member_seeds() const;

    /// First `m` members (m >= 2).
    Ensemble prefix(std::size_t m) const;

private:
    std::vector<FlowModel> members_;
};

/// Member seed i is mix_seed(base_seed, i). Members are trained on the same
/// data; they differ only by init and shuffle order. `threads` > 1 trains
/// members concurrently, which gives the same result as serial training.
Ensemble train_ensemble(const TrainConfig& config, const Matrix& train_data, std::uint64_t base_seed,
                        std::size_t n_members = 5, std::size_t threads = 1);

struct WaicScore {
    double waic = 0.0;
    double mean_logp = 0.0;
    double var_logp = 0.0;
    std::vector<double> per_member_logp;
};

/// var - mean over member log-likelihoods, unbiased variance (divisor m - 1).
/// Higher means further from the training distribution.
WaicScore waic_from_logps(std::span<const double> member_logps);

WaicScore waic_score(const Ensemble& ensemble, std::span<const double> x);

/// Row-wise scores in input order. Rows are evaluated in fixed-size chunks,
/// so the output does not depend on `threads`.
std::vector<WaicScore> waic_batch(const Ensemble& ensemble, const Matrix& xs, std::size_t threads = 1);

}  // namespace waicflow
