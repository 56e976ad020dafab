#include "waicflow/waic.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include "waicflow/errors.hpp"

namespace waicflow {

namespace {

constexpr std::uint64_t kShuffleStream = 0x73687566666c65ULL;
constexpr std::size_t kScoreChunk = 1024;

// Runs job(i) for i in [0, count) on up to `threads` workers. The first
// exception (lowest index) is rethrown after all workers finish.
template <typename Job>
void parallel_for(std::size_t count, std::size_t threads, Job&& job) {
    threads = std::max<std::size_t>(1, std::min(threads, count));
    if (threads == 1) {
        for (std::size_t i = 0; i < count; ++i) job(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex mu;
    std::size_t failed_at = count;
    std::exception_ptr failure;
    auto worker = [&] {
        for (std::size_t i = next++; i < count; i = next++) {
            try {
                job(i);
            } catch (...) {
                std::lock_guard lock(mu);
                if (i < failed_at) {
                    failed_at = i;
                    failure = std::current_exception();
                }
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
}

}  // namespace

double mean_nll(const FlowModel& model, const Matrix& data) {
    if (data.rows() == 0) throw UsageError("mean_nll: empty data");
    double total = 0.0;
    for (std::size_t first = 0; first < data.rows(); first += kScoreChunk) {
        const std::size_t count = std::min(kScoreChunk, data.rows() - first);
        std::vector<std::size_t> idx(count);
        for (std::size_t i = 0; i < count; ++i) idx[i] = first + i;
        for (double lp : log_likelihood(model, data.select_rows(idx))) total -= lp;
    }
    return total / static_cast<double>(data.rows());
}

FlowModel train_member(const TrainConfig& config, const Matrix& train_data, std::uint64_t seed) {
    if (train_data.rows() == 0) throw UsageError("train_member: empty training data");
    if (config.batch_size == 0) throw UsageError("train_member: batch size must be >= 1");
    FlowConfig arch = config.arch;
    arch.input_dim = train_data.cols();
    FlowModel model = FlowModel::random(arch, seed);
    if (config.standardize) model.set_scaling(InputScaling::fit(train_data));

    std::vector<double> curve;
    try {
        curve.push_back(mean_nll(model, train_data));
    } catch (const LikelihoodError& e) {
        throw TrainingError(std::string("epoch 0: ") + e.what(), 0);
    }

    Rng shuffle_rng(mix_seed(seed, kShuffleStream));
    AdamState adam(model.param_count(), config.adam);
    Vector params = model.flatten();
    const std::size_t n = train_data.rows();

    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const std::size_t phase = std::min<std::size_t>(epoch * 3 / config.epochs, 2);
        adam.hyper.learning_rate = config.adam.learning_rate * std::pow(config.lr_decay, static_cast<double>(phase));

        const auto order = shuffle_rng.permutation(n);
        double epoch_loss = 0.0;
        for (std::size_t first = 0; first < n; first += config.batch_size) {
            const std::size_t count = std::min(config.batch_size, n - first);
            const Matrix batch = train_data.select_rows(std::span(order).subspan(first, count));
            try {
                auto lg = nll_loss_and_grad(model, batch);
                if (!std::isfinite(lg.loss)) throw TrainingError("non-finite loss", epoch + 1);
                adam_step(adam, params, lg.grads);
                model.assign(params);
                epoch_loss += lg.loss * static_cast<double>(count);
            } catch (const TrainingError& e) {
                throw TrainingError("epoch " + std::to_string(epoch + 1) + ": " + e.what(), epoch + 1);
            } catch (const LikelihoodError& e) {
                throw TrainingError("epoch " + std::to_string(epoch + 1) + ": " + e.what(), epoch + 1);
            }
        }
        curve.push_back(epoch_loss / static_cast<double>(n));
    }
    model.set_loss_curve(std::move(curve));
    return model;
}

// ---------------------------------------------------------------------------

Ensemble::Ensemble(std::vector<FlowModel> members) : members_(std::move(members)) {
    if (members_.size() < 2) {
        throw UsageError("an ensemble needs at least 2 members, got " + std::to_string(members_.size()));
    }
    const auto& ref = members_.front();
    for (std::size_t i = 1; i < members_.size(); ++i) {
        const auto& m = members_[i];
        if (m.input_dim() != ref.input_dim() || m.n_blocks() != ref.n_blocks() ||
            m.hidden_width() != ref.hidden_width() || m.clamp_alpha() != ref.clamp_alpha()) {
            throw UsageError("ensemble member " + std::to_string(i) + " has a different architecture");
        }
    }
}

std::vector<std::uint64_t> Ensemble::member_seeds() const {
    std::vector<std::uint64_t> s;
    for (const auto& m : members_) s.push_back(m.seed());
    return s;
}

Ensemble Ensemble::prefix(std::size_t m) const {
    if (m > members_.size()) throw UsageError("ensemble prefix longer than ensemble");
    return Ensemble(std::vector<FlowModel>(members_.begin(), members_.begin() + static_cast<std::ptrdiff_t>(m)));
}

Ensemble train_ensemble(const TrainConfig& config, const Matrix& train_data, std::uint64_t base_seed,
                        std::size_t n_members, std::size_t threads) {
    if (n_members < 2) throw UsageError("train_ensemble: n_members must be >= 2, got " + std::to_string(n_members));
    std::vector<std::optional<FlowModel>> slots(n_members);
    parallel_for(n_members, threads, [&](std::size_t i) {
        try {
            slots[i] = train_member(config, train_data, mix_seed(base_seed, i));
        } catch (const TrainingError& e) {
            throw TrainingError("member " + std::to_string(i) + ": " + e.what(), i);
        }
    });
    std::vector<FlowModel> members;
    for (auto& s : slots) members.push_back(std::move(*s));
    return Ensemble(std::move(members));
}

// ---------------------------------------------------------------------------

WaicScore waic_from_logps(std::span<const double> member_logps) {
    const std::size_t m = member_logps.size();
    if (m < 2) throw UsageError("WAIC needs at least two member log-likelihoods");
    WaicScore s;
    s.per_member_logp.assign(member_logps.begin(), member_logps.end());
    double sum = 0.0;
    for (double v : member_logps) sum += v;
    s.mean_logp = sum / static_cast<double>(m);
    double ss = 0.0;
    for (double v : member_logps) ss += (v - s.mean_logp) * (v - s.mean_logp);
    s.var_logp = ss / static_cast<double>(m - 1);
    s.waic = s.var_logp - s.mean_logp;
    return s;
}

WaicScore waic_score(const Ensemble& ensemble, std::span<const double> x) {
    if (x.size() != ensemble.input_dim()) {
        throw ShapeError("waic_score: ensemble dim " + std::to_string(ensemble.input_dim()) + ", input dim " +
                         std::to_string(x.size()));
    }
    std::vector<double> lps(ensemble.size());
    for (std::size_t i = 0; i < ensemble.size(); ++i) {
        try {
            lps[i] = log_likelihood(ensemble.members()[i], x);
        } catch (const LikelihoodError& e) {
            throw ScoreError("member " + std::to_string(i) + ": " + e.what(), i, 0);
        }
        if (!std::isfinite(lps[i])) throw ScoreError("member " + std::to_string(i) + ": non-finite log-likelihood", i, 0);
    }
    return waic_from_logps(lps);
}

std::vector<WaicScore> waic_batch(const Ensemble& ensemble, const Matrix& xs, std::size_t threads) {
    if (xs.cols() != ensemble.input_dim()) {
        throw ShapeError("waic_batch: ensemble dim " + std::to_string(ensemble.input_dim()) + ", row dim " +
                         std::to_string(xs.cols()));
    }
    std::vector<WaicScore> out(xs.rows());
    const std::size_t n_chunks = (xs.rows() + kScoreChunk - 1) / kScoreChunk;
    const std::size_t m = ensemble.size();
    parallel_for(n_chunks, threads, [&](std::size_t c) {
        const std::size_t first = c * kScoreChunk;
        const std::size_t count = std::min(kScoreChunk, xs.rows() - first);
        std::vector<std::size_t> idx(count);
        for (std::size_t i = 0; i < count; ++i) idx[i] = first + i;
        const Matrix chunk = xs.select_rows(idx);
        Matrix lps(count, m);
        for (std::size_t j = 0; j < m; ++j) {
            Vector col;
            try {
                col = log_likelihood(ensemble.members()[j], chunk);
            } catch (const LikelihoodError&) {
                // Locate the failing row for the error message.
                for (std::size_t i = 0; i < count; ++i) {
                    try {
                        (void)log_likelihood(ensemble.members()[j], chunk.row(i));
                    } catch (const LikelihoodError& e) {
                        throw ScoreError("row " + std::to_string(first + i) + ", member " + std::to_string(j) +
                                             ": " + e.what(),
                                         j, first + i);
                    }
                }
                throw;
            }
            for (std::size_t i = 0; i < count; ++i) {
                if (!std::isfinite(col[i])) {
                    throw ScoreError("row " + std::to_string(first + i) + ", member " + std::to_string(j) +
                                         ": non-finite log-likelihood",
                                     j, first + i);
                }
                lps(i, j) = col[i];
            }
        }
        for (std::size_t i = 0; i < count; ++i) out[first + i] = waic_from_logps(lps.row(i));
    });
    return out;
}

}  // namespace waicflow
