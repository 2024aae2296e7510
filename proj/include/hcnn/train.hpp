#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "hcnn/data.hpp"
#include "hcnn/errors.hpp"
#include "hcnn/model.hpp"

namespace hcnn {

struct TrainOptions {
    int epochs = 240;
    int batch_size = 50;
    double base_lr = 0.25;
    int decay_period = 40;     // epochs between rate drops
    double decay_factor = 10.0;
    double momentum = 0.9;
    double weight_decay = 2e-4;
    std::uint64_t seed = 0;
    bool augment = true;
    int max_shift = 6;
    int checkpoint_every = 0;  // epochs; 0 saves no intermediates
    bool log_timing = true;    // false writes wall_ms as 0 for comparable logs
    int threads = 1;
};

inline double learning_rate(const TrainOptions& o, int epoch) {
    return o.base_lr /
           std::pow(o.decay_factor, std::floor(double(epoch) /
                                               double(o.decay_period)));
}

template <class T>
struct OptimizerState {
    std::vector<Tensor<T>> velocity;  // mirrors trainable_arrays order

    static OptimizerState init(Parameters<T>& params) {
        OptimizerState s;
        for (Tensor<T>* t : trainable_arrays(params))
            s.velocity.emplace_back(t->shape());
        return s;
    }
};

// Heavy-ball update with L2 decay folded into the gradient:
//   v <- m*v - lr*(g + wd*theta);  theta <- theta + v
// Running normalization statistics are not trainable and never decay.
template <class T>
void sgd_step(Parameters<T>& params, GradientSet<T>& grads,
              OptimizerState<T>& state, const TrainOptions& opts, double lr) {
    auto ps = trainable_arrays(params);
    auto gs = trainable_arrays(grads);
    if (ps.size() != gs.size() || ps.size() != state.velocity.size())
        throw config_error("sgd_step: mismatched parameter registry");
    const T m = static_cast<T>(opts.momentum);
    const T wd = static_cast<T>(opts.weight_decay);
    const T rate = static_cast<T>(lr);
    for (std::size_t a = 0; a < ps.size(); ++a) {
        T* th = ps[a]->data();
        const T* g = gs[a]->data();
        T* v = state.velocity[a].data();
        const std::size_t n = ps[a]->size();
        for (std::size_t i = 0; i < n; ++i) {
            v[i] = m * v[i] - rate * (g[i] + wd * th[i]);
            th[i] += v[i];
        }
    }
}

struct EvalResult {
    double loss = 0;
    double accuracy = 0;
};

template <class T>
EvalResult evaluate(const LabeledImageSet<T>& set, Parameters<T>& params,
                    const NetworkConfig& cfg, int batch_size = 100,
                    int threads = 1) {
    EvalResult r;
    std::size_t correct = 0;
    double loss_sum = 0;
    const std::size_t n = set.count();
    for (std::size_t start = 0; start < n;
         start += static_cast<std::size_t>(batch_size)) {
        const std::size_t stop =
            std::min(n, start + static_cast<std::size_t>(batch_size));
        std::vector<std::size_t> idx(stop - start);
        std::iota(idx.begin(), idx.end(), start);
        auto [batch, labels] = gather_batch(set, idx);
        auto pred = predict(batch, params, cfg, threads);
        const std::size_t C = pred.probs.dim(1);
        for (std::size_t b = 0; b < idx.size(); ++b) {
            if (pred.labels[b] == labels[b]) ++correct;
            loss_sum -= std::log(std::max(
                double(pred.probs.flat(b * C +
                                       static_cast<std::size_t>(labels[b]))),
                1e-30));
        }
    }
    r.accuracy = double(correct) / double(n);
    r.loss = loss_sum / double(n);
    return r;
}

struct EpochMetrics {
    int epoch = 0;
    std::uint64_t step = 0;
    double lr = 0;
    double train_loss = 0;
    double train_acc = 0;
    double test_acc = 0;
    std::uint64_t wall_ms = 0;
};

inline std::string format_metrics(const EpochMetrics& m) {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "{\"epoch\":%d,\"step\":%llu,\"lr\":%.10g,"
                  "\"train_loss\":%.6f,\"train_acc\":%.6f,"
                  "\"test_acc\":%.6f,\"wall_ms\":%llu}",
                  m.epoch, static_cast<unsigned long long>(m.step), m.lr,
                  m.train_loss, m.train_acc, m.test_acc,
                  static_cast<unsigned long long>(m.wall_ms));
    return buf;
}

// Full optimization loop. The seed fixes shuffling and augmentation; the
// caller seeds parameter initialization. Metrics are appended per epoch;
// per_epoch (if set) runs after each epoch, e.g. for checkpointing.
template <class T>
std::vector<EpochMetrics> train(
        const LabeledImageSet<T>& train_set, const LabeledImageSet<T>* test_set,
        Parameters<T>& params, const NetworkConfig& cfg,
        const TrainOptions& opts, std::ostream* metrics_out = nullptr,
        const std::function<void(const EpochMetrics&)>& per_epoch = {}) {
    if (train_set.count() == 0) throw data_error("train: empty training set");
    std::mt19937_64 rng(opts.seed);
    OptimizerState<T> state = OptimizerState<T>::init(params);
    std::vector<std::size_t> order(train_set.count());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<EpochMetrics> history;
    std::uint64_t step = 0;

    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        const double lr = learning_rate(opts, epoch);
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0;
        std::size_t seen = 0, correct = 0;

        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(opts.batch_size)) {
            const std::size_t stop = std::min(
                order.size(), start + static_cast<std::size_t>(opts.batch_size));
            std::vector<std::size_t> idx(order.begin() + start,
                                         order.begin() + stop);
            auto [batch, labels] = gather_batch(train_set, idx);
            if (opts.augment) augment_batch(batch, rng, opts.max_shift);

            auto acts = forward(batch, params, cfg, true, opts.threads);
            auto grads = zero_gradients(params);
            T loss = backward(acts, params, cfg, labels, grads, opts.threads);
            ++step;
            if (!std::isfinite(double(loss)))
                throw numeric_error("non-finite loss at step " +
                                    std::to_string(step));
            loss_sum += double(loss) * double(idx.size());
            seen += idx.size();
            const Tensor<T>& logits = acts.x[static_cast<std::size_t>(cfg.depth)];
            const std::size_t C = logits.dim(1);
            for (std::size_t b = 0; b < idx.size(); ++b) {
                std::size_t best = 0;
                for (std::size_t c = 1; c < C; ++c)
                    if (logits.flat(b * C + c) > logits.flat(b * C + best))
                        best = c;
                if (static_cast<int>(best) == labels[b]) ++correct;
            }
            sgd_step(params, grads, state, opts, lr);
        }

        EpochMetrics m;
        m.epoch = epoch;
        m.step = step;
        m.lr = lr;
        m.train_loss = loss_sum / double(seen);
        m.train_acc = double(correct) / double(seen);
        m.test_acc =
            test_set ? evaluate(*test_set, params, cfg, 100, opts.threads)
                           .accuracy
                     : 0.0;
        const auto t1 = std::chrono::steady_clock::now();
        m.wall_ms = opts.log_timing
                        ? static_cast<std::uint64_t>(
                              std::chrono::duration_cast<
                                  std::chrono::milliseconds>(t1 - t0)
                                  .count())
                        : 0;
        history.push_back(m);
        if (metrics_out) *metrics_out << format_metrics(m) << "\n"
                                      << std::flush;
        if (per_epoch) per_epoch(m);
    }
    return history;
}

}  // namespace hcnn
