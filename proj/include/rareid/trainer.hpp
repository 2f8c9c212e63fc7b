#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rareid/config.hpp"
#include "rareid/datapipe.hpp"
#include "rareid/evaluate.hpp"
#include "rareid/losses.hpp"
#include "rareid/network.hpp"
#include "rareid/optim.hpp"

namespace rareid {

/// Training stopped on a NaN or infinite loss.
class NonFiniteLossError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainLogRow {
    std::size_t iter = 0;
    std::size_t epoch = 0;
    double lr = 0.0;
    double l_rll = 0.0;
    std::optional<double> l_id1;
    double l_id2 = 0.0;
    std::optional<double> l_id3;
    std::optional<double> l_id4;
    double total = 0.0;
};

inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// CSV header for the given ablation setting; ablated terms have no column.
inline std::string log_header(const NetworkConfig& nc) {
    std::string h = "iter,epoch,lr,l_rll";
    if (nc.reverse_attention_on) h += ",l_id1";
    h += ",l_id2";
    if (nc.multiscale_supervision_on) h += ",l_id3,l_id4";
    return h + ",total";
}

inline std::string log_line(const TrainLogRow& r) {
    std::string s = std::to_string(r.iter) + "," + std::to_string(r.epoch) + "," + format_double(r.lr) + "," +
                    format_double(r.l_rll);
    if (r.l_id1) s += "," + format_double(*r.l_id1);
    s += "," + format_double(r.l_id2);
    if (r.l_id3) s += "," + format_double(*r.l_id3) + "," + format_double(*r.l_id4);
    return s + "," + format_double(r.total);
}

/**
 * One training run: PK batch → augment → forward → five losses → weighted
 * sum → backward → Adam at the scheduled rate. Random streams for
 * initialisation, sampling and augmentation are split from the config seed.
 */
class Trainer {
public:
    Trainer(const Config& config, const Dataset& dataset)
        : config_(config), dataset_(dataset), master_(config.seed), init_rng_(master_.split()),
          net_(config.network, init_rng_), sample_rng_(master_.split()), augment_rng_(master_.split()),
          adam_(net_.parameters(), config.adam) {
        config_.validate();
    }

    ReidNetwork& network() { return net_; }
    const Config& config() const { return config_; }
    std::size_t iteration() const { return iter_; }

    double lr_for(std::size_t iter) const {
        return config_.schedule.at((iter - 1) / config_.train.iterations_per_epoch + 1);
    }

    TrainLogRow step() {
        const std::size_t it = iter_ + 1;
        SampleBatch batch = pk_sample(dataset_, config_.sampler.p, config_.sampler.k, sample_rng_);
        batch = augment_batch(batch, config_.augment, augment_rng_);
        const auto& labels = batch.identity_labels;

        Tape tape;
        ForwardOutputs out = net_.forward_train(tape, batch.images, Mode::train);
        LossTerms terms;
        terms.l_rll = rll_loss(tape, out.embedding, labels, config_.rll);
        const double eps = config_.smoothing_epsilon;
        if (out.logits1.defined()) terms.l_id1 = smoothed_ce_loss(tape, out.logits1, labels, eps);
        terms.l_id2 = smoothed_ce_loss(tape, out.logits2, labels, eps);
        if (out.logits3.defined()) {
            terms.l_id3 = smoothed_ce_loss(tape, out.logits3, labels, eps);
            terms.l_id4 = smoothed_ce_loss(tape, out.logits4, labels, eps);
        }
        Tensor total = total_loss(tape, terms, config_.loss_weights);

        TrainLogRow row;
        row.iter = it;
        row.epoch = (it - 1) / config_.train.iterations_per_epoch + 1;
        row.lr = config_.schedule.at(row.epoch);
        row.l_rll = terms.l_rll.item();
        if (terms.l_id1.defined()) row.l_id1 = terms.l_id1.item();
        row.l_id2 = terms.l_id2.item();
        if (terms.l_id3.defined()) {
            row.l_id3 = terms.l_id3.item();
            row.l_id4 = terms.l_id4.item();
        }
        row.total = total.item();
        if (!std::isfinite(row.total)) {
            throw NonFiniteLossError("non-finite loss at iteration " + std::to_string(it) + ": " + log_header(config_.network) +
                                     " = " + log_line(row));
        }

        adam_.zero_grad();
        tape.backward(total);
        adam_.step(row.lr);
        iter_ = it;
        return row;
    }

private:
    Config config_;
    const Dataset& dataset_;
    Rng master_;
    Rng init_rng_;
    ReidNetwork net_;
    Rng sample_rng_;
    Rng augment_rng_;
    Adam adam_;
    std::size_t iter_ = 0;
};

/// Embeds a dataset split with the inference path, in dataset order.
inline std::pair<Tensor, RetrievalMeta> embed_split(ReidNetwork& net, const Dataset& ds, Split split,
                                                    std::size_t chunk = 32) {
    const auto idx = ds.indices(split);
    if (idx.empty()) throw std::invalid_argument(std::string("dataset has no ") + split_name(split) + " images");
    RetrievalMeta meta;
    std::vector<Tensor> rows;
    for (std::size_t start = 0; start < idx.size(); start += chunk) {
        const std::size_t end = std::min(idx.size(), start + chunk);
        std::vector<Tensor> imgs;
        for (std::size_t i = start; i < end; ++i) imgs.push_back(ds.samples[idx[i]].image);
        rows.push_back(net.forward_infer(stack_images(imgs)));
    }
    for (std::size_t i : idx) {
        meta.ids.push_back(ds.samples[i].id);
        meta.cameras.push_back(ds.samples[i].camera);
    }
    Tape tape(false);
    return {rows.size() == 1 ? rows.front() : concat(tape, rows, 0), meta};
}

inline EvalReport evaluate_network(ReidNetwork& net, const Dataset& ds) {
    auto [q, qm] = embed_split(net, ds, Split::query);
    auto [g, gm] = embed_split(net, ds, Split::gallery);
    return evaluate(q, qm, g, gm);
}

}  // namespace rareid
