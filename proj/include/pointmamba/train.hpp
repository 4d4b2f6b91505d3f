// Loss, Adam, the mini-batch training loop and evaluation metrics.
#pragma once

#include <functional>
#include <thread>

#include "data.hpp"
#include "network.hpp"

namespace pointmamba {

class Adam {
public:
    Adam(const ParamStore& params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps)
    {
        for (const auto& v : params.values()) {
            m_.push_back(Tensor::zeros(v.shape()));
            v_.push_back(Tensor::zeros(v.shape()));
        }
    }

    void step(ParamStore& params, const std::vector<Tensor>& grads)
    {
        if (grads.size() != params.size()) throw Error("Adam: gradient count does not match parameters");
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t i = 0; i < grads.size(); ++i) {
            auto& w = params.values()[i];
            for (std::size_t j = 0; j < w.numel(); ++j) {
                const double g = grads[i][j];
                m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g;
                v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g * g;
                w[j] -= lr_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_);
            }
        }
    }

    std::size_t steps() const { return t_; }

private:
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

inline std::vector<int> argmax_rows(const Tensor& logits)
{
    const std::size_t k = logits.shape().back();
    const std::size_t rows = logits.numel() / k;
    std::vector<int> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = logits.ptr() + r * k;
        out[r] = static_cast<int>(std::max_element(row, row + k) - row);
    }
    return out;
}

inline std::span<const int> targets_of(const ModelConfig& config, const PointCloud& pc)
{
    if (config.head == HeadType::classify) {
        if (pc.label < 0) throw Error("classification sample has no label");
        return {&pc.label, 1};
    }
    if (pc.point_labels.size() != pc.size()) throw Error("segmentation sample needs one label per point");
    return pc.point_labels;
}

struct SampleResult {
    double loss = 0.0;
    std::vector<int> prediction;
    std::vector<Tensor> grads;
};

inline SampleResult sample_gradients(const Model& model, const PointCloud& pc)
{
    Tape tape(true);
    Bound p(tape, model.params, true);
    auto fwd = model_forward(p, model.config, pc.positions, pc.normals);
    Var logits = fwd.logits;
    if (model.config.head == HeadType::classify) logits = reshape(logits, {1, logits.dim(0)});
    Var loss = cross_entropy(logits, targets_of(model.config, pc));
    tape.backward(loss);
    return {loss.value()[0], argmax_rows(fwd.logits.value()), p.gradients()};
}

inline std::vector<int> predict(const Model& model, const PointCloud& pc)
{
    return argmax_rows(predict_logits(model, pc.positions, pc.normals));
}

// Runs fn(i) for i in [0, n) on up to `threads` workers.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn)
{
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += threads) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

struct TrainOptions {
    std::size_t epochs = 10;
    std::size_t batch_size = 8;
    std::size_t max_steps = 0;  // 0 = no limit
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
    std::size_t threads = 1;
};

struct EpochMetrics {
    std::size_t epoch = 0;
    double loss = 0.0;  // mean sample loss over the epoch
    double acc = 0.0;   // accuracy of the pre-update predictions over the epoch
};

struct TrainSummary {
    std::vector<EpochMetrics> epochs;
    std::size_t steps = 0;
};

inline TrainSummary train(Model& model, const std::vector<PointCloud>& data, const TrainOptions& opt,
                          const std::function<void(const EpochMetrics&)>& on_epoch = {})
{
    if (data.empty()) throw Error("train: empty dataset");
    if (opt.batch_size == 0) throw Error("train: batch_size must be positive");
    Adam adam(model.params, opt.learning_rate);
    TrainSummary summary;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        std::mt19937_64 rng(opt.seed ^ (0x9E3779B97F4A7C15ull * (epoch + 1)));
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        std::size_t correct = 0, total = 0, seen = 0;
        for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
            if (opt.max_steps && summary.steps >= opt.max_steps) break;
            const std::size_t stop = std::min(order.size(), start + opt.batch_size);
            std::vector<SampleResult> results(stop - start);
            parallel_for(results.size(), opt.threads,
                         [&](std::size_t i) { results[i] = sample_gradients(model, data[order[start + i]]); });
            std::vector<Tensor> grads = std::move(results[0].grads);
            for (std::size_t i = 1; i < results.size(); ++i) {
                for (std::size_t p = 0; p < grads.size(); ++p)
                    for (std::size_t j = 0; j < grads[p].numel(); ++j) grads[p][j] += results[i].grads[p][j];
            }
            const double inv = 1.0 / static_cast<double>(results.size());
            for (auto& g : grads)
                for (auto& v : g.data()) v *= inv;
            for (std::size_t i = 0; i < results.size(); ++i) {
                if (!std::isfinite(results[i].loss)) {
                    throw Error("train: non-finite loss at epoch " + std::to_string(epoch) + ", step " +
                                std::to_string(summary.steps));
                }
                loss_sum += results[i].loss;
                const auto truth = targets_of(model.config, data[order[start + i]]);
                for (std::size_t j = 0; j < truth.size(); ++j) correct += results[i].prediction[j] == truth[j];
                total += truth.size();
                ++seen;
            }
            adam.step(model.params, grads);
            ++summary.steps;
        }
        if (seen == 0) break;
        EpochMetrics m{epoch, loss_sum / static_cast<double>(seen), static_cast<double>(correct) / static_cast<double>(total)};
        summary.epochs.push_back(m);
        if (on_epoch) on_epoch(m);
    }
    return summary;
}

inline double accuracy(std::span<const int> pred, std::span<const int> truth)
{
    if (pred.size() != truth.size() || truth.empty()) throw Error("accuracy: size mismatch or empty input");
    std::size_t ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) ok += pred[i] == truth[i];
    return static_cast<double>(ok) / static_cast<double>(truth.size());
}

// Mean over classes of TP / (TP + FP + FN); classes absent from both
// prediction and ground truth are excluded.
inline double mean_iou(std::span<const int> pred, std::span<const int> truth, std::size_t num_classes)
{
    if (pred.size() != truth.size() || truth.empty()) throw Error("mean_iou: size mismatch or empty input");
    std::vector<std::size_t> tp(num_classes), fp(num_classes), fn(num_classes);
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const auto p = static_cast<std::size_t>(pred[i]), t = static_cast<std::size_t>(truth[i]);
        if (p >= num_classes || t >= num_classes) throw Error("mean_iou: label out of range");
        if (p == t) {
            ++tp[p];
        } else {
            ++fp[p];
            ++fn[t];
        }
    }
    double sum = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
        const std::size_t denom = tp[c] + fp[c] + fn[c];
        if (denom == 0) continue;
        sum += static_cast<double>(tp[c]) / static_cast<double>(denom);
        ++present;
    }
    return sum / static_cast<double>(present);
}

struct EvalResult {
    double accuracy = 0.0;
    double miou = 0.0;
    std::size_t samples = 0;
};

// Classification: per-cloud predictions. Segmentation: pooled per-point predictions.
inline EvalResult evaluate(const Model& model, const std::vector<PointCloud>& data, std::size_t threads = 1)
{
    if (data.empty()) throw Error("evaluate: empty dataset");
    std::vector<std::vector<int>> preds(data.size());
    parallel_for(data.size(), threads, [&](std::size_t i) { preds[i] = predict(model, data[i]); });
    std::vector<int> pred, truth;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto t = targets_of(model.config, data[i]);
        pred.insert(pred.end(), preds[i].begin(), preds[i].end());
        truth.insert(truth.end(), t.begin(), t.end());
    }
    return {accuracy(pred, truth), mean_iou(pred, truth, model.config.num_classes), data.size()};
}

}  // namespace pointmamba
