#pragma once

// The measurement loop and everything needed to optimize an agent through
// it: resource-bounded episode simulation, loss definitions, the hybrid
// pathwise + score-function gradient estimator with a leave-one-out
// baseline, an adaptive-moment trainer, and precision-curve evaluation.
//
// Outcomes are sampled at the true parameters, so the score-function term
// weights the log-likelihoods at the true parameters (the actual sampling
// measure). The pathwise term differentiates the chain likelihood ->
// Bayes update -> estimator -> loss directly on the tape.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "qest/agents.hpp"
#include "qest/autodiff.hpp"
#include "qest/parallel.hpp"
#include "qest/particle_filter.hpp"
#include "qest/rng.hpp"
#include "qest/sensors.hpp"
#include "qest/tensor.hpp"

namespace qest {

struct NumericalAbort : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ResourceBudget {
    double total = 0.0;  // in the model's resource unit
    int max_steps = 1;   // hard cap on loop iterations

    void validate() const {
        if (!(total > 0.0)) throw std::invalid_argument("ResourceBudget: total must be > 0");
        if (max_steps < 1) throw std::invalid_argument("ResourceBudget: max_steps must be >= 1");
    }
};

struct FilterSettings {
    int n_particles = 480;
    double resample_fraction = 0.5;  // resample when ESS < fraction * n
    double liu_west_a = 0.98;

    void validate() const {
        if (n_particles < 2) throw std::invalid_argument("FilterSettings: n_particles < 2");
        if (!(resample_fraction >= 0.0 && resample_fraction <= 1.0))
            throw std::invalid_argument("FilterSettings: resample_fraction outside [0, 1]");
        if (!(liu_west_a > 0.0 && liu_west_a <= 1.0))
            throw std::invalid_argument("FilterSettings: liu_west_a outside (0, 1]");
    }
};

struct StepRecord {
    Tensor control;
    int outcome = 0;
    ad::Variable log_lik_true;  // log p(y | theta_true, control), taped
    double cost = 0.0;
};

struct EpisodeTrace {
    Tensor true_theta;
    std::vector<StepRecord> steps;
    ad::Variable estimator;  // posterior mean at termination, vector(d), taped
    ParticleEnsemble final_ensemble;
    std::vector<ad::Variable> param_leaves;  // agent parameters bound to this tape
    double total_resource = 0.0;
    bool failed = false;  // filter collapse
    std::uint64_t episode_index = 0;
};

// One pass of the measurement loop. Random streams are keyed by
// (seed, purpose + "." + role, episode_index); re-running with identical
// arguments reproduces the trace bit-for-bit.
inline EpisodeTrace run_episode(ad::Tape& tape, const SensorModel& model, const Agent& agent,
                                const ResourceBudget& budget, const FilterSettings& filter,
                                std::uint64_t seed, std::uint64_t episode_index,
                                std::string_view purpose, bool record_tape) {
    budget.validate();
    filter.validate();
    const std::string tag(purpose);
    RngStream theta_rng(seed, tag + ".theta", episode_index);
    RngStream init_rng(seed, tag + ".pfinit", episode_index);
    RngStream outcome_rng(seed, tag + ".outcome", episode_index);
    RngStream resample_rng(seed, tag + ".resample", episode_index);
    RngStream agent_rng(seed, tag + ".agent", episode_index);

    const Prior& prior = model.prior();
    EpisodeTrace trace;
    trace.episode_index = episode_index;
    if (prior.discrete()) {
        const auto h = static_cast<std::int64_t>(prior.hypotheses.size());
        auto pick = static_cast<std::int64_t>(theta_rng.uniform() * static_cast<double>(h));
        if (pick >= h) pick = h - 1;
        trace.true_theta = prior.hypotheses[static_cast<std::size_t>(pick)];
    } else {
        trace.true_theta = prior.sample(theta_rng);
    }

    ParticleEnsemble ens = init_from_prior(tape, prior, filter.n_particles, init_rng);
    trace.param_leaves = agent.bind(tape, record_tape);

    double consumed = 0.0;
    int last_outcome = -1;
    PosteriorSummary summary = summarize(ens);
    for (int step = 0; step < budget.max_steps; ++step) {
        const double remaining = budget.total - consumed;
        if (remaining <= 0.0 || remaining < model.min_step_cost()) break;

        DecisionContext ctx{tape,
                            ens,
                            summary,
                            prior,
                            model.control_space(),
                            trace.param_leaves,
                            consumed / budget.total,
                            step,
                            budget.max_steps,
                            last_outcome,
                            model.outcome_count(),
                            &agent_rng};
        const ad::Variable control = agent.decide(ctx);
        const Tensor control_values = tape.tensor(control);
        if (!model.control_space().contains(control_values))
            throw std::logic_error("run_episode: agent produced out-of-bounds control");

        const Outcome y = model.sample_outcome(trace.true_theta, control_values, outcome_rng);
        const ad::Variable ll_true =
            model.log_likelihood_point(tape, trace.true_theta, control, y.value);
        const ad::Variable ll_particles =
            model.log_likelihood_particles(tape, ens.particles, control, y.value);

        const double cost = model.resource_cost(control_values).amount;
        try {
            ens = bayes_update(ens, ll_particles);
        } catch (const FilterCollapse&) {
            trace.failed = true;
            break;
        }
        consumed += cost;
        trace.steps.push_back({control_values, y.value, ll_true, cost});
        last_outcome = y.value;

        if (!prior.discrete() &&
            effective_sample_size(ens) < filter.resample_fraction * ens.n())
            ens = resample(ens, filter.liu_west_a, prior, resample_rng);
        summary = summarize(ens);
    }

    trace.estimator = summary.mean_var;
    trace.final_ensemble = ens;
    trace.total_resource = consumed;
    return trace;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct Loss {
    enum class Kind { MeanSquaredError, ErrorProbability };
    Kind kind = Kind::MeanSquaredError;
    Tensor weights;  // d x d symmetric PSD (MSE only); empty means identity

    static Loss mse(Tensor w = Tensor(Shape::matrix(1, 1), 0.0)) {
        Loss l;
        l.kind = Kind::MeanSquaredError;
        l.weights = std::move(w);
        return l;
    }
    static Loss error_probability() {
        Loss l;
        l.kind = Kind::ErrorProbability;
        return l;
    }

    void validate(int d) const {
        if (kind != Kind::MeanSquaredError) return;
        if (weights.shape() != Shape::matrix(d, d))
            throw std::invalid_argument("Loss: weight matrix must be d x d");
        for (std::int32_t r = 0; r < d; ++r)
            for (std::int32_t c = 0; c < d; ++c)
                if (weights.at(r, c) != weights.at(c, r))
                    throw std::invalid_argument("Loss: weight matrix must be symmetric");
        Tensor w = weights, chol;
        for (std::int32_t r = 0; r < d; ++r) w.at(r, r) += 1e-12;
        if (!detail::cholesky(w, chol))
            throw std::invalid_argument("Loss: weight matrix must be PSD");
    }

    static Tensor identity(int d) {
        Tensor w(Shape::matrix(d, d));
        for (std::int32_t i = 0; i < d; ++i) w.at(i, i) = 1.0;
        return w;
    }
};

namespace detail {

// Indicator of "particle row differs from theta_true" for the wrong-mass
// surrogate; hypothesis atoms are copied exactly, so == is reliable here.
inline Tensor wrong_hypothesis_indicator(const ParticleEnsemble& ens, const Tensor& truth) {
    Tensor ind(Shape::vector(ens.n()));
    for (int i = 0; i < ens.n(); ++i) {
        bool same = true;
        for (int j = 0; j < ens.d(); ++j)
            if (ens.particles.at(i, j) != truth[j]) {
                same = false;
                break;
            }
        ind[i] = same ? 0.0 : 1.0;
    }
    return ind;
}

inline std::int64_t argmax_weight(const ParticleEnsemble& ens) {
    const auto lw = ens.tape().values(ens.log_weights);
    std::int64_t best = 0;
    for (std::int64_t i = 1; i < static_cast<std::int64_t>(lw.size()); ++i)
        if (lw[static_cast<std::size_t>(i)] > lw[static_cast<std::size_t>(best)]) best = i;
    return best;
}

}  // namespace detail

// Differentiable training loss of one episode. MSE: (e - t)^T W (e - t) with
// the true parameters detached. ErrorProbability: posterior mass on the
// wrong hypotheses (the differentiable surrogate of the hard error).
inline ad::Variable episode_loss(ad::Tape& tape, const EpisodeTrace& trace, const Loss& loss) {
    if (loss.kind == Loss::Kind::MeanSquaredError) {
        const ad::Variable diff = tape.sub(trace.estimator, tape.leaf(trace.true_theta));
        const ad::Variable w = tape.leaf(loss.weights);
        return tape.sum(tape.mul(diff, tape.matvec(w, diff)));
    }
    const Tensor ind = detail::wrong_hypothesis_indicator(trace.final_ensemble, trace.true_theta);
    const ad::Variable w = tape.exp(trace.final_ensemble.log_weights);
    return tape.sum(tape.mul(w, tape.leaf(ind)));
}

// Hard evaluation metric: the MSE value, or the 0/1 error of the
// maximum-posterior hypothesis (ties break toward the lowest index).
inline double episode_metric(const EpisodeTrace& trace, const Loss& loss) {
    if (loss.kind == Loss::Kind::MeanSquaredError) {
        const ad::Tape& tape = *trace.estimator.tape;
        const auto est = tape.values(trace.estimator);
        const int d = static_cast<int>(est.size());
        double acc = 0.0;
        for (int r = 0; r < d; ++r)
            for (int c = 0; c < d; ++c)
                acc += (est[r] - trace.true_theta[r]) * loss.weights.at(r, c) *
                       (est[c] - trace.true_theta[c]);
        return acc;
    }
    const std::int64_t pick = detail::argmax_weight(trace.final_ensemble);
    for (int j = 0; j < trace.final_ensemble.d(); ++j)
        if (trace.final_ensemble.particles.at(static_cast<std::int32_t>(pick), j) !=
            trace.true_theta[j])
            return 1.0;
    return 0.0;
}

// Posterior mass on the wrong hypotheses, detached (reported alongside the
// hard metric for discrete tasks).
inline double episode_surrogate(const EpisodeTrace& trace, const Loss& loss) {
    if (loss.kind == Loss::Kind::MeanSquaredError) return episode_metric(trace, loss);
    const Tensor ind = detail::wrong_hypothesis_indicator(trace.final_ensemble, trace.true_theta);
    const auto lw = trace.final_ensemble.tape().values(trace.final_ensemble.log_weights);
    double acc = 0.0;
    for (int i = 0; i < trace.final_ensemble.n(); ++i)
        acc += std::exp(lw[i]) * ind[i];
    return acc;
}

using LossFn = std::function<ad::Variable(ad::Tape&, const EpisodeTrace&)>;

inline LossFn make_loss_fn(const Loss& loss) {
    return [loss](ad::Tape& tape, const EpisodeTrace& trace) {
        return episode_loss(tape, trace, loss);
    };
}

// ---------------------------------------------------------------------------
// Gradient estimation
// ---------------------------------------------------------------------------

enum class BaselineKind { LeaveOneOut, None };

struct EstimatorOptions {
    bool score_term = true;  // false: pathwise-only ablation
    BaselineKind baseline = BaselineKind::LeaveOneOut;
};

struct EpisodeGradient {
    double loss = 0.0;
    bool failed = false;
    std::vector<Tensor> path;   // d loss / d params at fixed outcomes
    std::vector<Tensor> score;  // d (sum_t log p(y_t | theta_true, c_t)) / d params
};

// Simulates one episode and differentiates both estimator terms in a single
// backward invocation (two roots, one sweep each).
inline EpisodeGradient episode_gradient(ad::Tape& tape, const SensorModel& model,
                                        const Agent& agent, const ResourceBudget& budget,
                                        const FilterSettings& filter, const LossFn& loss_fn,
                                        std::uint64_t seed, std::uint64_t episode_index,
                                        std::string_view purpose, bool want_score) {
    tape.reset();
    const EpisodeTrace trace =
        run_episode(tape, model, agent, budget, filter, seed, episode_index, purpose, true);
    EpisodeGradient out;
    if (trace.failed) {
        out.failed = true;
        return out;
    }
    const ad::Variable loss = loss_fn(tape, trace);
    out.loss = tape.value(loss);

    ad::Variable score_sum = tape.leaf(0.0);
    if (want_score)
        for (const StepRecord& s : trace.steps) score_sum = tape.add(score_sum, s.log_lik_true);

    std::vector<ad::Variable> roots{loss};
    if (want_score) roots.push_back(score_sum);
    const std::vector<ad::GradientMap> maps = tape.backward_multi(roots);

    const auto extract = [&](const ad::GradientMap& m) {
        std::vector<Tensor> g;
        g.reserve(trace.param_leaves.size());
        for (const ad::Variable& leaf : trace.param_leaves) {
            const auto it = m.find(leaf.id);
            g.push_back(it != m.end() ? it->second : Tensor(leaf.shape));
        }
        return g;
    };
    out.path = extract(maps[0]);
    if (want_score) out.score = extract(maps[1]);
    return out;
}

struct BatchGradient {
    std::vector<Tensor> grads;  // aligned with the agent's ParamSet
    double mean_loss = 0.0;
    int used = 0;
    int failed = 0;
};

// Combines per-episode gradients into the batch estimator
//   g = mean_b [ path_b + (L_b - baseline_b) * score_b ],
// baseline_b being the leave-one-out mean of the batch losses.
inline BatchGradient combine_batch(std::span<const EpisodeGradient> episodes,
                                   const EstimatorOptions& opts) {
    BatchGradient out;
    double total_loss = 0.0;
    for (const EpisodeGradient& e : episodes) {
        if (e.failed) {
            ++out.failed;
            continue;
        }
        ++out.used;
        total_loss += e.loss;
    }
    if (out.used == 0) throw std::invalid_argument("combine_batch: no usable episodes");
    if (opts.baseline == BaselineKind::LeaveOneOut && opts.score_term && out.used < 2)
        throw std::invalid_argument(
            "combine_batch: leave-one-out baseline needs at least 2 episodes");
    out.mean_loss = total_loss / out.used;

    bool grads_ready = false;
    for (const EpisodeGradient& e : episodes) {
        if (e.failed) continue;
        if (!grads_ready) {
            out.grads.reserve(e.path.size());
            for (const Tensor& t : e.path) out.grads.emplace_back(t.shape());
            grads_ready = true;
        }
        double coeff = 0.0;
        if (opts.score_term) {
            const double baseline = opts.baseline == BaselineKind::LeaveOneOut
                                        ? (total_loss - e.loss) / (out.used - 1)
                                        : 0.0;
            coeff = e.loss - baseline;
        }
        for (std::size_t p = 0; p < out.grads.size(); ++p) {
            auto dst = out.grads[p].data();
            const auto path = e.path[p].data();
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += path[i];
            if (opts.score_term) {
                const auto sc = e.score[p].data();
                for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += coeff * sc[i];
            }
        }
    }
    for (Tensor& g : out.grads)
        for (double& x : g.data()) x /= out.used;
    return out;
}

// Simulates a batch of episodes (episode_index = first_episode + b) and
// returns the combined gradient estimate. Deterministic for any worker count.
inline BatchGradient batch_gradient(const SensorModel& model, const Agent& agent,
                                    const ResourceBudget& budget, const FilterSettings& filter,
                                    const LossFn& loss_fn, int batch, std::uint64_t seed,
                                    std::uint64_t first_episode, std::string_view purpose,
                                    const EstimatorOptions& opts, int workers = 1) {
    if (batch < 2) throw std::invalid_argument("batch_gradient: batch must be >= 2");
    std::vector<EpisodeGradient> episodes(static_cast<std::size_t>(batch));
    std::vector<ad::Tape> tapes(static_cast<std::size_t>(std::max(1, workers)));
    parallel_for(batch, workers, [&](int worker, std::int64_t b) {
        episodes[static_cast<std::size_t>(b)] = episode_gradient(
            tapes[static_cast<std::size_t>(worker)], model, agent, budget, filter, loss_fn,
            seed, first_episode + static_cast<std::uint64_t>(b), purpose, opts.score_term);
    });
    return combine_batch(episodes, opts);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainingConfig {
    int batch = 64;
    int iterations = 3000;
    double learning_rate = 1e-3;  // cosine-decayed to 0 over the run
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_epsilon = 1e-8;
    double clip_norm = 10.0;
    std::uint64_t seed = 0;
    EstimatorOptions estimator;
    double max_failure_fraction = 0.01;

    void validate() const {
        if (batch < 2) throw std::invalid_argument("TrainingConfig: batch must be >= 2");
        if (iterations < 1) throw std::invalid_argument("TrainingConfig: iterations < 1");
        if (!(learning_rate >= 0.0)) throw std::invalid_argument("TrainingConfig: bad lr");
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
            throw std::invalid_argument("TrainingConfig: decay rates outside [0, 1)");
        if (!(adam_epsilon > 0.0)) throw std::invalid_argument("TrainingConfig: epsilon <= 0");
        if (!(clip_norm > 0.0)) throw std::invalid_argument("TrainingConfig: clip_norm <= 0");
    }
};

struct TrainResult {
    std::vector<double> loss_history;  // batch mean loss per iteration
    std::uint64_t episodes = 0;
    int failed_episodes = 0;
};

inline TrainResult train(const SensorModel& model, Agent& agent, const TrainingConfig& cfg,
                         const ResourceBudget& budget, const FilterSettings& filter,
                         const Loss& loss, int workers = 1) {
    cfg.validate();
    budget.validate();
    loss.validate(model.param_dim());
    ParamSet* params = agent.params();
    if (params == nullptr || params->count() == 0)
        throw std::invalid_argument("train: agent has no trainable parameters");

    const LossFn loss_fn = make_loss_fn(loss);
    std::vector<Tensor> m, v;
    for (const Tensor& t : params->values) {
        m.emplace_back(t.shape());
        v.emplace_back(t.shape());
    }

    TrainResult result;
    result.loss_history.reserve(static_cast<std::size_t>(cfg.iterations));
    for (int iter = 0; iter < cfg.iterations; ++iter) {
        const std::uint64_t first = static_cast<std::uint64_t>(iter) * cfg.batch;
        BatchGradient bg = batch_gradient(model, agent, budget, filter, loss_fn, cfg.batch,
                                          cfg.seed, first, "train", cfg.estimator, workers);
        result.episodes += static_cast<std::uint64_t>(cfg.batch);
        result.failed_episodes += bg.failed;
        if (static_cast<double>(result.failed_episodes) >
            cfg.max_failure_fraction * static_cast<double>(result.episodes))
            throw NumericalAbort("train: filter collapse rate above " +
                                 std::to_string(cfg.max_failure_fraction) + " at iteration " +
                                 std::to_string(iter));

        double norm_sq = 0.0;
        bool finite = std::isfinite(bg.mean_loss);
        for (const Tensor& g : bg.grads)
            for (double x : g.data()) {
                norm_sq += x * x;
                finite = finite && std::isfinite(x);
            }
        if (!finite)
            throw NumericalAbort("train: non-finite loss or gradient at iteration " +
                                 std::to_string(iter) + " (episodes " + std::to_string(first) +
                                 ".." + std::to_string(first + cfg.batch - 1) + ", seed " +
                                 std::to_string(cfg.seed) + ")");

        const double norm = std::sqrt(norm_sq);
        const double scale = norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;
        const double lr =
            cfg.learning_rate * 0.5 *
            (1.0 + std::cos(std::numbers::pi * iter / std::max(1, cfg.iterations)));
        const double bc1 = 1.0 - std::pow(cfg.beta1, iter + 1);
        const double bc2 = 1.0 - std::pow(cfg.beta2, iter + 1);
        for (std::size_t p = 0; p < params->values.size(); ++p) {
            auto w = params->values[p].data();
            auto mp = m[p].data();
            auto vp = v[p].data();
            const auto g = bg.grads[p].data();
            for (std::size_t i = 0; i < w.size(); ++i) {
                const double gi = g[i] * scale;
                mp[i] = cfg.beta1 * mp[i] + (1.0 - cfg.beta1) * gi;
                vp[i] = cfg.beta2 * vp[i] + (1.0 - cfg.beta2) * gi * gi;
                w[i] -= lr * (mp[i] / bc1) / (std::sqrt(vp[i] / bc2) + cfg.adam_epsilon);
            }
        }
        result.loss_history.push_back(bg.mean_loss);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalPoint {
    double budget = 0.0;
    double mean = 0.0;
    double median = 0.0;
    double ci_low = 0.0;   // 90% bootstrap interval of the median
    double ci_high = 0.0;
    double surrogate_mean = 0.0;  // wrong-hypothesis posterior mass (== mean for MSE)
    int n_episodes = 0;
    int failed = 0;
    std::vector<double> losses;  // per usable episode, episode order
};

namespace detail {

inline double quantile_sorted(std::span<const double> sorted, double q) {
    if (sorted.empty()) return 0.0;
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

inline double median_of(std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    return quantile_sorted(xs, 0.5);
}

}  // namespace detail

// Bootstrap 90% confidence interval for the median (1000 resamples), clamped
// to bracket the sample median.
inline void bootstrap_median_ci(std::span<const double> losses, RngStream& rng, double median,
                                double& ci_low, double& ci_high, int resamples = 1000) {
    const std::size_t n = losses.size();
    std::vector<double> medians(static_cast<std::size_t>(resamples));
    std::vector<double> draw(n);
    for (int r = 0; r < resamples; ++r) {
        for (std::size_t i = 0; i < n; ++i) {
            auto idx = static_cast<std::size_t>(rng.uniform() * static_cast<double>(n));
            if (idx >= n) idx = n - 1;
            draw[i] = losses[idx];
        }
        std::sort(draw.begin(), draw.end());
        medians[static_cast<std::size_t>(r)] = detail::quantile_sorted(draw, 0.5);
    }
    std::sort(medians.begin(), medians.end());
    ci_low = std::min(detail::quantile_sorted(medians, 0.05), median);
    ci_high = std::max(detail::quantile_sorted(medians, 0.95), median);
}

// Precision-vs-resource curve: for every budget, run n_episodes without
// gradients and report the hard metric's mean/median with a bootstrap CI.
inline std::vector<EvalPoint> evaluate(const SensorModel& model, const Agent& agent,
                                       std::span<const double> budgets, int max_steps,
                                       const FilterSettings& filter, const Loss& loss,
                                       int n_episodes, std::uint64_t seed, int workers = 1) {
    if (n_episodes < 100) throw std::invalid_argument("evaluate: n_episodes must be >= 100");
    loss.validate(model.param_dim());
    std::vector<EvalPoint> curve;
    curve.reserve(budgets.size());
    std::vector<ad::Tape> tapes(static_cast<std::size_t>(std::max(1, workers)));
    for (std::size_t k = 0; k < budgets.size(); ++k) {
        const ResourceBudget budget{budgets[k], max_steps};
        std::vector<double> metrics(static_cast<std::size_t>(n_episodes),
                                    std::numeric_limits<double>::quiet_NaN());
        std::vector<double> surrogates(static_cast<std::size_t>(n_episodes), 0.0);
        parallel_for(n_episodes, workers, [&](int worker, std::int64_t e) {
            ad::Tape& tape = tapes[static_cast<std::size_t>(worker)];
            tape.reset();
            const std::uint64_t index =
                static_cast<std::uint64_t>(k) * static_cast<std::uint64_t>(n_episodes) +
                static_cast<std::uint64_t>(e);
            const EpisodeTrace trace =
                run_episode(tape, model, agent, budget, filter, seed, index, "eval", false);
            if (!trace.failed) {
                metrics[static_cast<std::size_t>(e)] = episode_metric(trace, loss);
                surrogates[static_cast<std::size_t>(e)] = episode_surrogate(trace, loss);
            }
        });

        EvalPoint pt;
        pt.budget = budgets[k];
        pt.n_episodes = n_episodes;
        double total = 0.0, total_surrogate = 0.0;
        for (std::size_t e = 0; e < metrics.size(); ++e) {
            if (std::isnan(metrics[e])) {
                ++pt.failed;
                continue;
            }
            pt.losses.push_back(metrics[e]);
            total += metrics[e];
            total_surrogate += surrogates[e];
        }
        if (pt.losses.empty()) throw NumericalAbort("evaluate: all episodes failed");
        pt.mean = total / static_cast<double>(pt.losses.size());
        pt.surrogate_mean = total_surrogate / static_cast<double>(pt.losses.size());
        pt.median = detail::median_of(pt.losses);
        RngStream boot(seed, "bootstrap", k);
        bootstrap_median_ci(pt.losses, boot, pt.median, pt.ci_low, pt.ci_high);
        curve.push_back(std::move(pt));
    }
    return curve;
}

}  // namespace qest
