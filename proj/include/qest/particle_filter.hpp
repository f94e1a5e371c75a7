#pragma once

// Sequential Monte Carlo representation of the Bayesian posterior over the
// unknown parameters. Particle positions are plain tensors; the weights
// live on the autodiff tape in log domain, so a Bayes update built from
// taped likelihoods stays differentiable. Resampling is a deliberate
// differentiation barrier: it reads primal values only and re-seeds the
// weights as a fresh constant leaf.

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "qest/autodiff.hpp"
#include "qest/prior.hpp"
#include "qest/rng.hpp"
#include "qest/tensor.hpp"

namespace qest {

struct FilterCollapse : std::runtime_error {
    FilterCollapse() : std::runtime_error("particle filter collapse: zero posterior mass") {}
};

struct ParticleEnsemble {
    Tensor particles;          // n_particles x d_params
    ad::Variable log_weights;  // vector(n_particles), normalized after every update

    int n() const { return particles.shape().rows; }
    int d() const { return particles.shape().cols; }
    ad::Tape& tape() const { return *log_weights.tape; }
};

struct PosteriorSummary {
    Tensor mean;        // d
    Tensor covariance;  // d x d
    Tensor std;         // d
    double ess = 0.0;
    // Taped counterparts used on the differentiable path (posterior mean is
    // the estimator; std feeds the agent features).
    ad::Variable mean_var;  // vector(d)
    ad::Variable std_var;   // vector(d)
};

namespace detail {

inline double log_weight_norm(const ParticleEnsemble& ens) {
    const auto lw = ens.tape().values(ens.log_weights);
    double m = -std::numeric_limits<double>::infinity();
    for (double x : lw) m = std::max(m, x);
    if (!std::isfinite(m)) return m;
    double acc = 0.0;
    for (double x : lw) acc += std::exp(x - m);
    return m + std::log(acc);
}

inline void require_normalized(const ParticleEnsemble& ens, const char* who) {
    const double norm = log_weight_norm(ens);
    if (!(std::fabs(norm) < 1e-9))
        throw std::invalid_argument(std::string(who) + ": weights are not normalized");
}

}  // namespace detail

// Particles i.i.d. from the prior with uniform weights. A discrete prior
// is represented exactly: one particle per hypothesis point.
inline ParticleEnsemble init_from_prior(ad::Tape& tape, const Prior& prior, int n,
                                        RngStream& rng) {
    prior.validate();
    if (prior.discrete()) {
        const int h = static_cast<int>(prior.hypotheses.size());
        Tensor particles(Shape::matrix(h, prior.dim()));
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < prior.dim(); ++j)
                particles.at(i, j) = prior.hypotheses[static_cast<std::size_t>(i)][j];
        Tensor lw(Shape::vector(h), -std::log(static_cast<double>(h)));
        return {std::move(particles), tape.leaf(lw)};
    }
    if (n < 2) throw std::invalid_argument("init_from_prior: need at least 2 particles");
    Tensor particles(Shape::matrix(n, prior.dim()));
    for (int i = 0; i < n; ++i) {
        const Tensor draw = prior.sample(rng);
        for (int j = 0; j < prior.dim(); ++j) particles.at(i, j) = draw[j];
    }
    Tensor lw(Shape::vector(n), -std::log(static_cast<double>(n)));
    return {std::move(particles), tape.leaf(lw)};
}

// Bayes rule in log domain: add the log-likelihood of the observed outcome
// to each particle's log-weight, then renormalize. Differentiable in the
// likelihoods (and in the incoming weights).
inline ParticleEnsemble bayes_update(const ParticleEnsemble& ens,
                                     ad::Variable log_likelihoods) {
    ad::Tape& tape = ens.tape();
    if (log_likelihoods.shape != Shape::vector(ens.n()))
        throw std::invalid_argument("bayes_update: likelihood vector has wrong shape");
    const auto ll = tape.values(log_likelihoods);
    bool any_finite = false;
    for (double x : ll) {
        if (std::isnan(x) || x == std::numeric_limits<double>::infinity())
            throw std::invalid_argument("bayes_update: log-likelihood must be finite or -inf");
        any_finite = any_finite || std::isfinite(x);
    }
    if (!any_finite) throw FilterCollapse();
    ad::Variable lw = tape.add(ens.log_weights, log_likelihoods);
    ad::Variable norm = tape.logsumexp(lw);
    if (!std::isfinite(tape.value(norm))) throw FilterCollapse();
    return {ens.particles, tape.sub(lw, norm)};
}

// 1 / sum(w_i^2); requires normalized weights.
inline double effective_sample_size(const ParticleEnsemble& ens) {
    detail::require_normalized(ens, "effective_sample_size");
    const auto lw = ens.tape().values(ens.log_weights);
    double acc = 0.0;
    for (double x : lw) {
        const double w = std::exp(x);
        acc += w * w;
    }
    return 1.0 / acc;
}

// Weighted mean / covariance / std / ESS. The taped mean is the estimator
// path; the taped std feeds the agent features.
inline PosteriorSummary summarize(const ParticleEnsemble& ens) {
    ad::Tape& tape = ens.tape();
    const int n = ens.n(), d = ens.d();
    ad::Variable w = tape.exp(ens.log_weights);

    std::vector<ad::Variable> mean_parts, std_parts;
    std::vector<ad::Variable> columns;
    mean_parts.reserve(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) {
        Tensor col(Shape::vector(n));
        for (int i = 0; i < n; ++i) col[i] = ens.particles.at(i, j);
        ad::Variable cj = tape.leaf(col);
        columns.push_back(cj);
        mean_parts.push_back(tape.sum(tape.mul(w, cj)));
    }
    ad::Variable zero = tape.leaf(0.0);
    for (int j = 0; j < d; ++j) {
        ad::Variable centered = tape.sub(columns[static_cast<std::size_t>(j)],
                                         mean_parts[static_cast<std::size_t>(j)]);
        ad::Variable var = tape.sum(tape.mul(w, tape.square(centered)));
        std_parts.push_back(tape.sqrt(tape.max(var, zero)));
    }

    PosteriorSummary s;
    s.mean_var = tape.pack(mean_parts);
    s.std_var = tape.pack(std_parts);
    s.mean = tape.tensor(s.mean_var);
    s.std = tape.tensor(s.std_var);

    // Detached covariance and ESS from primal values.
    const auto lw = tape.values(ens.log_weights);
    std::vector<double> wv(static_cast<std::size_t>(n));
    double sq = 0.0;
    for (int i = 0; i < n; ++i) {
        wv[static_cast<std::size_t>(i)] = std::exp(lw[i]);
        sq += wv[static_cast<std::size_t>(i)] * wv[static_cast<std::size_t>(i)];
    }
    s.ess = 1.0 / sq;
    s.covariance = Tensor(Shape::matrix(d, d));
    for (int j = 0; j < d; ++j)
        for (int k = j; k < d; ++k) {
            double acc = 0.0;
            for (int i = 0; i < n; ++i)
                acc += wv[static_cast<std::size_t>(i)] * (ens.particles.at(i, j) - s.mean[j]) *
                       (ens.particles.at(i, k) - s.mean[k]);
            s.covariance.at(j, k) = acc;
            s.covariance.at(k, j) = acc;
        }
    return s;
}

namespace detail {

// Cholesky factor of a small SPD matrix; returns false if it breaks down.
inline bool cholesky(const Tensor& m, Tensor& l) {
    const int d = m.shape().rows;
    l = Tensor(Shape::matrix(d, d));
    for (int i = 0; i < d; ++i) {
        for (int j = 0; j <= i; ++j) {
            double acc = m.at(i, j);
            for (int k = 0; k < j; ++k) acc -= l.at(i, k) * l.at(j, k);
            if (i == j) {
                if (acc <= 0.0) return false;
                l.at(i, i) = std::sqrt(acc);
            } else {
                l.at(i, j) = acc / l.at(j, j);
            }
        }
    }
    return true;
}

}  // namespace detail

// Systematic resampling with Liu-West shrinkage jitter. Reads primal
// weights only; the result carries fresh uniform log-weights, so no
// gradient flows through the index selection or the jitter moments.
inline ParticleEnsemble resample(const ParticleEnsemble& ens, double shrink_a,
                                 const Prior& prior, RngStream& rng) {
    detail::require_normalized(ens, "resample");
    if (!(shrink_a > 0.0 && shrink_a <= 1.0))
        throw std::invalid_argument("resample: shrinkage parameter must be in (0, 1]");
    ad::Tape& tape = ens.tape();
    const int n = ens.n(), d = ens.d();

    const auto lw = tape.values(ens.log_weights);
    std::vector<double> weights(static_cast<std::size_t>(n));
    std::vector<double> cumulative(static_cast<std::size_t>(n));
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        weights[static_cast<std::size_t>(i)] = std::exp(lw[i]);
        acc += weights[static_cast<std::size_t>(i)];
        cumulative[static_cast<std::size_t>(i)] = acc;
    }

    // Detached moments for the jitter (no tape traffic).
    Tensor mean(Shape::vector(d));
    for (int j = 0; j < d; ++j) {
        double m = 0.0;
        for (int i = 0; i < n; ++i) m += weights[static_cast<std::size_t>(i)] * ens.particles.at(i, j);
        mean[j] = m;
    }
    Tensor cov(Shape::matrix(d, d));
    for (int j = 0; j < d; ++j)
        for (int k = j; k < d; ++k) {
            double c = 0.0;
            for (int i = 0; i < n; ++i)
                c += weights[static_cast<std::size_t>(i)] * (ens.particles.at(i, j) - mean[j]) *
                     (ens.particles.at(i, k) - mean[k]);
            cov.at(j, k) = c;
            cov.at(k, j) = c;
        }
    for (int j = 0; j < d; ++j) {
        const double floor = 1e-12 * prior.width(j) * prior.width(j);
        if (cov.at(j, j) < floor) cov.at(j, j) = floor;
    }
    Tensor chol;
    if (!detail::cholesky(cov, chol)) {
        // Degenerate cross-correlations: fall back to the diagonal.
        chol = Tensor(Shape::matrix(d, d));
        for (int j = 0; j < d; ++j) chol.at(j, j) = std::sqrt(cov.at(j, j));
    }

    // Systematic selection: positions (k + u)/n against the cumulative sum.
    const double u = rng.uniform();
    Tensor out(Shape::matrix(n, d));
    const double noise_scale = std::sqrt(1.0 - shrink_a * shrink_a);
    int src = 0;
    for (int k = 0; k < n; ++k) {
        const double pos = (k + u) / n * acc;
        while (src < n - 1 && cumulative[static_cast<std::size_t>(src)] <= pos) ++src;
        for (int j = 0; j < d; ++j) out.at(k, j) = ens.particles.at(src, j);
    }
    std::vector<double> z(static_cast<std::size_t>(d));
    for (int k = 0; k < n; ++k) {
        for (int j = 0; j < d; ++j) z[static_cast<std::size_t>(j)] = rng.normal();
        for (int j = 0; j < d; ++j) {
            double eta = 0.0;
            for (int m = 0; m <= j; ++m) eta += chol.at(j, m) * z[static_cast<std::size_t>(m)];
            const double shrunk = shrink_a * out.at(k, j) + (1.0 - shrink_a) * mean[j];
            out.at(k, j) = prior.clip(j, shrunk + noise_scale * eta);
        }
    }

    Tensor uniform_lw(Shape::vector(n), -std::log(static_cast<double>(n)));
    return {std::move(out), tape.leaf(uniform_lw)};
}

// Debug/replay snapshot of the ensemble state.
inline nlohmann::json snapshot(const ParticleEnsemble& ens) {
    nlohmann::json j;
    auto& parts = j["particles"] = nlohmann::json::array();
    for (int i = 0; i < ens.n(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (int k = 0; k < ens.d(); ++k) row.push_back(ens.particles.at(i, k));
        parts.push_back(std::move(row));
    }
    auto& lw = j["log_weights"] = nlohmann::json::array();
    for (double x : ens.tape().values(ens.log_weights)) lw.push_back(x);
    return j;
}

inline ParticleEnsemble from_snapshot(ad::Tape& tape, const nlohmann::json& j) {
    const auto& parts = j.at("particles");
    const auto& lw = j.at("log_weights");
    const int n = static_cast<int>(parts.size());
    if (n < 1 || lw.size() != parts.size())
        throw std::invalid_argument("ensemble snapshot: inconsistent sizes");
    const int d = static_cast<int>(parts.at(0).size());
    Tensor particles(Shape::matrix(n, d));
    for (int i = 0; i < n; ++i)
        for (int k = 0; k < d; ++k)
            particles.at(i, k) = parts.at(static_cast<std::size_t>(i)).at(static_cast<std::size_t>(k)).get<double>();
    Tensor weights(Shape::vector(n));
    for (int i = 0; i < n; ++i) weights[i] = lw.at(static_cast<std::size_t>(i)).get<double>();
    return {std::move(particles), tape.leaf(weights)};
}

}  // namespace qest
