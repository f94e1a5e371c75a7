#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "qest/particle_filter.hpp"
#include "qest/sensors.hpp"

using namespace qest;
using ad::Tape;
using ad::Variable;

namespace {

ParticleEnsemble make_ensemble(Tape& tape, const std::vector<double>& particles,
                               const std::vector<double>& weights) {
    const int n = static_cast<int>(particles.size());
    Tensor p(Shape::matrix(n, 1));
    Tensor lw(Shape::vector(n));
    for (int i = 0; i < n; ++i) {
        p.at(i, 0) = particles[static_cast<std::size_t>(i)];
        lw[i] = std::log(weights[static_cast<std::size_t>(i)]);
    }
    return {std::move(p), tape.leaf(lw)};
}

std::vector<double> weights_of(const ParticleEnsemble& ens) {
    std::vector<double> w;
    for (double lw : ens.tape().values(ens.log_weights)) w.push_back(std::exp(lw));
    return w;
}

}  // namespace

TEST_CASE("init_from_prior basics") {
    Prior prior;
    prior.bounds = {{0.0, 1.0}};

    SECTION("uniform prior, n=4: uniform weights inside the box") {
        Tape tape;
        RngStream rng(1, "init", 0);
        const ParticleEnsemble ens = init_from_prior(tape, prior, 4, rng);
        for (double w : weights_of(ens)) CHECK(w == Catch::Approx(0.25).margin(1e-15));
        for (int i = 0; i < 4; ++i) {
            CHECK(ens.particles.at(i, 0) >= 0.0);
            CHECK(ens.particles.at(i, 0) <= 1.0);
        }
    }
    SECTION("fixed seed twice gives identical ensembles") {
        Tape tape;
        RngStream r1(7, "init", 3), r2(7, "init", 3);
        const ParticleEnsemble a = init_from_prior(tape, prior, 32, r1);
        const ParticleEnsemble b = init_from_prior(tape, prior, 32, r2);
        CHECK(a.particles == b.particles);
    }
    SECTION("sample mean obeys the CLT bound") {
        Tape tape;
        RngStream rng(2, "init", 0);
        const ParticleEnsemble ens = init_from_prior(tape, prior, 10000, rng);
        double mean = 0.0;
        for (int i = 0; i < ens.n(); ++i) mean += ens.particles.at(i, 0);
        mean /= ens.n();
        CHECK(std::fabs(mean - 0.5) < 0.02);
    }
    SECTION("errors") {
        Tape tape;
        RngStream rng(1, "init", 0);
        CHECK_THROWS_AS(init_from_prior(tape, prior, 1, rng), std::invalid_argument);
        Prior degenerate;
        degenerate.bounds = {{0.5, 0.5}};
        CHECK_THROWS_AS(init_from_prior(tape, degenerate, 8, rng), std::invalid_argument);
    }
}

TEST_CASE("bayes_update arithmetic") {
    SECTION("equal likelihoods leave weights unchanged") {
        Tape tape;
        const ParticleEnsemble ens = make_ensemble(tape, {0.1, 0.9}, {0.5, 0.5});
        const Variable ll = tape.leaf(Tensor::vector({std::log(0.3), std::log(0.3)}));
        const auto w = weights_of(bayes_update(ens, ll));
        CHECK(w[0] == Catch::Approx(0.5).margin(1e-14));
        CHECK(w[1] == Catch::Approx(0.5).margin(1e-14));
    }
    SECTION("uniform weights times likelihoods [.8,.2]") {
        Tape tape;
        const ParticleEnsemble ens = make_ensemble(tape, {0.1, 0.9}, {0.5, 0.5});
        const Variable ll = tape.leaf(Tensor::vector({std::log(0.8), std::log(0.2)}));
        const auto w = weights_of(bayes_update(ens, ll));
        CHECK(w[0] == Catch::Approx(0.8).margin(1e-14));
        CHECK(w[1] == Catch::Approx(0.2).margin(1e-14));
    }
    SECTION("normalization invariant") {
        Tape tape;
        ParticleEnsemble ens = make_ensemble(tape, {0.1, 0.5, 0.9}, {1 / 3.0, 1 / 3.0, 1 / 3.0});
        RngStream rng(3, "bayes", 0);
        for (int step = 0; step < 30; ++step) {
            Tensor ll(Shape::vector(3));
            for (int i = 0; i < 3; ++i) ll[i] = std::log(rng.uniform(0.05, 1.0));
            ens = bayes_update(ens, tape.leaf(ll));
            CHECK(std::fabs(detail::log_weight_norm(ens)) < 1e-12);
        }
    }
    SECTION("all -inf collapses") {
        Tape tape;
        const ParticleEnsemble ens = make_ensemble(tape, {0.1, 0.9}, {0.5, 0.5});
        const Variable zeros = tape.leaf(Tensor::vector({0.0, 0.0}));
        const Variable ll = tape.log(zeros);  // -inf, -inf
        CHECK_THROWS_AS(bayes_update(ens, ll), FilterCollapse);
    }
}

TEST_CASE("effective sample size") {
    Tape tape;
    SECTION("uniform over n gives n") {
        const ParticleEnsemble ens =
            make_ensemble(tape, {1, 2, 3, 4}, {0.25, 0.25, 0.25, 0.25});
        CHECK(effective_sample_size(ens) == Catch::Approx(4.0).margin(1e-12));
    }
    SECTION("one-hot gives 1") {
        Tensor p(Shape::matrix(3, 1));
        Tensor lw(Shape::vector(3));
        lw[0] = 0.0;
        lw[1] = -800.0;
        lw[2] = -800.0;
        const ParticleEnsemble ens{p, tape.leaf(lw)};
        CHECK(effective_sample_size(ens) == Catch::Approx(1.0).margin(1e-12));
    }
    SECTION("[.5,.25,.25] gives 8/3") {
        const ParticleEnsemble ens = make_ensemble(tape, {1, 2, 3}, {0.5, 0.25, 0.25});
        CHECK(effective_sample_size(ens) == Catch::Approx(8.0 / 3.0).margin(1e-12));
    }
    SECTION("unnormalized input rejected") {
        Tensor p(Shape::matrix(2, 1));
        Tensor lw(Shape::vector(2));
        lw[0] = std::log(0.5);
        lw[1] = std::log(0.25);
        const ParticleEnsemble ens{p, tape.leaf(lw)};
        CHECK_THROWS_AS(effective_sample_size(ens), std::invalid_argument);
    }
}

TEST_CASE("summarize") {
    SECTION("two particles at +-1: mean 0, variance 1") {
        Tape tape;
        const ParticleEnsemble ens = make_ensemble(tape, {1.0, -1.0}, {0.5, 0.5});
        const PosteriorSummary s = summarize(ens);
        CHECK(s.mean[0] == Catch::Approx(0.0).margin(1e-15));
        CHECK(s.covariance.at(0, 0) == Catch::Approx(1.0).margin(1e-14));
        CHECK(s.std[0] == Catch::Approx(1.0).margin(1e-14));
        CHECK(s.ess == Catch::Approx(2.0).margin(1e-12));
    }
    SECTION("one-hot: zero covariance") {
        Tape tape;
        Tensor p(Shape::matrix(2, 1));
        p.at(0, 0) = 0.3;
        p.at(1, 0) = 0.8;
        Tensor lw(Shape::vector(2));
        lw[0] = 0.0;
        lw[1] = -900.0;
        const ParticleEnsemble ens{p, tape.leaf(lw)};
        const PosteriorSummary s = summarize(ens);
        CHECK(s.mean[0] == Catch::Approx(0.3).margin(1e-12));
        CHECK(s.covariance.at(0, 0) == Catch::Approx(0.0).margin(1e-12));
    }
    SECTION("large normal sample") {
        Tape tape;
        RngStream rng(17, "normal", 0);
        const int n = 100000;
        std::vector<double> particles(static_cast<std::size_t>(n));
        std::vector<double> weights(static_cast<std::size_t>(n), 1.0 / n);
        for (auto& x : particles) x = 2.0 + 0.5 * rng.normal();
        const ParticleEnsemble ens = make_ensemble(tape, particles, weights);
        const PosteriorSummary s = summarize(ens);
        CHECK(std::fabs(s.mean[0] - 2.0) < 0.007);
        CHECK(std::fabs(s.covariance.at(0, 0) - 0.25) < 0.01);
    }
    SECTION("permutation invariance") {
        Tape tape;
        RngStream rng(23, "perm", 0);
        const int n = 64;
        std::vector<double> particles(static_cast<std::size_t>(n)),
            weights(static_cast<std::size_t>(n));
        double total = 0.0;
        for (int i = 0; i < n; ++i) {
            particles[static_cast<std::size_t>(i)] = rng.uniform(-1, 1);
            weights[static_cast<std::size_t>(i)] = rng.uniform(0.01, 1.0);
            total += weights[static_cast<std::size_t>(i)];
        }
        for (auto& w : weights) w /= total;
        const ParticleEnsemble a = make_ensemble(tape, particles, weights);
        std::vector<double> p2(particles.rbegin(), particles.rend());
        std::vector<double> w2(weights.rbegin(), weights.rend());
        const ParticleEnsemble b = make_ensemble(tape, p2, w2);
        const PosteriorSummary sa = summarize(a), sb = summarize(b);
        CHECK(std::fabs(sa.mean[0] - sb.mean[0]) < 1e-12);
        CHECK(std::fabs(sa.covariance.at(0, 0) - sb.covariance.at(0, 0)) < 1e-12);
        CHECK(std::fabs(sa.ess - sb.ess) < 1e-9);
    }
}

TEST_CASE("resample") {
    Prior prior;
    prior.bounds = {{-10.0, 10.0}};

    SECTION("one-hot weight yields n copies pre-jitter") {
        Tape tape;
        Tensor p(Shape::matrix(4, 1));
        for (int i = 0; i < 4; ++i) p.at(i, 0) = i;
        Tensor lw(Shape::vector(4), -900.0);
        lw[2] = 0.0;
        const ParticleEnsemble ens{p, tape.leaf(lw)};
        RngStream rng(5, "resample", 0);
        const ParticleEnsemble out = resample(ens, 1.0, prior, rng);  // a=1: no jitter
        for (int i = 0; i < 4; ++i) CHECK(out.particles.at(i, 0) == 2.0);
        for (double w : weights_of(out)) CHECK(w == Catch::Approx(0.25).margin(1e-15));
    }
    SECTION("a=1 keeps selected particles exactly") {
        Tape tape;
        const ParticleEnsemble ens =
            make_ensemble(tape, {0.0, 1.0, 2.0, 3.0}, {0.25, 0.25, 0.25, 0.25});
        RngStream rng(6, "resample", 0);
        const ParticleEnsemble out = resample(ens, 1.0, prior, rng);
        for (int i = 0; i < out.n(); ++i) {
            const double v = out.particles.at(i, 0);
            CHECK((v == 0.0 || v == 1.0 || v == 2.0 || v == 3.0));
        }
    }
    SECTION("expected copy counts match weights (systematic, Monte Carlo)") {
        Tape tape;
        const std::vector<double> w{0.4, 0.3, 0.2, 0.1};
        const ParticleEnsemble ens = make_ensemble(tape, {0, 1, 2, 3}, w);
        const int trials = 10000;
        std::vector<double> copies(4, 0.0);
        for (int t = 0; t < trials; ++t) {
            RngStream rng(100, "resample", static_cast<std::uint64_t>(t));
            const ParticleEnsemble out = resample(ens, 1.0, prior, rng);
            for (int i = 0; i < out.n(); ++i)
                copies[static_cast<std::size_t>(static_cast<int>(out.particles.at(i, 0)))] += 1.0;
        }
        for (int k = 0; k < 4; ++k) {
            const double expect = 4.0 * w[static_cast<std::size_t>(k)] * trials;
            const double sigma = std::sqrt(4.0 * w[static_cast<std::size_t>(k)] *
                                           (1 - w[static_cast<std::size_t>(k)]) * trials);
            CHECK(std::fabs(copies[static_cast<std::size_t>(k)] - expect) < 4.0 * sigma);
        }
    }
    SECTION("preserves the weighted mean in expectation") {
        Tape tape;
        RngStream setup(9, "setup", 0);
        const int n = 32;
        std::vector<double> particles(static_cast<std::size_t>(n)),
            weights(static_cast<std::size_t>(n));
        double total = 0.0;
        for (int i = 0; i < n; ++i) {
            particles[static_cast<std::size_t>(i)] = setup.uniform(-2, 2);
            weights[static_cast<std::size_t>(i)] = setup.uniform(0.01, 1.0);
            total += weights[static_cast<std::size_t>(i)];
        }
        for (auto& w : weights) w /= total;
        const ParticleEnsemble ens = make_ensemble(tape, particles, weights);
        const double pre_mean = summarize(ens).mean[0];

        const int trials = 10000;
        double post_total = 0.0, post_sq = 0.0;
        for (int t = 0; t < trials; ++t) {
            Tape scratch;
            const ParticleEnsemble copy = make_ensemble(scratch, particles, weights);
            RngStream rng(200, "resample", static_cast<std::uint64_t>(t));
            const ParticleEnsemble out = resample(copy, 0.98, prior, rng);
            double m = 0.0;
            for (int i = 0; i < out.n(); ++i) m += out.particles.at(i, 0);
            m /= out.n();
            post_total += m;
            post_sq += m * m;
        }
        const double post_mean = post_total / trials;
        const double post_var = post_sq / trials - post_mean * post_mean;
        const double se = std::sqrt(post_var / trials);
        CHECK(std::fabs(post_mean - pre_mean) < 4.0 * se);
    }
}

TEST_CASE("posterior oracle equivalence: particle filter vs dense-grid Bayes") {
    // 1-parameter Ramsey likelihood on a shared 200-point grid, 20 random
    // outcome sequences, no resampling. The oracle multiplies floored
    // likelihoods over the grid and normalizes once at the end.
    const double t2 = 40.0;
    const RamseyModel model({0.0, 1.0}, {0.1, 100.0}, t2);
    const int n_grid = 200;
    std::vector<double> grid(static_cast<std::size_t>(n_grid));
    for (int k = 0; k < n_grid; ++k) grid[static_cast<std::size_t>(k)] = k / (n_grid - 1.0);

    for (int sequence = 0; sequence < 20; ++sequence) {
        RngStream rng(3000, "sequence", static_cast<std::uint64_t>(sequence));
        Tape tape;
        ParticleEnsemble ens =
            make_ensemble(tape, grid, std::vector<double>(static_cast<std::size_t>(n_grid),
                                                          1.0 / n_grid));
        std::vector<double> log_post(static_cast<std::size_t>(n_grid),
                                     std::log(1.0 / n_grid));
        for (int step = 0; step < 20; ++step) {
            const double tau = rng.uniform(0.5, 20.0);
            const int y = rng.uniform() < 0.5 ? 0 : 1;
            const Variable control = tape.leaf(Tensor::vector({tau}));
            ens = bayes_update(ens,
                               model.log_likelihood_particles(tape, ens.particles, control, y));
            for (int k = 0; k < n_grid; ++k) {
                const double p0 =
                    0.5 * (1.0 + std::exp(-tau / t2) *
                                     std::cos(grid[static_cast<std::size_t>(k)] * tau));
                const double p = y == 0 ? p0 : 1.0 - p0;
                log_post[static_cast<std::size_t>(k)] += std::log(std::max(p, 1e-12));
            }
        }
        double m = -std::numeric_limits<double>::infinity();
        for (double x : log_post) m = std::max(m, x);
        double acc = 0.0;
        for (double x : log_post) acc += std::exp(x - m);
        const double norm = m + std::log(acc);

        const auto lw = tape.values(ens.log_weights);
        double max_rel = 0.0;
        for (int k = 0; k < n_grid; ++k) {
            const double oracle = std::exp(log_post[static_cast<std::size_t>(k)] - norm);
            const double pf = std::exp(lw[k]);
            max_rel = std::max(max_rel, std::fabs(pf - oracle) / std::max(oracle, 1e-300));
        }
        INFO("sequence " << sequence);
        CHECK(max_rel < 1e-10);
    }
}

TEST_CASE("bayes update is differentiable: temperature gradient vs finite differences") {
    // Scale the log-likelihoods by a temperature and differentiate the
    // posterior mean with respect to it.
    const std::vector<double> particles{0.1, 0.4, 0.7, 0.95};
    const std::vector<double> loglik{std::log(0.9), std::log(0.4), std::log(0.2),
                                     std::log(0.05)};
    const auto posterior_mean = [&](double temperature, Tape& tape, bool grad,
                                    Variable* temp_out) {
        const Variable temp = tape.leaf(temperature, grad);
        if (temp_out != nullptr) *temp_out = temp;
        ParticleEnsemble ens = make_ensemble(tape, particles, std::vector<double>(4, 0.25));
        Tensor ll(Shape::vector(4));
        for (int i = 0; i < 4; ++i) ll[i] = loglik[static_cast<std::size_t>(i)];
        const Variable scaled = tape.mul(tape.leaf(ll), temp);
        ens = bayes_update(ens, scaled);
        return tape.index(summarize(ens).mean_var, 0);
    };

    Tape tape;
    Variable temp;
    const Variable mean = posterior_mean(1.3, tape, true, &temp);
    const ad::GradientMap g = tape.backward(mean);
    const double h = 1e-5;
    Tape tp, tm;
    const double fd = (tp.value(posterior_mean(1.3 + h, tp, false, nullptr)) -
                       tm.value(posterior_mean(1.3 - h, tm, false, nullptr))) /
                      (2 * h);
    CHECK(std::fabs(g.at(temp.id).value() - fd) / std::max(1.0, std::fabs(fd)) < 1e-5);
}

TEST_CASE("ensemble snapshot round-trip") {
    Tape tape;
    RngStream rng(31, "snap", 0);
    const int n = 16;
    std::vector<double> particles(static_cast<std::size_t>(n)),
        weights(static_cast<std::size_t>(n));
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        particles[static_cast<std::size_t>(i)] = rng.uniform(-3, 3);
        weights[static_cast<std::size_t>(i)] = rng.uniform(0.01, 1.0);
        total += weights[static_cast<std::size_t>(i)];
    }
    for (auto& w : weights) w /= total;
    const ParticleEnsemble ens = make_ensemble(tape, particles, weights);
    const nlohmann::json j = snapshot(ens);
    const std::string text = j.dump();
    const ParticleEnsemble back = from_snapshot(tape, nlohmann::json::parse(text));
    CHECK(back.particles == ens.particles);
    const auto lw1 = tape.values(ens.log_weights);
    const auto lw2 = tape.values(back.log_weights);
    for (int i = 0; i < n; ++i) CHECK(lw1[i] == lw2[i]);
}
