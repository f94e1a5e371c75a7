#pragma once

// Sensor-model contract: each model provides a differentiable log-likelihood
// over a finite outcome alphabet, an outcome sampler consistent with it, a
// per-measurement resource cost, and its prior/control spaces.
//
// Likelihoods are floored at 1e-12 before the log, and the same flooring is
// used when normalizing the sampling distribution, so a single unlucky
// outcome can never zero out the whole posterior.

#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "qest/autodiff.hpp"
#include "qest/prior.hpp"
#include "qest/rng.hpp"
#include "qest/tensor.hpp"

namespace qest {

inline constexpr double kLikelihoodFloor = 1e-12;

struct Outcome {
    int value = 0;
};

struct ResourceCost {
    double amount = 0.0;  // model's resource unit: microseconds or count
};

struct ControlSpace {
    std::vector<std::pair<double, double>> bounds;

    int dim() const { return static_cast<int>(bounds.size()); }
    double low(int i) const { return bounds[static_cast<std::size_t>(i)].first; }
    double high(int i) const { return bounds[static_cast<std::size_t>(i)].second; }

    void validate() const {
        if (bounds.empty()) throw std::invalid_argument("ControlSpace: empty");
        for (const auto& [lo, hi] : bounds)
            if (!(lo < hi)) throw std::invalid_argument("ControlSpace: low >= high");
    }

    bool contains(const Tensor& c) const {
        if (c.size() != dim()) return false;
        for (int i = 0; i < dim(); ++i)
            if (c[i] < low(i) || c[i] > high(i)) return false;
        return true;
    }
};

class SensorModel {
  public:
    virtual ~SensorModel() = default;

    virtual std::string id() const = 0;
    virtual int param_dim() const = 0;
    virtual int control_dim() const = 0;
    virtual int outcome_count() const = 0;
    virtual const Prior& prior() const = 0;
    virtual const ControlSpace& control_space() const = 0;
    virtual std::string resource_unit() const = 0;
    // Smallest possible cost of a single measurement; the episode loop uses
    // it to decide whether another step fits in the remaining budget.
    virtual double min_step_cost() const = 0;

    // log p(outcome | theta, control), vectorized over parameter candidates.
    // theta_cols[j] holds the j-th parameter for every candidate (vector(n)
    // or scalar); the result broadcasts accordingly. Differentiable in both
    // the control and the parameter columns.
    virtual ad::Variable log_likelihood(ad::Tape& tape,
                                        std::span<const ad::Variable> theta_cols,
                                        ad::Variable control, int outcome) const = 0;

    virtual ResourceCost resource_cost(const Tensor& control) const = 0;

    // ---- conveniences built on the virtual interface ----

    // Vectorized over the rows of a particle matrix (constants on the tape).
    ad::Variable log_likelihood_particles(ad::Tape& tape, const Tensor& particles,
                                          ad::Variable control, int outcome) const {
        const int n = particles.shape().rows, d = particles.shape().cols;
        std::vector<ad::Variable> cols;
        cols.reserve(static_cast<std::size_t>(d));
        for (int j = 0; j < d; ++j) {
            Tensor col(Shape::vector(n));
            for (int i = 0; i < n; ++i) col[i] = particles.at(i, j);
            cols.push_back(tape.leaf(col));
        }
        return log_likelihood(tape, cols, control, outcome);
    }

    // Single parameter point, as a taped scalar.
    ad::Variable log_likelihood_point(ad::Tape& tape, const Tensor& theta,
                                      ad::Variable control, int outcome) const {
        std::vector<ad::Variable> cols;
        cols.reserve(static_cast<std::size_t>(theta.size()));
        for (std::int64_t j = 0; j < theta.size(); ++j) cols.push_back(tape.leaf(theta[j]));
        return log_likelihood(tape, cols, control, outcome);
    }

    // Untaped scalar value.
    double log_likelihood_value(const Tensor& theta, const Tensor& control, int outcome) const {
        thread_local ad::Tape scratch;
        scratch.reset();
        const ad::Variable c = scratch.leaf(control);
        return scratch.value(log_likelihood_point(scratch, theta, c, outcome));
    }

    // Inverse-CDF draw over the finite alphabet using the floored, renormalized
    // outcome probabilities. Deterministic given the stream state.
    virtual Outcome sample_outcome(const Tensor& theta, const Tensor& control,
                                   RngStream& rng) const {
        const int k = outcome_count();
        std::vector<double> cumulative(static_cast<std::size_t>(k));
        double total = 0.0;
        for (int y = 0; y < k; ++y) {
            const double p = std::exp(log_likelihood_value(theta, control, y));
            total += p;
            cumulative[static_cast<std::size_t>(y)] = total;
        }
        if (!(std::fabs(total - 1.0) < 1e-8))
            throw std::domain_error(id() + ": outcome probabilities sum to " +
                                    std::to_string(total));
        return {static_cast<int>(rng.categorical(cumulative, total))};
    }

  protected:
    // log(max(p, floor)) with the standard likelihood floor.
    static ad::Variable floored_log(ad::Tape& tape, ad::Variable p) {
        return tape.log(tape.max(p, tape.leaf(kLikelihoodFloor)));
    }
};

// ---------------------------------------------------------------------------
// Ramsey measurement on a qubit: p(0 | omega, tau) = (1 + e^{-tau/T2} cos(omega tau)) / 2.
// Parameter: precession frequency omega (rad/us). Control: evolution time tau (us).
// Resource: evolution time plus a fixed per-measurement overhead.
// ---------------------------------------------------------------------------
class RamseyModel : public SensorModel {
  public:
    RamseyModel(std::pair<double, double> omega_bounds, std::pair<double, double> tau_bounds,
                double t2, double t_overhead = 0.0)
        : t2_(t2), t_overhead_(t_overhead) {
        if (!(t2 > 0.0)) throw std::invalid_argument("RamseyModel: T2 must be positive");
        if (tau_bounds.first < 0.0) throw std::invalid_argument("RamseyModel: tau < 0");
        if (t_overhead < 0.0) throw std::invalid_argument("RamseyModel: negative overhead");
        prior_.bounds = {omega_bounds};
        prior_.validate();
        controls_.bounds = {tau_bounds};
        controls_.validate();
    }

    std::string id() const override { return "ramsey"; }
    int param_dim() const override { return 1; }
    int control_dim() const override { return 1; }
    int outcome_count() const override { return 2; }
    const Prior& prior() const override { return prior_; }
    const ControlSpace& control_space() const override { return controls_; }
    std::string resource_unit() const override { return "us"; }
    double min_step_cost() const override { return controls_.low(0) + t_overhead_; }
    double t2() const { return t2_; }

    ad::Variable log_likelihood(ad::Tape& tape, std::span<const ad::Variable> theta_cols,
                                ad::Variable control, int outcome) const override {
        const ad::Variable tau = tape.index(control, 0);
        check_tau(tape.value(tau));
        const ad::Variable fringe = tape.cos(tape.mul(theta_cols[0], tau));
        const ad::Variable p0 = half_plus_half_damped(tape, damping(tape, tau), fringe);
        return floored_log(tape, outcome == 0 ? p0 : tape.sub(tape.leaf(1.0), p0));
    }

    ResourceCost resource_cost(const Tensor& control) const override {
        check_tau(control[0]);
        return {control[0] + t_overhead_};
    }

  protected:
    void check_tau(double tau) const {
        if (tau < 0.0) throw std::domain_error(id() + ": negative evolution time");
    }

    // e^{-tau/T2}; an infinite T2 contributes exactly 1.
    ad::Variable damping(ad::Tape& tape, ad::Variable tau) const {
        if (std::isinf(t2_)) return tape.leaf(1.0);
        return tape.exp(tape.neg(tape.div(tau, tape.leaf(t2_))));
    }

    // (1 + damp * fringe) / 2 with an operation order shared by the hyperfine
    // model, so the A=0 reduction is bit-exact.
    static ad::Variable half_plus_half_damped(ad::Tape& tape, ad::Variable damp,
                                              ad::Variable fringe) {
        const ad::Variable q = tape.mul(damp, fringe);
        return tape.mul(tape.add(tape.leaf(1.0), q), tape.leaf(0.5));
    }

    Prior prior_;
    ControlSpace controls_;
    double t2_;
    double t_overhead_;
};

// ---------------------------------------------------------------------------
// Parallel hyperfine coupling of the NV electron spin to a nearby 13C nucleus.
// The nuclear spin projection is an unpolarized classical mixture, so the
// Ramsey fringe splits into two components at omega0 +- A/2:
//   p(0 | A, tau) = (2 + e^{-tau/T2} (cos((omega0+A/2) tau) + cos((omega0-A/2) tau))) / 4.
// Reduces bit-exactly to the Ramsey model at A = 0.
// ---------------------------------------------------------------------------
class HyperfineModel : public RamseyModel {
  public:
    HyperfineModel(double omega0, std::pair<double, double> coupling_bounds,
                   std::pair<double, double> tau_bounds, double t2, double t_overhead = 0.0)
        : RamseyModel(coupling_bounds, tau_bounds, t2, t_overhead), omega0_(omega0) {
        if (omega0 < 0.0) throw std::invalid_argument("HyperfineModel: negative omega0");
    }

    std::string id() const override { return "hyperfine"; }
    double omega0() const { return omega0_; }

    ad::Variable log_likelihood(ad::Tape& tape, std::span<const ad::Variable> theta_cols,
                                ad::Variable control, int outcome) const override {
        const ad::Variable tau = tape.index(control, 0);
        check_tau(tape.value(tau));
        const ad::Variable half_a = tape.mul(theta_cols[0], tape.leaf(0.5));
        const ad::Variable w0 = tape.leaf(omega0_);
        const ad::Variable up = tape.cos(tape.mul(tape.add(w0, half_a), tau));
        const ad::Variable down = tape.cos(tape.mul(tape.sub(w0, half_a), tau));
        const ad::Variable q = tape.mul(damping(tape, tau), tape.add(up, down));
        const ad::Variable p0 = tape.mul(tape.add(tape.leaf(2.0), q), tape.leaf(0.25));
        return floored_log(tape, outcome == 0 ? p0 : tape.sub(tape.leaf(1.0), p0));
    }

  private:
    double omega0_;
};

// ---------------------------------------------------------------------------
// Segmented Dolinar receiver discriminating coherent states |+alpha> vs
// |-alpha>. The signal is split into `segments` slots of amplitude
// s * alpha/sqrt(M); each slot is displaced by the control beta and measured
// with an on/off detector: p(no-click | s, beta) = exp(-(s a_seg + beta)^2).
// Outcome 0 = no click, 1 = click. Resource: one segment per measurement.
// ---------------------------------------------------------------------------
class DolinarModel : public SensorModel {
  public:
    DolinarModel(double alpha_sq, int segments, std::pair<double, double> beta_bounds)
        : alpha_sq_(alpha_sq), segments_(segments) {
        if (!(alpha_sq > 0.0)) throw std::invalid_argument("DolinarModel: |alpha|^2 <= 0");
        if (segments < 1) throw std::invalid_argument("DolinarModel: segments < 1");
        seg_amplitude_ = std::sqrt(alpha_sq / segments);
        prior_.bounds = {{-1.0, 1.0}};
        prior_.hypotheses = {Tensor::vector({1.0}), Tensor::vector({-1.0})};
        prior_.validate();
        controls_.bounds = {beta_bounds};
        controls_.validate();
    }

    std::string id() const override { return "dolinar"; }
    int param_dim() const override { return 1; }
    int control_dim() const override { return 1; }
    int outcome_count() const override { return 2; }
    const Prior& prior() const override { return prior_; }
    const ControlSpace& control_space() const override { return controls_; }
    std::string resource_unit() const override { return "count"; }
    double min_step_cost() const override { return 1.0; }
    int segments() const { return segments_; }
    double alpha_sq() const { return alpha_sq_; }
    double segment_amplitude() const { return seg_amplitude_; }

    ad::Variable log_likelihood(ad::Tape& tape, std::span<const ad::Variable> theta_cols,
                                ad::Variable control, int outcome) const override {
        const ad::Variable beta = tape.index(control, 0);
        const ad::Variable amp =
            tape.add(tape.mul(theta_cols[0], tape.leaf(seg_amplitude_)), beta);
        const ad::Variable p_dark = tape.exp(tape.neg(tape.square(amp)));
        return floored_log(tape, outcome == 0 ? p_dark : tape.sub(tape.leaf(1.0), p_dark));
    }

    ResourceCost resource_cost(const Tensor&) const override { return {1.0}; }

  private:
    Prior prior_;
    ControlSpace controls_;
    double alpha_sq_;
    int segments_;
    double seg_amplitude_;
};

}  // namespace qest
