#pragma once

// Control policies: map a posterior summary (plus budget/step bookkeeping)
// to the next measurement's controls. Trainable agents (MLP, static
// schedule) keep persistent parameter tensors and lift them onto the
// episode's tape in bind(); heuristic agents (PGH, sigma-inverse, random)
// need no tape state at all.
//
// Agent inputs are detached: features are built from the taped posterior
// summary and wrapped in stop_gradient, so gradients reach the agent's
// parameters only through its outputs.

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "qest/autodiff.hpp"
#include "qest/particle_filter.hpp"
#include "qest/prior.hpp"
#include "qest/rng.hpp"
#include "qest/sensors.hpp"
#include "qest/tensor.hpp"

namespace qest {

struct ParamSet {
    std::vector<std::string> names;
    std::vector<Tensor> values;

    std::size_t count() const { return values.size(); }
    std::int64_t scalar_count() const {
        std::int64_t n = 0;
        for (const Tensor& t : values) n += t.size();
        return n;
    }
};

struct DecisionContext {
    ad::Tape& tape;
    const ParticleEnsemble& ensemble;
    const PosteriorSummary& summary;
    const Prior& prior;
    const ControlSpace& controls;
    std::span<const ad::Variable> params;  // this episode's bound parameter leaves
    double consumed_fraction = 0.0;        // in [0, 1]
    int step = 0;
    int max_steps = 1;
    int last_outcome = -1;  // -1 before the first measurement
    int outcome_count = 2;
    RngStream* rng = nullptr;
};

// Normalized feature vector fed to function-approximator agents:
//   per parameter: posterior mean mapped affinely to [-1, 1] over the prior box,
//   per parameter: ln(std / prior width) clamped to [-10, 0], mapped to [-1, 1],
//   consumed-resource fraction, last outcome in [-1, 1], step-index fraction.
// The result is wrapped in stop_gradient.
inline ad::Variable build_features(const DecisionContext& ctx) {
    ad::Tape& tape = ctx.tape;
    std::vector<ad::Variable> feats;
    const int d = ctx.prior.dim();
    feats.reserve(static_cast<std::size_t>(2 * d + 3));
    for (int j = 0; j < d; ++j) {
        const ad::Variable m = tape.index(ctx.summary.mean_var, j);
        const double lo = ctx.prior.low(j), w = ctx.prior.width(j);
        feats.push_back(tape.sub(tape.mul(tape.sub(m, tape.leaf(lo)), tape.leaf(2.0 / w)),
                                 tape.leaf(1.0)));
    }
    for (int j = 0; j < d; ++j) {
        const ad::Variable s = tape.index(ctx.summary.std_var, j);
        const ad::Variable lg =
            tape.clamp(tape.log(tape.div(s, tape.leaf(ctx.prior.width(j)))), -10.0, 0.0);
        feats.push_back(tape.add(tape.mul(lg, tape.leaf(0.2)), tape.leaf(1.0)));
    }
    const double consumed = std::min(1.0, std::max(0.0, ctx.consumed_fraction));
    feats.push_back(tape.leaf(consumed));
    double last = 0.0;
    if (ctx.last_outcome >= 0)
        last = ctx.outcome_count > 1
                   ? 2.0 * ctx.last_outcome / (ctx.outcome_count - 1) - 1.0
                   : 0.0;
    feats.push_back(tape.leaf(last));
    feats.push_back(tape.leaf(static_cast<double>(ctx.step) / ctx.max_steps));
    return tape.stop_gradient(tape.pack(feats));
}

inline int feature_dim(const Prior& prior) { return 2 * prior.dim() + 3; }

class Agent {
  public:
    virtual ~Agent() = default;
    virtual std::string kind() const = 0;
    virtual bool trainable() const { return false; }
    virtual ParamSet* params() { return nullptr; }
    const ParamSet* params() const { return const_cast<Agent*>(this)->params(); }

    // Lift persistent parameters onto a fresh tape. Pure w.r.t. the agent,
    // so concurrent episodes can bind the same agent.
    virtual std::vector<ad::Variable> bind(ad::Tape&, bool requires_grad) const {
        (void)requires_grad;
        return {};
    }

    // Produce the next control values (vector(d_controls), within bounds).
    virtual ad::Variable decide(const DecisionContext& ctx) const = 0;
};

namespace detail {

// lo + (hi - lo) * sigmoid(z), elementwise over the control dimensions.
inline ad::Variable squash_to_bounds(ad::Tape& tape, ad::Variable z, const ControlSpace& cs) {
    Tensor lo(Shape::vector(cs.dim())), span(Shape::vector(cs.dim()));
    for (int i = 0; i < cs.dim(); ++i) {
        lo[i] = cs.low(i);
        span[i] = cs.high(i) - cs.low(i);
    }
    return tape.add(tape.mul(tape.sigmoid(z), tape.leaf(span)), tape.leaf(lo));
}

inline ad::Variable constant_control(ad::Tape& tape, const ControlSpace& cs,
                                     std::span<const double> values) {
    Tensor c(Shape::vector(cs.dim()));
    for (int i = 0; i < cs.dim(); ++i) {
        const double v = values[static_cast<std::size_t>(i)];
        c[i] = v < cs.low(i) ? cs.low(i) : (v > cs.high(i) ? cs.high(i) : v);
    }
    return tape.leaf(c);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Multilayer perceptron with tanh hidden layers and a scaled-sigmoid output,
// so controls respect their bounds by construction.
// ---------------------------------------------------------------------------
class MlpAgent : public Agent {
  public:
    MlpAgent(int input_dim, std::vector<int> hidden, ControlSpace controls,
             std::uint64_t init_seed)
        : input_dim_(input_dim), hidden_(std::move(hidden)), controls_(std::move(controls)) {
        controls_.validate();
        if (input_dim < 1) throw std::invalid_argument("MlpAgent: input_dim < 1");
        for (int h : hidden_)
            if (h < 1) throw std::invalid_argument("MlpAgent: empty hidden layer");
        int in = input_dim_;
        std::vector<int> outs = hidden_;
        outs.push_back(controls_.dim());
        for (std::size_t l = 0; l < outs.size(); ++l) {
            const int out = outs[l];
            RngStream rng(init_seed, "agent.init", l);
            const double limit = std::sqrt(6.0 / (in + out));
            Tensor w(Shape::matrix(out, in));
            for (auto& x : w.data()) x = rng.uniform(-limit, limit);
            params_.names.push_back("w" + std::to_string(l));
            params_.values.push_back(std::move(w));
            params_.names.push_back("b" + std::to_string(l));
            params_.values.emplace_back(Shape::vector(out));
            in = out;
        }
    }

    std::string kind() const override { return "mlp"; }
    bool trainable() const override { return true; }
    ParamSet* params() override { return &params_; }
    int input_dim() const { return input_dim_; }
    const std::vector<int>& hidden() const { return hidden_; }
    const ControlSpace& control_space() const { return controls_; }

    std::vector<ad::Variable> bind(ad::Tape& tape, bool requires_grad) const override {
        std::vector<ad::Variable> leaves;
        leaves.reserve(params_.values.size());
        for (const Tensor& t : params_.values) leaves.push_back(tape.leaf(t, requires_grad));
        return leaves;
    }

    ad::Variable decide(const DecisionContext& ctx) const override {
        if (ctx.params.size() != params_.values.size())
            throw std::logic_error("MlpAgent::decide: agent not bound to this tape");
        ad::Variable x = build_features(ctx);
        if (x.shape.rows != input_dim_)
            throw std::invalid_argument("MlpAgent: feature dimension mismatch");
        ad::Tape& tape = ctx.tape;
        const std::size_t layers = hidden_.size() + 1;
        for (std::size_t l = 0; l < layers; ++l) {
            const ad::Variable z =
                tape.add(tape.matvec(ctx.params[2 * l], x), ctx.params[2 * l + 1]);
            x = l + 1 < layers ? tape.tanh(z) : detail::squash_to_bounds(tape, z, controls_);
        }
        return x;
    }

  private:
    int input_dim_;
    std::vector<int> hidden_;
    ControlSpace controls_;
    ParamSet params_;
};

// ---------------------------------------------------------------------------
// Trainable open-loop schedule: one row of raw controls per step, squashed to
// bounds; ignores the posterior. Steps past the end repeat the last row.
// ---------------------------------------------------------------------------
class StaticScheduleAgent : public Agent {
  public:
    StaticScheduleAgent(int max_steps, ControlSpace controls)
        : max_steps_(max_steps), controls_(std::move(controls)) {
        controls_.validate();
        if (max_steps < 1) throw std::invalid_argument("StaticScheduleAgent: max_steps < 1");
        params_.names.push_back("schedule");
        params_.values.emplace_back(Shape::matrix(max_steps, controls_.dim()));
    }

    std::string kind() const override { return "static"; }
    bool trainable() const override { return true; }
    ParamSet* params() override { return &params_; }
    int max_steps() const { return max_steps_; }
    const ControlSpace& control_space() const { return controls_; }

    std::vector<ad::Variable> bind(ad::Tape& tape, bool requires_grad) const override {
        return {tape.leaf(params_.values[0], requires_grad)};
    }

    ad::Variable decide(const DecisionContext& ctx) const override {
        if (ctx.params.size() != 1)
            throw std::logic_error("StaticScheduleAgent::decide: agent not bound");
        const int step = ctx.step >= max_steps_ ? max_steps_ - 1 : ctx.step;
        ad::Variable raw = ctx.tape.row(ctx.params[0], step);
        return detail::squash_to_bounds(ctx.tape, raw, controls_);
    }

  private:
    int max_steps_;
    ControlSpace controls_;
    ParamSet params_;
};

// ---------------------------------------------------------------------------
// Particle guess heuristic: draw two distinct posterior samples and measure
// for time 1 / (distance + eps). Extra control dimensions sit at midpoint.
// ---------------------------------------------------------------------------
class PghAgent : public Agent {
  public:
    explicit PghAgent(ControlSpace controls, double epsilon = 1e-9)
        : controls_(std::move(controls)), epsilon_(epsilon) {
        controls_.validate();
    }

    std::string kind() const override { return "pgh"; }

    ad::Variable decide(const DecisionContext& ctx) const override {
        if (ctx.rng == nullptr) throw std::logic_error("PghAgent: no rng stream");
        const ParticleEnsemble& ens = ctx.ensemble;
        const auto lw = ens.tape().values(ens.log_weights);
        std::vector<double> cumulative(static_cast<std::size_t>(ens.n()));
        double total = 0.0;
        for (int i = 0; i < ens.n(); ++i) {
            total += std::exp(lw[i]);
            cumulative[static_cast<std::size_t>(i)] = total;
        }
        const auto i1 = ctx.rng->categorical(cumulative, total);
        std::int64_t i2 = i1;
        for (int attempt = 0; attempt < 16 && i2 == i1; ++attempt)
            i2 = ctx.rng->categorical(cumulative, total);

        double tau = controls_.high(0);
        if (i2 != i1) {
            double dist_sq = 0.0;
            for (int j = 0; j < ens.d(); ++j) {
                const double dj = ens.particles.at(static_cast<std::int32_t>(i1), j) -
                                  ens.particles.at(static_cast<std::int32_t>(i2), j);
                dist_sq += dj * dj;
            }
            tau = 1.0 / (std::sqrt(dist_sq) + epsilon_);
        }
        std::vector<double> c(static_cast<std::size_t>(controls_.dim()));
        c[0] = tau;
        for (int i = 1; i < controls_.dim(); ++i)
            c[static_cast<std::size_t>(i)] = 0.5 * (controls_.low(i) + controls_.high(i));
        return detail::constant_control(ctx.tape, controls_, c);
    }

  private:
    ControlSpace controls_;
    double epsilon_;
};

// ---------------------------------------------------------------------------
// Sigma-inverse heuristic: measure for time 1 / posterior std.
// ---------------------------------------------------------------------------
class SigmaAgent : public Agent {
  public:
    explicit SigmaAgent(ControlSpace controls) : controls_(std::move(controls)) {
        controls_.validate();
    }

    std::string kind() const override { return "sigma"; }

    ad::Variable decide(const DecisionContext& ctx) const override {
        const double sd = ctx.summary.std[0];
        const double tau = sd > 0.0 ? 1.0 / sd : controls_.high(0);
        std::vector<double> c(static_cast<std::size_t>(controls_.dim()));
        c[0] = tau;
        for (int i = 1; i < controls_.dim(); ++i)
            c[static_cast<std::size_t>(i)] = 0.5 * (controls_.low(i) + controls_.high(i));
        return detail::constant_control(ctx.tape, controls_, c);
    }

  private:
    ControlSpace controls_;
};

// ---------------------------------------------------------------------------
// Uniform random controls within bounds.
// ---------------------------------------------------------------------------
class RandomAgent : public Agent {
  public:
    explicit RandomAgent(ControlSpace controls) : controls_(std::move(controls)) {
        controls_.validate();
    }

    std::string kind() const override { return "random"; }

    ad::Variable decide(const DecisionContext& ctx) const override {
        if (ctx.rng == nullptr) throw std::logic_error("RandomAgent: no rng stream");
        std::vector<double> c(static_cast<std::size_t>(controls_.dim()));
        for (int i = 0; i < controls_.dim(); ++i)
            c[static_cast<std::size_t>(i)] = ctx.rng->uniform(controls_.low(i), controls_.high(i));
        return detail::constant_control(ctx.tape, controls_, c);
    }

  private:
    ControlSpace controls_;
};

// ---------------------------------------------------------------------------
// Checkpoints: {architecture, layers: [{w, b}]} with exact double round-trip
// (nlohmann/json emits shortest round-trip decimals).
// ---------------------------------------------------------------------------

inline nlohmann::json tensor_to_json(const Tensor& t) {
    nlohmann::json j;
    if (t.shape().kind == Shape::Kind::Matrix) {
        j = nlohmann::json::array();
        for (std::int32_t r = 0; r < t.shape().rows; ++r) {
            nlohmann::json rowj = nlohmann::json::array();
            for (std::int32_t c = 0; c < t.shape().cols; ++c) rowj.push_back(t.at(r, c));
            j.push_back(std::move(rowj));
        }
    } else {
        j = nlohmann::json::array();
        for (std::int64_t i = 0; i < t.size(); ++i) j.push_back(t[i]);
    }
    return j;
}

inline nlohmann::json save_checkpoint(const Agent& agent) {
    nlohmann::json j;
    j["kind"] = agent.kind();
    nlohmann::json arch;
    if (const auto* mlp = dynamic_cast<const MlpAgent*>(&agent)) {
        arch["input"] = mlp->input_dim();
        arch["hidden"] = mlp->hidden();
        arch["output"] = mlp->control_space().dim();
        const ParamSet& p = *agent.params();
        nlohmann::json layers = nlohmann::json::array();
        for (std::size_t l = 0; l + 1 < p.values.size(); l += 2) {
            nlohmann::json layer;
            layer["w"] = tensor_to_json(p.values[l]);
            layer["b"] = tensor_to_json(p.values[l + 1]);
            layers.push_back(std::move(layer));
        }
        j["architecture"] = std::move(arch);
        j["layers"] = std::move(layers);
    } else if (const auto* st = dynamic_cast<const StaticScheduleAgent*>(&agent)) {
        arch["max_steps"] = st->max_steps();
        arch["output"] = st->control_space().dim();
        j["architecture"] = std::move(arch);
        j["schedule"] = tensor_to_json(agent.params()->values[0]);
    } else {
        throw std::invalid_argument("save_checkpoint: agent has no trainable state");
    }
    return j;
}

struct CheckpointMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Loads weights into an agent built from the experiment config; throws
// CheckpointMismatch when the stored architecture does not match.
inline void load_checkpoint(Agent& agent, const nlohmann::json& j) {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind != agent.kind())
        throw CheckpointMismatch("checkpoint kind '" + kind + "' does not match agent '" +
                                 agent.kind() + "'");
    if (auto* mlp = dynamic_cast<MlpAgent*>(&agent)) {
        const auto& arch = j.at("architecture");
        if (arch.at("input").get<int>() != mlp->input_dim() ||
            arch.at("hidden").get<std::vector<int>>() != mlp->hidden() ||
            arch.at("output").get<int>() != mlp->control_space().dim())
            throw CheckpointMismatch("checkpoint architecture does not match configuration");
        ParamSet& p = *agent.params();
        const auto& layers = j.at("layers");
        if (layers.size() * 2 != p.values.size())
            throw CheckpointMismatch("checkpoint layer count does not match");
        for (std::size_t l = 0; l < layers.size(); ++l) {
            Tensor& w = p.values[2 * l];
            Tensor& b = p.values[2 * l + 1];
            const auto& wj = layers[l].at("w");
            const auto& bj = layers[l].at("b");
            if (static_cast<std::int32_t>(wj.size()) != w.shape().rows ||
                static_cast<std::int32_t>(bj.size()) != b.shape().rows)
                throw CheckpointMismatch("checkpoint tensor shape does not match");
            for (std::int32_t r = 0; r < w.shape().rows; ++r) {
                const auto& rowj = wj.at(static_cast<std::size_t>(r));
                if (static_cast<std::int32_t>(rowj.size()) != w.shape().cols)
                    throw CheckpointMismatch("checkpoint tensor shape does not match");
                for (std::int32_t c = 0; c < w.shape().cols; ++c)
                    w.at(r, c) = rowj.at(static_cast<std::size_t>(c)).get<double>();
                b[r] = bj.at(static_cast<std::size_t>(r)).get<double>();
            }
        }
    } else if (auto* st = dynamic_cast<StaticScheduleAgent*>(&agent)) {
        const auto& arch = j.at("architecture");
        if (arch.at("max_steps").get<int>() != st->max_steps() ||
            arch.at("output").get<int>() != st->control_space().dim())
            throw CheckpointMismatch("checkpoint architecture does not match configuration");
        Tensor& s = agent.params()->values[0];
        const auto& sj = j.at("schedule");
        if (static_cast<std::int32_t>(sj.size()) != s.shape().rows)
            throw CheckpointMismatch("checkpoint schedule length does not match");
        for (std::int32_t r = 0; r < s.shape().rows; ++r)
            for (std::int32_t c = 0; c < s.shape().cols; ++c)
                s.at(r, c) = sj.at(static_cast<std::size_t>(r))
                                 .at(static_cast<std::size_t>(c))
                                 .get<double>();
    } else {
        throw CheckpointMismatch("agent '" + agent.kind() + "' takes no checkpoint");
    }
}

}  // namespace qest
