#pragma once

// Prior over the unknown parameters: a uniform box, optionally replaced by
// a finite set of hypothesis points for discrete discrimination tasks.

#include <stdexcept>
#include <utility>
#include <vector>

#include "qest/rng.hpp"
#include "qest/tensor.hpp"

namespace qest {

struct Prior {
    // Per-parameter (low, high) in the model's physical units.
    std::vector<std::pair<double, double>> bounds;
    // Nonempty for discrete-hypothesis tasks: each entry is one candidate
    // parameter vector; the box above must contain all of them.
    std::vector<Tensor> hypotheses;

    int dim() const { return static_cast<int>(bounds.size()); }
    bool discrete() const { return !hypotheses.empty(); }

    double low(int i) const { return bounds[static_cast<std::size_t>(i)].first; }
    double high(int i) const { return bounds[static_cast<std::size_t>(i)].second; }
    double width(int i) const { return high(i) - low(i); }
    double midpoint(int i) const { return 0.5 * (low(i) + high(i)); }

    void validate() const {
        if (bounds.empty()) throw std::invalid_argument("Prior: empty parameter bounds");
        for (const auto& [lo, hi] : bounds)
            if (!(lo < hi))
                throw std::invalid_argument("Prior: degenerate support (low >= high)");
        for (const Tensor& h : hypotheses) {
            if (h.size() != dim())
                throw std::invalid_argument("Prior: hypothesis dimension mismatch");
            for (int i = 0; i < dim(); ++i)
                if (h[i] < low(i) || h[i] > high(i))
                    throw std::invalid_argument("Prior: hypothesis outside bounds");
        }
    }

    // One draw from the uniform box.
    Tensor sample(RngStream& rng) const {
        Tensor t(Shape::vector(dim()));
        for (int i = 0; i < dim(); ++i) t[i] = rng.uniform(low(i), high(i));
        return t;
    }

    double clip(int i, double x) const {
        return x < low(i) ? low(i) : (x > high(i) ? high(i) : x);
    }
};

}  // namespace qest
