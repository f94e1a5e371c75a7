#pragma once

// Counter-based random number generation (Philox 4x32-10, Salmon et al.,
// SC 2011). Streams are keyed by (master seed, purpose tag, stream index),
// so any draw is a pure function of those three values plus its position
// in the stream. Results are therefore independent of scheduling and of
// how many workers execute a batch.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>

namespace qest {

namespace detail {

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

}  // namespace detail

class Philox4x32 {
  public:
    using Counter = std::array<std::uint32_t, 4>;
    using Key = std::array<std::uint32_t, 2>;

    static Counter block(Counter ctr, Key key) {
        for (int round = 0; round < 10; ++round) {
            ctr = single_round(ctr, key);
            key[0] += 0x9E3779B9u;
            key[1] += 0xBB67AE85u;
        }
        return ctr;
    }

  private:
    static void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
        const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
        hi = static_cast<std::uint32_t>(p >> 32);
        lo = static_cast<std::uint32_t>(p);
    }

    static Counter single_round(const Counter& ctr, const Key& key) {
        std::uint32_t hi0, lo0, hi1, lo1;
        mulhilo(0xD2511F53u, ctr[0], hi0, lo0);
        mulhilo(0xCD9E8D57u, ctr[2], hi1, lo1);
        return {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    }
};

// One logical random stream. Cheap to construct; holds a 4-word buffer.
class RngStream {
  public:
    RngStream(std::uint64_t master_seed, std::string_view purpose, std::uint64_t index) {
        const std::uint64_t k =
            detail::splitmix64(master_seed ^ detail::splitmix64(detail::fnv1a64(purpose)));
        key_ = {static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(k >> 32)};
        base_ = {static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
        refill();
    }

    std::uint32_t next_u32() {
        if (word_ == 4) refill();
        return buf_[word_++];
    }

    std::uint64_t next_u64() {
        const std::uint64_t lo = next_u32();
        const std::uint64_t hi = next_u32();
        return (hi << 32) | lo;
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; caches its second deviate.
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        while (u1 == 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

    // Index into a discrete distribution given cumulative weights that
    // end at `total`. Returns the first i with cum[i] > u * total.
    std::int64_t categorical(std::span<const double> cumulative, double total) {
        const double u = uniform() * total;
        std::int64_t lo = 0, hi = static_cast<std::int64_t>(cumulative.size()) - 1;
        while (lo < hi) {
            const std::int64_t mid = (lo + hi) / 2;
            if (cumulative[static_cast<std::size_t>(mid)] <= u)
                lo = mid + 1;
            else
                hi = mid;
        }
        return lo;
    }

  private:
    void refill() {
        const Philox4x32::Counter ctr = {base_[0], base_[1],
                                         static_cast<std::uint32_t>(block_),
                                         static_cast<std::uint32_t>(block_ >> 32)};
        buf_ = Philox4x32::block(ctr, key_);
        ++block_;
        word_ = 0;
    }

    Philox4x32::Key key_{};
    std::array<std::uint32_t, 2> base_{};
    std::uint64_t block_ = 0;
    Philox4x32::Counter buf_{};
    int word_ = 0;
    bool have_cached_ = false;
    double cached_ = 0.0;
};

}  // namespace qest
