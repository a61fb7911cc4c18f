#pragma once

#include <array>
#include <cmath>
#include <cstdint>

#include "adm/error.hpp"

namespace adm {

/// Order-independent exact summation of doubles. The running total is kept as
/// a fixed-point integer spanning the whole double exponent range, so
/// add/merge are exact integer operations: any grouping or order of the same
/// terms yields the same bits.
class ExactSum {
public:
    void add(double x) {
        if (x == 0.0) return;
        if (!std::isfinite(x)) throw NumericError("ExactSum: non-finite term");
        int exp = 0;
        const double frac = std::frexp(std::abs(x), &exp);  // |x| = frac * 2^exp, frac in [0.5, 1)
        auto mant = static_cast<std::uint64_t>(std::ldexp(frac, 53));
        int pos = exp - 53 + kBias;  // bit position of the mantissa LSB
        if (pos < 0) {               // subnormal range; low bits are zero
            mant >>= -pos;
            pos = 0;
        }
        const auto wide = static_cast<__uint128_t>(mant) << (pos % 32);
        const std::size_t limb = static_cast<std::size_t>(pos / 32);
        const std::int64_t sign = x < 0 ? -1 : 1;
        limbs_[limb] += sign * static_cast<std::int64_t>(static_cast<std::uint64_t>(wide) & kMask);
        limbs_[limb + 1] += sign * static_cast<std::int64_t>(static_cast<std::uint64_t>(wide >> 32) & kMask);
        limbs_[limb + 2] += sign * static_cast<std::int64_t>(static_cast<std::uint64_t>(wide >> 64));
        if (++pending_ >= kNormalizeEvery) normalize();
    }

    /// Adds a*b exactly (via an error-free product).
    void add_product(double a, double b) {
        const double p = a * b;
        add(p);
        add(std::fma(a, b, -p));
    }

    void merge(const ExactSum& o) {
        ExactSum other = o;
        other.normalize();
        normalize();
        for (std::size_t i = 0; i < kLimbs; ++i) limbs_[i] += other.limbs_[i];
        normalize();
    }

    /// Total rounded to double. A deterministic function of the exact value.
    double value() const {
        ExactSum t = *this;
        t.normalize();
        bool negative = t.limbs_[kLimbs - 1] < 0;
        if (negative) {
            for (auto& l : t.limbs_) l = -l;
            t.normalize();
        }
        double v = 0.0;
        for (std::size_t i = kLimbs; i-- > 0;)
            if (t.limbs_[i] != 0) v += std::ldexp(static_cast<double>(t.limbs_[i]), static_cast<int>(32 * i) - kBias);
        return negative ? -v : v;
    }

    friend bool operator==(const ExactSum& a, const ExactSum& b) {
        ExactSum x = a, y = b;
        x.normalize();
        y.normalize();
        return x.limbs_ == y.limbs_;
    }

private:
    static constexpr int kBias = 1074 + 53;
    static constexpr std::size_t kLimbs = 72;
    static constexpr std::uint64_t kMask = 0xffffffffULL;
    static constexpr int kNormalizeEvery = 1 << 28;

    // Canonical form: limbs 0..n-2 in [0, 2^32); the top limb carries the sign.
    void normalize() {
        for (std::size_t i = 0; i + 1 < kLimbs; ++i) {
            const std::int64_t carry = limbs_[i] >> 32;  // arithmetic shift = floor division
            limbs_[i] -= carry * (std::int64_t{1} << 32);
            limbs_[i + 1] += carry;
        }
        pending_ = 0;
    }

    std::array<std::int64_t, kLimbs> limbs_{};
    int pending_ = 0;
};

}  // namespace adm
