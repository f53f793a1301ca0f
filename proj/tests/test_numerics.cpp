#include "ctxpatch/numerics.hpp"

#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstring>

using namespace ctxpatch;

namespace {

// independent bf16 construction: value of a uint16 bit pattern widened to f32
double bf16_from_bits(uint16_t bits) {
    const uint32_t u = static_cast<uint32_t>(bits) << 16;
    float f;
    std::memcpy(&f, &u, sizeof f);
    return static_cast<double>(f);
}

std::vector<double> all_finite_bf16_sorted() {
    std::vector<double> vals;
    vals.reserve(1 << 16);
    for (uint32_t b = 0; b < (1u << 16); ++b) {
        const double v = bf16_from_bits(static_cast<uint16_t>(b));
        if (std::isfinite(v)) vals.push_back(v);
    }
    std::sort(vals.begin(), vals.end());
    vals.erase(std::unique(vals.begin(), vals.end()), vals.end()); // merges -0/+0
    return vals;
}

} // namespace

TEST_SUITE("errors") {
    TEST_CASE("fail throws Error with code and named message") {
        try {
            fail(Errc::ZeroVector, "boom");
            FAIL("unreachable");
        } catch (const Error& e) {
            CHECK(e.code() == Errc::ZeroVector);
            CHECK(e.exit_code() == 2);
            CHECK(std::string(e.what()) == "ZeroVector: boom");
        }
    }

    TEST_CASE("error classes map to distinct exit codes") {
        const Errc all[] = {Errc::ZeroVector,       Errc::DimensionMismatch,
                            Errc::TokenOutOfRange,  Errc::InvalidConfig,
                            Errc::ZeroInputVector,  Errc::ZeroPreOutputVector,
                            Errc::DegenerateActivation, Errc::ZeroGatedVector,
                            Errc::PoleEvaluation,   Errc::BracketFailure,
                            Errc::DegenerateProblem, Errc::LayerResidualExceeded,
                            Errc::NotAProbabilityVector, Errc::UsageError,
                            Errc::IoError,          Errc::ValidationError};
        std::vector<int> codes;
        for (Errc c : all) {
            codes.push_back(static_cast<int>(c));
            CHECK(std::string(errc_name(c)) != "UnknownError");
        }
        std::sort(codes.begin(), codes.end());
        CHECK(std::adjacent_find(codes.begin(), codes.end()) == codes.end());
        CHECK(codes.front() >= 2); // 0 = success, 1 = generic
    }
}

TEST_SUITE("enums") {
    TEST_CASE("precision round-trips") {
        for (Precision p : {Precision::Float64, Precision::Float32, Precision::Bf16Emulated})
            CHECK(parse_precision(to_string(p)) == p);
        CHECK_THROWS_AS(parse_precision("fp8"), Error);
    }
    TEST_CASE("activation round-trips") {
        for (Activation a : {Activation::GeluTanh, Activation::Silu, Activation::Relu})
            CHECK(parse_activation(to_string(a)) == a);
        CHECK_THROWS_AS(parse_activation("swish2"), Error);
    }
}

TEST_SUITE("round_bf16") {
    TEST_CASE("exactly representable values pass through") {
        for (double v : {0.0, 1.0, -1.0, 0.5, 2.0, 0.0078125, -3.140625, 65536.0})
            CHECK(round_bf16(v) == v);
    }

    TEST_CASE("tie rounds to even mantissa") {
        // [DERIVED: bit-level oracle] 1 + 2^-8 is exactly halfway between
        // 1.0 (mantissa ...0) and 1 + 2^-7 (mantissa ...1)
        CHECK(round_bf16(1.0 + 0x1.0p-8) == 1.0);
        // 1 + 3*2^-9 is past the 3/4 point of the gap: rounds up
        CHECK(round_bf16(1.0 + 3 * 0x1.0p-9) == 1.0078125);
    }

    TEST_CASE("pi") {
        // [DERIVED: bit-level oracle] nearest 7-mantissa-bit value
        CHECK(round_bf16(3.14159265358979312) == 3.140625);
    }

    TEST_CASE("specials and overflow") {
        CHECK(std::isnan(round_bf16(std::nan(""))));
        CHECK(round_bf16(HUGE_VAL) == HUGE_VAL);
        CHECK(round_bf16(-HUGE_VAL) == -HUGE_VAL);
        CHECK(round_bf16(0.0) == 0.0);
        CHECK(std::signbit(round_bf16(-0.0)));
        const double bf16_max = 0x1.FEp127; // 255 * 2^120
        CHECK(round_bf16(bf16_max) == bf16_max);
        CHECK(round_bf16(3.39e38) == bf16_max);   // below the tie to 2^128
        CHECK(round_bf16(3.3965e38) == HUGE_VAL); // above it: saturates
        CHECK(round_bf16(-1e39) == -HUGE_VAL);
    }

    TEST_CASE("subnormals") {
        const double q = 0x1.0p-133; // smallest positive bf16
        CHECK(round_bf16(q) == q);
        CHECK(round_bf16(0.5 * q) == 0.0);      // tie with 0: even
        CHECK(round_bf16(0.75 * q) == q);
        CHECK(round_bf16(1.5 * q) == 2 * q);    // tie: even mantissa (2q)
        CHECK(round_bf16(0x1.0p-126) == 0x1.0p-126); // smallest normal
    }

    TEST_CASE("idempotent and monotone on random values") {
        Rng rng(11);
        std::vector<double> xs;
        for (int i = 0; i < 20000; ++i) {
            const int k = static_cast<int>(rng.next_below(280)) - 145; // 2^-145 .. 2^134
            xs.push_back(rng.next_symmetric(1.0) * std::ldexp(1.0, k));
        }
        for (double x : xs) {
            const double r = round_bf16(x);
            CHECK(round_bf16(r) == r);
        }
        std::sort(xs.begin(), xs.end());
        for (size_t i = 1; i < xs.size(); ++i)
            CHECK(round_bf16(xs[i - 1]) <= round_bf16(xs[i]));
    }

    TEST_CASE("agrees with exhaustive nearest-value table") {
        // [DERIVED: bit-level oracle] every finite bf16 comes from widening a
        // uint16 pattern; rounding must pick the nearer neighbor and break
        // exact ties toward the value that is itself a tie-free even pattern
        const std::vector<double> table = all_finite_bf16_sorted();
        Rng rng(23);
        for (int t = 0; t < 4000; ++t) {
            const size_t i = rng.next_below(static_cast<uint32_t>(table.size() - 1));
            const double a = table[i], b = table[i + 1];
            CHECK(round_bf16(a) == a);
            const double mid = a + 0.5 * (b - a); // exact: a,b have short mantissas
            const double r_mid = round_bf16(mid);
            CHECK((r_mid == a || r_mid == b));
            CHECK(round_bf16(std::nextafter(mid, a)) == a);
            CHECK(round_bf16(std::nextafter(mid, b)) == b);
            if (mid != a && mid != b && a + (b - mid) == b - (mid - a) + a) {
                // true tie: the rounded result's mantissa must be even
                const double r = r_mid;
                int e;
                const double f = std::frexp(r, &e);
                if (r != 0.0 && e >= -125) {
                    const double mant = std::ldexp(std::fabs(f), 8); // in [128, 256)
                    CHECK(std::fmod(mant, 2.0) == 0.0);
                }
            }
        }
    }
}

TEST_SUITE("fp ops") {
    TEST_CASE("Float64 is native") {
        CHECK(fp::add(Precision::Float64, 0.1, 0.2) == 0.1 + 0.2);
        CHECK(fp::mul(Precision::Float64, 0.1, 0.3) == 0.1 * 0.3);
    }
    TEST_CASE("Float32 matches float arithmetic") {
        const double a = 0.1, b = 0.2;
        CHECK(fp::add(Precision::Float32, a, b) ==
              static_cast<double>(static_cast<float>(a) + static_cast<float>(b)));
        CHECK(fp::div(Precision::Float32, a, b) ==
              static_cast<double>(static_cast<float>(a) / static_cast<float>(b)));
        CHECK(fp::sqrt(Precision::Float32, 2.0) == static_cast<double>(std::sqrt(2.0f)));
    }
    TEST_CASE("Bf16Emulated rounds every result") {
        Rng rng(5);
        for (int i = 0; i < 200; ++i) {
            const double a = round_bf16(rng.next_symmetric(10.0));
            const double b = round_bf16(rng.next_symmetric(10.0));
            CHECK(fp::add(Precision::Bf16Emulated, a, b) == round_bf16(a + b));
            CHECK(fp::mul(Precision::Bf16Emulated, a, b) == round_bf16(a * b));
            if (b != 0.0) CHECK(fp::div(Precision::Bf16Emulated, a, b) == round_bf16(a / b));
        }
        CHECK(fp::exp(Precision::Bf16Emulated, 1.0) == round_bf16(std::exp(1.0)));
    }
}

TEST_SUITE("activation") {
    TEST_CASE("zeros") {
        CHECK(apply_activation(Activation::GeluTanh, 0.0) == 0.0);
        CHECK(apply_activation(Activation::Silu, 0.0) == 0.0);
        CHECK(apply_activation(Activation::Relu, 0.0) == 0.0);
        CHECK(apply_activation(Activation::Relu, -3.0) == 0.0);
        CHECK(apply_activation(Activation::Relu, 2.5) == 2.5);
    }
    TEST_CASE("gelu_tanh(1) matches extended-precision oracle") {
        // [DERIVED: scalar oracle] 0.5*(1+tanh(sqrt(2/pi)*(1+0.044715)))
        CHECK(apply_activation(Activation::GeluTanh, 1.0) ==
              doctest::Approx(0.841191990608276704782).epsilon(1e-15));
    }
    TEST_CASE("silu(1) matches extended-precision oracle") {
        // [DERIVED: scalar oracle] 1/(1+e^-1)
        CHECK(apply_activation(Activation::Silu, 1.0) ==
              doctest::Approx(0.7310585786300048792512).epsilon(1e-15));
    }
    TEST_CASE("map_activation applies elementwise") {
        const DenseVector v{0.0, 1.0, -2.0};
        const DenseVector out = map_activation(Activation::Relu, v);
        CHECK(out == DenseVector{0.0, 1.0, 0.0});
    }
}

TEST_SUITE("rmsnorm") {
    TEST_CASE("result has unit RMS with eps = 0") {
        const DenseVector v{3.0, 4.0};
        const DenseVector out = rmsnorm(v, 0.0);
        CHECK(rms(out) == doctest::Approx(1.0).epsilon(1e-15));
        CHECK(out[0] / out[1] == doctest::Approx(3.0 / 4.0).epsilon(1e-15));
    }
    TEST_CASE("constant vector maps to all-ones") {
        for (double c : {2.0, 0.5, 8.0}) { // exact squares keep this bitwise
            const DenseVector out = rmsnorm(DenseVector(5, c), 0.0);
            for (size_t i = 0; i < 5; ++i) CHECK(out[i] == 1.0);
        }
    }
    TEST_CASE("(1,2,3) with eps=1e-6 matches extended-precision oracle") {
        // [DERIVED: direct formula evaluation at extended precision]
        const DenseVector out = rmsnorm(DenseVector{1.0, 2.0, 3.0}, 1e-6);
        CHECK(out[0] == doctest::Approx(0.4629100002887783568514).epsilon(1e-15));
        CHECK(out[1] == doctest::Approx(0.9258200005775567137028).epsilon(1e-15));
        CHECK(out[2] == doctest::Approx(1.388730000866335070554).epsilon(1e-15));
    }
    TEST_CASE("scale invariance") {
        Rng rng(3);
        for (int t = 0; t < 100; ++t) {
            DenseVector v(8);
            for (size_t i = 0; i < 8; ++i) v[i] = rng.next_symmetric(5.0);
            const double alpha = 0.01 + rng.next_unit() * 100.0;
            const DenseVector a = rmsnorm(v, 0.0);
            DenseVector sv(8);
            for (size_t i = 0; i < 8; ++i) sv[i] = alpha * v[i];
            const DenseVector b = rmsnorm(sv, 0.0);
            for (size_t i = 0; i < 8; ++i)
                CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-15));
        }
    }
    TEST_CASE("zero vector") {
        CHECK_THROWS_AS(rmsnorm(DenseVector(4), 0.0), Error);
        CHECK_NOTHROW(rmsnorm(DenseVector(4), 1e-6)); // eps keeps it defined
        try {
            rmsnorm(DenseVector(4), 0.0);
        } catch (const Error& e) {
            CHECK(e.code() == Errc::ZeroVector);
        }
    }
}

TEST_SUITE("softmax") {
    TEST_CASE("uniform and singleton") {
        const DenseVector u = softmax(DenseVector(3));
        for (size_t i = 0; i < 3; ++i) CHECK(u[i] == 1.0 / 3.0);
        const DenseVector s = softmax(DenseVector{42.0});
        CHECK(s[0] == 1.0);
    }
    TEST_CASE("(1,2,3) matches extended-precision oracle") {
        // [DERIVED: scalar oracle]
        const DenseVector p = softmax(DenseVector{1.0, 2.0, 3.0});
        CHECK(p[0] == doctest::Approx(0.09003057317038045799802).epsilon(1e-14));
        CHECK(p[1] == doctest::Approx(0.244728471054797652473).epsilon(1e-14));
        CHECK(p[2] == doctest::Approx(0.665240955774821889529).epsilon(1e-14));
    }
    TEST_CASE("probability vector on moderate inputs") {
        Rng rng(7);
        for (int t = 0; t < 200; ++t) {
            DenseVector v(16);
            for (size_t i = 0; i < 16; ++i) v[i] = rng.next_symmetric(30.0);
            const DenseVector p = softmax(v);
            double sum = 0.0;
            for (size_t i = 0; i < 16; ++i) {
                CHECK(p[i] > 0.0); // spread <= 60, exp never underflows
                CHECK(p[i] <= 1.0);
                sum += p[i];
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
    TEST_CASE("extreme spread underflows to zero but stays a distribution") {
        const DenseVector p = softmax(DenseVector{0.0, -1000.0, 1000.0});
        CHECK(p[0] == 0.0); // exp(-1000) underflows
        CHECK(p[1] == 0.0);
        CHECK(p[2] == 1.0);
    }
}

TEST_SUITE("rng") {
    TEST_CASE("splitmix64 matches the published reference stream") {
        Rng r0(0);
        CHECK(r0.next_u64() == 0xe220a8397b1dcdafull);
        CHECK(r0.next_u64() == 0x6e789e6aa1b965f4ull);
        CHECK(r0.next_u64() == 0x06c45d188009454full);
        Rng r42(42);
        CHECK(r42.next_u64() == 0xbdd732262feb6e95ull);
        CHECK(r42.next_u64() == 0x28efe333b266f103ull);
        CHECK(r42.next_u64() == 0x47526757130f9f52ull);
    }
    TEST_CASE("identical seed gives identical stream") {
        Rng a(987654321), b(987654321);
        for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
    }
    TEST_CASE("derived draws stay in range") {
        Rng r(1);
        for (int i = 0; i < 1000; ++i) {
            const double u = r.next_unit();
            CHECK(u >= 0.0);
            CHECK(u < 1.0);
            const double s = r.next_symmetric(2.5);
            CHECK(std::fabs(s) <= 2.5);
            CHECK(r.next_below(7) < 7);
        }
    }
}

TEST_SUITE("vector helpers") {
    TEST_CASE("elementwise ops and length checks") {
        const DenseVector a{1.0, 2.0}, b{3.0, 5.0};
        CHECK(vec_add(a, b) == DenseVector{4.0, 7.0});
        CHECK(vec_sub(b, a) == DenseVector{2.0, 3.0});
        CHECK(vec_mul(a, b) == DenseVector{3.0, 10.0});
        CHECK_THROWS_AS(vec_add(a, DenseVector{1.0, 2.0, 3.0}), Error);
    }
    TEST_CASE("rms") {
        CHECK(rms(DenseVector{3.0, 4.0}) == doctest::Approx(std::sqrt(12.5)).epsilon(1e-15));
    }
}
