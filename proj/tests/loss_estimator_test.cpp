#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "rerrsim/loss_estimator.hpp"
#include "rerrsim/rng.hpp"

using namespace rerrsim;
using namespace rerrsim::estimator;

namespace {

constexpr double kTol = 1e-12;

ChannelParams reference_channel(double lambda_g) {
    ChannelParams p;
    p.payload_bits = 8000;
    p.rate_bps = 1e6;
    p.t_retrans = SimTime::ms(10);
    p.t_rerr = SimTime::ms(5);
    p.lambda_g = lambda_g;
    p.lambda_f = 1.0;
    return p;
}

}  // namespace

TEST(TData, Examples) {
    EXPECT_EQ(t_data(8000, 1e6), SimTime::ms(8));
    EXPECT_EQ(t_data(0, 1e6), SimTime::us(0));
    EXPECT_EQ(t_data(1e6, 1e6), SimTime::seconds(1));
    EXPECT_THROW(t_data(8000, 0), InvalidParameter);
    EXPECT_THROW(t_data(8000, -5), InvalidParameter);
}

TEST(TDelay, Examples) {
    EXPECT_EQ(t_delay(SimTime::ms(10), SimTime::ms(5)), SimTime::ms(25));
    EXPECT_EQ(t_delay(SimTime::ms(0), SimTime::ms(0)), SimTime::ms(0));
    EXPECT_EQ(t_delay(SimTime::ms(3), SimTime::ms(4)), SimTime::ms(10));
    EXPECT_EQ(t_delay_us(10000, 5000), SimTime::ms(25));
    EXPECT_THROW(t_delay_us(-1, 5000), InvalidParameter);
    EXPECT_THROW(t_delay_us(1, -5000), InvalidParameter);
}

TEST(StateProbs, DeterministicIndicators) {
    const auto d = DelayDistribution::deterministic(SimTime::ms(25));
    const auto t = SimTime::ms(8);
    auto s4 = state_probs(4, d, t);  // 24 < 25 <= 32
    EXPECT_NEAR(s4.p_good, 0.0, kTol);
    EXPECT_NEAR(s4.p_fail, 1.0, kTol);
    auto s5 = state_probs(5, d, t);  // 25 <= 32
    EXPECT_NEAR(s5.p_good, 1.0, kTol);
    EXPECT_NEAR(s5.p_fail, 0.0, kTol);
    auto s1 = state_probs(1, d, t);  // 25 > 8
    EXPECT_NEAR(s1.p_good, 0.0, kTol);
    EXPECT_NEAR(s1.p_fail, 0.0, kTol);
}

TEST(StateProbs, BoundariesFollowStrictLowerInclusiveUpper) {
    // T_delay = 24 ms sits exactly on the n=4 lower edge: GOOD for n=4, FAIL for n=3.
    const auto d = DelayDistribution::deterministic(SimTime::ms(24));
    EXPECT_NEAR(state_probs(3, d, SimTime::ms(8)).p_fail, 1.0, kTol);
    EXPECT_NEAR(state_probs(4, d, SimTime::ms(8)).p_good, 1.0, kTol);
    EXPECT_NEAR(state_probs(4, d, SimTime::ms(8)).p_fail, 0.0, kTol);
}

TEST(StateProbs, RejectsBadInput) {
    const auto d = DelayDistribution::deterministic(SimTime::ms(25));
    EXPECT_THROW(state_probs(0, d, SimTime::ms(8)), InvalidParameter);
    EXPECT_THROW(state_probs(1, d, SimTime::us(0)), InvalidParameter);
}

TEST(PacketLossProb, Examples) {
    const auto d = DelayDistribution::deterministic(SimTime::ms(25));
    EXPECT_NEAR(packet_loss_prob(4, reference_channel(0.05), d).pr, 1.0, kTol);
    EXPECT_NEAR(packet_loss_prob(5, reference_channel(0.05), d).pr, 0.05, kTol);
    auto zero = reference_channel(0.0);
    zero.lambda_f = 0.0;
    for (std::uint32_t n = 1; n <= 20; ++n) EXPECT_EQ(packet_loss_prob(n, zero, d).pr, 0.0);
}

TEST(PacketLossProb, InvalidChannelRejected) {
    const auto d = DelayDistribution::deterministic(SimTime::ms(25));
    auto p = reference_channel(0.5);
    p.lambda_f = 0.2;  // lambda_g > lambda_f
    EXPECT_THROW(packet_loss_prob(1, p, d), InvalidParameter);
    p = reference_channel(0.0);
    p.rate_bps = 0.0;
    EXPECT_THROW(packet_loss_prob(1, p, d), InvalidParameter);
    p = reference_channel(0.0);
    p.lambda_f = 1.5;
    EXPECT_THROW(packet_loss_prob(1, p, d), InvalidParameter);
}

TEST(PacketLossProb, PropertiesOverRandomEmpiricalDistributions) {
    BernoulliStream rng(17);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<SimTime> samples;
        const auto count = 1 + rng.below(30);
        for (std::uint64_t i = 0; i < count; ++i) samples.push_back(SimTime::us(rng.below(100000)));
        const auto dist = DelayDistribution::empirical(samples);
        ChannelParams p = reference_channel(0.0);
        p.lambda_f = rng.uniform();
        p.lambda_g = p.lambda_f * rng.uniform();
        double prev_good = 0.0;
        for (std::uint32_t n = 1; n <= 20; ++n) {
            const auto e = packet_loss_prob(n, p, dist);
            EXPECT_GE(e.p_good, prev_good);
            prev_good = e.p_good;
            EXPECT_GE(e.p_fail, 0.0);
            EXPECT_LE(e.p_good + e.p_fail, 1.0 + kTol);
            EXPECT_NEAR(e.pr, p.lambda_g * e.p_good + p.lambda_f * e.p_fail, kTol);
            EXPECT_LE(e.pr, p.lambda_f + kTol);
            if (std::fabs(e.p_good + e.p_fail - 1.0) < kTol) {
                EXPECT_GE(e.pr, std::min(p.lambda_g, p.lambda_f) - kTol);
                EXPECT_LE(e.pr, std::max(p.lambda_g, p.lambda_f) + kTol);
            }
        }
    }
}

TEST(DelayRecorder, SingletonMatchesDeterministic) {
    DelayRecorder rec;
    rec.record(SimTime::ms(25));
    ASSERT_EQ(rec.size(), 1u);
    EXPECT_EQ(rec.samples().front(), SimTime::ms(25));
    const auto emp = rec.empirical_dist();
    const auto det = DelayDistribution::deterministic(SimTime::ms(25));
    for (std::uint32_t n = 1; n <= 12; ++n) {
        const auto a = state_probs(n, emp, SimTime::ms(8));
        const auto b = state_probs(n, det, SimTime::ms(8));
        EXPECT_EQ(a.p_good, b.p_good);
        EXPECT_EQ(a.p_fail, b.p_fail);
    }
}

TEST(DelayRecorder, RejectsNegativeAndEmpty) {
    DelayRecorder rec;
    EXPECT_THROW(rec.record_us(-1), InvalidParameter);
    EXPECT_TRUE(rec.empty());
    EXPECT_THROW(rec.empirical_dist(), InvalidParameter);
    rec.record_us(0);
    EXPECT_EQ(rec.size(), 1u);
}

TEST(DelayRecorder, EmpiricalConvergesToGeneratingModel) {
    // Delays uniform on [20 ms, 40 ms); analytic CDF F(t) = (t - 20) / 20 inside.
    BernoulliStream rng(2718);
    DelayRecorder rec;
    for (int i = 0; i < 1000; ++i) rec.record_us(20000 + static_cast<std::int64_t>(rng.below(20000)));
    auto cdf = [](double t_ms) { return std::clamp((t_ms - 20.0) / 20.0, 0.0, 1.0); };
    const auto dist = rec.empirical_dist();
    for (std::uint32_t n = 1; n <= 8; ++n) {
        const auto s = state_probs(n, dist, SimTime::ms(8));
        const double good = cdf(8.0 * (n - 1));
        const double fail = cdf(8.0 * n) - good;
        EXPECT_NEAR(s.p_good, good, 0.05) << "n=" << n;
        EXPECT_NEAR(s.p_fail, fail, 0.05) << "n=" << n;
    }
}

TEST(FrameCorruption, Examples) {
    EXPECT_NEAR(frame_corruption_prob(std::vector<double>{0.1, 0.2}), 0.28, kTol);
    EXPECT_EQ(frame_corruption_prob(std::vector<double>{0.3, 1.0, 0.0}), 1.0);
    EXPECT_EQ(frame_corruption_prob(std::vector<double>{}), 0.0);
    EXPECT_THROW(frame_corruption_prob(std::vector<double>{0.1, 1.2}), InvalidParameter);
    EXPECT_THROW(frame_corruption_prob(std::vector<double>{-0.1}), InvalidParameter);
}

TEST(FrameCorruption, MonotoneAndPermutationInvariant) {
    BernoulliStream rng(5);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<double> p(1 + rng.below(6));
        for (auto& x : p) x = rng.uniform();
        const double base = frame_corruption_prob(p);
        auto shuffled = p;
        std::reverse(shuffled.begin(), shuffled.end());
        EXPECT_NEAR(frame_corruption_prob(shuffled), base, kTol);
        auto bumped = p;
        const auto i = rng.below(p.size());
        bumped[i] = std::min(1.0, bumped[i] + 0.1);
        EXPECT_GE(frame_corruption_prob(bumped), base - kTol);
    }
}

TEST(FrameCorruption, MonteCarloSpotValue) {
    BernoulliStream rng(31337);
    const int trials = 100000;
    int corrupted = 0;
    for (int t = 0; t < trials; ++t) {
        const bool a = rng.draw(0.1);
        const bool b = rng.draw(0.2);
        corrupted += (a || b) ? 1 : 0;
    }
    EXPECT_NEAR(static_cast<double>(corrupted) / trials, 0.28, 0.01);
}
