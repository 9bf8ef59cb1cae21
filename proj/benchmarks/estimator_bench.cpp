#include <benchmark/benchmark.h>

#include <vector>

#include "rerrsim/loss_estimator.hpp"

using namespace rerrsim;
using namespace rerrsim::estimator;

static void BM_PacketLossDeterministic(benchmark::State& state) {
    ChannelParams p;
    p.lambda_g = 0.05;
    const auto dist = DelayDistribution::deterministic(t_delay(p.t_retrans, p.t_rerr));
    for (auto _ : state) {
        for (std::uint32_t n = 1; n <= 16; ++n) benchmark::DoNotOptimize(packet_loss_prob(n, p, dist));
    }
}
BENCHMARK(BM_PacketLossDeterministic);

static void BM_PacketLossEmpirical(benchmark::State& state) {
    ChannelParams p;
    p.lambda_g = 0.05;
    std::vector<SimTime> samples;
    for (std::int64_t i = 0; i < state.range(0); ++i) samples.push_back(SimTime::us(20000 + (i * 7919) % 20000));
    const auto dist = DelayDistribution::empirical(samples);
    for (auto _ : state) {
        for (std::uint32_t n = 1; n <= 16; ++n) benchmark::DoNotOptimize(packet_loss_prob(n, p, dist));
    }
}
BENCHMARK(BM_PacketLossEmpirical)->Arg(16)->Arg(1024);

static void BM_FrameCorruption(benchmark::State& state) {
    const std::vector<double> probs = {0.1, 0.2, 0.05, 0.3, 0.01};
    for (auto _ : state) benchmark::DoNotOptimize(frame_corruption_prob(probs));
}
BENCHMARK(BM_FrameCorruption);
