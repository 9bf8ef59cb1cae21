#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <variant>
#include <vector>

#include "rerrsim/sim_time.hpp"

namespace rerrsim::estimator {

class InvalidParameter : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct ChannelParams {
    double payload_bits = 8000.0;      // L
    double rate_bps = 1.0e6;
    SimTime t_retrans = SimTime::ms(10);
    SimTime t_rerr = SimTime::ms(5);
    double lambda_g = 0.0;             // loss probability given GOOD
    double lambda_f = 1.0;             // loss probability given FAIL

    /// Throws InvalidParameter naming the first violated constraint.
    void validate() const;
};

struct Deterministic {
    SimTime value;
};

/// Sorted, non-empty sample list.
struct Empirical {
    std::vector<SimTime> samples;
};

/// Law of the delay between a link failure and RERR reception at the source.
class DelayDistribution {
public:
    static DelayDistribution deterministic(SimTime value) { return DelayDistribution(Deterministic{value}); }
    /// Sorts the samples; throws InvalidParameter when empty.
    static DelayDistribution empirical(std::vector<SimTime> samples);

    /// P[T_delay <= t]
    double cdf(SimTime t) const;

    const std::variant<Deterministic, Empirical>& variant() const { return v_; }

private:
    explicit DelayDistribution(std::variant<Deterministic, Empirical> v) : v_(std::move(v)) {}
    std::variant<Deterministic, Empirical> v_;
};

struct StateProbs {
    double p_good = 0.0;
    double p_fail = 0.0;
};

struct LossEstimate {
    std::uint32_t n = 1;
    double p_good = 0.0;
    double p_fail = 0.0;
    double pr = 0.0;
};

/// Per-packet serialization interval payload_bits / rate_bps, rounded to the nearest microsecond.
SimTime t_data(double payload_bits, double rate_bps);

/// 2 * T_retrans + T_RERR: one timer for the send, one for the missing ACK, then RERR transit.
SimTime t_delay(SimTime t_retrans, SimTime t_rerr);
/// Signed entry point; negative durations throw InvalidParameter.
SimTime t_delay_us(std::int64_t t_retrans_us, std::int64_t t_rerr_us);

/// GOOD: T_delay <= (n-1) t_data.  FAIL: (n-1) t_data < T_delay <= n t_data.
///
/// n indexes packets backwards from RERR reception at the source: n = 1 is
/// the most recent packet sent before the RERR arrived.
StateProbs state_probs(std::uint32_t n, const DelayDistribution& dist, SimTime t_data);

/// lambda_g * Pg(n) + lambda_f * Pf(n)
LossEstimate packet_loss_prob(std::uint32_t n, const ChannelParams& params, const DelayDistribution& dist);

/// 1 - prod(1 - p_i); 0 for an empty frame.
double frame_corruption_prob(std::span<const double> packet_loss_probs);

/// Collects RERR delay samples observed at a source.
class DelayRecorder {
public:
    void record(SimTime sample) { samples_.push_back(sample); }
    /// Signed entry point for externally computed differences; negative samples throw InvalidParameter.
    void record_us(std::int64_t sample_us);
    bool empty() const { return samples_.empty(); }
    std::size_t size() const { return samples_.size(); }
    const std::vector<SimTime>& samples() const { return samples_; }

    /// Throws InvalidParameter when nothing has been recorded yet.
    DelayDistribution empirical_dist() const { return DelayDistribution::empirical(samples_); }

private:
    std::vector<SimTime> samples_;
};

}  // namespace rerrsim::estimator
