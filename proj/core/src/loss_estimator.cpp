#include "rerrsim/loss_estimator.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace rerrsim::estimator {

void ChannelParams::validate() const {
    if (!(payload_bits >= 0.0)) throw InvalidParameter("payload size must be >= 0");
    if (!(rate_bps > 0.0)) throw InvalidParameter("transmission rate must be > 0");
    if (!(lambda_g >= 0.0 && lambda_g <= 1.0)) throw InvalidParameter("lambda_g must lie in [0,1]");
    if (!(lambda_f >= 0.0 && lambda_f <= 1.0)) throw InvalidParameter("lambda_f must lie in [0,1]");
    if (lambda_g > lambda_f) throw InvalidParameter("lambda_g must not exceed lambda_f");
}

DelayDistribution DelayDistribution::empirical(std::vector<SimTime> samples) {
    if (samples.empty()) throw InvalidParameter("empirical delay distribution needs at least one sample");
    std::sort(samples.begin(), samples.end());
    return DelayDistribution(Empirical{std::move(samples)});
}

double DelayDistribution::cdf(SimTime t) const {
    if (const auto* d = std::get_if<Deterministic>(&v_)) return d->value <= t ? 1.0 : 0.0;
    const auto& s = std::get<Empirical>(v_).samples;
    auto le = std::upper_bound(s.begin(), s.end(), t) - s.begin();
    return static_cast<double>(le) / static_cast<double>(s.size());
}

SimTime t_data(double payload_bits, double rate_bps) {
    if (!(rate_bps > 0.0)) throw InvalidParameter("transmission rate must be > 0");
    if (!(payload_bits >= 0.0)) throw InvalidParameter("payload size must be >= 0");
    return SimTime::us(static_cast<SimTime::rep>(std::llround(payload_bits * 1.0e6 / rate_bps)));
}

SimTime t_delay(SimTime t_retrans, SimTime t_rerr) { return t_retrans * 2 + t_rerr; }

SimTime t_delay_us(std::int64_t t_retrans_us, std::int64_t t_rerr_us) {
    if (t_retrans_us < 0 || t_rerr_us < 0) throw InvalidParameter("durations must be >= 0");
    return t_delay(SimTime::us(static_cast<SimTime::rep>(t_retrans_us)), SimTime::us(static_cast<SimTime::rep>(t_rerr_us)));
}

StateProbs state_probs(std::uint32_t n, const DelayDistribution& dist, SimTime t_data) {
    if (n < 1) throw InvalidParameter("preceding-packet index n must be >= 1");
    if (t_data.ticks() == 0) throw InvalidParameter("t_data must be > 0");
    const double below_lower = dist.cdf(t_data * (n - 1));
    const double below_upper = dist.cdf(t_data * n);
    return StateProbs{below_lower, below_upper - below_lower};
}

LossEstimate packet_loss_prob(std::uint32_t n, const ChannelParams& params, const DelayDistribution& dist) {
    params.validate();
    const auto probs = state_probs(n, dist, t_data(params.payload_bits, params.rate_bps));
    return LossEstimate{n, probs.p_good, probs.p_fail,
                        params.lambda_g * probs.p_good + params.lambda_f * probs.p_fail};
}

double frame_corruption_prob(std::span<const double> packet_loss_probs) {
    double survive = 1.0;
    for (double p : packet_loss_probs) {
        if (!(p >= 0.0 && p <= 1.0)) {
            throw InvalidParameter("packet loss probability outside [0,1]: " + std::to_string(p));
        }
        survive *= 1.0 - p;
    }
    return 1.0 - survive;
}

void DelayRecorder::record_us(std::int64_t sample_us) {
    if (sample_us < 0) throw InvalidParameter("RERR delay sample must be >= 0");
    record(SimTime::us(static_cast<SimTime::rep>(sample_us)));
}

}  // namespace rerrsim::estimator
