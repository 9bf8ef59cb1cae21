#include "rerrsim/oracle.hpp"

#include <algorithm>
#include <map>
#include <set>

#include "rerrsim/loss_estimator.hpp"
#include "rerrsim/rng.hpp"

namespace rerrsim::harness {

namespace {

constexpr std::uint64_t kJitterStream = 0x6a17;
constexpr std::uint64_t kGoodLossStream = 0x6005;

}  // namespace

OracleResult monte_carlo_loss_oracle(const ScenarioConfig& config, std::uint32_t trials) {
    if (trials == 0) throw std::invalid_argument("oracle needs at least one trial");
    const Flow flow = config.multicast() ? Flow{*config.multicast_root, kMulticastGroup} : *config.flow;
    const NodeId receiver = config.multicast() ? config.multicast_parent.begin()->first : flow.destination;
    const double lambda_g = config.protocol.channel.lambda_g;

    std::map<std::uint32_t, std::tuple<std::uint64_t, std::uint64_t, double>> rows;  // samples, lost, pred
    std::map<mdc::FrameId, std::tuple<std::uint64_t, std::uint64_t, double>> frames;
    OracleResult out;
    out.trials = trials;

    for (std::uint32_t t = 0; t < trials; ++t) {
        const std::uint64_t seed = config.seed + t;
        ScenarioConfig c = config;
        BernoulliStream jitter(derive_seed(seed, kJitterStream));
        const SimTime shift = SimTime::us(jitter.below(config.failure_jitter.ticks() + 1));
        SimTime first_failure = SimTime::infinity();
        for (auto& f : c.failures) {
            f.down = f.down + shift;
            f.up = f.up + shift;
            first_failure = std::min(first_failure, f.down);
        }
        const TrialResult r = run_trial(c, seed);
        if (!r.conservation.holds()) ++out.conservation_failures;
        if (r.effort.violations) ++out.effort_failures;

        std::map<PacketId, SimTime> injected_at;
        std::set<PacketId> arrived;
        for (const auto& d : r.delivered) {
            if (d.node == receiver) arrived.insert(d.id);
        }
        for (const auto& e : r.encode_log) {
            for (std::size_t j = 0; j < e.packet_ids.size(); ++j) {
                injected_at[e.packet_ids[j]] = e.encoded_at + c.video.packet_spacing * j;
            }
        }

        // (packet, n, predicted Pr) for the scored packets.
        std::vector<std::tuple<PacketId, std::uint32_t, double>> scored;
        const auto batch = std::find_if(r.estimates.begin(), r.estimates.end(),
                                        [&](const routing::EstimateBatch& b) { return b.rerr.flow == flow; });
        if (batch != r.estimates.end()) {
            ++out.trials_with_rerr;
            for (const auto& [id, est] : batch->per_packet) {
                if (est.n <= config.max_n) scored.emplace_back(id, est.n, est.pr);
            }
        } else {
            // No failure reported: every packet is GOOD.
            std::uint32_t n = 0;
            for (auto it = injected_at.rbegin(); it != injected_at.rend() && n < config.max_n; ++it) {
                scored.emplace_back(it->first, ++n, lambda_g);
            }
        }

        // Overlay draws in ascending packet order so they do not depend on scoring order.
        BernoulliStream good_loss(derive_seed(seed, kGoodLossStream));
        std::set<PacketId> overlay_lost;
        for (const auto& [id, at] : injected_at) {
            if (good_loss.draw(lambda_g) && at < first_failure) overlay_lost.insert(id);
        }

        std::map<PacketId, bool> lost_of;
        std::map<PacketId, double> pr_of;
        for (const auto& [id, n, pr] : scored) {
            const bool lost = !arrived.contains(id) || overlay_lost.contains(id);
            lost_of[id] = lost;
            pr_of[id] = pr;
            auto& [samples, lost_count, pred] = rows[n];
            ++samples;
            lost_count += lost ? 1 : 0;
            pred += pr;
        }
        for (const auto& f : r.frames) {
            std::vector<double> probs;
            bool lost = false;
            bool complete = true;
            for (PacketId id : f.packet_ids) {
                auto it = lost_of.find(id);
                if (it == lost_of.end()) {
                    complete = false;
                    break;
                }
                probs.push_back(pr_of[id]);
                lost = lost || it->second;
            }
            if (!complete) continue;
            auto& [samples, lost_count, pred] = frames[f.id];
            ++samples;
            lost_count += lost ? 1 : 0;
            pred += estimator::frame_corruption_prob(probs);
        }
    }

    for (const auto& [n, v] : rows) {
        const auto& [samples, lost, pred] = v;
        out.rows.push_back(OracleRow{n, samples, static_cast<double>(lost) / samples, pred / samples});
    }
    for (const auto& [f, v] : frames) {
        const auto& [samples, lost, pred] = v;
        out.frames.push_back(OracleFrameRow{f, samples, static_cast<double>(lost) / samples, pred / samples});
    }
    return out;
}

}  // namespace rerrsim::harness
