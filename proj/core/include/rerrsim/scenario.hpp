#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rerrsim/loss_estimator.hpp"
#include "rerrsim/mdc.hpp"
#include "rerrsim/protocol.hpp"
#include "rerrsim/trace.hpp"

namespace rerrsim::harness {

struct ConfigIssue {
    std::size_t line = 0;  // 0 when the problem is not tied to one line
    std::string message;
};

/// Thrown by parse_config with every problem found, not just the first.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(std::vector<ConfigIssue> issues);
    const std::vector<ConfigIssue>& issues() const { return issues_; }

private:
    std::vector<ConfigIssue> issues_;
};

struct LinkSpec {
    NodeId a = 0;
    NodeId b = 0;
    SimTime delay;
    double loss = 0.0;
    bool directed = false;
};

struct FailureSpec {
    NodeId a = 0;
    NodeId b = 0;
    SimTime down;
    SimTime up = SimTime::infinity();
    bool directed = false;  // otherwise both directions go down
};

struct ScenarioConfig {
    std::string name = "scenario";
    std::vector<NodeId> nodes;
    std::vector<LinkSpec> links;
    std::vector<FailureSpec> failures;

    std::optional<NodeId> multicast_root;
    std::map<NodeId, NodeId> multicast_parent;

    routing::ProtocolConfig protocol;

    std::optional<Flow> flow;
    std::vector<routing::Route> paths;  // preinstalled routes, index = path id
    std::vector<routing::Route> cache;  // extra source route-cache entries

    mdc::VideoConfig video;
    bool frame_interval_set = false;

    std::uint64_t seed = 1;
    SimTime horizon = SimTime::seconds(1);
    std::uint32_t trials = 1;

    SimTime failure_jitter;     // oracle: failure times shift by U[0, jitter]
    std::uint32_t max_n = 8;    // oracle: preceding packets tracked

    bool multicast() const { return multicast_root.has_value() && !flow.has_value(); }
};

/// Parses `section.key = value` text. '#' starts a comment.
ScenarioConfig parse_config(const std::string& text);
ScenarioConfig load_config(const std::string& path);

/// Nodes, links, failure schedules and multicast tree of a config.
Topology build_topology(const ScenarioConfig& config);

/// Canonical text form; parse_config(to_text(c)) reproduces c.
std::string to_text(const ScenarioConfig& config);

struct ConservationReport {
    std::uint64_t injected = 0;  // (packet, receiver) pairs
    std::uint64_t delivered = 0;
    std::uint64_t lost = 0;
    std::uint64_t in_flight = 0;
    std::uint64_t violations = 0;

    bool holds() const { return violations == 0 && delivered + lost + in_flight == injected; }
    bool operator==(const ConservationReport&) const = default;
};

struct EffortReport {
    std::uint32_t max_per_hop = 0;  // most transmissions of one id from one node to one neighbor
    std::uint64_t violations = 0;   // (node, neighbor, id) triples above K+1

    bool operator==(const EffortReport&) const = default;
};

/// One row per preceding-packet index n scored at a RERR.
struct PerNStat {
    std::uint32_t n = 0;
    std::uint64_t samples = 0;
    double lost_frequency = 0.0;
    double predicted = 0.0;  // mean packet_loss_prob over the same samples

    bool operator==(const PerNStat&) const = default;
};

struct FrameStat {
    mdc::FrameId frame = 0;
    double corrupted_frequency = 0.0;
    double estimated = 0.0;  // mean corruption_prob at the encoder at the end of the run

    bool operator==(const FrameStat&) const = default;
};

struct TrialResult {
    std::uint64_t seed = 0;
    EventTrace trace;

    std::uint64_t expected_deliveries = 0;
    std::uint64_t deliveries = 0;
    std::uint64_t wire_duplicates = 0;
    std::uint64_t app_duplicates = 0;
    std::uint64_t retransmissions = 0;
    std::uint64_t timer_fires = 0;
    std::uint64_t rerr_generated = 0;
    std::uint64_t rerr_reached = 0;
    std::uint64_t rerr_stranded = 0;
    double mean_delay_us = 0.0;
    std::uint64_t max_delay_us = 0;
    std::uint32_t frames_corrupted = 0;
    std::uint32_t frames_total = 0;

    ConservationReport conservation;
    EffortReport effort;

    mdc::EncodeLog encode_log;
    std::vector<mdc::Frame> frames;
    mdc::ReceiverReport receiver;  // first receiver only for multicast
    std::vector<std::pair<mdc::FrameId, bool>> frame_outcomes;  // (frame, corrupted) per receiver
    std::vector<routing::EstimateBatch> estimates;
    std::vector<std::pair<std::uint32_t, bool>> per_n_lost;  // (n, lost) over every scored packet
    std::vector<std::pair<std::uint32_t, double>> per_n_pred;
    std::vector<routing::RerrOutcome> rerrs;
    std::vector<routing::Delivery> delivered;
};

struct MetricsReport {
    std::string scenario;
    std::uint64_t seed = 0;
    std::uint32_t trials = 0;
    double delivery_ratio = 0.0;
    double wire_duplicates = 0.0;
    double app_duplicates = 0.0;
    double rerr_success = 1.0;  // 1 when no RERR was generated
    double rerr_stranded = 0.0;
    double mean_delay_us = 0.0;
    double max_delay_us = 0.0;
    double frames_corrupted = 0.0;
    double frames_total = 0.0;
    double retransmissions = 0.0;
    double timer_fires = 0.0;

    bool conservation_ok = true;
    bool effort_ok = true;
    std::vector<PerNStat> per_n;
    std::vector<FrameStat> per_frame;

    // Trial 0 detail for the JSON report.
    mdc::EncodeLog encode_log;
    mdc::ReceiverReport receiver;
    std::vector<routing::EstimateBatch> estimates;

    bool invariants_ok() const { return app_duplicates == 0.0 && conservation_ok && effort_ok; }
    bool operator==(const MetricsReport&) const;
};

/// Per-trial hooks for tests: adjust the simulation before it runs.
struct TrialHooks {
    std::function<void(Simulator&, routing::Network&, std::uint32_t trial)> before_run;
};

/// Runs one trial with the given seed.
TrialResult run_trial(const ScenarioConfig& config, std::uint64_t seed, const TrialHooks& hooks = {},
                      std::uint32_t trial = 0);

/// Mean over trials of each per-trial metric (per_n and per_frame are pooled).
MetricsReport aggregate(const ScenarioConfig& config, const std::vector<TrialResult>& trials);

struct ScenarioRun {
    EventTrace trace;  // trial 0
    MetricsReport report;
    std::vector<TrialResult> trials;
};

/// Trial i uses seed config.seed + i. `threads` > 1 runs trials concurrently
/// with identical results.
ScenarioRun run_scenario(const ScenarioConfig& config, unsigned threads = 1, const TrialHooks& hooks = {},
                         bool keep_trials = false);

ConservationReport check_conservation(const routing::Network& net, const Topology& topology);
EffortReport check_effort(const EventTrace& trace, std::uint32_t max_retries);

extern const std::vector<std::string> kCsvColumns;
std::string to_csv(const MetricsReport& report);
std::string to_json(const MetricsReport& report);
/// Inverse of to_json; throws std::runtime_error on a schema mismatch.
MetricsReport from_json(const std::string& text);
inline constexpr int kJsonSchemaVersion = 1;

}  // namespace rerrsim::harness
