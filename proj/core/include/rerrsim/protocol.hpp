#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <utility>
#include <vector>

#include "rerrsim/loss_estimator.hpp"
#include "rerrsim/packet.hpp"
#include "rerrsim/simulator.hpp"

namespace rerrsim::routing {

using Route = std::vector<NodeId>;

enum class DelayMode : std::uint8_t { Deterministic, Empirical };

struct ProtocolConfig {
    std::uint32_t max_retries = 3;  // K
    SimTime t_retrans = SimTime::ms(10);
    SimTime rerr_timer = SimTime::ms(10);
    SimTime discovery_timeout = SimTime::ms(200);
    estimator::ChannelParams channel;
    DelayMode delay_mode = DelayMode::Deterministic;
    std::uint32_t estimate_window = 16;  // preceding packets scored per RERR
};

/// Per-node route record keyed by (source, destination). Flow endpoints keep
/// their single on-path neighbor in both hop fields.
struct RoutingEntry {
    Flow key;
    NodeId next_hop = 0;
    NodeId prev_hop = 0;
    SimTime stamp;

    bool operator==(const RoutingEntry&) const = default;
};

class RoutingTable {
public:
    /// Replaces any entry with the same key.
    void install(const RoutingEntry& entry);
    const RoutingEntry* find(const Flow& key) const;
    bool erase(const Flow& key);
    const std::map<Flow, RoutingEntry>& entries() const { return entries_; }

private:
    std::map<Flow, RoutingEntry> entries_;
};

/// A hop-level transfer awaiting ACK, keyed by (packet id, neighbor).
struct Inflight {
    Packet packet;
    NodeId neighbor = 0;
    SimTime deadline;
    SimTime first_sent;
    std::uint32_t retries = 0;
    EventId timer = 0;
    std::uint64_t token = 0;
};

using InflightKey = std::pair<PacketId, NodeId>;
using SeqKey = std::pair<Flow, std::uint64_t>;

struct NodeState {
    NodeId id = 0;
    RoutingTable routing_table;
    std::map<InflightKey, Inflight> inflight;
    std::set<SeqKey> seen;
    std::set<SeqKey> nack_sent;
    std::map<Flow, std::vector<Route>> route_cache;
    std::vector<PacketId> pending_lost;

    // DATA waits here while an earlier DATA to the same neighbor is unacknowledged.
    std::map<NodeId, std::deque<Packet>> send_queue;
    // DATA parked for lack of a route.
    std::map<Flow, std::deque<Packet>> held;
    std::set<NodeId> failed_neighbors;
    std::set<NodeId> pruned_children;
    std::set<RerrInfo> rerr_seen;
    std::map<RerrInfo, NodeId> rerr_from;
    std::set<std::pair<NodeId, std::uint64_t>> rreq_seen;
    std::map<Flow, NodeId> orphaned_prev;
    std::map<Flow, Route> salvage_paths;
};

enum class PathStatus : std::uint8_t { Active, Discovering, Recovering, Suspended };

struct SourcePath {
    PathStatus status = PathStatus::Discovering;
    Route route;
};

struct SentRecord {
    PacketId id = 0;
    SimTime sent_at;
    std::uint8_t path = 0;
};

/// Flow state kept by the transmitting node.
struct SourceSession {
    Flow flow;
    std::vector<SourcePath> paths;
    std::set<LinkKey> known_broken;
    std::vector<SentRecord> sent;
    std::deque<std::pair<std::uint8_t, Packet>> held;  // waiting for the first route
    std::optional<std::uint64_t> discovery;
    estimator::DelayRecorder delays;
};

struct Injection {
    Flow flow;
    std::uint64_t seq = 0;
    SimTime at;
    bool multicast = false;
};

struct Delivery {
    PacketId id = 0;
    NodeId node = 0;
    Flow flow;
    std::uint64_t seq = 0;
    SimTime injected_at;
    SimTime delivered_at;
};

struct LostMark {
    PacketId id = 0;
    NodeId node = 0;
    std::optional<NodeId> toward;  // neighbor the packet was headed to, when known
    SimTime at;
};

struct RerrOutcome {
    RerrInfo info;
    SimTime generated_at;
    std::optional<SimTime> reached_source_at;
    bool stranded = false;
};

struct ProtocolStats {
    std::uint64_t wire_duplicates = 0;
    std::uint64_t app_duplicates = 0;
    std::uint64_t retransmissions = 0;
    std::uint64_t timer_fires = 0;
    std::uint64_t nacks_sent = 0;
    std::uint64_t rreq_transmissions = 0;
};

struct EstimateBatch {
    RerrInfo rerr;
    SimTime at;
    std::vector<std::pair<PacketId, estimator::LossEstimate>> per_packet;  // n = 1 first
};

/// Hop-by-hop acknowledged forwarding with acknowledged RERR propagation.
///
/// DATA and RERR hops are ACK-protected: a transfer that sees no ACK within
/// the timer is resent up to K times, after which the neighbor is declared
/// unreachable. DATA is stop-and-wait per neighbor. A duplicate DATA is
/// answered with a NACK, which cancels the sender's remaining retries.
/// RERRs walk the (source, destination)-keyed routing tables back toward the
/// flow source and detour through any other entry that leads there when the
/// reverse hop is dead.
class Network : public EventHandler {
public:
    Network(Simulator& sim, ProtocolConfig config);

    const ProtocolConfig& config() const { return config_; }
    Simulator& sim() { return sim_; }

    /// Source bookkeeping for a unicast flow with `path_count` transport paths.
    void open_flow(Flow flow, std::uint8_t path_count = 1);
    /// Installs `route` as the active route of `path` and writes routing
    /// entries at every node on it, without sending packets.
    void install_route(Flow flow, const Route& route, std::uint8_t path = 0);
    void add_cached_route(Flow flow, const Route& route);
    /// Starts discovery for every path of a flow without a route.
    void discover(Flow flow);

    PacketId allocate_id() { return next_packet_id_++; }

    /// Hands an application DATA packet to its flow source at now().
    void send(Packet packet, std::uint8_t path = 0);
    /// Injects a multicast DATA packet at the tree root at now().
    void send_multicast(Packet packet);
    /// Runs `fn` at `at` as an application timer on `node`.
    void schedule_app(SimTime at, NodeId node, std::function<void()> fn);

    void on_packet(NodeId at, NodeId from, Packet packet) override;
    void on_timer(NodeId at, const TimerExpiry& timer) override;

    // Protocol operations, public for direct unit testing.
    void on_data_receive(NodeId node, Packet packet, NodeId from);
    void on_ack(NodeId node, const Packet& ack, NodeId from);
    void on_nack(NodeId node, const Packet& nack, NodeId from);
    void on_timeout(NodeId node, std::uint64_t token);
    void generate_rerr(NodeId node, LinkKey broken_link, Flow flow, NodeId prev_hop, SimTime detected_at,
                       bool multicast = false);
    void forward_rerr(NodeId node, const Packet& rerr, NodeId from);
    void on_rerr_at_source(NodeId source, const RerrInfo& info);
    std::uint64_t route_discovery(NodeId origin, Flow flow);
    void forward_multicast(NodeId node, const Packet& packet);

    NodeState& node(NodeId id);
    const NodeState& node(NodeId id) const;
    const SourceSession* session(Flow flow) const;

    const std::map<PacketId, Injection>& injections() const { return injections_; }
    const std::vector<Delivery>& deliveries() const { return deliveries_; }
    const std::vector<LostMark>& lost_marks() const { return lost_; }
    const std::map<RerrInfo, RerrOutcome>& rerr_outcomes() const { return rerr_outcomes_; }
    const std::vector<EstimateBatch>& estimates() const { return estimates_; }
    const ProtocolStats& stats() const { return stats_; }

    /// Called with per-packet loss estimates after each RERR at a source.
    void set_estimate_listener(std::function<void(const EstimateBatch&)> fn) { estimate_listener_ = std::move(fn); }

    /// DATA ids with a live copy somewhere: queued, held, awaiting ACK or on the wire.
    std::set<PacketId> live_data() const;
    /// (packet, neighbor) pairs with a live multicast copy headed to that neighbor, plus the holder.
    std::set<std::pair<PacketId, LinkKey>> live_multicast_edges() const;

private:
    void send_ack(NodeId node, NodeId to, const Packet& acked, PacketKind kind);
    void send_reliable(NodeId node, NodeId neighbor, Packet packet);
    void enqueue_data(NodeId node, NodeId neighbor, Packet packet);
    void pump(NodeId node, NodeId neighbor);
    bool data_busy(const NodeState& st, NodeId neighbor) const;
    void finish_inflight(NodeId node, const InflightKey& key);
    void route_data(NodeId node, Packet packet, std::optional<NodeId> from);
    void hold(NodeId node, Packet packet);
    void deliver(NodeId node, const Packet& packet);
    void mark_lost(NodeId node, const Packet& packet, std::optional<NodeId> toward, const std::string& reason);
    void handle_link_failure(NodeId node, NodeId neighbor, const Inflight& trigger);
    void rerr_hop_failed(NodeId node, const Inflight& trigger);
    std::optional<NodeId> rerr_next_hop(NodeId node, const RerrInfo& info) const;
    std::optional<NodeId> rerr_alternate(NodeId node, const RerrInfo& info) const;
    void send_rerr(NodeId node, NodeId neighbor, Packet rerr);
    void on_rreq(NodeId node, const Packet& rreq, NodeId from);
    void on_rrep(NodeId node, const Packet& rrep, NodeId from);
    void on_discovery_timeout(std::uint64_t request_id);
    void route_found(NodeId origin, Flow flow, const Route& path);
    void install_entries(Flow flow, const Route& route);
    void activate_path(SourceSession& s, std::uint8_t path, const Route& route, bool from_cache);
    void source_dispatch(SourceSession& s, std::uint8_t path, Packet packet);
    void compute_estimates(SourceSession& s, const RerrInfo& info, const std::set<std::uint8_t>& paths);
    std::optional<Route> cached_route(const SourceSession& s) const;
    SourceSession& session_for(Flow flow);

    Simulator& sim_;
    ProtocolConfig config_;
    std::map<NodeId, NodeState> nodes_;
    std::map<Flow, SourceSession> sessions_;
    PacketId next_packet_id_ = 1;
    std::uint64_t next_token_ = 1;
    std::uint64_t next_request_ = 1;
    std::map<std::uint64_t, InflightKey> token_owner_key_;
    std::map<std::uint64_t, NodeId> token_owner_node_;
    struct DiscoveryState {
        NodeId origin = 0;
        Flow flow;
        EventId timer = 0;
    };
    std::map<std::uint64_t, DiscoveryState> discoveries_;
    std::map<std::pair<NodeId, Flow>, std::uint64_t> discovery_by_origin_;
    std::map<std::uint64_t, std::function<void()>> app_timers_;
    std::uint64_t next_app_timer_ = 1;

    std::map<PacketId, Injection> injections_;
    std::vector<Delivery> deliveries_;
    std::set<std::pair<NodeId, SeqKey>> delivered_keys_;
    std::vector<LostMark> lost_;
    std::map<RerrInfo, RerrOutcome> rerr_outcomes_;
    std::vector<EstimateBatch> estimates_;
    ProtocolStats stats_;
    std::function<void(const EstimateBatch&)> estimate_listener_;
};

}  // namespace rerrsim::routing
