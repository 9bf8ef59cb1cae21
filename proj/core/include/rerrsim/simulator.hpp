#pragma once

#include <cstdint>
#include <functional>
#include <unordered_set>
#include <variant>
#include <vector>

#include "rerrsim/packet.hpp"
#include "rerrsim/rng.hpp"
#include "rerrsim/sim_time.hpp"
#include "rerrsim/topology.hpp"
#include "rerrsim/trace.hpp"

namespace rerrsim {

using EventId = std::uint64_t;

struct PacketArrival {
    LinkKey link;
    Packet packet;
};

enum class TimerKind : std::uint8_t { Retransmit, Discovery, Application };

struct TimerExpiry {
    TimerKind kind = TimerKind::Application;
    std::uint64_t arg = 0;
};

struct LinkStateChange {
    LinkKey link;
    bool up = false;
};

using EventPayload = std::variant<PacketArrival, TimerExpiry, LinkStateChange>;

struct Event {
    SimTime fire_at;
    EventId seq = 0;
    NodeId target = 0;
    EventPayload payload;
};

/// Min-queue on (fire_at, seq) with lazy cancellation.
class EventQueue {
public:
    void push(Event e);
    bool empty();
    /// Earliest live event. Queue must not be empty.
    const Event& top();
    Event pop();
    void cancel(EventId seq) { cancelled_.insert(seq); }
    std::size_t live_size() const;

    /// Visits every live event in unspecified order.
    void for_each(const std::function<void(const Event&)>& fn) const;

private:
    struct Later {
        bool operator()(const Event& a, const Event& b) const {
            if (a.fire_at != b.fire_at) return a.fire_at > b.fire_at;
            return a.seq > b.seq;
        }
    };
    void skip_cancelled();

    std::vector<Event> heap_;
    std::unordered_set<EventId> cancelled_;
};

class EventHandler {
public:
    virtual ~EventHandler() = default;
    virtual void on_packet(NodeId at, NodeId from, Packet packet) = 0;
    virtual void on_timer(NodeId at, const TimerExpiry& timer) = 0;
    virtual void on_link_change(const LinkStateChange&) {}
};

/// Single-threaded discrete-event engine over a Topology.
///
/// Events are processed in (fire_at, seq) order; seq is assigned at
/// scheduling time, so simultaneous events run in insertion order. Each
/// directed link draws its losses from its own stream derived from the run
/// seed, so adding traffic on one link never perturbs another.
class Simulator {
public:
    Simulator(Topology topology, std::uint64_t seed);

    Simulator(const Simulator&) = delete;
    Simulator& operator=(const Simulator&) = delete;

    void set_handler(EventHandler* handler) { handler_ = handler; }

    SimTime now() const { return now_; }
    std::uint64_t seed() const { return seed_; }
    const Topology& topology() const { return topology_; }

    /// Throws std::logic_error when fire_at is earlier than now().
    EventId schedule(SimTime fire_at, NodeId target, EventPayload payload);
    void cancel(EventId id) { queue_.cancel(id); }

    /// Processes every event with fire_at <= t_end, then advances the clock to t_end.
    const EventTrace& run_until(SimTime t_end);

    /// Sends `packet` over `link` at now(). Records a Tx plus either a Drop or
    /// a scheduled arrival. Throws TopologyError for an unknown link.
    void transmit(LinkKey link, Packet packet);

    /// Schedules a [down_at, up_at) outage. Throws TopologyError on overlap.
    void set_link_failure(LinkKey link, SimTime down_at, SimTime up_at);

    void record(NodeId node, TraceKind kind, std::optional<PacketId> packet, std::string detail = {});
    const EventTrace& trace() const { return trace_; }

    /// Packets still on the wire (scheduled arrivals not yet processed).
    std::vector<PacketArrival> packets_on_wire() const;

    std::uint64_t transmissions() const { return transmissions_; }
    std::uint64_t drops() const { return drops_; }

private:
    BernoulliStream& stream_for(LinkKey link);

    Topology topology_;
    std::uint64_t seed_;
    SimTime now_;
    EventId next_seq_ = 1;
    EventQueue queue_;
    EventTrace trace_;
    EventHandler* handler_ = nullptr;
    std::map<LinkKey, BernoulliStream> link_streams_;
    std::uint64_t transmissions_ = 0;
    std::uint64_t drops_ = 0;
};

}  // namespace rerrsim
