#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "rerrsim/packet.hpp"
#include "rerrsim/sim_time.hpp"

namespace rerrsim {

/// Trace record kinds. The string form is part of the trace file format.
enum class TraceKind : std::uint8_t {
    Tx,             // packet handed to a link
    Drop,           // link was down or Bernoulli loss
    Rx,             // packet arrival processed at node
    Deliver,        // DATA handed to the destination application
    Duplicate,      // duplicate DATA received (NACK follows)
    Timeout,        // armed retransmission timer fired
    Lost,           // packet marked lost by a node
    Hold,           // DATA parked at a node without a route
    LinkDown,
    LinkUp,
    LinkFailed,     // retry bound exhausted, neighbor declared unreachable
    RerrGenerated,
    RerrDetour,
    RerrAtSource,
    RerrStranded,
    RouteInstall,
    RouteFromCache,
    DiscoveryStart,
    DiscoveryFailed,
    Encode,
    Estimate,
};

std::string_view to_string(TraceKind kind);

struct TraceRecord {
    SimTime time;
    NodeId node = 0;
    TraceKind kind = TraceKind::Tx;
    std::optional<PacketId> packet_id;
    std::string detail;

    bool operator==(const TraceRecord&) const = default;
};

/// `time_us<TAB>node<TAB>kind<TAB>packet_id<TAB>detail`; packet_id is `-` when absent.
std::string format_record(const TraceRecord& r);

class EventTrace {
public:
    void append(TraceRecord r) { records_.push_back(std::move(r)); }

    const std::vector<TraceRecord>& records() const { return records_; }
    std::size_t size() const { return records_.size(); }
    bool empty() const { return records_.empty(); }

    void write(std::ostream& out) const;
    std::string to_string() const;

    bool operator==(const EventTrace&) const = default;

private:
    std::vector<TraceRecord> records_;
};

}  // namespace rerrsim
