#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rerrsim/sim_time.hpp"

namespace rerrsim {

using NodeId = std::uint32_t;
using PacketId = std::uint64_t;

/// Destination id used for the flow of multicast-tree traffic.
inline constexpr NodeId kMulticastGroup = 0xFFFFFFFFu;

/// (source, destination) pair. Routing tables are keyed by it.
struct Flow {
    NodeId source = 0;
    NodeId destination = 0;

    auto operator<=>(const Flow&) const = default;
};

enum class PacketKind : std::uint8_t { Data, Ack, Nack, Rerr, Rreq, Rrep };

std::string_view to_string(PacketKind kind);

/// Directed link (from, to).
struct LinkKey {
    NodeId from = 0;
    NodeId to = 0;

    auto operator<=>(const LinkKey&) const = default;
    LinkKey reversed() const { return {to, from}; }
};

struct RerrInfo {
    LinkKey broken_link;
    NodeId origin = 0;         // node that declared the link failed
    NodeId target_source = 0;  // flow source the RERR must reach
    Flow flow;
    // First unacknowledged transmission over the broken link, i.e. the
    // detector's best knowledge of when the failure began.
    SimTime detected_at;
    bool multicast = false;

    auto operator<=>(const RerrInfo&) const = default;
};

struct Packet {
    PacketId id = 0;
    PacketKind kind = PacketKind::Data;
    Flow flow;
    std::uint64_t seq = 0;

    // DATA
    std::optional<std::uint32_t> frame_id;
    std::optional<std::uint8_t> description_id;
    SimTime injected_at;
    bool multicast = false;

    // ACK / NACK: the acknowledged packet.
    std::optional<PacketId> ref_id;

    // RERR
    std::optional<RerrInfo> rerr;

    // DATA: source route. RREQ: path accumulated so far. RREP: discovered path.
    std::vector<NodeId> route;
    // RREQ / RREP
    NodeId discovery_origin = 0;
    std::uint64_t request_id = 0;
};

/// One-line human summary used in trace detail fields.
std::string describe(const Packet& p);

}  // namespace rerrsim
