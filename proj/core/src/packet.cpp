#include "rerrsim/packet.hpp"

#include <sstream>

namespace rerrsim {

std::string_view to_string(PacketKind kind) {
    switch (kind) {
        case PacketKind::Data: return "DATA";
        case PacketKind::Ack: return "ACK";
        case PacketKind::Nack: return "NACK";
        case PacketKind::Rerr: return "RERR";
        case PacketKind::Rreq: return "RREQ";
        case PacketKind::Rrep: return "RREP";
    }
    return "?";
}

namespace {

void write_path(std::ostream& os, const std::vector<NodeId>& path) {
    for (std::size_t i = 0; i < path.size(); ++i) {
        if (i) os << '-';
        os << path[i];
    }
}

}  // namespace

std::string describe(const Packet& p) {
    std::ostringstream os;
    os << to_string(p.kind) << " flow=" << p.flow.source << '>' << p.flow.destination;
    switch (p.kind) {
        case PacketKind::Data:
            os << " seq=" << p.seq;
            if (p.frame_id) os << " frame=" << *p.frame_id;
            if (p.description_id) os << " desc=" << static_cast<int>(*p.description_id);
            if (p.multicast) os << " mcast";
            break;
        case PacketKind::Ack:
        case PacketKind::Nack:
            if (p.ref_id) os << " ref=" << *p.ref_id;
            break;
        case PacketKind::Rerr:
            if (p.rerr) {
                os << " link=" << p.rerr->broken_link.from << '>' << p.rerr->broken_link.to
                   << " origin=" << p.rerr->origin << " target=" << p.rerr->target_source;
            }
            break;
        case PacketKind::Rreq:
        case PacketKind::Rrep:
            os << " origin=" << p.discovery_origin << " req=" << p.request_id << " path=";
            write_path(os, p.route);
            break;
    }
    return os.str();
}

}  // namespace rerrsim
