#include "rerrsim/trace.hpp"

#include <sstream>

namespace rerrsim {

std::string_view to_string(TraceKind kind) {
    switch (kind) {
        case TraceKind::Tx: return "tx";
        case TraceKind::Drop: return "drop";
        case TraceKind::Rx: return "rx";
        case TraceKind::Deliver: return "deliver";
        case TraceKind::Duplicate: return "duplicate";
        case TraceKind::Timeout: return "timeout";
        case TraceKind::Lost: return "lost";
        case TraceKind::Hold: return "hold";
        case TraceKind::LinkDown: return "link_down";
        case TraceKind::LinkUp: return "link_up";
        case TraceKind::LinkFailed: return "link_failed";
        case TraceKind::RerrGenerated: return "rerr_generated";
        case TraceKind::RerrDetour: return "rerr_detour";
        case TraceKind::RerrAtSource: return "rerr_at_source";
        case TraceKind::RerrStranded: return "rerr_stranded";
        case TraceKind::RouteInstall: return "route_install";
        case TraceKind::RouteFromCache: return "route_from_cache";
        case TraceKind::DiscoveryStart: return "discovery_start";
        case TraceKind::DiscoveryFailed: return "discovery_failed";
        case TraceKind::Encode: return "encode";
        case TraceKind::Estimate: return "estimate";
    }
    return "?";
}

std::string format_record(const TraceRecord& r) {
    std::string out = std::to_string(r.time.ticks());
    out += '\t';
    out += std::to_string(r.node);
    out += '\t';
    out += to_string(r.kind);
    out += '\t';
    out += r.packet_id ? std::to_string(*r.packet_id) : std::string("-");
    out += '\t';
    out += r.detail;
    return out;
}

void EventTrace::write(std::ostream& out) const {
    for (const auto& r : records_) out << format_record(r) << '\n';
}

std::string EventTrace::to_string() const {
    std::ostringstream os;
    write(os);
    return os.str();
}

}  // namespace rerrsim
