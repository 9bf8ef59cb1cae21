#include "rerrsim/protocol.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

namespace rerrsim::routing {

namespace {

std::string path_string(const Route& route) {
    std::ostringstream os;
    for (std::size_t i = 0; i < route.size(); ++i) {
        if (i) os << '-';
        os << route[i];
    }
    return os.str();
}

std::string flow_string(const Flow& f) {
    return std::to_string(f.source) + ">" + std::to_string(f.destination);
}

bool route_uses(const Route& route, LinkKey link) {
    for (std::size_t i = 0; i + 1 < route.size(); ++i) {
        if (route[i] == link.from && route[i + 1] == link.to) return true;
    }
    return false;
}

}  // namespace

void RoutingTable::install(const RoutingEntry& entry) { entries_[entry.key] = entry; }

const RoutingEntry* RoutingTable::find(const Flow& key) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? nullptr : &it->second;
}

bool RoutingTable::erase(const Flow& key) { return entries_.erase(key) > 0; }

Network::Network(Simulator& sim, ProtocolConfig config) : sim_(sim), config_(std::move(config)) {
    config_.channel.validate();
    if (config_.t_retrans.ticks() == 0 || config_.rerr_timer.ticks() == 0) {
        throw std::invalid_argument("retransmission timers must be positive");
    }
    for (NodeId n : sim_.topology().nodes()) nodes_[n].id = n;
    sim_.set_handler(this);
}

NodeState& Network::node(NodeId id) {
    auto it = nodes_.find(id);
    if (it == nodes_.end()) throw std::out_of_range("unknown node " + std::to_string(id));
    return it->second;
}

const NodeState& Network::node(NodeId id) const {
    auto it = nodes_.find(id);
    if (it == nodes_.end()) throw std::out_of_range("unknown node " + std::to_string(id));
    return it->second;
}

const SourceSession* Network::session(Flow flow) const {
    auto it = sessions_.find(flow);
    return it == sessions_.end() ? nullptr : &it->second;
}

SourceSession& Network::session_for(Flow flow) {
    auto it = sessions_.find(flow);
    if (it == sessions_.end()) throw std::logic_error("flow " + flow_string(flow) + " was never opened");
    return it->second;
}

// ---------------------------------------------------------------------------
// Flow setup

void Network::open_flow(Flow flow, std::uint8_t path_count) {
    if (flow.source == flow.destination) throw std::invalid_argument("flow endpoints must differ");
    node(flow.source);
    node(flow.destination);
    auto& s = sessions_[flow];
    s.flow = flow;
    if (s.paths.size() < std::max<std::uint8_t>(path_count, 1)) s.paths.resize(std::max<std::uint8_t>(path_count, 1));
}

void Network::install_entries(Flow flow, const Route& route) {
    for (std::size_t i = 0; i < route.size(); ++i) {
        const NodeId next = i + 1 < route.size() ? route[i + 1] : route[i - 1];
        const NodeId prev = i > 0 ? route[i - 1] : route[1];
        node(route[i]).routing_table.install(RoutingEntry{flow, next, prev, sim_.now()});
        sim_.record(route[i], TraceKind::RouteInstall, std::nullopt,
                    "flow=" + flow_string(flow) + " next=" + std::to_string(next) + " prev=" + std::to_string(prev));
    }
}

void Network::install_route(Flow flow, const Route& route, std::uint8_t path) {
    if (route.size() < 2 || route.front() != flow.source || route.back() != flow.destination) {
        throw std::invalid_argument("route must run from flow source to flow destination");
    }
    for (std::size_t i = 0; i + 1 < route.size(); ++i) {
        sim_.topology().link({route[i], route[i + 1]});
        sim_.topology().link({route[i + 1], route[i]});
    }
    open_flow(flow, static_cast<std::uint8_t>(path + 1));
    install_entries(flow, route);
    add_cached_route(flow, route);
    activate_path(session_for(flow), path, route, false);
}

void Network::add_cached_route(Flow flow, const Route& route) {
    auto& cache = node(flow.source).route_cache[flow];
    if (std::find(cache.begin(), cache.end(), route) == cache.end()) cache.push_back(route);
}

void Network::discover(Flow flow) {
    auto& s = session_for(flow);
    bool missing = false;
    for (auto& p : s.paths) {
        if (p.status != PathStatus::Active) {
            p.status = PathStatus::Discovering;
            missing = true;
        }
    }
    if (missing && !s.discovery) s.discovery = route_discovery(flow.source, flow);
}

void Network::activate_path(SourceSession& s, std::uint8_t path, const Route& route, bool from_cache) {
    s.paths[path].status = PathStatus::Active;
    s.paths[path].route = route;
    node(s.flow.source).routing_table.install(RoutingEntry{s.flow, route[1], route[1], sim_.now()});
    sim_.record(s.flow.source, from_cache ? TraceKind::RouteFromCache : TraceKind::RouteInstall, std::nullopt,
                "flow=" + flow_string(s.flow) + " path=" + std::to_string(path) + " route=" + path_string(route));

    std::deque<std::pair<std::uint8_t, Packet>> still_held;
    auto held = std::move(s.held);
    s.held.clear();
    for (auto& [p, packet] : held) {
        if (p == path) {
            source_dispatch(s, p, std::move(packet));
        } else {
            still_held.emplace_back(p, std::move(packet));
        }
    }
    for (auto& item : still_held) s.held.push_back(std::move(item));
}

// ---------------------------------------------------------------------------
// Application entry points

void Network::send(Packet packet, std::uint8_t path) {
    auto& s = session_for(packet.flow);
    path = std::min<std::uint8_t>(path, static_cast<std::uint8_t>(s.paths.size() - 1));
    packet.kind = PacketKind::Data;
    packet.injected_at = sim_.now();
    packet.multicast = false;
    injections_[packet.id] = Injection{packet.flow, packet.seq, sim_.now(), false};
    node(packet.flow.source).seen.insert({packet.flow, packet.seq});
    source_dispatch(s, path, std::move(packet));
}

void Network::source_dispatch(SourceSession& s, std::uint8_t path, Packet packet) {
    const NodeId src = s.flow.source;
    auto& sp = s.paths[path];
    switch (sp.status) {
        case PathStatus::Active:
            packet.route = sp.route;
            s.sent.push_back(SentRecord{packet.id, sim_.now(), path});
            enqueue_data(src, sp.route[1], std::move(packet));
            break;
        case PathStatus::Discovering:
            sim_.record(src, TraceKind::Hold, packet.id, "awaiting_route path=" + std::to_string(path));
            s.held.emplace_back(path, std::move(packet));
            break;
        case PathStatus::Recovering:
        case PathStatus::Suspended:
            node(src).pending_lost.push_back(packet.id);
            mark_lost(src, packet, std::nullopt, sp.status == PathStatus::Recovering ? "route_broken" : "flow_suspended");
            break;
    }
}

void Network::send_multicast(Packet packet) {
    const NodeId root = sim_.topology().multicast_root();
    packet.kind = PacketKind::Data;
    packet.multicast = true;
    packet.flow = Flow{root, kMulticastGroup};
    packet.injected_at = sim_.now();
    injections_[packet.id] = Injection{packet.flow, packet.seq, sim_.now(), true};
    node(root).seen.insert({packet.flow, packet.seq});
    forward_multicast(root, packet);
}

void Network::schedule_app(SimTime at, NodeId target, std::function<void()> fn) {
    const std::uint64_t id = next_app_timer_++;
    app_timers_.emplace(id, std::move(fn));
    sim_.schedule(at, target, TimerExpiry{TimerKind::Application, id});
}

// ---------------------------------------------------------------------------
// Event dispatch

void Network::on_packet(NodeId at, NodeId from, Packet packet) {
    node(at).failed_neighbors.erase(from);
    switch (packet.kind) {
        case PacketKind::Data: on_data_receive(at, std::move(packet), from); break;
        case PacketKind::Ack: on_ack(at, packet, from); break;
        case PacketKind::Nack: on_nack(at, packet, from); break;
        case PacketKind::Rerr: forward_rerr(at, packet, from); break;
        case PacketKind::Rreq: on_rreq(at, packet, from); break;
        case PacketKind::Rrep: on_rrep(at, packet, from); break;
    }
}

void Network::on_timer(NodeId at, const TimerExpiry& timer) {
    switch (timer.kind) {
        case TimerKind::Retransmit: on_timeout(at, timer.arg); break;
        case TimerKind::Discovery: on_discovery_timeout(timer.arg); break;
        case TimerKind::Application: {
            auto it = app_timers_.find(timer.arg);
            if (it == app_timers_.end()) return;
            auto fn = std::move(it->second);
            app_timers_.erase(it);
            fn();
            break;
        }
    }
}

// ---------------------------------------------------------------------------
// Hop-level reliability

void Network::send_ack(NodeId from_node, NodeId to, const Packet& acked, PacketKind kind) {
    if (!sim_.topology().find_link({from_node, to})) return;
    Packet a;
    a.id = allocate_id();
    a.kind = kind;
    a.flow = acked.flow;
    a.seq = acked.seq;
    a.ref_id = acked.id;
    sim_.transmit({from_node, to}, std::move(a));
}

void Network::send_reliable(NodeId n, NodeId neighbor, Packet packet) {
    auto& st = node(n);
    const SimTime timeout = packet.kind == PacketKind::Rerr ? config_.rerr_timer : config_.t_retrans;
    const std::uint64_t token = next_token_++;
    const InflightKey key{packet.id, neighbor};
    Inflight inf;
    inf.packet = packet;
    inf.neighbor = neighbor;
    inf.first_sent = sim_.now();
    inf.deadline = sim_.now() + timeout;
    inf.token = token;
    inf.timer = sim_.schedule(inf.deadline, n, TimerExpiry{TimerKind::Retransmit, token});
    st.inflight[key] = std::move(inf);
    token_owner_key_[token] = key;
    token_owner_node_[token] = n;
    sim_.transmit({n, neighbor}, std::move(packet));
}

bool Network::data_busy(const NodeState& st, NodeId neighbor) const {
    return std::any_of(st.inflight.begin(), st.inflight.end(), [&](const auto& kv) {
        return kv.first.second == neighbor && kv.second.packet.kind == PacketKind::Data;
    });
}

void Network::enqueue_data(NodeId n, NodeId neighbor, Packet packet) {
    auto& st = node(n);
    if (data_busy(st, neighbor)) {
        st.send_queue[neighbor].push_back(std::move(packet));
    } else {
        send_reliable(n, neighbor, std::move(packet));
    }
}

void Network::pump(NodeId n, NodeId neighbor) {
    auto& st = node(n);
    auto it = st.send_queue.find(neighbor);
    if (it == st.send_queue.end() || it->second.empty() || data_busy(st, neighbor)) return;
    Packet next = std::move(it->second.front());
    it->second.pop_front();
    if (it->second.empty()) st.send_queue.erase(it);
    send_reliable(n, neighbor, std::move(next));
}

void Network::finish_inflight(NodeId n, const InflightKey& key) {
    auto& st = node(n);
    auto it = st.inflight.find(key);
    if (it == st.inflight.end()) return;
    sim_.cancel(it->second.timer);
    token_owner_key_.erase(it->second.token);
    token_owner_node_.erase(it->second.token);
    const bool was_data = it->second.packet.kind == PacketKind::Data;
    const NodeId neighbor = it->second.neighbor;
    st.inflight.erase(it);
    if (was_data) pump(n, neighbor);
}

void Network::on_ack(NodeId n, const Packet& ack, NodeId from) {
    if (!ack.ref_id) return;
    finish_inflight(n, {*ack.ref_id, from});
}

void Network::on_nack(NodeId n, const Packet& nack, NodeId from) {
    if (!nack.ref_id) return;
    finish_inflight(n, {*nack.ref_id, from});
}

void Network::on_timeout(NodeId n, std::uint64_t token) {
    auto owner = token_owner_key_.find(token);
    if (owner == token_owner_key_.end() || token_owner_node_.at(token) != n) return;
    auto& st = node(n);
    auto it = st.inflight.find(owner->second);
    if (it == st.inflight.end()) return;
    Inflight& inf = it->second;
    ++stats_.timer_fires;
    sim_.record(n, TraceKind::Timeout, inf.packet.id,
                "to=" + std::to_string(inf.neighbor) + " retries=" + std::to_string(inf.retries));

    if (inf.retries < config_.max_retries) {
        ++inf.retries;
        ++stats_.retransmissions;
        const SimTime timeout = inf.packet.kind == PacketKind::Rerr ? config_.rerr_timer : config_.t_retrans;
        inf.deadline = sim_.now() + timeout;
        inf.timer = sim_.schedule(inf.deadline, n, TimerExpiry{TimerKind::Retransmit, token});
        sim_.transmit({n, inf.neighbor}, inf.packet);
        return;
    }

    Inflight failed = std::move(inf);
    st.inflight.erase(it);
    token_owner_key_.erase(token);
    token_owner_node_.erase(token);
    st.failed_neighbors.insert(failed.neighbor);
    sim_.record(n, TraceKind::LinkFailed, failed.packet.id, "to=" + std::to_string(failed.neighbor));

    if (failed.packet.kind == PacketKind::Data) {
        mark_lost(n, failed.packet, failed.neighbor, "retry_exhausted");
        handle_link_failure(n, failed.neighbor, failed);
    } else if (failed.packet.kind == PacketKind::Rerr) {
        rerr_hop_failed(n, failed);
    }
}

// ---------------------------------------------------------------------------
// DATA path

void Network::on_data_receive(NodeId n, Packet packet, NodeId from) {
    auto& st = node(n);
    const SeqKey key{packet.flow, packet.seq};
    if (!st.seen.insert(key).second) {
        ++stats_.wire_duplicates;
        ++stats_.nacks_sent;
        st.nack_sent.insert(key);
        sim_.record(n, TraceKind::Duplicate, packet.id, "from=" + std::to_string(from));
        send_ack(n, from, packet, PacketKind::Nack);
        return;
    }
    send_ack(n, from, packet, PacketKind::Ack);

    if (packet.multicast) {
        deliver(n, packet);
        forward_multicast(n, packet);
        return;
    }
    if (n == packet.flow.destination) {
        deliver(n, packet);
        return;
    }
    route_data(n, std::move(packet), from);
}

void Network::route_data(NodeId n, Packet packet, std::optional<NodeId> from) {
    auto& st = node(n);
    const auto self = std::find(packet.route.begin(), packet.route.end(), n);
    std::optional<NodeId> header_next;
    if (self != packet.route.end() && self + 1 != packet.route.end()) header_next = *(self + 1);

    if (header_next && !st.failed_neighbors.contains(*header_next) && sim_.topology().find_link({n, *header_next})) {
        NodeId prev = *header_next;
        if (from) {
            prev = *from;
        } else if (const auto* e = st.routing_table.find(packet.flow)) {
            prev = e->prev_hop;
        }
        st.routing_table.install(RoutingEntry{packet.flow, *header_next, prev, sim_.now()});
    }

    const RoutingEntry* entry = st.routing_table.find(packet.flow);
    if (!entry || st.failed_neighbors.contains(entry->next_hop)) {
        hold(n, std::move(packet));
        return;
    }
    if (!header_next || *header_next != entry->next_hop) {
        Route rewritten(packet.route.begin(), self == packet.route.end() ? packet.route.begin() : self);
        const std::set<NodeId> traversed(rewritten.begin(), rewritten.end());
        auto salvage = st.salvage_paths.find(packet.flow);
        if (salvage != st.salvage_paths.end() && salvage->second.size() >= 2 && salvage->second[1] == entry->next_hop) {
            rewritten.insert(rewritten.end(), salvage->second.begin(), salvage->second.end());
        } else {
            rewritten.push_back(n);
            rewritten.push_back(entry->next_hop);
        }
        // A detour back through an upstream node would be NACKed there as a
        // duplicate and silently vanish.
        const bool loops = std::any_of(rewritten.begin() + static_cast<std::ptrdiff_t>(traversed.size()),
                                       rewritten.end(), [&](NodeId x) { return traversed.contains(x); });
        if (loops) {
            mark_lost(n, packet, std::nullopt, "routing_loop");
            return;
        }
        packet.route = std::move(rewritten);
    }
    enqueue_data(n, entry->next_hop, std::move(packet));
}

void Network::hold(NodeId n, Packet packet) {
    auto& st = node(n);
    sim_.record(n, TraceKind::Hold, packet.id, "no_route flow=" + flow_string(packet.flow));
    const Flow flow = packet.flow;
    st.held[flow].push_back(std::move(packet));
    if (!discovery_by_origin_.contains({n, flow})) route_discovery(n, flow);
}

void Network::deliver(NodeId n, const Packet& packet) {
    if (!delivered_keys_.insert({n, {packet.flow, packet.seq}}).second) {
        ++stats_.app_duplicates;
        return;
    }
    deliveries_.push_back(Delivery{packet.id, n, packet.flow, packet.seq, packet.injected_at, sim_.now()});
    sim_.record(n, TraceKind::Deliver, packet.id,
                "flow=" + flow_string(packet.flow) + " seq=" + std::to_string(packet.seq) +
                    " delay_us=" + std::to_string((sim_.now() - packet.injected_at).ticks()));
}

void Network::mark_lost(NodeId n, const Packet& packet, std::optional<NodeId> toward, const std::string& reason) {
    lost_.push_back(LostMark{packet.id, n, toward, sim_.now()});
    sim_.record(n, TraceKind::Lost, packet.id,
                reason + (toward ? " to=" + std::to_string(*toward) : std::string()));
}

void Network::forward_multicast(NodeId n, const Packet& packet) {
    auto& st = node(n);
    for (NodeId child : sim_.topology().multicast_children(n)) {
        if (st.pruned_children.contains(child)) {
            mark_lost(n, packet, child, "pruned");
        } else {
            enqueue_data(n, child, packet);
        }
    }
}

// ---------------------------------------------------------------------------
// Failure handling and RERR propagation

void Network::handle_link_failure(NodeId n, NodeId neighbor, const Inflight& trigger) {
    auto& st = node(n);
    const LinkKey broken{n, neighbor};

    if (trigger.packet.multicast) {
        st.pruned_children.insert(neighbor);
        if (auto q = st.send_queue.find(neighbor); q != st.send_queue.end()) {
            for (const auto& p : q->second) mark_lost(n, p, neighbor, "pruned");
            st.send_queue.erase(q);
        }
        const auto parent = sim_.topology().multicast_parent(n);
        generate_rerr(n, broken, trigger.packet.flow, parent.value_or(n), trigger.first_sent, true);
        return;
    }

    std::vector<std::pair<Flow, NodeId>> affected;
    for (const auto& [flow, entry] : st.routing_table.entries()) {
        if (entry.next_hop == neighbor && flow.source != n) affected.emplace_back(flow, entry.prev_hop);
    }
    for (const auto& [flow, prev] : affected) {
        st.routing_table.erase(flow);
        st.orphaned_prev[flow] = prev;
    }
    const Flow trigger_flow = trigger.packet.flow;
    const bool trigger_covered = std::any_of(affected.begin(), affected.end(),
                                             [&](const auto& a) { return a.first == trigger_flow; });
    if (!trigger_covered && trigger_flow.source != n) {
        auto orphan = st.orphaned_prev.find(trigger_flow);
        affected.emplace_back(trigger_flow, orphan == st.orphaned_prev.end() ? neighbor : orphan->second);
    }
    for (const auto& [flow, prev] : affected) generate_rerr(n, broken, flow, prev, trigger.first_sent);

    // Flows this node originates: the source reacts locally without a RERR packet.
    std::set<Flow> local;
    for (auto& [flow, s] : sessions_) {
        if (flow.source != n) continue;
        const bool uses = std::any_of(s.paths.begin(), s.paths.end(), [&](const SourcePath& p) {
            return p.status == PathStatus::Active && route_uses(p.route, broken);
        });
        if (uses) local.insert(flow);
    }
    for (const auto& flow : local) generate_rerr(n, broken, flow, neighbor, trigger.first_sent);

    // Salvage whatever was queued behind the failed transfer.
    auto q = st.send_queue.find(neighbor);
    if (q == st.send_queue.end()) return;
    std::deque<Packet> queued = std::move(q->second);
    st.send_queue.erase(q);
    for (auto& p : queued) {
        if (p.multicast) {
            st.pruned_children.insert(neighbor);
            mark_lost(n, p, neighbor, "pruned");
        } else if (p.flow.source == n && sessions_.contains(p.flow)) {
            auto& s = sessions_.at(p.flow);
            const auto rec = std::find_if(s.sent.begin(), s.sent.end(), [&](const SentRecord& r) { return r.id == p.id; });
            const std::uint8_t path = rec == s.sent.end() ? 0 : rec->path;
            if (s.paths[path].status == PathStatus::Active) {
                p.route = s.paths[path].route;
                enqueue_data(n, p.route[1], std::move(p));
            } else {
                st.pending_lost.push_back(p.id);
                mark_lost(n, p, std::nullopt, "route_broken");
            }
        } else {
            route_data(n, std::move(p), std::nullopt);
        }
    }
}

void Network::generate_rerr(NodeId n, LinkKey broken_link, Flow flow, NodeId prev_hop, SimTime detected_at,
                            bool multicast) {
    RerrInfo info;
    info.broken_link = broken_link;
    info.origin = n;
    info.target_source = multicast ? sim_.topology().multicast_root() : flow.source;
    info.flow = flow;
    info.detected_at = detected_at;
    info.multicast = multicast;
    rerr_outcomes_.emplace(info, RerrOutcome{info, sim_.now(), std::nullopt, false});

    auto& st = node(n);
    st.rerr_seen.insert(info);
    if (n == info.target_source) {
        sim_.record(n, TraceKind::RerrGenerated, std::nullopt,
                    "local link=" + std::to_string(broken_link.from) + ">" + std::to_string(broken_link.to) +
                        " flow=" + flow_string(flow));
        on_rerr_at_source(n, info);
        return;
    }

    Packet rerr;
    rerr.id = allocate_id();
    rerr.kind = PacketKind::Rerr;
    rerr.flow = flow;
    rerr.rerr = info;
    sim_.record(n, TraceKind::RerrGenerated, rerr.id,
                "link=" + std::to_string(broken_link.from) + ">" + std::to_string(broken_link.to) +
                    " flow=" + flow_string(flow));

    std::optional<NodeId> next;
    if (prev_hop != n && !st.failed_neighbors.contains(prev_hop) && sim_.topology().find_link({n, prev_hop})) {
        next = prev_hop;
    } else {
        next = rerr_alternate(n, info);
    }
    if (!next) {
        sim_.record(n, TraceKind::RerrStranded, rerr.id, "no_reverse_path");
        rerr_outcomes_.at(info).stranded = true;
        return;
    }
    send_rerr(n, *next, std::move(rerr));
}

void Network::send_rerr(NodeId n, NodeId neighbor, Packet rerr) { send_reliable(n, neighbor, std::move(rerr)); }

void Network::forward_rerr(NodeId n, const Packet& rerr, NodeId from) {
    send_ack(n, from, rerr, PacketKind::Ack);
    if (!rerr.rerr) return;
    const RerrInfo& info = *rerr.rerr;
    auto& st = node(n);
    if (!st.rerr_seen.insert(info).second) return;
    st.rerr_from[info] = from;

    if (n == info.target_source) {
        on_rerr_at_source(n, info);
        return;
    }
    const auto next = rerr_next_hop(n, info);
    if (!next) {
        sim_.record(n, TraceKind::RerrStranded, rerr.id, "no_reverse_path");
        rerr_outcomes_[info].stranded = true;
        return;
    }
    send_rerr(n, *next, rerr);
}

std::optional<NodeId> Network::rerr_next_hop(NodeId n, const RerrInfo& info) const {
    const auto& st = node(n);
    const auto from = st.rerr_from.find(info);
    auto usable = [&](NodeId nb) {
        return nb != n && !st.failed_neighbors.contains(nb) && (from == st.rerr_from.end() || from->second != nb) &&
               sim_.topology().find_link({n, nb});
    };
    if (info.multicast) {
        if (auto parent = sim_.topology().multicast_parent(n); parent && usable(*parent)) return parent;
    } else if (const auto* entry = st.routing_table.find(info.flow); entry && usable(entry->prev_hop)) {
        return entry->prev_hop;
    } else if (auto orphan = st.orphaned_prev.find(info.flow); orphan != st.orphaned_prev.end() && usable(orphan->second)) {
        return orphan->second;
    }
    return rerr_alternate(n, info);
}

std::optional<NodeId> Network::rerr_alternate(NodeId n, const RerrInfo& info) const {
    const auto& st = node(n);
    const auto& topo = sim_.topology();
    std::set<NodeId> candidates;
    if (topo.find_link({n, info.target_source})) candidates.insert(info.target_source);
    for (const auto& [key, entry] : st.routing_table.entries()) {
        if (key.source == info.target_source) candidates.insert(entry.prev_hop);
        if (key.destination == info.target_source) candidates.insert(entry.next_hop);
    }
    if (info.multicast) {
        if (auto parent = topo.multicast_parent(n)) candidates.insert(*parent);
    }
    const auto from = st.rerr_from.find(info);
    for (NodeId c : candidates) {
        if (c == n || st.failed_neighbors.contains(c) || !topo.find_link({n, c})) continue;
        if (from != st.rerr_from.end() && from->second == c) continue;
        return c;  // std::set iterates ascending: lowest id wins
    }
    return std::nullopt;
}

void Network::rerr_hop_failed(NodeId n, const Inflight& trigger) {
    const RerrInfo& info = *trigger.packet.rerr;
    const auto alt = rerr_alternate(n, info);
    if (!alt) {
        sim_.record(n, TraceKind::RerrStranded, trigger.packet.id, "no_alternate");
        rerr_outcomes_[info].stranded = true;
        return;
    }
    Packet detour = trigger.packet;
    detour.id = allocate_id();
    sim_.record(n, TraceKind::RerrDetour, detour.id,
                "via=" + std::to_string(*alt) + " failed=" + std::to_string(trigger.neighbor));
    send_rerr(n, *alt, std::move(detour));
}

void Network::on_rerr_at_source(NodeId source, const RerrInfo& info) {
    auto outcome = rerr_outcomes_.find(info);
    if (outcome == rerr_outcomes_.end()) {
        outcome = rerr_outcomes_.emplace(info, RerrOutcome{info, info.detected_at, std::nullopt, false}).first;
    }
    if (outcome->second.reached_source_at) return;
    outcome->second.reached_source_at = sim_.now();
    outcome->second.stranded = false;
    const SimTime delay = sim_.now() - info.detected_at;
    sim_.record(source, TraceKind::RerrAtSource, std::nullopt,
                "link=" + std::to_string(info.broken_link.from) + ">" + std::to_string(info.broken_link.to) +
                    " flow=" + flow_string(info.flow) + " delay_us=" + std::to_string(delay.ticks()));
    if (info.multicast) return;

    auto it = sessions_.find(info.flow);
    if (it == sessions_.end()) return;
    SourceSession& s = it->second;
    s.delays.record(delay);
    s.known_broken.insert(info.broken_link);

    std::set<std::uint8_t> affected;
    for (std::uint8_t p = 0; p < s.paths.size(); ++p) {
        if (s.paths[p].status == PathStatus::Active && route_uses(s.paths[p].route, info.broken_link)) {
            affected.insert(p);
        }
    }
    compute_estimates(s, info, affected);

    for (std::uint8_t p : affected) {
        s.paths[p].status = PathStatus::Recovering;
        if (auto cached = cached_route(s)) activate_path(s, p, *cached, true);
    }
    const bool recovering = std::any_of(s.paths.begin(), s.paths.end(),
                                        [](const SourcePath& p) { return p.status == PathStatus::Recovering; });
    if (recovering && !s.discovery) s.discovery = route_discovery(source, info.flow);
}

std::optional<Route> Network::cached_route(const SourceSession& s) const {
    const auto& cache = node(s.flow.source).route_cache;
    auto it = cache.find(s.flow);
    if (it == cache.end()) return std::nullopt;
    for (auto r = it->second.rbegin(); r != it->second.rend(); ++r) {
        const bool stale = std::any_of(s.known_broken.begin(), s.known_broken.end(),
                                       [&](const LinkKey& l) { return route_uses(*r, l); });
        if (!stale) return *r;
    }
    return std::nullopt;
}

void Network::compute_estimates(SourceSession& s, const RerrInfo& info, const std::set<std::uint8_t>& paths) {
    if (paths.empty()) return;
    if (estimator::t_data(config_.channel.payload_bits, config_.channel.rate_bps).ticks() == 0) return;
    const auto dist = config_.delay_mode == DelayMode::Empirical && !s.delays.empty()
                          ? s.delays.empirical_dist()
                          : estimator::DelayDistribution::deterministic(
                                estimator::t_delay(config_.channel.t_retrans, config_.channel.t_rerr));
    EstimateBatch batch{info, sim_.now(), {}};
    std::uint32_t n = 0;
    for (auto r = s.sent.rbegin(); r != s.sent.rend() && n < config_.estimate_window; ++r) {
        if (!paths.contains(r->path)) continue;
        ++n;
        const auto est = estimator::packet_loss_prob(n, config_.channel, dist);
        batch.per_packet.emplace_back(r->id, est);
        std::ostringstream detail;
        detail << "n=" << n << " pg=" << est.p_good << " pf=" << est.p_fail << " pr=" << est.pr;
        sim_.record(s.flow.source, TraceKind::Estimate, r->id, detail.str());
    }
    estimates_.push_back(batch);
    if (estimate_listener_) estimate_listener_(estimates_.back());
}

// ---------------------------------------------------------------------------
// Route discovery

std::uint64_t Network::route_discovery(NodeId origin, Flow flow) {
    if (flow.source == flow.destination) throw std::invalid_argument("discovery needs distinct endpoints");
    auto& st = node(origin);
    const std::uint64_t req = next_request_++;
    const EventId timer = sim_.schedule(sim_.now() + config_.discovery_timeout, origin,
                                        TimerExpiry{TimerKind::Discovery, req});
    discoveries_[req] = DiscoveryState{origin, flow, timer};
    discovery_by_origin_[{origin, flow}] = req;
    st.rreq_seen.insert({origin, req});
    sim_.record(origin, TraceKind::DiscoveryStart, std::nullopt,
                "flow=" + flow_string(flow) + " req=" + std::to_string(req));

    Packet q;
    q.id = allocate_id();
    q.kind = PacketKind::Rreq;
    q.flow = flow;
    q.discovery_origin = origin;
    q.request_id = req;
    q.route = {origin};
    for (NodeId nb : sim_.topology().neighbors(origin)) {
        if (st.failed_neighbors.contains(nb)) continue;
        ++stats_.rreq_transmissions;
        sim_.transmit({origin, nb}, q);
    }
    return req;
}

void Network::on_rreq(NodeId n, const Packet& rreq, NodeId from) {
    auto& st = node(n);
    if (!st.rreq_seen.insert({rreq.discovery_origin, rreq.request_id}).second) return;
    Route path = rreq.route;
    path.push_back(n);

    if (n == rreq.flow.destination) {
        st.routing_table.install(RoutingEntry{rreq.flow, from, from, sim_.now()});
        Packet rep;
        rep.id = allocate_id();
        rep.kind = PacketKind::Rrep;
        rep.flow = rreq.flow;
        rep.discovery_origin = rreq.discovery_origin;
        rep.request_id = rreq.request_id;
        rep.route = std::move(path);
        sim_.transmit({n, from}, std::move(rep));
        return;
    }
    Packet fwd = rreq;
    fwd.route = std::move(path);
    for (NodeId nb : sim_.topology().neighbors(n)) {
        if (nb == from || st.failed_neighbors.contains(nb)) continue;
        ++stats_.rreq_transmissions;
        sim_.transmit({n, nb}, fwd);
    }
}

void Network::on_rrep(NodeId n, const Packet& rrep, NodeId) {
    const auto& path = rrep.route;
    const auto self = std::find(path.begin(), path.end(), n);
    if (self == path.end() || self + 1 == path.end()) return;
    const auto i = static_cast<std::size_t>(self - path.begin());

    if (i == 0) {
        auto it = discoveries_.find(rrep.request_id);
        if (it == discoveries_.end() || it->second.origin != n) return;  // late RREP
        sim_.cancel(it->second.timer);
        discovery_by_origin_.erase({n, it->second.flow});
        const Flow flow = it->second.flow;
        discoveries_.erase(it);
        route_found(n, flow, path);
        return;
    }
    node(n).routing_table.install(RoutingEntry{rrep.flow, path[i + 1], path[i - 1], sim_.now()});
    sim_.record(n, TraceKind::RouteInstall, std::nullopt,
                "flow=" + flow_string(rrep.flow) + " next=" + std::to_string(path[i + 1]) +
                    " prev=" + std::to_string(path[i - 1]));
    sim_.transmit({n, path[i - 1]}, rrep);
}

void Network::route_found(NodeId origin, Flow flow, const Route& path) {
    auto& st = node(origin);
    if (origin == flow.source) {
        auto& s = session_for(flow);
        s.discovery.reset();
        add_cached_route(flow, path);
        for (std::uint8_t p = 0; p < s.paths.size(); ++p) {
            if (s.paths[p].status != PathStatus::Active) activate_path(s, p, path, false);
        }
        return;
    }
    auto orphan = st.orphaned_prev.find(flow);
    const NodeId prev = orphan == st.orphaned_prev.end() ? path[1] : orphan->second;
    st.routing_table.install(RoutingEntry{flow, path[1], prev, sim_.now()});
    st.salvage_paths[flow] = path;
    sim_.record(origin, TraceKind::RouteInstall, std::nullopt,
                "flow=" + flow_string(flow) + " salvage=" + path_string(path));
    auto held = st.held.find(flow);
    if (held == st.held.end()) return;
    std::deque<Packet> packets = std::move(held->second);
    st.held.erase(held);
    for (auto& p : packets) route_data(origin, std::move(p), std::nullopt);
}

void Network::on_discovery_timeout(std::uint64_t request_id) {
    auto it = discoveries_.find(request_id);
    if (it == discoveries_.end()) return;
    const DiscoveryState d = it->second;
    discoveries_.erase(it);
    discovery_by_origin_.erase({d.origin, d.flow});
    sim_.record(d.origin, TraceKind::DiscoveryFailed, std::nullopt,
                "flow=" + flow_string(d.flow) + " req=" + std::to_string(request_id));

    auto& st = node(d.origin);
    if (d.origin == d.flow.source) {
        auto& s = session_for(d.flow);
        s.discovery.reset();
        for (auto& p : s.paths) {
            if (p.status != PathStatus::Active) p.status = PathStatus::Suspended;
        }
        auto held = std::move(s.held);
        s.held.clear();
        for (auto& [path, p] : held) {
            st.pending_lost.push_back(p.id);
            mark_lost(d.origin, p, std::nullopt, "discovery_failed");
        }
        return;
    }
    auto held = st.held.find(d.flow);
    if (held == st.held.end()) return;
    for (const auto& p : held->second) mark_lost(d.origin, p, std::nullopt, "discovery_failed");
    st.held.erase(held);
}

// ---------------------------------------------------------------------------
// Accounting

std::set<PacketId> Network::live_data() const {
    std::set<PacketId> live;
    for (const auto& [id, st] : nodes_) {
        for (const auto& [key, inf] : st.inflight) {
            if (inf.packet.kind == PacketKind::Data) live.insert(key.first);
        }
        for (const auto& [nb, q] : st.send_queue) {
            for (const auto& p : q) live.insert(p.id);
        }
        for (const auto& [flow, q] : st.held) {
            for (const auto& p : q) live.insert(p.id);
        }
    }
    for (const auto& [flow, s] : sessions_) {
        for (const auto& [path, p] : s.held) live.insert(p.id);
    }
    for (const auto& arrival : sim_.packets_on_wire()) {
        if (arrival.packet.kind == PacketKind::Data) live.insert(arrival.packet.id);
    }
    return live;
}

std::set<std::pair<PacketId, LinkKey>> Network::live_multicast_edges() const {
    std::set<std::pair<PacketId, LinkKey>> live;
    for (const auto& [id, st] : nodes_) {
        for (const auto& [key, inf] : st.inflight) {
            if (inf.packet.kind == PacketKind::Data && inf.packet.multicast) live.insert({key.first, {id, key.second}});
        }
        for (const auto& [nb, q] : st.send_queue) {
            for (const auto& p : q) {
                if (p.multicast) live.insert({p.id, {id, nb}});
            }
        }
    }
    for (const auto& arrival : sim_.packets_on_wire()) {
        if (arrival.packet.kind == PacketKind::Data && arrival.packet.multicast) {
            live.insert({arrival.packet.id, arrival.link});
        }
    }
    return live;
}

}  // namespace rerrsim::routing
