#include "rerrsim/simulator.hpp"

#include <algorithm>
#include <stdexcept>

namespace rerrsim {

void EventQueue::push(Event e) {
    heap_.push_back(std::move(e));
    std::push_heap(heap_.begin(), heap_.end(), Later{});
}

void EventQueue::skip_cancelled() {
    while (!heap_.empty()) {
        auto it = cancelled_.find(heap_.front().seq);
        if (it == cancelled_.end()) return;
        cancelled_.erase(it);
        std::pop_heap(heap_.begin(), heap_.end(), Later{});
        heap_.pop_back();
    }
}

bool EventQueue::empty() {
    skip_cancelled();
    return heap_.empty();
}

const Event& EventQueue::top() {
    skip_cancelled();
    if (heap_.empty()) throw std::logic_error("EventQueue::top on empty queue");
    return heap_.front();
}

Event EventQueue::pop() {
    skip_cancelled();
    if (heap_.empty()) throw std::logic_error("EventQueue::pop on empty queue");
    std::pop_heap(heap_.begin(), heap_.end(), Later{});
    Event e = std::move(heap_.back());
    heap_.pop_back();
    return e;
}

std::size_t EventQueue::live_size() const {
    return static_cast<std::size_t>(
        std::count_if(heap_.begin(), heap_.end(), [&](const Event& e) { return !cancelled_.contains(e.seq); }));
}

void EventQueue::for_each(const std::function<void(const Event&)>& fn) const {
    for (const auto& e : heap_) {
        if (!cancelled_.contains(e.seq)) fn(e);
    }
}

Simulator::Simulator(Topology topology, std::uint64_t seed) : topology_(std::move(topology)), seed_(seed) {
    for (const auto& [key, link] : topology_.links()) {
        link_streams_.emplace(key, BernoulliStream(derive_seed(seed_, topology_.link_index(key))));
        for (const auto& f : link.failures()) {
            schedule(f.down_at, key.from, LinkStateChange{key, false});
            if (!f.up_at.is_infinite()) schedule(f.up_at, key.from, LinkStateChange{key, true});
        }
    }
}

EventId Simulator::schedule(SimTime fire_at, NodeId target, EventPayload payload) {
    if (fire_at < now_) {
        throw std::logic_error("cannot schedule event at " + to_string(fire_at) +
                               " before current clock " + to_string(now_));
    }
    EventId id = next_seq_++;
    queue_.push(Event{fire_at, id, target, std::move(payload)});
    return id;
}

const EventTrace& Simulator::run_until(SimTime t_end) {
    if (t_end < now_) throw std::logic_error("run_until target precedes current clock");
    while (!queue_.empty() && queue_.top().fire_at <= t_end) {
        Event e = queue_.pop();
        now_ = e.fire_at;
        std::visit(
            [&](auto& payload) {
                using T = std::decay_t<decltype(payload)>;
                if constexpr (std::is_same_v<T, PacketArrival>) {
                    record(e.target, TraceKind::Rx, payload.packet.id,
                           describe(payload.packet) + " from=" + std::to_string(payload.link.from));
                    if (handler_) handler_->on_packet(e.target, payload.link.from, std::move(payload.packet));
                } else if constexpr (std::is_same_v<T, TimerExpiry>) {
                    if (handler_) handler_->on_timer(e.target, payload);
                } else {
                    record(payload.link.from, payload.up ? TraceKind::LinkUp : TraceKind::LinkDown, std::nullopt,
                           "to=" + std::to_string(payload.link.to));
                    if (handler_) handler_->on_link_change(payload);
                }
            },
            e.payload);
    }
    now_ = t_end;
    return trace_;
}

BernoulliStream& Simulator::stream_for(LinkKey link) {
    auto it = link_streams_.find(link);
    if (it == link_streams_.end()) {
        topology_.link(link);  // throws for unknown links
        it = link_streams_.emplace(link, BernoulliStream(derive_seed(seed_, topology_.link_index(link)))).first;
    }
    return it->second;
}

void Simulator::transmit(LinkKey key, Packet packet) {
    const Link& link = topology_.link(key);
    ++transmissions_;
    record(key.from, TraceKind::Tx, packet.id, describe(packet) + " to=" + std::to_string(key.to));
    if (link.is_down(now_)) {
        ++drops_;
        record(key.from, TraceKind::Drop, packet.id, "link_down to=" + std::to_string(key.to));
        return;
    }
    if (stream_for(key).draw(link.loss_rate())) {
        ++drops_;
        record(key.from, TraceKind::Drop, packet.id, "loss to=" + std::to_string(key.to));
        return;
    }
    schedule(now_ + link.propagation_delay(), key.to, PacketArrival{key, std::move(packet)});
}

void Simulator::set_link_failure(LinkKey key, SimTime down_at, SimTime up_at) {
    if (down_at < now_) throw std::logic_error("link failure scheduled in the past");
    topology_.link(key).add_failure({down_at, up_at});
    schedule(down_at, key.from, LinkStateChange{key, false});
    if (!up_at.is_infinite()) schedule(up_at, key.from, LinkStateChange{key, true});
}

void Simulator::record(NodeId node, TraceKind kind, std::optional<PacketId> packet, std::string detail) {
    trace_.append(TraceRecord{now_, node, kind, packet, std::move(detail)});
}

std::vector<PacketArrival> Simulator::packets_on_wire() const {
    std::vector<PacketArrival> out;
    queue_.for_each([&](const Event& e) {
        if (const auto* arrival = std::get_if<PacketArrival>(&e.payload)) out.push_back(*arrival);
    });
    return out;
}

}  // namespace rerrsim
