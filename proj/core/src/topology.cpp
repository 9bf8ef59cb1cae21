#include "rerrsim/topology.hpp"

#include <algorithm>
#include <deque>
#include <string>

namespace rerrsim {

Link::Link(LinkKey endpoints, SimTime propagation_delay, double loss_rate)
    : endpoints_(endpoints), delay_(propagation_delay), loss_rate_(loss_rate) {
    if (!(loss_rate >= 0.0 && loss_rate <= 1.0)) {
        throw TopologyError("loss_rate must lie in [0,1], got " + std::to_string(loss_rate));
    }
    if (endpoints.from == endpoints.to) throw TopologyError("self-loop link");
}

bool Link::is_down(SimTime t) const {
    // Sorted and disjoint: the only candidate is the last interval starting at or before t.
    auto it = std::upper_bound(failures_.begin(), failures_.end(), t,
                               [](SimTime v, const FailureInterval& f) { return v < f.down_at; });
    if (it == failures_.begin()) return false;
    return std::prev(it)->contains(t);
}

void Link::add_failure(FailureInterval interval) {
    if (!(interval.down_at < interval.up_at)) {
        throw TopologyError("failure interval must satisfy down_at < up_at");
    }
    for (const auto& f : failures_) {
        if (interval.down_at < f.up_at && f.down_at < interval.up_at) {
            throw TopologyError("failure interval [" + to_string(interval.down_at) + "," +
                                to_string(interval.up_at) + ") overlaps [" + to_string(f.down_at) +
                                "," + to_string(f.up_at) + ") on link " +
                                std::to_string(endpoints_.from) + ">" + std::to_string(endpoints_.to));
        }
    }
    auto pos = std::lower_bound(failures_.begin(), failures_.end(), interval,
                                [](const FailureInterval& a, const FailureInterval& b) {
                                    return a.down_at < b.down_at;
                                });
    failures_.insert(pos, interval);
}

void Topology::add_node(NodeId id) { nodes_.insert(id); }

Link& Topology::add_link(NodeId from, NodeId to, SimTime delay, double loss_rate) {
    if (!has_node(from) || !has_node(to)) {
        throw TopologyError("link " + std::to_string(from) + ">" + std::to_string(to) +
                            " references an undeclared node");
    }
    LinkKey key{from, to};
    if (links_.contains(key)) {
        throw TopologyError("duplicate link " + std::to_string(from) + ">" + std::to_string(to));
    }
    return links_.emplace(key, Link(key, delay, loss_rate)).first->second;
}

void Topology::add_bidirectional(NodeId a, NodeId b, SimTime delay, double loss_rate) {
    add_link(a, b, delay, loss_rate);
    add_link(b, a, delay, loss_rate);
}

Link* Topology::find_link(LinkKey key) {
    auto it = links_.find(key);
    return it == links_.end() ? nullptr : &it->second;
}

const Link* Topology::find_link(LinkKey key) const {
    auto it = links_.find(key);
    return it == links_.end() ? nullptr : &it->second;
}

const Link& Topology::link(LinkKey key) const {
    if (const auto* l = find_link(key)) return *l;
    throw TopologyError("unknown link " + std::to_string(key.from) + ">" + std::to_string(key.to));
}

Link& Topology::link(LinkKey key) {
    if (auto* l = find_link(key)) return *l;
    throw TopologyError("unknown link " + std::to_string(key.from) + ">" + std::to_string(key.to));
}

std::size_t Topology::link_index(LinkKey key) const {
    auto it = links_.find(key);
    if (it == links_.end()) link(key);  // throws
    return static_cast<std::size_t>(std::distance(links_.begin(), it));
}

std::vector<NodeId> Topology::neighbors(NodeId node) const {
    std::vector<NodeId> out;
    for (auto it = links_.lower_bound(LinkKey{node, 0}); it != links_.end() && it->first.from == node; ++it) {
        out.push_back(it->first.to);
    }
    return out;
}

void Topology::set_multicast_tree(NodeId root, std::map<NodeId, NodeId> parent_of) {
    if (!has_node(root)) throw TopologyError("multicast root is not a declared node");
    if (parent_of.contains(root)) throw TopologyError("multicast root cannot have a parent");
    for (const auto& [child, parent] : parent_of) {
        if (!has_node(child) || !has_node(parent)) {
            throw TopologyError("multicast tree references an undeclared node");
        }
        if (!find_link({parent, child}) || !find_link({child, parent})) {
            throw TopologyError("multicast tree edge " + std::to_string(parent) + "-" +
                                std::to_string(child) + " has no link");
        }
    }
    // Every node must climb to the root without revisiting anything.
    for (const auto& [child, parent] : parent_of) {
        std::set<NodeId> seen{child};
        NodeId cur = parent;
        while (cur != root) {
            if (!seen.insert(cur).second) throw TopologyError("multicast tree contains a cycle");
            auto it = parent_of.find(cur);
            if (it == parent_of.end()) throw TopologyError("multicast tree is not rooted at the transmitter");
            cur = it->second;
        }
    }
    multicast_root_ = root;
    multicast_parent_ = std::move(parent_of);
}

NodeId Topology::multicast_root() const {
    if (!multicast_root_) throw TopologyError("no multicast tree defined");
    return *multicast_root_;
}

std::optional<NodeId> Topology::multicast_parent(NodeId node) const {
    auto it = multicast_parent_.find(node);
    if (it == multicast_parent_.end()) return std::nullopt;
    return it->second;
}

std::vector<NodeId> Topology::multicast_children(NodeId node) const {
    std::vector<NodeId> out;
    for (const auto& [child, parent] : multicast_parent_) {
        if (parent == node) out.push_back(child);
    }
    return out;
}

bool Topology::on_multicast_tree(NodeId node) const {
    return multicast_root_ && (node == *multicast_root_ || multicast_parent_.contains(node));
}

std::set<NodeId> Topology::reachable_during(NodeId from, SimTime begin, SimTime end) const {
    auto up_throughout = [&](const Link& l) {
        return std::none_of(l.failures().begin(), l.failures().end(), [&](const FailureInterval& f) {
            return f.down_at < end && begin < f.up_at;
        });
    };
    std::set<NodeId> seen{from};
    std::deque<NodeId> frontier{from};
    while (!frontier.empty()) {
        NodeId cur = frontier.front();
        frontier.pop_front();
        for (NodeId nb : neighbors(cur)) {
            if (seen.contains(nb) || !up_throughout(link({cur, nb}))) continue;
            seen.insert(nb);
            frontier.push_back(nb);
        }
    }
    return seen;
}

}  // namespace rerrsim
