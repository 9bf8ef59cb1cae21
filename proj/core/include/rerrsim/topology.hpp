#pragma once

#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <vector>

#include "rerrsim/packet.hpp"
#include "rerrsim/sim_time.hpp"

namespace rerrsim {

class TopologyError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Half-open failure window [down_at, up_at).
struct FailureInterval {
    SimTime down_at;
    SimTime up_at;

    bool contains(SimTime t) const { return down_at <= t && t < up_at; }
    bool operator==(const FailureInterval&) const = default;
};

/// Directed link with propagation delay, Bernoulli loss and a failure schedule.
class Link {
public:
    Link(LinkKey endpoints, SimTime propagation_delay, double loss_rate);

    const LinkKey& endpoints() const { return endpoints_; }
    SimTime propagation_delay() const { return delay_; }
    double loss_rate() const { return loss_rate_; }
    const std::vector<FailureInterval>& failures() const { return failures_; }

    bool is_down(SimTime t) const;
    /// Inserts keeping the schedule ordered; throws TopologyError on overlap or empty interval.
    void add_failure(FailureInterval interval);

private:
    LinkKey endpoints_;
    SimTime delay_;
    double loss_rate_;
    std::vector<FailureInterval> failures_;
};

class Topology {
public:
    void add_node(NodeId id);
    /// Adds a directed link. Both endpoints must already be declared.
    Link& add_link(NodeId from, NodeId to, SimTime delay, double loss_rate = 0.0);
    /// Adds the two directed links of a symmetric hop.
    void add_bidirectional(NodeId a, NodeId b, SimTime delay, double loss_rate = 0.0);

    bool has_node(NodeId id) const { return nodes_.contains(id); }
    const std::set<NodeId>& nodes() const { return nodes_; }

    Link* find_link(LinkKey key);
    const Link* find_link(LinkKey key) const;
    const Link& link(LinkKey key) const;
    Link& link(LinkKey key);
    const std::map<LinkKey, Link>& links() const { return links_; }
    /// Stable index of a link in key order, used to derive its RNG stream.
    std::size_t link_index(LinkKey key) const;

    /// Neighbors reachable over an outgoing link, ascending.
    std::vector<NodeId> neighbors(NodeId node) const;

    /// Source-rooted multicast tree given as child -> parent. Validated acyclic.
    void set_multicast_tree(NodeId root, std::map<NodeId, NodeId> parent_of);
    bool has_multicast_tree() const { return multicast_root_.has_value(); }
    NodeId multicast_root() const;
    std::optional<NodeId> multicast_parent(NodeId node) const;
    std::vector<NodeId> multicast_children(NodeId node) const;
    bool on_multicast_tree(NodeId node) const;

    /// Nodes connected to `from` using only links that are up throughout [begin, end).
    std::set<NodeId> reachable_during(NodeId from, SimTime begin, SimTime end) const;

private:
    std::set<NodeId> nodes_;
    std::map<LinkKey, Link> links_;
    std::optional<NodeId> multicast_root_;
    std::map<NodeId, NodeId> multicast_parent_;
};

}  // namespace rerrsim
