#include <gtest/gtest.h>

#include "rerrsim/scenario.hpp"
#include "test_util.hpp"

using namespace rerrsim;
using namespace rerrsim::routing;
using namespace rerrsim::testing;

namespace {

constexpr Flow kFlow03{0, 3};

ProtocolConfig config_k(std::uint32_t k) {
    ProtocolConfig pc;
    pc.max_retries = k;
    return pc;
}

void fail_both(Simulator& sim, NodeId a, NodeId b, SimTime down, SimTime up = SimTime::infinity()) {
    sim.set_link_failure({a, b}, down, up);
    sim.set_link_failure({b, a}, down, up);
}

std::size_t tx_of(const EventTrace& trace, NodeId node, PacketId id, NodeId to) {
    return static_cast<std::size_t>(std::count_if(trace.records().begin(), trace.records().end(), [&](const auto& r) {
        return r.kind == TraceKind::Tx && r.node == node && r.packet_id == id &&
               r.detail.ends_with(" to=" + std::to_string(to));
    }));
}

bool conserved(const Bench& b) {
    return harness::check_conservation(b.net, b.sim.topology()).holds();
}

}  // namespace

TEST(HopReliability, AckedDeliveryOverChain) {
    Bench b(chain(3));
    b.net.install_route({0, 2}, chain_route(3));
    const PacketId id = b.send_at(SimTime::ms(0), {0, 2}, 0);
    b.sim.run_until(SimTime::ms(100));
    ASSERT_EQ(b.net.deliveries().size(), 1u);
    EXPECT_EQ(b.net.deliveries()[0].id, id);
    EXPECT_EQ(b.net.deliveries()[0].delivered_at, SimTime::ms(2));
    EXPECT_EQ(b.net.stats().timer_fires, 0u);
    EXPECT_EQ(b.net.stats().retransmissions, 0u);
    for (NodeId n : {0u, 1u, 2u}) EXPECT_TRUE(b.net.node(n).inflight.empty());
    EXPECT_EQ(count(b.sim.trace(), TraceKind::Tx, 2, std::nullopt, "ACK"), 1u);
    EXPECT_TRUE(conserved(b));
}

TEST(HopReliability, DuplicateAnsweredWithNack) {
    Bench b(chain(2));
    b.net.install_route({0, 1}, chain_route(2));
    b.sim.set_link_failure({1, 0}, SimTime::ms(0), SimTime::ms(2));  // first ACK dropped
    const PacketId id = b.send_at(SimTime::ms(0), {0, 1}, 0);
    b.sim.run_until(SimTime::ms(100));
    EXPECT_EQ(b.net.deliveries().size(), 1u);
    EXPECT_EQ(b.net.stats().retransmissions, 1u);
    EXPECT_EQ(b.net.stats().wire_duplicates, 1u);
    EXPECT_EQ(b.net.stats().nacks_sent, 1u);
    EXPECT_EQ(b.net.stats().app_duplicates, 0u);
    EXPECT_EQ(tx_of(b.sim.trace(), 0, id, 1), 2u);
    EXPECT_EQ(count(b.sim.trace(), TraceKind::LinkFailed), 0u);
    EXPECT_TRUE(b.net.node(0).inflight.empty());
}

TEST(HopReliability, NackStopsRetries) {
    Bench b(chain(2), config_k(5));
    b.net.install_route({0, 1}, chain_route(2));
    b.sim.set_link_failure({1, 0}, SimTime::ms(0), SimTime::ms(2));
    const PacketId id = b.send_at(SimTime::ms(0), {0, 1}, 0);
    b.sim.run_until(SimTime::seconds(1));
    // Original plus one retry; the NACK for the retry ends the transfer.
    EXPECT_EQ(tx_of(b.sim.trace(), 0, id, 1), 2u);
    EXPECT_EQ(b.net.stats().timer_fires, 1u);
}

TEST(HopReliability, UnknownAckIgnored) {
    Bench b(chain(2));
    Packet ack;
    ack.kind = PacketKind::Ack;
    ack.ref_id = 999;
    EXPECT_NO_THROW(b.net.on_ack(0, ack, 1));
    EXPECT_NO_THROW(b.net.on_nack(0, ack, 1));
    EXPECT_NO_THROW(b.net.on_timeout(0, 12345));
    EXPECT_TRUE(b.sim.trace().empty());
}

TEST(HopReliability, AckAfterThirdRetry) {
    Bench b(chain(2), config_k(3));
    b.net.install_route({0, 1}, chain_route(2));
    b.sim.set_link_failure({0, 1}, SimTime::ms(0), SimTime::ms(25));
    const PacketId id = b.send_at(SimTime::ms(0), {0, 1}, 0);
    b.sim.run_until(SimTime::ms(200));
    ASSERT_EQ(b.net.deliveries().size(), 1u);
    EXPECT_EQ(b.net.deliveries()[0].delivered_at, SimTime::ms(31));
    EXPECT_EQ(b.net.stats().retransmissions, 3u);
    EXPECT_EQ(tx_of(b.sim.trace(), 0, id, 1), 4u);
    EXPECT_EQ(count(b.sim.trace(), TraceKind::LinkFailed), 0u);
    EXPECT_TRUE(b.net.node(0).failed_neighbors.empty());
}

TEST(HopReliability, StopAndWaitQueuesBehindInflight) {
    Bench b(chain(2));
    b.net.install_route({0, 1}, chain_route(2));
    b.send_at(SimTime::ms(0), {0, 1}, 0);
    b.send_at(SimTime::us(500), {0, 1}, 1);
    b.sim.run_until(SimTime::us(600));
    EXPECT_EQ(b.net.node(0).send_queue.at(1).size(), 1u);
    b.sim.run_until(SimTime::ms(10));
    ASSERT_EQ(b.net.deliveries().size(), 2u);
    EXPECT_EQ(b.net.deliveries()[1].delivered_at, SimTime::ms(3));
}

TEST(RouteError, RetryBoundThenRerrToSource) {
    Bench b(chain(4), config_k(2));
    b.net.install_route(kFlow03, chain_route(4));
    fail_both(b.sim, 2, 3, SimTime::ms(0));
    const PacketId id = b.send_at(SimTime::ms(0), kFlow03, 0);
    b.sim.run_until(SimTime::seconds(1));

    EXPECT_EQ(tx_of(b.sim.trace(), 2, id, 3), 3u);
    EXPECT_EQ(count(b.sim.trace(), TraceKind::LinkFailed, 2, id), 1u);
    EXPECT_EQ(count(b.sim.trace(), TraceKind::Lost, 2, id, "retry_exhausted"), 1u);
    EXPECT_TRUE(b.net.node(2).failed_neighbors.contains(3));
    EXPECT_EQ(b.net.node(2).routing_table.find(kFlow03), nullptr);

    ASSERT_EQ(b.net.rerr_outcomes().size(), 1u);
    const auto& out = b.net.rerr_outcomes().begin()->second;
    EXPECT_EQ(out.info.broken_link, (LinkKey{2, 3}));
    EXPECT_EQ(out.info.origin, 2u);
    EXPECT_EQ(out.info.detected_at, SimTime::ms(2));
    EXPECT_EQ(out.generated_at, SimTime::ms(32));
    ASSERT_TRUE(out.reached_source_at);
    EXPECT_EQ(*out.reached_source_at, SimTime::ms(34));
    EXPECT_FALSE(out.stranded);

    // Each RERR hop was acknowledged, so no RERR timer fired.
    for (const auto& r : records(b.sim.trace(), TraceKind::Timeout)) EXPECT_EQ(r.packet_id, id);
    EXPECT_EQ(count(b.sim.trace(), TraceKind::Tx, 1, std::nullopt, "ACK"), 2u);  // DATA and RERR from 2

    // Estimates for the single sent packet.
    ASSERT_EQ(b.net.estimates().size(), 1u);
    ASSERT_EQ(b.net.estimates()[0].per_packet.size(), 1u);
    EXPECT_EQ(b.net.estimates()[0].per_packet[0].first, id);

    // The only cached route is stale and the chain is partitioned.
    const auto* s = b.net.session(kFlow03);
    ASSERT_NE(s, nullptr);
    EXPECT_EQ(s->paths[0].status, PathStatus::Suspended);
    EXPECT_EQ(count(b.sim.trace(), TraceKind::DiscoveryFailed, 0), 1u);
    EXPECT_TRUE(conserved(b));
}

TEST(RouteError, SourceDetectsLocally) {
    Bench b(chain(2), config_k(1));
    b.net.install_route({0, 1}, chain_route(2));
    fail_both(b.sim, 0, 1, SimTime::ms(0));
    b.send_at(SimTime::ms(0), {0, 1}, 0);
    b.sim.run_until(SimTime::seconds(1));
    EXPECT_EQ(count(b.sim.trace(), TraceKind::RerrGenerated, 0, std::nullopt, "local"), 1u);
    EXPECT_EQ(count(b.sim.trace(), TraceKind::RerrAtSource, 0), 1u);
    EXPECT_EQ(count(b.sim.trace(), TraceKind::Tx, std::nullopt, std::nullopt, "RERR"), 0u);
    const auto& out = b.net.rerr_outcomes().begin()->second;
    EXPECT_EQ(*out.reached_source_at, SimTime::ms(20));
}

TEST(RouteError, DetourAroundDeadReverseHop) {
    Topology t = chain(4);
    t.add_node(4);
    t.add_bidirectional(0, 4, SimTime::ms(1));
    t.add_bidirectional(4, 2, SimTime::ms(1));
    Bench b(std::move(t), config_k(2));
    b.net.install_route(kFlow03, chain_route(4));
    b.net.install_route({0, 2}, {0, 4, 2});
    fail_both(b.sim, 2, 3, SimTime::ms(0));
    b.sim.set_link_failure({2, 1}, SimTime::ms(3), SimTime::infinity());
    b.send_at(SimTime::ms(0), kFlow03, 0);
    b.sim.run_until(SimTime::seconds(1));

    EXPECT_EQ(count(b.sim.trace(), TraceKind::RerrDetour, 2, std::nullopt, "via=4 failed=1"), 1u);
    const RerrInfo* info = nullptr;
    for (const auto& [k, v] : b.net.rerr_outcomes()) {
        if (k.flow == kFlow03) info = &k;
    }
    ASSERT_NE(info, nullptr);
    const auto& out = b.net.rerr_outcomes().at(*info);
    ASSERT_TRUE(out.reached_source_at);
    EXPECT_FALSE(out.stranded);
    // Generated at 32 ms, three tries toward 1, then 2 -> 4 -> 0.
    EXPECT_EQ(*out.reached_source_at, SimTime::ms(64));
}

TEST(RouteError, StrandedWhenPartitioned) {
    Bench b(chain(4), config_k(1));
    b.net.install_route(kFlow03, chain_route(4));
    fail_both(b.sim, 2, 3, SimTime::ms(0));
    fail_both(b.sim, 1, 2, SimTime::ms(3));
    b.send_at(SimTime::ms(0), kFlow03, 0);
    b.sim.run_until(SimTime::seconds(1));
    ASSERT_EQ(b.net.rerr_outcomes().size(), 1u);
    const auto& out = b.net.rerr_outcomes().begin()->second;
    EXPECT_TRUE(out.stranded);
    EXPECT_FALSE(out.reached_source_at);
    EXPECT_EQ(count(b.sim.trace(), TraceKind::RerrStranded, 2), 1u);
}

TEST(SourceRecovery, CachedRouteNeedsNoDiscovery) {
    Topology t;
    for (NodeId i = 0; i < 4; ++i) t.add_node(i);
    t.add_bidirectional(0, 1, SimTime::ms(1));
    t.add_bidirectional(1, 3, SimTime::ms(1));
    t.add_bidirectional(0, 2, SimTime::ms(1));
    t.add_bidirectional(2, 3, SimTime::ms(1));
    Bench b(std::move(t), config_k(1));
    b.net.install_route(kFlow03, {0, 1, 3});
    b.net.add_cached_route(kFlow03, {0, 2, 3});
    fail_both(b.sim, 1, 3, SimTime::ms(0));
    b.send_at(SimTime::ms(0), kFlow03, 0);
    const PacketId later = b.send_at(SimTime::ms(40), kFlow03, 1);
    b.sim.run_until(SimTime::seconds(1));

    EXPECT_EQ(b.net.stats().rreq_transmissions, 0u);
    EXPECT_EQ(count(b.sim.trace(), TraceKind::RouteFromCache, 0), 1u);
    ASSERT_EQ(b.net.deliveries().size(), 1u);
    EXPECT_EQ(b.net.deliveries()[0].id, later);
    EXPECT_EQ(b.net.session(kFlow03)->paths[0].route, (Route{0, 2, 3}));
    EXPECT_TRUE(conserved(b));
}

TEST(SourceRecovery, EmptyCacheFloodsAndMarksPendingLost) {
    Topology t = chain(3);
    t.add_node(3);
    t.add_bidirectional(0, 3, SimTime::ms(1));
    t.add_bidirectional(3, 2, SimTime::ms(1));
    Bench b(std::move(t), config_k(1));
    b.net.install_route({0, 2}, chain_route(3));
    fail_both(b.sim, 1, 2, SimTime::ms(0));
    b.send_at(SimTime::ms(0), {0, 2}, 0);
    const PacketId during = b.send_at(SimTime::ms(23), {0, 2}, 1);
    const PacketId after = b.send_at(SimTime::ms(40), {0, 2}, 2);
    b.sim.run_until(SimTime::seconds(1));

    EXPECT_GT(b.net.stats().rreq_transmissions, 0u);
    const auto& pending = b.net.node(0).pending_lost;
    EXPECT_NE(std::find(pending.begin(), pending.end(), during), pending.end());
    ASSERT_EQ(b.net.deliveries().size(), 1u);
    EXPECT_EQ(b.net.deliveries()[0].id, after);
    EXPECT_EQ(b.net.session({0, 2})->paths[0].route, (Route{0, 3, 2}));
    EXPECT_EQ(b.net.session({0, 2})->paths[0].status, PathStatus::Active);
    EXPECT_TRUE(conserved(b));
}

TEST(Discovery, ThreeNodeChain) {
    Bench b(chain(3));
    b.net.open_flow({0, 2});
    b.net.discover({0, 2});
    b.send_at(SimTime::ms(0), {0, 2}, 0);
    b.sim.run_until(SimTime::seconds(1));
    const auto* s = b.net.session({0, 2});
    EXPECT_EQ(s->paths[0].status, PathStatus::Active);
    EXPECT_EQ(s->paths[0].route, chain_route(3));
    const auto* e = b.net.node(1).routing_table.find({0, 2});
    ASSERT_NE(e, nullptr);
    EXPECT_EQ(e->next_hop, 2u);
    EXPECT_EQ(e->prev_hop, 0u);
    ASSERT_EQ(b.net.deliveries().size(), 1u);
    EXPECT_EQ(b.net.deliveries()[0].delivered_at, SimTime::ms(6));  // RREQ 2 ms, RREP 2 ms, DATA 2 ms
}

TEST(Discovery, DiamondTakesFirstReply) {
    Topology t;
    for (NodeId i = 0; i < 4; ++i) t.add_node(i);
    t.add_bidirectional(0, 1, SimTime::ms(1));
    t.add_bidirectional(1, 3, SimTime::ms(1));
    t.add_bidirectional(0, 2, SimTime::ms(3));
    t.add_bidirectional(2, 3, SimTime::ms(3));
    Bench b(std::move(t));
    b.net.open_flow(kFlow03);
    b.net.discover(kFlow03);
    b.sim.run_until(SimTime::seconds(1));
    EXPECT_EQ(b.net.session(kFlow03)->paths[0].route, (Route{0, 1, 3}));
    EXPECT_EQ(count(b.sim.trace(), TraceKind::Tx, 3, std::nullopt, "RREP"), 1u);
}

TEST(Discovery, PartitionedFailsAndSuspends) {
    Topology t;
    for (NodeId i = 0; i < 3; ++i) t.add_node(i);
    t.add_bidirectional(0, 1, SimTime::ms(1));
    Bench b(std::move(t));
    b.net.open_flow({0, 2});
    b.net.discover({0, 2});
    const PacketId held = b.send_at(SimTime::ms(0), {0, 2}, 0);
    const PacketId late = b.send_at(SimTime::ms(300), {0, 2}, 1);
    b.sim.run_until(SimTime::seconds(1));
    EXPECT_EQ(b.net.session({0, 2})->paths[0].status, PathStatus::Suspended);
    EXPECT_EQ(count(b.sim.trace(), TraceKind::Lost, 0, held, "discovery_failed"), 1u);
    EXPECT_EQ(count(b.sim.trace(), TraceKind::Lost, 0, late, "flow_suspended"), 1u);
    EXPECT_EQ(b.net.node(0).pending_lost.size(), 2u);
    EXPECT_TRUE(conserved(b));
}

namespace {

Topology small_tree() {
    Topology t;
    for (NodeId i = 0; i < 4; ++i) t.add_node(i);
    t.add_bidirectional(0, 1, SimTime::ms(1));
    t.add_bidirectional(0, 2, SimTime::ms(2));
    t.add_bidirectional(1, 3, SimTime::ms(1));
    t.set_multicast_tree(0, {{1, 0}, {2, 0}, {3, 1}});
    return t;
}

void multicast_at(Bench& b, SimTime at, std::uint64_t seq) {
    Packet p = b.data({0, kMulticastGroup}, seq);
    b.net.schedule_app(at, 0, [&b, p] { b.net.send_multicast(p); });
}

}  // namespace

TEST(Multicast, FailureFreeFastPath) {
    Bench b(small_tree());
    multicast_at(b, SimTime::ms(0), 0);
    b.sim.run_until(SimTime::seconds(1));
    std::map<NodeId, SimTime> at;
    for (const auto& d : b.net.deliveries()) at[d.node] = d.delivered_at;
    EXPECT_EQ(at, (std::map<NodeId, SimTime>{{1, SimTime::ms(1)}, {2, SimTime::ms(2)}, {3, SimTime::ms(2)}}));
    EXPECT_EQ(b.net.stats().timer_fires, 0u);
    // The leaf acknowledges and forwards nothing.
    EXPECT_EQ(count(b.sim.trace(), TraceKind::Tx, 3), 1u);
    EXPECT_TRUE(conserved(b));
}

TEST(Multicast, ChildFailurePrunesAndNotifiesRoot) {
    Bench b(small_tree(), config_k(1));
    fail_both(b.sim, 1, 3, SimTime::ms(0));
    multicast_at(b, SimTime::ms(0), 0);
    multicast_at(b, SimTime::ms(50), 1);
    b.sim.run_until(SimTime::seconds(1));

    EXPECT_TRUE(b.net.node(1).pruned_children.contains(3));
    ASSERT_EQ(b.net.rerr_outcomes().size(), 1u);
    const auto& out = b.net.rerr_outcomes().begin()->second;
    EXPECT_TRUE(out.info.multicast);
    EXPECT_EQ(out.info.target_source, 0u);
    ASSERT_TRUE(out.reached_source_at);
    EXPECT_EQ(count(b.sim.trace(), TraceKind::Lost, 1, std::nullopt, "pruned"), 1u);
    std::size_t at_1 = 0, at_2 = 0, at_3 = 0;
    for (const auto& d : b.net.deliveries()) {
        at_1 += d.node == 1;
        at_2 += d.node == 2;
        at_3 += d.node == 3;
    }
    EXPECT_EQ(at_1, 2u);
    EXPECT_EQ(at_2, 2u);
    EXPECT_EQ(at_3, 0u);
    EXPECT_TRUE(conserved(b));
}

TEST(Network, RejectsBadInput) {
    Bench b(chain(3));
    EXPECT_THROW(b.net.open_flow({1, 1}), std::invalid_argument);
    EXPECT_THROW(b.net.node(17), std::out_of_range);
    EXPECT_THROW(b.net.install_route({0, 2}, {0, 2}), TopologyError);
    EXPECT_THROW(b.net.install_route({0, 2}, {1, 2}), std::invalid_argument);
    EXPECT_THROW(b.net.send(b.data({2, 0}, 0)), std::logic_error);
    ProtocolConfig pc;
    pc.t_retrans = SimTime::us(0);
    Simulator sim(chain(2), 1);
    EXPECT_THROW(Network(sim, pc), std::invalid_argument);
}

TEST(SourceRecovery, SalvageNeverLoopsThroughUpstream) {
    Topology t = chain(4);
    t.add_node(4);
    t.add_bidirectional(0, 4, SimTime::ms(1));
    t.add_bidirectional(4, 3, SimTime::ms(1));
    Bench b(std::move(t), config_k(1));
    b.net.install_route(kFlow03, chain_route(4));
    fail_both(b.sim, 2, 3, SimTime::ms(0));
    b.send_at(SimTime::ms(0), kFlow03, 0);
    const PacketId queued = b.send_at(SimTime::ms(8), kFlow03, 1);
    b.sim.run_until(SimTime::seconds(1));
    // The only salvage route from node 2 runs back through 1 and 0.
    EXPECT_EQ(count(b.sim.trace(), TraceKind::Lost, 2, queued, "routing_loop"), 1u);
    EXPECT_EQ(count(b.sim.trace(), TraceKind::Duplicate), 0u);
    EXPECT_TRUE(conserved(b));
}
