#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <tuple>

#include "rerrsim/mdc.hpp"
#include "rerrsim/rng.hpp"

using namespace rerrsim;
using namespace rerrsim::mdc;

namespace {

Frame frame(FrameId id, double prob = 0.0) {
    Frame f;
    f.id = id;
    f.description_id = static_cast<std::uint8_t>(id % 2);
    f.corruption_prob = prob;
    return f;
}

std::vector<FrameId> ids(const std::vector<Frame>& frames) {
    std::vector<FrameId> out;
    for (const auto& f : frames) out.push_back(f.id);
    return out;
}

struct CollectingSink : PacketSink {
    PacketId next = 100;
    std::vector<std::tuple<std::uint8_t, Packet, SimTime>> sent;
    PacketId allocate_id() override { return next++; }
    void dispatch(std::uint8_t path, Packet packet, SimTime at) override { sent.emplace_back(path, packet, at); }
};

/// Eight frames, two packets each, nearest-prior same-description references.
std::vector<Frame> reference_chain() {
    std::vector<Frame> frames;
    PacketId next = 1;
    for (FrameId k = 0; k < 8; ++k) {
        Frame f = frame(k);
        f.packet_ids = {next, next + 1};
        next += 2;
        if (k >= 2) f.references = {k - 2};
        frames.push_back(f);
    }
    return frames;
}

std::set<PacketId> all_packets(const std::vector<Frame>& frames) {
    std::set<PacketId> out;
    for (const auto& f : frames) out.insert(f.packet_ids.begin(), f.packet_ids.end());
    return out;
}

}  // namespace

TEST(Split, EvenOddAndRoundTrip) {
    std::vector<Frame> frames;
    for (FrameId i = 0; i < 6; ++i) frames.push_back(frame(i));
    const auto pair = split_into_descriptions(frames);
    EXPECT_EQ(ids(pair.even), (std::vector<FrameId>{0, 2, 4}));
    EXPECT_EQ(ids(pair.odd), (std::vector<FrameId>{1, 3, 5}));
    EXPECT_EQ(interleave(pair), frames);

    const auto single = split_into_descriptions(std::vector<Frame>{frame(0)});
    EXPECT_EQ(ids(single.even), std::vector<FrameId>{0});
    EXPECT_TRUE(single.odd.empty());
    EXPECT_TRUE(split_into_descriptions(std::vector<Frame>{}).even.empty());
}

TEST(SelectReferences, NothingExceedsThreshold) {
    const std::vector<Frame> own = {frame(0, 0.01), frame(2, 0.02)};
    const auto sel = select_references(own, {}, 0.5);
    EXPECT_EQ(sel.references, (std::vector<FrameId>{0, 2}));
    EXPECT_TRUE(sel.removed.empty());
    EXPECT_FALSE(sel.cross_description);
}

TEST(SelectReferences, DropsCorruptedFrame) {
    const std::vector<Frame> own = {frame(0, 0.9), frame(2, 0.1)};
    const auto sel = select_references(own, {}, 0.5);
    EXPECT_EQ(sel.references, std::vector<FrameId>{2});
    EXPECT_EQ(sel.removed, std::vector<FrameId>{0});
}

TEST(SelectReferences, FallsBackToOtherDescription) {
    const std::vector<Frame> own = {frame(0, 0.9), frame(2, 0.8)};
    const std::vector<Frame> other = {frame(3, 0.05)};
    const auto sel = select_references(own, other, 0.5);
    EXPECT_EQ(sel.references, std::vector<FrameId>{3});
    EXPECT_TRUE(sel.cross_description);
}

TEST(SelectReferences, CrossFilterSwitch) {
    const std::vector<Frame> own = {frame(0, 0.9)};
    const std::vector<Frame> other = {frame(1, 0.7)};
    EXPECT_TRUE(select_references(own, other, 0.5, true).references.empty());
    EXPECT_EQ(select_references(own, other, 0.5, false).references, std::vector<FrameId>{1});
}

TEST(SelectReferences, NoCandidatesMeansIntraCoded) {
    const std::vector<Frame> other = {frame(0, 0.0)};
    const auto sel = select_references({}, other, 0.5);
    EXPECT_TRUE(sel.references.empty());
    EXPECT_FALSE(sel.cross_description);
}

TEST(SelectReferences, ThresholdPropertiesOnRandomLists) {
    BernoulliStream rng(8);
    const std::vector<double> sweep = {0.0, 0.25, 0.5, 0.75, 1.0};
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<Frame> own, other;
        for (FrameId i = 0; i < rng.below(5); ++i) own.push_back(frame(2 * i, rng.uniform()));
        for (FrameId i = 0; i < rng.below(4); ++i) other.push_back(frame(2 * i + 1, rng.uniform()));
        std::optional<std::set<FrameId>> prev_removed;
        for (double th : sweep) {
            const auto sel = select_references(own, other, th);
            const std::set<FrameId> removed(sel.removed.begin(), sel.removed.end());
            if (prev_removed) {
                EXPECT_TRUE(std::includes(prev_removed->begin(), prev_removed->end(), removed.begin(), removed.end()));
            }
            prev_removed = removed;
            const bool emptied = !own.empty() && sel.removed.size() == own.size();
            const bool other_eligible =
                std::any_of(other.begin(), other.end(), [&](const Frame& f) { return f.corruption_prob <= th; });
            EXPECT_EQ(sel.cross_description, emptied && other_eligible);
            if (th >= 1.0) {
                EXPECT_TRUE(sel.removed.empty());
                EXPECT_EQ(sel.references.size(), own.size());
            }
        }
    }
}

TEST(EncodeAndDispatch, TwoPacketsOnDescriptionPath) {
    CollectingSink sink;
    EncodeLog log;
    Frame f = frame(3);
    packetize(f, 2, sink);
    ASSERT_EQ(f.packet_ids.size(), 2u);
    ReferenceSelection sel;
    sel.references = {1};
    EncodeContext ctx{{0, 4}, SimTime::ms(40), SimTime::ms(8), 6};
    const auto packets = encode_and_dispatch(f, sel, ctx, nullptr, sink, log);
    ASSERT_EQ(packets.size(), 2u);
    ASSERT_EQ(sink.sent.size(), 2u);
    for (std::size_t j = 0; j < 2; ++j) {
        const auto& [path, p, at] = sink.sent[j];
        EXPECT_EQ(path, 1);  // description 1 -> path 1
        EXPECT_EQ(p.frame_id, 3u);
        EXPECT_EQ(p.description_id, 1);
        EXPECT_EQ(p.seq, 6 + j);
        EXPECT_EQ(at, SimTime::ms(40) + SimTime::ms(8) * j);
    }
    ASSERT_EQ(log.size(), 1u);
    EXPECT_EQ(log[0].references, std::vector<FrameId>{1});
    EXPECT_EQ(log[0].packet_ids, f.packet_ids);
    EXPECT_EQ(f.references, std::vector<FrameId>{1});
}

TEST(Decodable, Rules) {
    Frame f = frame(2);
    f.packet_ids = {5, 6};
    EXPECT_TRUE(decodable(f, {5, 6}, {}));
    EXPECT_FALSE(decodable(f, {5}, {}));
    f.references = {0};
    EXPECT_FALSE(decodable(f, {5, 6}, {}));
    EXPECT_TRUE(decodable(f, {5, 6}, {0}));
}

TEST(ReceiverReport, LosslessRun) {
    const auto frames = reference_chain();
    const auto r = receiver_report(frames, all_packets(frames));
    EXPECT_EQ(r.corrupted, 0u);
    EXPECT_EQ(r.decoded, 8u);
}

TEST(ReceiverReport, LostFrameCorruptsItsDescriptionOnly) {
    const auto frames = reference_chain();
    auto received = all_packets(frames);
    for (PacketId id : frames[2].packet_ids) received.erase(id);
    const auto r = receiver_report(frames, received);
    EXPECT_EQ(r.corrupted, 3u);
    for (const auto& s : r.frames) {
        const bool expect_corrupt = s.frame_id == 2 || s.frame_id == 4 || s.frame_id == 6;
        EXPECT_EQ(!s.decoded, expect_corrupt) << "frame " << s.frame_id;
    }
}

TEST(ReceiverReport, EmptyReception) {
    const auto frames = reference_chain();
    const auto r = receiver_report(frames, {});
    EXPECT_EQ(r.corrupted, 8u);
    EXPECT_EQ(r.decoded + r.corrupted, frames.size());
}

TEST(ReceiverReport, MonotoneInReceivedPackets) {
    BernoulliStream rng(4);
    const auto frames = reference_chain();
    const auto all = all_packets(frames);
    for (int trial = 0; trial < 300; ++trial) {
        std::set<PacketId> some;
        for (PacketId id : all) {
            if (rng.draw(0.7)) some.insert(id);
        }
        auto more = some;
        for (PacketId id : all) {
            if (rng.draw(0.5)) more.insert(id);
        }
        const auto a = receiver_report(frames, some);
        const auto b = receiver_report(frames, more);
        for (std::size_t i = 0; i < frames.size(); ++i) {
            if (a.frames[i].decoded) EXPECT_TRUE(b.frames[i].decoded);
        }
    }
}

TEST(VideoSource, ReferencesFollowEstimates) {
    VideoConfig cfg;
    cfg.frames = 6;
    VideoSource src(cfg, {0, 4}, nullptr);
    CollectingSink sink;
    for (FrameId k = 0; k < 3; ++k) src.encode_frame(k, src.frame_time(k), sink);
    EXPECT_TRUE(src.log()[0].references.empty());
    EXPECT_TRUE(src.log()[1].references.empty());
    EXPECT_EQ(src.log()[2].references, std::vector<FrameId>{0});

    // Frame 2 (description 0) reported lost: frame 4 falls back to frame 3.
    std::map<PacketId, double> est;
    for (PacketId id : src.frames()[2].packet_ids) est[id] = 1.0;
    src.apply_packet_estimates(est);
    EXPECT_EQ(src.frames()[2].corruption_prob, 1.0);
    src.encode_frame(3, src.frame_time(3), sink);
    src.encode_frame(4, src.frame_time(4), sink);
    EXPECT_EQ(src.log()[4].references, std::vector<FrameId>{3});
    EXPECT_TRUE(src.log()[4].cross_description);
    EXPECT_EQ(src.log()[4].removed, std::vector<FrameId>{2});
    EXPECT_THROW(src.encode_frame(7, SimTime::ms(0), sink), std::logic_error);
}

TEST(VideoSource, RejectsBadThreshold) {
    VideoConfig cfg;
    cfg.threshold = 1.5;
    EXPECT_THROW(VideoSource(cfg, {0, 1}, nullptr), std::invalid_argument);
}
