#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <set>
#include <span>
#include <vector>

#include "rerrsim/packet.hpp"
#include "rerrsim/sim_time.hpp"

namespace rerrsim::mdc {

using FrameId = std::uint32_t;

struct Frame {
    FrameId id = 0;
    std::uint8_t description_id = 0;
    std::vector<PacketId> packet_ids;
    std::vector<FrameId> references;
    double corruption_prob = 0.0;

    bool operator==(const Frame&) const = default;
};

struct DescriptionPair {
    std::vector<Frame> even;  // description 0
    std::vector<Frame> odd;   // description 1
    double threshold = 0.5;
};

/// Even display positions go to description 0, odd ones to description 1.
DescriptionPair split_into_descriptions(std::span<const Frame> frames, double threshold = 0.5);

/// Inverse of split_into_descriptions.
std::vector<Frame> interleave(const DescriptionPair& pair);

struct ReferenceSelection {
    std::vector<FrameId> references;
    std::vector<FrameId> removed;  // own-description candidates dropped by the threshold
    bool cross_description = false;
};

/// Drops every candidate whose corruption probability exceeds `threshold`.
/// If that empties a non-empty candidate list, falls back to frames of the
/// other description (threshold-filtered too unless `filter_cross` is false).
/// An empty result means the frame is intra-coded.
ReferenceSelection select_references(std::span<const Frame> candidates, std::span<const Frame> other_description,
                                     double threshold, bool filter_cross = true);

/// Receives encoded DATA packets. Implemented by the transport glue.
class PacketSink {
public:
    virtual ~PacketSink() = default;
    virtual PacketId allocate_id() = 0;
    /// Hand `packet` to the transport on `path` at time `send_at`.
    virtual void dispatch(std::uint8_t path, Packet packet, SimTime send_at) = 0;
};

/// Maps a description to a transport path.
using PathSelector = std::function<std::uint8_t(std::uint8_t description)>;

struct EncodeRecord {
    FrameId frame_id = 0;
    std::uint8_t description_id = 0;
    std::uint8_t path = 0;
    std::vector<FrameId> references;
    std::vector<FrameId> removed;
    std::vector<PacketId> packet_ids;
    SimTime encoded_at;
    bool cross_description = false;

    bool operator==(const EncodeRecord&) const = default;
};

using EncodeLog = std::vector<EncodeRecord>;

/// Assigns `count` fresh packet ids to the frame.
void packetize(Frame& frame, std::uint32_t count, PacketSink& sink);

struct EncodeContext {
    Flow flow;
    SimTime now;
    SimTime packet_spacing;   // packets of one frame leave this far apart
    std::uint64_t first_seq = 0;
};

/// Stamps the frame's references, builds one DATA packet per packet id and
/// dispatches them on the path chosen for the frame's description.
std::vector<Packet> encode_and_dispatch(Frame& frame, const ReferenceSelection& selection,
                                        const EncodeContext& ctx, const PathSelector& select_path,
                                        PacketSink& sink, EncodeLog& log);

/// A frame decodes iff all of its packets arrived and all of its references decoded.
bool decodable(const Frame& frame, const std::set<PacketId>& received, const std::set<FrameId>& decoded);

struct FrameStatus {
    FrameId frame_id = 0;
    std::uint8_t description_id = 0;
    bool decoded = false;

    bool operator==(const FrameStatus&) const = default;
};

struct ReceiverReport {
    std::uint32_t decoded = 0;
    std::uint32_t corrupted = 0;
    std::vector<FrameStatus> frames;

    bool operator==(const ReceiverReport&) const = default;
};

/// Folds `decodable` over `frames` in display order.
ReceiverReport receiver_report(std::span<const Frame> frames, const std::set<PacketId>& received);

struct VideoConfig {
    std::uint32_t frames = 8;
    std::uint32_t packets_per_frame = 2;
    double threshold = 0.5;
    SimTime frame_interval = SimTime::ms(16);
    SimTime packet_spacing = SimTime::ms(8);
    SimTime start;
    std::uint32_t ref_window = 1;   // prior frames considered per description
    bool filter_cross = true;
};

/// Source-side encoder loop: reference selection, packetization and dispatch
/// for a two-description sequence, plus the frame corruption estimates that
/// steer later reference choices.
class VideoSource {
public:
    VideoSource(VideoConfig config, Flow flow, PathSelector select_path);

    const VideoConfig& config() const { return config_; }
    SimTime frame_time(FrameId k) const { return config_.start + config_.frame_interval * k; }

    /// Encodes display frame k at `now`. Frames must be encoded in order.
    void encode_frame(FrameId k, SimTime now, PacketSink& sink);

    /// Updates per-packet loss estimates and recomputes affected frames.
    void apply_packet_estimates(const std::map<PacketId, double>& estimates);

    const std::vector<Frame>& frames() const { return frames_; }
    const EncodeLog& log() const { return log_; }

private:
    std::vector<Frame> prior_frames(std::uint8_t description, FrameId before) const;

    VideoConfig config_;
    Flow flow_;
    PathSelector select_path_;
    std::vector<Frame> frames_;
    EncodeLog log_;
    std::map<PacketId, double> packet_estimates_;
};

}  // namespace rerrsim::mdc
