#include "rerrsim/mdc.hpp"

#include <algorithm>
#include <stdexcept>

#include "rerrsim/loss_estimator.hpp"

namespace rerrsim::mdc {

DescriptionPair split_into_descriptions(std::span<const Frame> frames, double threshold) {
    DescriptionPair pair;
    pair.threshold = threshold;
    for (std::size_t i = 0; i < frames.size(); ++i) {
        (i % 2 == 0 ? pair.even : pair.odd).push_back(frames[i]);
    }
    return pair;
}

std::vector<Frame> interleave(const DescriptionPair& pair) {
    std::vector<Frame> out;
    out.reserve(pair.even.size() + pair.odd.size());
    for (std::size_t i = 0; i < std::max(pair.even.size(), pair.odd.size()); ++i) {
        if (i < pair.even.size()) out.push_back(pair.even[i]);
        if (i < pair.odd.size()) out.push_back(pair.odd[i]);
    }
    return out;
}

ReferenceSelection select_references(std::span<const Frame> candidates, std::span<const Frame> other_description,
                                     double threshold, bool filter_cross) {
    ReferenceSelection sel;
    for (const auto& f : candidates) {
        if (f.corruption_prob > threshold) {
            sel.removed.push_back(f.id);
        } else {
            sel.references.push_back(f.id);
        }
    }
    if (sel.references.empty() && !candidates.empty()) {
        for (const auto& f : other_description) {
            if (!filter_cross || f.corruption_prob <= threshold) sel.references.push_back(f.id);
        }
        sel.cross_description = !sel.references.empty();
    }
    return sel;
}

void packetize(Frame& frame, std::uint32_t count, PacketSink& sink) {
    frame.packet_ids.clear();
    for (std::uint32_t i = 0; i < count; ++i) frame.packet_ids.push_back(sink.allocate_id());
}

std::vector<Packet> encode_and_dispatch(Frame& frame, const ReferenceSelection& selection,
                                        const EncodeContext& ctx, const PathSelector& select_path,
                                        PacketSink& sink, EncodeLog& log) {
    frame.references = selection.references;
    const std::uint8_t path = select_path ? select_path(frame.description_id) : frame.description_id;

    std::vector<Packet> packets;
    packets.reserve(frame.packet_ids.size());
    for (std::size_t j = 0; j < frame.packet_ids.size(); ++j) {
        Packet p;
        p.id = frame.packet_ids[j];
        p.kind = PacketKind::Data;
        p.flow = ctx.flow;
        p.seq = ctx.first_seq + j;
        p.frame_id = frame.id;
        p.description_id = frame.description_id;
        packets.push_back(p);
    }
    log.push_back(EncodeRecord{frame.id, frame.description_id, path, frame.references, selection.removed,
                               frame.packet_ids, ctx.now, selection.cross_description});
    for (std::size_t j = 0; j < packets.size(); ++j) {
        sink.dispatch(path, packets[j], ctx.now + ctx.packet_spacing * j);
    }
    return packets;
}

bool decodable(const Frame& frame, const std::set<PacketId>& received, const std::set<FrameId>& decoded) {
    return std::all_of(frame.packet_ids.begin(), frame.packet_ids.end(),
                       [&](PacketId id) { return received.contains(id); }) &&
           std::all_of(frame.references.begin(), frame.references.end(),
                       [&](FrameId id) { return decoded.contains(id); });
}

ReceiverReport receiver_report(std::span<const Frame> frames, const std::set<PacketId>& received) {
    ReceiverReport report;
    std::set<FrameId> decoded;
    for (const auto& f : frames) {
        const bool ok = decodable(f, received, decoded);
        if (ok) {
            decoded.insert(f.id);
            ++report.decoded;
        } else {
            ++report.corrupted;
        }
        report.frames.push_back(FrameStatus{f.id, f.description_id, ok});
    }
    return report;
}

VideoSource::VideoSource(VideoConfig config, Flow flow, PathSelector select_path)
    : config_(config), flow_(flow), select_path_(std::move(select_path)) {
    if (config_.threshold < 0.0 || config_.threshold > 1.0) {
        throw std::invalid_argument("reference threshold must lie in [0,1]");
    }
}

std::vector<Frame> VideoSource::prior_frames(std::uint8_t description, FrameId before) const {
    // Nearest first.
    std::vector<Frame> out;
    for (auto it = frames_.rbegin(); it != frames_.rend() && out.size() < config_.ref_window; ++it) {
        if (it->description_id == description && it->id < before) out.push_back(*it);
    }
    return out;
}

void VideoSource::encode_frame(FrameId k, SimTime now, PacketSink& sink) {
    if (k != frames_.size()) throw std::logic_error("frames must be encoded in display order");
    Frame frame;
    frame.id = k;
    frame.description_id = static_cast<std::uint8_t>(k % 2);
    packetize(frame, config_.packets_per_frame, sink);

    const auto own = prior_frames(frame.description_id, k);
    const auto other = prior_frames(static_cast<std::uint8_t>(1 - frame.description_id), k);
    const auto selection = select_references(own, other, config_.threshold, config_.filter_cross);

    EncodeContext ctx{flow_, now, config_.packet_spacing, static_cast<std::uint64_t>(k) * config_.packets_per_frame};
    encode_and_dispatch(frame, selection, ctx, select_path_, sink, log_);
    frames_.push_back(std::move(frame));
}

void VideoSource::apply_packet_estimates(const std::map<PacketId, double>& estimates) {
    for (const auto& [id, p] : estimates) packet_estimates_[id] = p;
    for (auto& frame : frames_) {
        std::vector<double> probs;
        bool touched = false;
        for (PacketId id : frame.packet_ids) {
            auto it = packet_estimates_.find(id);
            probs.push_back(it == packet_estimates_.end() ? 0.0 : it->second);
            touched = touched || estimates.contains(id);
        }
        if (touched) frame.corruption_prob = estimator::frame_corruption_prob(probs);
    }
}

}  // namespace rerrsim::mdc
