#include "rerrsim/scenario.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "rerrsim/simulator.hpp"

namespace rerrsim::harness {

namespace {

std::string join_issues(const std::vector<ConfigIssue>& issues) {
    std::ostringstream os;
    for (std::size_t i = 0; i < issues.size(); ++i) {
        if (i) os << '\n';
        if (issues[i].line) os << "line " << issues[i].line << ": ";
        os << issues[i].message;
    }
    return os.str();
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> words(const std::string& s) {
    std::istringstream is(s);
    std::vector<std::string> out;
    for (std::string w; is >> w;) out.push_back(w);
    return out;
}

template <typename T>
std::optional<T> to_uint(const std::string& s) {
    T v{};
    const auto* end = s.data() + s.size();
    auto [p, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || p != end) return std::nullopt;
    return v;
}

std::optional<double> to_double(const std::string& s) {
    double v = 0.0;
    const auto* end = s.data() + s.size();
    auto [p, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || p != end || !std::isfinite(v)) return std::nullopt;
    return v;
}

std::optional<SimTime> to_time(const std::string& s, bool allow_inf = false) {
    if (allow_inf && s == "inf") return SimTime::infinity();
    auto v = to_uint<std::uint64_t>(s);
    if (!v) return std::nullopt;
    return SimTime::us(*v);
}

std::optional<bool> to_bool(const std::string& s) {
    if (s == "true" || s == "1" || s == "on") return true;
    if (s == "false" || s == "0" || s == "off") return false;
    return std::nullopt;
}

std::optional<routing::Route> to_route(const std::string& s) {
    routing::Route r;
    for (const auto& w : words(s)) {
        auto n = to_uint<NodeId>(w);
        if (!n) return std::nullopt;
        r.push_back(*n);
    }
    return r;
}

std::string route_text(const routing::Route& r) {
    std::ostringstream os;
    for (std::size_t i = 0; i < r.size(); ++i) os << (i ? " " : "") << r[i];
    return os.str();
}

std::string fmt_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

struct Parser {
    ScenarioConfig cfg;
    std::vector<ConfigIssue> issues;
    std::map<std::string, std::size_t> seen;  // key -> line
    std::size_t line = 0;
    std::size_t nodes_line = 0, flow_line = 0, multicast_line = 0;
    std::vector<std::size_t> link_lines, failure_lines, path_lines, cache_lines;
    std::map<NodeId, std::size_t> parent_lines;
    std::optional<NodeId> flow_src, flow_dst;

    void error(std::string msg) { issues.push_back({line, std::move(msg)}); }

    template <typename T>
    void set_uint(const std::string& key, const std::string& v, T& out) {
        if (auto x = to_uint<T>(v)) {
            out = *x;
        } else {
            error(key + ": expected a non-negative integer, got '" + v + "'");
        }
    }
    void set_double(const std::string& key, const std::string& v, double& out) {
        if (auto x = to_double(v)) {
            out = *x;
        } else {
            error(key + ": expected a number, got '" + v + "'");
        }
    }
    void set_time(const std::string& key, const std::string& v, SimTime& out) {
        if (auto x = to_time(v)) {
            out = *x;
        } else {
            error(key + ": expected microseconds, got '" + v + "'");
        }
    }
    std::optional<NodeId> node_value(const std::string& key, const std::string& v) {
        auto x = to_uint<NodeId>(v);
        if (!x || *x == kMulticastGroup) error(key + ": expected a node id, got '" + v + "'");
        return x;
    }

    void handle(const std::string& key, const std::string& v) {
        const auto dot = key.find('.');
        const std::string section = key.substr(0, dot);
        const std::string rest = dot == std::string::npos ? std::string() : key.substr(dot + 1);

        if (key == "scenario.name") {
            if (v.empty() || v.find_first_of(" \t,") != std::string::npos) {
                error("scenario.name: must be a single non-empty word");
            } else {
                cfg.name = v;
            }
        } else if (key == "node.ids") {
            nodes_line = line;
            auto r = to_route(v);
            if (!r || r->empty()) {
                error("node.ids: expected a list of node ids");
            } else {
                cfg.nodes = *r;
            }
        } else if (section == "link" && !rest.empty()) {
            const auto w = words(v);
            if (w.size() < 4 || w.size() > 5 || (w.size() == 5 && w[4] != "directed")) {
                error(key + ": expected 'A B delay_us loss [directed]'");
                return;
            }
            auto a = node_value(key, w[0]);
            auto b = node_value(key, w[1]);
            auto d = to_time(w[2]);
            auto l = to_double(w[3]);
            if (!d) error(key + ": bad delay '" + w[2] + "'");
            if (!l || *l < 0.0 || *l > 1.0) error(key + ": loss must lie in [0,1]");
            if (a && b && d && l) {
                cfg.links.push_back(LinkSpec{*a, *b, *d, *l, w.size() == 5});
                link_lines.push_back(line);
            }
        } else if (section == "failure" && !rest.empty()) {
            const auto w = words(v);
            if (w.size() < 4 || w.size() > 5 || (w.size() == 5 && w[4] != "directed")) {
                error(key + ": expected 'A B down_us up_us|inf [directed]'");
                return;
            }
            auto a = node_value(key, w[0]);
            auto b = node_value(key, w[1]);
            auto down = to_time(w[2]);
            auto up = to_time(w[3], true);
            if (!down || !up) {
                error(key + ": bad failure window");
            } else if (!(*down < *up)) {
                error(key + ": failure window must satisfy down < up");
            }
            if (a && b && down && up && *down < *up) {
                cfg.failures.push_back(FailureSpec{*a, *b, *down, *up, w.size() == 5});
                failure_lines.push_back(line);
            }
        } else if (key == "multicast.root") {
            multicast_line = line;
            cfg.multicast_root = node_value(key, v);
        } else if (section == "multicast" && rest.rfind("parent.", 0) == 0) {
            auto child = to_uint<NodeId>(rest.substr(7));
            auto parent = node_value(key, v);
            if (!child) {
                error(key + ": bad child id");
            } else if (parent) {
                cfg.multicast_parent[*child] = *parent;
                parent_lines[*child] = line;
            }
        } else if (key == "channel.payload_bits") {
            set_double(key, v, cfg.protocol.channel.payload_bits);
        } else if (key == "channel.rate_bps") {
            set_double(key, v, cfg.protocol.channel.rate_bps);
            if (!(cfg.protocol.channel.rate_bps > 0.0)) error("channel.rate_bps: rate must be positive");
        } else if (key == "channel.t_retrans_us") {
            set_time(key, v, cfg.protocol.channel.t_retrans);
            cfg.protocol.t_retrans = cfg.protocol.channel.t_retrans;
            if (cfg.protocol.t_retrans.ticks() == 0) error("channel.t_retrans_us: must be positive");
        } else if (key == "channel.t_rerr_us") {
            set_time(key, v, cfg.protocol.channel.t_rerr);
        } else if (key == "channel.lambda_g") {
            set_double(key, v, cfg.protocol.channel.lambda_g);
        } else if (key == "channel.lambda_f") {
            set_double(key, v, cfg.protocol.channel.lambda_f);
        } else if (key == "protocol.k") {
            set_uint(key, v, cfg.protocol.max_retries);
        } else if (key == "protocol.rerr_timer_us") {
            set_time(key, v, cfg.protocol.rerr_timer);
            if (cfg.protocol.rerr_timer.ticks() == 0) error("protocol.rerr_timer_us: must be positive");
        } else if (key == "protocol.discovery_timeout_us") {
            set_time(key, v, cfg.protocol.discovery_timeout);
        } else if (key == "flow.source") {
            flow_line = line;
            flow_src = node_value(key, v);
        } else if (key == "flow.destination") {
            flow_line = line;
            flow_dst = node_value(key, v);
        } else if (key == "flow.path0" || key == "flow.path1") {
            auto r = to_route(v);
            const std::size_t idx = key.back() - '0';
            if (!r || r->size() < 2) {
                error(key + ": expected a node list of at least two nodes");
                return;
            }
            if (cfg.paths.size() <= idx) {
                cfg.paths.resize(idx + 1);
                path_lines.resize(idx + 1);
            }
            cfg.paths[idx] = *r;
            path_lines[idx] = line;
        } else if (section == "flow" && rest.rfind("cache.", 0) == 0) {
            auto r = to_route(v);
            if (!r || r->size() < 2) {
                error(key + ": expected a node list of at least two nodes");
            } else {
                cfg.cache.push_back(*r);
                cache_lines.push_back(line);
            }
        } else if (key == "video.frames") {
            set_uint(key, v, cfg.video.frames);
        } else if (key == "video.packets_per_frame") {
            set_uint(key, v, cfg.video.packets_per_frame);
            if (cfg.video.packets_per_frame == 0) error("video.packets_per_frame: must be at least 1");
        } else if (key == "video.threshold") {
            set_double(key, v, cfg.video.threshold);
            if (cfg.video.threshold < 0.0 || cfg.video.threshold > 1.0) error("video.threshold: must lie in [0,1]");
        } else if (key == "video.frame_interval_us") {
            set_time(key, v, cfg.video.frame_interval);
            cfg.frame_interval_set = true;
        } else if (key == "video.start_us") {
            set_time(key, v, cfg.video.start);
        } else if (key == "video.ref_window") {
            set_uint(key, v, cfg.video.ref_window);
        } else if (key == "video.cross_filter") {
            if (auto b = to_bool(v)) {
                cfg.video.filter_cross = *b;
            } else {
                error(key + ": expected true or false");
            }
        } else if (key == "estimator.mode") {
            if (v == "deterministic") {
                cfg.protocol.delay_mode = routing::DelayMode::Deterministic;
            } else if (v == "empirical") {
                cfg.protocol.delay_mode = routing::DelayMode::Empirical;
            } else {
                error(key + ": expected deterministic or empirical");
            }
        } else if (key == "estimator.window") {
            set_uint(key, v, cfg.protocol.estimate_window);
        } else if (key == "run.seed") {
            set_uint(key, v, cfg.seed);
        } else if (key == "run.horizon_us") {
            set_time(key, v, cfg.horizon);
            if (cfg.horizon.ticks() == 0) error("run.horizon_us: horizon must be positive");
        } else if (key == "run.trials") {
            set_uint(key, v, cfg.trials);
            if (cfg.trials == 0) error("run.trials: need at least one trial");
        } else if (key == "oracle.failure_jitter_us") {
            set_time(key, v, cfg.failure_jitter);
        } else if (key == "oracle.max_n") {
            set_uint(key, v, cfg.max_n);
        } else {
            error("unknown key '" + key + "'");
        }
    }

    void check_node(NodeId n, std::size_t at, const std::string& what) {
        if (std::find(cfg.nodes.begin(), cfg.nodes.end(), n) == cfg.nodes.end()) {
            issues.push_back({at, what + " references undeclared node " + std::to_string(n)});
        }
    }

    void validate() {
        line = 0;
        if (cfg.nodes.empty()) issues.push_back({0, "node.ids: no nodes declared"});
        std::set<NodeId> unique(cfg.nodes.begin(), cfg.nodes.end());
        if (unique.size() != cfg.nodes.size()) issues.push_back({nodes_line, "node.ids: duplicate node id"});

        std::set<LinkKey> keys;
        for (std::size_t i = 0; i < cfg.links.size(); ++i) {
            const auto& l = cfg.links[i];
            check_node(l.a, link_lines[i], "link");
            check_node(l.b, link_lines[i], "link");
            if (l.a == l.b) issues.push_back({link_lines[i], "link: self-loop on node " + std::to_string(l.a)});
            const bool fresh = keys.insert({l.a, l.b}).second && (l.directed || keys.insert({l.b, l.a}).second);
            if (!fresh) issues.push_back({link_lines[i], "link: duplicate link"});
        }
        for (std::size_t i = 0; i < cfg.failures.size(); ++i) {
            const auto& f = cfg.failures[i];
            if (!keys.contains({f.a, f.b})) {
                issues.push_back({failure_lines[i], "failure: no link " + std::to_string(f.a) + "->" + std::to_string(f.b)});
            }
        }
        if (cfg.multicast_root) {
            check_node(*cfg.multicast_root, multicast_line, "multicast.root");
            for (const auto& [child, parent] : cfg.multicast_parent) {
                check_node(child, parent_lines[child], "multicast.parent");
                check_node(parent, parent_lines[child], "multicast.parent");
            }
        } else if (!cfg.multicast_parent.empty()) {
            issues.push_back({parent_lines.begin()->second, "multicast.parent given without multicast.root"});
        }

        try {
            cfg.protocol.channel.validate();
        } catch (const std::exception& e) {
            issues.push_back({0, std::string("channel: ") + e.what()});
        }

        if (flow_src || flow_dst) {
            if (!flow_src || !flow_dst) {
                issues.push_back({flow_line, "flow: both flow.source and flow.destination are required"});
            } else {
                check_node(*flow_src, flow_line, "flow");
                check_node(*flow_dst, flow_line, "flow");
                if (*flow_src == *flow_dst) issues.push_back({flow_line, "flow: source and destination must differ"});
                cfg.flow = Flow{*flow_src, *flow_dst};
            }
        } else if (!cfg.multicast_root) {
            issues.push_back({0, "no traffic: set flow.source/flow.destination or multicast.root"});
        }

        auto check_route = [&](const routing::Route& r, std::size_t at, const std::string& what) {
            if (r.empty()) {
                issues.push_back({at, what + ": missing"});
                return;
            }
            if (cfg.flow && (r.front() != cfg.flow->source || r.back() != cfg.flow->destination)) {
                issues.push_back({at, what + ": must run from flow.source to flow.destination"});
            }
            for (std::size_t i = 0; i + 1 < r.size(); ++i) {
                if (!keys.contains({r[i], r[i + 1]}) || !keys.contains({r[i + 1], r[i]})) {
                    issues.push_back({at, what + ": hop " + std::to_string(r[i]) + "-" + std::to_string(r[i + 1]) +
                                              " is not a bidirectional link"});
                }
            }
        };
        if (!cfg.paths.empty() && !cfg.flow) issues.push_back({path_lines.front(), "flow.path given without a flow"});
        for (std::size_t i = 0; i < cfg.paths.size(); ++i) check_route(cfg.paths[i], path_lines[i], "flow.path" + std::to_string(i));
        for (std::size_t i = 0; i < cfg.cache.size(); ++i) check_route(cfg.cache[i], cache_lines[i], "flow.cache");

        if (issues.empty()) {
            try {
                build_topology(cfg);
            } catch (const TopologyError& e) {
                issues.push_back({0, std::string("topology: ") + e.what()});
            }
        }
        if (!cfg.frame_interval_set) {
            cfg.video.frame_interval = estimator::t_data(cfg.protocol.channel.payload_bits, cfg.protocol.channel.rate_bps) *
                                       cfg.video.packets_per_frame;
        }
        cfg.video.packet_spacing = estimator::t_data(cfg.protocol.channel.payload_bits, cfg.protocol.channel.rate_bps);
    }
};

}  // namespace

namespace {

// Line order, with issues not tied to a line last.
std::vector<ConfigIssue> by_line(std::vector<ConfigIssue> issues) {
    std::stable_sort(issues.begin(), issues.end(), [](const ConfigIssue& a, const ConfigIssue& b) {
        return (a.line ? a.line : SIZE_MAX) < (b.line ? b.line : SIZE_MAX);
    });
    return issues;
}

}  // namespace

ConfigError::ConfigError(std::vector<ConfigIssue> issues)
    : std::runtime_error(join_issues(by_line(issues))), issues_(by_line(std::move(issues))) {}

ScenarioConfig parse_config(const std::string& text) {
    Parser p;
    std::istringstream in(text);
    std::string raw;
    while (std::getline(in, raw)) {
        ++p.line;
        const auto hash = raw.find('#');
        const std::string content = trim(std::string_view(raw).substr(0, hash));
        if (content.empty()) continue;
        const auto eq = content.find('=');
        if (eq == std::string::npos) {
            p.error("expected 'key = value'");
            continue;
        }
        const std::string key = trim(std::string_view(content).substr(0, eq));
        const std::string value = trim(std::string_view(content).substr(eq + 1));
        if (key.empty()) {
            p.error("missing key");
            continue;
        }
        if (auto [it, fresh] = p.seen.emplace(key, p.line); !fresh) {
            p.error("duplicate key '" + key + "' (first on line " + std::to_string(it->second) + ")");
            continue;
        }
        p.handle(key, value);
    }
    p.validate();
    if (!p.issues.empty()) throw ConfigError(std::move(p.issues));
    return std::move(p.cfg);
}

ScenarioConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config '" + path + "'");
    std::ostringstream os;
    os << in.rdbuf();
    return parse_config(os.str());
}

std::string to_text(const ScenarioConfig& c) {
    std::ostringstream os;
    const auto& ch = c.protocol.channel;
    os << "scenario.name = " << c.name << '\n';
    os << "node.ids = " << route_text(c.nodes) << '\n';
    for (std::size_t i = 0; i < c.links.size(); ++i) {
        const auto& l = c.links[i];
        os << "link." << i + 1 << " = " << l.a << ' ' << l.b << ' ' << l.delay.ticks() << ' ' << fmt_double(l.loss)
           << (l.directed ? " directed" : "") << '\n';
    }
    for (std::size_t i = 0; i < c.failures.size(); ++i) {
        const auto& f = c.failures[i];
        os << "failure." << i + 1 << " = " << f.a << ' ' << f.b << ' ' << f.down.ticks() << ' ' << to_string(f.up)
           << (f.directed ? " directed" : "") << '\n';
    }
    if (c.multicast_root) {
        os << "multicast.root = " << *c.multicast_root << '\n';
        for (const auto& [child, parent] : c.multicast_parent) os << "multicast.parent." << child << " = " << parent << '\n';
    }
    os << "channel.payload_bits = " << fmt_double(ch.payload_bits) << '\n'
       << "channel.rate_bps = " << fmt_double(ch.rate_bps) << '\n'
       << "channel.t_retrans_us = " << ch.t_retrans.ticks() << '\n'
       << "channel.t_rerr_us = " << ch.t_rerr.ticks() << '\n'
       << "channel.lambda_g = " << fmt_double(ch.lambda_g) << '\n'
       << "channel.lambda_f = " << fmt_double(ch.lambda_f) << '\n'
       << "protocol.k = " << c.protocol.max_retries << '\n'
       << "protocol.rerr_timer_us = " << c.protocol.rerr_timer.ticks() << '\n'
       << "protocol.discovery_timeout_us = " << c.protocol.discovery_timeout.ticks() << '\n';
    if (c.flow) {
        os << "flow.source = " << c.flow->source << '\n' << "flow.destination = " << c.flow->destination << '\n';
        for (std::size_t i = 0; i < c.paths.size(); ++i) os << "flow.path" << i << " = " << route_text(c.paths[i]) << '\n';
        for (std::size_t i = 0; i < c.cache.size(); ++i) os << "flow.cache." << i + 1 << " = " << route_text(c.cache[i]) << '\n';
    }
    os << "video.frames = " << c.video.frames << '\n'
       << "video.packets_per_frame = " << c.video.packets_per_frame << '\n'
       << "video.threshold = " << fmt_double(c.video.threshold) << '\n';
    if (c.frame_interval_set) os << "video.frame_interval_us = " << c.video.frame_interval.ticks() << '\n';
    os << "video.start_us = " << c.video.start.ticks() << '\n'
       << "video.ref_window = " << c.video.ref_window << '\n'
       << "video.cross_filter = " << (c.video.filter_cross ? "true" : "false") << '\n'
       << "estimator.mode = " << (c.protocol.delay_mode == routing::DelayMode::Empirical ? "empirical" : "deterministic")
       << '\n'
       << "estimator.window = " << c.protocol.estimate_window << '\n'
       << "run.seed = " << c.seed << '\n'
       << "run.horizon_us = " << c.horizon.ticks() << '\n'
       << "run.trials = " << c.trials << '\n'
       << "oracle.failure_jitter_us = " << c.failure_jitter.ticks() << '\n'
       << "oracle.max_n = " << c.max_n << '\n';
    return os.str();
}

Topology build_topology(const ScenarioConfig& c) {
    Topology t;
    for (NodeId n : c.nodes) t.add_node(n);
    for (const auto& l : c.links) {
        if (l.directed) {
            t.add_link(l.a, l.b, l.delay, l.loss);
        } else {
            t.add_bidirectional(l.a, l.b, l.delay, l.loss);
        }
    }
    for (const auto& f : c.failures) {
        t.link({f.a, f.b}).add_failure({f.down, f.up});
        if (!f.directed) {
            if (auto* rev = t.find_link({f.b, f.a})) rev->add_failure({f.down, f.up});
        }
    }
    if (c.multicast_root) t.set_multicast_tree(*c.multicast_root, c.multicast_parent);
    return t;
}

// ---------------------------------------------------------------------------
// Trial execution

namespace {

class NetworkSink : public mdc::PacketSink {
public:
    NetworkSink(routing::Network& net, NodeId source, bool multicast)
        : net_(net), source_(source), multicast_(multicast) {}

    PacketId allocate_id() override { return net_.allocate_id(); }

    void dispatch(std::uint8_t path, Packet packet, SimTime send_at) override {
        net_.schedule_app(send_at, source_, [this, path, packet]() mutable {
            if (multicast_) {
                net_.send_multicast(std::move(packet));
            } else {
                net_.send(std::move(packet), path);
            }
        });
    }

private:
    routing::Network& net_;
    NodeId source_;
    bool multicast_;
};

std::string id_list(const std::vector<mdc::FrameId>& ids) {
    std::string s;
    for (std::size_t i = 0; i < ids.size(); ++i) s += (i ? "," : "") + std::to_string(ids[i]);
    return s.empty() ? "-" : s;
}

}  // namespace

ConservationReport check_conservation(const routing::Network& net, const Topology& topology) {
    ConservationReport r;
    const auto live = net.live_data();
    const auto live_edges = net.live_multicast_edges();

    std::set<std::pair<PacketId, NodeId>> delivered;
    for (const auto& d : net.deliveries()) delivered.insert({d.id, d.node});
    std::set<PacketId> lost_any;
    std::set<std::pair<PacketId, LinkKey>> lost_edges;
    for (const auto& m : net.lost_marks()) {
        lost_any.insert(m.id);
        if (m.toward) lost_edges.insert({m.id, LinkKey{m.node, *m.toward}});
    }

    auto classify = [&](bool is_delivered, bool is_live, bool is_lost) {
        ++r.injected;
        if (is_delivered) {
            ++r.delivered;
        } else if (is_live) {
            ++r.in_flight;
        } else if (is_lost) {
            ++r.lost;
        } else {
            ++r.violations;
        }
    };

    for (const auto& [id, inj] : net.injections()) {
        if (!inj.multicast) {
            classify(delivered.contains({id, inj.flow.destination}), live.contains(id), lost_any.contains(id));
            continue;
        }
        const NodeId root = topology.multicast_root();
        for (NodeId n : topology.nodes()) {
            if (n == root || !topology.on_multicast_tree(n)) continue;
            bool is_live = false, is_lost = false;
            for (NodeId c = n; c != root;) {
                const NodeId p = *topology.multicast_parent(c);
                is_live = is_live || live_edges.contains({id, LinkKey{p, c}});
                is_lost = is_lost || lost_edges.contains({id, LinkKey{p, c}});
                c = p;
            }
            classify(delivered.contains({id, n}), is_live, is_lost);
        }
    }
    return r;
}

EffortReport check_effort(const EventTrace& trace, std::uint32_t max_retries) {
    std::map<std::tuple<NodeId, NodeId, PacketId>, std::uint32_t> counts;
    for (const auto& rec : trace.records()) {
        if (rec.kind != TraceKind::Tx || !rec.packet_id) continue;
        const auto pos = rec.detail.rfind("to=");
        if (pos == std::string::npos) continue;
        const auto to = to_uint<NodeId>(rec.detail.substr(pos + 3));
        if (!to) continue;
        ++counts[{rec.node, *to, *rec.packet_id}];
    }
    EffortReport r;
    for (const auto& [key, c] : counts) {
        r.max_per_hop = std::max(r.max_per_hop, c);
        if (c > max_retries + 1) ++r.violations;
    }
    return r;
}

TrialResult run_trial(const ScenarioConfig& config, std::uint64_t seed, const TrialHooks& hooks, std::uint32_t trial) {
    Simulator sim(build_topology(config), seed);
    routing::ProtocolConfig pc = config.protocol;
    pc.t_retrans = pc.channel.t_retrans;
    routing::Network net(sim, pc);

    const bool multicast = config.multicast();
    const NodeId source = multicast ? *config.multicast_root : config.flow->source;
    const Flow flow = multicast ? Flow{source, kMulticastGroup} : *config.flow;

    std::vector<NodeId> receivers;
    if (multicast) {
        for (const auto& [child, parent] : config.multicast_parent) receivers.push_back(child);
    } else {
        receivers.push_back(flow.destination);
        const auto path_count = static_cast<std::uint8_t>(std::max<std::size_t>(config.paths.size(), 1));
        net.open_flow(flow, path_count);
        for (const auto& r : config.cache) net.add_cached_route(flow, r);
        for (std::size_t i = 0; i < config.paths.size(); ++i) {
            net.install_route(flow, config.paths[i], static_cast<std::uint8_t>(i));
        }
        if (config.paths.empty()) net.discover(flow);
    }

    const auto path_limit = static_cast<std::uint8_t>(std::max<std::size_t>(config.paths.size(), 1) - 1);
    mdc::VideoSource video(config.video, flow, [path_limit](std::uint8_t d) { return std::min(d, path_limit); });
    NetworkSink sink(net, source, multicast);

    net.set_estimate_listener([&video](const routing::EstimateBatch& batch) {
        std::map<PacketId, double> pr;
        for (const auto& [id, est] : batch.per_packet) pr[id] = est.pr;
        video.apply_packet_estimates(pr);
    });
    for (mdc::FrameId k = 0; k < config.video.frames; ++k) {
        const SimTime at = video.frame_time(k);
        if (at > config.horizon) break;
        net.schedule_app(at, source, [&, k] {
            video.encode_frame(k, sim.now(), sink);
            const auto& rec = video.log().back();
            sim.record(source, TraceKind::Encode, std::nullopt,
                       "frame=" + std::to_string(k) + " desc=" + std::to_string(rec.description_id) +
                           " path=" + std::to_string(rec.path) + " refs=" + id_list(rec.references) +
                           (rec.cross_description ? " cross" : ""));
        });
    }

    if (hooks.before_run) hooks.before_run(sim, net, trial);
    sim.run_until(config.horizon);

    TrialResult r;
    r.seed = seed;
    const auto& stats = net.stats();
    r.wire_duplicates = stats.wire_duplicates;
    r.app_duplicates = stats.app_duplicates;
    r.retransmissions = stats.retransmissions;
    r.timer_fires = stats.timer_fires;

    std::uint64_t injected = 0;
    for (const auto& [id, inj] : net.injections()) {
        if (inj.flow == flow) ++injected;
    }
    r.expected_deliveries = injected * receivers.size();

    std::map<NodeId, std::set<PacketId>> received;
    double delay_sum = 0.0;
    for (const auto& d : net.deliveries()) {
        if (d.flow != flow || std::find(receivers.begin(), receivers.end(), d.node) == receivers.end()) continue;
        ++r.deliveries;
        const auto delay = (d.delivered_at - d.injected_at).ticks();
        delay_sum += static_cast<double>(delay);
        r.max_delay_us = std::max<std::uint64_t>(r.max_delay_us, delay);
        received[d.node].insert(d.id);
        r.delivered.push_back(d);
    }
    r.mean_delay_us = r.deliveries ? delay_sum / static_cast<double>(r.deliveries) : 0.0;

    r.frames = video.frames();
    r.encode_log = video.log();
    for (std::size_t i = 0; i < receivers.size(); ++i) {
        auto report = mdc::receiver_report(r.frames, received[receivers[i]]);
        r.frames_corrupted += report.corrupted;
        r.frames_total += static_cast<std::uint32_t>(report.frames.size());
        for (const auto& f : report.frames) r.frame_outcomes.emplace_back(f.frame_id, !f.decoded);
        if (i == 0) r.receiver = std::move(report);
    }

    for (const auto& [info, outcome] : net.rerr_outcomes()) {
        ++r.rerr_generated;
        if (outcome.reached_source_at) {
            ++r.rerr_reached;
        } else if (outcome.stranded) {
            ++r.rerr_stranded;
        }
        r.rerrs.push_back(outcome);
    }

    r.estimates = net.estimates();
    const auto& dest_received = received[receivers.front()];
    for (const auto& batch : r.estimates) {
        if (batch.rerr.flow != flow) continue;
        for (const auto& [id, est] : batch.per_packet) {
            r.per_n_lost.emplace_back(est.n, !dest_received.contains(id));
            r.per_n_pred.emplace_back(est.n, est.pr);
        }
    }

    r.conservation = check_conservation(net, sim.topology());
    r.effort = check_effort(sim.trace(), pc.max_retries);
    r.trace = sim.trace();
    return r;
}

MetricsReport aggregate(const ScenarioConfig& config, const std::vector<TrialResult>& trials) {
    MetricsReport m;
    m.scenario = config.name;
    m.seed = config.seed;
    m.trials = static_cast<std::uint32_t>(trials.size());
    if (trials.empty()) return m;

    double rerr_success = 0.0;
    std::map<std::uint32_t, std::tuple<std::uint64_t, std::uint64_t, double>> per_n;  // samples, lost, pred sum
    std::map<mdc::FrameId, std::pair<std::uint64_t, std::uint64_t>> per_frame;       // corrupted, seen
    std::map<mdc::FrameId, double> estimated;
    for (const auto& t : trials) {
        m.delivery_ratio += t.expected_deliveries ? static_cast<double>(t.deliveries) / t.expected_deliveries : 1.0;
        m.wire_duplicates += static_cast<double>(t.wire_duplicates);
        m.app_duplicates += static_cast<double>(t.app_duplicates);
        rerr_success += t.rerr_generated ? static_cast<double>(t.rerr_reached) / t.rerr_generated : 1.0;
        m.rerr_stranded += static_cast<double>(t.rerr_stranded);
        m.mean_delay_us += t.mean_delay_us;
        m.max_delay_us += static_cast<double>(t.max_delay_us);
        m.frames_corrupted += t.frames_corrupted;
        m.frames_total += t.frames_total;
        m.retransmissions += static_cast<double>(t.retransmissions);
        m.timer_fires += static_cast<double>(t.timer_fires);
        m.conservation_ok = m.conservation_ok && t.conservation.holds();
        m.effort_ok = m.effort_ok && t.effort.violations == 0;
        for (std::size_t i = 0; i < t.per_n_lost.size(); ++i) {
            auto& [samples, lost, pred] = per_n[t.per_n_lost[i].first];
            ++samples;
            lost += t.per_n_lost[i].second ? 1 : 0;
            pred += t.per_n_pred[i].second;
        }
        for (const auto& [f, corrupted] : t.frame_outcomes) {
            auto& [c, seen] = per_frame[f];
            c += corrupted ? 1 : 0;
            ++seen;
        }
        for (const auto& f : t.frames) estimated[f.id] += f.corruption_prob;
    }
    const double n = static_cast<double>(trials.size());
    m.delivery_ratio /= n;
    m.wire_duplicates /= n;
    m.app_duplicates /= n;
    m.rerr_success = rerr_success / n;
    m.rerr_stranded /= n;
    m.mean_delay_us /= n;
    m.max_delay_us /= n;
    m.frames_corrupted /= n;
    m.frames_total /= n;
    m.retransmissions /= n;
    m.timer_fires /= n;
    for (const auto& [idx, v] : per_n) {
        const auto& [samples, lost, pred] = v;
        m.per_n.push_back(PerNStat{idx, samples, static_cast<double>(lost) / samples, pred / samples});
    }
    for (const auto& [f, v] : per_frame) {
        m.per_frame.push_back(FrameStat{f, static_cast<double>(v.first) / v.second, estimated[f] / n});
    }
    m.encode_log = trials.front().encode_log;
    m.receiver = trials.front().receiver;
    m.estimates = trials.front().estimates;
    return m;
}

ScenarioRun run_scenario(const ScenarioConfig& config, unsigned threads, const TrialHooks& hooks, bool keep_trials) {
    std::vector<TrialResult> results(config.trials);
    auto work = [&](std::uint32_t i) { results[i] = run_trial(config, config.seed + i, hooks, i); };

    threads = std::max(1u, std::min<unsigned>(threads, config.trials));
    if (threads == 1) {
        for (std::uint32_t i = 0; i < config.trials; ++i) work(i);
    } else {
        std::atomic<std::uint32_t> next{0};
        std::vector<std::exception_ptr> errors(threads);
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < threads; ++t) {
            pool.emplace_back([&, t] {
                try {
                    for (std::uint32_t i; (i = next++) < config.trials;) work(i);
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
    }

    ScenarioRun run;
    run.report = aggregate(config, results);
    run.trace = std::move(results.front().trace);
    if (keep_trials) run.trials = std::move(results);
    return run;
}

// ---------------------------------------------------------------------------
// Emission

const std::vector<std::string> kCsvColumns = {
    "scenario",     "seed",          "trials",        "delivery_ratio", "wire_duplicates",  "app_duplicates",
    "rerr_success", "rerr_stranded", "mean_delay_us", "max_delay_us",   "frames_corrupted", "frames_total",
};

std::string to_csv(const MetricsReport& m) {
    std::ostringstream os;
    for (std::size_t i = 0; i < kCsvColumns.size(); ++i) os << (i ? "," : "") << kCsvColumns[i];
    os << '\n'
       << m.scenario << ',' << m.seed << ',' << m.trials << ',' << fmt_double(m.delivery_ratio) << ','
       << fmt_double(m.wire_duplicates) << ',' << fmt_double(m.app_duplicates) << ',' << fmt_double(m.rerr_success)
       << ',' << fmt_double(m.rerr_stranded) << ',' << fmt_double(m.mean_delay_us) << ','
       << fmt_double(m.max_delay_us) << ',' << fmt_double(m.frames_corrupted) << ',' << fmt_double(m.frames_total)
       << '\n';
    return os.str();
}

namespace {

using nlohmann::json;

json rerr_json(const RerrInfo& i) {
    return json{{"broken_link", {i.broken_link.from, i.broken_link.to}},
                {"origin", i.origin},
                {"target_source", i.target_source},
                {"flow", {i.flow.source, i.flow.destination}},
                {"detected_at_us", i.detected_at.ticks()},
                {"multicast", i.multicast}};
}

RerrInfo rerr_from_json(const json& j) {
    RerrInfo i;
    i.broken_link = {j.at("broken_link").at(0).get<NodeId>(), j.at("broken_link").at(1).get<NodeId>()};
    i.origin = j.at("origin").get<NodeId>();
    i.target_source = j.at("target_source").get<NodeId>();
    i.flow = {j.at("flow").at(0).get<NodeId>(), j.at("flow").at(1).get<NodeId>()};
    i.detected_at = SimTime::us(j.at("detected_at_us").get<std::uint64_t>());
    i.multicast = j.at("multicast").get<bool>();
    return i;
}

bool same_estimates(const std::vector<routing::EstimateBatch>& a, const std::vector<routing::EstimateBatch>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].rerr != b[i].rerr || a[i].at != b[i].at || a[i].per_packet.size() != b[i].per_packet.size()) {
            return false;
        }
        for (std::size_t k = 0; k < a[i].per_packet.size(); ++k) {
            const auto& [ia, ea] = a[i].per_packet[k];
            const auto& [ib, eb] = b[i].per_packet[k];
            if (ia != ib || ea.n != eb.n || ea.p_good != eb.p_good || ea.p_fail != eb.p_fail || ea.pr != eb.pr) {
                return false;
            }
        }
    }
    return true;
}

}  // namespace

bool MetricsReport::operator==(const MetricsReport& o) const {
    return scenario == o.scenario && seed == o.seed && trials == o.trials && delivery_ratio == o.delivery_ratio &&
           wire_duplicates == o.wire_duplicates && app_duplicates == o.app_duplicates &&
           rerr_success == o.rerr_success && rerr_stranded == o.rerr_stranded && mean_delay_us == o.mean_delay_us &&
           max_delay_us == o.max_delay_us && frames_corrupted == o.frames_corrupted &&
           frames_total == o.frames_total && retransmissions == o.retransmissions && timer_fires == o.timer_fires &&
           conservation_ok == o.conservation_ok && effort_ok == o.effort_ok && per_n == o.per_n &&
           per_frame == o.per_frame && encode_log == o.encode_log && receiver == o.receiver &&
           same_estimates(estimates, o.estimates);
}

std::string to_json(const MetricsReport& m) {
    json j;
    j["schema_version"] = kJsonSchemaVersion;
    j["scenario"] = m.scenario;
    j["seed"] = m.seed;
    j["trials"] = m.trials;
    j["metrics"] = {{"delivery_ratio", m.delivery_ratio},     {"wire_duplicates", m.wire_duplicates},
                    {"app_duplicates", m.app_duplicates},     {"rerr_success", m.rerr_success},
                    {"rerr_stranded", m.rerr_stranded},       {"mean_delay_us", m.mean_delay_us},
                    {"max_delay_us", m.max_delay_us},         {"frames_corrupted", m.frames_corrupted},
                    {"frames_total", m.frames_total},         {"retransmissions", m.retransmissions},
                    {"timer_fires", m.timer_fires}};
    j["invariants"] = {{"conservation", m.conservation_ok}, {"bounded_effort", m.effort_ok}};

    j["per_n"] = json::array();
    for (const auto& s : m.per_n) {
        j["per_n"].push_back(
            {{"n", s.n}, {"samples", s.samples}, {"lost_frequency", s.lost_frequency}, {"predicted", s.predicted}});
    }
    j["per_frame"] = json::array();
    for (const auto& f : m.per_frame) {
        j["per_frame"].push_back(
            {{"frame", f.frame}, {"corrupted_frequency", f.corrupted_frequency}, {"estimated", f.estimated}});
    }
    j["encode_log"] = json::array();
    for (const auto& e : m.encode_log) {
        j["encode_log"].push_back({{"frame", e.frame_id},
                                   {"description", e.description_id},
                                   {"path", e.path},
                                   {"references", e.references},
                                   {"removed", e.removed},
                                   {"packets", e.packet_ids},
                                   {"encoded_at_us", e.encoded_at.ticks()},
                                   {"cross_description", e.cross_description}});
    }
    json frames = json::array();
    for (const auto& f : m.receiver.frames) {
        frames.push_back({{"frame", f.frame_id}, {"description", f.description_id}, {"decoded", f.decoded}});
    }
    j["receiver_report"] = {{"decoded", m.receiver.decoded}, {"corrupted", m.receiver.corrupted}, {"frames", frames}};
    j["estimates"] = json::array();
    for (const auto& b : m.estimates) {
        json packets = json::array();
        for (const auto& [id, e] : b.per_packet) {
            packets.push_back({{"id", id}, {"n", e.n}, {"p_good", e.p_good}, {"p_fail", e.p_fail}, {"pr", e.pr}});
        }
        j["estimates"].push_back({{"rerr", rerr_json(b.rerr)}, {"at_us", b.at.ticks()}, {"packets", packets}});
    }
    return j.dump(2) + "\n";
}

MetricsReport from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw std::runtime_error(std::string("report is not valid JSON: ") + e.what());
    }
    try {
        if (j.at("schema_version").get<int>() != kJsonSchemaVersion) {
            throw std::runtime_error("unsupported report schema_version " + j.at("schema_version").dump());
        }
        MetricsReport m;
        m.scenario = j.at("scenario").get<std::string>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.trials = j.at("trials").get<std::uint32_t>();
        const auto& x = j.at("metrics");
        m.delivery_ratio = x.at("delivery_ratio").get<double>();
        m.wire_duplicates = x.at("wire_duplicates").get<double>();
        m.app_duplicates = x.at("app_duplicates").get<double>();
        m.rerr_success = x.at("rerr_success").get<double>();
        m.rerr_stranded = x.at("rerr_stranded").get<double>();
        m.mean_delay_us = x.at("mean_delay_us").get<double>();
        m.max_delay_us = x.at("max_delay_us").get<double>();
        m.frames_corrupted = x.at("frames_corrupted").get<double>();
        m.frames_total = x.at("frames_total").get<double>();
        m.retransmissions = x.at("retransmissions").get<double>();
        m.timer_fires = x.at("timer_fires").get<double>();
        m.conservation_ok = j.at("invariants").at("conservation").get<bool>();
        m.effort_ok = j.at("invariants").at("bounded_effort").get<bool>();
        for (const auto& s : j.at("per_n")) {
            m.per_n.push_back(PerNStat{s.at("n").get<std::uint32_t>(), s.at("samples").get<std::uint64_t>(),
                                       s.at("lost_frequency").get<double>(), s.at("predicted").get<double>()});
        }
        for (const auto& f : j.at("per_frame")) {
            m.per_frame.push_back(FrameStat{f.at("frame").get<mdc::FrameId>(), f.at("corrupted_frequency").get<double>(),
                                            f.at("estimated").get<double>()});
        }
        for (const auto& e : j.at("encode_log")) {
            m.encode_log.push_back(mdc::EncodeRecord{
                e.at("frame").get<mdc::FrameId>(), e.at("description").get<std::uint8_t>(),
                e.at("path").get<std::uint8_t>(), e.at("references").get<std::vector<mdc::FrameId>>(),
                e.at("removed").get<std::vector<mdc::FrameId>>(),
                e.at("packets").get<std::vector<PacketId>>(), SimTime::us(e.at("encoded_at_us").get<std::uint64_t>()),
                e.at("cross_description").get<bool>()});
        }
        const auto& rr = j.at("receiver_report");
        m.receiver.decoded = rr.at("decoded").get<std::uint32_t>();
        m.receiver.corrupted = rr.at("corrupted").get<std::uint32_t>();
        for (const auto& f : rr.at("frames")) {
            m.receiver.frames.push_back(mdc::FrameStatus{f.at("frame").get<mdc::FrameId>(),
                                                         f.at("description").get<std::uint8_t>(),
                                                         f.at("decoded").get<bool>()});
        }
        for (const auto& b : j.at("estimates")) {
            routing::EstimateBatch batch;
            batch.rerr = rerr_from_json(b.at("rerr"));
            batch.at = SimTime::us(b.at("at_us").get<std::uint64_t>());
            for (const auto& p : b.at("packets")) {
                estimator::LossEstimate e{p.at("n").get<std::uint32_t>(), p.at("p_good").get<double>(),
                                          p.at("p_fail").get<double>(), p.at("pr").get<double>()};
                batch.per_packet.emplace_back(p.at("id").get<PacketId>(), e);
            }
            m.estimates.push_back(std::move(batch));
        }
        return m;
    } catch (const json::exception& e) {
        throw std::runtime_error(std::string("report does not match schema: ") + e.what());
    }
}

}  // namespace rerrsim::harness
