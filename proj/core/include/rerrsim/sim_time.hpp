#pragma once

#include <compare>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

namespace rerrsim {

/// Simulated time (and durations) in integer microseconds.
class SimTime {
public:
    using rep = std::uint64_t;

    constexpr SimTime() = default;
    constexpr explicit SimTime(rep ticks) : ticks_(ticks) {}

    static constexpr SimTime us(rep v) { return SimTime{v}; }
    static constexpr SimTime ms(rep v) { return SimTime{v * 1000}; }
    static constexpr SimTime seconds(rep v) { return SimTime{v * 1000000}; }
    static constexpr SimTime infinity() { return SimTime{std::numeric_limits<rep>::max()}; }

    constexpr rep ticks() const { return ticks_; }
    constexpr bool is_infinite() const { return ticks_ == std::numeric_limits<rep>::max(); }

    constexpr auto operator<=>(const SimTime&) const = default;

    constexpr SimTime operator+(SimTime o) const {
        if (is_infinite() || o.is_infinite()) return infinity();
        return SimTime{ticks_ + o.ticks_};
    }
    constexpr SimTime& operator+=(SimTime o) { return *this = *this + o; }
    constexpr SimTime operator-(SimTime o) const {
        if (o.ticks_ > ticks_) throw std::logic_error("SimTime underflow");
        return SimTime{ticks_ - o.ticks_};
    }
    constexpr SimTime operator*(rep k) const { return SimTime{ticks_ * k}; }

private:
    rep ticks_ = 0;
};

inline std::string to_string(SimTime t) {
    return t.is_infinite() ? std::string("inf") : std::to_string(t.ticks());
}

}  // namespace rerrsim
