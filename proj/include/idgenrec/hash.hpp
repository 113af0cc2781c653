#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <span>
#include <string>
#include <string_view>

namespace idgenrec {

// 64-bit FNV-1a, used for vocabulary, parameter and registry fingerprints.
class Fnv1a {
public:
    void update(const void* data, std::size_t size) {
        const auto* bytes = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < size; ++i) {
            state_ ^= bytes[i];
            state_ *= 0x100000001b3ULL;
        }
    }
    void update(std::string_view s) {
        update(s.data(), s.size());
        const unsigned char sep = 0xff;
        update(&sep, 1);
    }
    void update(std::span<const double> values) { update(values.data(), values.size_bytes()); }
    void update(std::uint64_t v) { update(&v, sizeof v); }

    std::uint64_t digest() const noexcept { return state_; }

private:
    std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string hex_digest(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

} // namespace idgenrec
