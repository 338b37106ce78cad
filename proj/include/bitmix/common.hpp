#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace bitmix {

// Element type for all tensors and kernels. Double by default; gradient
// checks and the exact-arithmetic tests assume the 64-bit build.
#ifdef BITMIX_REAL32
using real_t = float;
#else
using real_t = double;
#endif

using i64 = std::int64_t;

[[noreturn]] inline void fail(const std::string& msg) {
    throw std::runtime_error(msg);
}

template <typename... Args>
[[noreturn]] void failf(Args&&... parts) {
    std::ostringstream os;
    (os << ... << parts);
    throw std::runtime_error(os.str());
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

}  // namespace bitmix
