#include <atomic>
#include <cstdlib>

#include "bitmix/kernels.hpp"

namespace bitmix::kern {
namespace {

std::atomic<const Ops*> g_active{nullptr};

const Ops* pick(const std::string& name) {
    if (name == "scalar") return &reference_ops();
    if (name == "avx2") {
        const Ops* t = avx2_ops();
        if (!t) fail("kernels: avx2 requested but not supported on this CPU");
        return t;
    }
    if (name == "auto" || name.empty()) {
        if (const Ops* t = avx2_ops()) return t;
        return &reference_ops();
    }
    failf("kernels: unknown variant '", name, "' (scalar|avx2|auto)");
}

const Ops* init_default() {
    const char* env = std::getenv("BITMIX_KERNELS");
    return pick(env ? std::string(env) : std::string("auto"));
}

}  // namespace

const Ops& ops() {
    const Ops* t = g_active.load(std::memory_order_acquire);
    if (!t) {
        t = init_default();
        g_active.store(t, std::memory_order_release);
    }
    return *t;
}

void select(const std::string& name) {
    g_active.store(pick(name), std::memory_order_release);
}

std::vector<std::string> available() {
    std::vector<std::string> v{"scalar"};
    if (avx2_ops()) v.emplace_back("avx2");
    return v;
}

}  // namespace bitmix::kern
