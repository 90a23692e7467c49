#include "perk/common.hpp"
#include "perk/kernels.hpp"

namespace perk::kern {
namespace {
std::atomic<bool> g_parallel{true};
}
bool parallel_enabled() noexcept { return g_parallel.load(std::memory_order_relaxed); }
void set_parallel_enabled(bool on) noexcept { g_parallel.store(on, std::memory_order_relaxed); }
}  // namespace perk::kern

namespace perk {

namespace {
thread_local bool g_grad_enabled = true;

void bump_peak(std::atomic<std::int64_t>& live, std::atomic<std::int64_t>& peak) noexcept {
    const std::int64_t cur = live.load(std::memory_order_relaxed);
    std::int64_t old = peak.load(std::memory_order_relaxed);
    while (cur > old && !peak.compare_exchange_weak(old, cur, std::memory_order_relaxed)) {
    }
}
}  // namespace

bool grad_enabled() noexcept { return g_grad_enabled; }
void set_grad_enabled(bool on) noexcept { g_grad_enabled = on; }

std::atomic<std::int64_t> GraphStats::live_nodes{0};
std::atomic<std::int64_t> GraphStats::peak_nodes{0};
std::atomic<std::int64_t> GraphStats::live_bytes{0};
std::atomic<std::int64_t> GraphStats::peak_bytes{0};
std::atomic<std::int64_t> GraphStats::node_budget{0};

void GraphStats::reset_peaks() noexcept {
    peak_nodes.store(live_nodes.load(std::memory_order_relaxed), std::memory_order_relaxed);
    peak_bytes.store(live_bytes.load(std::memory_order_relaxed), std::memory_order_relaxed);
}

void GraphStats::on_node_created() {
    const std::int64_t n = live_nodes.fetch_add(1, std::memory_order_relaxed) + 1;
    const std::int64_t budget = node_budget.load(std::memory_order_relaxed);
    if (budget > 0 && n > budget) {
        live_nodes.fetch_sub(1, std::memory_order_relaxed);
        throw NodeBudgetError("graph node budget exceeded: " + std::to_string(n) + " > " +
                              std::to_string(budget));
    }
    bump_peak(live_nodes, peak_nodes);
}

void GraphStats::on_node_destroyed() noexcept {
    live_nodes.fetch_sub(1, std::memory_order_relaxed);
}

void GraphStats::on_alloc(std::int64_t bytes) noexcept {
    live_bytes.fetch_add(bytes, std::memory_order_relaxed);
    bump_peak(live_bytes, peak_bytes);
}

void GraphStats::on_free(std::int64_t bytes) noexcept {
    live_bytes.fetch_sub(bytes, std::memory_order_relaxed);
}

}  // namespace perk
