#pragma once

#include <atomic>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace perk {

// Raised when an op produces a non-finite value (NaN/Inf) or a NaN gradient
// is encountered during backward.
class OverflowError : public std::runtime_error {
public:
    explicit OverflowError(const std::string& what) : std::runtime_error(what) {}
};

// Raised when the configurable graph-node budget is exceeded. Used to emulate
// out-of-memory conditions deterministically in the profiling harness.
class NodeBudgetError : public std::runtime_error {
public:
    explicit NodeBudgetError(const std::string& what) : std::runtime_error(what) {}
};

// Configuration / input errors that map to CLI exit code 2.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// Gradient-recording mode (thread-local, define-by-run).

bool grad_enabled() noexcept;
void set_grad_enabled(bool on) noexcept;

class NoGradGuard {
public:
    NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
    ~NoGradGuard() { set_grad_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

class GradGuard {
public:
    explicit GradGuard(bool on) : prev_(grad_enabled()) { set_grad_enabled(on); }
    ~GradGuard() { set_grad_enabled(prev_); }
    GradGuard(const GradGuard&) = delete;
    GradGuard& operator=(const GradGuard&) = delete;

private:
    bool prev_;
};

// ---------------------------------------------------------------------------
// Global graph / allocation statistics.
//
// live_nodes counts GraphNode objects currently alive; peak_nodes is the
// high-water mark since the last reset_peaks(). live_bytes/peak_bytes track
// tensor storage. node_budget (0 = unlimited) makes node creation throw
// NodeBudgetError once exceeded.

struct GraphStats {
    static std::atomic<std::int64_t> live_nodes;
    static std::atomic<std::int64_t> peak_nodes;
    static std::atomic<std::int64_t> live_bytes;
    static std::atomic<std::int64_t> peak_bytes;
    static std::atomic<std::int64_t> node_budget;

    static void reset_peaks() noexcept;
    static void on_node_created();
    static void on_node_destroyed() noexcept;
    static void on_alloc(std::int64_t bytes) noexcept;
    static void on_free(std::int64_t bytes) noexcept;
};

}  // namespace perk
