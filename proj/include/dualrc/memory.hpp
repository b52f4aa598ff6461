#pragma once

#include <atomic>
#include <cstddef>
#include <memory>
#include <new>

namespace dualrc {

// Process-wide accounting of tensor payload bytes. Only storage allocated
// through TrackingAllocator is counted, which makes the numbers independent
// of the OS allocator and reproducible across runs.
class AllocationTracker {
public:
    static AllocationTracker& instance() {
        static AllocationTracker tracker;
        return tracker;
    }

    void on_allocate(std::size_t bytes) {
        std::size_t now = current_.fetch_add(bytes) + bytes;
        std::size_t prev = peak_.load();
        while (now > prev && !peak_.compare_exchange_weak(prev, now)) {
        }
        total_.fetch_add(bytes);
    }
    void on_deallocate(std::size_t bytes) { current_.fetch_sub(bytes); }

    std::size_t current_bytes() const { return current_.load(); }
    std::size_t peak_bytes() const { return peak_.load(); }
    std::size_t total_allocated_bytes() const { return total_.load(); }

    // Restart peak tracking from the current live size.
    void reset_peak() { peak_.store(current_.load()); }

private:
    std::atomic<std::size_t> current_{0};
    std::atomic<std::size_t> peak_{0};
    std::atomic<std::size_t> total_{0};
};

template <class T>
struct TrackingAllocator {
    using value_type = T;

    TrackingAllocator() noexcept = default;
    template <class U>
    TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        T* p = std::allocator<T>{}.allocate(n);
        AllocationTracker::instance().on_allocate(n * sizeof(T));
        return p;
    }
    void deallocate(T* p, std::size_t n) noexcept {
        AllocationTracker::instance().on_deallocate(n * sizeof(T));
        std::allocator<T>{}.deallocate(p, n);
    }

    template <class U>
    bool operator==(const TrackingAllocator<U>&) const noexcept { return true; }
};

// Scoped view of the tracker: peak payload bytes allocated above the live
// size at construction.
class PeakScope {
public:
    PeakScope() : base_(AllocationTracker::instance().current_bytes()) {
        AllocationTracker::instance().reset_peak();
    }
    std::size_t peak_above_base() const {
        std::size_t peak = AllocationTracker::instance().peak_bytes();
        return peak > base_ ? peak - base_ : 0;
    }

private:
    std::size_t base_;
};

} // namespace dualrc
