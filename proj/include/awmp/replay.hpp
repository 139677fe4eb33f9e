#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "awmp/rng.hpp"

namespace awmp {

/// One environment step as stored for replay. The behavior log-density is
/// recorded at collection time, so importance weights never need a density
/// estimate later.
struct Transition {
    std::vector<double> state;
    std::vector<double> action;
    double reward = 0.0;
    std::vector<double> next_state;
    bool done = false;
    double behavior_log_prob = 0.0;
};

/// Ring buffer with FIFO eviction and a monotone write counter. Supports
/// uniform sampling over everything and over a recent window.
class ReplayBuffer {
public:
    explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
        if (capacity == 0) throw std::invalid_argument("ReplayBuffer: capacity must be positive");
    }

    void push(Transition t) {
        if (storage_.size() < capacity_) {
            storage_.push_back(std::move(t));
        } else {
            storage_[head_] = std::move(t);
            head_ = (head_ + 1) % capacity_;
        }
        ++pushed_;
    }

    std::size_t size() const { return storage_.size(); }
    std::size_t capacity() const { return capacity_; }
    std::uint64_t pushed() const { return pushed_; }

    /// k-th most recent transition, k = 0 is the latest.
    const Transition& recent(std::size_t k) const {
        if (k >= size()) throw std::out_of_range("ReplayBuffer::recent");
        // head_ points at the oldest slot once the ring is full
        const std::size_t newest = (head_ + size() - 1) % size();
        return storage_[(newest + size() - k) % size()];
    }

    /// n independent uniform draws with replacement.
    std::vector<const Transition*> sample_uniform(std::size_t n, Rng& rng) const {
        if (size() < n && size() == 0)
            throw std::runtime_error("ReplayBuffer: cannot sample from empty buffer");
        if (size() < n) throw std::runtime_error("ReplayBuffer: sample larger than buffer");
        std::vector<const Transition*> batch(n);
        for (std::size_t i = 0; i < n; ++i) batch[i] = &storage_[rng.index(size())];
        return batch;
    }

    /// Uniform draws restricted to the last min(window, size) insertions.
    std::vector<const Transition*> sample_recent(std::size_t window, std::size_t n,
                                                 Rng& rng) const {
        if (size() == 0) throw std::runtime_error("ReplayBuffer: cannot sample from empty buffer");
        const std::size_t w = std::min(window, size());
        std::vector<const Transition*> batch(n);
        for (std::size_t i = 0; i < n; ++i) batch[i] = &recent(rng.index(w));
        return batch;
    }

private:
    std::size_t capacity_;
    std::vector<Transition> storage_;
    std::size_t head_ = 0;  // oldest slot once full
    std::uint64_t pushed_ = 0;
};

}  // namespace awmp
