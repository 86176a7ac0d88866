#ifndef GLMEIV_PARALLEL_HPP
#define GLMEIV_PARALLEL_HPP

#include <atomic>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace glmeiv {

/// Runs fn(0..n_tasks-1) on a bounded pool. Tasks must write only to their
/// own slots; the first thrown exception is rethrown on the caller after
/// the pool drains.
inline void parallel_for(std::size_t n_tasks, int workers,
                         const std::function<void(std::size_t)>& fn) {
    if (workers <= 1 || n_tasks <= 1) {
        for (std::size_t i = 0; i < n_tasks; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    auto worker = [&] {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= n_tasks) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lk(error_mu);
                if (!error) error = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    int n_threads = std::min<std::size_t>(workers, n_tasks);
    pool.reserve(n_threads);
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace glmeiv

#endif
