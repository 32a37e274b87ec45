#include "langcal/threading.hpp"

#include <algorithm>
#include <atomic>
#include <thread>
#include <vector>

namespace langcal {

namespace {
std::atomic<std::size_t> g_threads{0};  // 0 = not set yet, use hardware count
}

void set_num_threads(std::size_t n) { g_threads.store(n == 0 ? 1 : n); }

std::size_t num_threads() {
    std::size_t n = g_threads.load();
    if (n == 0) {
        n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
        g_threads.store(n);
    }
    return n;
}

void parallel_for_ranges(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn) {
    const std::size_t workers = std::min(num_threads(), n == 0 ? std::size_t(1) : n);
    if (workers <= 1 || n == 0) {
        fn(0, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 1; w < workers; ++w) {
        const std::size_t i0 = std::min(n, w * chunk);
        const std::size_t i1 = std::min(n, (w + 1) * chunk);
        if (i0 < i1) pool.emplace_back([&fn, i0, i1] { fn(i0, i1); });
    }
    fn(0, std::min(n, chunk));
    for (auto& t : pool) t.join();
}

}  // namespace langcal
