#include "edgexc/threading.hpp"

#include <algorithm>
#include <cstdlib>
#include <thread>
#include <vector>

extern "C" void openblas_set_num_threads(int);

namespace edgexc {

static int resolve_threads() {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    int cap = hw;
    if (const char* env = std::getenv("EDGEXC_THREADS")) {
        int v = std::atoi(env);
        if (v >= 1) cap = std::min(cap, v);
    }
    openblas_set_num_threads(cap);
    return cap;
}

int worker_threads() {
    static int n = resolve_threads();
    return n;
}

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
    if (n <= 0) return;
    int nt = worker_threads();
    if (nt <= 1 || n < 2) {
        body(0, n);
        return;
    }
    int64_t workers = std::min<int64_t>(nt, n);
    int64_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers) - 1);
    for (int64_t t = 1; t < workers; ++t) {
        int64_t lo = t * chunk;
        int64_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    body(0, std::min(n, chunk));
    for (auto& th : pool) th.join();
}

}  // namespace edgexc
