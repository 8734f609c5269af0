#pragma once

#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace emdt {

/// Fixed pool of workers executing half-open index ranges. Work is split
/// into one contiguous chunk per worker, so any value written by the body
/// depends only on the indices it owns; results are bitwise independent of
/// the worker count as long as the body writes disjoint outputs.
class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool;
        return pool;
    }

    int size() const { return static_cast<int>(workers_.size()) + 1; }

    /// Runs fn over [0,n). fn(begin,end) must only write state owned by its
    /// range. Falls back to the calling thread when the pool is busy (e.g.
    /// a second graph evaluating concurrently) or the range is trivial.
    void run(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
        if (n <= 0) return;
        const int nthreads = size();
        if (n == 1 || nthreads == 1 || !submit_mutex_.try_lock()) {
            fn(0, n);
            return;
        }
        std::lock_guard<std::mutex> submit_guard(submit_mutex_, std::adopt_lock);
        const int chunks = static_cast<int>(std::min<int64_t>(nthreads, n));
        const int64_t per = (n + chunks - 1) / chunks;
        {
            std::lock_guard<std::mutex> lk(m_);
            body_ = &fn;
            next_chunk_ = 1;  // chunk 0 runs on the caller
            pending_ = chunks - 1;
            chunk_count_ = chunks;
            chunk_size_ = per;
            total_ = n;
            ++generation_;
        }
        cv_.notify_all();
        fn(0, std::min<int64_t>(per, n));
        std::unique_lock<std::mutex> lk(m_);
        done_cv_.wait(lk, [&] { return pending_ == 0; });
        body_ = nullptr;
    }

private:
    ThreadPool() {
        int n = static_cast<int>(std::thread::hardware_concurrency());
        if (const char* env = std::getenv("EMDT_THREADS")) {
            const int v = std::atoi(env);
            if (v >= 1) n = v;
        }
        if (n < 1) n = 1;
        for (int i = 0; i < n - 1; ++i) {
            workers_.emplace_back([this] { worker_loop(); });
        }
    }

    ~ThreadPool() {
        {
            std::lock_guard<std::mutex> lk(m_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : workers_) t.join();
    }

    void worker_loop() {
        uint64_t seen_generation = 0;
        for (;;) {
            std::unique_lock<std::mutex> lk(m_);
            cv_.wait(lk, [&] { return stop_ || (body_ && generation_ != seen_generation); });
            if (stop_) return;
            seen_generation = generation_;
            while (next_chunk_ < chunk_count_) {
                const int chunk = next_chunk_++;
                const auto* body = body_;
                const int64_t b = chunk * chunk_size_;
                const int64_t e = std::min<int64_t>(b + chunk_size_, total_);
                lk.unlock();
                (*body)(b, e);
                lk.lock();
                if (--pending_ == 0) done_cv_.notify_all();
            }
        }
    }

    std::vector<std::thread> workers_;
    std::mutex submit_mutex_;
    std::mutex m_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    const std::function<void(int64_t, int64_t)>* body_ = nullptr;
    int next_chunk_ = 0;
    int chunk_count_ = 0;
    int64_t chunk_size_ = 0;
    int64_t total_ = 0;
    int pending_ = 0;
    uint64_t generation_ = 0;
    bool stop_ = false;
};

/// Chunked parallel map over [0,n). Bodies below min_work indices run inline.
template <typename F>
void parallel_for(int64_t n, int64_t min_work, F&& f) {
    if (n < min_work || n <= 1) {
        if (n > 0) f(0, n);
        return;
    }
    ThreadPool::instance().run(n, std::function<void(int64_t, int64_t)>(std::forward<F>(f)));
}

}  // namespace emdt
