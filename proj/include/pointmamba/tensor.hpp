// Dense row-major tensor of doubles plus the process-wide instrumentation
// (FLOP counter, tracked buffer bytes) used by the benchmarks.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace pointmamba {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

namespace memory {

struct Counters {
    std::atomic<std::int64_t> current{0};
    std::atomic<std::int64_t> peak{0};
};

inline Counters& counters()
{
    static Counters c;
    return c;
}

inline void on_alloc(std::int64_t bytes)
{
    auto& c = counters();
    const auto now = c.current.fetch_add(bytes) + bytes;
    auto seen = c.peak.load();
    while (now > seen && !c.peak.compare_exchange_weak(seen, now)) {
    }
}

inline void on_free(std::int64_t bytes) { counters().current.fetch_sub(bytes); }

inline std::int64_t current_bytes() { return counters().current.load(); }
inline std::int64_t peak_bytes() { return counters().peak.load(); }

// Restarts peak tracking from the present live byte count.
inline void reset_peak() { counters().peak.store(counters().current.load()); }

}  // namespace memory

template <class T>
struct TrackedAllocator {
    using value_type = T;

    TrackedAllocator() noexcept = default;
    template <class U>
    TrackedAllocator(const TrackedAllocator<U>&) noexcept
    {
    }

    T* allocate(std::size_t n)
    {
        memory::on_alloc(static_cast<std::int64_t>(n * sizeof(T)));
        return std::allocator<T>{}.allocate(n);
    }
    void deallocate(T* p, std::size_t n) noexcept
    {
        memory::on_free(static_cast<std::int64_t>(n * sizeof(T)));
        std::allocator<T>{}.deallocate(p, n);
    }

    template <class U>
    bool operator==(const TrackedAllocator<U>&) const noexcept
    {
        return true;
    }
};

using Buffer = std::vector<double, TrackedAllocator<double>>;

namespace flops {

inline std::uint64_t& counter()
{
    thread_local std::uint64_t count = 0;
    return count;
}

inline void add(std::uint64_t n) { counter() += n; }
inline std::uint64_t count() { return counter(); }

// Counts the floating-point operations issued on this thread while alive.
class Scope {
public:
    Scope() : start_(count()) {}
    std::uint64_t elapsed() const { return count() - start_; }

private:
    std::uint64_t start_;
};

}  // namespace flops

class Tensor {
public:
    Tensor() : data_(1, 0.0) {}

    explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape))
    {
        validate_shape();
        data_.assign(numel_of(shape_), fill);
    }

    Tensor(Shape shape, std::span<const double> values) : shape_(std::move(shape))
    {
        validate_shape();
        if (values.size() != numel_of(shape_)) {
            throw Error("Tensor: " + std::to_string(values.size()) + " values do not fill shape " +
                        shape_str(shape_));
        }
        data_.assign(values.begin(), values.end());
    }

    Tensor(Shape shape, std::initializer_list<double> values)
        : Tensor(std::move(shape), std::span<const double>(values.begin(), values.size()))
    {
    }

    static Tensor scalar(double v)
    {
        Tensor t;
        t.data_[0] = v;
        return t;
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t numel() const { return data_.size(); }

    std::span<double> data() { return {data_.data(), data_.size()}; }
    std::span<const double> data() const { return {data_.data(), data_.size()}; }
    double* ptr() { return data_.data(); }
    const double* ptr() const { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double item() const
    {
        if (numel() != 1) throw Error("Tensor::item on shape " + shape_str(shape_));
        return data_[0];
    }

    std::size_t offset(std::initializer_list<std::size_t> idx) const
    {
        if (idx.size() != shape_.size()) {
            throw Error("Tensor::at: rank " + std::to_string(idx.size()) + " index into shape " +
                        shape_str(shape_));
        }
        std::size_t off = 0;
        std::size_t axis = 0;
        for (auto i : idx) {
            if (i >= shape_[axis]) throw Error("Tensor::at: index out of range for " + shape_str(shape_));
            off = off * shape_[axis] + i;
            ++axis;
        }
        return off;
    }

    double& at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
    double at(std::initializer_list<std::size_t> idx) const { return data_[offset(idx)]; }

    Tensor reshaped(Shape shape) const
    {
        if (numel_of(shape) != numel()) {
            throw Error("reshape: cannot view " + shape_str(shape_) + " as " + shape_str(shape));
        }
        Tensor t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    bool all_finite() const
    {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    bool bitwise_equal(const Tensor& other) const
    {
        return shape_ == other.shape_ &&
               std::equal(data_.begin(), data_.end(), other.data_.begin(), other.data_.end(),
                          [](double a, double b) {
                              return std::memcmp(&a, &b, sizeof(double)) == 0;
                          });
    }

private:
    void validate_shape() const
    {
        for (auto d : shape_) {
            if (d == 0) throw Error("Tensor: zero-sized dimension in shape " + shape_str(shape_));
        }
    }

    Shape shape_;
    Buffer data_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b)
{
    if (a.shape() != b.shape()) {
        throw Error("max_abs_diff: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace pointmamba
