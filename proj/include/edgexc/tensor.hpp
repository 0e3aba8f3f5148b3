#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace edgexc {

// Error hierarchy. The CLI maps these onto its exit-code contract
// (data/IO -> 3, numeric -> 4), everything else is a programming or
// configuration mistake surfaced as-is.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct GeometryError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct DataError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};

inline std::string shape_str(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

// Dense row-major tensor of rank 1..4. Rank-4 layout is (N, C, H, W):
// element (n,c,h,w) lives at ((n*C + c)*H + h)*W + w.
template <typename T>
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(std::vector<int64_t> shape)
        : shape_(std::move(shape)), data_(checked_size(shape_), T(0)) {}

    Tensor(std::vector<int64_t> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<int64_t>(data_.size()) != checked_size(shape_))
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match shape " + shape_str(shape_));
    }

    static Tensor full(std::vector<int64_t> shape, T value) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), value);
        return t;
    }

    bool empty() const { return shape_.empty(); }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }
    const std::vector<int64_t>& shape() const { return shape_; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    // 4-D access
    T& at(int64_t n, int64_t c, int64_t h, int64_t w) {
        return data_[offset4(n, c, h, w)];
    }
    T at(int64_t n, int64_t c, int64_t h, int64_t w) const {
        return data_[offset4(n, c, h, w)];
    }
    // 2-D access
    T& at(int64_t n, int64_t d) { return data_[static_cast<size_t>(n * shape_[1] + d)]; }
    T at(int64_t n, int64_t d) const { return data_[static_cast<size_t>(n * shape_[1] + d)]; }
    // flat access
    T& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    T operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.begin(), data_.end());
        return Tensor<U>(shape_, std::move(out));
    }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

  private:
    static int64_t checked_size(const std::vector<int64_t>& shape) {
        if (shape.empty() || shape.size() > 4)
            throw ShapeError("tensor rank must be 1..4, got " + std::to_string(shape.size()));
        int64_t n = 1;
        for (int64_t e : shape) {
            if (e < 1) throw ShapeError("tensor extents must be >= 1, got " + shape_str(shape));
            n *= e;
        }
        return n;
    }

    size_t offset4(int64_t n, int64_t c, int64_t h, int64_t w) const {
        return static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w);
    }

    std::vector<int64_t> shape_;
    std::vector<T> data_;
};

// Symmetric zero padding, square stride. Kernel extents are carried here so
// pooling and convolution share one output-extent rule.
struct ConvGeometry {
    int64_t stride = 1;
    int64_t padding = 0;
    int64_t kernel_h = 1;
    int64_t kernel_w = 1;

    int64_t out_extent(int64_t in, int64_t kernel) const {
        if (stride < 1) throw GeometryError("stride must be positive, got " + std::to_string(stride));
        if (padding < 0) throw GeometryError("padding must be non-negative, got " + std::to_string(padding));
        int64_t out = (in + 2 * padding - kernel) / stride + 1;
        if (in + 2 * padding < kernel || out < 1)
            throw GeometryError("non-positive output extent: in=" + std::to_string(in) +
                                " kernel=" + std::to_string(kernel) + " stride=" + std::to_string(stride) +
                                " padding=" + std::to_string(padding));
        return out;
    }

    int64_t out_h(int64_t in_h) const { return out_extent(in_h, kernel_h); }
    int64_t out_w(int64_t in_w) const { return out_extent(in_w, kernel_w); }
};

}  // namespace edgexc
