#pragma once

#include <algorithm>
#include <cstdint>
#include <memory>
#include <numeric>
#include <vector>

#include "advlab/common.hpp"
#include "advlab/rng.hpp"

namespace advlab {

namespace detail {
// Link between a tensor and the tape node it was recorded on. Shared by all
// copies of the tensor so a gradient can be looked up through any alias.
struct GradMeta {
    uint64_t tape_id = 0;
    int node = -1;
};
}  // namespace detail

// Dense n-dimensional array, flat row-major storage. Tensors behave as
// values; operations never mutate their inputs. Copies share the underlying
// buffer (operations always allocate fresh outputs), `clone()` detaches.
template <typename T>
class Tensor {
public:
    Tensor()
        : data_(std::make_shared<std::vector<T>>()),
          meta_(std::make_shared<detail::GradMeta>()) {}

    explicit Tensor(std::vector<int> shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<T>>(checked_numel(shape_), T(0))),
          meta_(std::make_shared<detail::GradMeta>()) {}

    Tensor(std::vector<int> shape, std::vector<T> values)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<T>>(std::move(values))),
          meta_(std::make_shared<detail::GradMeta>()) {
        if (static_cast<int64_t>(data_->size()) != checked_numel(shape_))
            throw ShapeError(detail::cat("tensor data length ", data_->size(),
                                         " does not match shape ", shape_str(shape_)));
    }

    static Tensor full(std::vector<int> shape, T v) {
        Tensor t(std::move(shape));
        std::fill(t.data_->begin(), t.data_->end(), v);
        return t;
    }

    static Tensor scalar(T v) { return Tensor({}, std::vector<T>{v}); }

    static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

    // i.i.d. entries from `sigma * N(0,1)`
    static Tensor randn(std::vector<int> shape, Rng& rng, T sigma = T(1)) {
        Tensor t(std::move(shape));
        for (auto& v : *t.data_) v = static_cast<T>(sigma * rng.normal());
        return t;
    }

    const std::vector<int>& shape() const { return shape_; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(data_->size()); }

    T* data() { return data_->data(); }
    const T* data() const { return data_->data(); }
    std::vector<T>& vec() { return *data_; }
    const std::vector<T>& vec() const { return *data_; }

    T& operator[](int64_t i) { return (*data_)[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

    T item() const {
        if (numel() != 1)
            throw ShapeError(detail::cat("item() on tensor of ", numel(), " elements"));
        return (*data_)[0];
    }

    T at(const std::vector<int>& idx) const { return (*data_)[offset(idx)]; }
    void set(const std::vector<int>& idx, T v) { (*data_)[offset(idx)] = v; }

    // Deep copy with detached gradient metadata.
    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<T>>(*data_);
        t.requires_grad = requires_grad;
        return t;
    }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_->size());
        for (size_t i = 0; i < data_->size(); ++i) out[i] = static_cast<U>((*data_)[i]);
        return Tensor<U>(shape_, std::move(out));
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    bool all_finite() const {
        for (const T& v : *data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    // Leaf marker: operations recorded on a tape will track gradients
    // through this tensor.
    bool requires_grad = false;

    // Shared by all copies of this tensor so gradients can be looked up
    // through any alias.
    detail::GradMeta* grad_meta() const { return meta_.get(); }
    bool has_meta() const { return meta_ != nullptr; }

private:
    static int64_t checked_numel(const std::vector<int>& shape) {
        int64_t n = 1;
        for (int e : shape) {
            if (e <= 0)
                throw ShapeError(detail::cat("non-positive extent in shape ", shape_str(shape)));
            n *= e;
        }
        return n;
    }

    size_t offset(const std::vector<int>& idx) const {
        if (idx.size() != shape_.size())
            throw ShapeError(detail::cat("index rank ", idx.size(), " vs tensor rank ", shape_.size()));
        size_t off = 0;
        for (size_t d = 0; d < idx.size(); ++d) {
            if (idx[d] < 0 || idx[d] >= shape_[d])
                throw ShapeError(detail::cat("index out of range at axis ", d));
            off = off * static_cast<size_t>(shape_[d]) + static_cast<size_t>(idx[d]);
        }
        return off;
    }

    std::vector<int> shape_;
    std::shared_ptr<std::vector<T>> data_;
    mutable std::shared_ptr<detail::GradMeta> meta_;
};

}  // namespace advlab
