#pragma once

#include <unordered_map>

#include "bmf/tensor.hpp"

namespace bmf {

// Named trainable tensors in registration order. Names are hierarchical
// ("mfi.0.mha.wq") and unique; checkpoints key on them.
template <typename T>
class ParamSet {
public:
    Tensor<T> add(const std::string& name, Tensor<T> value) {
        check(!index_.count(name), "param '", name, "' registered twice");
        value.set_requires_grad(true);
        index_[name] = entries_.size();
        entries_.push_back({name, value});
        return value;
    }

    size_t size() const { return entries_.size(); }
    const std::string& name(size_t i) const { return entries_[i].name; }
    Tensor<T>& value(size_t i) { return entries_[i].value; }
    const Tensor<T>& value(size_t i) const { return entries_[i].value; }

    Tensor<T>& at(const std::string& name) {
        auto it = index_.find(name);
        check(it != index_.end(), "param '", name, "' not found");
        return entries_[it->second].value;
    }
    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    std::vector<Tensor<T>> tensors() const {
        std::vector<Tensor<T>> out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) out.push_back(e.value);
        return out;
    }

    int64_t total_numel() const {
        int64_t n = 0;
        for (const auto& e : entries_) n += e.value.numel();
        return n;
    }

    void zero_grads() {
        for (auto& e : entries_) e.value.zero_grad();
    }

    // Element-wise copy from another set with identical structure.
    void copy_from(const ParamSet<T>& src) {
        check(src.size() == size(), "copy_from: param count mismatch");
        for (size_t i = 0; i < size(); ++i) {
            check(src.name(i) == name(i) && src.value(i).shape() == value(i).shape(),
                  "copy_from: param ", i, " mismatch (", name(i), ")");
            auto dst = entries_[i].value.raw_data();
            auto s = src.value(i).data();
            std::copy(s.begin(), s.end(), dst.begin());
        }
    }

    // Order-insensitive content digest; used to assert params untouched.
    double checksum() const {
        double s = 0;
        for (const auto& e : entries_) {
            double h = 0;
            for (T v : e.value.data()) h = h * 1.000000119 + (double)v;
            s += h;
        }
        return s;
    }

private:
    struct Entry {
        std::string name;
        Tensor<T> value;
    };
    std::vector<Entry> entries_;
    std::unordered_map<std::string, size_t> index_;
};

}  // namespace bmf
