#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "phantom/rng.hpp"
#include "phantom/tensor.hpp"

namespace phantom {

template <class T>
struct Linear {
    Tensor<T> weight;  // [in, out]
    Tensor<T> bias;    // [out]

    std::size_t in_features() const { return weight.size(0); }
    std::size_t out_features() const { return weight.size(1); }

    Tensor<T> operator()(const Tensor<T>& x) const
    {
        if (x.dim() == 1) return reshape(add(matmul(reshape(x, {1, x.numel()}), weight), bias), {out_features()});
        return add(matmul(x, weight), bias);
    }

    template <class F>
    void visit(const std::string& prefix, F&& f)
    {
        f(prefix + ".weight", weight);
        f(prefix + ".bias", bias);
    }
};

template <class T>
Tensor<T> normal_tensor(Shape shape, double stddev, Rng& rng, bool requires_grad = true)
{
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.normal() * stddev);
    return Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

/// Weights ~ N(0, gain^2 / fan_in), zero bias. gain == 0 gives an all-zero layer.
template <class T>
Linear<T> make_linear(std::size_t in, std::size_t out, Rng& rng, double gain = 1.0)
{
    Linear<T> l;
    if (gain == 0.0) {
        l.weight = Tensor<T>::zeros({in, out}, true);
    } else {
        l.weight = normal_tensor<T>({in, out}, gain / std::sqrt(static_cast<double>(in)), rng);
    }
    l.bias = Tensor<T>::zeros({out}, true);
    return l;
}

/// One-hot rows for a gather expressed as a matmul.
template <class T>
Tensor<T> one_hot(const std::vector<int>& ids, std::size_t classes)
{
    std::vector<T> v(ids.size() * classes, T(0));
    for (std::size_t i = 0; i < ids.size(); ++i) v[i * classes + static_cast<std::size_t>(ids[i])] = T(1);
    return Tensor<T>({ids.size(), classes}, std::move(v));
}

}  // namespace phantom
