// Randomized gradient-check cases, one per differentiable tensor op.
#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "gradcheck.hpp"

namespace gridpaint::testing {

// Projects an op output onto fixed random weights so every output element
// contributes a distinct coefficient to the scalar under test.
inline DTensor project(const DTensor& y, std::uint64_t seed) {
  Rng rng(seed, "projection");
  std::vector<double> w(y.numel());
  for (auto& x : w) x = rng.normal();
  return sum(mul(y, DTensor::from(y.shape(), std::move(w))));
}

struct OpCase {
  std::string name;
  // Builds parameters from the rng and returns the scalar to differentiate.
  std::function<std::pair<std::vector<DTensor>, std::function<DTensor()>>(Rng&, std::uint64_t)> make;
};

inline std::vector<OpCase> op_cases() {
  std::vector<OpCase> cases;
  auto unary = [&](std::string name, std::function<DTensor(const DTensor&)> op, double scale = 1.0) {
    cases.push_back({name, [op, scale](Rng& rng, std::uint64_t seed) {
                       const std::size_t r = 1 + rng.below(4), c = 1 + rng.below(5);
                       auto x = random_param({r, c}, rng, scale);
                       return std::make_pair(std::vector<DTensor>{x},
                                             std::function<DTensor()>([=] { return project(op(x), seed); }));
                     }});
  };
  auto binary = [&](std::string name, std::function<DTensor(const DTensor&, const DTensor&)> op) {
    cases.push_back({name, [op](Rng& rng, std::uint64_t seed) {
                       const std::size_t r = 1 + rng.below(4), c = 1 + rng.below(5);
                       auto a = random_param({r, c}, rng);
                       auto b = random_param({r, c}, rng);
                       return std::make_pair(std::vector<DTensor>{a, b},
                                             std::function<DTensor()>([=] { return project(op(a, b), seed); }));
                     }});
  };

  binary("add", [](const DTensor& a, const DTensor& b) { return add(a, b); });
  binary("sub", [](const DTensor& a, const DTensor& b) { return sub(a, b); });
  binary("mul", [](const DTensor& a, const DTensor& b) { return mul(a, b); });
  unary("scale", [](const DTensor& x) { return scale(x, -1.7); });
  unary("add_scalar", [](const DTensor& x) { return add_scalar(x, 0.3); });
  unary("square", [](const DTensor& x) { return square(x); });
  unary("sum", [](const DTensor& x) { return scale(sum(x), 1.3); });
  unary("mean", [](const DTensor& x) { return scale(mean(x), 2.1); });
  unary("gelu", [](const DTensor& x) { return gelu(x); }, 2.0);
  unary("sigmoid", [](const DTensor& x) { return sigmoid(x); }, 2.0);
  // Kinks at 0 (relu) and +-1 (huber) are avoided by the half-step offset
  // being tiny compared to typical distances from the kink.
  unary("relu", [](const DTensor& x) { return relu(x); });
  unary("huber", [](const DTensor& x) { return huber(x); }, 1.5);
  unary("softmax_rows", [](const DTensor& x) { return softmax(x, 1); }, 2.0);
  unary("softmax_cols", [](const DTensor& x) { return softmax(x, 0); }, 2.0);
  unary("reshape", [](const DTensor& x) { return reshape(x, Shape{x.numel()}); });

  cases.push_back({"matmul", [](Rng& rng, std::uint64_t seed) {
                     const std::size_t m = 1 + rng.below(4), k = 1 + rng.below(5), n = 1 + rng.below(4);
                     auto a = random_param({m, k}, rng);
                     auto b = random_param({k, n}, rng);
                     return std::make_pair(std::vector<DTensor>{a, b},
                                           std::function<DTensor()>([=] { return project(matmul(a, b), seed); }));
                   }});
  cases.push_back({"linear", [](Rng& rng, std::uint64_t seed) {
                     const std::size_t m = 1 + rng.below(4), k = 1 + rng.below(5), n = 1 + rng.below(4);
                     auto x = random_param({m, k}, rng);
                     auto w = random_param({k, n}, rng);
                     auto b = random_param({n}, rng);
                     return std::make_pair(std::vector<DTensor>{x, w, b}, std::function<DTensor()>([=] {
                                             return project(linear(x, w, b), seed);
                                           }));
                   }});
  cases.push_back({"add_row_vector", [](Rng& rng, std::uint64_t seed) {
                     const std::size_t m = 1 + rng.below(4), n = 1 + rng.below(5);
                     auto a = random_param({m, n}, rng);
                     auto r = random_param({n}, rng);
                     return std::make_pair(std::vector<DTensor>{a, r}, std::function<DTensor()>([=] {
                                             return project(add_row_vector(a, r), seed);
                                           }));
                   }});
  cases.push_back({"layer_norm", [](Rng& rng, std::uint64_t seed) {
                     const std::size_t m = 1 + rng.below(4), n = 2 + rng.below(6);
                     auto x = random_param({m, n}, rng);
                     auto g = random_param({n}, rng);
                     auto b = random_param({n}, rng);
                     return std::make_pair(std::vector<DTensor>{x, g, b}, std::function<DTensor()>([=] {
                                             return project(layer_norm(x, g, b, 1e-5), seed);
                                           }));
                   }});
  cases.push_back({"embedding", [](Rng& rng, std::uint64_t seed) {
                     const std::size_t v = 2 + rng.below(5), d = 1 + rng.below(4);
                     auto table = random_param({v, d}, rng);
                     std::vector<int> ids(1 + rng.below(6));
                     for (auto& i : ids) i = static_cast<int>(rng.below(v));
                     return std::make_pair(std::vector<DTensor>{table}, std::function<DTensor()>([=] {
                                             return project(embedding(table, ids), seed);
                                           }));
                   }});
  cases.push_back({"gather_rows", [](Rng& rng, std::uint64_t seed) {
                     const std::size_t r = 2 + rng.below(4), d = 1 + rng.below(4);
                     auto x = random_param({r, d}, rng);
                     std::vector<std::size_t> rows(1 + rng.below(5));
                     for (auto& i : rows) i = rng.below(r);
                     return std::make_pair(std::vector<DTensor>{x}, std::function<DTensor()>([=] {
                                             return project(gather_rows(x, rows), seed);
                                           }));
                   }});
  cases.push_back({"concat_slice_segments", [](Rng& rng, std::uint64_t seed) {
                     const std::size_t B = 1 + rng.below(3), la = 1 + rng.below(3), lb = 1 + rng.below(3),
                                       d = 1 + rng.below(3);
                     auto a = random_param({B * la, d}, rng);
                     auto b = random_param({B * lb, d}, rng);
                     return std::make_pair(std::vector<DTensor>{a, b}, std::function<DTensor()>([=] {
                                             auto c = concat_segments(a, b, B);
                                             auto s = slice_segments(square(c), B, la + lb, la > 1 ? 1 : 0,
                                                                     la + lb - (la > 1 ? 1 : 0));
                                             return project(s, seed);
                                           }));
                   }});
  cases.push_back({"attention", [](Rng& rng, std::uint64_t seed) {
                     const std::size_t B = 1 + rng.below(2), heads = 1 + rng.below(2), hd = 1 + rng.below(3);
                     const std::size_t lq = 1 + rng.below(3), lk = 1 + rng.below(4), D = heads * hd;
                     auto q = random_param({B * lq, D}, rng);
                     auto k = random_param({B * lk, D}, rng);
                     auto v = random_param({B * lk, D}, rng);
                     std::vector<std::uint8_t> mask(B * lk, 1);
                     for (std::size_t e = 0; e < B; ++e)
                       for (std::size_t j = 1; j < lk; ++j) mask[e * lk + j] = rng.bernoulli(0.7) ? 1 : 0;
                     return std::make_pair(std::vector<DTensor>{q, k, v}, std::function<DTensor()>([=] {
                                             return project(attention(q, k, v, B, heads, mask), seed);
                                           }));
                   }});
  cases.push_back({"dropout", [](Rng& rng, std::uint64_t seed) {
                     auto x = random_param({3, 4}, rng);
                     std::vector<std::uint8_t> keep(12);
                     for (auto& k : keep) k = rng.bernoulli(0.6) ? 1 : 0;
                     return std::make_pair(std::vector<DTensor>{x}, std::function<DTensor()>([=] {
                                             return project(dropout(x, keep, 0.4), seed);
                                           }));
                   }});
  cases.push_back({"cross_entropy", [](Rng& rng, std::uint64_t) {
                     const std::size_t r = 1 + rng.below(4), c = 2 + rng.below(5);
                     auto x = random_param({r, c}, rng, 2.0);
                     std::vector<int> t(r);
                     for (auto& i : t) i = static_cast<int>(rng.below(c));
                     return std::make_pair(std::vector<DTensor>{x}, std::function<DTensor()>([=] {
                                             return cross_entropy_from_logits(x, t);
                                           }));
                   }});
  cases.push_back({"mse", [](Rng& rng, std::uint64_t) {
                     const std::size_t r = 1 + rng.below(4), c = 1 + rng.below(5);
                     auto x = random_param({r, c}, rng);
                     auto y = random_param({r, c}, rng);
                     return std::make_pair(std::vector<DTensor>{x, y}, std::function<DTensor()>([=] {
                                             return mse_loss(x, y);
                                           }));
                   }});
  cases.push_back({"bce_with_logits", [](Rng& rng, std::uint64_t) {
                     const std::size_t r = 1 + rng.below(5);
                     auto x = random_param({r, 1}, rng, 3.0);
                     std::vector<double> labels(r);
                     for (auto& l : labels) l = rng.bernoulli(0.5) ? 1.0 : 0.0;
                     return std::make_pair(std::vector<DTensor>{x}, std::function<DTensor()>([=] {
                                             return bce_with_logits(x, std::span<const double>(labels));
                                           }));
                   }});
  return cases;
}

}  // namespace gridpaint::testing
