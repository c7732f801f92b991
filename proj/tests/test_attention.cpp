#include <cmath>

#include "doctest.h"
#include "melodi/attention.hpp"
#include "melodi/params.hpp"
#include "test_util.hpp"

using namespace melodi;
using melodi::testing::random_tensor;

namespace {

// Single-head, per-query loop over keys with explicit exp/normalize.
std::vector<double> brute_attention(const Tensor& q, const Tensor& k, const Tensor& v, const Mask* mask,
                                    const Tensor& bias, std::size_t heads) {
  const std::size_t nq = q.dim(0), nk = k.dim(0), d = q.dim(1), hd = d / heads;
  std::vector<double> out(nq * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < nq; ++i) {
      std::vector<double> s(nk, -INFINITY);
      double hi = -INFINITY;
      for (std::size_t j = 0; j < nk; ++j) {
        if (mask && !(*mask)(i, j)) continue;
        double dot = 0;
        for (std::size_t t = 0; t < hd; ++t) dot += q.at(i, h * hd + t) * k.at(j, h * hd + t);
        s[j] = dot / std::sqrt(static_cast<double>(hd));
        if (bias.defined()) s[j] += bias.data()[(h * nq + i) * nk + j];
        hi = std::max(hi, s[j]);
      }
      double z = 0;
      for (std::size_t j = 0; j < nk; ++j) z += std::isinf(s[j]) ? 0.0 : std::exp(s[j] - hi);
      for (std::size_t j = 0; j < nk; ++j) {
        if (std::isinf(s[j])) continue;
        const double p = std::exp(s[j] - hi) / z;
        for (std::size_t t = 0; t < hd; ++t) out[i * d + h * hd + t] += p * v.at(j, h * hd + t);
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("mask layout: prefix, causal context, summary sees the whole window") {
  const TokenLayout layout{2, 3, 2};
  const Mask m = build_mask(layout);
  REQUIRE(m.rows == 5);
  REQUIRE(m.cols == 7);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(m(i, 0));
    CHECK(m(i, 1));
  }
  // context query 0 sees context key 0 only
  CHECK(m(0, 2));
  CHECK_FALSE(m(0, 3));
  CHECK_FALSE(m(0, 5));
  // context query 2 sees all context but no summary key
  CHECK(m(2, 4));
  CHECK_FALSE(m(2, 5));
  // summary query 0 sees all context and itself, not the later summary token
  CHECK(m(3, 2));
  CHECK(m(3, 4));
  CHECK(m(3, 5));
  CHECK_FALSE(m(3, 6));
  CHECK(m(4, 6));

  const Mask hidden = build_mask(layout, false);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK_FALSE(hidden(i, 0));
    CHECK_FALSE(hidden(i, 1));
  }
}

TEST_CASE("relative buckets are key minus query, clipped") {
  const TokenLayout layout{2, 3, 1};
  const int r = 2;
  const auto b = relative_buckets(layout, r);
  REQUIRE(b.size() == 4 * 6);
  // query 0 vs prefix key -2: offset -2
  CHECK(b[0 * 6 + 0] == -2 + r);
  // query 0 vs itself: 0
  CHECK(b[0 * 6 + 2] == r);
  // query 3 (summary, position 3) vs prefix key -2: offset -5 clipped to -2
  CHECK(b[3 * 6 + 0] == 0);
  // query 0 vs summary key at position 3: +3 clipped to +2
  CHECK(b[0 * 6 + 5] == 2 * r);
  for (auto v : b) {
    CHECK(v >= 0);
    CHECK(v <= 2 * r);
  }
}

TEST_CASE("attention_heads matches brute force with mask and bias") {
  const std::size_t heads = 2, d = 6;
  const TokenLayout layout{2, 3, 2};
  const Tensor q = random_tensor({layout.queries(), d}, 1, 1.0, false);
  const Tensor k = random_tensor({layout.keys(), d}, 2, 1.0, false);
  const Tensor v = random_tensor({layout.keys(), d}, 3, 1.0, false);
  AttentionParams params;
  params.heads = heads;
  params.max_offset = 3;
  params.rel_bias = random_tensor({heads, 7}, 4, 1.0, false);
  params.q_proj = Tensor::zeros({d, d});
  const Mask mask = build_mask(layout);
  const Tensor bias = relative_bias(layout, params);
  const Tensor out = attention_heads(q, k, v, &mask, bias, heads);
  const auto ref = brute_attention(q, k, v, &mask, bias, heads);
  REQUIRE(out.size() == ref.size());
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(out.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("unmasked single key returns its value") {
  const Tensor q = random_tensor({3, 4}, 5, 1.0, false);
  const Tensor k = random_tensor({1, 4}, 6, 1.0, false);
  const Tensor v = random_tensor({1, 4}, 7, 1.0, false);
  const Tensor out = attention_heads(q, k, v, nullptr, Tensor{}, 2);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(out.at(i, j) == doctest::Approx(v.at(0, j)).epsilon(1e-14));
}

TEST_CASE("attend gradient check") {
  const std::size_t d = 4;
  ParameterStore store(3);
  AttentionParams p;
  p.heads = 2;
  p.max_offset = 2;
  p.q_proj = store.normal("q", {d, d}, 0.5);
  p.k_proj = store.normal("k", {d, d}, 0.5);
  p.v_proj = store.normal("v", {d, d}, 0.5);
  p.out_proj = store.normal("o", {d, d}, 0.5);
  p.rel_bias = store.normal("b", {2, 5}, 0.5);
  const TokenLayout layout{1, 3, 1};
  Tensor x = random_tensor({layout.keys(), d}, 8);
  const Mask mask = build_mask(layout);
  auto loss = [&] {
    const Tensor queries = slice_rows(x, 1, layout.queries());
    const Tensor out = attend(queries, x, x, &mask, relative_bias(layout, p), p);
    return sum(mul(out, out));
  };
  CHECK(grad_check(loss, {x, p.q_proj, p.k_proj, p.v_proj, p.out_proj, p.rel_bias}) < 1e-6);
}

TEST_CASE("gated merge: saturated gates pick one path, zero gate is the exact mean") {
  const Tensor s = random_tensor({3, 4}, 9, 1.0, false);
  const Tensor c = random_tensor({3, 4}, 10, 1.0, false);
  const Tensor hi = gated_merge(s, c, Tensor::from({2}, {30, 30}));
  const Tensor lo = gated_merge(s, c, Tensor::from({2}, {-30, -30}));
  const Tensor mid = gated_merge(s, c, Tensor::from({2}, {0, 0}));
  const Tensor split = gated_merge(s, c, Tensor::from({2}, {30, -30}));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 4; ++j) {
      CHECK(std::abs(hi.at(i, j) - c.at(i, j)) < 1e-9);
      CHECK(std::abs(lo.at(i, j) - s.at(i, j)) < 1e-9);
      CHECK(mid.at(i, j) == (s.at(i, j) + c.at(i, j)) / 2);
      CHECK(std::abs(split.at(i, j) - (j < 2 ? c.at(i, j) : s.at(i, j))) < 1e-9);
    }
  }
}

TEST_CASE("parameter init depends only on seed and name") {
  ParameterStore a(11), b(11), c(12);
  (void)b.normal("other", {3}, 1.0);
  const Tensor ta = a.normal("w", {4, 4}, 0.02);
  const Tensor tb = b.normal("w", {4, 4}, 0.02);
  const Tensor tc = c.normal("w", {4, 4}, 0.02);
  CHECK(melodi::testing::bit_equal(ta, tb));
  CHECK_FALSE(melodi::testing::bit_equal(ta, tc));
  CHECK_THROWS(a.normal("w", {2}, 1.0));
  CHECK(a.scalar_count() == 16);
}
