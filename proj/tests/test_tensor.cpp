#include <cmath>

#include "doctest.h"

#include "deid/error.hpp"
#include "deid/rng.hpp"
#include "deid/tensor.hpp"

using namespace deid;
using namespace deid::nn;

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, bool grad = true) {
  std::vector<double> v(r * c);
  for (auto& x : v) x = rng.normal();
  return Tensor::matrix(r, c, std::move(v), grad);
}

std::vector<double> to_vec(std::span<const double> s) { return {s.begin(), s.end()}; }

// Attention written with the basic ops, one sequence and head at a time.
Tensor composite_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                           const std::vector<std::size_t>& offsets, std::size_t heads,
                           const std::vector<std::uint8_t>& key_mask) {
  const std::size_t d = q.cols();
  const std::size_t dh = d / heads;
  std::vector<Tensor> rows;
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    const std::size_t start = offsets[s];
    std::size_t len = offsets[s + 1] - start;
    // Masked keys are trailing pads in these fixtures.
    std::size_t keys = 0;
    while (keys < len && key_mask[start + keys]) ++keys;
    std::vector<Tensor> cols;
    for (std::size_t h = 0; h < heads; ++h) {
      const Tensor qh = slice_cols(slice_rows(q, start, len), h * dh, dh);
      const Tensor kh = slice_cols(slice_rows(k, start, keys), h * dh, dh);
      const Tensor vh = slice_cols(slice_rows(v, start, keys), h * dh, dh);
      const Tensor p = softmax_rows(scale(matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh))));
      cols.push_back(matmul(p, vh));
    }
    rows.push_back(concat_cols(cols));
  }
  return concat_rows(rows);
}

}  // namespace

TEST_SUITE("numerics_autodiff") {

TEST_CASE("softmax") {
  const Tensor s = softmax_rows(Tensor::matrix(1, 2, {0.0, 0.0}));
  CHECK(s.at(0, 0) == doctest::Approx(0.5));
  CHECK(s.at(0, 1) == doctest::Approx(0.5));
  Rng rng(1);
  const Tensor big = softmax_rows(scale(random_matrix(rng, 6, 9, false), 50.0));
  for (std::size_t r = 0; r < 6; ++r) {
    double total = 0;
    for (std::size_t c = 0; c < 9; ++c) {
      CHECK(big.at(r, c) >= 0.0);
      CHECK(big.at(r, c) <= 1.0);
      total += big.at(r, c);
    }
    CHECK(std::abs(total - 1.0) < 1e-6);
  }
}

TEST_CASE("cross entropy") {
  const Tensor uniform = Tensor::zeros({3, 15});
  const std::vector<int> targets{0, 7, 14};
  CHECK(cross_entropy_with_ignore(uniform, targets, -100).item() == doctest::Approx(std::log(15.0)).epsilon(1e-12));
  CHECK(std::abs(std::log(15.0) - 2.70805) < 1e-5);

  // Confident, correct logits: loss -> 0.
  Tensor sharp = Tensor::zeros({1, 15});
  sharp.mutable_values()[4] = 60.0;
  const std::vector<int> four{4};
  CHECK(cross_entropy_with_ignore(sharp, four, -100).item() < 1e-7);

  // Everything ignored: 0 with zero gradient.
  Graph g;
  Graph::Scope scope(g);
  Tensor logits = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}, true);
  const std::vector<int> ignored{-100, -100};
  const Tensor l = cross_entropy_with_ignore(logits, ignored, -100);
  CHECK(l.item() == 0.0);
  backward(l);
  for (double gr : logits.grad()) CHECK(gr == 0.0);
}

TEST_CASE("ignored rows do not change the loss") {
  Rng rng(2);
  const Tensor a = random_matrix(rng, 3, 5, false);
  const Tensor extra = random_matrix(rng, 3, 5, false);
  const std::vector<int> t{1, 2, 3};
  const std::vector<int> t2{1, 2, 3, -100, -100, -100};
  CHECK(cross_entropy_with_ignore(a, t, -100).item() ==
        doctest::Approx(cross_entropy_with_ignore(concat_rows({a, extra}), t2, -100).item()).epsilon(1e-14));
}

TEST_CASE("layer norm statistics") {
  Rng rng(3);
  const Tensor x = scale(random_matrix(rng, 5, 32, false), 7.0);
  const Tensor out = layer_norm(x, Tensor(Shape{32}, std::vector<double>(32, 1.0)), Tensor::zeros({32}));
  for (std::size_t r = 0; r < 5; ++r) {
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < 32; ++c) mean += out.at(r, c) / 32;
    for (std::size_t c = 0; c < 32; ++c) var += (out.at(r, c) - mean) * (out.at(r, c) - mean) / 32;
    CHECK(std::abs(mean) <= 1e-6);
    CHECK(std::abs(var - 1.0) <= 1e-4);
  }
}

TEST_CASE("backward basics") {
  Rng rng(4);
  Tensor w = random_matrix(rng, 3, 4);
  {
    Graph g;
    Graph::Scope scope(g);
    backward(scale(sum(mul(w, w)), 0.5));
    CHECK(g.size() == 0);
  }
  CHECK(to_vec(w.grad()) == to_vec(w.values()));

  // Two paths into the same tensor accumulate.
  Tensor x = Tensor::matrix(1, 2, {1.5, -2.0}, true);
  {
    Graph g;
    Graph::Scope scope(g);
    backward(sum(add(scale(x, 3.0), scale(x, 4.0))));
  }
  CHECK(to_vec(x.grad()) == std::vector<double>{7.0, 7.0});

  Graph g;
  Graph::Scope scope(g);
  CHECK_THROWS_AS(backward(add(w, w)), ShapeError);
}

TEST_CASE("shape errors name the shapes") {
  Rng rng(5);
  try {
    matmul(random_matrix(rng, 2, 3, false), random_matrix(rng, 2, 3, false));
    FAIL("expected shape error");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("[2,3]") != std::string::npos);
  }
}

TEST_CASE("backward is linear") {
  Rng rng(6);
  Tensor a = random_matrix(rng, 4, 4);
  const Tensor b = random_matrix(rng, 4, 4, false);
  auto f = [&] { return sum(gelu(matmul(a, b))); };
  auto g = [&] { return sum(softmax_rows(mul(a, a))); };
  auto grad_of = [&](auto fn) {
    a.zero_grad();
    Graph graph;
    Graph::Scope scope(graph);
    backward(fn());
    return to_vec(a.grad());
  };
  const auto gf = grad_of(f);
  const auto gg = grad_of(g);
  const auto gsum = grad_of([&] { return add(f(), g()); });
  for (std::size_t i = 0; i < gsum.size(); ++i) CHECK(gsum[i] == doctest::Approx(gf[i] + gg[i]).epsilon(1e-12));
}

TEST_CASE("grad_check on a quadratic") {
  Rng rng(7);
  ParameterSet ps;
  ps.add("w", random_matrix(rng, 3, 3));
  const Tensor c = random_matrix(rng, 3, 3, false);
  auto f = [&] {
    const Tensor d = add(ps.at("w"), c);
    return sum(mul(d, d));
  };
  const auto r = grad_check(f, ps);
  CHECK(r.deterministic);
  CHECK(r.max_relative_error <= 1e-9);
  CHECK(r.elements_checked == 9);
}

TEST_CASE("grad_check covers every op") {
  Rng rng(8);
  ParameterSet ps;
  ps.add("x", random_matrix(rng, 4, 6));
  ps.add("w", random_matrix(rng, 6, 5));
  ps.add("b", Tensor(Shape{5}, {0.1, -0.2, 0.3, 0.0, 0.5}, true));
  ps.add("g", Tensor(Shape{5}, {1.0, 0.9, 1.1, 1.2, 0.8}, true));
  ps.add("beta", Tensor(Shape{5}, {0.0, 0.1, 0.0, -0.1, 0.2}, true));
  ps.add("emb", random_matrix(rng, 7, 6));
  const std::vector<int> ids{3, 0, 3, 6};
  const std::vector<int> targets{1, -100, 4, 0};
  auto f = [&] {
    const Tensor x = add(ps.at("x"), embedding_lookup(ps.at("emb"), ids));
    Tensor h = add(matmul(x, ps.at("w")), ps.at("b"));
    h = layer_norm(gelu(h), ps.at("g"), ps.at("beta"));
    const Tensor logits = concat_cols({slice_cols(h, 0, 3), slice_cols(softmax_rows(h), 3, 2)});
    return cross_entropy_with_ignore(concat_rows({slice_rows(logits, 0, 2), slice_rows(logits, 2, 2)}), targets, -100);
  };
  const auto r = grad_check(f, ps);
  CHECK(r.deterministic);
  CHECK(r.max_relative_error <= 1e-6);
}

TEST_CASE("grad_check flags nondeterminism") {
  Rng rng(9);
  ParameterSet ps;
  ps.add("w", random_matrix(rng, 4, 4));
  std::uint64_t calls = 0;
  auto f = [&] { return sum(dropout(ps.at("w"), 0.5, calls++)); };
  const auto r = grad_check(f, ps);
  CHECK_FALSE(r.deterministic);
  CHECK_FALSE(r.passed(1e-4));
}

TEST_CASE("dropout") {
  Rng rng(10);
  const Tensor x = random_matrix(rng, 20, 20, false);
  CHECK(to_vec(dropout(x, 0.0, 1).values()) == to_vec(x.values()));
  const Tensor a = dropout(x, 0.3, 42);
  CHECK(to_vec(a.values()) == to_vec(dropout(x, 0.3, 42).values()));
  CHECK(to_vec(a.values()) != to_vec(dropout(x, 0.3, 43).values()));
  std::size_t kept = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (a.values()[i] != 0.0) {
      ++kept;
      CHECK(a.values()[i] == doctest::Approx(x.values()[i] / 0.7));
    }
  }
  CHECK(kept > 240);
  CHECK(kept < 320);
}

TEST_CASE("packed attention matches the composite ops") {
  Rng rng(11);
  const std::vector<std::size_t> offsets{0, 5, 8, 14};
  // Second and third sequences end in pads.
  std::vector<std::uint8_t> mask(14, 1);
  mask[7] = 0;
  mask[12] = mask[13] = 0;
  const std::size_t heads = 2;
  Tensor q = random_matrix(rng, 14, 8);
  Tensor k = random_matrix(rng, 14, 8);
  Tensor v = random_matrix(rng, 14, 8);
  const Tensor proj = random_matrix(rng, 14, 8, false);

  auto run = [&](bool packed) {
    for (Tensor* t : {&q, &k, &v}) t->zero_grad();
    Graph g;
    Graph::Scope scope(g);
    const Tensor out = packed ? packed_attention(q, k, v, offsets, heads, mask)
                              : composite_attention(q, k, v, offsets, heads, mask);
    const auto values = to_vec(out.values());
    backward(sum(mul(out, proj)));
    return std::vector<std::vector<double>>{values, to_vec(q.grad()), to_vec(k.grad()), to_vec(v.grad())};
  };
  const auto a = run(true);
  const auto b = run(false);
  for (std::size_t part = 0; part < a.size(); ++part) {
    REQUIRE(a[part].size() == b[part].size());
    for (std::size_t i = 0; i < a[part].size(); ++i) {
      CAPTURE(part);
      CAPTURE(i);
      CHECK(a[part][i] == doctest::Approx(b[part][i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("checkpoint serialization is bit exact") {
  Rng rng(12);
  ParameterSet ps;
  ps.add("a", random_matrix(rng, 3, 5));
  ps.add("b", Tensor(Shape{4}, {1e-300, -0.0, 3.141592653589793, 1e300}));
  ps.add("s", Tensor::scalar(2.5));
  std::string meta;
  const ParameterSet back = deserialize_parameters(serialize_parameters(ps, "hello"), &meta);
  CHECK(meta == "hello");
  CHECK(back.values_equal(ps));
  CHECK(back.at("b").shape() == Shape{4});
  CHECK(std::signbit(back.at("b").values()[1]));
  CHECK_THROWS(deserialize_parameters("garbage"));
}

TEST_CASE("inference outside a graph records nothing") {
  Rng rng(13);
  Tensor w = random_matrix(rng, 2, 2);
  Graph g;
  {
    Graph::Scope scope(g);
    {
      Graph::NoGradScope no_grad;
      (void)matmul(w, w);
    }
    CHECK(g.size() == 0);
    (void)matmul(w, w);
    CHECK(g.size() == 1);
    g.clear();
  }
}

}  // TEST_SUITE
