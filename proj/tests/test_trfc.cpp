#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "rfc/gradcheck.hpp"
#include "rfc/rng.hpp"
#include "rfc/trfc.hpp"

using namespace rfc;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

// Straight-line oracle for one query row: unscaled-dot attention over the
// other frames' same-region rows, ReLU-positive gate weight, sigmoid gate
// blend. Loops over plain tensors only.
std::vector<double> gate_blend_oracle(const std::vector<Tensor>& frames,
                                      std::size_t t, std::size_t i,
                                      const Tensor& w_raw, const Tensor& b) {
  const std::size_t t_len = frames.size(), d = frames[0].dim(1);
  std::vector<double> scores;
  std::vector<std::size_t> mem;
  for (std::size_t k = 0; k < t_len; ++k) {
    if (k == t) continue;
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c)
      s += frames[t].at(i, c) * frames[k].at(i, c);
    scores.push_back(s);
    mem.push_back(k);
  }
  double mx = scores[0];
  for (double s : scores) mx = std::max(mx, s);
  double z = 0.0;
  std::vector<double> alpha(scores.size());
  for (std::size_t k = 0; k < scores.size(); ++k) {
    alpha[k] = std::exp(scores[k] - mx);
    z += alpha[k];
  }
  for (double& a : alpha) a /= z;
  std::vector<double> e(d);
  for (std::size_t j = 0; j < d; ++j) {
    double v = 0.0;
    for (std::size_t k = 0; k < mem.size(); ++k)
      v += alpha[k] * frames[mem[k]].at(i, j);
    double pre = b[j];
    for (std::size_t c = 0; c < d; ++c)
      pre += frames[t].at(i, c) * std::max(w_raw.at(c, j), 0.0);
    double g = 1.0 / (1.0 + std::exp(-pre));
    e[j] = g * frames[t].at(i, j) + (1.0 - g) * v;
  }
  return e;
}

TrfcParams random_params(std::size_t d, Rng& rng) {
  TrfcParams p;
  p.gate_w_raw = constant(random_tensor({d, d}, rng, -0.5, 0.5));
  p.gate_b = constant(random_tensor({d}, rng, -0.4, 0.4));
  return p;
}

}  // namespace

TEST_CASE("temporal completion matches the straight-line oracle") {
  Rng rng(401);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t t_len = 2 + static_cast<std::size_t>(trial % 4);
    const std::size_t n = 1 + static_cast<std::size_t>(rng.uniform_int(0, 3));
    const std::size_t d = 1 + static_cast<std::size_t>(rng.uniform_int(0, 5));
    std::vector<Tensor> frames;
    std::vector<Var> vars;
    for (std::size_t t = 0; t < t_len; ++t) {
      frames.push_back(random_tensor({n, d}, rng, -1.5, 1.5));
      vars.push_back(constant(frames.back()));
    }
    TrfcParams p = random_params(d, rng);
    TrfcOut out = trfc_forward(vars, p);
    REQUIRE(out.e.size() == t_len);
    for (std::size_t t = 0; t < t_len; ++t) {
      REQUIRE(out.e[t].value().dim(0) == n);
      REQUIRE(out.e[t].value().dim(1) == d);
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> want = gate_blend_oracle(
            frames, t, i, p.gate_w_raw.value(), p.gate_b.value());
        for (std::size_t j = 0; j < d; ++j) {
          CAPTURE(trial);
          CAPTURE(t);
          CAPTURE(i);
          CAPTURE(j);
          CHECK(std::abs(out.e[t].value().at(i, j) - want[j]) <= 1e-12);
        }
      }
    }
  }
}

TEST_CASE("two frames attend to each other with weight one") {
  Rng rng(402);
  const std::size_t n = 3, d = 4;
  Tensor a = random_tensor({n, d}, rng), b = random_tensor({n, d}, rng);
  TrfcOut out = trfc_forward({constant(a), constant(b)}, random_params(d, rng));
  for (std::size_t t = 0; t < 2; ++t) {
    const Tensor& other = t == 0 ? b : a;
    for (std::size_t i = 0; i < n; ++i) {
      REQUIRE(out.alpha[t][i].value().size() == 1);
      CHECK(out.alpha[t][i].value()[0] == 1.0);
      for (std::size_t j = 0; j < d; ++j)
        CHECK(out.contexts[t].value().at(i, j) == other.at(i, j));
    }
  }
}

TEST_CASE("identical frames get uniform attention and context equal to the row") {
  Rng rng(403);
  const std::size_t t_len = 5, n = 2, d = 3;
  Tensor base = random_tensor({n, d}, rng);
  std::vector<Var> vars(t_len, constant(base));
  TrfcOut out = trfc_forward(vars, random_params(d, rng));
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k + 1 < t_len; ++k)
        CHECK(out.alpha[t][i].value()[k] ==
              doctest::Approx(1.0 / (t_len - 1)).epsilon(1e-14));
      for (std::size_t j = 0; j < d; ++j)
        CHECK(std::abs(out.contexts[t].value().at(i, j) - base.at(i, j)) <=
              1e-14);
    }
}

TEST_CASE("attention rows sum to one and gates stay strictly inside (0,1)") {
  Rng rng(404);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t t_len = 2 + static_cast<std::size_t>(trial % 5);
    const std::size_t n = 2, d = 4;
    std::vector<Var> vars;
    for (std::size_t t = 0; t < t_len; ++t)
      vars.push_back(constant(random_tensor({n, d}, rng, -2.0, 2.0)));
    TrfcOut out = trfc_forward(vars, random_params(d, rng));
    for (std::size_t t = 0; t < t_len; ++t) {
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k + 1 < t_len; ++k) {
          const double a = out.alpha[t][i].value()[k];
          CHECK(a > 0.0);
          s += a;
        }
        CHECK(std::abs(s - 1.0) <= 1e-12);
      }
      for (std::size_t q = 0; q < out.gates[t].value().size(); ++q) {
        CHECK(out.gates[t].value()[q] > 0.0);
        CHECK(out.gates[t].value()[q] < 1.0);
      }
    }
  }
}

TEST_CASE("extreme gate bias pins the blend to query or context") {
  Rng rng(405);
  const std::size_t n = 2, d = 3;
  Tensor a = random_tensor({n, d}, rng), b = random_tensor({n, d}, rng);
  TrfcParams open_gate;
  open_gate.gate_w_raw = constant(Tensor::zeros({d, d}));
  open_gate.gate_b = constant(Tensor::full({d}, 40.0));
  TrfcOut kept = trfc_forward({constant(a), constant(b)}, open_gate);
  for (std::size_t q = 0; q < n * d; ++q)
    CHECK(std::abs(kept.e[0].value()[q] - a[q]) <= 1e-12);

  TrfcParams shut_gate;
  shut_gate.gate_w_raw = constant(Tensor::zeros({d, d}));
  shut_gate.gate_b = constant(Tensor::full({d}, -40.0));
  TrfcOut replaced = trfc_forward({constant(a), constant(b)}, shut_gate);
  for (std::size_t q = 0; q < n * d; ++q)
    CHECK(std::abs(replaced.e[0].value()[q] - b[q]) <= 1e-12);
}

TEST_CASE("negative raw gate weight rectifies to zero so only the bias acts") {
  Rng rng(406);
  const std::size_t n = 2, d = 3;
  TrfcParams p;
  p.gate_w_raw = constant(random_tensor({d, d}, rng, -1.0, -0.1));
  p.gate_b = constant(random_tensor({d}, rng));
  TrfcOut first = trfc_forward(
      {constant(random_tensor({n, d}, rng)), constant(random_tensor({n, d}, rng))},
      p);
  TrfcOut second = trfc_forward(
      {constant(random_tensor({n, d}, rng, 2.0, 3.0)),
       constant(random_tensor({n, d}, rng, -3.0, -2.0))},
      p);
  for (std::size_t j = 0; j < d; ++j) {
    const double want = 1.0 / (1.0 + std::exp(-p.gate_b.value()[j]));
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(first.gates[0].value().at(i, j) == doctest::Approx(want).epsilon(1e-14));
      CHECK(second.gates[1].value().at(i, j) ==
            doctest::Approx(want).epsilon(1e-14));
    }
  }
}

TEST_CASE("single-frame sequences and shape mismatches are rejected") {
  Rng rng(407);
  TrfcParams p = random_params(3, rng);
  CHECK_THROWS_AS(trfc_forward({constant(Tensor::zeros({2, 3}))}, p),
                  ValidationError);
  CHECK_THROWS_AS(trfc_forward({constant(Tensor::zeros({2, 3})),
                                constant(Tensor::zeros({3, 3}))},
                               p),
                  DimensionError);
  CHECK_THROWS_AS(trfc_forward({constant(Tensor::zeros({2, 3})),
                                constant(Tensor::zeros({2, 4}))},
                               p),
                  DimensionError);
  TrfcParams bad;
  bad.gate_w_raw = constant(Tensor::zeros({3, 2}));
  bad.gate_b = constant(Tensor::zeros({3}));
  CHECK_THROWS_AS(trfc_forward({constant(Tensor::zeros({2, 3})),
                                constant(Tensor::zeros({2, 3}))},
                               bad),
                  DimensionError);
}

TEST_CASE("temporal completion gradients match finite differences") {
  Rng rng(408);
  const std::size_t t_len = 3, n = 3, d = 4;
  std::vector<Tensor> init;
  for (std::size_t t = 0; t < t_len; ++t)
    init.push_back(random_tensor({n, d}, rng, -1.2, 1.2));
  init.push_back(random_tensor({d, d}, rng, -0.5, 0.5));  // raw gate weight
  init.push_back(random_tensor({d}, rng, -0.4, 0.4));     // gate bias
  // Keep the raw weight away from the ReLU kink so central differences see
  // a one-sided slope everywhere.
  for (std::size_t q = 0; q < d * d; ++q)
    if (std::abs(init[t_len][q]) < 0.05)
      init[t_len][q] = init[t_len][q] < 0.0 ? -0.05 : 0.05;

  Tensor probe_w = random_tensor({n, d}, rng);
  auto build = [&](const std::vector<Var>& v) {
    TrfcParams p{v[t_len], v[t_len + 1]};
    TrfcOut out = trfc_forward({v[0], v[1], v[2]}, p);
    Var obj = constant(Tensor::scalar(0.0));
    for (std::size_t t = 0; t < t_len; ++t) {
      obj = add(obj, sum(mul(out.e[t], out.e[t])));
      obj = add(obj, sum(mul(constant(probe_w), out.gates[t])));
    }
    return obj;
  };

  std::vector<Var> leaves;
  for (const Tensor& t : init) leaves.push_back(leaf(t));
  backward(build(leaves));
  for (std::size_t idx = 0; idx < init.size(); ++idx) {
    Tensor fd = finite_diff_grad(
        [&](const Tensor& probe) {
          std::vector<Var> vars;
          for (std::size_t i = 0; i < init.size(); ++i)
            vars.push_back(constant(i == idx ? probe : init[i]));
          return build(vars).value()[0];
        },
        init[idx]);
    CAPTURE(idx);
    CHECK(max_rel_error(leaves[idx].grad(), fd) <= 1e-4);
  }
}

TEST_CASE("temporal completion is bit-deterministic across repeats") {
  Rng rng(409);
  const std::size_t t_len = 4, n = 3, d = 5;
  std::vector<Tensor> frames;
  for (std::size_t t = 0; t < t_len; ++t)
    frames.push_back(random_tensor({n, d}, rng));
  Tensor w = random_tensor({d, d}, rng), b = random_tensor({d}, rng);

  auto run = [&](Tensor* grad_out) {
    std::vector<Var> vars;
    for (const Tensor& f : frames) vars.push_back(constant(f));
    Var w_leaf = leaf(w);
    TrfcParams p{w_leaf, constant(b)};
    TrfcOut out = trfc_forward(vars, p);
    Var obj = constant(Tensor::scalar(0.0));
    for (const Var& e : out.e) obj = add(obj, sum(mul(e, e)));
    backward(obj);
    *grad_out = w_leaf.grad();
    return out.e[1].value();
  };

  Tensor g1({1}), g2({1});
  Tensor e1 = run(&g1), e2 = run(&g2);
  CHECK(std::memcmp(e1.data(), e2.data(), e1.size() * sizeof(double)) == 0);
  CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(double)) == 0);
}
