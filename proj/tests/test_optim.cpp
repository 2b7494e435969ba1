#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "dbp/optim.hpp"
#include "dbp/params.hpp"

using namespace dbp;

TEST_CASE("adamw with zero gradient and no decay leaves parameters unchanged") {
  std::vector<double> p{1.5, -2.0};
  const std::vector<double> g{0.0, 0.0};
  AdamMoments st;
  AdamWHyper h;
  h.weight_decay = 0.0;
  adamw_step(p, g, st, 1, 1e-3, h, "p");
  CHECK(p[0] == 1.5);
  CHECK(p[1] == -2.0);
  CHECK(st.m[0] == 0.0);
}

TEST_CASE("adamw first step matches closed form") {
  // Step 1: mhat = g, vhat = g^2 so the update is lr * g / (|g| + eps).
  for (double g0 : {0.3, -2.5, 1e-3}) {
    std::vector<double> p{0.7};
    AdamMoments st;
    AdamWHyper h;
    h.weight_decay = 0.0;
    const double lr = 2e-4;
    adamw_step(p, std::vector<double>{g0}, st, 1, lr, h, "p");
    const double expected = 0.7 - lr * g0 / (std::fabs(g0) + h.eps);
    CHECK(p[0] == doctest::Approx(expected).epsilon(1e-14));
  }
}

TEST_CASE("adamw decoupled weight decay scales the parameter") {
  std::vector<double> p{2.0};
  AdamMoments st;
  AdamWHyper h;  // weight_decay 0.01
  const double lr = 2e-4;
  adamw_step(p, std::vector<double>{0.0}, st, 1, lr, h, "p");
  CHECK(p[0] == doctest::Approx(2.0 * (1.0 - lr * 0.01)).epsilon(1e-15));
}

TEST_CASE("adamw rejects non-finite gradients by name") {
  std::vector<double> p{1.0};
  AdamMoments st;
  try {
    adamw_step(p, std::vector<double>{NAN}, st, 1, 1e-3, {}, "encoder.stem");
    FAIL("expected throw");
  } catch (const std::domain_error& e) {
    CHECK(std::string(e.what()).find("encoder.stem") != std::string::npos);
  }
}

TEST_CASE("adamw optimizer moves a quadratic toward its minimum") {
  ParamStore ps;
  Tensor x = ps.add("x", Tensor::from({2}, {3.0, -4.0}));
  AdamW opt({0.0, 0.9, 0.999, 1e-8});
  for (int i = 0; i < 2000; ++i) {
    ps.zero_grad();
    backward(sum(square(x)));
    opt.step(ps, 1e-2);
  }
  CHECK(std::fabs(x[0]) < 1e-2);
  CHECK(std::fabs(x[1]) < 1e-2);
}

TEST_CASE("cosine schedule endpoints") {
  CHECK(cosine_lr(0, 1000, 2e-4) == 0.0);
  CHECK(cosine_lr(500, 1000, 2e-4) == 2e-4);  // default warmup of 500
  CHECK(cosine_lr(250, 1000, 2e-4) == doctest::Approx(1e-4));
  CHECK(cosine_lr(1000, 1000, 2e-4) == 0.0);
  CHECK(cosine_lr(750, 1000, 2e-4) == doctest::Approx(1e-4));
  CHECK(cosine_lr(10, 100, 1.0, 10) == 1.0);
  CHECK_THROWS_AS(cosine_lr(0, 0, 1.0, 0), std::invalid_argument);
  CHECK_THROWS_AS(cosine_lr(5, 4, 1.0, 0), std::invalid_argument);
}

TEST_CASE("cosine schedule is monotone after warmup") {
  double prev = cosine_lr(20, 200, 1.0, 20);
  for (std::size_t s = 21; s <= 200; ++s) {
    const double lr = cosine_lr(s, 200, 1.0, 20);
    CHECK(lr <= prev);
    CHECK(lr >= 0.0);
    prev = lr;
  }
}

TEST_CASE("checkpoint round trip restores values bit-exactly") {
  const auto dir = std::filesystem::temp_directory_path() / "dbp_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "model.dbp";
  std::mt19937_64 rng(9);
  ParamStore a;
  a.uniform("layer.weight", {3, 4}, 1.0, rng);
  a.uniform("layer.bias", {4}, 1.0, rng);
  save_checkpoint(a, path);
  {
    std::ifstream is(path, std::ios::binary);
    char magic[4];
    is.read(magic, 4);
    CHECK(std::string(magic, 4) == "DBP1");
  }
  CHECK_FALSE(std::filesystem::exists(dir / "model.dbp.tmp"));

  ParamStore b;
  b.zeros("layer.weight", {3, 4});
  b.zeros("layer.bias", {4});
  load_checkpoint(b, path);
  CHECK(a.fingerprint() == b.fingerprint());

  ParamStore wrong;
  wrong.zeros("layer.weight", {4, 3});
  wrong.zeros("layer.bias", {4});
  CHECK_THROWS_AS(load_checkpoint(wrong, path), std::runtime_error);

  ParamStore missing;
  missing.zeros("layer.weight", {3, 4});
  CHECK_THROWS_AS(load_checkpoint(missing, path), std::runtime_error);
  std::filesystem::remove_all(dir);
}
