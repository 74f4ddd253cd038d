#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cstdio>
#include <filesystem>

#include "metaemg/nn.hpp"
#include "test_util.hpp"

using namespace metaemg;
using namespace testutil;

namespace {

Network tiny_net(Activation act = Activation::Tanh, std::vector<std::size_t> sizes = {6, 8, 5, 3}) {
  return Network(NetworkConfig{std::move(sizes), act});
}

}  // namespace

TEST_CASE("parameter count of the intent classifier") {
  const Network net;
  CHECK(net.parameter_count() == 885763);
  CHECK(parameter_count({1600, 512, 128, 3}) == 512 * 1600 + 512 + 128 * 512 + 128 + 3 * 128 + 3);
  CHECK(net.config().input_dim() == 8 * 200);
}

TEST_CASE("flatten and unflatten round-trip exactly") {
  const Network net = tiny_net();
  const ModelParams p = jitter(net.init_params(3), 0.1, Rng(4));
  std::vector<double> flat(p.flat().data(), p.flat().data() + p.size());
  const ModelParams q = ModelParams::unflatten(p.layer_sizes(), flat);
  CHECK(q == p);
  CHECK_THROWS_AS(ModelParams::unflatten(p.layer_sizes(), std::span(flat).first(flat.size() - 1)), ShapeError);
  // layerwise: W0 column-major, b0, W1, ...
  CHECK(p.weights(0)(1, 0) == flat[1]);
  CHECK(p.weights(0)(0, 1) == flat[8]);
  CHECK(p.bias(0)(0) == flat[6 * 8]);
}

TEST_CASE("init_params: determinism, zero biases, bound") {
  const Network net;
  const ModelParams a = net.init_params(11), b = net.init_params(11), c = net.init_params(12);
  CHECK(a == b);
  CHECK_FALSE(a == c);
  const double bound = std::sqrt(6.0 / 2112.0);
  CHECK(bound == doctest::Approx(0.0533).epsilon(1e-3));
  CHECK(a.weights(0).cwiseAbs().maxCoeff() <= bound);
  CHECK(a.weights(0).cwiseAbs().maxCoeff() > 0.99 * bound);
  for (std::size_t l = 0; l < net.num_layers(); ++l) CHECK(a.bias(l).isZero(0.0));
}

TEST_CASE("forward degenerate and hand-computed cases") {
  const Network tiny(NetworkConfig{{4, 3, 2, 3}, Activation::ReLU});
  ModelParams p = tiny.zeros();
  Eigen::MatrixXd x(4, 1);
  x << 0.5, -0.25, 1.0, -1.0;
  CHECK(tiny.forward(p, x).isZero(0.0));
  p.bias(2) << 0.3, -0.7, 2.0;
  CHECK(tiny.forward(p, x).col(0) == Eigen::Vector3d(0.3, -0.7, 2.0));

  p.weights(0) << 1, 0, 0, 0,  //
      0, 1, 0, 0,              //
      1, 1, 1, 1;
  p.bias(0) << 0.0, 0.5, -0.1;
  p.weights(1) << 1, 2, -1,  //
      0, -1, 3;
  p.bias(1) << 0.0, 0.25;
  p.weights(2) << 1, 0,  //
      0, 1,              //
      1, -1;
  p.bias(2) << 0.0, 0.0, 0.0;
  // h1 = relu([0.5, 0.25, 0.15]); h2 = relu([0.5 + 0.5 - 0.15, -0.25 + 0.45 + 0.25]) = [0.85, 0.45]
  // logits = [0.85, 0.45, 0.40]
  const Eigen::Vector3d z = tiny.forward(p, x).col(0);
  CHECK(z(0) == doctest::Approx(0.85).epsilon(1e-15));
  CHECK(z(1) == doctest::Approx(0.45).epsilon(1e-15));
  CHECK(z(2) == doctest::Approx(0.40).epsilon(1e-15));
  CHECK_THROWS_AS(tiny.forward(p, Eigen::MatrixXd::Zero(5, 1)), ShapeError);
}

TEST_CASE("softmax cases") {
  const auto u = softmax(Eigen::Vector3d::Zero());
  CHECK(u.p_relax == doctest::Approx(1.0 / 3.0));
  CHECK(u.p_open == doctest::Approx(1.0 / 3.0));
  const auto big = softmax(Eigen::Vector3d(1000, 0, 0));
  CHECK(std::isfinite(big.p_relax));
  CHECK(big.p_relax == doctest::Approx(1.0));
  CHECK(big.p_open < 1e-300);
  const auto d = softmax(Eigen::Vector3d(std::log(1.0), std::log(2.0), std::log(7.0)));
  CHECK(d.p_relax == doctest::Approx(0.1).epsilon(1e-14));
  CHECK(d.p_open == doctest::Approx(0.2).epsilon(1e-14));
  CHECK(d.p_close == doctest::Approx(0.7).epsilon(1e-14));
  CHECK(d.argmax() == Intent::Close);

  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const double scale = std::pow(10.0, rng.uniform(-3.0, 6.0));
    const Eigen::Vector3d z(rng.uniform(-scale, scale), rng.uniform(-scale, scale), rng.uniform(-scale, scale));
    const auto s = softmax(z);
    for (double v : {s.p_relax, s.p_open, s.p_close}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    CHECK(std::abs(s.p_relax + s.p_open + s.p_close - 1.0) <= 1e-12);
  }
}

TEST_CASE("batch_loss cases") {
  const Network net = tiny_net(Activation::ReLU);
  const Batch b = random_batch(6, 7, Rng(1));
  CHECK(net.batch_loss(net.zeros(), b) == doctest::Approx(std::log(3.0)).epsilon(1e-15));
  CHECK_THROWS_AS(net.batch_loss(net.zeros(), Batch{}), PreconditionError);

  Eigen::MatrixXd logits(3, 2);
  logits << 2.0, -1.0,  //
      0.0, 0.5,         //
      1.0, 0.5;
  const std::vector<int> labels{0, 2};
  const double l0 = -2.0 + std::log(std::exp(2.0) + 1.0 + std::exp(1.0));
  const double l1 = -0.5 + std::log(std::exp(-1.0) + 2.0 * std::exp(0.5));
  CHECK(cross_entropy(logits, labels) == doctest::Approx((l0 + l1) / 2.0).epsilon(1e-15));

  double previous = 1e9;
  for (double m : {0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 100.0, 1000.0}) {
    Eigen::MatrixXd z = Eigen::MatrixXd::Zero(3, 2);
    z(0, 0) = m;
    z(2, 1) = m;
    const double l = cross_entropy(z, labels);
    CHECK(l <= previous);
    CHECK(l >= 0.0);
    if (m <= 20.0) CHECK(l < previous);
    previous = l;
  }
  CHECK(previous == 0.0);
}

TEST_CASE("loss is permutation-invariant over the batch") {
  const Network net = tiny_net(Activation::ReLU);
  const ModelParams p = net.init_params(2);
  const Batch b = random_batch(6, 9, Rng(3));
  std::vector<std::size_t> perm = all_coords(9);
  Rng(8).shuffle(std::span(perm));
  const Batch shuffled = select_columns(b, perm);
  CHECK(net.batch_loss(p, shuffled) == doctest::Approx(net.batch_loss(p, b)).epsilon(1e-14));
}

TEST_CASE("gradient at zero parameters is softmax minus one-hot") {
  const Network net = tiny_net(Activation::ReLU);
  Batch b = random_batch(6, 5, Rng(9));
  for (int& l : b.labels) l = 1;
  const GradientVector g = net.batch_gradient(net.zeros(), b);
  CHECK(g.bias(2)(0) == doctest::Approx(1.0 / 3.0));
  CHECK(g.bias(2)(1) == doctest::Approx(1.0 / 3.0 - 1.0));
  CHECK(g.bias(2)(2) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("duplicated batch leaves the gradient unchanged") {
  const Network net = tiny_net(Activation::ReLU);
  const ModelParams p = net.init_params(4);
  const Batch b = random_batch(6, 6, Rng(10));
  std::vector<std::size_t> twice;
  for (std::size_t j = 0; j < 6; ++j) twice.insert(twice.end(), {j, j});
  const GradientVector g1 = net.batch_gradient(p, b);
  const GradientVector g2 = net.batch_gradient(p, select_columns(b, twice));
  CHECK((g1.flat() - g2.flat()).cwiseAbs().maxCoeff() <= 1e-15);
}

TEST_CASE("central differences are exact on a quadratic") {
  ParamVector x(std::vector<std::size_t>{2, 2});  // 6 entries
  for (std::size_t j = 0; j < x.size(); ++j) x[j] = 0.5 * static_cast<double>(j) - 1.0;
  auto quad = [](const ParamVector& p) {
    double s = 0.0;
    for (std::size_t j = 0; j < p.size(); ++j) s += 0.5 * static_cast<double>(j + 1) * p[j] * p[j] + p[j];
    return s;
  };
  for (double h : {1e-1, 1e-3, 1.0}) {
    const ParamVector g = central_difference(x, quad, h);
    for (std::size_t j = 0; j < x.size(); ++j) CHECK(g[j] == doctest::Approx(static_cast<double>(j + 1) * x[j] + 1.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(central_difference(x, quad, 0.0), PreconditionError);
  const Network net = tiny_net();
  CHECK_THROWS_AS(fd_gradient(net, net.zeros(), random_batch(6, 2, Rng(1)), 0.0), PreconditionError);
}

TEST_CASE("reference loss agrees with the library forward pass") {
  for (Activation act : {Activation::ReLU, Activation::Tanh}) {
    const Network net = tiny_net(act);
    const ModelParams p = jitter(net.init_params(6), 0.2, Rng(7));
    const Batch b = random_batch(6, 5, Rng(8));
    const ReferenceNet ref(net.config());
    REQUIRE(ref.count() == p.size());
    std::vector<long double> rg;
    CHECK(static_cast<double>(ref.loss(ReferenceNet::widen(p), b, &rg)) ==
          doctest::Approx(net.batch_loss(p, b)).epsilon(1e-13));
    const GradientVector g = net.batch_gradient(p, b);
    for (std::size_t j = 0; j < p.size(); ++j) CHECK(rel_error(g[j], static_cast<double>(rg[j]), 1e-14) < 1e-12);
  }
}

TEST_CASE("analytic gradient matches finite differences on tiny nets") {
  // 20 random trials on nets of at most 200 parameters, h = 1e-5. The
  // differenced loss comes from the extended-precision reference so the
  // oracle's own rounding noise (about 1e-11 absolute in double) does not swamp
  // small gradient entries.
  double worst = 0.0, worst_double_fd = 0.0;
  Rng rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    const Activation act = trial % 2 == 0 ? Activation::Tanh : Activation::ReLU;
    const Network net = tiny_net(act, {6, 10, 6, 3});
    REQUIRE(net.parameter_count() <= 200);
    const ModelParams p = jitter(net.init_params(rng.next_u64()), 0.3, rng.split(trial));
    const Batch b = random_batch(6, 8, rng.split(100 + trial));
    const GradientVector g = net.batch_gradient(p, b);
    const auto coords = all_coords(p.size());
    const ReferenceNet ref(net.config());
    const auto fd = ReferenceNet::central(
        ReferenceNet::widen(p), [&](const std::vector<long double>& q) { return ref.loss(q, b); }, 1e-5L, coords);
    for (std::size_t j : coords) worst = std::max(worst, rel_error(g[j], fd[j]));
    worst_double_fd = std::max(worst_double_fd, max_rel_error(g, fd_gradient(net, p, b, 1e-5), coords));
  }
  MESSAGE("tiny-net max relative error " << worst << " (double-precision differences: " << worst_double_fd << ")");
  CHECK(worst < 1e-6);
  CHECK(worst_double_fd < 1e-4);
}

TEST_CASE("analytic gradient matches finite differences on the full network") {
  const auto t0 = std::chrono::steady_clock::now();
  const Network net;
  const ModelParams p = net.init_params(77);
  const Batch b = random_batch(1600, 16, Rng(78));
  const GradientVector g = net.batch_gradient(p, b);
  const auto coords = sample_coords(p.size(), 100, Rng(79));
  const GradientVector fd = fd_gradient(net, p, b, 1e-5, coords);
  const double worst = max_rel_error(g, fd, coords);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  MESSAGE("full-net max relative error " << worst << " in " << secs << " s");
  CHECK(worst < 1e-5);
}

TEST_CASE("Hessian-vector product matches finite differences of the gradient") {
  for (Activation act : {Activation::Tanh, Activation::ReLU}) {
    const Network net = tiny_net(act);
    const ModelParams p = jitter(net.init_params(31), 0.3, Rng(32));
    const Batch b = random_batch(6, 7, Rng(33));
    ParamVector v = jitter(net.zeros(), 1.0, Rng(34));
    const GradientVector hv = net.hvp(p, b, v);
    const double h = 1e-5;
    ModelParams up = p, down = p;
    up.axpy(h, v);
    down.axpy(-h, v);
    GradientVector fd = net.batch_gradient(up, b);
    fd -= net.batch_gradient(down, b);
    fd *= 1.0 / (2.0 * h);
    const double err = (hv.flat() - fd.flat()).norm() / fd.flat().norm();
    MESSAGE(to_token(act) << " HVP relative error " << err);
    CHECK(err < 1e-7);
  }
}

TEST_CASE("Hessian-vector product is symmetric") {
  const Network net = tiny_net(Activation::Tanh);
  const ModelParams p = jitter(net.init_params(1), 0.3, Rng(2));
  const Batch b = random_batch(6, 5, Rng(3));
  const ParamVector u = jitter(net.zeros(), 1.0, Rng(4)), w = jitter(net.zeros(), 1.0, Rng(5));
  CHECK(u.dot(net.hvp(p, b, w)) == doctest::Approx(w.dot(net.hvp(p, b, u))).epsilon(1e-12));
}

TEST_CASE("Adam update") {
  ModelParams p(std::vector<std::size_t>{3, 3});
  for (std::size_t j = 0; j < p.size(); ++j) p[j] = 0.1 * static_cast<double>(j);
  const ModelParams start = p;
  GradientVector g(p.layer_sizes());
  Rng rng(1);
  for (std::size_t j = 0; j < g.size(); ++j) {
    const double mag = std::pow(10.0, rng.uniform(-3.0, 2.0));
    g[j] = (j % 2 ? -1.0 : 1.0) * mag;
  }
  AdamState s(p);
  const double lr = 1e-3;
  adam_step(s, p, g, lr);
  for (std::size_t j = 0; j < p.size(); ++j) {
    const double step = start[j] - p[j];
    CHECK((step > 0) == (g[j] > 0));
    CHECK(std::abs(step) <= lr);
    CHECK(std::abs(step) >= lr * (1.0 - 1e-4));
  }

  ModelParams q = start;
  AdamState z(q);
  for (int i = 0; i < 100; ++i) adam_step(z, q, GradientVector(q.layer_sizes()), lr);
  CHECK(q == start);

  AdamState bad(ModelParams(std::vector<std::size_t>{2, 3}));
  CHECK_THROWS_AS(adam_step(bad, q, g, lr), ShapeError);

  auto run = [&] {
    ModelParams r = start;
    AdamState st(r);
    for (int i = 0; i < 10; ++i) adam_step(st, r, g, lr);
    return r;
  };
  CHECK(run() == run());
}

TEST_CASE("ParamVector arithmetic") {
  ParamVector a(std::vector<std::size_t>{2, 2}), b(std::vector<std::size_t>{2, 2});
  for (std::size_t j = 0; j < a.size(); ++j) {
    a[j] = static_cast<double>(j);
    b[j] = 1.0;
  }
  ParamVector c = a;
  c += b;
  c *= 2.0;
  for (std::size_t j = 0; j < a.size(); ++j) CHECK(c[j] == 2.0 * (static_cast<double>(j) + 1.0));
  c -= a;
  c.axpy(-1.0, a);
  for (std::size_t j = 0; j < a.size(); ++j) CHECK(c[j] == 2.0);
  CHECK(a.dot(b) == 15.0);
  ParamVector other(std::vector<std::size_t>{3, 2});
  CHECK_THROWS_AS(a += other, ShapeError);
}

TEST_CASE("checkpoint round-trips exactly") {
  const Network net;
  Checkpoint ck{net.config(), jitter(net.init_params(5), 1e-3, Rng(6)), {{"method", "MetaEMG"}}};
  const auto path = (std::filesystem::temp_directory_path() / "metaemg_test.ckpt").string();
  write_checkpoint(ck, path);
  const Checkpoint back = read_checkpoint(path);
  CHECK(back.params == ck.params);
  CHECK(back.network.layer_sizes == ck.network.layer_sizes);
  CHECK(back.network.activation == ck.network.activation);
  CHECK(back.metadata.at("method") == "MetaEMG");
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 8);
  CHECK_THROWS_AS(read_checkpoint(path), Error);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(read_checkpoint(path), Error);
}
