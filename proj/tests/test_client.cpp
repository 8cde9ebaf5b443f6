#include <doctest.h>

#include <algorithm>
#include <random>

#include "fedsim/client.hpp"
#include "fedsim/error.hpp"
#include "oracles.hpp"

using namespace fedsim;

namespace {

struct Fixture {
  ModelSpec spec;
  ParamVector w0;
  Batch shard;

  Fixture(std::size_t rows = 50, double dropout = 0.2) {
    spec.input_dim = 4;
    spec.hidden_dims = {8, 4};
    spec.dropout_rate = dropout;
    w0 = init_params(spec, 3);
    std::mt19937_64 rng(17);
    shard = oracle::random_batch(rng, rows, 4);
  }
};

LocalTrainConfig config(std::size_t epochs, std::size_t batch, double speed = 10.0) {
  LocalTrainConfig c;
  c.epochs = epochs;
  c.batch_size = batch;
  c.lr = 0.1;
  c.seed = 99;
  c.speed = speed;
  c.client_id = 2;
  c.round = 4;
  return c;
}

// Stores blobs with one byte flipped.
class CorruptingStore final : public CheckpointStore {
 public:
  void put(const std::string& name, std::vector<std::byte> blob) override {
    blob[blob.size() / 2] ^= std::byte{0x10};
    inner_.put(name, std::move(blob));
  }
  std::optional<std::vector<std::byte>> get(const std::string& name) const override { return inner_.get(name); }
  std::optional<std::string> latest(std::int64_t scope) const override { return inner_.latest(scope); }

 private:
  MemoryCheckpointStore inner_;
};

}  // namespace

TEST_CASE("batch size assignment") {
  ClientProfile p;
  p.capacity = 1.0;
  CHECK(assign_batch_size(p, 64, 1.0, 16, 1024) == 64);
  p.capacity = 3.0;  // target 192: equidistant from 128 and 256
  CHECK(assign_batch_size(p, 64, 1.0, 16, 1024) == 128);
  p.capacity = 3.1;
  CHECK(assign_batch_size(p, 64, 1.0, 16, 1024) == 256);
  p.capacity = 0.1;
  CHECK(assign_batch_size(p, 64, 1.0, 16, 1024) == 16);
  p.capacity = 100.0;
  CHECK(assign_batch_size(p, 64, 1.0, 16, 1024) == 1024);
  p.capacity = 2.0;
  CHECK(assign_batch_size(p, 64, 2.0, 16, 1024) == 64);
  CHECK_THROWS_AS(assign_batch_size(p, 48, 1.0, 16, 1024), Error);
  CHECK_THROWS_AS(assign_batch_size(p, 64, 1.0, 128, 1024), Error);
  CHECK_THROWS_AS(assign_batch_size(p, 64, 0.0, 16, 1024), Error);
}

TEST_CASE("profile validation") {
  ClientProfile p;
  CHECK_NOTHROW(p.validate());
  p.speed = 0.0;
  CHECK_THROWS_AS(p.validate(), Error);
  p = ClientProfile{};
  p.up_latency_s = -1.0;
  CHECK_THROWS_AS(p.validate(), Error);
  p = ClientProfile{};
  p.dropout_rate = 1.5;
  CHECK_THROWS_AS(p.validate(), Error);
}

TEST_CASE("time and step laws") {
  CHECK(pass_train_time(5, 160, 80.0) == 10.0);
  CHECK(pass_steps(5, 100, 32) == 20);
  CHECK(pass_steps(1, 64, 64) == 1);
  CHECK(pass_steps(3, 65, 64) == 6);
}

TEST_CASE("epoch order is a seeded permutation") {
  const auto a = epoch_order(1, 0, 100);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < 100; ++i) CHECK(sorted[i] == i);
  CHECK(epoch_order(1, 0, 100) == a);
  CHECK(epoch_order(1, 1, 100) != a);
  CHECK(epoch_order(2, 0, 100) != a);
}

TEST_CASE("local training replays as plain minibatch SGD") {
  const Fixture f;
  const auto cfg = config(3, 16);
  const TrainOutcome out = train_local(f.spec, f.w0, f.shard, cfg);
  REQUIRE(out.update.has_value());

  ParamVector w = f.w0;
  std::size_t steps = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto order = epoch_order(cfg.seed, e, f.shard.rows());
    for (std::size_t b = 0; b * cfg.batch_size < f.shard.rows(); ++b) {
      const std::size_t begin = b * cfg.batch_size, end = std::min(f.shard.rows(), begin + cfg.batch_size);
      Batch mb;
      mb.features.resize(static_cast<Eigen::Index>(end - begin), 4);
      for (std::size_t r = begin; r < end; ++r) {
        mb.features.row(static_cast<Eigen::Index>(r - begin)) = f.shard.features.row(static_cast<Eigen::Index>(order[r]));
        mb.labels.push_back(f.shard.labels[order[r]]);
      }
      w = sgd_step(w, loss_and_grad(f.spec, w, mb, step_dropout_seed(cfg.seed, e, b)).grad, cfg.lr);
      ++steps;
    }
  }
  CHECK(out.update->params == w);
  CHECK(out.update->sgd_steps == steps);
  CHECK(steps == pass_steps(cfg.epochs, f.shard.rows(), cfg.batch_size));
  CHECK(out.steps_executed == steps);
  CHECK(out.update->num_samples == 50);
  CHECK(out.update->train_time_s == pass_train_time(3, 50, 10.0));
  CHECK(out.duration_s == out.update->train_time_s);
  CHECK(out.update->client_id == 2);
  CHECK(out.update->round == 4);
  CHECK_FALSE(out.failure.has_value());
}

TEST_CASE("one epoch with one full batch is a single gradient step") {
  const Fixture f(20, 0.0);
  const auto cfg = config(1, 64);
  const auto out = train_local(f.spec, f.w0, f.shard, cfg);
  Batch mb;
  const auto order = epoch_order(cfg.seed, 0, 20);
  mb.features.resize(20, 4);
  for (std::size_t r = 0; r < 20; ++r) {
    mb.features.row(static_cast<Eigen::Index>(r)) = f.shard.features.row(static_cast<Eigen::Index>(order[r]));
    mb.labels.push_back(f.shard.labels[order[r]]);
  }
  CHECK(out.update->params == sgd_step(f.w0, loss_and_grad(f.spec, f.w0, mb, 0).grad, cfg.lr));
  CHECK(out.update->sgd_steps == 1);
}

TEST_CASE("crash without a checkpoint loses the pass") {
  const Fixture f;
  const auto out = train_local(f.spec, f.w0, f.shard, config(3, 16), 7.3);
  CHECK_FALSE(out.update.has_value());
  REQUIRE(out.failure.has_value());
  CHECK_FALSE(out.failure->restored);
  CHECK(out.duration_s == 7.3);
}

TEST_CASE("crash before the first checkpoint loses the pass") {
  const Fixture f;
  MemoryCheckpointStore store;
  const CheckpointSettings ck{5.0, 1.0, &store};
  const auto out = train_local(f.spec, f.w0, f.shard, config(3, 16), 2.0, &ck);
  CHECK_FALSE(out.update.has_value());
  CHECK_FALSE(out.failure->restored);
}

TEST_CASE("restore from checkpoint reproduces the uninterrupted pass bitwise") {
  const Fixture f;
  const auto cfg = config(3, 16);  // 12 steps over 15 s
  const auto clean = train_local(f.spec, f.w0, f.shard, cfg);
  for (double fail_at : {1.7, 5.05, 9.9, 14.99}) {
    MemoryCheckpointStore store;
    const CheckpointSettings ck{1.5, 0.75, &store};
    const auto out = train_local(f.spec, f.w0, f.shard, cfg, fail_at, &ck);
    REQUIRE(out.update.has_value());
    REQUIRE(out.failure->restored);
    CHECK(out.update->params == clean.update->params);
    CHECK(out.update->sgd_steps == clean.update->sgd_steps);
    CHECK(out.steps_executed >= clean.steps_executed);
    CHECK(out.failure->resumed_from_s <= fail_at);
    CHECK(out.duration_s ==
          doctest::Approx(15.0 + (fail_at - out.failure->resumed_from_s) + 0.75).epsilon(1e-12));
    CHECK(out.checkpoints_saved > 0);
  }
}

TEST_CASE("corrupted checkpoint loses the pass") {
  const Fixture f;
  CorruptingStore store;
  const CheckpointSettings ck{1.5, 0.75, &store};
  const auto out = train_local(f.spec, f.w0, f.shard, config(3, 16), 9.9, &ck);
  CHECK_FALSE(out.update.has_value());
  CHECK_FALSE(out.failure->restored);
}

TEST_CASE("pass plan agrees with training") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t rows = 10 + rng() % 60, batch = 1 + rng() % 20, epochs = 1 + rng() % 3;
    const double speed = 5.0 + 30.0 * u(rng);
    const Fixture f(rows, 0.1);
    auto cfg = config(epochs, batch, speed);
    const double T = pass_train_time(epochs, rows, speed);
    const std::optional<double> fail = trial % 4 ? std::optional(u(rng) * T) : std::nullopt;
    const double interval = trial % 3 ? T * (0.05 + 0.3 * u(rng)) : 0.0;
    MemoryCheckpointStore store;
    const CheckpointSettings ck{interval, 0.5, &store};
    const auto out = train_local(f.spec, f.w0, f.shard, cfg, fail, interval > 0 ? &ck : nullptr);
    const PassPlan plan = plan_pass(epochs, rows, batch, speed, fail, interval, 0.5);
    CHECK(plan.duration_s == out.duration_s);
    CHECK(plan.lost == !out.update.has_value());
    REQUIRE(plan.failure.has_value() == out.failure.has_value());
    if (plan.failure) {
      CHECK(plan.failure->restored == out.failure->restored);
      CHECK(plan.failure->resumed_from_s == out.failure->resumed_from_s);
    }
  }
  CHECK_THROWS_AS(plan_pass(1, 0, 1, 1.0, std::nullopt, 0.0, 0.0), Error);
}

TEST_CASE("training input validation") {
  const Fixture f;
  CHECK_THROWS_AS(train_local(f.spec, f.w0, f.shard, config(1, 0)), Error);
  CHECK_THROWS_AS(train_local(f.spec, f.w0, f.shard, config(1, 8, 0.0)), Error);
  ParamVector wrong = f.w0;
  wrong.values.pop_back();
  CHECK_THROWS_AS(train_local(f.spec, wrong, f.shard, config(1, 8)), Error);
}
