#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "mult/checkpoint.hpp"
#include "mult/error.hpp"
#include "mult/train.hpp"
#include "support.hpp"

using namespace mult;

namespace {

MulTConfig tiny(const std::string& variant = "full") {
  MulTConfig cfg;
  cfg.d = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.input_dims = {8, 6, 6};
  parse_variant(variant, cfg);
  return cfg;
}

Dataset data(std::size_t n, std::uint64_t seed = 7) {
  SyntheticTaskSpec spec;
  spec.seed = seed;
  return generate_synthetic(spec, n);
}

std::vector<Tensor> values_of(SequenceModel& m) {
  std::vector<Tensor> out;
  for (Parameter* p : m.parameters()) out.push_back(Tensor(p->tensor.shape(), p->tensor.values()));
  return out;
}

}  // namespace

TEST_CASE("one Adam step on a scalar") {
  Parameter p("p", Tensor::vector({0.5}));
  p.tensor.grad()[0] = 1.0;
  AdamState st({&p}, 0.1);
  adam_step({&p}, st);
  // m_hat = 1, v_hat = 1 after bias correction.
  CHECK(p.tensor[0] == doctest::Approx(0.5 - 0.1 / (1.0 + 1e-8)).epsilon(1e-15));
  CHECK(st.step == 1);
  // Second step with g = -2: m = 0.9*0.1 + 0.1*(-2) scaled etc.
  p.tensor.grad()[0] = -2.0;
  const double m = 0.9 * 0.1 + 0.1 * -2.0, v = 0.999 * 0.001 + 0.001 * 4.0;
  const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
  const double expect = p.tensor[0] - 0.1 * mh / (std::sqrt(vh) + 1e-8);
  adam_step({&p}, st);
  CHECK(p.tensor[0] == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("Adam leaves parameters alone under zero gradients and is deterministic") {
  Parameter a("a", Tensor::vector({1.0, -2.0})), b("b", Tensor::vector({1.0, -2.0}));
  a.tensor.zero_grad();
  AdamState st({&a}, 0.01);
  adam_step({&a}, st);
  CHECK(a.tensor == Tensor::vector({1.0, -2.0}));
  CHECK(st.m[0] == std::vector<double>{0.0, 0.0});
  AdamState sa({&a}, 0.01), sb({&b}, 0.01);
  for (int i = 0; i < 5; ++i) {
    a.tensor.grad()[0] = b.tensor.grad()[0] = 0.3 * i;
    a.tensor.grad()[1] = b.tensor.grad()[1] = -0.1;
    adam_step({&a}, sa);
    adam_step({&b}, sb);
  }
  CHECK(a.tensor == b.tensor);
}

TEST_CASE("plateau schedule") {
  PlateauSchedule s{0.1, 2, 1e-4};
  double lr = 1e-2;
  CHECK_FALSE(s.observe(1.0, lr));
  CHECK_FALSE(s.observe(1.1, lr));
  CHECK(s.observe(1.2, lr));
  CHECK(lr == doctest::Approx(1e-3));
  CHECK_FALSE(s.observe(0.5, lr));
  s.observe(0.6, lr);
  s.observe(0.6, lr);
  CHECK(lr == doctest::Approx(1e-4));
  s.observe(0.7, lr);
  s.observe(0.7, lr);
  CHECK(lr == doctest::Approx(1e-4));
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.lr_factor = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.val_fraction = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("task losses") {
  Tape tape;
  Label l;
  l.score = 2.0;
  const Var p = tape.constant(Tensor::matrix(1, 1, {0.5}));
  CHECK(task_loss(tape, p, l, TaskKind::Sentiment, LossKind::L1).value()[0] == 1.5);
  CHECK(task_loss(tape, p, l, TaskKind::Sentiment, LossKind::L2).value()[0] == 2.25);
  l.emotions = {true, false, false, false};
  const Var zero = tape.constant(Tensor({1, 8}));
  CHECK(task_loss(tape, zero, l, TaskKind::Emotion, LossKind::L1).value()[0] == doctest::Approx(std::log(2.0)));
}

TEST_CASE("zero epochs leave the model unchanged") {
  MulTModel model(tiny(), 1);
  const auto before = values_of(model);
  TrainConfig cfg;
  cfg.epochs = 0;
  const TrainResult r = train(model, data(20), cfg);
  CHECK(r.history.empty());
  CHECK(values_of(model) == before);
}

TEST_CASE("a zero learning rate keeps the validation loss fixed") {
  MulTModel model(tiny(), 2);
  const Dataset ds = data(24);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.learning_rate = 0.0;
  cfg.batch_size = 8;
  const TrainResult r = train(model, ds, ds, cfg);
  REQUIRE(r.history.size() == 3);
  CHECK(r.history[1].val_loss == r.history[0].val_loss);
  CHECK(r.history[2].val_loss == r.history[0].val_loss);
}

TEST_CASE("training run invariants") {
  MulTConfig mcfg = tiny();
  mcfg.block_dropout = 0.1;
  MulTModel model(mcfg, 3);
  const Dataset ds = data(200);
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 16;
  cfg.learning_rate = 2e-3;
  cfg.clip_norm = 0.5;
  cfg.lr_patience = 1;
  std::vector<StepInfo> steps;
  TrainHooks hooks;
  hooks.on_step = [&](const StepInfo& s) { steps.push_back(s); };
  const TrainResult r = train(model, ds, cfg, &hooks);
  REQUIRE(r.history.size() == 20);
  CHECK(r.steps == steps.size());
  for (const auto& s : steps) CHECK(s.clipped_norm <= cfg.clip_norm + 1e-9);
  for (std::size_t i = 1; i < steps.size(); ++i) CHECK(steps[i].lr <= steps[i - 1].lr);
  for (const auto& e : r.history) CHECK(r.best_val_loss <= e.val_loss);
  CHECK(r.history[r.best_epoch - 1].val_loss == r.best_val_loss);
  CHECK(r.history.back().train_loss < r.history.front().train_loss);
  // The restored parameters are the best epoch's.
  auto [tr, val] = split_dataset(ds, 1.0 - cfg.val_fraction, cfg.seed);
  CHECK(evaluate_loss(model, val, cfg.loss) == doctest::Approx(r.best_val_loss).epsilon(1e-12));
}

TEST_CASE("early stop hook") {
  MulTModel model(tiny("unimodal_L"), 4);
  TrainConfig cfg;
  cfg.epochs = 10;
  TrainHooks hooks;
  hooks.stop_after = [](const EpochRecord& e) { return e.epoch == 2; };
  CHECK(train(model, data(30), cfg, &hooks).history.size() == 2);
}

TEST_CASE("non-finite values abort with the parameter name") {
  MulTModel model(tiny(), 5);
  for (Parameter* p : model.parameters())
    if (p->name == "output.fc2.W") p->tensor[0] = std::numeric_limits<double>::quiet_NaN();
  TrainConfig cfg;
  cfg.epochs = 1;
  try {
    train(model, data(20), cfg);
    FAIL("expected a training error");
  } catch (const TrainingError& e) {
    const std::string msg = e.what();
    bool names_parameter = false;
    for (const Parameter* p : model.parameters()) names_parameter = names_parameter || msg.find(p->name) != std::string::npos;
    INFO(msg);
    CHECK(names_parameter);
    CHECK(msg.find("non-finite") != std::string::npos);
  }
}

TEST_CASE("evaluation is deterministic and survives a checkpoint round trip") {
  MulTConfig mcfg = tiny();
  mcfg.embed_dropout = 0.2;
  MulTModel model(mcfg, 6);
  TrainConfig cfg;
  cfg.epochs = 2;
  const Dataset ds = data(40);
  train(model, ds, cfg);
  const MetricReport a = evaluate(model, ds), b = evaluate(model, ds);
  CHECK(a.entries() == b.entries());
  const auto path = (std::filesystem::temp_directory_path() / "mult_test_eval.ckpt").string();
  save_checkpoint(model, 6, path);
  LoadedCheckpoint loaded = load_checkpoint(path);
  CHECK(evaluate(*loaded.model, ds).entries() == a.entries());
  std::filesystem::remove(path);
}

TEST_CASE("history csv") {
  EpochRecord e;
  e.epoch = 1;
  e.train_loss = 0.1;
  e.val_loss = 1.0 / 3.0;
  e.lr = 1e-3;
  e.val_metrics.sentiment.acc2 = 0.5;
  const auto path = (std::filesystem::temp_directory_path() / "mult_test_history.csv").string();
  write_history_csv({e}, TaskKind::Sentiment, path);
  std::ifstream f(path);
  std::string header, row;
  std::getline(f, header);
  std::getline(f, row);
  CHECK(header == "epoch,train_loss,val_loss,lr,val_acc7,val_acc2,val_f1,val_mae,val_corr");
  CHECK(row.rfind("1,0.10000000000000001,0.33333333333333331,0.001", 0) == 0);
  std::filesystem::remove(path);
}

TEST_CASE("a one-sample validation split is rejected") {
  MulTModel model(tiny(), 7);
  TrainConfig cfg;
  cfg.epochs = 1;
  const Dataset ds = data(12);
  CHECK_THROWS_AS(train(model, subset(ds, {0, 1, 2}), subset(ds, {3}), cfg), ConfigError);
  CHECK_NOTHROW(train(model, subset(ds, {0, 1, 2}), subset(ds, {3, 4}), cfg));
}
