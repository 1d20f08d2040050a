#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "coupling_probe/train.hpp"
#include "test_util.hpp"

using namespace cprobe;

namespace {

ModelConfig probe_config(PosEncoding pe = PosEncoding::rope, bool final_ln = true) {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_ff = 16;
    c.d_vocab = 7;
    c.max_seq = 16;
    c.pos_encoding = pe;
    c.final_ln = final_ln;
    return c;
}

std::vector<Sequence> probe_batch(int vocab) {
    return {testutil::random_tokens(6, vocab, 1), testutil::random_tokens(4, vocab, 2), testutil::random_tokens(7, vocab, 3)};
}

// Relative Frobenius error of the backprop gradient per tensor, against central differences.
std::map<std::string, double> gradient_errors(const ModelConfig& c, const std::vector<BlockSkip>& skips = {}) {
    ModelWeights w = testutil::random_weights(c, 17);
    const auto batch = probe_batch(c.d_vocab);
    ModelWeights grad = zeros_like(w);
    batch_loss(batch, c, w, &grad, skips);

    std::map<std::string, Matrix> analytic;
    for_each_tensor(grad, [&](const std::string& name, auto& t) { analytic[name] = t; });
    std::map<std::string, double> errors;
    const double h = 1e-5;
    for_each_tensor(w, [&](const std::string& name, auto& t) {
        Matrix fd(t.rows(), t.cols());
        for (Eigen::Index i = 0; i < t.size(); ++i) {
            const double orig = t.data()[i];
            t.data()[i] = orig + h;
            const double up = batch_loss(batch, c, w, nullptr, skips);
            t.data()[i] = orig - h;
            const double down = batch_loss(batch, c, w, nullptr, skips);
            t.data()[i] = orig;
            fd.data()[i] = (up - down) / (2 * h);
        }
        const double denom = std::max(fd.norm(), 1e-12);
        errors[name] = (analytic[name] - fd).norm() / denom;
    });
    return errors;
}

}  // namespace

TEST(Tasks, CopyTaskShifted) {
    SyntheticTask t{CopyTask{4, 6}, 3, 20, 5};
    const auto d = generate_task(t);
    ASSERT_EQ(d.train.size(), 20u);
    ASSERT_EQ(d.val.size(), 5u);
    for (const auto& s : d.train) {
        ASSERT_EQ(s.size(), 9u);
        EXPECT_EQ(s[4], 6);
        for (int i = 0; i < 4; ++i) EXPECT_EQ(s[5 + i], s[i]);
    }
    EXPECT_EQ(t.vocab(), 7);
}

TEST(Tasks, ModularSum) {
    SyntheticTask t{ModularSum{5}, 1, 15, 5};
    const auto d = generate_task(t);
    for (const auto& s : d.train) EXPECT_EQ(s[4], (s[0] + s[2]) % 5);
}

TEST(Tasks, MarkovBigramFrequencies) {
    SyntheticTask t{MarkovChain{1, 4, 1.0}, 9, 400, 10, 64};
    const auto d = generate_task(t);
    Matrix counts = Matrix::Zero(4, 4);
    for (const auto& s : d.train)
        for (std::size_t i = 1; i < s.size(); ++i) counts(s[i - 1], s[i]) += 1.0;
    for (int a = 0; a < 4; ++a) {
        const double n = counts.row(a).sum();
        ASSERT_GT(n, 1000.0);
        for (int b = 0; b < 4; ++b) {
            const double p = d.transitions(a, b);
            // 5 binomial standard errors
            EXPECT_NEAR(counts(a, b) / n, p, 5.0 * std::sqrt(p * (1 - p) / n) + 1e-9);
        }
    }
}

TEST(Tasks, DeterministicAndDisjoint) {
    SyntheticTask t{MarkovChain{2, 3}, 42, 50, 20, 6};
    const auto a = generate_task(t);
    const auto b = generate_task(t);
    EXPECT_EQ(a.train, b.train);
    EXPECT_EQ(a.val, b.val);
    for (const auto& v : a.val) EXPECT_EQ(std::find(a.train.begin(), a.train.end(), v), a.train.end());
}

TEST(Tasks, Errors) {
    SyntheticTask t{CopyTask{}, 0, 0, 4};
    try {
        generate_task(t);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InvalidTask);
    }
    SyntheticTask tiny{ModularSum{2}, 0, 3, 3};
    EXPECT_THROW(generate_task(tiny), Error);
    EXPECT_THROW(parse_task_kind("fibonacci(3)"), Error);
    EXPECT_TRUE(std::holds_alternative<MarkovChain>(parse_task_kind("markov_chain(2, 16)")));
    EXPECT_EQ(std::get<CopyTask>(parse_task_kind("copy_task(5)")).span, 5);
}

TEST(Training, LossMatchesInferencePath) {
    for (bool fln : {true, false}) {
        const ModelConfig c = probe_config(PosEncoding::rope, fln);
        const ModelWeights w = testutil::random_weights(c, 4);
        const Sequence s = testutil::random_tokens(6, c.d_vocab, 8);
        const std::span<const TokenId> in(s.data(), s.size() - 1);
        const auto trace = forward_trace(in, c, w);
        const Matrix lg = logits(trace, c, w, c.n_layers, true);
        double expected = 0.0;
        for (Eigen::Index i = 0; i < lg.rows(); ++i) {
            const double lse = std::log((lg.row(i).array() - lg.row(i).maxCoeff()).exp().sum()) + lg.row(i).maxCoeff();
            expected += lse - lg(i, s[i + 1]);
        }
        expected /= static_cast<double>(lg.rows());
        EXPECT_NEAR(batch_loss({s}, c, w), expected, 1e-12);
    }
}

TEST(Training, GradientsMatchFiniteDifferences) {
    for (auto pe : {PosEncoding::rope, PosEncoding::sinusoidal, PosEncoding::none}) {
        for (bool fln : {true, false}) {
            for (const auto& [name, err] : gradient_errors(probe_config(pe, fln))) {
                EXPECT_LE(err, 1e-4) << name << " pos=" << to_string(pe) << " final_ln=" << fln;
            }
        }
    }
}

TEST(Training, GradientsWithBlockSkip) {
    const ModelConfig c = probe_config();
    std::vector<BlockSkip> skips{{{true, false}, 1.25}, {{false, true}, 1.25}, {{true, true}, 1.25}};
    for (const auto& [name, err] : gradient_errors(c, skips)) EXPECT_LE(err, 1e-4) << name;
}

TEST(Training, ZeroLearningRateKeepsWeights) {
    SyntheticTask task{MarkovChain{1, 7}, 1, 16, 4, 8};
    const auto data = generate_task(task);
    TrainRun run;
    run.config = probe_config();
    run.optimizer.lr = 0.0;
    run.steps = 5;
    run.batch_size = 3;
    run.checkpoint_steps = {0, 5};
    const auto r = train(run, task, data);
    EXPECT_TRUE(r.snapshots.at(0) == r.snapshots.at(5));
    EXPECT_TRUE(r.weights == init_weights(run.config, run.seed));
}

TEST(Training, Deterministic) {
    SyntheticTask task{MarkovChain{1, 7}, 1, 32, 8, 10};
    const auto data = generate_task(task);
    TrainRun run;
    run.config = probe_config();
    run.optimizer.lr = 1e-2;
    run.steps = 20;
    run.batch_size = 4;
    run.eval_every = 5;
    run.block_skip = 0.2;
    run.checkpoint_steps = {0, 10, 20};
    const auto a = train(run, task, data);
    const auto b = train(run, task, data);
    ASSERT_EQ(a.loss.size(), b.loss.size());
    for (std::size_t i = 0; i < a.loss.size(); ++i) {
        EXPECT_EQ(a.loss[i].train_loss, b.loss[i].train_loss);
        EXPECT_EQ(a.loss[i].val_loss, b.loss[i].val_loss);
    }
    EXPECT_TRUE(a.weights == b.weights);
    EXPECT_LT(a.loss.back().val_loss, a.loss.front().val_loss);
}

TEST(Training, DivergenceAndConfigErrors) {
    SyntheticTask task{MarkovChain{1, 7}, 1, 8, 2, 6};
    const auto data = generate_task(task);
    TrainRun run;
    run.config = probe_config();
    run.optimizer.lr = 1e300;
    run.steps = 10;
    try {
        train(run, task, data);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::TrainingDiverged);
    }
    run.optimizer.lr = 1e-3;
    run.checkpoint_steps = {5, 2};
    EXPECT_THROW(train(run, task, data), Error);
}

TEST(Training, DefaultCheckpointGrid) {
    EXPECT_EQ(default_checkpoint_steps(300, 128), (std::vector<int>{0, 1, 2, 4, 8, 16, 32, 64, 128, 256, 300}));
}
