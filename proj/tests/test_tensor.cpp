#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "rcc/grad_check.hpp"
#include "rcc/ops.hpp"
#include "rcc/tensor.hpp"
#include "test_util.hpp"

using namespace rcc;
using testutil::random_tensor;

namespace {

// Independent triple-loop matrix product, the oracle for matmul.
std::vector<double> matmul_oracle(const std::vector<double>& a,
                                  const std::vector<double>& b, int m, int k, int n) {
    std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            for (int l = 0; l < k; ++l)
                c[i * n + j] += a[i * k + l] * b[l * n + j];
    return c;
}

// Independent per-position log-softmax loss, the oracle for the masked loss.
double xent_oracle(const std::vector<double>& logits, const TokenSeq& targets,
                   const std::vector<int>& mask, int v) {
    double total = 0.0;
    int count = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (!mask[i]) continue;
        double mx = logits[i * v];
        for (int j = 1; j < v; ++j) mx = std::max(mx, logits[i * v + j]);
        double z = 0.0;
        for (int j = 0; j < v; ++j) z += std::exp(logits[i * v + j] - mx);
        total += -(logits[i * v + targets[i]] - mx - std::log(z));
        ++count;
    }
    return total / count;
}

// FD harness for a single primitive: loss = sum(op(inputs) .* weights).
double primitive_max_rel_err(
    std::vector<Parameter<double>>& params,
    const std::function<Tensor<double>()>& loss_fn) {
    return grad_check(loss_fn, params, 1e-5).max_rel_err;
}

}  // namespace

TEST(Matmul, IdentityCase) {
    auto a = Tensor<double>::from_data({2, 2}, {1, 0, 0, 1});
    auto b = Tensor<double>::from_data({2, 1}, {3, 4});
    auto c = matmul(a, b);
    EXPECT_EQ(c.shape(), (std::vector<int>{2, 1}));
    EXPECT_DOUBLE_EQ(c.data()[0], 3.0);
    EXPECT_DOUBLE_EQ(c.data()[1], 4.0);
}

TEST(Matmul, ZeroCase) {
    auto a = Tensor<double>::from_data({1, 1}, {2});
    auto b = Tensor<double>::from_data({1, 1}, {0});
    EXPECT_DOUBLE_EQ(matmul(a, b).data()[0], 0.0);
}

TEST(Matmul, TripleLoopOracle) {
    Rng rng(7);
    auto a = random_tensor<double>({3, 4}, rng);
    auto b = random_tensor<double>({4, 2}, rng);
    auto c = matmul(a, b);
    auto expect = matmul_oracle(a.value(), b.value(), 3, 4, 2);
    for (std::size_t i = 0; i < expect.size(); ++i)
        EXPECT_NEAR(c.data()[i], expect[i], 1e-12);
}

TEST(Matmul, ShapeMismatchThrows) {
    auto a = Tensor<double>::zeros({2, 3});
    auto b = Tensor<double>::zeros({2, 3});
    EXPECT_THROW(matmul(a, b), ShapeError);
}

TEST(Add, ShapeMismatchThrows) {
    EXPECT_THROW(add(Tensor<double>::zeros({2, 3}), Tensor<double>::zeros({3, 2})),
                 ShapeError);
}

TEST(LayerNorm, ConstantRowMapsToBias) {
    auto x = Tensor<double>::from_data({1, 4}, {5, 5, 5, 5});
    auto gain = Tensor<double>::from_data({4}, {1, 1, 1, 1});
    auto bias = Tensor<double>::from_data({4}, {0, 0, 0, 0});
    auto y = layernorm(x, gain, bias, 1e-5);
    for (int j = 0; j < 4; ++j) EXPECT_NEAR(y.data()[j], 0.0, 1e-12);
}

TEST(LayerNorm, AlreadyNormalizedRow) {
    auto x = Tensor<double>::from_data({1, 2}, {1, -1});
    auto gain = Tensor<double>::from_data({2}, {1, 1});
    auto bias = Tensor<double>::from_data({2}, {0, 0});
    auto y = layernorm(x, gain, bias, 1e-12);
    EXPECT_NEAR(y.data()[0], 1.0, 1e-9);
    EXPECT_NEAR(y.data()[1], -1.0, 1e-9);
}

TEST(LayerNorm, RandomRowStatistics) {
    Rng rng(3);
    auto x = random_tensor<double>({1, 64}, rng, 2.5);
    auto gain = Tensor<double>::from_data({64}, std::vector<double>(64, 1.0));
    auto bias = Tensor<double>::from_data({64}, std::vector<double>(64, 0.0));
    auto y = layernorm(x, gain, bias, 1e-12);
    double mean = 0.0;
    for (int j = 0; j < 64; ++j) mean += y.data()[j];
    mean /= 64;
    double var = 0.0;
    for (int j = 0; j < 64; ++j) var += (y.data()[j] - mean) * (y.data()[j] - mean);
    var /= 64;
    EXPECT_LT(std::abs(mean), 1e-9);
    EXPECT_NEAR(var, 1.0, 1e-6);
}

TEST(LayerNorm, NonPositiveEpsThrows) {
    auto x = Tensor<double>::zeros({1, 4});
    auto g = Tensor<double>::zeros({4});
    auto b = Tensor<double>::zeros({4});
    EXPECT_THROW(layernorm(x, g, b, 0.0), ParamError);
    EXPECT_THROW(layernorm(x, g, b, -1.0), ParamError);
}

TEST(CrossEntropy, UniformLogitsGiveLogVocab) {
    const int v = 17;
    auto logits = Tensor<double>::from_data({1, v}, std::vector<double>(v, 0.37));
    auto loss = softmax_cross_entropy(logits, {4}, {1});
    EXPECT_NEAR(loss.item(), std::log(static_cast<double>(v)), 1e-12);
}

TEST(CrossEntropy, AllZeroMaskThrows) {
    auto logits = Tensor<double>::zeros({3, 5});
    EXPECT_THROW(softmax_cross_entropy(logits, {0, 1, 2}, {0, 0, 0}), EmptyLossError);
}

TEST(CrossEntropy, MatchesPerPositionOracle) {
    Rng rng(11);
    const int p = 9, v = 23;
    auto logits = random_tensor<double>({p, v}, rng, 3.0);
    TokenSeq targets = testutil::random_tokens(p, v, rng);
    std::vector<int> mask = {1, 0, 1, 1, 0, 1, 0, 0, 1};
    auto loss = softmax_cross_entropy(logits, targets, mask);
    EXPECT_NEAR(loss.item(), xent_oracle(logits.value(), targets, mask, v), 1e-9);
}

TEST(CrossEntropy, MaskedPositionsHaveZeroGradient) {
    Rng rng(13);
    auto logits = random_tensor<double>({4, 6}, rng, 1.0, /*requires_grad=*/true);
    std::vector<int> mask = {1, 0, 1, 0};
    auto loss = softmax_cross_entropy(logits, {0, 1, 2, 3}, mask);
    loss.backward();
    const auto& g = logits.grad();
    for (int i = 0; i < 4; ++i) {
        double row_abs = 0.0;
        for (int j = 0; j < 6; ++j) row_abs += std::abs(g[i * 6 + j]);
        if (mask[i])
            EXPECT_GT(row_abs, 0.0);
        else
            EXPECT_DOUBLE_EQ(row_abs, 0.0);
    }
}

TEST(CrossEntropy, ScalingMaskedOutLogitsLeavesLossUnchanged) {
    Rng rng(17);
    auto base = random_tensor<double>({3, 8}, rng, 1.0);
    std::vector<int> mask = {1, 0, 1};
    TokenSeq targets = {1, 2, 3};
    const double before = softmax_cross_entropy(base, targets, mask).item();
    auto scaled = Tensor<double>::from_data({3, 8}, base.value());
    for (int j = 0; j < 8; ++j) scaled.data()[8 + j] *= 1234.5;
    const double after = softmax_cross_entropy(scaled, targets, mask).item();
    EXPECT_DOUBLE_EQ(before, after);
}

TEST(GradCheck, QuadraticFunction) {
    std::vector<Parameter<double>> params;
    params.push_back({"theta", Tensor<double>::from_data({1}, {3.0}, true), true});
    auto loss_fn = [&]() {
        return sum(mul(params[0].tensor, params[0].tensor));
    };
    auto report = grad_check(loss_fn, params, 1e-5);
    EXPECT_LT(report.max_rel_err, 1e-9);
    EXPECT_NEAR(params[0].tensor.grad()[0], 6.0, 1e-12);
}

TEST(GradCheck, ConstantFunction) {
    std::vector<Parameter<double>> params;
    params.push_back({"theta", Tensor<double>::from_data({2}, {1.0, -2.0}, true), true});
    auto constant = Tensor<double>::scalar(5.0);
    auto loss_fn = [&]() { return add(constant, Tensor<double>::scalar(0.0)); };
    auto report = grad_check(loss_fn, params, 1e-5);
    EXPECT_DOUBLE_EQ(report.max_rel_err, 0.0);
}

TEST(GradCheck, RejectsBadStepSize) {
    std::vector<Parameter<double>> params;
    auto loss_fn = []() { return Tensor<double>::scalar(0.0); };
    EXPECT_THROW(grad_check(loss_fn, params, 1e-2), ParamError);
    EXPECT_THROW(grad_check(loss_fn, params, 1e-9), ParamError);
}

TEST(GradCheck, SharedSubexpressionAccumulates) {
    // y = x*x + x  =>  dy/dx = 2x + 1
    std::vector<Parameter<double>> params;
    params.push_back({"x", Tensor<double>::from_data({1}, {1.7}, true), true});
    auto loss_fn = [&]() {
        auto& x = params[0].tensor;
        return sum(add(mul(x, x), x));
    };
    auto report = grad_check(loss_fn, params, 1e-5);
    EXPECT_LT(report.max_rel_err, 1e-9);
    EXPECT_NEAR(params[0].tensor.grad()[0], 2 * 1.7 + 1, 1e-12);
}

// Every differentiable primitive matches central differences in 64-bit mode.
TEST(PrimitiveGradients, AllWithinTolerance) {
    Rng rng(23);
    const double tol = 1e-5;

    {  // add + mul + scale + gelu chained
        std::vector<Parameter<double>> params;
        params.push_back({"a", random_tensor<double>({3, 5}, rng, 1.0, true), true});
        params.push_back({"b", random_tensor<double>({3, 5}, rng, 1.0, true), true});
        auto w = random_tensor<double>({3, 5}, rng);
        auto fn = [&]() {
            auto y = gelu(scale(add(params[0].tensor, mul(params[0].tensor, params[1].tensor)),
                                0.7));
            return sum(mul(y, w));
        };
        EXPECT_LT(primitive_max_rel_err(params, fn), tol) << "elementwise chain";
    }
    {  // matmul + add_bias
        std::vector<Parameter<double>> params;
        params.push_back({"x", random_tensor<double>({4, 3}, rng, 1.0, true), true});
        params.push_back({"w", random_tensor<double>({3, 6}, rng, 1.0, true), true});
        params.push_back({"b", random_tensor<double>({6}, rng, 1.0, true), true});
        auto w = random_tensor<double>({4, 6}, rng);
        auto fn = [&]() {
            return sum(mul(add_bias(matmul(params[0].tensor, params[1].tensor),
                                    params[2].tensor),
                           w));
        };
        EXPECT_LT(primitive_max_rel_err(params, fn), tol) << "matmul/add_bias";
    }
    {  // layernorm
        std::vector<Parameter<double>> params;
        params.push_back({"x", random_tensor<double>({3, 8}, rng, 2.0, true), true});
        params.push_back({"g", random_tensor<double>({8}, rng, 0.5, true), true});
        params.push_back({"b", random_tensor<double>({8}, rng, 0.5, true), true});
        auto w = random_tensor<double>({3, 8}, rng);
        auto fn = [&]() {
            return sum(mul(layernorm(params[0].tensor, params[1].tensor, params[2].tensor,
                                     1e-5),
                           w));
        };
        EXPECT_LT(primitive_max_rel_err(params, fn), tol) << "layernorm";
    }
    {  // embedding with repeated ids
        std::vector<Parameter<double>> params;
        params.push_back({"table", random_tensor<double>({7, 4}, rng, 1.0, true), true});
        TokenSeq ids = {1, 3, 1, 6, 1};
        auto w = random_tensor<double>({5, 4}, rng);
        auto fn = [&]() { return sum(mul(embedding(params[0].tensor, ids), w)); };
        EXPECT_LT(primitive_max_rel_err(params, fn), tol) << "embedding";
    }
    {  // gather / slice / concat / add_rows_at
        std::vector<Parameter<double>> params;
        params.push_back({"x", random_tensor<double>({6, 4}, rng, 1.0, true), true});
        params.push_back({"y", random_tensor<double>({2, 4}, rng, 1.0, true), true});
        auto w = random_tensor<double>({5, 4}, rng);
        auto fn = [&]() {
            auto g = gather_rows(params[0].tensor, {5, 0, 3, 3});
            auto s = slice_rows(params[0].tensor, 2, 3);
            auto cat = concat_rows<double>({g, s});
            auto out = add_rows_at(cat, params[1].tensor, 1);
            return sum(mul(out, w));
        };
        EXPECT_LT(primitive_max_rel_err(params, fn), tol) << "sequence axis ops";
    }
    {  // attention with causal mask, two heads
        std::vector<Parameter<double>> params;
        params.push_back({"q", random_tensor<double>({5, 8}, rng, 1.0, true), true});
        params.push_back({"k", random_tensor<double>({5, 8}, rng, 1.0, true), true});
        params.push_back({"v", random_tensor<double>({5, 8}, rng, 1.0, true), true});
        auto mask = causal_mask<double>(5);
        auto w = random_tensor<double>({5, 8}, rng);
        auto fn = [&]() {
            return sum(mul(
                attention(params[0].tensor, params[1].tensor, params[2].tensor, mask, 2),
                w));
        };
        EXPECT_LT(primitive_max_rel_err(params, fn), tol) << "attention";
    }
    {  // rotary application
        std::vector<Parameter<double>> params;
        params.push_back({"x", random_tensor<double>({4, 8}, rng, 1.0, true), true});
        std::vector<int> positions = {0, 5, 2, 9};
        auto w = random_tensor<double>({4, 8}, rng);
        auto fn = [&]() { return sum(mul(rope(params[0].tensor, positions, 2), w)); };
        EXPECT_LT(primitive_max_rel_err(params, fn), tol) << "rope";
    }
    {  // softmax cross entropy end to end
        std::vector<Parameter<double>> params;
        params.push_back({"logits", random_tensor<double>({4, 9}, rng, 2.0, true), true});
        TokenSeq targets = {2, 8, 0, 5};
        std::vector<int> mask = {1, 0, 1, 1};
        auto fn = [&]() { return softmax_cross_entropy(params[0].tensor, targets, mask); };
        EXPECT_LT(primitive_max_rel_err(params, fn), tol) << "softmax_cross_entropy";
    }
}

TEST(Determinism, RepeatedForwardIsBitIdentical) {
    auto run = []() {
        Rng rng(99);
        auto x = random_tensor<double>({6, 8}, rng);
        auto w = random_tensor<double>({8, 8}, rng);
        auto g = Tensor<double>::from_data({8}, std::vector<double>(8, 1.0));
        auto b = Tensor<double>::from_data({8}, std::vector<double>(8, 0.0));
        auto y = layernorm(matmul(gelu(x), w), g, b, 1e-5);
        std::vector<int> pos = {0, 1, 2, 3, 4, 5};
        y = rope(y, pos, 2);
        return attention(y, y, y, causal_mask<double>(6), 2).value();
    };
    auto a = run();
    auto b = run();
    ASSERT_EQ(a.size(), b.size());
    EXPECT_EQ(0, std::memcmp(a.data(), b.data(), a.size() * sizeof(double)));
}

TEST(Tensor, BackwardRequiresScalarRoot) {
    auto x = Tensor<double>::zeros({2, 2}, true);
    auto y = add(x, x);
    EXPECT_THROW(y.backward(), ShapeError);
}

TEST(Tensor, NoGradModeBuildsNoGraph) {
    auto x = Tensor<double>::from_data({2}, {1.0, 2.0}, true);
    NoGradGuard ng;
    auto y = mul(x, x);
    EXPECT_FALSE(y.requires_grad());
    EXPECT_TRUE(y.ptr()->parents.empty());
}
