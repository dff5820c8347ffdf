#include "relpos/tensor.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "relpos/gradcheck.hpp"
#include "relpos/rng.hpp"

using namespace relpos;

namespace {

// Independent reference: plain triple loop, no transpose tricks, no skips.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                 int m, int k, int n) {
    std::vector<double> c(static_cast<std::size_t>(m * n), 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            for (int p = 0; p < k; ++p)
                c[static_cast<std::size_t>(i * n + j)] +=
                    a[static_cast<std::size_t>(i * k + p)] * b[static_cast<std::size_t>(p * n + j)];
    return c;
}

template <typename T>
void expect_all_near(const Tensor<T>& t, const std::vector<double>& want, double tol) {
    ASSERT_EQ(t.numel(), static_cast<std::int64_t>(want.size()));
    for (std::size_t i = 0; i < want.size(); ++i) {
        EXPECT_NEAR(static_cast<double>(t.values()[i]), want[i], tol) << "index " << i;
    }
}

Tensor<double> rand_tensor(Shape shape, Rng& rng) {
    auto t = Tensor<double>::zeros(std::move(shape));
    for (auto& v : t.mutable_values()) v = rng.next_normal();
    return t;
}

}  // namespace

TEST(Matmul, IdentityCase) {
    auto a = Tensor<double>::from_data({2, 2}, {1, 2, 3, 4});
    auto eye = Tensor<double>::from_data({2, 2}, {1, 0, 0, 1});
    expect_all_near(matmul(a, eye), {1, 2, 3, 4}, 0.0);
}

TEST(Matmul, RowTimesColumn) {
    auto a = Tensor<double>::from_data({1, 3}, {1, 2, 3});
    auto b = Tensor<double>::from_data({3, 1}, {1, 1, 1});
    auto c = matmul(a, b);
    EXPECT_EQ(c.shape(), (Shape{1, 1}));
    EXPECT_DOUBLE_EQ(c.values()[0], 6.0);
}

TEST(Matmul, MismatchThrowsNamingShapes) {
    auto a = Tensor<double>::zeros({2, 3});
    auto b = Tensor<double>::zeros({2, 3});
    try {
        matmul(a, b);
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    }
}

TEST(Matmul, MatchesNaiveOracleAllTransposeCombos) {
    Rng rng(11);
    const int m = 5, k = 4, n = 6;
    for (const bool ta : {false, true}) {
        for (const bool tb : {false, true}) {
            auto a = rand_tensor(ta ? Shape{k, m} : Shape{m, k}, rng);
            auto b = rand_tensor(tb ? Shape{n, k} : Shape{k, n}, rng);
            // materialize effective operands for the oracle
            std::vector<double> ae(static_cast<std::size_t>(m * k));
            std::vector<double> be(static_cast<std::size_t>(k * n));
            for (int i = 0; i < m; ++i)
                for (int p = 0; p < k; ++p)
                    ae[static_cast<std::size_t>(i * k + p)] =
                        ta ? a.values()[static_cast<std::size_t>(p * m + i)]
                           : a.values()[static_cast<std::size_t>(i * k + p)];
            for (int p = 0; p < k; ++p)
                for (int j = 0; j < n; ++j)
                    be[static_cast<std::size_t>(p * n + j)] =
                        tb ? b.values()[static_cast<std::size_t>(j * k + p)]
                           : b.values()[static_cast<std::size_t>(p * n + j)];
            expect_all_near(matmul(a, b, ta, tb), naive_matmul(ae, be, m, k, n), 1e-12);
        }
    }
}

TEST(Matmul, BatchedAgainstPerSlice) {
    Rng rng(12);
    auto a = rand_tensor({3, 2, 4}, rng);
    auto w = rand_tensor({4, 5}, rng);
    auto c = matmul(a, w);
    EXPECT_EQ(c.shape(), (Shape{3, 2, 5}));
    for (int s = 0; s < 3; ++s) {
        std::vector<double> as(a.values().begin() + s * 8, a.values().begin() + (s + 1) * 8);
        auto want = naive_matmul(as, w.values(), 2, 4, 5);
        for (int i = 0; i < 10; ++i) {
            EXPECT_NEAR(c.values()[static_cast<std::size_t>(s * 10 + i)],
                        want[static_cast<std::size_t>(i)], 1e-12);
        }
    }
}

TEST(Softmax, UniformOnEqualLogits) {
    auto x = Tensor<double>::from_data({3}, {0, 0, 0});
    expect_all_near(softmax(x), {1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-15);
}

TEST(Softmax, ShiftInvariance) {
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        auto x = rand_tensor({7}, rng);
        const double c = rng.next_normal() * 10.0;
        auto shifted = Tensor<double>::zeros({7});
        for (int i = 0; i < 7; ++i) shifted.mutable_values()[i] = x.values()[i] + c;
        auto y0 = softmax(x);
        auto y1 = softmax(shifted);
        for (int i = 0; i < 7; ++i) EXPECT_NEAR(y0.values()[i], y1.values()[i], 1e-12);
    }
}

TEST(Softmax, MatchesHighPrecisionOracle) {
    // 32-bit computation against an independent 64-bit evaluation
    auto x32 = Tensor<float>::from_data({3}, {1.f, 2.f, 3.f});
    auto y32 = softmax(x32);
    const std::vector<double> logits = {1.0, 2.0, 3.0};
    double denom = 0.0;
    for (const double v : logits) denom += std::exp(v);
    for (int i = 0; i < 3; ++i) {
        EXPECT_NEAR(static_cast<double>(y32.values()[i]), std::exp(logits[i]) / denom, 1e-6);
    }
}

TEST(Softmax, RowsSumToOneAndEntriesInUnitInterval) {
    Rng rng(22);
    for (int trial = 0; trial < 50; ++trial) {
        auto x = rand_tensor({4, 9}, rng);
        for (auto& v : x.mutable_values()) v *= 5.0;
        auto y = softmax(x);
        for (int r = 0; r < 4; ++r) {
            double sum = 0.0;
            for (int c = 0; c < 9; ++c) {
                const double p = y.values()[static_cast<std::size_t>(r * 9 + c)];
                EXPECT_GT(p, 0.0);
                EXPECT_LT(p, 1.0);
                sum += p;
            }
            EXPECT_NEAR(sum, 1.0, 1e-6);
        }
    }
}

TEST(Softmax, MiddleAxisMatchesLastAxisViaTranspose) {
    Rng rng(23);
    auto x = rand_tensor({2, 5, 3}, rng);
    auto y = softmax(x, 1);
    // slice (o, :, i) must be a probability vector
    for (int o = 0; o < 2; ++o) {
        for (int i = 0; i < 3; ++i) {
            double sum = 0.0;
            for (int j = 0; j < 5; ++j) sum += y.values()[static_cast<std::size_t>((o * 5 + j) * 3 + i)];
            EXPECT_NEAR(sum, 1.0, 1e-12);
        }
    }
}

TEST(CrossEntropy, UniformLogitsGiveLogN) {
    for (const int n : {2, 5, 255}) {
        auto logits = Tensor<double>::zeros({n});
        EXPECT_NEAR(cross_entropy(logits, 0).item(), std::log(static_cast<double>(n)), 1e-12);
    }
}

TEST(CrossEntropy, NearOneHotIsNearZero) {
    auto logits = Tensor<double>::zeros({5});
    logits.mutable_values()[2] = 100.0;
    EXPECT_LT(cross_entropy(logits, 2).item(), 1e-6);
}

TEST(CrossEntropy, MatchesDirectFormula) {
    auto logits = Tensor<double>::from_data({3}, {1, 2, 3});
    double denom = 0.0;
    for (const double v : {1.0, 2.0, 3.0}) denom += std::exp(v);
    const double want = -std::log(std::exp(1.0) / denom);
    EXPECT_NEAR(cross_entropy(logits, 0).item(), want, 1e-12);
}

TEST(CrossEntropy, TargetOutOfRangeThrows) {
    auto logits = Tensor<double>::zeros({4});
    EXPECT_THROW(cross_entropy(logits, 4), IndexError);
    EXPECT_THROW(cross_entropy(logits, -1), IndexError);
}

TEST(CrossEntropy, MeanOverRowsEqualsAverageOfSingles) {
    Rng rng(31);
    auto logits = rand_tensor({3, 6}, rng);
    const std::vector<std::int64_t> targets = {1, 0, 5};
    double want = 0.0;
    for (int r = 0; r < 3; ++r) {
        std::vector<double> row(logits.values().begin() + r * 6, logits.values().begin() + (r + 1) * 6);
        want += cross_entropy(Tensor<double>::from_data({6}, row), targets[r]).item();
    }
    want /= 3.0;
    EXPECT_NEAR(cross_entropy_mean(logits, targets).item(), want, 1e-12);
}

TEST(Backward, SumOfSquaresGivesTwoX) {
    auto x = Tensor<double>::from_data({4}, {1, -2, 3, 0.5}).set_requires_grad();
    sum_all(mul(x, x)).backward();
    expect_all_near(Tensor<double>::from_data({4}, {x.grad()[0], x.grad()[1], x.grad()[2], x.grad()[3]}),
                    {2, -4, 6, 1}, 1e-12);
}

TEST(Backward, FanOutAccumulates) {
    auto x = Tensor<double>::from_data({3}, {1, 2, 3}).set_requires_grad();
    sum_all(add(x, x)).backward();
    for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0);
}

TEST(Backward, NonScalarRootThrows) {
    auto x = Tensor<double>::zeros({3}).set_requires_grad();
    EXPECT_THROW(add(x, x).backward(), ContractError);
}

TEST(Backward, CompositeMatchesFiniteDifferences) {
    Rng rng(41);
    auto w = rand_tensor({4, 3}, rng);
    w.set_requires_grad();
    auto x = rand_tensor({2, 4}, rng);
    auto loss_fn = [&]() {
        return cross_entropy_mean(matmul(x, w), std::vector<std::int64_t>{2, 0});
    };
    EXPECT_LT(finite_diff_check(loss_fn, {w}, 1e-5), 1e-4);
}

TEST(FiniteDiff, ExactForLinearLoss) {
    Rng rng(42);
    auto x = rand_tensor({6}, rng);
    x.set_requires_grad();
    auto c = rand_tensor({6}, rng);
    auto loss_fn = [&]() { return sum_all(mul(x, c)); };
    EXPECT_LT(finite_diff_check(loss_fn, {x}, 1e-5), 1e-10);
}

TEST(FiniteDiff, DetectsInjectedFault) {
    Rng rng(43);
    auto x = rand_tensor({6}, rng);
    x.set_requires_grad();
    auto loss_fn = [&]() { return sum_all(mul(x, x)); };
    FdOptions opts;
    opts.grad_scale = 1.01;
    EXPECT_GT(finite_diff_check(loss_fn, {x}, 1e-5, opts), 1e-3);
}

TEST(GradCheck, ElementwiseAndReductionOps) {
    Rng rng(51);
    auto a = rand_tensor({3, 4}, rng);
    auto b = rand_tensor({3, 4}, rng);
    auto bias = rand_tensor({4}, rng);
    a.set_requires_grad();
    b.set_requires_grad();
    bias.set_requires_grad();
    auto loss_fn = [&]() {
        auto y = add_bias(add(mul(a, b), sub(a, b)), bias);
        return mean_all(mul(y, y));
    };
    EXPECT_LT(finite_diff_check(loss_fn, {a, b, bias}, 1e-5), 1e-6);
}

TEST(GradCheck, MatmulAllCombos) {
    Rng rng(52);
    for (const bool ta : {false, true}) {
        for (const bool tb : {false, true}) {
            auto a = rand_tensor(ta ? Shape{3, 2} : Shape{2, 3}, rng);
            auto b = rand_tensor(tb ? Shape{4, 3} : Shape{3, 4}, rng);
            a.set_requires_grad();
            b.set_requires_grad();
            auto loss_fn = [&]() {
                auto c = matmul(a, b, ta, tb);
                return mean_all(mul(c, c));
            };
            EXPECT_LT(finite_diff_check(loss_fn, {a, b}, 1e-5), 1e-8)
                << "ta=" << ta << " tb=" << tb;
        }
    }
}

TEST(GradCheck, BatchedMatmulSharedWeight) {
    Rng rng(53);
    auto a = rand_tensor({2, 3, 4}, rng);
    auto w = rand_tensor({4, 5}, rng);
    a.set_requires_grad();
    w.set_requires_grad();
    auto loss_fn = [&]() {
        auto c = matmul(a, w);
        return mean_all(mul(c, c));
    };
    EXPECT_LT(finite_diff_check(loss_fn, {a, w}, 1e-5), 1e-8);
}

TEST(GradCheck, BatchedMatmulBothBatchedTransB) {
    Rng rng(54);
    auto q = rand_tensor({2, 3, 4}, rng);
    auto k = rand_tensor({2, 3, 4}, rng);
    q.set_requires_grad();
    k.set_requires_grad();
    auto loss_fn = [&]() {
        auto s = matmul(q, k, false, true);  // [2,3,3]
        return mean_all(mul(s, s));
    };
    EXPECT_LT(finite_diff_check(loss_fn, {q, k}, 1e-5), 1e-6);
}

TEST(GradCheck, GatherWithDuplicateIds) {
    Rng rng(55);
    auto table = rand_tensor({5, 3}, rng);
    table.set_requires_grad();
    const std::vector<std::int64_t> ids = {0, 2, 2, 4, 0, 0};
    auto loss_fn = [&]() {
        auto g = gather_rows(table, ids, {6});
        return mean_all(mul(g, g));
    };
    EXPECT_LT(finite_diff_check(loss_fn, {table}, 1e-5), 1e-8);
}

TEST(GradCheck, ShapeOps) {
    Rng rng(56);
    auto x = rand_tensor({2, 3, 6}, rng);
    x.set_requires_grad();
    auto loss_fn = [&]() {
        auto a = slice_last(x, 0, 2);
        auto b = slice_last(x, 2, 4);
        auto joined = concat_last(std::vector<Tensor<double>>{b, a});
        auto flat = reshape(joined, {6, 6});
        auto stacked = stack_last(std::vector<Tensor<double>>{flat, flat});
        return mean_all(mul(stacked, stacked));
    };
    EXPECT_LT(finite_diff_check(loss_fn, {x}, 1e-5), 1e-8);
}

TEST(GradCheck, ConcatRows) {
    Rng rng(57);
    auto a = rand_tensor({3, 4}, rng);
    auto b = rand_tensor({4}, rng);
    a.set_requires_grad();
    b.set_requires_grad();
    auto loss_fn = [&]() {
        auto t = concat_rows(a, b);
        return mean_all(mul(t, t));
    };
    EXPECT_LT(finite_diff_check(loss_fn, {a, b}, 1e-5), 1e-8);
}

TEST(GradCheck, SoftmaxGeluLayerNorm) {
    Rng rng(58);
    auto x = rand_tensor({3, 5}, rng);
    auto g = rand_tensor({5}, rng);
    auto b = rand_tensor({5}, rng);
    auto mix = rand_tensor({3, 5}, rng);
    x.set_requires_grad();
    g.set_requires_grad();
    b.set_requires_grad();
    auto loss_fn = [&]() {
        auto y = layer_norm(gelu(x), g, b);
        auto s = softmax(y, -1);
        return mean_all(mul(s, mix));
    };
    EXPECT_LT(finite_diff_check(loss_fn, {x, g, b}, 1e-5), 1e-6);
}

TEST(GradCheck, SoftmaxMiddleAxis) {
    Rng rng(59);
    auto x = rand_tensor({2, 4, 3}, rng);
    auto mix = rand_tensor({2, 4, 3}, rng);
    x.set_requires_grad();
    auto loss_fn = [&]() { return mean_all(mul(softmax(x, 1), mix)); };
    EXPECT_LT(finite_diff_check(loss_fn, {x}, 1e-5), 1e-6);
}

TEST(GradCheck, DropoutWithReseededMask) {
    Rng rng(60);
    auto x = rand_tensor({4, 4}, rng);
    x.set_requires_grad();
    auto loss_fn = [&]() {
        Rng mask_rng(777);  // fresh stream per evaluation keeps the mask fixed
        auto y = dropout(x, 0.5, mask_rng);
        return mean_all(mul(y, y));
    };
    EXPECT_LT(finite_diff_check(loss_fn, {x}, 1e-5), 1e-8);
}

TEST(Dropout, ZeroRateIsIdentity) {
    Rng rng(61);
    auto x = rand_tensor({8}, rng);
    Rng mask_rng(1);
    auto y = dropout(x, 0.0, mask_rng);
    EXPECT_EQ(y.values(), x.values());
}

TEST(Determinism, IdenticalInputsGiveBitwiseIdenticalOutputs) {
    Rng rng(71);
    auto a = rand_tensor({8, 8}, rng);
    auto b = rand_tensor({8, 8}, rng);
    auto c1 = matmul(a, b);
    auto c2 = matmul(a, b);
    EXPECT_EQ(c1.values(), c2.values());
    auto s1 = softmax(a);
    auto s2 = softmax(a);
    EXPECT_EQ(s1.values(), s2.values());
}

TEST(Tensor, FiniteCheckThrowsOnNan) {
    auto x = Tensor<double>::zeros({3});
    x.mutable_values()[1] = std::nan("");
    EXPECT_THROW(check_finite(x, "unit"), NumericError);
}

TEST(Tensor, FromDataValidatesShape) {
    EXPECT_THROW(Tensor<double>::from_data({2, 2}, {1, 2, 3}), ShapeError);
}
