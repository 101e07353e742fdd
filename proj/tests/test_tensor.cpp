#include <catch2/catch_amalgamated.hpp>

#include "advlab/ops.hpp"
#include "advlab/tensor.hpp"

using advlab::Tensor;

TEST_CASE("construction and shape checks") {
    Tensor<float> t({2, 3});
    REQUIRE(t.numel() == 6);
    REQUIRE(t.shape() == std::vector<int>{2, 3});
    for (int64_t i = 0; i < 6; ++i) REQUIRE(t[i] == 0.0f);

    REQUIRE_THROWS_AS(Tensor<float>({2, 0}), advlab::ShapeError);
    REQUIRE_THROWS_AS(Tensor<float>({2, 2}, {1.f, 2.f, 3.f}), advlab::ShapeError);

    Tensor<float> s = Tensor<float>::scalar(4.f);
    REQUIRE(s.numel() == 1);
    REQUIRE(s.item() == 4.f);
    REQUIRE_THROWS_AS(t.item(), advlab::ShapeError);
}

TEST_CASE("copies alias, clone detaches") {
    Tensor<float> a({2, 2}, {1, 2, 3, 4});
    Tensor<float> alias = a;
    Tensor<float> deep = a.clone();
    a[0] = 9.f;
    REQUIRE(alias[0] == 9.f);
    REQUIRE(deep[0] == 1.f);
}

TEST_CASE("elementwise examples") {
    Tensor<float> x({3}, {-1.f, 0.f, 2.f});
    Tensor<float> r = advlab::relu(x);
    REQUIRE(r.vec() == std::vector<float>{0.f, 0.f, 2.f});

    Tensor<float> s = advlab::sign(Tensor<float>({3}, {-0.3f, 0.f, 0.7f}));
    REQUIRE(s.vec() == std::vector<float>{-1.f, 0.f, 1.f});

    Tensor<float> c = advlab::clamp(Tensor<float>({3}, {-0.2f, 0.5f, 1.4f}), 0.f, 1.f);
    REQUIRE(c.vec() == std::vector<float>{0.f, 0.5f, 1.f});
}

TEST_CASE("binary broadcast rules") {
    Tensor<float> a({2, 2}, {1, 2, 3, 4});
    Tensor<float> s = Tensor<float>::scalar(10.f);
    REQUIRE(advlab::add(a, s).vec() == std::vector<float>{11, 12, 13, 14});
    REQUIRE(advlab::sub(s, a).vec() == std::vector<float>{9, 8, 7, 6});
    REQUIRE(advlab::mul(a, a).vec() == std::vector<float>{1, 4, 9, 16});

    Tensor<float> b({3}, {1, 2, 3});
    REQUIRE_THROWS_AS(advlab::add(a, b), advlab::ShapeError);
}

TEST_CASE("matmul examples") {
    Tensor<float> eye({2, 2}, {1, 0, 0, 1});
    Tensor<float> m({2, 2}, {1, 2, 3, 4});
    REQUIRE(advlab::matmul(eye, m).vec() == std::vector<float>{1, 2, 3, 4});

    Tensor<float> row({1, 2}, {1, 2});
    Tensor<float> col({2, 1}, {3, 4});
    REQUIRE(advlab::matmul(row, col).item() == 11.f);

    Tensor<float> bad({3, 2}, {1, 2, 3, 4, 5, 6});
    REQUIRE_THROWS_AS(advlab::matmul(m, bad), advlab::ShapeError);
}

TEST_CASE("non-finite outputs are rejected") {
    Tensor<float> big = Tensor<float>::full({4}, 3e38f);
    REQUIRE_THROWS_AS(advlab::add(big, big), advlab::NumericError);
}

TEST_CASE("randn is deterministic per seed") {
    advlab::Rng r1(42), r2(42), r3(43);
    auto a = Tensor<float>::randn({16}, r1);
    auto b = Tensor<float>::randn({16}, r2);
    auto c = Tensor<float>::randn({16}, r3);
    REQUIRE(a.vec() == b.vec());
    REQUIRE(a.vec() != c.vec());
}

TEST_CASE("concat and permute shapes") {
    Tensor<float> a({1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    Tensor<float> b({1, 1, 2, 2}, {9, 10, 11, 12});
    auto cat = advlab::concat<float>({a, b}, 1);
    REQUIRE(cat.shape() == std::vector<int>{1, 3, 2, 2});
    REQUIRE(cat.vec() == std::vector<float>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12});

    Tensor<float> m({2, 3}, {1, 2, 3, 4, 5, 6});
    auto mt = advlab::permute(m, {1, 0});
    REQUIRE(mt.shape() == std::vector<int>{3, 2});
    REQUIRE(mt.vec() == std::vector<float>{1, 4, 2, 5, 3, 6});
}
