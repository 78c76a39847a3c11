#include <gtest/gtest.h>

#include <cmath>

#include "protoclip/error.hpp"
#include "protoclip/tensor.hpp"

using namespace protoclip;

TEST(Tensor, ShapeMatchesValueCount) {
  Tensor t(2, 3, 1.5);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_THROW(Tensor(2, 2, std::vector<double>{1, 2, 3}), DimensionError);
}

TEST(Tensor, RowMajorLayout) {
  const Tensor t = Tensor::from_rows({{1, 2, 3}, {4, 5, 6}});
  EXPECT_DOUBLE_EQ(t(1, 0), 4.0);
  EXPECT_DOUBLE_EQ(t[2], 3.0);
  EXPECT_EQ(t.row(1)[2], 6.0);
  EXPECT_EQ(t.transposed(), Tensor::from_rows({{1, 4}, {2, 5}, {3, 6}}));
}

TEST(Tensor, VectorAndScalar) {
  EXPECT_EQ(Tensor::vector({1, 2}).rows(), 1u);
  EXPECT_DOUBLE_EQ(Tensor::scalar(4.0).item(), 4.0);
  EXPECT_THROW(Tensor(2, 1).item(), ContractError);
  EXPECT_EQ(Tensor::identity(2), Tensor::from_rows({{1, 0}, {0, 1}}));
}

TEST(Tensor, GatherRows) {
  const Tensor t = Tensor::from_rows({{1, 1}, {2, 2}, {3, 3}});
  const std::vector<std::size_t> idx{2, 0};
  EXPECT_EQ(t.gather_rows(idx), Tensor::from_rows({{3, 3}, {1, 1}}));
}

TEST(Tensor, FiniteCheck) {
  Tensor t(1, 2);
  EXPECT_TRUE(t.all_finite());
  t[1] = std::nan("");
  EXPECT_FALSE(t.all_finite());
}

TEST(Tensor, NormalizedRows) {
  const Tensor n = normalized_rows(Tensor::from_rows({{3, 4}, {1, 0}}));
  EXPECT_NEAR(n(0, 0), 0.6, 1e-15);
  EXPECT_NEAR(n(0, 1), 0.8, 1e-15);
  EXPECT_EQ(n.row(1)[0], 1.0);
  try {
    normalized_rows(Tensor::from_rows({{1, 0}, {0, 0}}));
    FAIL();
  } catch (const DegenerateRowError& e) {
    EXPECT_EQ(e.row(), 1u);
  }
}

TEST(Tensor, MatmulTransposed) {
  const Tensor a = Tensor::from_rows({{1, 2}, {3, 4}});
  const Tensor b = Tensor::from_rows({{5, 6}});
  EXPECT_EQ(matmul_transposed(a, b), Tensor::from_rows({{17}, {39}}));
  EXPECT_DOUBLE_EQ(squared_distance(a.row(0), a.row(1)), 8.0);
}
