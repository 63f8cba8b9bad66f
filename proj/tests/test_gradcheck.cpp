// Built with SRLB_REAL=double; see gradcheck.hpp.
#include <gtest/gtest.h>

#include "gradcheck.hpp"

namespace {

class GradCheck : public ::testing::TestWithParam<std::size_t> {};

TEST_P(GradCheck, MatchesCentralDifferences) {
  const auto cases = gradcheck::all_cases();
  const auto& c = cases[GetParam()];
  const gradcheck::Result r = gradcheck::run_case(c);
  EXPECT_GT(r.checked, 0u) << c.name;
  EXPECT_EQ(r.failures, 0u) << c.name << ": worst " << r.worst << " (rel " << r.max_rel << ")";
}

INSTANTIATE_TEST_SUITE_P(AllOps, GradCheck, ::testing::Range<std::size_t>(0, gradcheck::all_cases().size()),
                         [](const ::testing::TestParamInfo<std::size_t>& info) {
                           return gradcheck::all_cases()[info.param].name;
                         });

TEST(GradCheckScalar, EngineBuiltInDouble) { static_assert(std::is_same_v<srlb::real, double>); }

}  // namespace
