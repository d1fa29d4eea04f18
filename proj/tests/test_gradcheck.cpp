#include <gtest/gtest.h>

#include "depthot/gradcheck.hpp"

using namespace depthot;
namespace gc = depthot::gradcheck;
using depthot::detail::GradIn;
using depthot::detail::GradOut;
using depthot::detail::Inputs;

namespace {

// x^3 with a backward pass that is off by a factor of two.
Var broken_cube(Var x) {
  return x.tape()->record(
      {x},
      [](Inputs in) {
        Tensor y = *in[0];
        for (double& v : y.data()) v = v * v * v;
        return y;
      },
      [](Inputs in, const Tensor&, GradOut g, GradIn gin) {
        if (gin[0].empty()) return;
        for (std::size_t i = 0; i < g.size(); ++i) gin[0][i] += 6.0 * (*in[0])[i] * (*in[0])[i] * g[i];
      });
}

}  // namespace

TEST(Gradcheck, PassesCorrectGradient) {
  gc::Rng rng(1);
  const Tensor x = Tensor::uniform(Shape{3, 4}, 0.5, 2.0, rng);
  const auto row = gc::check("square", {x}, [](const std::vector<Var>& v) { return square(v[0]); }, rng, 1e-6, 1e-5);
  ASSERT_TRUE(row.has_value());
  EXPECT_TRUE(row->pass());
  EXPECT_LT(row->rel_err, 1e-8);
}

TEST(Gradcheck, CatchesWrongGradient) {
  gc::Rng rng(2);
  const Tensor x = Tensor::uniform(Shape{5}, 0.5, 2.0, rng);
  const auto row = gc::check("broken", {x}, [](const std::vector<Var>& v) { return broken_cube(v[0]); }, rng, 1e-6, 1e-5);
  ASSERT_TRUE(row.has_value());
  EXPECT_FALSE(row->pass());
  EXPECT_NEAR(row->analytic / row->numeric, 2.0, 1e-6);
}

TEST(Gradcheck, SkipsKinks) {
  gc::Rng rng(3);
  const Tensor x = Tensor::vector({0.0});
  EXPECT_FALSE(gc::check("abs", {x}, [](const std::vector<Var>& v) { return abs(v[0]); }, rng, 1e-6, 1e-5).has_value());
}

TEST(Gradcheck, RelativeError) {
  EXPECT_EQ(gc::relative_error(0.0, 0.0), 0.0);
  EXPECT_EQ(gc::relative_error(1.0, 2.0), 0.5);
  EXPECT_EQ(gc::relative_error(-1.0, 1.0), 2.0);
}

TEST(Gradcheck, ScopeParsing) {
  EXPECT_EQ(gc::parse_scope("otdl"), gc::Scope::otdl);
  EXPECT_EQ(gc::parse_scope("all"), gc::Scope::all);
  EXPECT_THROW(gc::parse_scope("everything"), std::invalid_argument);
}

TEST(Gradcheck, CsvLayout) {
  const std::string csv = gc::to_csv({{"add", 1.0, 1.0, 0.0, 1e-5}});
  EXPECT_EQ(csv, "name,analytic,numeric,rel_err\nadd,1,1,0\n");
}

TEST(Gradcheck, SuitesPassWithFewInstances) {
  gc::Options opt;
  opt.instances = 3;
  for (gc::Scope s : {gc::Scope::tensor, gc::Scope::dgr, gc::Scope::losses, gc::Scope::otdl, gc::Scope::mask}) {
    const gc::Report r = gc::run(s, opt);
    EXPECT_FALSE(r.rows.empty());
    for (const gc::Row& row : r.rows) EXPECT_TRUE(row.pass()) << row.name << " rel_err " << row.rel_err;
  }
}

TEST(Gradcheck, Deterministic) {
  gc::Options opt;
  opt.instances = 2;
  EXPECT_EQ(gc::to_csv(gc::run(gc::Scope::losses, opt).rows), gc::to_csv(gc::run(gc::Scope::losses, opt).rows));
}
