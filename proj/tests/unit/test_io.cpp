#include <sstream>

#include "doctest.h"
#include "sbtip/error.hpp"
#include "sbtip/io.hpp"

using namespace sbtip;

TEST_CASE("three-row cloud with header and labels") {
  std::istringstream in("x,y,label\n0.5,1.0,0\n# comment\n\n-1,2,1\n3,4e-1,1\n");
  const auto c = read_point_cloud(in);
  REQUIRE(c.size() == 3);
  CHECK(c.labeled());
  CHECK(c.points[1].x == -1.0);
  CHECK(c.points[2].y == doctest::Approx(0.4));
  const auto s = describe(c);
  CHECK(s.count == 3);
  CHECK(s.lower.x == -1.0);
  CHECK(s.upper.y == 2.0);
  CHECK(s.label_counts.at(0) == 1);
  CHECK(s.label_counts.at(1) == 2);
}

TEST_CASE("header is optional and region is accepted as label name") {
  std::istringstream a("1,2\n3,4\n");
  CHECK_FALSE(read_point_cloud(a).labeled());
  std::istringstream b("x,y,region\n1,2,7\n");
  CHECK(read_point_cloud(b).labels == std::vector<int>{7});
}

TEST_CASE("non-numeric row reports its line") {
  std::istringstream in("x,y\n1,2\n3,abc\n");
  try {
    read_point_cloud(in);
    FAIL("no exception");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
}

TEST_CASE("ragged rows and empty files are rejected") {
  std::istringstream ragged("1,2,0\n3,4\n");
  CHECK_THROWS_AS(read_point_cloud(ragged), ParseError);
  std::istringstream empty("x,y\n\n# nothing\n");
  try {
    read_point_cloud(empty);
    FAIL("no exception");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::EmptyFile);
  }
  try {
    load_point_cloud("/nonexistent/cloud.csv");
    FAIL("no exception");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::IoError);
  }
}

TEST_CASE("synthetic cohort is reproducible and bimodal") {
  const auto a = synthetic_cohort(11);
  const auto b = synthetic_cohort(11);
  const auto c = synthetic_cohort(12);
  REQUIRE(a.source.size() == 2000);
  REQUIRE(a.target.size() == 1000);
  CHECK(a.source.points[17].x == b.source.points[17].x);
  CHECK(a.target.points[500].y == b.target.points[500].y);
  CHECK(a.source.points[17].x != c.source.points[17].x);
  const auto s = describe(a.target);
  CHECK(s.label_counts.at(0) == 500);
  CHECK(s.label_counts.at(1) == 500);
  CHECK_FALSE(a.source.labeled());
}
