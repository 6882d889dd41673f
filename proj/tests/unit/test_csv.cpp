#include <gtest/gtest.h>

#include <limits>

#include "fixtures.hpp"
#include "trafficfuse/csv.hpp"
#include "trafficfuse/error.hpp"

using namespace trafficfuse;

TEST(Csv, ReadSkipsCommentsAndTrims) {
  tf_test::TempDir dir;
  dir.write("a.csv", "# header comment\nx, y\n\n  1 ,2\n#skip\n3,4\n");
  const auto rows = csv::read(dir / "a.csv");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].cells, (std::vector<std::string>{"x", "y"}));
  EXPECT_EQ(rows[1].line, 4u);
  EXPECT_EQ(rows[1].cells, (std::vector<std::string>{"1", "2"}));
  EXPECT_THROW(csv::read(dir / "missing.csv"), ParseError);
}

TEST(Csv, SplitKeepsEmptyCells) {
  EXPECT_EQ(csv::split("a,,b,"), (std::vector<std::string>{"a", "", "b", ""}));
}

TEST(Csv, NumberErrorsNameTheLocation) {
  EXPECT_EQ(csv::to_double("2.5", "f.csv", 3, "count"), 2.5);
  EXPECT_EQ(csv::to_int("-7", "f.csv", 3, "n"), -7);
  try {
    csv::to_double("2.5x", "f.csv", 3, "count");
    FAIL();
  } catch (const ParseError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("f.csv"), std::string::npos);
    EXPECT_NE(msg.find("3"), std::string::npos);
    EXPECT_NE(msg.find("count"), std::string::npos);
  }
  EXPECT_THROW(csv::to_int("1.0", "f.csv", 1, "n"), ParseError);
}

TEST(Csv, FormatRoundTrips) {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, 123456789.125, -2.0}) {
    EXPECT_EQ(csv::to_double(csv::format(v), "", 0, ""), v);
  }
  EXPECT_EQ(csv::format(1.0), "1");
}

TEST(Csv, AtomicWriteReplaces) {
  tf_test::TempDir dir;
  csv::write_atomic(dir / "sub" / "x.txt", "first");
  csv::write_atomic(dir / "sub" / "x.txt", "second");
  EXPECT_EQ(tf_test::slurp(dir / "sub" / "x.txt"), "second");
  EXPECT_FALSE(std::filesystem::exists(dir / "sub" / "x.txt.tmp"));
}

TEST(Time, IsoRoundTripAndCalendar) {
  const auto t = parse_iso8601("2024-01-01T00:00:00Z");
  EXPECT_EQ(t, 1704067200);
  EXPECT_EQ(day_of_week(t), 0);  // Monday
  EXPECT_EQ(day_of_week(0), 3);  // Thursday
  EXPECT_EQ(hour_of_day(t + 5 * 3600 + 59), 5);
  EXPECT_EQ(format_iso8601(t + 3661), "2024-01-01T01:01:01");
  EXPECT_EQ(parse_iso8601("2024-02-29"), parse_iso8601("2024-02-29T00:00:00"));
  EXPECT_EQ(day_of_week(-1), 2);
  EXPECT_THROW(parse_iso8601("2023-02-29"), ParseError);
  EXPECT_THROW(parse_iso8601("yesterday"), ParseError);
  EXPECT_THROW(parse_iso8601("2024-01-01T25:00"), ParseError);
}
