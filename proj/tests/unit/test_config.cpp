#include <gtest/gtest.h>

#include "fixtures.hpp"
#include "trafficfuse/config.hpp"
#include "trafficfuse/error.hpp"

using namespace trafficfuse;

namespace {

std::string error_of(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ParseError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Config, DefaultsFromEmptyObject) {
  const auto c = parse_config("{}");
  EXPECT_EQ(c.twin, "grid");
  EXPECT_EQ(c.seed, 42u);
  EXPECT_EQ(c.propagation.gamma_pd, 0.8);
  EXPECT_EQ(c.filter.forecast_noise, ForecastNoise::kInflation);
}

TEST(Config, ShippedConfigsLoad) {
  const auto grid = load_config(std::filesystem::path(TRAFFICFUSE_TEST_DATA) / "grid.json");
  EXPECT_EQ(grid.grid.bins, 1344);
  EXPECT_EQ(grid.model.d, 16);
  EXPECT_EQ(grid.train_bins, 672);
  EXPECT_EQ(grid.grid.start, parse_iso8601("2024-01-01T00:00:00Z"));
  const auto chain = load_config(std::filesystem::path(TRAFFICFUSE_TEST_DATA) / "chain.json");
  EXPECT_EQ(chain.twin, "chain");
  EXPECT_EQ(chain.calibration_cameras, std::vector<std::string>{"2"});
}

TEST(Config, RoundTrip) {
  auto c = load_config(std::filesystem::path(TRAFFICFUSE_TEST_DATA) / "grid.json");
  c.filter.forecast_noise = ForecastNoise::kGaussian;
  c.propagation.smoothing = 0.25;
  const std::string text = config_to_json(c);
  EXPECT_EQ(config_to_json(parse_config(text)), text);
}

TEST(Config, ErrorsNameTheKey) {
  EXPECT_NE(error_of(R"({"modle": {}})").find("modle"), std::string::npos);
  EXPECT_NE(error_of(R"({"model": {"d": "big"}})").find("config.model.d"), std::string::npos);
  EXPECT_NE(error_of(R"({"network": {"twin": "ring"}})").find("twin"), std::string::npos);
  EXPECT_NE(error_of(R"({"filter": {"forecast_noise": "white"}})").find("forecast_noise"), std::string::npos);
  EXPECT_NE(error_of(R"({"penetration": {"hour_multipliers": [1, 2]}})").find("24"), std::string::npos);
  EXPECT_FALSE(error_of(R"({"propagation": {"gamma_pd": 1.5}})").empty());
  EXPECT_FALSE(error_of(R"({"calibration": {"interval_level": 1}})").empty());
  EXPECT_FALSE(error_of("[1, 2]").empty());
  EXPECT_FALSE(error_of("{").empty());
  EXPECT_NE(error_of(R"({"cameras": {"calibration": ["a"], "validation": ["a"]}})").find("both"), std::string::npos);
  EXPECT_NE(error_of(R"({"network": {"segments": "s.csv"}})").find("edges"), std::string::npos);
}

TEST(Config, MissingFileNamesPath) {
  try {
    load_config("/nonexistent/cfg.json");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/cfg.json"), std::string::npos);
  }
}

TEST(Config, FilePathsResolveAgainstConfigDir) {
  tf_test::TempDir dir;
  dir.write("cfg.json", R"({"network": {"segments": "s.csv", "edges": "e.csv", "demand": "d.csv"}})");
  const auto c = load_config(dir / "cfg.json");
  EXPECT_TRUE(c.twin.empty());
  EXPECT_EQ(c.segments_csv, dir / "s.csv");
}

TEST(Penetration, RateClipsAndValidates) {
  PenetrationModel p;
  p.group_rates = {0.5, 1.0};
  p.hour_multipliers.fill(1.0);
  p.day_multipliers.fill(1.0);
  p.hour_multipliers[8] = 4.0;
  EXPECT_EQ(p.rate(0, 0, 0), 0.5);
  EXPECT_EQ(p.rate(0, 8, 0), 1.0);
  p.day_multipliers[6] = 0.0;
  EXPECT_EQ(p.rate(1, 0, 6), p.floor);
  EXPECT_THROW(p.rate(2, 0, 0), ParameterError);
  p.group_rates = {0.0};
  EXPECT_THROW(p.validate(), ParameterError);
}

TEST(Penetration, DefaultHourProfileAveragesOne) {
  const auto h = default_hour_multipliers();
  double sum = 0.0;
  for (double v : h) sum += v;
  EXPECT_NEAR(sum / kHours, 1.0, 1e-12);
  EXPECT_GT(h[12], h[3]);
}

TEST(Seeds, StagesAreIndependentAndStable) {
  EXPECT_EQ(stage_seed(42, "simulate"), stage_seed(42, "simulate"));
  EXPECT_NE(stage_seed(42, "simulate"), stage_seed(42, "sample"));
  EXPECT_NE(stage_seed(42, "simulate"), stage_seed(43, "simulate"));
}
