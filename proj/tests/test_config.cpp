#include <doctest.h>

#include "mbd/config.hpp"
#include "mbd/errors.hpp"

using namespace mbd;

TEST_CASE("config parses sections, comments and lists") {
  const auto cfg = KeyValueConfig::parse_string(
      "# comment\n"
      "top = 1\n"
      "[protocol]\n"
      "bvalues = 0, 1000 4000  # trailing comment\n"
      "sigma = 12.5\n"
      "[lesions]\n"
      "count_range = 4 10\n");
  CHECK(cfg.get_int("top") == 1);
  CHECK(cfg.get_double_list("protocol.bvalues") == std::vector<double>{0, 1000, 4000});
  CHECK(cfg.get_double("protocol.sigma") == doctest::Approx(12.5));
  CHECK(cfg.get_int_list("lesions.count_range") == std::vector<std::int64_t>{4, 10});
  CHECK_THROWS_AS(cfg.get_string("missing"), ConfigError);
  CHECK_THROWS_AS(cfg.get_int("protocol.sigma"), ConfigError);
}

TEST_CASE("config hash ignores formatting but tracks values") {
  const auto a = KeyValueConfig::parse_string("a = 1\n[s]\nb = 2\n");
  const auto b = KeyValueConfig::parse_string("# different layout, same content\na=1\n[s]\n  b =  2\n");
  const auto c = KeyValueConfig::parse_string("a = 1\n[s]\nb = 3\n");
  CHECK(a.hash() == b.hash());
  CHECK(a.hash() != c.hash());
}

TEST_CASE("malformed lines are rejected") {
  CHECK_THROWS_AS(KeyValueConfig::parse_string("key without equals\n"), ConfigError);
  CHECK_THROWS_AS(KeyValueConfig::parse_string("[unterminated\n"), ConfigError);
  CHECK_THROWS_AS(KeyValueConfig::parse_string("= value\n"), ConfigError);
}
