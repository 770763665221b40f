#include "muie/gradcheck.hpp"

#include <doctest.h>

using namespace muie;

TEST_CASE("gradient suite passes on every block") {
  ModelConfig tiny;
  tiny.base_channels = 4;
  tiny.patch_size = 1;
  const auto reports = run_gradcheck_suite(tiny);
  CHECK(reports.size() >= 18);
  for (const auto& r : reports) {
    INFO(r.name << " worst " << r.worst);
    CHECK(r.pass);
    CHECK(r.checked > 0);
  }
}
