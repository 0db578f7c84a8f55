#include <catch2/catch_amalgamated.hpp>
#include "mfg/mfg.hpp"
TEST_CASE("placeholder test_paths") { CHECK(true); }
