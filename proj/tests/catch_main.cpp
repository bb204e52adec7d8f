// Catch2 v3 amalgamated implementation + default main.
#include <catch2/catch_amalgamated.cpp>
