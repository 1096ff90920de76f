#include "multisl/harness/experiments.hpp"

int main(int argc, char** argv) { return multisl::harness::cli_main(argc, argv); }
