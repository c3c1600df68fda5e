#include <iostream>

#include "gsedit/cli/cli.hpp"

int main(int argc, char** argv) { return gsedit::cli::run_cli(argc, argv, std::cout, std::cerr); }
