#include "ivdiff/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return ivdiff::run_cli(argc, argv, std::cout, std::cerr); }
