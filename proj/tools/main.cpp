#include <iostream>

#include "supportaff/cli.hpp"

int main(int argc, char** argv) { return supportaff::cli_main(argc, argv, std::cout, std::cerr); }
