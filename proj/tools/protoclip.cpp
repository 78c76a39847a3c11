#include <iostream>

#include "protoclip/cli.hpp"

int main(int argc, char** argv) { return protoclip::cli_main(argc, argv, std::cout, std::cerr); }
