#include <iostream>

#include "traice3d/cli.hpp"

int main(int argc, char** argv) { return traice3d::cli_main(argc, argv, std::cout, std::cerr); }
