#include <iostream>
#include <string>
#include <vector>

#include "aerolite/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    return aerolite::cli::run(args, std::cout, std::cerr);
}
