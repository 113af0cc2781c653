#include <iostream>

#include "idgenrec/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return idgenrec::run_cli(args, std::cout, std::cerr);
}
