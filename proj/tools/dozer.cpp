#include <string>
#include <vector>

#include "dozer/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return dozer::run_command(args);
}
