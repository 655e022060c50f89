#include <vector>

#include "npstream/cli.hpp"

int main(int argc, char** argv) {
    return npstream::run_command(std::vector<std::string>(argv + 1, argv + argc));
}
