#include "unseg/cli/cli.hpp"

int main(int argc, char** argv) { return unseg::cli::run_cli(argc, argv); }
