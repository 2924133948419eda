#include "awmf/cli.hpp"

int main(int argc, char** argv) { return awmf::run_cli(argc, argv); }
