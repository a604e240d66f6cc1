#include "msfo/cli.hpp"

int main(int argc, char** argv) { return msfo::cli_run(argc, argv); }
