#include "popstrat/cli.hpp"

int main(int argc, char** argv) { return popstrat::run_cli(argc, argv); }
