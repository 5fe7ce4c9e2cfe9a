#include "icvt/cli.hpp"

int main(int argc, char** argv) { return icvt::run_cli(argc, argv); }
