#include "dpnet/cli.hpp"

int main(int argc, char** argv) { return dpnet::cli::run(argc, argv); }
