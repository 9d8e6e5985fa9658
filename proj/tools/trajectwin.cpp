#include "trajectwin/cli.hpp"

int main(int argc, char** argv) { return trajectwin::cli::run(argc, argv); }
