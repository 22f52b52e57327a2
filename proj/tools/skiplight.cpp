#include "skiplight/cli.hpp"

int main(int argc, char** argv) { return skiplight::cli(argc, argv); }
