#include "maha/cli.hpp"

int main(int argc, char** argv) { return maha::run_cli(argc, argv); }
