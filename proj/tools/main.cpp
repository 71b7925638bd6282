#include "dptail/harness.hpp"

int main(int argc, char** argv) { return dptail::cli_main(argc, argv); }
