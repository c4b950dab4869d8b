#include "compomerge/cli.hpp"

int main(int argc, char** argv) { return compomerge::cmd_dispatch(argc, argv); }
