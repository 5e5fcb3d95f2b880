#include "commands.hpp"

int main(int argc, char** argv) { return brainage::cli::run(argc, argv); }
