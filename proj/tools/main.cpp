#include "commands.hpp"

int main(int argc, char** argv) { return modality::cli::run(argc, argv); }
