#include "cli_app.hpp"

int main(int argc, char** argv) { return eqcm::cli::dispatch(argc, argv); }
