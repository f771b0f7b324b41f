#include "acerec/alloc.hpp"
#include "acerec/cli.hpp"

int main(int argc, char** argv) {
    acerec::tune_allocator();
    return acerec::cli::dispatch(argc, argv);
}
