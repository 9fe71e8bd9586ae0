#include <iostream>

#include "jem/error.hpp"
#include "support/zoo.hpp"

// usage: jem_zoo <zoo_dir> <toy.cfg>
int main(int argc, char** argv) {
    if (argc != 3) {
        std::cerr << "usage: jem_zoo <zoo_dir> <toy.cfg>\n";
        return 2;
    }
    try {
        const jem::testing::Zoo zoo{argv[1]};
        jem::testing::build_zoo(zoo, argv[2], std::cout);
        jem::testing::require_zoo(zoo);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    std::cout << "zoo ready at " << argv[1] << '\n';
    return 0;
}
