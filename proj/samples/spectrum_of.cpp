// Prints the radial log-power spectrum of a signed perturbation batch (.fqb).
//
//   spectrum_of perturbation.fqb [bins]

#include <cstdlib>
#include <iostream>

#include "freqpure/freqpure.hpp"

int main(int argc, char** argv) {
    if (argc < 2) {
        std::cerr << "usage: spectrum_of <perturbation.fqb> [bins]\n";
        return 1;
    }
    try {
        const auto f = freqpure::read_batch(argv[1]);
        const std::size_t bins = argc > 2 ? std::strtoul(argv[2], nullptr, 10) : 16;
        const auto hist = freqpure::radial_spectrum(f.batch, bins);
        for (std::size_t i = 0; i < hist.radius.size(); ++i) std::cout << hist.radius[i] << '\t' << hist.energy[i] << '\n';
        std::cout << "peak bin " << hist.argmax() << '\n';
    } catch (const std::exception& e) {
        std::cerr << e.what() << '\n';
        return 2;
    }
}
