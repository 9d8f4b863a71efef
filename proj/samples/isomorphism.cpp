// Counts isomorphism classes of the NB201-like space and shows one multi-member class.
#include <iostream>
#include <map>

#include "nasaudit/search_space.hpp"

int main() {
    using namespace nasaudit;
    const auto space = nb201_like();
    std::map<CanonicalString, std::vector<Genotype>> classes;
    for (const auto& g : enumerate(space)) classes[canonicalize(g, space)].push_back(g);

    std::size_t dead = 0;
    const std::vector<Genotype>* biggest = nullptr;
    for (const auto& [key, members] : classes) {
        dead += key.dead;
        if (!biggest || members.size() > biggest->size()) biggest = &members;
    }
    std::cout << "genotypes: " << static_cast<double>(space.size()) << "\n"
              << "canonical classes: " << classes.size() << " (" << dead << " without a path from the input)\n"
              << "largest class has " << biggest->size() << " members, e.g.\n";
    for (std::size_t i = 0; i < std::min<std::size_t>(3, biggest->size()); ++i)
        std::cout << "  " << (*biggest)[i].str() << "\n";
}
