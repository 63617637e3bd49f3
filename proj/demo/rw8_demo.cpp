// Records the eight-variable random walk, prints its tapes as DOT graphs and
// the Hessian found through sparsity detection and subgraph sweeps.

#include <cstdio>
#include <iostream>
#include <vector>

#include "alap/alap.hpp"

int main()
{
    const alap::Model model = alap::rw8();
    const alap::Tape t1 = alap::record_model(model);
    const alap::Tape t2 = alap::gradient_tape(t1);
    std::cout << alap::to_dot(t1, "T1") << '\n' << alap::to_dot(t2, "T2") << '\n';

    const auto pattern = alap::detect_sparsity(t2, model.n);
    const auto sub = alap::build_subgraphs(t2, pattern);
    const std::vector<double> x{1, -2, 3, 0.5, 0, 2, -1, 4};
    const auto h = alap::sparse_hessian(t2, sub, pattern, x);
    std::printf("// Hessian nonzeros (row col value), half bandwidth %zu\n", pattern.half_bandwidth());
    for (std::size_t l = 0; l < pattern.nnz(); ++l)
        std::printf("// %d %d %g\n", pattern.rows()[l], pattern.cols()[l], h[l]);

    alap::LaplaceEngine engine(model);
    std::printf("// -log L* = %.12g\n", engine.neg_log_laplace({}));
}
