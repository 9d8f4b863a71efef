// Ranks a 27-genotype toy space with briefly trained networks and compares zero-shot scores
// and the params baseline against that ranking.
#include <iostream>

#include "nasaudit/harness.hpp"

int main() {
    using namespace nasaudit;
    const auto space = edge_space("toy", 3, {OpTemplate::skip(), OpTemplate::conv(1), OpTemplate::conv(3)},
                                  {{8, 8, 1}, {16, 4, 1}});
    DatasetSpec spec;
    spec.resolution = 8;
    spec.per_class = 30;
    spec.seed = 1;
    const auto data = ingest(spec);
    const auto subset = enumerate_all(space);

    StandaloneConfig train;
    train.epochs = 4;
    const auto oracle = train_oracle(space, subset, data, train, {20}).table();

    const auto batches = make_batches<double>(data.train, 32, 0, true, true);
    ZseConfig zc;
    zc.n_batches = 1;
    for (const auto& s : score_zero_shot<double>(space, subset, {"synflow", "snip", "params"}, zc, {}, batches, 20)) {
        const auto table = join_scores(oracle, s);
        std::cout << s.estimator << "\tKD " << kendall_tau(table) << "\tP@top10% " << p_at_topk(table, 0.1) << "\n";
    }
}
