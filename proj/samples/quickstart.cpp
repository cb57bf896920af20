// Small end-to-end run: toy data, classifier, one attack mode, purification.
//
//   quickstart [mode] [t_star]

#include <cstdlib>
#include <iostream>
#include <numeric>

#include "freqpure/freqpure.hpp"

using namespace freqpure;

int main(int argc, char** argv) {
    const AttackMode mode = attack_mode_from_string(argc > 1 ? argv[1] : "phase");
    const double t_star = argc > 2 ? std::atof(argv[2]) : 0.1;

    ToyDatasetSpec spec;
    spec.height = spec.width = 16;
    spec.band = 2;
    spec.class_count = 4;
    spec.spread = 3.0;
    spec.train_size = 1500;
    spec.test_size = 200;
    const ToyDataset data = make_toy_dataset(spec);

    ClassifierTraining ct;
    ct.epochs = 15;
    auto clf = train_classifier(data.train, data.test, spec.class_count, ct).model;
    ScoreTraining st;
    st.epochs = 2;
    const DiffusionSchedule schedule;
    auto score = train_score_model(to_signed(data.train.images).data, to_signed(data.val.images).data, schedule, st).model;

    std::vector<std::size_t> idx(32);
    std::iota(idx.begin(), idx.end(), 0);
    const LabeledBatch sub = data.test.subset(idx);

    AttackConfig ac;
    ac.mode = mode;
    const AttackResult res = run_attack(sub.images, sub.labels, *clf, ac);

    PurifyConfig pc;
    pc.t_star = t_star;
    const ImageBatch restored = purify(res.adversarial, schedule, *score, pc);

    std::cout << "mode " << to_string(mode) << ", t* " << t_star << '\n'
              << "clean        " << 100 * accuracy(*clf, sub.images.data, sub.labels) << "%\n"
              << "adversarial  " << 100 * accuracy(*clf, res.adversarial.data, sub.labels) << "%\n"
              << "purified adv " << 100 * accuracy(*clf, restored.data, sub.labels) << "%\n";

    const auto hist = radial_spectrum(extract_perturbation(sub.images, res.adversarial), 8);
    std::cout << "perturbation radial spectrum:\n";
    for (std::size_t i = 0; i < hist.radius.size(); ++i) std::cout << "  " << hist.radius[i] << '\t' << hist.energy[i] << '\n';
}
