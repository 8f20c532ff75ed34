// SPDX-License-Identifier: Apache-2.0
#include "experiments.hpp"

#include <cmath>

namespace lamer::experiments {

std::vector<const Sequence*> World::select(std::size_t language, const std::string& split) const {
    std::vector<const Sequence*> out;
    for (const auto& s : sequences)
        if (s.language == language && s.split == split) out.push_back(&s);
    return out;
}

std::vector<const Sequence*> World::new_languages_train() const {
    std::vector<const Sequence*> out;
    for (const auto& s : sequences)
        if (s.language != 0 && s.split == "train") out.push_back(&s);
    return out;
}

std::map<std::size_t, std::vector<const Sequence*>> World::heldout_by_language() const {
    std::map<std::size_t, std::vector<const Sequence*>> out;
    for (const auto& s : sequences)
        if (s.split == "heldout") out[s.language].push_back(&s);
    return out;
}

World build_world(std::uint64_t seed, const Scale& scale) {
    World w;
    w.seed = seed;
    for (const auto& lang : default_languages()) {
        Rng rng(derive_seed(seed, "data-" + lang.name));
        auto seqs = synth_corpus(lang, scale.train_sequences + scale.heldout_sequences, rng);
        for (std::size_t i = 0; i < seqs.size(); ++i) {
            seqs[i].split = i < scale.train_sequences ? "train" : "heldout";
            w.sequences.push_back(std::move(seqs[i]));
        }
    }
    std::vector<const Sequence*> train, heldout;
    for (const auto& s : w.sequences) (s.split == "train" ? train : heldout).push_back(&s);
    const std::vector<std::uint64_t> seeds{derive_seed(seed, "cluster-0"), derive_seed(seed, "cluster-1"),
                                           derive_seed(seed, "cluster-2")};
    w.clusters = fit_best_of_seeds(stack_frames(train), stack_frames(heldout), MiniBatchOptions{}, seeds).best;
    assign_labels(w.clusters, w.sequences);

    EncoderConfig cfg;
    cfg.num_clusters = w.clusters.num_clusters();
    Rng init(derive_seed(seed, "init"));
    TrainConfig tc;
    tc.phase = Phase::Pretrain;
    tc.steps = scale.pretrain_steps;
    tc.seed = seed;
    w.backbone = pretrain(tc, EncoderModel::create_backbone(cfg, init), w.select(0, "train")).model;
    return w;
}

TrainResult run_continual(const World& world, const ContinualArm& arm, const Scale& scale) {
    TrainConfig tc;
    tc.phase = Phase::Continual;
    tc.steps = scale.continual_steps;
    tc.seed = world.seed;
    tc.replay_ratio = arm.replay_ratio;
    tc.lb_coef = arm.lb_coef;
    LamerLayout layout;
    layout.plan = arm.plan;
    Rng rng(derive_seed(world.seed, "reservoir"));
    auto reservoir = draw_reservoir(world.select(0, "train"), scale.reservoir, rng);
    return continual_train(tc, world.backbone, layout, world.new_languages_train(), std::move(reservoir));
}

double dispatch_cv(const EncoderModel& model, const std::vector<const Sequence*>& seqs) {
    const std::size_t L = model.layers.size();
    std::vector<LoadStats> stats(L);
    const MaskSpec none;
    for (const auto* s : seqs) {
        const auto out = encoder_forward(s->frames, none, model);
        for (std::size_t l = 0; l < L; ++l) {
            if (out.stats[l].num_experts() == 0) continue;
            if (stats[l].num_experts() == 0) stats[l] = LoadStats(out.stats[l].num_experts(), out.stats[l].top_k);
            stats[l].merge(out.stats[l]);
        }
    }
    double total = 0.0;
    std::size_t layers = 0;
    for (const auto& st : stats) {
        if (st.num_experts() == 0) continue;
        const auto f = st.dispatch_fraction();
        const double mean = 1.0 / static_cast<double>(f.size());
        double var = 0.0;
        for (double v : f) var += (v - mean) * (v - mean);
        total += std::sqrt(var / static_cast<double>(f.size())) / mean;
        ++layers;
    }
    return total / static_cast<double>(layers);
}

}  // namespace lamer::experiments
