#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "rareid/commands.hpp"

int main(int argc, char** argv) {
    using namespace rareid::cli;

    CLI::App app{"Attention re-identification network: train, evaluate, embed, verify gradients"};
    app.require_subcommand(1);

    TrainArgs train;
    std::string train_config, train_out;
    std::uint64_t train_seed = 0;
    auto* t = app.add_subcommand("train", "Train on the synthetic dataset and write checkpoints and a log");
    auto* t_config = t->add_option("--config", train_config, "JSON config file; omitted fields take defaults");
    auto* t_out = t->add_option("--out", train_out, "Output directory (overrides output_dir)");
    auto* t_seed = t->add_option("--seed", train_seed, "Random seed (overrides seed)");
    t->add_option("--set", train.overrides, "Dotted-path override, e.g. ablation.reverse_attention_on=false");
    bool no_reverse = false, no_aux = false;
    t->add_flag("--no-reverse-attention", no_reverse, "Drop the reverse-attention branch and its loss");
    t->add_flag("--no-multiscale-supervision", no_aux, "Drop the multi-scale supervision branches and their losses");

    EvalArgs eval;
    std::string eval_checkpoint, eval_config, eval_dataset, eval_out;
    auto* e = app.add_subcommand("eval", "Evaluate a checkpoint with mAP and CMC on query/gallery splits");
    e->add_option("--checkpoint", eval_checkpoint, "Checkpoint directory (full or inference)")->required();
    auto* e_config = e->add_option("--config", eval_config, "JSON patch applied to the checkpoint's dataset config");
    auto* e_dataset = e->add_option("--dataset", eval_dataset, "Exported dataset directory to evaluate instead");
    auto* e_out = e->add_option("--out", eval_out, "Directory for eval_report.json");
    e->add_option("--set", eval.overrides, "Dotted-path override of the dataset config");

    InferArgs infer;
    std::string infer_checkpoint, infer_image;
    auto* i = app.add_subcommand("infer", "Print the embedding of one image tensor file");
    i->add_option("--checkpoint", infer_checkpoint, "Checkpoint directory")->required();
    i->add_option("image", infer_image, "Image tensor file, shape 3xHxW")->required();

    GradCheckArgs grad;
    auto* g = app.add_subcommand("gradcheck", "Finite-difference check of analytic gradients");
    g->add_option("scope", grad.scope, "attention, multiscale, losses, network or all")->capture_default_str();
    g->add_option("--seed", grad.seed, "Seed for the random instances")->capture_default_str();
    g->add_option("--tol", grad.tol, "Maximum accepted relative error")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int code = app.exit(err);
        return code == 0 ? 0 : kConfigError;
    }

    if (t->parsed()) {
        if (*t_config) train.config = train_config;
        if (*t_out) train.out = train_out;
        if (*t_seed) train.seed = train_seed;
        if (no_reverse) train.overrides.push_back("ablation.reverse_attention_on=false");
        if (no_aux) train.overrides.push_back("ablation.multiscale_supervision_on=false");
        return cmd_train(train, std::cout, std::cerr);
    }
    if (e->parsed()) {
        eval.checkpoint = eval_checkpoint;
        if (*e_config) eval.config = eval_config;
        if (*e_dataset) eval.dataset = eval_dataset;
        if (*e_out) eval.out = eval_out;
        return cmd_eval(eval, std::cout, std::cerr);
    }
    if (i->parsed()) {
        infer.checkpoint = infer_checkpoint;
        infer.image = infer_image;
        return cmd_infer(infer, std::cout, std::cerr);
    }
    return cmd_gradcheck(grad, std::cout, std::cerr);
}
