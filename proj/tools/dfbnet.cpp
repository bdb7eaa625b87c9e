#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "dfb/eval.hpp"
#include "dfb/gradcheck.hpp"
#include "dfb/synth.hpp"
#include "dfb/train.hpp"

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw dfb::Error("cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw dfb::Error("failed writing " + path.string());
}

fs::path confusion_path(const fs::path& report) {
  fs::path p = report;
  p.replace_extension(".confusion.csv");
  return p;
}

int run_synth(const fs::path& config, const fs::path& out) {
  const dfb::SynthConfig cfg = dfb::read_synth_config(config);
  const dfb::SynthOutput r = dfb::generate(cfg, out);
  std::printf("train: %zu clips -> %s\nval: %zu clips -> %s\n", r.train.entries.size(), r.train_manifest.c_str(),
              r.val.entries.size(), r.val_manifest.c_str());
  return 0;
}

int run_train(const fs::path& config, const fs::path& data, const fs::path& val, const fs::path& out) {
  const dfb::TrainConfig cfg = dfb::read_run_config(config);
  dfb::TrainHooks hooks;
  hooks.on_epoch = [](const dfb::MetricsRow& m) {
    std::printf("epoch %zu  L_total=%.5f  L_comb=%.5f  L_avg=%.5f  L_max=%.5f  L_xchannel=%.5f  train=%.4f  val=%.4f\n",
                m.epoch, m.total, m.comb, m.avg, m.max, m.xchannel, m.train_top1, m.val_top1);
    std::fflush(stdout);
  };
  dfb::train_to_directory(cfg, data, val.empty() ? nullptr : &val, out, hooks);
  std::printf("checkpoint written to %s\n", out.c_str());
  return 0;
}

int run_eval(const fs::path& ckpt, const fs::path& data, const fs::path& meta, const fs::path& out) {
  const dfb::EvalReport r = dfb::evaluate_checkpoint(ckpt, data, meta.empty() ? nullptr : &meta);
  write_text(out, dfb::report_json(r) + "\n");
  write_text(confusion_path(out), dfb::confusion_csv(r));
  std::printf("clips=%zu top1=%.4f top5=%.4f\nreport: %s\nconfusion: %s\n", r.clips, r.top1, r.top5, out.c_str(),
              confusion_path(out).c_str());
  if (r.comb_identity_violations != 0) {
    std::fprintf(stderr, "z_comb identity violated on %zu clips\n", r.comb_identity_violations);
    return 3;
  }
  return 0;
}

int run_gradcheck(const std::string& op, bool full_head, std::uint64_t seed) {
  if (full_head == !op.empty()) throw dfb::Error("gradcheck needs exactly one of --op <name> or --full-head");
  const dfb::GradReport r = full_head ? dfb::full_head_gradcheck(seed) : dfb::op_gradcheck(op, seed);
  std::printf("%s\n%s", r.table().c_str(), r.key_values().c_str());
  return r.pass() ? 0 : 1;
}

template <typename T>
std::size_t localize_rows(const dfb::Checkpoint& ck, const dfb::ParamSet<T>& params, const dfb::ClipManifest& manifest,
                          std::size_t cls, std::size_t filter, std::string& csv, std::size_t& hits) {
  const dfb::ModelConfig& cfg = ck.config.model;
  const dfb::Dataset<T> data = dfb::load_dataset<T>(manifest, cfg.backbone);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const dfb::LocalizationResult r = dfb::localize(cfg, params, data.clips[i], data.boxes[i], data.labels[i], cls,
                                                    filter, data.ids[i], ck.config.algo);
    csv += dfb::localization_csv_row(r) + "\n";
    hits += r.hit ? 1 : 0;
  }
  return data.size();
}

int run_localize(const fs::path& ckpt, const fs::path& data, std::size_t cls, std::size_t filter, const fs::path& out) {
  const dfb::Checkpoint ck = dfb::load_checkpoint(ckpt);
  const dfb::ClipManifest manifest = dfb::read_manifest(data);
  if (manifest.classes != ck.config.model.head.classes) {
    throw dfb::Error("class-count mismatch: manifest " + data.string() + " has " + std::to_string(manifest.classes) +
                     " classes, checkpoint has " + std::to_string(ck.config.model.head.classes));
  }
  std::string csv = dfb::localization_csv_header() + "\n";
  std::size_t hits = 0, n = 0;
  if (ck.config.precision == 32) {
    n = localize_rows(ck, ck.params.cast<float>(), manifest, cls, filter, csv, hits);
  } else {
    n = localize_rows(ck, ck.params, manifest, cls, filter, csv, hits);
  }
  write_text(out, csv);
  std::printf("class %zu filter %zu: %zu/%zu hits -> %s\n", cls, filter, hits, n, out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Discriminative filter bank action recognition toolkit"};
  app.require_subcommand(1);

  fs::path synth_config, synth_out;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset and its manifests");
  synth->add_option("--config", synth_config, "Synth config file")->required();
  synth->add_option("--out", synth_out, "Output directory")->required();

  fs::path train_config, train_data, train_val, train_out;
  auto* train = app.add_subcommand("train", "Train a model and write a checkpoint with metrics.log");
  train->add_option("--config", train_config, "Run config file")->required();
  train->add_option("--data", train_data, "Training manifest")->required();
  train->add_option("--val", train_val, "Validation manifest (val-top1 column)");
  train->add_option("--out", train_out, "Checkpoint directory")->required();

  fs::path eval_ckpt, eval_data, eval_meta, eval_out;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint (JSON report plus confusion CSV)");
  eval->add_option("--ckpt", eval_ckpt, "Checkpoint directory")->required();
  eval->add_option("--data", eval_data, "Manifest")->required();
  eval->add_option("--meta", eval_meta, "Meta-category map");
  eval->add_option("--out", eval_out, "Report path")->required();

  std::string gc_op;
  bool gc_full = false;
  std::uint64_t gc_seed = 1;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  gc->add_option("--op", gc_op, "Single op")->check(CLI::IsMember(dfb::gradcheck_ops()));
  gc->add_flag("--full-head", gc_full, "Whole head on a micro-model");
  gc->add_option("--seed", gc_seed, "Seed")->required();

  fs::path loc_ckpt, loc_data, loc_out;
  std::size_t loc_class = 0, loc_filter = 0;
  auto* loc = app.add_subcommand("localize", "Maximal-response localization of one filter");
  loc->add_option("--ckpt", loc_ckpt, "Checkpoint directory")->required();
  loc->add_option("--data", loc_data, "Manifest")->required();
  loc->add_option("--class", loc_class, "Class")->required();
  loc->add_option("--filter", loc_filter, "Filter index within the class")->required();
  loc->add_option("--out", loc_out, "CSV path")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*synth) return run_synth(synth_config, synth_out);
    if (*train) return run_train(train_config, train_data, train_val, train_out);
    if (*eval) return run_eval(eval_ckpt, eval_data, eval_meta, eval_out);
    if (*gc) return run_gradcheck(gc_op, gc_full, gc_seed);
    if (*loc) return run_localize(loc_ckpt, loc_data, loc_class, loc_filter, loc_out);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
