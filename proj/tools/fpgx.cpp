#include <CLI11.hpp>

#include <cerrno>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "fpgx/analysis.hpp"
#include "fpgx/checkpoint.hpp"
#include "fpgx/config.hpp"
#include "fpgx/growth.hpp"
#include "fpgx/serde.hpp"
#include "fpgx/tasks.hpp"
#include "fpgx/training.hpp"
#include "fpgx/transformer.hpp"

namespace fs = std::filesystem;
using fpgx::Index;
using fpgx::Json;

namespace {

constexpr const char* kToolVersion = "fpgx 1.0.0";

void emit(const Json& j) { std::fputs((j.dump(2) + "\n").c_str(), stdout); }

int fail_json(const std::string& type, const std::string& message, int code) {
  Json err;
  err["tool_version"] = kToolVersion;
  err["error"] = {{"type", type}, {"message", message}};
  std::fputs((err.dump() + "\n").c_str(), stderr);
  return code;
}

Json base_json() {
  Json j;
  j["tool_version"] = kToolVersion;
  return j;
}

int parse_int(const std::string& tok, const std::string& what) {
  errno = 0;
  char* end = nullptr;
  const long v = std::strtol(tok.c_str(), &end, 10);
  if (tok.empty() || end != tok.c_str() + tok.size() || errno == ERANGE || v < INT_MIN ||
      v > INT_MAX)
    throw fpgx::InputError(what + ": not an integer: '" + tok + "'");
  return static_cast<int>(v);
}

std::vector<int> parse_int_list(const std::string& text, const std::string& what) {
  std::vector<int> out;
  size_t pos = 0;
  while (pos <= text.size()) {
    const size_t comma = text.find(',', pos);
    const size_t end = comma == std::string::npos ? text.size() : comma;
    out.push_back(parse_int(text.substr(pos, end - pos), what));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (out.empty()) throw fpgx::InputError(what + ": empty list");
  return out;
}

std::optional<std::vector<int>> parse_layer_set(const std::string& text) {
  if (text == "all") return std::nullopt;
  return parse_int_list(text, "layers");
}

fpgx::GrowthInitializer initializer_from_cli(const std::string& name) {
  if (name == "duplicate") return fpgx::GrowthInitializer::Duplicate;
  if (name == "zero" || name == "zero_init") return fpgx::GrowthInitializer::ZeroInit;
  throw fpgx::InputError("init: expected duplicate|zero, got '" + name + "'");
}

Json parse_json_file(const std::string& path, const std::string& what) {
  try {
    return Json::parse(fpgx::read_file(path));
  } catch (const Json::exception& e) {
    throw fpgx::InputError(what + ": invalid JSON in " + path + ": " + e.what());
  }
}

fpgx::ExperimentConfig load_experiment(const std::string& path) {
  fpgx::ExperimentConfig e = fpgx::parse_experiment_config(fpgx::read_file(path));
  if (e.out_checkpoint.empty() || e.out_runlog.empty())
    throw fpgx::InputError("experiment config: outputs.checkpoint and outputs.runlog required");
  return e;
}

fpgx::ModelParams<double> require_f64(fpgx::AnyParams&& any, const std::string& what) {
  if (!std::holds_alternative<fpgx::ModelParams<double>>(any))
    throw fpgx::InputError(what + ": float64 checkpoint required");
  return std::move(std::get<fpgx::ModelParams<double>>(any));
}

std::string with_suffix(const std::string& path, const std::string& suffix) {
  const size_t dot = path.find_last_of('.');
  const size_t slash = path.find_last_of("/\\");
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash))
    return path + suffix;
  return path.substr(0, dot) + suffix + path.substr(dot);
}

std::string sidecar_path(const std::string& csv_path) {
  const size_t dot = csv_path.find_last_of('.');
  const size_t slash = csv_path.find_last_of("/\\");
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash))
    return csv_path + ".json";
  return csv_path.substr(0, dot) + ".json";
}

Json dims_json(const std::vector<Index>& dims) {
  Json a = Json::array();
  for (Index d : dims) a.push_back(d);
  return a;
}

Json receipt_to_json(const fpgx::GrowthReceipt& r) {
  Json j = base_json();
  j["k"] = r.k;
  j["strategy"] = fpgx::strategy_name(r.strategy);
  j["initializer"] = fpgx::initializer_name(r.initializer);
  j["original_param_count"] = r.original_param_count;
  j["added_param_count"] = r.added_param_count;
  j["trainable_param_count"] = r.trainable_param_count;
  j["trainable_fraction_of_original"] = r.trainable_fraction_of_original;
  Json layers = Json::array();
  for (const fpgx::LayerGrowthRecord& rec : r.per_layer)
    layers.push_back({{"layer", rec.layer}, {"p_before", rec.p_before}, {"p_after", rec.p_after}});
  j["per_layer"] = layers;
  return j;
}

Json fv_to_json(const fpgx::FunctionVector& fv) {
  Json j = base_json();
  j["task_id"] = fv.task_id;
  j["k_top"] = fv.k_top;
  j["vector_dim"] = fv.vector.size();
  j["vector_b64"] = fpgx::base64_encode(reinterpret_cast<const unsigned char*>(fv.vector.data()),
                                        sizeof(double) * size_t(fv.vector.size()));
  Json heads = Json::array();
  for (const fpgx::FvHead& h : fv.heads)
    heads.push_back({{"layer", h.layer}, {"head", h.head}, {"cie", h.cie}});
  j["heads"] = heads;
  return j;
}

fpgx::FunctionVector fv_from_json(const Json& j, const std::string& what) {
  try {
    fpgx::detail::reject_unknown_keys(
        j, {"tool_version", "task_id", "k_top", "vector_dim", "vector_b64", "heads"}, what);
    fpgx::FunctionVector fv;
    fv.task_id = j.at("task_id").get<std::string>();
    fv.k_top = j.at("k_top").get<int>();
    const std::vector<unsigned char> bytes =
        fpgx::base64_decode(j.at("vector_b64").get<std::string>());
    if (bytes.size() % sizeof(double) != 0)
      throw fpgx::InputError(what + ": vector payload is not a float64 array");
    const Index dim = static_cast<Index>(bytes.size() / sizeof(double));
    if (j.at("vector_dim").get<Index>() != dim)
      throw fpgx::InputError(what + ": vector_dim disagrees with the payload");
    fv.vector = fpgx::Vec<double>(dim);
    std::memcpy(fv.vector.data(), bytes.data(), bytes.size());
    for (const Json& h : j.at("heads")) {
      fpgx::detail::reject_unknown_keys(h, {"layer", "head", "cie"}, what + " head");
      fv.heads.push_back({h.at("layer").get<int>(), h.at("head").get<int>(),
                          h.at("cie").get<double>()});
    }
    return fv;
  } catch (const Json::exception& e) {
    throw fpgx::InputError(what + ": malformed function vector file: " + e.what());
  }
}

bool plan_equal(const fpgx::GrowthPlan& a, const fpgx::GrowthPlan& b) {
  return a.k == b.k && a.layers == b.layers && a.strategy == b.strategy &&
         a.initializer == b.initializer && a.noise_scale == b.noise_scale;
}

struct GrowOpts {
  std::string in, out, layers = "all", strategy = "gfreeze", init = "duplicate", receipt;
  int k = 2;
  double noise = 0.0;
  std::uint64_t seed = 0;
};

int run_grow(const GrowOpts& o) {
  auto [any, meta] = fpgx::load_checkpoint(o.in);
  fpgx::GrowthPlan plan;
  plan.k = o.k;
  plan.layers = parse_layer_set(o.layers);
  plan.strategy = fpgx::strategy_from_name(o.strategy);
  plan.initializer = initializer_from_cli(o.init);
  plan.noise_scale = o.noise;

  Json rj;
  std::visit(
      [&](auto& params) {
        fpgx::Rng rng(o.seed);
        auto [grown, mask, receipt] = fpgx::grow_model(params, plan, rng);
        fpgx::CheckpointMeta out_meta;
        out_meta.lineage = meta.lineage;
        out_meta.lineage.push_back(plan);
        out_meta.mask = std::move(mask);
        out_meta.labels = meta.labels;
        fpgx::save_checkpoint(grown, out_meta, o.out);
        rj = receipt_to_json(receipt);
      },
      any);

  const std::string receipt_path = o.receipt.empty() ? o.out + ".receipt.json" : o.receipt;
  fpgx::atomic_write_file(receipt_path, rj.dump(2) + "\n");
  emit(rj);
  return 0;
}

struct VerifyOpts {
  std::string original, grown;
  Index samples = 0, seq_len = 0;
  double tol = 0.0;
  std::uint64_t seed = 0;
};

int run_verify(const VerifyOpts& o) {
  auto [oany, ometa] = fpgx::load_checkpoint(o.original);
  auto [gany, gmeta] = fpgx::load_checkpoint(o.grown);
  if (oany.index() != gany.index())
    throw fpgx::InputError("verify: checkpoint dtypes differ");

  bool prefix_ok = gmeta.lineage.size() >= ometa.lineage.size();
  for (size_t i = 0; prefix_ok && i < ometa.lineage.size(); ++i)
    prefix_ok = plan_equal(ometa.lineage[i], gmeta.lineage[i]);
  const std::vector<fpgx::GrowthPlan> applied(
      gmeta.lineage.begin() + (prefix_ok ? std::ptrdiff_t(ometa.lineage.size()) : 0),
      prefix_ok ? gmeta.lineage.end() : gmeta.lineage.begin());

  Json out = base_json();
  int code = 2;
  std::visit(
      [&]<class S>(const fpgx::ModelParams<S>& orig) {
        const auto& grown = std::get<fpgx::ModelParams<S>>(gany);
        const fpgx::ModelConfig expected = fpgx::apply_lineage(orig.config, applied);
        const bool lineage_ok = prefix_ok && expected.mlp_dims == grown.config.mlp_dims;
        fpgx::Rng rng(o.seed);
        const fpgx::VerificationReport report =
            fpgx::verify_preservation(orig, grown, o.samples, o.seq_len, rng, o.tol);
        const bool pass = report.pass && lineage_ok;
        out["pass"] = pass;
        out["max_abs_dev"] = report.max_abs_dev;
        out["max_rel_dev"] = report.max_rel_dev;
        out["tol"] = report.tol;
        out["n_samples"] = report.n_samples;
        out["seq_len"] = report.seq_len;
        out["lineage_consistent"] = lineage_ok;
        out["expected_mlp_dims"] = dims_json(expected.mlp_dims);
        out["grown_mlp_dims"] = dims_json(grown.config.mlp_dims);
        code = pass ? 0 : 2;
      },
      oany);
  emit(out);
  return code;
}

struct TrainOpts {
  std::string config, in, snapshots;
};

int run_pretrain(const TrainOpts& o) {
  const fpgx::ExperimentConfig e = load_experiment(o.config);
  auto [params, log] = fpgx::pretrain<double>(e.train, e.task_old, e.model);
  fpgx::CheckpointMeta meta;
  meta.labels["phase"] = "pretrain";
  meta.labels["step"] = std::to_string(log.entries.back().step);
  fpgx::save_checkpoint(params, meta, e.out_checkpoint);
  fpgx::atomic_write_file(e.out_runlog, log.to_csv());

  Json j = base_json();
  j["checkpoint"] = e.out_checkpoint;
  j["runlog"] = e.out_runlog;
  j["steps_run"] = log.entries.back().step;
  j["final_old_acc"] = log.entries.back().old_acc;
  emit(j);
  return 0;
}

int run_finetune(const TrainOpts& o) {
  const fpgx::ExperimentConfig e = load_experiment(o.config);
  if (!e.task_new) throw fpgx::InputError("experiment config: task_new required for finetune");

  fpgx::ModelParams<double> start;
  fpgx::CheckpointMeta in_meta;
  if (!o.in.empty()) {
    auto [any, m] = fpgx::load_checkpoint(o.in);
    start = require_f64(std::move(any), "finetune");
    in_meta = std::move(m);
  } else {
    start = fpgx::init_params<double>(e.model);
  }

  std::vector<fpgx::GrowthPlan> lineage = in_meta.lineage;
  std::optional<fpgx::FreezeMask> mask = in_meta.mask;
  if (e.growth) {
    fpgx::Rng rng(e.train.seed ^ 0x5157ull);
    auto [grown, new_mask, receipt] = fpgx::grow_model(start, *e.growth, rng);
    start = std::move(grown);
    lineage.push_back(*e.growth);
    mask = std::move(new_mask);
  }

  fpgx::CheckpointCallback<double> on_checkpoint;
  if (!o.snapshots.empty()) {
    fs::create_directories(o.snapshots);
    on_checkpoint = [&](int step, const fpgx::ModelParams<double>& p) {
      fpgx::CheckpointMeta m;
      m.lineage = lineage;
      m.mask = mask;
      m.labels["phase"] = "finetune";
      m.labels["step"] = std::to_string(step);
      char name[32];
      std::snprintf(name, sizeof(name), "step_%06d.fpgx", step);
      fpgx::save_checkpoint(p, m, (fs::path(o.snapshots) / name).string());
    };
  }

  auto [tuned, log] = fpgx::finetune(start, mask ? &*mask : nullptr, e.train, *e.task_new,
                                     e.task_old, on_checkpoint);
  fpgx::CheckpointMeta meta;
  meta.lineage = lineage;
  meta.mask = mask;
  meta.labels["phase"] = "finetune";
  meta.labels["step"] = std::to_string(log.entries.back().step);
  fpgx::save_checkpoint(tuned, meta, e.out_checkpoint);
  fpgx::atomic_write_file(e.out_runlog, log.to_csv());

  Json j = base_json();
  j["checkpoint"] = e.out_checkpoint;
  j["runlog"] = e.out_runlog;
  j["masked"] = mask.has_value();
  j["final_new_acc"] = log.entries.back().new_acc;
  j["final_old_acc"] = log.entries.back().old_acc;
  if (!o.snapshots.empty()) j["snapshots"] = o.snapshots;
  emit(j);
  return 0;
}

struct SelectOpts {
  std::string before, after;
  int top = 1;
};

int run_select_layers(const SelectOpts& o) {
  auto [aany, am] = fpgx::load_checkpoint(o.before);
  auto [bany, bm] = fpgx::load_checkpoint(o.after);
  if (aany.index() != bany.index())
    throw fpgx::InputError("select-layers: checkpoint dtypes differ");
  std::vector<int> layers;
  std::visit(
      [&]<class S>(const fpgx::ModelParams<S>& before) {
        layers = fpgx::select_layers(before, std::get<fpgx::ModelParams<S>>(bany), o.top);
      },
      aany);
  Json j = base_json();
  j["top"] = o.top;
  j["layers"] = layers;
  emit(j);
  return 0;
}

struct SweepOpts {
  std::string config, n, in;
};

int run_sweep(const SweepOpts& o) {
  const fpgx::ExperimentConfig e = load_experiment(o.config);
  if (!e.task_new) throw fpgx::InputError("experiment config: task_new required for sweep");
  const std::vector<int> n_values = parse_int_list(o.n, "sweep --n");

  fpgx::ModelParams<double> base =
      o.in.empty() ? fpgx::pretrain<double>(e.train, e.task_old, e.model).first
                   : require_f64(fpgx::load_checkpoint(o.in).first, "sweep");
  const fpgx::GrowthPlan tpl = e.growth.value_or(fpgx::GrowthPlan{});

  const std::vector<fpgx::SweepArm> arms =
      fpgx::sweep_n_layers(base, n_values, tpl, *e.task_new, e.task_old, e.train);

  Json j = base_json();
  Json arms_json = Json::array();
  for (const fpgx::SweepArm& arm : arms) {
    const std::string path = with_suffix(e.out_runlog, "_n" + std::to_string(arm.n));
    fpgx::atomic_write_file(path, arm.log.to_csv());
    arms_json.push_back({{"n", arm.n},
                         {"layers", arm.layers},
                         {"runlog", path},
                         {"final_new_acc", arm.log.entries.back().new_acc},
                         {"final_old_acc", arm.log.entries.back().old_acc}});
  }
  j["arms"] = arms_json;
  emit(j);
  return 0;
}

struct RankOpts {
  std::string dir, out;
};

int run_analyze_rank(const RankOpts& o) {
  if (!fs::is_directory(o.dir))
    throw fpgx::InputError("analyze-rank: not a directory: " + o.dir);
  std::vector<fs::path> paths;
  for (const auto& entry : fs::directory_iterator(o.dir))
    if (entry.is_regular_file() && entry.path().extension() == ".fpgx")
      paths.push_back(entry.path());
  std::sort(paths.begin(), paths.end());
  if (paths.size() < 2)
    throw fpgx::InputError("analyze-rank: need at least two .fpgx files in " + o.dir);

  std::vector<fpgx::ModelParams<double>> models;
  std::vector<int> labels;
  bool all_labeled = true;
  for (const fs::path& p : paths) {
    auto [any, meta] = fpgx::load_checkpoint(p.string());
    models.push_back(require_f64(std::move(any), "analyze-rank"));
    const auto it = meta.labels.find("step");
    if (it == meta.labels.end())
      all_labeled = false;
    else
      labels.push_back(parse_int(it->second, "analyze-rank step label"));
  }

  const fpgx::RankTrace trace =
      fpgx::rank_trace(models, all_labeled ? labels : std::vector<int>{});

  std::string csv = "interval";
  const int n_layers = models.front().config.n_layers;
  for (int l = 0; l < n_layers; ++l) csv += ",layer_" + std::to_string(l);
  csv += "\n";
  char buf[64];
  for (Index t = 0; t < trace.grid.rows(); ++t) {
    csv += std::to_string(trace.step_labels[size_t(t)]) + ":" +
           std::to_string(trace.step_labels[size_t(t) + 1]);
    for (int l = 0; l < n_layers; ++l) {
      if (trace.zero_update[size_t(t)][size_t(l)]) {
        csv += ",nan";
      } else {
        std::snprintf(buf, sizeof(buf), ",%.17g", trace.grid(t, l));
        csv += buf;
      }
    }
    csv += "\n";
  }
  fpgx::atomic_write_file(o.out, csv);

  Json sidecar = base_json();
  sidecar["step_labels"] = trace.step_labels;
  Json names = Json::array();
  for (const fs::path& p : paths) names.push_back(p.filename().string());
  sidecar["checkpoints"] = names;
  Json zeros = Json::array();
  for (const auto& row : trace.zero_update) {
    Json r = Json::array();
    for (bool z : row) r.push_back(z);
    zeros.push_back(r);
  }
  sidecar["zero_update"] = zeros;
  const std::string side_path = sidecar_path(o.out);
  fpgx::atomic_write_file(side_path, sidecar.dump(2) + "\n");

  Json j = base_json();
  j["grid_csv"] = o.out;
  j["sidecar"] = side_path;
  j["n_intervals"] = trace.grid.rows();
  j["n_layers"] = n_layers;
  emit(j);
  return 0;
}

struct FvOpts {
  std::string model, task, out;
  int k_top = 10;
  Index prompts = 32;
  std::uint64_t seed = 0;
};

int run_fv(const FvOpts& o) {
  auto [any, meta] = fpgx::load_checkpoint(o.model);
  const fpgx::ModelParams<double> model = require_f64(std::move(any), "fv");
  const fpgx::TaskSpec task = fpgx::task_from_json(parse_json_file(o.task, "fv task"));

  const std::vector<fpgx::IclPrompt> clean = fpgx::make_icl_prompts(task, o.prompts, o.seed);
  fpgx::Rng rng(o.seed ^ 0xC0FFEEull);
  std::vector<fpgx::IclPrompt> corrupted;
  corrupted.reserve(clean.size());
  for (const fpgx::IclPrompt& p : clean) corrupted.push_back(fpgx::corrupt_prompt(p, rng));

  const fpgx::FunctionVector fv = fpgx::build_function_vector(
      model, clean, corrupted, o.k_top, fpgx::task_kind_name(task.kind));
  const Json j = fv_to_json(fv);
  fpgx::atomic_write_file(o.out, j.dump(2) + "\n");
  emit(j);
  return 0;
}

struct FvCompareOpts {
  std::string a, b;
};

int run_fv_compare(const FvCompareOpts& o) {
  const fpgx::FunctionVector a = fv_from_json(parse_json_file(o.a, "fv-compare"), "fv a");
  const fpgx::FunctionVector b = fv_from_json(parse_json_file(o.b, "fv-compare"), "fv b");
  const fpgx::FvSimilarity sim = fv_similarity(a, b);
  Json j = base_json();
  j["cosine"] = sim.cosine;
  j["overlap"] = sim.overlap;
  j["k_top_a"] = a.k_top;
  j["k_top_b"] = b.k_top;
  j["task_a"] = a.task_id;
  j["task_b"] = b.task_id;
  emit(j);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"function-preserving transformer MLP growth toolkit"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  GrowOpts grow;
  CLI::App* g = app.add_subcommand("grow", "expand MLP layers of a checkpoint");
  g->add_option("--in", grow.in, "input checkpoint")->required();
  g->add_option("--out", grow.out, "output checkpoint")->required();
  g->add_option("--k", grow.k, "expansion factor")->required();
  g->add_option("--layers", grow.layers, "all or comma-separated layer indices");
  g->add_option("--strategy", grow.strategy, "gfreeze or gtrain");
  g->add_option("--init", grow.init, "duplicate or zero");
  g->add_option("--noise", grow.noise, "symmetry-breaking noise scale");
  g->add_option("--seed", grow.seed, "rng seed for noise");
  g->add_option("--receipt", grow.receipt, "receipt path (default <out>.receipt.json)");

  VerifyOpts verify;
  CLI::App* v = app.add_subcommand("verify", "check a grown checkpoint preserves the original");
  v->add_option("--original", verify.original, "original checkpoint")->required();
  v->add_option("--grown", verify.grown, "grown checkpoint")->required();
  v->add_option("--samples", verify.samples, "random probe sequences")->required();
  v->add_option("--seq-len", verify.seq_len, "probe sequence length")->required();
  v->add_option("--tol", verify.tol, "max absolute logit deviation")->required();
  v->add_option("--seed", verify.seed, "probe rng seed");

  TrainOpts pre;
  CLI::App* p = app.add_subcommand("pretrain", "train a fresh model on the old task");
  p->add_option("--config", pre.config, "experiment config JSON")->required();

  TrainOpts fin;
  CLI::App* f = app.add_subcommand("finetune", "fine-tune on the new task");
  f->add_option("--config", fin.config, "experiment config JSON")->required();
  f->add_option("--in", fin.in, "starting checkpoint (fresh init when omitted)");
  f->add_option("--snapshots", fin.snapshots, "directory for per-eval checkpoints");

  SelectOpts sel;
  CLI::App* s = app.add_subcommand("select-layers", "rank layers by MLP update magnitude");
  s->add_option("--before", sel.before, "checkpoint before fine-tuning")->required();
  s->add_option("--after", sel.after, "checkpoint after fine-tuning")->required();
  s->add_option("--top", sel.top, "how many layers to return")->required();

  SweepOpts swp;
  CLI::App* w = app.add_subcommand("sweep", "fine-tune once per grown-layer count");
  w->add_option("--config", swp.config, "experiment config JSON")->required();
  w->add_option("--n", swp.n, "comma-separated layer counts")->required();
  w->add_option("--in", swp.in, "base checkpoint (pretrains when omitted)");

  RankOpts rank;
  CLI::App* r = app.add_subcommand("analyze-rank", "effective-rank grid over checkpoints");
  r->add_option("--checkpoints", rank.dir, "directory of .fpgx snapshots")->required();
  r->add_option("--out", rank.out, "output CSV grid")->required();

  FvOpts fv;
  CLI::App* q = app.add_subcommand("fv", "extract a function vector");
  q->add_option("--model", fv.model, "model checkpoint")->required();
  q->add_option("--task", fv.task, "task spec JSON")->required();
  q->add_option("--k-top", fv.k_top, "heads summed into the vector");
  q->add_option("--out", fv.out, "output JSON")->required();
  q->add_option("--prompts", fv.prompts, "prompt count");
  q->add_option("--seed", fv.seed, "prompt rng seed");

  FvCompareOpts cmp;
  CLI::App* c = app.add_subcommand("fv-compare", "similarity of two function vectors");
  c->add_option("--a", cmp.a, "first fv JSON")->required();
  c->add_option("--b", cmp.b, "second fv JSON")->required();

  int rc = 0;
  g->callback([&] { rc = run_grow(grow); });
  v->callback([&] { rc = run_verify(verify); });
  p->callback([&] { rc = run_pretrain(pre); });
  f->callback([&] { rc = run_finetune(fin); });
  s->callback([&] { rc = run_select_layers(sel); });
  w->callback([&] { rc = run_sweep(swp); });
  r->callback([&] { rc = run_analyze_rank(rank); });
  q->callback([&] { rc = run_fv(fv); });
  c->callback([&] { rc = run_fv_compare(cmp); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail_json("InputError", e.what(), 1);
  } catch (const fpgx::InputError& e) {
    return fail_json("InputError", e.what(), 1);
  } catch (const fpgx::PlanError& e) {
    return fail_json("PlanError", e.what(), 1);
  } catch (const fpgx::StructureError& e) {
    return fail_json("StructureError", e.what(), 1);
  } catch (const fpgx::BadMagic& e) {
    return fail_json("BadMagic", e.what(), 1);
  } catch (const fpgx::VersionMismatch& e) {
    return fail_json("VersionMismatch", e.what(), 1);
  } catch (const fpgx::CorruptTable& e) {
    return fail_json("CorruptTable", e.what(), 1);
  } catch (const fpgx::ShapeMismatch& e) {
    return fail_json("ShapeMismatch", e.what(), 1);
  } catch (const fpgx::DimensionError& e) {
    return fail_json("DimensionError", e.what(), 1);
  } catch (const fpgx::ConvergenceError& e) {
    return fail_json("ConvergenceError", e.what(), 3);
  } catch (const fpgx::NumericError& e) {
    return fail_json("NumericError", e.what(), 3);
  } catch (const fpgx::ZeroVectorError& e) {
    return fail_json("ZeroVectorError", e.what(), 3);
  } catch (const fpgx::ZeroMatrixError& e) {
    return fail_json("ZeroMatrixError", e.what(), 3);
  } catch (const std::exception& e) {
    return fail_json("Error", e.what(), 3);
  }
  return rc;
}
