#include "combemb/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "combemb/cluster_eval.hpp"
#include "combemb/config.hpp"
#include "combemb/dataset.hpp"
#include "combemb/embedding.hpp"
#include "combemb/error.hpp"
#include "combemb/metascheme.hpp"
#include "combemb/retrieval.hpp"
#include "combemb/trainer.hpp"

namespace combemb::cli {

namespace {

using Json = nlohmann::ordered_json;

class UsageError : public Error {
 public:
  using Error::Error;
};

/// Options shared by every verb.
struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> overrides;  // key=value

  KeyValueConfig resolve() const {
    KeyValueConfig cfg = config_path.empty() ? KeyValueConfig{} : KeyValueConfig::load(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + kv + "'");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) cfg.set("seed", std::to_string(*seed));
    return cfg;
  }
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "key = value configuration file");
  app->add_option("--seed", c.seed, "overrides the configuration seed");
  app->add_option("--set", c.overrides, "override a configuration key (key=value)")->take_all();
}

void emit(std::ostream& out, const Json& j, const std::string& out_path) {
  const auto text = j.dump();
  out << text << '\n';
  if (!out_path.empty()) {
    std::ofstream f(out_path, std::ios::trunc);
    if (!f) throw FormatError("cannot write " + out_path);
    f << text << '\n';
  }
}

std::vector<int> labels_of(const FeatureTable& table) {
  std::vector<int> out;
  out.reserve(table.size());
  for (const auto& r : table.records()) {
    if (!r.label) throw DataError("record " + std::to_string(r.id) + " has no ground-truth label");
    out.push_back(*r.label);
  }
  return out;
}

ClassEmbeddingMode parse_mode(const std::string& s) {
  if (s == "classifier_weights") return ClassEmbeddingMode::kClassifierWeights;
  if (s == "class_means") return ClassEmbeddingMode::kClassMeans;
  throw ParameterError("embedding_mode must be classifier_weights or class_means, got '" + s + "'");
}

/// Row i = the evaluation embedding of record i.
Eigen::MatrixXd eval_embeddings(const Model& model, const FeatureTable& table, const std::string& kind) {
  Eigen::MatrixXd e(static_cast<Eigen::Index>(table.size()), model.shape.embed_dim());
  for (std::size_t i = 0; i < table.size(); ++i) {
    VectorXd z = encode(model, table.features(i));
    if (kind == "pi") {
      z = comb_embed(z, model.params.prototypes, model.hyper.lambda);
    } else if (kind == "z_normalized") {
      z = l2_normalize(z);
    } else if (kind != "z") {
      throw ParameterError("eval_embedding must be z, z_normalized or pi, got '" + kind + "'");
    }
    e.row(static_cast<Eigen::Index>(i)) = z.transpose();
  }
  return e;
}

// ---------------------------------------------------------------------------

struct Paths {
  std::string data, split, scheme, model, codes, queries, out, test_out, trace, json_out;
  std::size_t topk = 10;
};

Json cmd_gen_data(const KeyValueConfig& cfg, const Paths& p) {
  SyntheticParams sp;
  sp.n_classes = cfg.get_int("n_classes", sp.n_classes);
  sp.dim = cfg.get_int("dim", sp.dim);
  sp.n_per_class = cfg.get_int("n_per_class", sp.n_per_class);
  sp.separation = cfg.get_double("separation", sp.separation);
  sp.noise_sigma = cfg.get_double("noise_sigma", sp.noise_sigma);
  sp.seed = cfg.get_u64("seed", sp.seed);
  auto train = generate_synthetic(sp);
  std::optional<FeatureTable> test;
  if (!p.test_out.empty()) test = generate_synthetic_holdout(sp, cfg.get_int("n_test_per_class", 100));
  if (cfg.has("class_permutation_seed")) {
    const auto perm = cfg.get_u64("class_permutation_seed", 0);
    train = permute_class_labels(train, perm);
    if (test) test = permute_class_labels(*test, perm);
  }
  save_feature_table(train, p.out);
  Json j{{"records", train.size()}, {"dim", train.dim()}, {"classes", sp.n_classes}};
  if (test) {
    save_feature_table(*test, p.test_out);
    j["test_records"] = test->size();
  }
  return j;
}

Json cmd_split(const KeyValueConfig& cfg, const Paths& p) {
  const auto table = load_feature_table(p.data);
  const auto split = make_open_set_split(table, cfg.get_double("seen_fraction", 0.75),
                                         cfg.get_double("labeled_fraction", 0.5), cfg.get_u64("seed", 0));
  save_split(split, p.out);
  return {{"seen_classes", split.seen_classes},
          {"novel_classes", split.novel_classes},
          {"labeled", split.labeled_ids.size()},
          {"unlabeled", split.unlabeled_ids.size()}};
}

Json cmd_build_scheme(const KeyValueConfig& cfg, const Paths& p) {
  const auto table = load_feature_table(p.data);
  const auto split = load_split(p.split);
  const auto seed = cfg.get_u64("seed", 0);
  PretrainOptions pre;
  pre.seed = seed;
  pre.epochs = cfg.get_int("pretrain_epochs", pre.epochs);
  pre.learning_rate = cfg.get_double("pretrain_learning_rate", pre.learning_rate);
  pre.temperature = cfg.get_double("pretrain_temperature", pre.temperature);
  const auto embs = class_embeddings(table, split, identity_feature_map(),
                                     parse_mode(cfg.get_string("embedding_mode", "classifier_weights")), pre);
  SchemeOptions so;
  so.num_sets = cfg.get_int("num_sets", so.num_sets);
  so.meta_classes = cfg.get_int("meta_classes", so.meta_classes);
  so.subspace_dim = cfg.get_int("subspace_dim", so.subspace_dim);
  so.restarts = cfg.get_int("kmeans_restarts", so.restarts);
  so.seed = seed;
  const auto scheme = build_scheme(embs, so);
  save_scheme(scheme, p.out);
  return {{"num_sets", scheme.num_sets()},
          {"meta_classes", scheme.sizes()},
          {"subspace_dim", scheme.subspace_dim()},
          {"bits", code_bits(scheme)}};
}

Json cmd_train(const KeyValueConfig& cfg, const Paths& p) {
  const auto table = load_feature_table(p.data);
  const auto split = load_split(p.split);
  const auto scheme = load_scheme(p.scheme);
  const auto config = TrainConfig::from(cfg);
  const auto result = train(table, split, scheme, config);
  save_model(result.model, p.out);
  if (!p.trace.empty()) save_trace(result.trace, p.trace);
  Json j{{"steps", result.trace.size()}};
  if (!result.trace.empty()) {
    const auto& last = result.trace.back();
    j["final"] = {{"meta", last.meta}, {"sim", last.sim}, {"cons", last.cons}, {"total", last.total}};
  }
  return j;
}

Json cmd_encode(const KeyValueConfig&, const Paths& p) {
  const auto model = load_model(p.model);
  const auto table = load_feature_table(p.data);
  const auto index = CodeIndex::build(model, table);
  save_codes(index, p.out);
  return {{"items", index.size()}, {"bits", index.bits_per_item()}, {"bytes_per_item", index.bytes_per_item()}};
}

CodeIndex load_index(const Paths& p, const Model& model) {
  auto index = load_codes(p.codes);
  index.set_codebook(model.params.prototypes);
  return index;
}

Json cmd_search(const KeyValueConfig&, const Paths& p) {
  const auto model = load_model(p.model);
  const auto index = load_index(p, model);
  const auto queries = load_feature_table(p.queries);
  Json results = Json::array();
  for (std::size_t i = 0; i < queries.size(); ++i) {
    Json hits = Json::array();
    for (const auto& h : search(encode(model, queries.features(i)), index, p.topk)) {
      hits.push_back({{"id", h.id}, {"distance", h.distance}});
    }
    results.push_back({{"query", queries[i].id}, {"results", std::move(hits)}});
  }
  return {{"queries", std::move(results)}};
}

Json cmd_eval_retrieval(const KeyValueConfig& cfg, const Paths& p) {
  const auto model = load_model(p.model);
  const auto index = load_index(p, model);
  const auto table = load_feature_table(p.queries);
  const auto scope = cfg.get_string("query_scope", "novel");
  if (scope != "novel" && scope != "all") throw ParameterError("query_scope must be novel or all");
  std::optional<OpenSetSplit> split;
  if (scope == "novel") {
    if (p.split.empty()) throw UsageError("eval-retrieval with query_scope = novel needs --split");
    split = load_split(p.split);
  }
  std::vector<Query> queries;
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto& r = table[i];
    if (!r.label) continue;
    if (split && split->is_seen(*r.label)) continue;
    queries.push_back({encode(model, table.features(i)), *r.label});
  }
  const double map = mean_average_precision(queries, index);
  return {{"map", map}, {"num_queries", queries.size()}, {"bits", index.bits_per_item()}};
}

Json cmd_eval_cluster(const KeyValueConfig& cfg, const Paths& p) {
  const auto model = load_model(p.model);
  const auto table = load_feature_table(p.data);
  const auto split = load_split(p.split);
  const auto truth = labels_of(table);
  const int k = cfg.get_int("cluster_k", static_cast<int>(table.classes().size()));
  const auto emb = eval_embeddings(model, table, cfg.get_string("eval_embedding", "pi"));
  const auto metrics = eval_open_set(emb, truth, split.seen_classes, k, cfg.get_u64("seed", 0));
  return Json::parse(metrics_to_json(metrics), nullptr, true, false);
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e) || dynamic_cast<const ParameterError*>(&e)) return kExitUsage;
  if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const NormalizationError*>(&e)) return kExitNumeric;
  return kExitFile;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Combinatorial embedding toolkit for open-set representation learning", "combemb"};
  app.require_subcommand(1, 1);

  Common common;
  Paths p;
  using Handler = Json (*)(const KeyValueConfig&, const Paths&);
  std::vector<std::pair<CLI::App*, Handler>> verbs;
  auto verb = [&](const char* name, const char* desc, Handler h) {
    auto* sub = app.add_subcommand(name, desc);
    add_common(sub, common);
    verbs.emplace_back(sub, h);
    return sub;
  };

  auto* gen = verb("gen-data", "generate a synthetic feature table", cmd_gen_data);
  gen->add_option("--out", p.out, "training table (.csv/.txt for text, otherwise CEFT binary)")->required();
  gen->add_option("--test-out", p.test_out, "held-out table drawn from the same class means");

  auto* split = verb("split", "make an open-set split", cmd_split);
  split->add_option("--data", p.data, "feature table")->required();
  split->add_option("--out", p.out, "split file")->required();

  auto* scheme = verb("build-scheme", "build meta-class sets from labeled data", cmd_build_scheme);
  scheme->add_option("--data", p.data, "feature table")->required();
  scheme->add_option("--split", p.split, "split file")->required();
  scheme->add_option("--out", p.out, "scheme file")->required();

  auto* tr = verb("train", "train the embedding model", cmd_train);
  tr->add_option("--data", p.data, "feature table")->required();
  tr->add_option("--split", p.split, "split file")->required();
  tr->add_option("--scheme", p.scheme, "scheme file")->required();
  tr->add_option("--out", p.out, "model file (CEMB)")->required();
  tr->add_option("--trace", p.trace, "per-step loss trace");

  auto* enc = verb("encode", "encode a feature table into compact codes", cmd_encode);
  enc->add_option("--model", p.model, "model file")->required();
  enc->add_option("--data", p.data, "feature table")->required();
  enc->add_option("--out", p.out, "code file (CECD)")->required();

  auto* srch = verb("search", "rank database codes for each query", cmd_search);
  srch->add_option("--model", p.model, "model file")->required();
  srch->add_option("--codes", p.codes, "code file")->required();
  srch->add_option("--queries", p.queries, "query feature table")->required();
  srch->add_option("--topk", p.topk, "results per query");
  srch->add_option("--out", p.json_out, "also write the JSON result here");

  auto* er = verb("eval-retrieval", "mAP of asymmetric search", cmd_eval_retrieval);
  er->add_option("--model", p.model, "model file")->required();
  er->add_option("--codes", p.codes, "database code file")->required();
  er->add_option("--queries", p.queries, "labeled query table")->required();
  er->add_option("--split", p.split, "split file (queries restricted to novel classes)");
  er->add_option("--out", p.json_out, "also write the JSON result here");

  auto* ec = verb("eval-cluster", "k-means clustering ACC/NMI/ARI", cmd_eval_cluster);
  ec->add_option("--model", p.model, "model file")->required();
  ec->add_option("--data", p.data, "labeled test table")->required();
  ec->add_option("--split", p.split, "split file (defines seen classes)")->required();
  ec->add_option("--out", p.json_out, "also write the JSON result here");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(std::move(reversed));
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n' << app.help();
    return kExitUsage;
  }

  try {
    for (const auto& [sub, handler] : verbs) {
      if (!sub->parsed()) continue;
      const auto cfg = common.resolve();
      emit(out, handler(cfg, p), p.json_out);
    }
    return kExitOk;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace combemb::cli
