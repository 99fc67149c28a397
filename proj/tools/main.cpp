// vse: one binary for the whole pipeline — synthetic data, vocabulary
// training, tokenizer inspection, model training, embedding export,
// retrieval evaluation and a quick scan benchmark.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include <CLI11.hpp>

#include "vse/checkpoint.hpp"
#include "vse/data.hpp"
#include "vse/encoders.hpp"
#include "vse/retrieval.hpp"
#include "vse/tokenizer.hpp"
#include "vse/trainer.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

std::vector<int> parse_ks(const std::string& csv) {
  std::vector<int> ks;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      ks.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw vse::ConfigError("--ks: '" + item + "' is not an integer");
    }
  }
  if (ks.empty()) throw vse::ConfigError("--ks: no values given");
  return ks;
}

// every run prints its resolved settings before doing work
struct ConfigDump {
  std::vector<std::pair<std::string, std::string>> kv;
  template <class T>
  void add(const std::string& key, const T& value) {
    std::ostringstream os;
    os << value;
    kv.push_back({key, os.str()});
  }
  void print(const std::string& subcommand) const {
    std::cout << "# effective config: " << subcommand << "\n";
    for (auto& [k, v] : kv) std::cout << "#   " << k << " = " << v << "\n";
    std::cout.flush();
  }
};

const std::vector<int>& split_indices(const vse::Dataset& ds, const std::string& split) {
  if (split == "train") return ds.train_idx;
  if (split == "val") return ds.val_idx;
  if (split == "test") return ds.test_idx;
  throw vse::ConfigError("unknown split '" + split + "'");
}

void write_manifest(const std::string& path, const vse::Dataset& ds) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw vse::DataError("cannot open " + path + " for writing");
  for (int i : ds.train_idx) os << ds.examples[i].id << "\ttrain\n";
  for (int i : ds.val_idx) os << ds.examples[i].id << "\tval\n";
  for (int i : ds.test_idx) os << ds.examples[i].id << "\ttest\n";
  if (!os) throw vse::DataError("write failed for " + path);
}

struct SharedModelFlags {
  std::string text_encoder = "transformer";
  int embed_dim = 256;
  int word_dim = 128;
  int layers = 6;
  int heads = 4;
  int ffn_dim = 512;
  int rnn_hidden = 256;
  int avg_fc_dim = 512;
  int max_len = 32;

  void attach(CLI::App* cmd) {
    cmd->add_option("--text-encoder", text_encoder, "avg, rnn or transformer")
        ->check(CLI::IsMember({"avg", "rnn", "transformer"}));
    cmd->add_option("--embed-dim", embed_dim, "joint embedding dimension D");
    cmd->add_option("--word-dim", word_dim, "word embedding dimension E");
    cmd->add_option("--layers", layers, "transformer layer count");
    cmd->add_option("--heads", heads, "attention head count");
    cmd->add_option("--ffn-dim", ffn_dim, "transformer feed-forward width");
    cmd->add_option("--rnn-hidden", rnn_hidden, "GRU hidden size");
    cmd->add_option("--avg-fc-dim", avg_fc_dim, "AVG encoder FC width");
    cmd->add_option("--max-len", max_len, "token sequence length cap");
  }

  vse::ModelConfig to_config(int image_feat_dim, int vocab_size) const {
    vse::ModelConfig cfg;
    cfg.text_encoder = vse::text_encoder_from_string(text_encoder);
    cfg.embed_dim = embed_dim;
    cfg.word_dim = word_dim;
    cfg.transformer.layers = layers;
    cfg.transformer.heads = heads;
    cfg.transformer.hidden = word_dim;
    cfg.transformer.ffn_dim = ffn_dim;
    cfg.transformer.max_len = max_len;
    cfg.rnn.hidden = rnn_hidden;
    cfg.avg.fc_dim = avg_fc_dim;
    cfg.image_feat_dim = image_feat_dim;
    cfg.vocab_size = vocab_size;
    cfg.validate();
    return cfg;
  }

  void dump(ConfigDump& d) const {
    d.add("text_encoder", text_encoder);
    d.add("embed_dim", embed_dim);
    d.add("word_dim", word_dim);
    d.add("layers", layers);
    d.add("heads", heads);
    d.add("ffn_dim", ffn_dim);
    d.add("rnn_hidden", rnn_hidden);
    d.add("avg_fc_dim", avg_fc_dim);
    d.add("max_len", max_len);
  }
};

int run(int argc, char** argv) {
  CLI::App app{"two-tower image/text embedding toolkit"};
  app.require_subcommand(1);
  app.set_config("--config", "", "key=value file; command-line flags win");
  app.allow_config_extras(CLI::config_extras_mode::error);

  // ---- gen-data -----------------------------------------------------------
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic paired dataset");
  vse::SyntheticSpec spec;
  std::string gen_out = "data.jsonl";
  std::string gen_manifest;
  gen->add_option("--out", gen_out, "output JSONL path");
  gen->add_option("--manifest", gen_manifest, "also write an id<TAB>split manifest");
  gen->add_option("--classes", spec.num_classes);
  gen->add_option("--train-samples", spec.train_samples);
  gen->add_option("--val-samples", spec.val_samples);
  gen->add_option("--test-samples", spec.test_samples);
  gen->add_option("--feature-dim", spec.feature_dim);
  gen->add_option("--noise", spec.feature_noise);
  gen->add_option("--latent-weight", spec.latent_weight);
  gen->add_option("--title-len-mean", spec.title_len_mean);
  gen->add_option("--title-len-sd", spec.title_len_sd);
  gen->add_option("--atoms-per-class", spec.atoms_per_class);
  gen->add_flag("--order-coding", spec.order_coding,
                "class pairs share word bags, differ only in order");
  gen->add_option("--seed", spec.seed);

  // ---- train-vocab --------------------------------------------------------
  auto* tv = app.add_subcommand("train-vocab", "train the unigram subword vocabulary");
  std::string tv_data, tv_manifest, tv_out = "vocab.txt";
  int tv_size = 4000;
  tv->add_option("--data", tv_data, "JSONL dataset")->required();
  tv->add_option("--manifest", tv_manifest, "split manifest (train split feeds the trainer)");
  tv->add_option("--out", tv_out, "output vocabulary file");
  tv->add_option("--vocab-size", tv_size, "target vocabulary size incl. specials");

  // ---- tokenize -----------------------------------------------------------
  auto* tok = app.add_subcommand("tokenize", "segment titles with a trained vocabulary");
  std::string tok_vocab;
  std::vector<std::string> tok_titles;
  int tok_max_len = 32;
  tok->add_option("--vocab", tok_vocab, "vocabulary file")->required();
  tok->add_option("--title", tok_titles, "title to segment (repeatable)")->required();
  tok->add_option("--max-len", tok_max_len);

  // ---- train --------------------------------------------------------------
  auto* tr = app.add_subcommand("train", "train both towers");
  std::string tr_data, tr_manifest, tr_vocab, tr_out_dir = "run";
  std::string tr_resume;
  SharedModelFlags tr_model;
  vse::TrainConfig tr_cfg;
  int tr_stage1_epochs = 2, tr_stage2_epochs = 30;
  double tr_stage1_lr = 1e-4, tr_stage2_lr = 4e-5;
  tr->add_option("--data", tr_data, "JSONL dataset")->required();
  tr->add_option("--manifest", tr_manifest, "split manifest");
  tr->add_option("--vocab", tr_vocab, "vocabulary file")->required();
  tr->add_option("--out-dir", tr_out_dir, "artifact directory");
  tr->add_option("--resume", tr_resume, "checkpoint to initialize from");
  tr_model.attach(tr);
  tr->add_option("--batch-size", tr_cfg.batch_size);
  tr->add_option("--margin", tr_cfg.margin);
  tr->add_option("--seed", tr_cfg.seed);
  tr->add_option("--threads", tr_cfg.threads);
  tr->add_option("--stage1-epochs", tr_stage1_epochs);
  tr->add_option("--stage2-epochs", tr_stage2_epochs);
  tr->add_option("--stage1-lr", tr_stage1_lr);
  tr->add_option("--stage2-lr", tr_stage2_lr);
  std::string tr_stage1_halve = "1", tr_stage2_halve = "5,10";
  tr->add_option("--stage1-halve", tr_stage1_halve,
                 "epochs after which stage-1 lr halves (csv, empty = never)");
  tr->add_option("--stage2-halve", tr_stage2_halve,
                 "epochs after which stage-2 lr halves (csv, empty = never)");
  tr->add_flag("--freeze-image-proj", tr_cfg.stage1_freeze_image_proj,
               "freeze the image projection during stage 1");
  tr->add_flag("--group-aware", tr_cfg.group_aware_batching,
               "keep duplicate groups out of the same batch");
  std::string tr_ks = "1,10,50,100";
  tr->add_option("--ks", tr_ks, "validation recall cutoffs, comma-separated");

  // ---- embed --------------------------------------------------------------
  auto* em = app.add_subcommand("embed", "export embeddings for one split and modality");
  std::string em_data, em_manifest, em_vocab, em_ckpt, em_model_cfg, em_out = "emb.bin";
  std::string em_split = "test", em_what = "text";
  em->add_option("--data", em_data)->required();
  em->add_option("--manifest", em_manifest);
  em->add_option("--vocab", em_vocab)->required();
  em->add_option("--checkpoint", em_ckpt)->required();
  em->add_option("--model-config", em_model_cfg)->required();
  em->add_option("--split", em_split)->check(CLI::IsMember({"train", "val", "test"}));
  em->add_option("--what", em_what)->check(CLI::IsMember({"image", "text"}));
  em->add_option("--out", em_out, "embedding file (ids in <out>.ids)");

  // ---- evaluate -----------------------------------------------------------
  auto* ev = app.add_subcommand("evaluate", "R@K retrieval evaluation in both directions");
  std::string ev_data, ev_manifest, ev_vocab, ev_ckpt, ev_model_cfg, ev_out;
  std::string ev_split = "test", ev_ks = "1,10,50,100";
  std::size_t ev_budget = 512ull << 20;
  int ev_threads = 1;
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--manifest", ev_manifest);
  ev->add_option("--vocab", ev_vocab)->required();
  ev->add_option("--checkpoint", ev_ckpt)->required();
  ev->add_option("--model-config", ev_model_cfg)->required();
  ev->add_option("--split", ev_split)->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_option("--ks", ev_ks, "recall cutoffs, comma-separated");
  ev->add_option("--memory-budget", ev_budget, "score-matrix budget in bytes");
  ev->add_option("--threads", ev_threads);
  ev->add_option("--out", ev_out, "also write the report as JSON");

  // ---- bench --------------------------------------------------------------
  auto* be = app.add_subcommand("bench", "top-K scan throughput probe");
  int be_rows = 100000, be_dim = 256, be_queries = 256, be_k = 10, be_threads = 1;
  std::size_t be_budget = 512ull << 20;
  be->add_option("--rows", be_rows);
  be->add_option("--dim", be_dim);
  be->add_option("--queries", be_queries);
  be->add_option("--k", be_k);
  be->add_option("--threads", be_threads);
  be->add_option("--memory-budget", be_budget);

  CLI11_PARSE(app, argc, argv);

  if (gen->parsed()) {
    ConfigDump d;
    d.add("out", gen_out);
    d.add("manifest", gen_manifest);
    d.add("classes", spec.num_classes);
    d.add("train_samples", spec.train_samples);
    d.add("val_samples", spec.val_samples);
    d.add("test_samples", spec.test_samples);
    d.add("feature_dim", spec.feature_dim);
    d.add("noise", spec.feature_noise);
    d.add("latent_weight", spec.latent_weight);
    d.add("title_len_mean", spec.title_len_mean);
    d.add("title_len_sd", spec.title_len_sd);
    d.add("atoms_per_class", spec.atoms_per_class);
    d.add("order_coding", spec.order_coding);
    d.add("seed", spec.seed);
    d.print("gen-data");

    auto ds = vse::generate_synthetic(spec);
    vse::write_jsonl(gen_out, ds.examples);
    if (!gen_manifest.empty()) write_manifest(gen_manifest, ds);
    std::cout << "wrote " << ds.examples.size() << " pairs to " << gen_out << "\n";
    return kExitOk;
  }

  if (tv->parsed()) {
    ConfigDump d;
    d.add("data", tv_data);
    d.add("manifest", tv_manifest);
    d.add("out", tv_out);
    d.add("vocab_size", tv_size);
    d.print("train-vocab");

    auto ds = vse::load_dataset(tv_data, {}, tv_manifest);
    std::vector<std::string> corpus;
    corpus.reserve(ds.train_idx.size());
    for (int i : ds.train_idx) corpus.push_back(ds.examples[i].title);
    vse::VocabTrainConfig cfg;
    cfg.target_size = tv_size;
    auto result = vse::train_vocab(corpus, cfg);
    result.vocab.save(tv_out);
    std::cout << "trained " << result.vocab.size() << " pieces from " << corpus.size()
              << " titles -> " << tv_out << "\n";
    return kExitOk;
  }

  if (tok->parsed()) {
    ConfigDump d;
    d.add("vocab", tok_vocab);
    d.add("max_len", tok_max_len);
    d.print("tokenize");

    auto vocab = vse::Vocabulary::load(tok_vocab);
    for (auto& title : tok_titles) {
      auto pieces = vse::segment(vse::preprocess(title), vocab);
      std::cout << title << "\t";
      for (std::size_t i = 0; i < pieces.size(); ++i) {
        if (i) std::cout << ' ';
        std::cout << pieces[i];
      }
      auto seq = vse::encode(title, vocab, tok_max_len);
      std::cout << "\t(" << seq.length << " ids)\n";
    }
    return kExitOk;
  }

  if (tr->parsed()) {
    auto parse_halve = [](const std::string& csv) {
      std::vector<int> out;
      std::stringstream ss(csv);
      std::string item;
      while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(std::stoi(item));
      return out;
    };
    vse::TrainConfig cfg = tr_cfg;
    cfg.stage1 = {tr_stage1_epochs,
                  {static_cast<float>(tr_stage1_lr), parse_halve(tr_stage1_halve)}};
    cfg.stage2 = {tr_stage2_epochs,
                  {static_cast<float>(tr_stage2_lr), parse_halve(tr_stage2_halve)}};
    cfg.eval_ks = parse_ks(tr_ks);

    ConfigDump d;
    d.add("data", tr_data);
    d.add("manifest", tr_manifest);
    d.add("vocab", tr_vocab);
    d.add("out_dir", tr_out_dir);
    d.add("resume", tr_resume);
    tr_model.dump(d);
    d.add("batch_size", cfg.batch_size);
    d.add("margin", cfg.margin);
    d.add("seed", cfg.seed);
    d.add("threads", cfg.threads);
    d.add("stage1_epochs", tr_stage1_epochs);
    d.add("stage2_epochs", tr_stage2_epochs);
    d.add("stage1_lr", tr_stage1_lr);
    d.add("stage2_lr", tr_stage2_lr);
    d.add("stage1_halve", tr_stage1_halve);
    d.add("stage2_halve", tr_stage2_halve);
    d.add("freeze_image_proj", cfg.stage1_freeze_image_proj);
    d.add("group_aware", cfg.group_aware_batching);
    d.add("ks", tr_ks);
    d.print("train");

    auto ds = vse::load_dataset(tr_data, {}, tr_manifest);
    auto vocab = vse::Vocabulary::load(tr_vocab);
    auto model_cfg = tr_model.to_config(ds.feature_dim, vocab.size());

    vse::ParamMap initial;
    if (!tr_resume.empty()) initial = vse::load_checkpoint(tr_resume);

    auto result = vse::train(model_cfg, ds, vocab, cfg, std::move(initial));

    std::filesystem::create_directories(tr_out_dir);
    vse::save_checkpoint(tr_out_dir + "/model.ckpt", result.best_params);
    vse::save_model_config(tr_out_dir + "/model.cfg", model_cfg);
    std::ofstream log(tr_out_dir + "/train_log.jsonl", std::ios::trunc);
    for (auto& e : result.log) log << vse::log_entry_json(e) << '\n';
    if (!log) throw vse::DataError("write failed for " + tr_out_dir + "/train_log.jsonl");

    std::cout << "best epoch " << result.best_epoch << ", val R@" << cfg.eval_ks.front()
              << " t2i+i2t = " << result.best_metric << "\n";
    std::cout << "artifacts in " << tr_out_dir << "/\n";
    return kExitOk;
  }

  if (em->parsed()) {
    ConfigDump d;
    d.add("data", em_data);
    d.add("manifest", em_manifest);
    d.add("vocab", em_vocab);
    d.add("checkpoint", em_ckpt);
    d.add("model_config", em_model_cfg);
    d.add("split", em_split);
    d.add("what", em_what);
    d.add("out", em_out);
    d.print("embed");

    auto ds = vse::load_dataset(em_data, {}, em_manifest);
    auto vocab = vse::Vocabulary::load(em_vocab);
    auto model_cfg = vse::load_model_config(em_model_cfg);
    auto params = vse::load_checkpoint(em_ckpt);
    const auto& idx = split_indices(ds, em_split);
    auto index = em_what == "image" ? vse::embed_images(model_cfg, params, ds, idx)
                                    : vse::embed_texts(model_cfg, params, ds, idx, vocab);
    index.validate();
    vse::save_embeddings(em_out, index);
    std::cout << "wrote " << index.num_rows << "x" << index.dim << " embeddings to " << em_out
              << "\n";
    return kExitOk;
  }

  if (ev->parsed()) {
    auto ks = parse_ks(ev_ks);
    ConfigDump d;
    d.add("data", ev_data);
    d.add("manifest", ev_manifest);
    d.add("vocab", ev_vocab);
    d.add("checkpoint", ev_ckpt);
    d.add("model_config", ev_model_cfg);
    d.add("split", ev_split);
    d.add("ks", ev_ks);
    d.add("memory_budget", ev_budget);
    d.add("threads", ev_threads);
    d.add("out", ev_out);
    d.print("evaluate");

    auto ds = vse::load_dataset(ev_data, {}, ev_manifest);
    auto vocab = vse::Vocabulary::load(ev_vocab);
    auto model_cfg = vse::load_model_config(ev_model_cfg);
    auto params = vse::load_checkpoint(ev_ckpt);
    const auto& idx = split_indices(ds, ev_split);
    if (idx.empty()) throw vse::DataError("split '" + ev_split + "' is empty");

    auto img = vse::embed_images(model_cfg, params, ds, idx);
    auto txt = vse::embed_texts(model_cfg, params, ds, idx, vocab);
    std::vector<int> partners(idx.size());
    for (std::size_t i = 0; i < partners.size(); ++i) partners[i] = static_cast<int>(i);
    std::vector<int> clamped;
    for (int k : ks) clamped.push_back(std::min<int>(k, img.num_rows));
    auto t2i = vse::recall_at_k("t2i", txt.matrix, txt.num_rows, txt.dim, img, partners,
                                clamped, ev_budget, ev_threads);
    auto i2t = vse::recall_at_k("i2t", img.matrix, img.num_rows, img.dim, txt, partners,
                                clamped, ev_budget, ev_threads);
    std::cout << vse::report_table({t2i, i2t});
    if (!ev_out.empty()) {
      std::ofstream os(ev_out, std::ios::trunc);
      os << vse::report_json({t2i, i2t}) << '\n';
      if (!os) throw vse::DataError("write failed for " + ev_out);
    }
    return kExitOk;
  }

  if (be->parsed()) {
    ConfigDump d;
    d.add("rows", be_rows);
    d.add("dim", be_dim);
    d.add("queries", be_queries);
    d.add("k", be_k);
    d.add("threads", be_threads);
    d.add("memory_budget", be_budget);
    d.print("bench");

    std::mt19937_64 rng(1);
    std::normal_distribution<float> nd(0.0f, 1.0f);
    vse::EmbeddingIndex index;
    index.num_rows = be_rows;
    index.dim = be_dim;
    index.matrix.resize(static_cast<std::size_t>(be_rows) * be_dim);
    for (auto& x : index.matrix) x = nd(rng);
    for (int i = 0; i < be_rows; ++i) index.ids.push_back(std::to_string(i));
    std::vector<float> queries(static_cast<std::size_t>(be_queries) * be_dim);
    for (auto& x : queries) x = nd(rng);

    auto t0 = std::chrono::steady_clock::now();
    auto top = vse::top_k(queries, be_queries, be_dim, index, be_k, be_budget, be_threads);
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    double items = static_cast<double>(be_rows) * be_queries;
    std::cout << "scanned " << be_rows << " rows x " << be_queries << " queries in " << secs
              << " s (" << items / secs / 1e6 << " M scores/s)\n";
    return kExitOk;
  }

  return kExitUsage;  // unreachable: a subcommand is required
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const vse::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const vse::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitData;
  } catch (const vse::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const vse::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
}
