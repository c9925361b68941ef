// aesb: command-line front end.
//
// Every command takes its settings from built-in defaults, then an optional
// --config key=value file, then flags. The merged settings are written to
// effective_config.txt in the output directory.

#include <CLI11.hpp>

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "aesb/attention.hpp"
#include "aesb/dataio.hpp"
#include "aesb/ensemble.hpp"
#include "aesb/errors.hpp"
#include "aesb/metrics.hpp"
#include "aesb/seeds.hpp"
#include "aesb/trainer.hpp"

namespace fs = std::filesystem;
using namespace aesb;

namespace {

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kNumeric = 4 };

struct Key {
  std::string name;
  std::string fallback;  // empty means required unless listed in kOptional
  std::string help;
};

// Every key the config file may contain.
const std::vector<Key> kKeys = {
    {"seed", "0", "root seed; per-subsystem seeds are derived from it"},
    {"out", "", "output directory"},
    {"variant", "B4", "model variant: B1, B2, B3 or B4"},
    {"data", "", "image directory"},
    {"labels", "", "labels file (path,score); defaults to <data>/labels.csv"},
    {"epochs", "30", "training epochs (per RSRL iteration for rsrl)"},
    {"batch-size", "8", "mini-batch size"},
    {"lr", "0.01", "learning rate"},
    {"momentum", "0.9", "SGD momentum"},
    {"checkpoint", "", "model checkpoint file"},
    {"val-data", "", "validation image directory (rsrl); empty splits --data instead"},
    {"val-labels", "", "validation labels file; defaults to <val-data>/labels.csv"},
    {"val-fraction", "0.1", "per-class validation fraction when --val-data is empty"},
    {"iterations", "5", "RSRL iterations K"},
    {"drop-fraction", "0.1", "RSRL drop fraction per majority class"},
    {"images", "", "image directory or single image file"},
    {"name", "modelB", "model tag for the probability file"},
    {"prob-a", "", "probability file of model a (weight w1)"},
    {"prob-b", "", "probability file of model b (weight w2 = 1 - w1)"},
    {"step", "0.1", "weight grid step; must divide 1"},
    {"predictions", "", "predicted scores file (path,score)"},
    {"binarize", "false", "evaluate as low (<5) / high (>=5)"},
    {"alpha", "0.5", "overlay opacity in [0,1]"},
    {"selector", "mean", "channel selector for FFP: mean or peak"},
    {"count", "200", "number of synthetic images"},
    {"resolution", "192", "synthetic image resolution"},
    {"imbalance", "", "class profile, e.g. 5:0.5,6:0.1 (score:fraction)"},
    {"trace", "", "RSRL trace file"},
};

const std::vector<std::string> kOptional = {"labels", "val-data", "val-labels", "imbalance"};

const Key& key_info(const std::string& name) {
  for (const auto& k : kKeys) {
    if (k.name == name) return k;
  }
  throw std::logic_error("unregistered key " + name);
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::map<std::string, std::string> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key=value");
    }
    const std::string key = trim(line.substr(0, eq));
    bool known = false;
    for (const auto& k : kKeys) known = known || k.name == key;
    if (!known) throw ConfigError(path + ":" + std::to_string(line_no) + ": unknown key '" + key + "'");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

// Settings of one command: its keys in declaration order plus CLI11 bindings.
struct Command {
  std::string name;
  CLI::App* app = nullptr;
  std::vector<std::string> keys;
  std::map<std::string, std::string> flag_values;
  std::map<std::string, CLI::Option*> flags;
  std::string config_path;
  std::map<std::string, std::string> values;

  void add(const std::string& key) {
    const Key& k = key_info(key);
    keys.push_back(key);
    const bool required = k.fallback.empty() &&
                          std::find(kOptional.begin(), kOptional.end(), key) == kOptional.end();
    std::string help = k.help + (required ? " (required)" : "");
    if (key == "binarize") {
      flags[key] = app->add_flag("--" + key, help)->default_str(k.fallback);
    } else {
      flags[key] = app->add_option("--" + key, flag_values[key], help)->default_str(k.fallback);
    }
  }

  void resolve() {
    for (const auto& key : keys) values[key] = key_info(key).fallback;
    if (!config_path.empty()) {
      for (const auto& [key, value] : read_config_file(config_path)) {
        if (values.count(key)) values[key] = value;
      }
    }
    for (const auto& key : keys) {
      if (flags[key]->count() == 0) continue;
      values[key] = key == "binarize" ? "true" : flag_values[key];
    }
    for (const auto& key : keys) {
      const bool optional = std::find(kOptional.begin(), kOptional.end(), key) != kOptional.end();
      if (values[key].empty() && !optional) {
        throw ConfigError(name + ": missing required setting --" + key);
      }
    }
  }

  const std::string& str(const std::string& key) const { return values.at(key); }

  template <typename T>
  T num(const std::string& key) const {
    const std::string& text = values.at(key);
    T v{};
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || ptr != text.data() + text.size()) {
      throw ConfigError("--" + key + ": cannot parse '" + text + "'");
    }
    return v;
  }

  bool flag(const std::string& key) const {
    const std::string& v = values.at(key);
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("--" + key + ": expected true or false, got '" + v + "'");
  }

  std::uint64_t seed(std::string_view tag) const { return derive_seed(num<std::uint64_t>("seed"), tag); }

  fs::path out_dir() const {
    fs::path dir = str("out");
    fs::create_directories(dir);
    return dir;
  }

  /// Writes the merged settings plus any derived seeds.
  void write_effective(const fs::path& dir,
                       const std::vector<std::pair<std::string, std::uint64_t>>& seeds = {}) const {
    std::ofstream out(dir / "effective_config.txt");
    out << "# aesb " << name << "\n";
    for (const auto& key : keys) out << key << '=' << values.at(key) << '\n';
    for (const auto& [tag, s] : seeds) out << "# derived seed " << tag << '=' << s << '\n';
    if (!out) throw DataError("cannot write " + (dir / "effective_config.txt").string());
  }
};

std::string labels_or_default(const std::string& labels, const std::string& dir) {
  return labels.empty() ? (fs::path(dir) / "labels.csv").string() : labels;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) throw DataError("cannot write " + path.string());
}

std::string fmt(double v, const char* spec = "%.17g") {
  char buf[40];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

TrainRun run_settings(const Command& c, std::uint64_t shuffle_seed) {
  TrainRun run;
  run.epochs = c.num<std::uint32_t>("epochs");
  run.batch_size = c.num<std::uint32_t>("batch-size");
  run.learning_rate = c.num<double>("lr");
  run.momentum = c.num<double>("momentum");
  run.shuffle_seed = shuffle_seed;
  return run;
}

int cmd_train(const Command& c) {
  const auto variant = parse_variant(c.str("variant"));
  const auto config = ModelConfig::for_variant(variant);
  PreprocessSpec spec;
  spec.resolution = config.input_resolution;
  const auto data = load_dataset(c.str("data"), labels_or_default(c.str("labels"), c.str("data")), spec);
  if (data.empty()) throw DataError("train: the labels file lists no images");

  const std::uint64_t init = c.seed("init"), shuffle = c.seed("shuffle");
  auto run = run_settings(c, shuffle);
  const auto epochs = run.epochs;
  run.on_epoch = [&](std::uint32_t e, double loss) {
    std::cout << "epoch " << e + 1 << "/" << epochs << " loss " << fmt(loss, "%.6f") << std::endl;
  };
  const auto result = train(build<float>(config, init), data, std::move(run));

  const auto dir = c.out_dir();
  write_checkpoint_file(result.net, (dir / "model.aesb").string());
  std::string loss = "epoch,loss\n";
  for (std::size_t e = 0; e < result.run.loss_trace.size(); ++e) {
    loss += std::to_string(e + 1) + "," + fmt(result.run.loss_trace[e]) + "\n";
  }
  write_file(dir / "loss.txt", loss);
  c.write_effective(dir, {{"init", init}, {"shuffle", shuffle}});
  std::cout << "training accuracy " << fmt(accuracy(result.net, data), "%.4f") << "\n";
  return kOk;
}

int cmd_rsrl(const Command& c) {
  const auto initial = read_checkpoint_file(c.str("checkpoint"));
  PreprocessSpec spec;
  spec.resolution = initial.config.input_resolution;
  const auto all = load_dataset(c.str("data"), labels_or_default(c.str("labels"), c.str("data")), spec);

  const std::uint64_t split_seed = c.seed("split"), retrain = c.seed("rsrl");
  LabeledDataset train_data, val_data;
  if (c.str("val-data").empty()) {
    const double vf = c.num<double>("val-fraction");
    if (!(vf > 0 && vf < 1)) throw ConfigError("--val-fraction must be in (0,1)");
    auto parts = split(all, {1.0 - vf, vf, 0.0}, split_seed);
    train_data = std::move(parts.train);
    val_data = std::move(parts.val);
  } else {
    train_data = all;
    val_data = load_dataset(c.str("val-data"),
                            labels_or_default(c.str("val-labels"), c.str("val-data")), spec);
  }
  if (val_data.empty()) throw ConfigError("rsrl: the validation set is empty");

  RsrlPlan plan;
  plan.iterations = c.num<std::uint32_t>("iterations");
  plan.drop_fraction = c.num<double>("drop-fraction");
  plan.retrain = run_settings(c, retrain);
  const auto result = rsrl(initial, train_data, val_data, plan);

  const auto dir = c.out_dir();
  write_checkpoint_file(result.best, (dir / "best.aesb").string());
  for (std::size_t i = 0; i < result.snapshots.size(); ++i) {
    const auto& name = result.trace.iterations[i].snapshot;
    write_checkpoint_file(result.snapshots[i], (dir / (name + ".aesb")).string());
  }
  write_file(dir / "rsrl_trace.txt", format_rsrl_trace(result.trace));
  c.write_effective(dir, {{"split", split_seed}, {"rsrl", retrain}});
  std::cout << summarize_rsrl_trace(result.trace);
  return kOk;
}

std::vector<Sample> load_inputs(const std::string& images, const PreprocessSpec& spec) {
  if (fs::is_directory(images)) return load_images(images, spec);
  if (!fs::exists(images)) throw DataError("no such image or directory: " + images);
  const fs::path p(images);
  return {Sample{p.filename().string(), 0, preprocess(read_image(images), spec)}};
}

int cmd_predict(const Command& c) {
  const auto net = read_checkpoint_file(c.str("checkpoint"));
  PreprocessSpec spec;
  spec.resolution = net.config.input_resolution;
  const auto samples = load_inputs(c.str("images"), spec);
  if (samples.empty()) throw DataError("predict: no PNG or JPEG images in " + c.str("images"));

  ProbabilityTable table;
  table.model = c.str("name");
  for (const auto& s : samples) table.ids.push_back(s.id);
  table.rows = predict_probabilities(net, samples);
  const auto scores = predict(table);

  const auto dir = c.out_dir();
  export_probabilities(table, (dir / "probabilities.csv").string());
  std::vector<LabelRow> rows;
  for (std::size_t i = 0; i < scores.size(); ++i) rows.push_back({table.ids[i], scores[i]});
  write_labels((dir / "scores.csv").string(), rows);
  c.write_effective(dir);
  std::cout << "predicted " << rows.size() << " images\n";
  return kOk;
}

int cmd_sweep(const Command& c) {
  const auto a = import_probabilities(c.str("prob-a"));
  const auto b = import_probabilities(c.str("prob-b"));
  const auto truth = read_truth(c.str("labels"));
  const auto result = sweep(a, b, truth, c.num<double>("step"));

  const auto dir = c.out_dir();
  write_file(dir / "sweep.csv", format_sweep(result));
  const auto fused = fuse(a, b, result.best);
  export_probabilities(fused, (dir / "fused_probabilities.csv").string());
  const auto scores = predict(fused);
  std::vector<LabelRow> rows;
  for (std::size_t i = 0; i < scores.size(); ++i) rows.push_back({fused.ids[i], scores[i]});
  write_labels((dir / "fused_scores.csv").string(), rows);

  const double fa = result.grid.back().ave_f1, fb = result.grid.front().ave_f1;
  auto gain = [&](double base) {
    return base > 0 ? fmt(one_decimal(improvement(result.best_f1, base)), "%.1f") + "%" : "n/a";
  };
  std::ostringstream best;
  best << "w1=" << fmt(result.best.w1, "%.6g") << " w2=" << fmt(result.best.w2, "%.6g")
       << " aveF1=" << fmt(result.best_f1, "%.9f") << "\n"
       << "a (" << c.str("prob-a") << ") aveF1=" << fmt(fa, "%.9f") << " improvement " << gain(fa) << "\n"
       << "b (" << c.str("prob-b") << ") aveF1=" << fmt(fb, "%.9f") << " improvement " << gain(fb) << "\n";
  write_file(dir / "best.txt", best.str());
  c.write_effective(dir);
  std::cout << format_sweep(result) << best.str();
  return kOk;
}

int cmd_eval(const Command& c) {
  const auto truth = read_truth(c.str("labels"));
  std::map<std::string, int> predicted;
  for (const auto& r : read_labels(c.str("predictions"))) {
    if (!predicted.emplace(r.path, r.score).second) {
      throw DataError(c.str("predictions") + ": duplicate id '" + r.path + "'");
    }
  }
  std::vector<int> t, p;
  for (const auto& [id, score] : truth) {
    const auto it = predicted.find(id);
    if (it == predicted.end()) throw DataError("no prediction for '" + id + "'");
    t.push_back(score);
    p.push_back(it->second);
  }
  if (t.empty()) throw DataError("eval: the labels file lists no images");

  MetricsReport report;
  std::string title;
  if (c.flag("binarize")) {
    report = evaluate(binarize(t), binarize(p), std::vector<int>{kLow, kHigh});
    report.label_names = {"low", "high"};
    title = "binary (score < 5 low, >= 5 high)";
  } else {
    report = evaluate(t, p, score_classes());
    for (int s = kMinScore; s <= kMaxScore; ++s) report.label_names.push_back(std::to_string(s));
    title = "8-class scores";
  }
  const auto text = format_report(report, title);
  const auto dir = c.out_dir();
  write_file(dir / "report.txt", text);
  c.write_effective(dir);
  std::cout << text;
  return kOk;
}

// Feature maps as a C x (r*r) grid, one channel per row.
Plane feature_grid(const Tensor<float>& maps) {
  Plane g(maps.channels(), maps.height() * maps.width());
  for (Index ch = 0; ch < maps.channels(); ++ch) {
    const auto plane = maps.plane(0, ch);
    for (Index i = 0; i < g.cols(); ++i) g(ch, i) = double(plane.data()[i]);
  }
  return g;
}

int cmd_attention(const Command& c) {
  const auto net = read_checkpoint_file(c.str("checkpoint"));
  const auto selector = parse_selector(c.str("selector"));
  const double alpha = c.num<double>("alpha");
  const Index res = net.config.input_resolution;

  std::vector<fs::path> files;
  if (fs::is_directory(c.str("images"))) {
    for (const auto& e : fs::directory_iterator(c.str("images"))) {
      const auto ext = e.path().extension().string();
      if (e.is_regular_file() && (ext == ".png" || ext == ".jpg" || ext == ".jpeg" ||
                                  ext == ".PNG" || ext == ".JPG" || ext == ".JPEG")) {
        files.push_back(e.path());
      }
    }
    std::sort(files.begin(), files.end());
  } else if (fs::exists(c.str("images"))) {
    files.push_back(c.str("images"));
  } else {
    throw DataError("no such image or directory: " + c.str("images"));
  }
  if (files.empty()) throw DataError("attention: no PNG or JPEG images in " + c.str("images"));

  const auto dir = c.out_dir();
  PreprocessSpec spec;
  spec.resolution = res;
  std::ostringstream meta;
  meta << "selector=" << to_string(selector) << " alpha=" << fmt(alpha, "%.6g")
       << " upsampling=bilinear normalization=min-max constant_map=zeros\n";
  for (const auto& file : files) {
    const RgbImage image = read_image(file.string());
    Tensor<float> batch({1, 3, res, res});
    batch.values() = preprocess(image, spec);
    const auto art = forward(net, batch, Mode::infer);
    const auto maps = extract(art, selector);

    const std::string stem = (dir / file.stem()).string();
    const RgbImage base = resize_bilinear(image, res, res);
    write_png(render_overlay(base, maps.ffp, alpha), stem + "_ffp.png");
    write_png(render_overlay(base, maps.air, alpha), stem + "_air.png");
    write_grid(maps.ffp, stem + "_ffp.txt");
    write_grid(maps.air, stem + "_air.txt");
    write_grid(feature_grid(art.last_conv_maps), stem + "_features.txt");
    meta << "image=" << file.filename().string() << " selected_channel=" << maps.selected_channel
         << " source_resolution=" << maps.source_resolution << "\n";
  }
  write_file(dir / "attention_meta.txt", meta.str());
  c.write_effective(dir);
  std::cout << "wrote attention maps for " << files.size() << " images\n";
  return kOk;
}

std::map<int, double> parse_imbalance(const std::string& text) {
  std::map<int, double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    const auto colon = item.find(':');
    int score = 0;
    double fraction = 0;
    try {
      if (colon == std::string::npos) throw std::invalid_argument(item);
      std::size_t used = 0;
      score = std::stoi(item.substr(0, colon), &used);
      if (used != colon) throw std::invalid_argument(item);
      fraction = std::stod(item.substr(colon + 1), &used);
      if (used != item.size() - colon - 1) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw ConfigError("--imbalance: expected score:fraction, got '" + item + "'");
    }
    out[score] = fraction;
  }
  return out;
}

int cmd_synth(const Command& c) {
  SynthSpec spec;
  spec.count = c.num<std::size_t>("count");
  spec.resolution = c.num<Index>("resolution");
  spec.seed = c.seed("synth");
  spec.imbalance = parse_imbalance(c.str("imbalance"));
  const auto images = synthesize_images(spec);
  const auto dir = c.out_dir();
  write_synthetic(images, dir.string());
  c.write_effective(dir, {{"synth", spec.seed}});
  std::cout << "wrote " << images.size() << " images to " << dir.string() << "\n";
  return kOk;
}

int cmd_report(const Command& c) {
  std::ifstream in(c.str("trace"));
  if (!in) throw DataError("cannot open trace file: " + c.str("trace"));
  std::stringstream text;
  text << in.rdbuf();
  std::cout << summarize_rsrl_trace(parse_rsrl_trace(text.str()));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"aesb: gated-block score classifier toolkit"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "show help for every command");

  struct Spec {
    std::string name, description;
    std::vector<std::string> keys;
    int (*run)(const Command&);
  };
  const std::vector<Spec> specs = {
      {"train", "train a model from scratch on a labeled image directory",
       {"variant", "data", "labels", "epochs", "batch-size", "lr", "momentum", "seed", "out"}, cmd_train},
      {"rsrl", "repeatedly drop hard majority-class samples and retrain",
       {"checkpoint", "data", "labels", "val-data", "val-labels", "val-fraction", "iterations",
        "drop-fraction", "epochs", "batch-size", "lr", "momentum", "seed", "out"},
       cmd_rsrl},
      {"predict", "write class probabilities and scores for images",
       {"checkpoint", "images", "name", "seed", "out"}, cmd_predict},
      {"ensemble-sweep", "fuse two probability files over a weight grid",
       {"prob-a", "prob-b", "labels", "step", "seed", "out"}, cmd_sweep},
      {"eval", "precision, recall, F1 and accuracy of predicted scores",
       {"labels", "predictions", "binarize", "seed", "out"}, cmd_eval},
      {"attention", "FFP and AIR heatmaps from the last convolutional layer",
       {"checkpoint", "images", "alpha", "selector", "seed", "out"}, cmd_attention},
      {"synth", "write a synthetic composition dataset",
       {"count", "resolution", "imbalance", "seed", "out"}, cmd_synth},
      {"report", "summarize an RSRL trace file", {"trace"}, cmd_report},
  };

  std::vector<std::unique_ptr<Command>> commands;
  for (const auto& s : specs) {
    auto cmd = std::make_unique<Command>();
    cmd->name = s.name;
    cmd->app = app.add_subcommand(s.name, s.description);
    cmd->app->add_option("--config", cmd->config_path, "key=value settings file; flags override it");
    for (const auto& k : s.keys) cmd->add(k);
    commands.push_back(std::move(cmd));
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  for (std::size_t i = 0; i < specs.size(); ++i) {
    Command& cmd = *commands[i];
    if (!cmd.app->parsed()) continue;
    try {
      cmd.resolve();
      return specs[i].run(cmd);
    } catch (const ConfigError& e) {
      std::cerr << "config error: " << e.what() << "\n";
      return kConfig;
    } catch (const DataError& e) {
      std::cerr << "data error: " << e.what() << "\n";
      return kData;
    } catch (const FormatError& e) {
      std::cerr << "format error: " << e.what() << "\n";
      return kData;
    } catch (const NumericError& e) {
      std::cerr << "numeric error: " << e.what() << "\n";
      return kNumeric;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return kOther;
    }
  }
  return kOther;
}
