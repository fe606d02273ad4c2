// anet: command-line front end for the training lab.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "alphanet.hpp"

namespace fs = std::filesystem;
using namespace alphanet;

namespace {

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::optional<std::size_t> desk_scale;
  std::vector<std::string> overrides;  // key=value
};

ExperimentConfig resolve_config(const Globals& g) {
  ExperimentConfig c;
  if (!g.config_path.empty()) c = load_config(g.config_path);
  for (const auto& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    set_config_value(c, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (g.seed) c.set_seed(*g.seed);
  if (!g.out_dir.empty()) c.out_dir = g.out_dir;
  if (g.desk_scale) c.net.desk_scale = *g.desk_scale;
  return c;
}

int exit_code(ExitCode e) { return static_cast<int>(e); }

void print_row(const ResultRow& r) {
  std::cout << results_header << "\n" << csv_line(r) << "\n";
  if (r.paper_ref_top1) std::cout << "paper_ref_top1 " << *r.paper_ref_top1 << "% (reference, not reproduced)\n";
}

int cmd_train(const Globals& g) {
  const ExperimentConfig c = resolve_config(g);
  const auto out = run_experiment(c, [](const HistoryRecord& h) {
    std::printf("epoch %zu  train_loss %.6f  val_error %.4f  lr %.3g\n", h.epoch, h.train_loss, h.val_error, h.lr);
    std::fflush(stdout);
  });
  print_row(out.row);
  return 0;
}

template <typename T>
double eval_checkpoint(const ExperimentConfig& c, const fs::path& checkpoint) {
  const Splits data = load_splits(c);
  Network<T> net = load_checkpoint<T>(checkpoint);
  const Preprocessor pre = fit_preprocessor(data.train, c.normalization, c.alpha_zscore);
  EvalConfig ec = c.eval;
  ec.score_scale = c.train.loss.scale;
  return evaluate_top1(net, data.test, pre, ec);
}

int cmd_eval(const Globals& g, const std::string& checkpoint) {
  const ExperimentConfig c = resolve_config(g);
  c.validate();
  const double top1 = c.precision == Precision::double_ ? eval_checkpoint<double>(c, checkpoint)
                                                        : eval_checkpoint<float>(c, checkpoint);
  std::printf("top1 %.6f (%s, %s)\n", top1, to_string(c.eval.mode).c_str(), checkpoint.c_str());
  if (const auto ref = reference_for(c)) std::cout << "paper_ref_top1 " << *ref << "% (reference, not reproduced)\n";
  return 0;
}

int cmd_sweep(const Globals& g, const std::string& axis, const std::vector<std::string>& versions,
              const std::vector<std::string>& variants, bool empty_grid) {
  SweepConfig s;
  s.base = resolve_config(g);
  s.axis = parse_sweep_axis(axis);
  if (!versions.empty() || empty_grid) s.versions = versions;
  s.variants = variants;
  if (empty_grid) s.variants.clear(), s.versions.clear();
  for (const auto& v : s.versions) parse_version(v);
  for (const auto& v : s.variants) sweep_cell_config(s, "v1", v);
  const SweepResult r = sweep(s, [](const SweepCell& c) {
    if (c.row.top1) {
      std::printf("cell %s/%s top1 %.4f (%.1fs)\n", c.version.c_str(), c.variant.c_str(), *c.row.top1, c.row.wall_s);
    } else {
      std::printf("cell %s/%s FAILED: %s\n", c.version.c_str(), c.variant.c_str(), c.row.error.c_str());
    }
    std::fflush(stdout);
  });
  const std::string pivot = pivot_csv(r);
  const fs::path out = fs::path(s.base.out_dir) / ("pivot_" + to_string(s.axis) + ".csv");
  write_text(out, pivot);
  std::cout << pivot;
  const auto failed = r.failed();
  std::printf("%zu cells, %zu failed; pivot written to %s\n", r.cells.size(), failed.size(), out.c_str());
  for (const auto* f : failed) std::printf("  failed %s/%s: %s\n", f->version.c_str(), f->variant.c_str(), f->row.error.c_str());
  return 0;
}

int cmd_gradcheck(const std::string& scope) {
  const GradcheckReport rep = gradcheck(parse_gradcheck_scope(scope));
  std::cout << rep.format();
  std::cout << (rep.passed() ? "gradcheck passed\n" : "gradcheck FAILED\n");
  return rep.passed() ? 0 : exit_code(ExitCode::verification_failure);
}

int cmd_encode(const fs::path& input, const fs::path& output) {
  if (!fs::is_directory(input)) throw IoError("input directory " + input.string() + " does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(input)) {
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::size_t done = 0, skipped = 0, raw_bytes = 0, enc_bytes = 0;
  double max_err = 0.0, max_bound_ratio = 0.0;
  for (const auto& f : files) {
    Tensor<float> img;
    try {
      img = read_png(f);
    } catch (const Error& e) {
      std::cerr << "warning: skipping " << f.string() << ": " << e.what() << "\n";
      ++skipped;
      continue;
    }
    const EncodedImage enc = alpha_encode(img);
    fs::path dst = output / fs::relative(f, input);
    dst.replace_extension(".aenc");
    fs::create_directories(dst.parent_path());
    write_aenc(dst, enc);
    const Tensor<float> back = alpha_decode<float>(read_aenc(dst));
    double err = 0.0;
    for (std::size_t i = 0; i < img.size(); ++i) err = std::max(err, std::abs(double(img[i]) - double(back[i])));
    max_err = std::max(max_err, err);
    max_bound_ratio = std::max(max_bound_ratio, err / (enc.scale / 510.0));
    raw_bytes += img.size() * sizeof(float);
    enc_bytes += fs::file_size(dst);
    ++done;
  }
  std::printf("encoded %zu files, skipped %zu\n", done, skipped);
  std::printf("raw float32 bytes %zu, encoded bytes %zu, ratio %.3f\n", raw_bytes, enc_bytes,
              enc_bytes ? double(raw_bytes) / double(enc_bytes) : 0.0);
  std::printf("max round-trip error %.6g (%.4f of the scale/510 bound)\n", max_err, max_bound_ratio);
  return 0;
}

int cmd_toy(const Globals& g, const fs::path& dest, const std::string& format) {
  const ExperimentConfig c = resolve_config(g);
  ToyConfig t;
  t.classes = c.toy_classes;
  t.per_class = c.toy_per_class;
  t.size = c.toy_size;
  t.channels = c.net.in_channels;
  t.noise = c.toy_noise;
  t.seed = c.toy_seed;
  const Dataset ds = make_toy_dataset(t);
  switch (parse_data_format(format)) {
    case DataFormat::idx: save_idx(dest, ds); break;
    case DataFormat::image_dir: save_image_dir(dest, ds); break;
    case DataFormat::toy: throw ConfigError("toy export needs idx or image-dir");
  }
  std::printf("wrote %zu samples (%zu classes) to %s\n", ds.size(), ds.class_count, dest.c_str());
  return 0;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

// Grouped bar chart of a pivot CSV: one group per row, measured bars solid and
// reference bars hatched in the same color.
int cmd_plot(const fs::path& pivot, const fs::path& svg) {
  std::istringstream in(read_text(pivot));
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty pivot file " + pivot.string());
  const auto header = split_csv_line(line);
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(split_csv_line(line));
  std::vector<std::size_t> measured, reference;
  const std::size_t first = header.size() > 1 && header[1] == "layers" ? 2 : 1;
  for (std::size_t i = first; i < header.size(); ++i) {
    (header[i].rfind("paper_", 0) == 0 ? reference : measured).push_back(i);
  }
  const char* colors[] = {"#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2"};
  const double bar = 14, gap = 24, left = 50, top = 30, height = 240;
  const std::size_t per_group = measured.size() + reference.size();
  const double width = left + rows.size() * (per_group * bar + gap) + 180;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << top + height + 50
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<defs><pattern id=\"h\" width=\"4\" height=\"4\" patternUnits=\"userSpaceOnUse\">"
       "<path d=\"M0,4 L4,0\" stroke=\"white\" stroke-width=\"1\"/></pattern></defs>\n";
  for (int t = 0; t <= 100; t += 25) {
    const double y = top + height * (1 - t / 100.0);
    s << "<line x1=\"" << left << "\" x2=\"" << width - 180 << "\" y1=\"" << y << "\" y2=\"" << y
      << "\" stroke=\"#ddd\"/><text x=\"" << left - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">" << t
      << "</text>\n";
  }
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const double gx = left + r * (per_group * bar + gap) + gap / 2;
    std::size_t k = 0;
    auto draw = [&](std::size_t col, std::size_t color, bool hatched) {
      double v = 0;
      if (col < rows[r].size() && !rows[r][col].empty() && rows[r][col] != "failed") v = std::stod(rows[r][col]);
      const double h = height * std::clamp(v, 0.0, 100.0) / 100.0, x = gx + bar * k++;
      s << "<rect x=\"" << x << "\" y=\"" << top + height - h << "\" width=\"" << bar - 2 << "\" height=\"" << h
        << "\" fill=\"" << colors[color % 5] << "\"/>\n";
      if (hatched)
        s << "<rect x=\"" << x << "\" y=\"" << top + height - h << "\" width=\"" << bar - 2 << "\" height=\"" << h
          << "\" fill=\"url(#h)\"/>\n";
    };
    for (std::size_t i = 0; i < measured.size(); ++i) draw(measured[i], i, false);
    for (std::size_t i = 0; i < reference.size(); ++i) draw(reference[i], i, true);
    s << "<text x=\"" << gx + per_group * bar / 2 << "\" y=\"" << top + height + 16 << "\" text-anchor=\"middle\">"
      << rows[r][0] << "</text>\n";
  }
  double ly = top;
  for (std::size_t i = 0; i < measured.size() + reference.size(); ++i) {
    const bool ref = i >= measured.size();
    const std::size_t col = ref ? reference[i - measured.size()] : measured[i];
    const std::size_t color = ref ? i - measured.size() : i;
    s << "<rect x=\"" << width - 170 << "\" y=\"" << ly << "\" width=\"10\" height=\"10\" fill=\"" << colors[color % 5]
      << "\"/>";
    if (ref) s << "<rect x=\"" << width - 170 << "\" y=\"" << ly << "\" width=\"10\" height=\"10\" fill=\"url(#h)\"/>";
    s << "<text x=\"" << width - 155 << "\" y=\"" << ly + 9 << "\">" << header[col] << "</text>\n";
    ly += 16;
  }
  s << "<text x=\"" << left << "\" y=\"16\">Top-1 (%)  hatched: reference, not reproduced</text>\n</svg>\n";
  write_text(svg, s.str());
  std::printf("wrote %s (%zu groups)\n", svg.c_str(), rows.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"anet: train, evaluate and compare Alpha-Net style networks"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "key=value experiment config file");
  app.add_option("--seed", g.seed, "master seed (network, training and split)");
  app.add_option("--out", g.out_dir, "output directory");
  app.add_option("--desk-scale", g.desk_scale, "layer budget divisor");
  app.add_option("--set", g.overrides, "override one config key, e.g. --set max_epochs=5");
  app.fallthrough();

  auto* train = app.add_subcommand("train", "train one configuration and append its result row");
  auto* eval = app.add_subcommand("eval", "evaluate a saved checkpoint on the configured test split");
  std::string checkpoint;
  eval->add_option("--checkpoint", checkpoint, "checkpoint path (without .manifest/.bin)")->required();

  auto* sweep_cmd = app.add_subcommand("sweep", "run a versions x variants comparison grid");
  std::string axis = "structure";
  std::vector<std::string> versions, variants;
  bool empty_grid = false;
  sweep_cmd->add_option("--axis", axis, "structure|loss|normalization|architecture (or table1..table4)");
  sweep_cmd->add_option("--versions", versions, "subset of v1 v2 v3 v4")->delimiter(',');
  sweep_cmd->add_option("--variants", variants, "subset of the axis values")->delimiter(',');
  sweep_cmd->add_flag("--empty", empty_grid, "run an empty grid (writes an empty table)");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  std::string scope = "all";
  grad->add_option("--scope", scope, "all|layer|loss|network");

  auto* encode = app.add_subcommand("encode", "alpha-encode every PNG in a directory");
  std::string enc_in, enc_out;
  encode->add_option("input", enc_in)->required();
  encode->add_option("output", enc_out)->required();

  auto* toy = app.add_subcommand("toy", "export the synthetic toy dataset");
  std::string toy_dest, toy_format = "image-dir";
  toy->add_option("dest", toy_dest)->required();
  toy->add_option("--format", toy_format, "idx|image-dir");

  auto* plot = app.add_subcommand("plot", "bar chart (SVG) of a sweep pivot CSV");
  std::string plot_in, plot_out;
  plot->add_option("pivot", plot_in)->required();
  plot->add_option("svg", plot_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : exit_code(ExitCode::input_error);
  }

  try {
    if (*train) return cmd_train(g);
    if (*eval) return cmd_eval(g, checkpoint);
    if (*sweep_cmd) return cmd_sweep(g, axis, versions, variants, empty_grid);
    if (*grad) return cmd_gradcheck(scope);
    if (*encode) return cmd_encode(enc_in, enc_out);
    if (*toy) return cmd_toy(g, toy_dest, toy_format);
    if (*plot) return cmd_plot(plot_in, plot_out);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return exit_code(ExitCode::numeric_failure);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(ExitCode::input_error);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(ExitCode::input_error);
  }
  return 0;
}
