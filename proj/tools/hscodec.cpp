// Command-line surface of the codec: train, compress, decompress, eval, and
// rd-curve. Every failure prints a single machine-parsable `error:` line;
// exit codes are 0 (success), 2 (usage), 3 (data error), 4 (model/stream
// mismatch).

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hsc/codec.hpp"
#include "hsc/image.hpp"
#include "hsc/model.hpp"
#include "hsc/trainer.hpp"

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitMismatch = 4;

std::vector<std::uint8_t> read_binary(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("cannot open " + path);
  const auto size = static_cast<std::size_t>(f.tellg());
  f.seekg(0);
  std::vector<std::uint8_t> bytes(size);
  f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (!f) throw std::runtime_error("cannot read " + path);
  return bytes;
}

void write_binary(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot create " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed for " + path);
}

struct LoadedModel {
  std::unique_ptr<hsc::Model> model;
  double lambda = 0.0;  // from the checkpoint's training config; 0 if absent
};

LoadedModel load_model(const std::string& ckpt_path) {
  const hsc::Checkpoint ck = hsc::Checkpoint::load(ckpt_path);
  const auto cfg = hsc::model_config_from_string(ck.require_meta("model_config"));
  hsc::Rng scratch(0);
  LoadedModel lm;
  lm.model = std::make_unique<hsc::Model>(cfg, scratch);
  hsc::load_params(ck, lm.model->reg);
  if (const auto* tc = ck.find_meta("train_config"))
    lm.lambda = hsc::train_config_from_string(*tc).lambda;
  return lm;
}

std::vector<std::filesystem::path> list_ppms(const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw std::runtime_error("not a directory: " + dir);
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".ppm") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no .ppm images in " + dir);
  return files;
}

struct EvalRow {
  std::string name;
  double bpp = 0.0;
  double psnr = 0.0;
};

struct EvalSummary {
  std::vector<EvalRow> rows;
  double mean_bpp = 0.0;
  double mean_psnr = 0.0;  // +inf if any image reconstructed exactly
};

// Compress + decompress every image in the directory through the model and
// measure true container rate against reconstruction quality.
EvalSummary eval_directory(const hsc::Model& model, const std::string& dir, double lambda) {
  EvalSummary s;
  double bpp_acc = 0.0, psnr_acc = 0.0;
  const std::uint8_t lidx = hsc::lambda_index(lambda);
  for (const auto& path : list_ppms(dir)) {
    const auto img = hsc::read_ppm<float>(path.string());
    const auto comp = hsc::compress(model, img, lidx);
    const auto deco = hsc::decompress(model, comp.bytes);
    EvalRow row;
    row.name = path.filename().string();
    row.bpp = hsc::bits_per_pixel(comp.bytes.size(), img.shape[0], img.shape[1]);
    row.psnr = hsc::psnr_db(img, deco.image);
    bpp_acc += row.bpp;
    psnr_acc += row.psnr;
    s.rows.push_back(std::move(row));
  }
  s.mean_bpp = bpp_acc / static_cast<double>(s.rows.size());
  s.mean_psnr = psnr_acc / static_cast<double>(s.rows.size());
  return s;
}

std::string fmt(double v, int prec = 6) {
  std::ostringstream os;
  os.precision(prec);
  os << std::fixed << v;
  return os.str();
}

int cmd_train(const std::string& config_path, const std::string& data_dir, const std::string& out) {
  const hsc::TrainConfig cfg = hsc::load_train_config(config_path);
  const auto data = hsc::load_training_set<float>(data_dir, cfg.crop, &std::cerr);
  std::cerr << "training on " << data.images.size() << " images for " << cfg.steps
            << " steps (lambda=" << cfg.lambda << ")\n";
  hsc::Trainer trainer(cfg);
  trainer.run(data, &std::cout, out);
  std::cerr << "wrote checkpoint " << out << " at step " << trainer.step() << "\n";
  return 0;
}

int cmd_compress(const std::string& model_path, const std::string& in, const std::string& out) {
  const LoadedModel lm = load_model(model_path);
  const auto img = hsc::read_ppm<float>(in);
  const auto res = hsc::compress(*lm.model, img, hsc::lambda_index(lm.lambda));
  write_binary(out, res.bytes);
  const double bpp = hsc::bits_per_pixel(res.bytes.size(), img.shape[0], img.shape[1]);
  const double est = res.estimated_bits / (8.0 * static_cast<double>(res.bytes.size()));
  std::cout << "compressed " << in << " (" << img.shape[1] << "x" << img.shape[0] << ") -> " << out
            << ": " << res.bytes.size() << " bytes, " << fmt(bpp, 4) << " bpp ("
            << fmt(100.0 * est, 1) << "% payload information)\n";
  return 0;
}

int cmd_decompress(const std::string& model_path, const std::string& in, const std::string& out) {
  const LoadedModel lm = load_model(model_path);
  const auto bytes = read_binary(in);
  const auto res = hsc::decompress(*lm.model, bytes);
  hsc::write_ppm(out, res.image);
  std::cout << "decompressed " << in << " -> " << out << " (" << res.image.shape[1] << "x"
            << res.image.shape[0] << ")\n";
  return 0;
}

int cmd_eval(const std::string& model_path, const std::string& data_dir, const std::string& report) {
  const LoadedModel lm = load_model(model_path);
  const EvalSummary s = eval_directory(*lm.model, data_dir, lm.lambda);
  std::ofstream csv(report);
  if (!csv) throw std::runtime_error("cannot create " + report);
  csv << "name,bpp,psnr_db\n";
  for (const auto& r : s.rows)
    csv << r.name << "," << fmt(r.bpp) << "," << hsc::psnr_str(r.psnr) << "\n";
  csv << "mean," << fmt(s.mean_bpp) << "," << hsc::psnr_str(s.mean_psnr) << "\n";
  if (!csv.flush()) throw std::runtime_error("write failed for " + report);
  std::cout << "evaluated " << s.rows.size() << " images: mean " << fmt(s.mean_bpp, 4) << " bpp, "
            << hsc::psnr_str(s.mean_psnr) << " dB -> " << report << "\n";
  return 0;
}

struct RdPoint {
  double lambda = 0.0;
  double bpp = 0.0;
  double psnr = 0.0;
};

// Static single-file SVG: one polyline through the (bpp, psnr) points in
// rate order, with dots and axis labels. No external assets.
void write_rd_svg(const std::string& path, const std::vector<RdPoint>& pts) {
  const double kW = 640, kH = 440, kL = 70, kR = 24, kT = 24, kB = 56;
  double x0 = pts.front().bpp, x1 = pts.back().bpp;
  double y0 = pts.front().psnr, y1 = pts.front().psnr;
  for (const auto& p : pts) {
    y0 = std::min(y0, p.psnr);
    y1 = std::max(y1, p.psnr);
  }
  const double xpad = std::max(1e-6, 0.08 * (x1 - x0));
  const double ypad = std::max(1e-6, 0.08 * (y1 - y0));
  x0 -= xpad;
  x1 += xpad;
  y0 -= ypad;
  y1 += ypad;
  const auto X = [&](double b) { return kL + (b - x0) / (x1 - x0) * (kW - kL - kR); };
  const auto Y = [&](double p) { return kH - kB - (p - y0) / (y1 - y0) * (kH - kT - kB); };

  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot create " + path);
  f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
    << "\" viewBox=\"0 0 " << kW << " " << kH << "\">\n";
  f << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  f << "<line x1=\"" << kL << "\" y1=\"" << kH - kB << "\" x2=\"" << kW - kR << "\" y2=\"" << kH - kB
    << "\" stroke=\"black\"/>\n";
  f << "<line x1=\"" << kL << "\" y1=\"" << kT << "\" x2=\"" << kL << "\" y2=\"" << kH - kB
    << "\" stroke=\"black\"/>\n";
  f << "<text x=\"" << (kL + kW - kR) / 2 << "\" y=\"" << kH - 16
    << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">bits per pixel</text>\n";
  f << "<text x=\"18\" y=\"" << (kT + kH - kB) / 2
    << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\" transform=\"rotate(-90 18 "
    << (kT + kH - kB) / 2 << ")\">PSNR (dB)</text>\n";
  for (const double b : {x0 + xpad, x1 - xpad})
    f << "<text x=\"" << X(b) << "\" y=\"" << kH - kB + 20
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" << fmt(b, 3)
      << "</text>\n";
  for (const double p : {y0 + ypad, y1 - ypad})
    f << "<text x=\"" << kL - 8 << "\" y=\"" << Y(p) + 4
      << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\">" << fmt(p, 2)
      << "</text>\n";
  f << "<polyline fill=\"none\" stroke=\"#1f6feb\" stroke-width=\"2\" points=\"";
  for (const auto& p : pts) f << fmt(X(p.bpp), 2) << "," << fmt(Y(p.psnr), 2) << " ";
  f << "\"/>\n";
  for (const auto& p : pts) {
    f << "<circle cx=\"" << fmt(X(p.bpp), 2) << "\" cy=\"" << fmt(Y(p.psnr), 2)
      << "\" r=\"4\" fill=\"#1f6feb\"/>\n";
    f << "<text x=\"" << fmt(X(p.bpp), 2) << "\" y=\"" << fmt(Y(p.psnr) - 10, 2)
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">&#955;="
      << p.lambda << "</text>\n";
  }
  f << "</svg>\n";
  if (!f.flush()) throw std::runtime_error("write failed for " + path);
}

int cmd_rd_curve(const std::vector<std::string>& model_paths, const std::string& data_dir,
                 const std::string& out_prefix) {
  std::vector<RdPoint> pts;
  for (const auto& mp : model_paths) {
    const LoadedModel lm = load_model(mp);
    const EvalSummary s = eval_directory(*lm.model, data_dir, lm.lambda);
    pts.push_back({lm.lambda, s.mean_bpp, s.mean_psnr});
  }
  std::sort(pts.begin(), pts.end(), [](const RdPoint& a, const RdPoint& b) { return a.bpp < b.bpp; });

  const std::string csv_path = out_prefix + ".csv";
  std::ofstream csv(csv_path);
  if (!csv) throw std::runtime_error("cannot create " + csv_path);
  csv << "lambda,mean_bpp,mean_psnr_db\n";
  for (const auto& p : pts)
    csv << p.lambda << "," << fmt(p.bpp) << "," << hsc::psnr_str(p.psnr) << "\n";
  if (!csv.flush()) throw std::runtime_error("write failed for " + csv_path);

  const std::string svg_path = out_prefix + ".svg";
  write_rd_svg(svg_path, pts);
  std::cout << "rate-distortion sweep over " << pts.size() << " models -> " << csv_path << ", "
            << svg_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hybrid spatial-channel attention learned image codec"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_path, model_path, in_path;
  std::vector<std::string> model_paths;

  auto* train = app.add_subcommand("train", "train a model and write a checkpoint");
  train->add_option("--config", config_path, "key=value training config file")->required();
  train->add_option("--data", data_dir, "directory of .ppm training images")->required();
  train->add_option("--out", out_path, "checkpoint output path")->required();

  auto* compress = app.add_subcommand("compress", "compress a PPM image to a bitstream");
  compress->add_option("--model", model_path, "model checkpoint")->required();
  compress->add_option("--in", in_path, "input .ppm image")->required();
  compress->add_option("--out", out_path, "output bitstream path")->required();

  auto* decompress = app.add_subcommand("decompress", "reconstruct a PPM image from a bitstream");
  decompress->add_option("--model", model_path, "model checkpoint")->required();
  decompress->add_option("--in", in_path, "input bitstream")->required();
  decompress->add_option("--out", out_path, "output .ppm path")->required();

  auto* eval = app.add_subcommand("eval", "rate/quality report over an image directory");
  eval->add_option("--model", model_path, "model checkpoint")->required();
  eval->add_option("--data", data_dir, "directory of .ppm images")->required();
  eval->add_option("--report", out_path, "CSV report path")->required();

  auto* rd = app.add_subcommand("rd-curve", "rate-distortion sweep across checkpoints");
  rd->add_option("--models", model_paths, "comma-separated checkpoint list")
      ->required()
      ->delimiter(',');
  rd->add_option("--data", data_dir, "directory of .ppm images")->required();
  rd->add_option("--out", out_path, "output prefix for .csv/.svg")->required();

  try {
    app.parse(argc, argv);
    if (train->parsed()) return cmd_train(config_path, data_dir, out_path);
    if (compress->parsed()) return cmd_compress(model_path, in_path, out_path);
    if (decompress->parsed()) return cmd_decompress(model_path, in_path, out_path);
    if (eval->parsed()) return cmd_eval(model_path, data_dir, out_path);
    if (rd->parsed()) {
      if (model_paths.size() < 2)
        throw CLI::ValidationError("--models", "rd-curve needs at least 2 checkpoints");
      return cmd_rd_curve(model_paths, data_dir, out_path);
    }
    return 0;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help and friends
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const hsc::ModelMismatchError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitMismatch;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
}
