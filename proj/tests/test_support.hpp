// Independent oracles and generators shared by the unit tests and the
// acceptance runner.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <regex>
#include <string>
#include <vector>

#include "kplora/answer_grammar.hpp"
#include "kplora/dataset_builder.hpp"
#include "kplora/lora.hpp"
#include "kplora/metrics.hpp"
#include "kplora/rng.hpp"
#include "kplora/trainer.hpp"

namespace kplora::testing {

inline KeypointSet random_set(Rng& rng) {
  KeypointSet s;
  for (auto& k : s) k = {rng.uniform(), rng.uniform()};
  return s;
}

inline double loop_mpjpe(const KeypointSet& a, const KeypointSet& b) {
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double dx = a[i].x - b[i].x, dy = a[i].y - b[i].y;
    sum += std::sqrt(dx * dx + dy * dy);
  }
  return sum / static_cast<double>(a.size());
}

inline double loop_pck(const KeypointSet& a, const KeypointSet& b, double alpha) {
  int hits = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double dx = a[i].x - b[i].x, dy = a[i].y - b[i].y;
    if (std::sqrt(dx * dx + dy * dy) < alpha) ++hits;
  }
  return hits / static_cast<double>(a.size());
}

// Minimum assignment cost over all injective maps of the shorter side.
inline double brute_force_min(const std::vector<std::vector<double>>& cost) {
  const std::size_t rows = cost.size(), cols = rows ? cost[0].size() : 0;
  const std::size_t k = std::min(rows, cols);
  std::vector<std::size_t> perm(std::max(rows, cols));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double c = 0.0;
    for (std::size_t i = 0; i < k; ++i) c += rows <= cols ? cost[i][perm[i]] : cost[perm[i]][i];
    best = std::min(best, c);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

inline ToolInstance random_instance(Rng& rng, int max_coord = 2000) {
  static const auto names = default_class_vocab().names();
  ToolInstance t;
  t.class_name = names[static_cast<std::size_t>(rng.uniform_int(0, 13))];
  for (auto& k : t.keypoints)
    k = {static_cast<double>(rng.uniform_int(0, max_coord)), static_cast<double>(rng.uniform_int(0, max_coord))};
  return t;
}

inline std::vector<ToolInstance> random_instances(Rng& rng, int max_n = 4) {
  std::vector<ToolInstance> xs;
  const auto n = rng.uniform_int(1, max_n);
  for (int i = 0; i < n; ++i) xs.push_back(random_instance(rng));
  return xs;
}

// Signed decimal, optional spaces, comma, optional spaces, signed decimal,
// with word boundaries on both ends; values rounded half up.
inline std::vector<Keypoint> regex_pairs(const std::string& text) {
  static const std::regex pair(
      R"((^|[^A-Za-z0-9_.])([+-]?\d+(?:\.\d+)?)\s*,\s*([+-]?\d+(?:\.\d+)?)(?![A-Za-z0-9_]))");
  std::vector<Keypoint> out;
  for (auto it = std::sregex_iterator(text.begin(), text.end(), pair); it != std::sregex_iterator(); ++it) {
    const double x = std::strtod((*it)[2].str().c_str(), nullptr);
    const double y = std::strtod((*it)[3].str().c_str(), nullptr);
    out.push_back({std::floor(x + 0.5), std::floor(y + 0.5)});
  }
  return out;
}

inline std::vector<Keypoint> flatten(const ParseResult& r) {
  std::vector<Keypoint> out;
  for (const auto& inst : r.instances) out.insert(out.end(), inst.keypoints.begin(), inst.keypoints.end());
  return out;
}

// One instance rewritten with random bracket, spacing, separator and prose
// changes. The class word and all 24 integers keep their order.
inline std::string mutate_instance(const ToolInstance& t, Rng& rng) {
  static const char* prose[] = {"Here you go. ", "The tool is ", "I think this shows a ", "Answer:\n", ""};
  static const char* tails[] = {"", ". Hope this helps!", "\nThese are my estimates.", " done"};
  static const char* open[] = {"(", "[", "", "{"};
  static const char* close[] = {")", "]", "", "}"};
  static const char* seps[] = {", ", ",", "; ", "\n", " ", " and "};
  const auto space = [&] { return std::string(static_cast<std::size_t>(rng.uniform_int(0, 2)), ' '); };

  std::string s = prose[rng.uniform_int(0, 4)];
  s += t.class_name;
  s += rng.bernoulli(0.5) ? ": " : (rng.bernoulli(0.5) ? ". Keypoints: " : " ");
  const auto b = static_cast<std::size_t>(rng.uniform_int(0, 3));
  const char* sep = seps[rng.uniform_int(0, 5)];
  for (std::size_t k = 0; k < kKeypointCount; ++k) {
    if (k) s += sep;
    s += open[b];
    s += space();
    s += std::to_string(static_cast<long long>(t.keypoints[k].x));
    s += space() + "," + space();
    s += std::to_string(static_cast<long long>(t.keypoints[k].y));
    s += space();
    s += close[b];
  }
  s += tails[rng.uniform_int(0, 3)];
  return s;
}

// Byte strings biased towards digits, commas and brackets, with arbitrary
// bytes mixed in.
inline std::string random_text(Rng& rng, int max_len = 300) {
  static const std::string alphabet = "0123456789,,,  ()[]-+.;:\nabcXYZ_Scissors";
  std::string s;
  const auto n = rng.uniform_int(0, max_len);
  for (int i = 0; i < n; ++i) {
    if (rng.bernoulli(0.1))
      s += static_cast<char>(rng.uniform_int(0, 255));
    else
      s += alphabet[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(alphabet.size()) - 1))];
  }
  return s;
}

inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max(floor, std::abs(a) + std::abs(b));
}

inline Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (auto& v : m.flat()) v = rng.normal(0.0, scale);
  return m;
}

inline LoraLinear random_layer(std::size_t d, std::size_t h, int rank, Rng& rng, double alpha = 16.0) {
  LoraLinear l;
  l.w0 = random_matrix(d, h, rng);
  l.adapter.alpha = alpha;
  l.adapter.a = random_matrix(d, static_cast<std::size_t>(rank), rng);
  l.adapter.b = random_matrix(static_cast<std::size_t>(rank), h, rng);
  return l;
}

// Scalar objective <upstream, y> evaluated in eval mode.
inline double objective(const LoraLinear& l, const Matrix& x, const Matrix& g) {
  const Matrix y = lora_forward(l, x, false, nullptr, 0.0);
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y.data()[i] * g.data()[i];
  return s;
}

inline double max_rel_error(const Matrix& analytic, const Matrix& numeric) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i)
    worst = std::max(worst, relative_error(analytic.data()[i], numeric.data()[i], 1e-8));
  return worst;
}

inline Matrix finite_difference(LoraLinear l, Matrix LoraFactors::*which, const Matrix& x, const Matrix& g,
                                double h = 1e-5) {
  Matrix& p = l.adapter.*which;
  Matrix out(p.rows(), p.cols());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double saved = p.data()[i];
    p.data()[i] = saved + h;
    const double up = objective(l, x, g);
    p.data()[i] = saved - h;
    const double down = objective(l, x, g);
    p.data()[i] = saved;
    out.data()[i] = (up - down) / (2 * h);
  }
  return out;
}

// Central differences of the objective with respect to the layer input.
inline Matrix input_finite_difference(const LoraLinear& l, Matrix x, const Matrix& g, double h = 1e-5) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x.data()[i];
    x.data()[i] = saved + h;
    const double up = objective(l, x, g);
    x.data()[i] = saved - h;
    const double down = objective(l, x, g);
    x.data()[i] = saved;
    out.data()[i] = (up - down) / (2 * h);
  }
  return out;
}

// Worst relative error between analytic gradients and central differences
// over every parameter that `mode` trains. Dropout is off.
inline double model_gradient_check(ToyLM& m, const std::vector<LmSequence>& batch, TrainMode mode,
                                   double h = 1e-5) {
  batch_loss_and_grads(m, batch, nullptr, mode);
  std::vector<Matrix> analytic;
  for (auto& p : m.parameters())
    if (is_trainable(p, mode)) analytic.push_back(*p.grad);
  double worst = 0.0;
  std::size_t slot = 0;
  for (auto& p : m.parameters()) {
    if (!is_trainable(p, mode)) continue;
    for (std::size_t i = 0; i < p.value->size(); ++i) {
      double& w = p.value->data()[i];
      const double saved = w;
      w = saved + h;
      const double up = batch_loss_and_grads(m, batch, nullptr, TrainMode::frozen);
      w = saved - h;
      const double down = batch_loss_and_grads(m, batch, nullptr, TrainMode::frozen);
      w = saved;
      worst = std::max(worst, relative_error(analytic[slot].data()[i], (up - down) / (2 * h)));
    }
    ++slot;
  }
  return worst;
}

inline LmSequence random_sequence(Rng& rng, std::size_t n, int vocab) {
  LmSequence s;
  for (std::size_t i = 0; i < n; ++i) {
    s.inputs.push_back(static_cast<int>(rng.uniform_int(0, vocab - 1)));
    s.targets.push_back(static_cast<int>(rng.uniform_int(0, vocab - 1)));
    s.mask.push_back(i >= n / 3 ? 1 : 0);
  }
  return s;
}

// Relative path -> bytes for every regular file under `dir`.
inline std::map<std::string, std::string> snapshot_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = read_text_file(e.path().string());
  return out;
}

}  // namespace kplora::testing
