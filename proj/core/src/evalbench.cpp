#include "detkit/evalbench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>
#include <string_view>

#include <fmt/format.h>
#include <json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "detkit/engine.hpp"

namespace detkit::evalbench {

using json = nlohmann::json;

std::vector<double> default_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

namespace {

struct Box {
  double x1, y1, x2, y2;
  double area() const { return std::max(0.0, x2 - x1) * std::max(0.0, y2 - y1); }
};

Box box_at(const Tensor& t, int64_t i) { return {t.at(i, 0), t.at(i, 1), t.at(i, 2), t.at(i, 3)}; }

// Crowd regions score intersection over the detection's own area.
double coco_iou(const Box& d, const Box& g, bool crowd) {
  const double iw = std::min(d.x2, g.x2) - std::max(d.x1, g.x1);
  const double ih = std::min(d.y2, g.y2) - std::max(d.y1, g.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double denom = crowd ? d.area() : d.area() + g.area() - inter;
  return denom > 0 ? inter / denom : 0.0;
}

// Per (image, class, area band) matching result.
struct ImageEval {
  std::vector<double> scores;
  std::vector<std::vector<uint8_t>> matched;  // [threshold][det]
  std::vector<std::vector<uint8_t>> ignored;  // [threshold][det]
  int64_t num_gt = 0;                         // non-ignored
};

ImageEval evaluate_image(const std::vector<Box>& gts, const std::vector<uint8_t>& gt_crowd,
                         const std::vector<Box>& dts_in, const std::vector<double>& scores_in, double lo, double hi,
                         const ApOptions& opts) {
  ImageEval ev;
  const size_t T = opts.iou_thresholds.size();
  // Non-ignored ground truth first.
  std::vector<size_t> g_order(gts.size());
  std::iota(g_order.begin(), g_order.end(), 0);
  std::vector<uint8_t> g_ignore_raw(gts.size());
  for (size_t g = 0; g < gts.size(); ++g) {
    const double a = gts[g].area();
    g_ignore_raw[g] = gt_crowd[g] || a < lo || a > hi;
  }
  std::stable_sort(g_order.begin(), g_order.end(), [&](size_t a, size_t b) { return g_ignore_raw[a] < g_ignore_raw[b]; });
  std::vector<Box> g_sorted;
  std::vector<uint8_t> g_ignore, g_crowd;
  for (size_t g : g_order) {
    g_sorted.push_back(gts[g]);
    g_ignore.push_back(g_ignore_raw[g]);
    g_crowd.push_back(gt_crowd[g]);
    if (!g_ignore_raw[g]) ++ev.num_gt;
  }

  std::vector<size_t> d_order(dts_in.size());
  std::iota(d_order.begin(), d_order.end(), 0);
  std::stable_sort(d_order.begin(), d_order.end(), [&](size_t a, size_t b) { return scores_in[a] > scores_in[b]; });
  if (d_order.size() > static_cast<size_t>(opts.max_dets)) d_order.resize(static_cast<size_t>(opts.max_dets));
  const size_t D = d_order.size(), G = g_sorted.size();
  for (size_t d : d_order) ev.scores.push_back(scores_in[d]);

  std::vector<std::vector<double>> ious(D, std::vector<double>(G));
  for (size_t d = 0; d < D; ++d)
    for (size_t g = 0; g < G; ++g) ious[d][g] = coco_iou(dts_in[d_order[d]], g_sorted[g], g_crowd[g]);

  ev.matched.assign(T, std::vector<uint8_t>(D, 0));
  ev.ignored.assign(T, std::vector<uint8_t>(D, 0));
  for (size_t t = 0; t < T; ++t) {
    std::vector<uint8_t> g_taken(G, 0);
    for (size_t d = 0; d < D; ++d) {
      double best = std::min(opts.iou_thresholds[t], 1 - 1e-10);
      int m = -1;
      for (size_t g = 0; g < G; ++g) {
        if (g_taken[g] && !g_crowd[g]) continue;
        // Once matched to a regular object, stop at the ignored tail.
        if (m > -1 && !g_ignore[static_cast<size_t>(m)] && g_ignore[g]) break;
        if (ious[d][g] < best) continue;
        best = ious[d][g];
        m = static_cast<int>(g);
      }
      if (m == -1) continue;
      ev.ignored[t][d] = g_ignore[static_cast<size_t>(m)];
      ev.matched[t][d] = 1;
      g_taken[static_cast<size_t>(m)] = 1;
    }
    for (size_t d = 0; d < D; ++d) {
      const double a = dts_in[d_order[d]].area();
      if (!ev.matched[t][d] && (a < lo || a > hi)) ev.ignored[t][d] = 1;
    }
  }
  return ev;
}

}  // namespace

ApMetrics coco_ap_evaluate(const std::vector<ImageDetections>& predictions,
                           const std::vector<ImageGroundTruth>& ground_truth, int64_t num_classes,
                           const ApOptions& opts) {
  if (num_classes < 1) throw BadArgument("coco_ap_evaluate: num_classes must be >= 1");
  if (opts.iou_thresholds.empty()) throw BadArgument("coco_ap_evaluate: no IoU thresholds");
  std::map<int64_t, const ImageGroundTruth*> gt_by_id;
  for (const auto& g : ground_truth) gt_by_id[g.image_id] = &g;
  std::map<int64_t, const ImageDetections*> dt_by_id;
  for (const auto& p : predictions) {
    if (!gt_by_id.count(p.image_id))
      throw BadArgument("coco_ap_evaluate: prediction for unknown image " + std::to_string(p.image_id));
    dt_by_id[p.image_id] = &p;
  }

  const double big = 1e5 * 1e5;
  const std::vector<std::pair<double, double>> bands = {
      {0, big}, {0, opts.small_area}, {opts.small_area, opts.large_area}, {opts.large_area, big}};
  const size_t T = opts.iou_thresholds.size();
  constexpr int R = 101;
  // precision[band][t][class][r], -1 where undefined
  std::vector<std::vector<std::vector<std::vector<double>>>> precision(
      bands.size(), std::vector<std::vector<std::vector<double>>>(
                        T, std::vector<std::vector<double>>(static_cast<size_t>(num_classes), std::vector<double>(R, -1.0))));

  ApMetrics out;
  for (int64_t k = 0; k < num_classes; ++k) {
    bool any_gt = false;
    for (size_t b = 0; b < bands.size(); ++b) {
      std::vector<double> scores;
      std::vector<std::vector<uint8_t>> tp(T), fp(T);
      int64_t npig = 0;
      for (const auto& [id, gt] : gt_by_id) {
        std::vector<Box> gboxes, dboxes;
        std::vector<uint8_t> gcrowd;
        std::vector<double> dscores;
        for (size_t i = 0; i < gt->labels.size(); ++i)
          if (gt->labels[i] == k) {
            gboxes.push_back(box_at(gt->boxes, static_cast<int64_t>(i)));
            gcrowd.push_back(gt->crowd.empty() ? 0 : gt->crowd[i]);
          }
        if (auto it = dt_by_id.find(id); it != dt_by_id.end())
          for (size_t i = 0; i < it->second->labels.size(); ++i)
            if (it->second->labels[i] == k) {
              dboxes.push_back(box_at(it->second->boxes, static_cast<int64_t>(i)));
              dscores.push_back(it->second->scores[i]);
            }
        if (gboxes.empty() && dboxes.empty()) continue;
        const ImageEval ev = evaluate_image(gboxes, gcrowd, dboxes, dscores, bands[b].first, bands[b].second, opts);
        npig += ev.num_gt;
        scores.insert(scores.end(), ev.scores.begin(), ev.scores.end());
        for (size_t t = 0; t < T; ++t)
          for (size_t d = 0; d < ev.scores.size(); ++d) {
            tp[t].push_back(ev.matched[t][d] && !ev.ignored[t][d]);
            fp[t].push_back(!ev.matched[t][d] && !ev.ignored[t][d]);
          }
      }
      if (npig == 0) continue;
      if (b == 0) any_gt = true;
      std::vector<size_t> order(scores.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t c) { return scores[a] > scores[c]; });
      const size_t nd = order.size();
      for (size_t t = 0; t < T; ++t) {
        std::vector<double> rc(nd), pr(nd);
        double tps = 0, fps = 0;
        for (size_t i = 0; i < nd; ++i) {
          tps += tp[t][order[i]];
          fps += fp[t][order[i]];
          rc[i] = tps / static_cast<double>(npig);
          pr[i] = tps / (fps + tps + std::numeric_limits<double>::epsilon());
        }
        for (size_t i = nd; i-- > 1;) pr[i - 1] = std::max(pr[i - 1], pr[i]);
        auto& q = precision[b][t][static_cast<size_t>(k)];
        std::fill(q.begin(), q.end(), 0.0);
        for (int r = 0; r < R; ++r) {
          const double thr = r == R - 1 ? 1.0 : 0.01 * r;
          const auto pi = static_cast<size_t>(std::lower_bound(rc.begin(), rc.end(), thr) - rc.begin());
          if (pi >= nd) break;
          q[static_cast<size_t>(r)] = pr[pi];
        }
      }
    }
    if (!any_gt) out.skipped_classes.push_back(std::to_string(k));
  }

  auto summarize = [&](size_t band, std::optional<double> thr) {
    double total = 0;
    int64_t count = 0;
    for (size_t t = 0; t < T; ++t) {
      if (thr && std::abs(opts.iou_thresholds[t] - *thr) > 1e-9) continue;
      for (const auto& cls : precision[band][t])
        for (double v : cls)
          if (v > -1) {
            total += v;
            ++count;
          }
    }
    return count ? total / static_cast<double>(count) : -1.0;
  };
  out.ap = summarize(0, std::nullopt);
  out.ap50 = summarize(0, 0.5);
  out.ap75 = summarize(0, 0.75);
  out.ap_small = summarize(1, std::nullopt);
  out.ap_medium = summarize(2, std::nullopt);
  out.ap_large = summarize(3, std::nullopt);
  return out;
}

ImageGroundTruth ground_truth_of(const data::Sample& sample) {
  ImageGroundTruth g;
  g.image_id = sample.image_id;
  g.boxes = sample.boxes.data();
  g.labels = sample.labels;
  g.crowd = sample.crowd;
  return g;
}

ImageDetections detections_of(int64_t image_id, const model::Detections& det) {
  return {image_id, det.boxes, det.scores, det.labels};
}

std::string results_json(const std::vector<ImageDetections>& predictions, const std::vector<int64_t>& category_ids) {
  json arr = json::array();
  for (const auto& p : predictions)
    for (size_t i = 0; i < p.scores.size(); ++i) {
      const auto b = box_at(p.boxes, static_cast<int64_t>(i));
      const auto label = static_cast<size_t>(p.labels[i]);
      arr.push_back({{"image_id", p.image_id},
                     {"category_id", label < category_ids.size() ? category_ids[label] : p.labels[i]},
                     {"bbox", {b.x1, b.y1, b.x2 - b.x1, b.y2 - b.y1}},
                     {"score", p.scores[i]}});
    }
  return arr.dump(1);
}

// ---------------------------------------------------------------------------

ParamCount count_parameters(nn::Module& model) {
  ParamCount c;
  for (auto& [_, p] : model.named_parameters()) {
    c.total += p->var.numel();
    if (p->trainable) c.trainable += p->var.numel();
  }
  return c;
}

FlopRules FlopRules::defaults() {
  FlopRules r;
  // Dense products count their multiply-accumulates; elementwise, shape and
  // normalization ops are free by the usual convention.
  for (const char* k : {"linear", "matmul", "conv2d", "attention", "deformable_attention"}) r.set(k, 1.0);
  for (const char* k : {"add", "mul", "relu", "sigmoid", "tanh", "exp", "inverse_sigmoid", "reshape", "reduce",
                        "softmax", "norm", "pool", "sine_embed", "loss"})
    r.set(k, 0.0);
  return r;
}

double FlopRules::weight(const std::string& kind) const {
  auto it = weights_.find(kind);
  if (it == weights_.end()) throw UnregisteredLayer("no FLOP rule for op kind '" + kind + "'");
  return it->second;
}

std::string FlopStats::gflops_cell() const {
  const double m = mean / 1e9, s = std / 1e9;
  return m >= 1.0 ? fmt::format("{:.1f} ± {:.1f}", m, s) : fmt::format("{:.4f} ± {:.4f}", m, s);
}

namespace {

class FlopCounter : public OpObserver {
 public:
  explicit FlopCounter(const FlopRules& rules) : rules_(rules) {}
  void on_op(std::string_view kind, double macs) override {
    const std::string k(kind);
    const double units = rules_.weight(k) * macs;
    total += units;
    by_kind[k] += units;
  }
  double total = 0;
  std::map<std::string, double> by_kind;

 private:
  const FlopRules& rules_;
};

}  // namespace

FlopStats estimate_flops(const std::function<void(size_t)>& run_input, size_t num_inputs, const FlopRules& rules) {
  if (num_inputs < 1) throw BadArgument("estimate_flops: need at least one input");
  FlopStats st;
  for (size_t i = 0; i < num_inputs; ++i) {
    FlopCounter counter(rules);
    {
      ScopedOpObserver scope(&counter);
      run_input(i);
    }
    st.per_input.push_back(counter.total);
    for (const auto& [k, v] : counter.by_kind) st.by_kind[k] += v;
  }
  const double n = static_cast<double>(num_inputs);
  st.mean = std::accumulate(st.per_input.begin(), st.per_input.end(), 0.0) / n;
  double var = 0;
  for (double v : st.per_input) var += (v - st.mean) * (v - st.mean);
  st.std = std::sqrt(var / n);
  return st;
}

namespace {

struct EvalScope {
  explicit EvalScope(nn::Module& m) : model(m), was_training(m.training()) { m.train(false); }
  ~EvalScope() { model.train(was_training); }
  nn::Module& model;
  bool was_training;
  NoGradGuard no_grad;
};

}  // namespace

FlopStats estimate_flops(model::Detector& model, const std::vector<Tensor>& images, const FlopRules& rules) {
  EvalScope scope(model);
  return estimate_flops(
      [&](size_t i) {
        const Tensor& img = images[i];
        if (img.rank() != 3 || img.dim(0) != 3) throw BadArgument("estimate_flops: images must be [3 x H x W]");
        model::Mask mask(static_cast<size_t>(img.dim(1) * img.dim(2)), 0);
        model.forward_image(Var(img), mask, model::Mode::kEval);
      },
      images.size(), rules);
}

FpsStats measure_fps(const std::function<void()>& once, int warmup_iters, int timed_iters) {
  if (timed_iters < 10) throw BadArgument("measure_fps: timed_iters must be >= 10, got " + std::to_string(timed_iters));
  if (warmup_iters < 0) throw BadArgument("measure_fps: warmup_iters must be >= 0");
  using clock = std::chrono::steady_clock;
  for (int i = 0; i < warmup_iters; ++i) once();
  // Everything runs synchronously on the calling thread, so the clock read
  // after each call already includes all work for that iteration.
  std::vector<double> ms;
  const auto start = clock::now();
  auto prev = start;
  for (int i = 0; i < timed_iters; ++i) {
    once();
    const auto now = clock::now();
    ms.push_back(std::chrono::duration<double, std::milli>(now - prev).count());
    prev = now;
  }
  const double total = std::chrono::duration<double>(prev - start).count();
  FpsStats st;
  st.timed_iters = timed_iters;
  st.fps = static_cast<double>(timed_iters) / total;
  st.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(ms.size());
  double var = 0;
  for (double v : ms) var += (v - st.mean_ms) * (v - st.mean_ms);
  st.std_ms = std::sqrt(var / static_cast<double>(ms.size()));
  std::vector<double> sorted = ms;
  std::sort(sorted.begin(), sorted.end());
  const size_t n = sorted.size();
  st.median_ms = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  return st;
}

FpsStats measure_fps(model::Detector& model, int64_t height, int64_t width, int warmup_iters, int timed_iters) {
  if (height < 1 || width < 1) throw BadArgument("measure_fps: bad input size");
  EvalScope scope(model);
  std::mt19937_64 rng(0);
  const Tensor img = Tensor::uniform({3, height, width}, rng, 0.0, 1.0);
  const model::Mask mask(static_cast<size_t>(height * width), 0);
  const Var input(img);
  return measure_fps([&] { model.forward_image(input, mask, model::Mode::kEval); }, warmup_iters, timed_iters);
}

void visualize_predictions(const Tensor& image, const model::Detections& det,
                           const std::vector<std::string>& class_names, double score_floor,
                           const std::filesystem::path& out_path) {
  if (image.rank() != 3 || image.dim(2) != 3) throw BadArgument("visualize_predictions: image must be [H x W x 3]");
  const int h = static_cast<int>(image.dim(0)), w = static_cast<int>(image.dim(1));
  cv::Mat m(h, w, CV_8UC3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        m.at<cv::Vec3b>(y, x)[2 - c] =
            cv::saturate_cast<uchar>(std::lround(image[(static_cast<int64_t>(y) * w + x) * 3 + c] * 255.0));
  for (int64_t i = 0; i < det.size(); ++i) {
    const double score = det.scores[static_cast<size_t>(i)];
    if (score < score_floor) continue;
    const int64_t label = det.labels[static_cast<size_t>(i)];
    // Golden-angle hue walk: stable, well separated colors per class.
    cv::Mat hsv(1, 1, CV_8UC3, cv::Scalar(static_cast<double>((label * 47) % 180), 220, 255)), bgr;
    cv::cvtColor(hsv, bgr, cv::COLOR_HSV2BGR);
    const auto px = bgr.at<cv::Vec3b>(0, 0);
    const cv::Scalar color(px[0], px[1], px[2]);
    const cv::Point p1(static_cast<int>(std::lround(det.boxes.at(i, 0))), static_cast<int>(std::lround(det.boxes.at(i, 1))));
    const cv::Point p2(static_cast<int>(std::lround(det.boxes.at(i, 2))), static_cast<int>(std::lround(det.boxes.at(i, 3))));
    cv::rectangle(m, p1, p2, color, 1);
    const std::string name = label >= 0 && static_cast<size_t>(label) < class_names.size()
                                 ? class_names[static_cast<size_t>(label)]
                                 : "class" + std::to_string(label);
    cv::putText(m, fmt::format("{} {:.2f}", name, score), cv::Point(p1.x, std::max(p1.y - 2, 8)),
                cv::FONT_HERSHEY_SIMPLEX, 0.3, color, 1);
  }
  if (out_path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(out_path.parent_path(), ec);
  }
  bool ok = false;
  try {
    ok = cv::imwrite(out_path.string(), m);
  } catch (const cv::Exception& e) {
    throw data::WriteError("cannot write " + out_path.string() + ": " + e.what());
  }
  if (!ok) throw data::WriteError("cannot write " + out_path.string());
}

// ---------------------------------------------------------------------------
// Reports

const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols = {"Model", "#ep",      "AP",     "AP50", "AP75",   "APS",      "APM",
                                                "APL",   "#params", "GFLOPs", "FPS",  "Memory", "wall time"};
  return cols;
}

namespace {

constexpr std::string_view kNa = "n/a";
constexpr std::string_view kErrorOpen = " [error: ";

std::string model_cell(const BenchmarkRecord& r) {
  return r.error.empty() ? r.model_name : r.model_name + std::string(kErrorOpen) + r.error + "]";
}

template <typename T, typename F>
std::string opt_cell(const std::optional<T>& v, F&& f) {
  return v ? f(*v) : std::string(kNa);
}

std::vector<std::string> row_cells(const BenchmarkRecord& r, bool csv) {
  // CSV keeps shortest round-trip values; markdown uses the table's display.
  auto num = [csv](double v, const char* display) { return csv ? fmt::format("{}", v) : fmt::format(fmt::runtime(display), v); };
  std::vector<std::string> c;
  c.push_back(model_cell(r));
  c.push_back(opt_cell(r.epochs, [&](double v) { return num(v, "{:g}"); }));
  const std::optional<ApMetrics>& ap = r.ap;
  for (int i = 0; i < 6; ++i)
    c.push_back(ap ? [&] {
      const double v = ap->as_vector()[static_cast<size_t>(i)];
      if (v < 0) return std::string(kNa);
      return csv ? fmt::format("{}", v) : fmt::format("{:.1f}", v * 100);
    }()
                   : std::string(kNa));
  c.push_back(opt_cell(r.params, [&](int64_t v) {
    return csv ? std::to_string(v) : fmt::format("{:.2f}M", static_cast<double>(v) / 1e6);
  }));
  if (r.gflops_mean && r.gflops_std) {
    if (csv) {
      c.push_back(fmt::format("{} ± {}", *r.gflops_mean, *r.gflops_std));
    } else {
      FlopStats st;
      st.mean = *r.gflops_mean * 1e9;
      st.std = *r.gflops_std * 1e9;
      c.push_back(st.gflops_cell());
    }
  } else {
    c.emplace_back(kNa);
  }
  c.push_back(opt_cell(r.fps, [&](double v) { return num(v, "{:.1f}"); }));
  c.push_back(opt_cell(r.peak_memory, [&](int64_t v) {
    return csv ? std::to_string(v) : fmt::format("{:.0f}MiB", static_cast<double>(v) / (1024.0 * 1024.0));
  }));
  c.push_back(opt_cell(r.wall_hours, [&](double v) { return num(v, "{:.3f}h"); }));
  return c;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

std::string md_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    if (ch == '|') out += '\\';
    out += ch == '\n' ? ' ' : ch;
  }
  return out;
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string cell;
  bool quoted = false, any = false;
  for (size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          cell += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cell += ch;
      }
      continue;
    }
    if (ch == '"') {
      quoted = true;
      any = true;
    } else if (ch == ',') {
      row.push_back(std::move(cell));
      cell.clear();
      any = true;
    } else if (ch == '\n' || ch == '\r') {
      if (ch == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !cell.empty()) {
        row.push_back(std::move(cell));
        rows.push_back(std::move(row));
      }
      row.clear();
      cell.clear();
      any = false;
    } else {
      cell += ch;
      any = true;
    }
  }
  if (quoted) throw ReportParseError("unterminated quoted cell");
  if (any || !cell.empty()) {
    row.push_back(std::move(cell));
    rows.push_back(std::move(row));
  }
  return rows;
}

double parse_double(const std::string& s, const char* col) {
  try {
    size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ReportParseError(std::string("column ") + col + ": not a number: '" + s + "'");
  }
}

int64_t parse_int(const std::string& s, const char* col) {
  try {
    size_t used = 0;
    const int64_t v = std::stoll(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ReportParseError(std::string("column ") + col + ": not an integer: '" + s + "'");
  }
}

}  // namespace

std::string emit_report(const std::vector<BenchmarkRecord>& records, ReportFormat format) {
  if (records.empty()) throw BadArgument("emit_report: no records");
  const auto& cols = report_columns();
  std::ostringstream out;
  if (format == ReportFormat::kCsv) {
    for (size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << csv_escape(cols[i]);
    out << '\n';
    for (const auto& r : records) {
      const auto cells = row_cells(r, true);
      for (size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << csv_escape(cells[i]);
      out << '\n';
    }
    return out.str();
  }
  out << '|';
  for (const auto& c : cols) out << ' ' << c << " |";
  out << "\n|";
  for (size_t i = 0; i < cols.size(); ++i) out << (i == 0 ? ":---|" : "---:|");
  out << '\n';
  for (const auto& r : records) {
    out << '|';
    for (const auto& c : row_cells(r, false)) out << ' ' << md_escape(c) << " |";
    out << '\n';
  }
  return out.str();
}

std::vector<BenchmarkRecord> parse_report_csv(const std::string& text) {
  const auto rows = parse_csv(text);
  if (rows.empty() || rows[0] != report_columns()) throw ReportParseError("header does not match the report layout");
  std::vector<BenchmarkRecord> out;
  for (size_t i = 1; i < rows.size(); ++i) {
    const auto& c = rows[i];
    if (c.size() != report_columns().size())
      throw ReportParseError("row " + std::to_string(i) + " has " + std::to_string(c.size()) + " cells");
    BenchmarkRecord r;
    const auto open = c[0].find(kErrorOpen);
    if (open != std::string::npos && !c[0].empty() && c[0].back() == ']') {
      r.model_name = c[0].substr(0, open);
      r.error = c[0].substr(open + kErrorOpen.size(), c[0].size() - open - kErrorOpen.size() - 1);
    } else {
      r.model_name = c[0];
    }
    auto na = [](const std::string& s) { return s == kNa; };
    if (!na(c[1])) r.epochs = parse_double(c[1], "#ep");
    bool any_ap = false;
    ApMetrics ap;
    double* fields[6] = {&ap.ap, &ap.ap50, &ap.ap75, &ap.ap_small, &ap.ap_medium, &ap.ap_large};
    for (int k = 0; k < 6; ++k)
      if (!na(c[static_cast<size_t>(2 + k)])) {
        *fields[k] = parse_double(c[static_cast<size_t>(2 + k)], report_columns()[static_cast<size_t>(2 + k)].c_str());
        any_ap = true;
      }
    if (any_ap) r.ap = ap;
    if (!na(c[8])) r.params = parse_int(c[8], "#params");
    if (!na(c[9])) {
      const auto sep = c[9].find(" ± ");
      if (sep == std::string::npos) throw ReportParseError("GFLOPs cell is not 'mean ± std': " + c[9]);
      r.gflops_mean = parse_double(c[9].substr(0, sep), "GFLOPs");
      r.gflops_std = parse_double(c[9].substr(sep + std::string(" ± ").size()), "GFLOPs");
    }
    if (!na(c[10])) r.fps = parse_double(c[10], "FPS");
    if (!na(c[11])) r.peak_memory = parse_int(c[11], "Memory");
    if (!na(c[12])) r.wall_hours = parse_double(c[12], "wall time");
    out.push_back(std::move(r));
  }
  return out;
}

bool same_record(const BenchmarkRecord& a, const BenchmarkRecord& b) {
  auto same_ap = [](const std::optional<ApMetrics>& x, const std::optional<ApMetrics>& y) {
    if (x.has_value() != y.has_value()) return false;
    return !x || x->as_vector() == y->as_vector();
  };
  return a.model_name == b.model_name && a.error == b.error && a.epochs == b.epochs && same_ap(a.ap, b.ap) &&
         a.params == b.params && a.gflops_mean == b.gflops_mean && a.gflops_std == b.gflops_std && a.fps == b.fps &&
         a.peak_memory == b.peak_memory && a.wall_hours == b.wall_hours;
}

}  // namespace detkit::evalbench
