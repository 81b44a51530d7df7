#include "detkit/engine.hpp"

#include <sys/resource.h>
#include <zlib.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <iostream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace detkit::engine {

using json = nlohmann::json;

void TrainConfig::validate() const {
  if (max_iter < 1) throw BadTrainConfig("max_iter must be >= 1");
  for (size_t i = 0; i < lr_milestones.size(); ++i) {
    if (lr_milestones[i] >= max_iter)
      throw BadTrainConfig("milestone " + std::to_string(lr_milestones[i]) + " is not below max_iter");
    if (i > 0 && lr_milestones[i] <= lr_milestones[i - 1]) throw BadTrainConfig("milestones must be strictly increasing");
  }
  if (!(backbone_lr > 0 && offsets_refpoints_lr > 0 && encdec_lr > 0)) throw BadTrainConfig("learning rates must be > 0");
  if (!(lr_gamma > 0)) throw BadTrainConfig("lr_gamma must be > 0");
  if (warmup_iters < 0) throw BadTrainConfig("warmup_iters must be >= 0");
  if (batch_size < 1) throw BadTrainConfig("batch_size must be >= 1");
  if (freeze_stages < 0) throw BadTrainConfig("freeze_stages must be >= 0");
  if (ema_decay && !(*ema_decay >= 0 && *ema_decay <= 1)) throw BadTrainConfig("ema_decay must be in [0, 1]");
  if (clip_norm && !(*clip_norm > 0)) throw BadTrainConfig("clip_norm must be > 0");
  if (weight_decay < 0) throw BadTrainConfig("weight_decay must be >= 0");
}

double lr_at(int64_t iteration, const TrainConfig& cfg) {
  int drops = 0;
  for (int64_t m : cfg.lr_milestones)
    if (m <= iteration) ++drops;
  double factor = std::pow(cfg.lr_gamma, drops);
  if (cfg.warmup_iters > 0 && iteration < cfg.warmup_iters)
    factor *= static_cast<double>(iteration + 1) / static_cast<double>(cfg.warmup_iters);
  return factor;
}

std::vector<ParamGroup> build_param_groups(nn::Module& model, const TrainConfig& cfg) {
  std::vector<ParamGroup> groups = {
      {"backbone", cfg.backbone_lr, {}}, {"offsets_refpoints", cfg.offsets_refpoints_lr, {}}, {"encdec", cfg.encdec_lr, {}}};
  for (auto& [name, p] : model.named_parameters()) {
    if (!p->trainable) continue;
    switch (p->tag) {
      case nn::ParamTag::kBackbone: groups[0].params.emplace_back(name, p); break;
      case nn::ParamTag::kOffsetsRefPoints: groups[1].params.emplace_back(name, p); break;
      case nn::ParamTag::kOther: groups[2].params.emplace_back(name, p); break;
      case nn::ParamTag::kUntagged: throw UntaggedParameter(name);
    }
  }
  return groups;
}

void freeze_backbone_stages(model::Detector& model, int n) {
  auto stages = model.backbone().stages();
  if (n < 0 || n > static_cast<int>(stages.size()))
    throw TooManyStages("asked to freeze " + std::to_string(n) + " stages, backbone has " +
                        std::to_string(stages.size()));
  for (int i = 0; i < n; ++i) stages[static_cast<size_t>(i)].second->freeze();
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'D', 'T', 'K', 'C', 'K', 'P', 'T', '1'};

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t get_u64(const std::string& in, size_t at) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<unsigned char>(in[at + static_cast<size_t>(i)])) << (8 * i);
  return v;
}

uint32_t crc(const char* data, size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<size_t>(n, 1u << 30));
    c = crc32(c, reinterpret_cast<const Bytef*>(data), chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<uint32_t>(c);
}

}  // namespace

std::string serialize_checkpoint(const TrainState& state) {
  json header;
  header["iteration"] = state.iteration;
  header["optimizer_step"] = state.optimizer_step;
  header["rng_state"] = state.rng_state;
  header["best_metric"] = state.best_metric ? json(*state.best_metric) : json(nullptr);
  header["has_ema"] = state.ema.has_value();
  json entries = json::array();
  std::string payload;
  auto add_map = [&](const char* kind, const TensorMap& m) {
    for (const auto& [name, t] : m) {
      entries.push_back({{"kind", kind}, {"name", name}, {"shape", t.shape()}, {"offset", payload.size() / 8}});
      payload.append(reinterpret_cast<const char*>(t.data()), static_cast<size_t>(t.numel()) * sizeof(double));
    }
  };
  add_map("param", state.params);
  add_map("buffer", state.buffers);
  add_map("exp_avg", state.exp_avg);
  add_map("exp_avg_sq", state.exp_avg_sq);
  if (state.ema) add_map("ema", *state.ema);
  header["tensors"] = std::move(entries);
  const std::string head = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put_u64(out, head.size());
  out += head;
  put_u64(out, payload.size());
  out += payload;
  const uint32_t c = crc(out.data(), out.size());
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((c >> (8 * i)) & 0xff));
  return out;
}

TrainState parse_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) + 8 + 8 + 4 || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw CorruptCheckpoint("bad magic or truncated header");
  uint32_t stored = 0;
  for (int i = 0; i < 4; ++i)
    stored |= static_cast<uint32_t>(static_cast<unsigned char>(bytes[bytes.size() - 4 + static_cast<size_t>(i)])) << (8 * i);
  if (crc(bytes.data(), bytes.size() - 4) != stored) throw CorruptCheckpoint("content hash mismatch");

  size_t at = sizeof(kMagic);
  const uint64_t head_len = get_u64(bytes, at);
  at += 8;
  if (head_len > bytes.size() - at - 12) throw CorruptCheckpoint("header length out of range");
  json header;
  try {
    header = json::parse(bytes.substr(at, head_len));
  } catch (const json::exception& e) {
    throw CorruptCheckpoint(std::string("header: ") + e.what());
  }
  at += head_len;
  const uint64_t payload_len = get_u64(bytes, at);
  at += 8;
  if (payload_len != bytes.size() - at - 4 || payload_len % 8 != 0) throw CorruptCheckpoint("payload length mismatch");
  const char* payload = bytes.data() + at;

  TrainState s;
  try {
    s.iteration = header.at("iteration").get<int64_t>();
    s.optimizer_step = header.at("optimizer_step").get<int64_t>();
    s.rng_state = header.at("rng_state").get<std::string>();
    if (!header.at("best_metric").is_null()) s.best_metric = header["best_metric"].get<double>();
    if (header.at("has_ema").get<bool>()) s.ema.emplace();
    for (const auto& e : header.at("tensors")) {
      const auto kind = e.at("kind").get<std::string>();
      const auto name = e.at("name").get<std::string>();
      const Shape shape = e.at("shape").get<Shape>();
      const auto offset = e.at("offset").get<uint64_t>();
      const auto n = static_cast<uint64_t>(shape_numel(shape));
      if (offset + n > payload_len / 8) throw CorruptCheckpoint("tensor " + name + " out of range");
      Tensor t(shape);
      std::memcpy(t.data(), payload + offset * 8, n * 8);
      TensorMap* dst = kind == "param"        ? &s.params
                       : kind == "buffer"     ? &s.buffers
                       : kind == "exp_avg"    ? &s.exp_avg
                       : kind == "exp_avg_sq" ? &s.exp_avg_sq
                       : kind == "ema" && s.ema ? &*s.ema
                                                : nullptr;
      if (!dst) throw CorruptCheckpoint("unknown tensor kind " + kind);
      dst->emplace(name, std::move(t));
    }
  } catch (const json::exception& e) {
    throw CorruptCheckpoint(std::string("header: ") + e.what());
  }
  return s;
}

void save_checkpoint(const TrainState& state, const std::filesystem::path& path) {
  const std::string bytes = serialize_checkpoint(state);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw data::WriteError("cannot write " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw data::WriteError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CorruptCheckpoint("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_checkpoint(ss.str());
}

TensorMap snapshot_parameters(nn::Module& model) {
  TensorMap m;
  for (auto& [name, p] : model.named_parameters()) m.emplace(name, p->var.value());
  return m;
}

TensorMap snapshot_buffers(nn::Module& model) {
  TensorMap m;
  for (auto& [name, b] : model.named_buffers()) m.emplace(name, *b);
  return m;
}

void load_weights(nn::Module& model, const TensorMap& params, const TensorMap& buffers) {
  auto copy = [](const char* what, const TensorMap& src, auto&& named, auto&& target) {
    std::set<std::string> seen;
    for (auto& [name, obj] : named) {
      auto it = src.find(name);
      if (it == src.end()) throw IncompatibleCheckpoint(std::string(what) + " '" + name + "' missing from checkpoint");
      Tensor& dst = target(obj);
      if (it->second.shape() != dst.shape())
        throw IncompatibleCheckpoint(std::string(what) + " '" + name + "' has shape " + shape_str(it->second.shape()) +
                                     ", model expects " + shape_str(dst.shape()));
      seen.insert(name);
    }
    for (const auto& [name, _] : src)
      if (!seen.count(name)) throw IncompatibleCheckpoint(std::string(what) + " '" + name + "' not in model");
    for (auto& [name, obj] : named) target(obj) = src.at(name);
  };
  copy("parameter", params, model.named_parameters(), [](nn::Parameter* p) -> Tensor& { return p->var.mutable_value(); });
  copy("buffer", buffers, model.named_buffers(), [](Tensor* b) -> Tensor& { return *b; });
}

// ---------------------------------------------------------------------------
// Logging

std::optional<int64_t> peak_memory_bytes() {
  rusage usage{};
  if (getrusage(RUSAGE_SELF, &usage) != 0 || usage.ru_maxrss <= 0) return std::nullopt;
  return static_cast<int64_t>(usage.ru_maxrss) * 1024;  // Linux reports KiB
}

TrainLog::TrainLog(const std::filesystem::path& path, bool append)
    : out_(path, append ? std::ios::app : std::ios::trunc) {
  if (!out_) throw data::WriteError("cannot open log " + path.string());
}

void TrainLog::write(const StepReport& r, double lr) {
  json rec;
  rec["iteration"] = r.iteration;
  rec["lr"] = lr;
  rec["loss"] = r.loss;
  for (const auto& [k, v] : r.components) rec[k] = v;
  rec["grad_norm"] = r.grad_norm;
  rec["imgs_per_s"] = r.seconds > 0 ? static_cast<double>(r.images) / r.seconds : 0.0;
  if (auto mem = peak_memory_bytes()) rec["peak_memory_bytes"] = *mem;
  out_ << rec.dump() << '\n';
  out_.flush();
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(std::shared_ptr<model::Detector> model, std::shared_ptr<const data::DataLoader> loader,
                 TrainConfig cfg, Notice notice)
    : model_(std::move(model)), loader_(std::move(loader)), cfg_(std::move(cfg)), notice_(std::move(notice)) {
  cfg_.validate();
  if (!model_ || !loader_) throw BadTrainConfig("trainer needs a model and a data loader");
  if (!model_->criterion()) throw BadTrainConfig("model has no criterion");
  if (!notice_) notice_ = [](const std::string& msg) { std::cerr << msg << '\n'; };
  if (cfg_.amp) notice_("notice: amp requested; float64 CPU substrate has no reduced precision path, ignoring");
  if (cfg_.grad_checkpoint) notice_("notice: grad_checkpoint requested; not supported by this substrate, ignoring");
  freeze_backbone_stages(*model_, cfg_.freeze_stages);
  groups_ = build_param_groups(*model_, cfg_);
  rng_.seed(cfg_.seed);
  if (cfg_.ema_decay) ema_ = snapshot_parameters(*model_);
}

StepReport Trainer::step(std::optional<double> lr_factor) {
  const auto t0 = std::chrono::steady_clock::now();
  StepReport rep;
  rep.iteration = iteration_;
  rep.lr_factor = lr_factor ? *lr_factor : lr_at(iteration_, cfg_);

  const data::Batch batch = loader_->batch_at(iteration_);
  rep.images = batch.size();
  model_->train(true);
  model_->zero_grad();
  const auto outputs = model::forward_detector(*model_, batch.images, batch.masks, model::Mode::kTrain, &batch.targets, &rng_);
  const auto report = (*model_->criterion())(outputs, batch.targets);
  rep.loss = report.total_value();
  rep.components = report.components;
  bool finite = std::isfinite(rep.loss);
  for (const auto& [_, v] : rep.components) finite = finite && std::isfinite(v);
  if (!finite) {
    std::ostringstream msg;
    msg << "iteration " << iteration_ << ": loss " << rep.loss;
    for (const auto& [k, v] : rep.components) msg << ", " << k << "=" << v;
    throw NonFiniteLoss(msg.str());
  }
  report.total.backward();

  double sq = 0;
  for (const auto& g : groups_)
    for (const auto& [_, p] : g.params)
      if (p->var.has_grad()) {
        const Tensor gr = p->var.grad();
        for (double v : gr.values()) sq += v * v;
      }
  rep.grad_norm = std::sqrt(sq);
  double clip_coef = 1.0;
  if (cfg_.clip_norm && rep.grad_norm > *cfg_.clip_norm) clip_coef = *cfg_.clip_norm / (rep.grad_norm + 1e-6);
  rep.clipped_grad_norm = rep.grad_norm * clip_coef;

  ++optimizer_step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(optimizer_step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(optimizer_step_));
  for (const auto& g : groups_) {
    const double lr = g.lr * rep.lr_factor;
    for (const auto& [name, p] : g.params) {
      Tensor& w = p->var.mutable_value();
      auto [mit, _m] = exp_avg_.try_emplace(name, w.shape());
      auto [vit, _v] = exp_avg_sq_.try_emplace(name, w.shape());
      Tensor& m = mit->second;
      Tensor& v = vit->second;
      const Tensor grad = p->var.has_grad() ? p->var.grad() : Tensor(w.shape());
      const double decay = p->weight_decay ? lr * cfg_.weight_decay : 0.0;
      for (int64_t i = 0; i < w.numel(); ++i) {
        const double gi = grad[i] * clip_coef;
        m[i] = cfg_.beta1 * m[i] + (1 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1 - cfg_.beta2) * gi * gi;
        if (lr == 0.0) continue;
        w[i] -= decay * w[i];
        w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
      }
    }
  }
  model_->zero_grad();
  update_ema();
  ++iteration_;
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

void Trainer::update_ema() {
  if (!ema_) return;
  const double d = *cfg_.ema_decay;
  for (auto& [name, p] : model_->named_parameters()) {
    Tensor& e = ema_->at(name);
    const Tensor& w = p->var.value();
    for (int64_t i = 0; i < w.numel(); ++i) e[i] = d * e[i] + (1 - d) * w[i];
  }
}

void Trainer::run(std::optional<int64_t> until, const std::function<void(const StepReport&)>& on_step) {
  const int64_t stop = until ? std::min(*until, cfg_.max_iter) : cfg_.max_iter;
  while (iteration_ < stop) {
    const StepReport r = step();
    if (on_step) on_step(r);
  }
}

TrainState Trainer::capture_state() {
  TrainState s;
  s.iteration = iteration_;
  s.params = snapshot_parameters(*model_);
  s.buffers = snapshot_buffers(*model_);
  s.optimizer_step = optimizer_step_;
  s.exp_avg = exp_avg_;
  s.exp_avg_sq = exp_avg_sq_;
  s.ema = ema_;
  std::ostringstream rs;
  rs << rng_;
  s.rng_state = rs.str();
  s.best_metric = best_metric_;
  return s;
}

void Trainer::restore_state(const TrainState& s) {
  load_weights(*model_, s.params, s.buffers);
  iteration_ = s.iteration;
  optimizer_step_ = s.optimizer_step;
  exp_avg_ = s.exp_avg;
  exp_avg_sq_ = s.exp_avg_sq;
  if (cfg_.ema_decay) {
    if (!s.ema) throw IncompatibleCheckpoint("config enables EMA but the checkpoint has none");
    ema_ = s.ema;
  }
  std::istringstream rs(s.rng_state);
  rs >> rng_;
  if (rs.fail()) throw CorruptCheckpoint("bad rng state");
  best_metric_ = s.best_metric;
}

TrainState Trainer::ema_state() {
  if (!ema_) throw BadTrainConfig("EMA is disabled");
  TrainState s;
  s.iteration = iteration_;
  s.params = *ema_;
  s.buffers = snapshot_buffers(*model_);
  return s;
}

}  // namespace detkit::engine
