#include "detkit/nn.hpp"

#include <cmath>

#include "detkit/errors.hpp"
#include "detkit/ops.hpp"

namespace detkit::nn {

const char* tag_name(ParamTag tag) {
  switch (tag) {
    case ParamTag::kUntagged: return "untagged";
    case ParamTag::kBackbone: return "backbone";
    case ParamTag::kOffsetsRefPoints: return "offsets_refpoints";
    case ParamTag::kOther: return "encdec";
  }
  return "?";
}

namespace {
thread_local std::mt19937_64 t_init_rng{0};
}

std::mt19937_64& init_rng() { return t_init_rng; }
void seed_init_rng(uint64_t seed) { t_init_rng.seed(seed); }

std::vector<std::pair<std::string, Parameter*>> Module::named_parameters(const std::string& prefix) {
  std::vector<std::pair<std::string, Parameter*>> out;
  for (auto& [name, p] : params_) out.emplace_back(prefix + name, p.get());
  for (auto& [name, child] : children_) {
    auto sub = child->named_parameters(prefix + name + ".");
    out.insert(out.end(), sub.begin(), sub.end());
  }
  return out;
}

std::vector<std::pair<std::string, Tensor*>> Module::named_buffers(const std::string& prefix) {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (auto& [name, b] : buffers_) out.emplace_back(prefix + name, b.get());
  for (auto& [name, child] : children_) {
    auto sub = child->named_buffers(prefix + name + ".");
    out.insert(out.end(), sub.begin(), sub.end());
  }
  return out;
}

std::vector<std::pair<std::string, Module*>> Module::named_children() {
  std::vector<std::pair<std::string, Module*>> out;
  for (auto& [name, child] : children_) out.emplace_back(name, child.get());
  return out;
}

void Module::train(bool on) {
  training_ = on && !frozen_;
  for (auto& [_, child] : children_) child->train(on);
  on_train_changed();
}

void Module::freeze() {
  frozen_ = true;
  training_ = false;
  for (auto& [_, p] : params_) {
    p->trainable = false;
    p->var.set_requires_grad(false);
  }
  for (auto& [_, child] : children_) child->freeze();
}

void Module::tag_untagged(ParamTag tag) {
  for (auto& [_, p] : params_)
    if (p->tag == ParamTag::kUntagged) p->tag = tag;
  for (auto& [_, child] : children_) child->tag_untagged(tag);
}

void Module::zero_grad() {
  for (auto& [_, p] : named_parameters()) p->var.zero_grad();
}

Var& Module::register_parameter(const std::string& name, Tensor init, bool weight_decay, ParamTag tag) {
  auto p = std::make_unique<Parameter>();
  p->var = Var(std::move(init), true);
  p->tag = tag;
  p->weight_decay = weight_decay;
  params_.emplace_back(name, std::move(p));
  return params_.back().second->var;
}

Tensor& Module::register_buffer(const std::string& name, Tensor init) {
  buffers_.emplace_back(name, std::make_unique<Tensor>(std::move(init)));
  return *buffers_.back().second;
}

Linear::Linear(int64_t in, int64_t out, bool bias, Init init) : in_(in), out_(out) {
  if (in <= 0 || out <= 0) throw BadDim("Linear(" + std::to_string(in) + ", " + std::to_string(out) + ")");
  auto& rng = init_rng();
  Tensor w;
  switch (init) {
    case Init::kDefault: {
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      w = Tensor::uniform({out, in}, rng, -bound, bound);
      break;
    }
    case Init::kXavier: {
      const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
      w = Tensor::uniform({out, in}, rng, -bound, bound);
      break;
    }
    case Init::kZero: w = Tensor::zeros({out, in}); break;
  }
  weight_ = register_parameter("weight", std::move(w));
  if (bias) {
    Tensor b = init == Init::kDefault
                   ? Tensor::uniform({out}, rng, -1.0 / std::sqrt(static_cast<double>(in)),
                                     1.0 / std::sqrt(static_cast<double>(in)))
                   : Tensor::zeros({out});
    bias_ = register_parameter("bias", std::move(b), /*weight_decay=*/false);
  } else {
    bias_ = Var(Tensor(Shape{0}));
  }
}

Var Linear::forward(const Var& x) const { return ops::linear(x, weight_, bias_); }

LayerNorm::LayerNorm(int64_t dim) {
  gamma_ = register_parameter("weight", Tensor::ones({dim}), false);
  beta_ = register_parameter("bias", Tensor::zeros({dim}), false);
}

Var LayerNorm::forward(const Var& x) const { return ops::layer_norm(x, gamma_, beta_); }

Conv2d::Conv2d(int64_t in, int64_t out, int kernel, int stride, int padding, bool bias)
    : out_(out), stride_(stride), padding_(padding) {
  // He-normal, fan-out mode as in ResNet initialization.
  const double stddev = std::sqrt(2.0 / static_cast<double>(out * kernel * kernel));
  weight_ = register_parameter("weight", Tensor::normal({out, in, kernel, kernel}, init_rng(), stddev));
  bias_ = bias ? register_parameter("bias", Tensor::zeros({out}), false) : Var(Tensor(Shape{0}));
}

Var Conv2d::forward(const Var& x) const { return ops::conv2d(x, weight_, bias_, stride_, padding_); }

BatchNorm2d::BatchNorm2d(int64_t channels, double momentum) : momentum_(momentum) {
  gamma_ = register_parameter("weight", Tensor::ones({channels}), false);
  beta_ = register_parameter("bias", Tensor::zeros({channels}), false);
  running_mean_ = &register_buffer("running_mean", Tensor::zeros({channels}));
  running_var_ = &register_buffer("running_var", Tensor::ones({channels}));
}

Var BatchNorm2d::forward(const Var& x) {
  // Inference-statistics mode when frozen or evaluating.
  return ops::batch_norm2d(x, gamma_, beta_, *running_mean_, *running_var_, training() && !frozen(), momentum_);
}

MLP::MLP(int64_t in, int64_t hidden, int64_t out, int layers) {
  if (layers < 1) throw BadDim("MLP needs at least one layer");
  for (int i = 0; i < layers; ++i) {
    const int64_t a = i == 0 ? in : hidden;
    const int64_t b = i == layers - 1 ? out : hidden;
    layers_.push_back(register_module("layers." + std::to_string(i), std::make_shared<Linear>(a, b)));
  }
}

Var MLP::forward(const Var& x) const {
  Var h = x;
  for (size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i]->forward(h);
    if (i + 1 < layers_.size()) h = ops::relu(h);
  }
  return h;
}

Embedding::Embedding(int64_t count, int64_t dim, double init_std) {
  weight_ = register_parameter("weight", Tensor::normal({count, dim}, init_rng(), init_std));
}

Var Embedding::rows(const std::vector<int64_t>& index) const { return ops::gather_rows(weight_, index); }

}  // namespace detkit::nn
