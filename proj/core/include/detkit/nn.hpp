#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "detkit/autograd.hpp"

namespace detkit::nn {

// Which optimizer group a parameter belongs to. Assigned by the detector
// assembly; parameters created outside an assembly stay untagged.
enum class ParamTag { kUntagged, kBackbone, kOffsetsRefPoints, kOther };

const char* tag_name(ParamTag tag);

struct Parameter {
  Var var;
  ParamTag tag = ParamTag::kUntagged;
  bool trainable = true;
  bool weight_decay = true;  // false for norm affine params and biases
};

// Deterministic initialization stream shared by all module constructors on
// this thread. Seed it before building a model.
std::mt19937_64& init_rng();
void seed_init_rng(uint64_t seed);

class Module {
 public:
  Module() = default;
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  // Depth-first, registration order, dotted names.
  std::vector<std::pair<std::string, Parameter*>> named_parameters(const std::string& prefix = "");
  std::vector<std::pair<std::string, Tensor*>> named_buffers(const std::string& prefix = "");
  std::vector<std::pair<std::string, Module*>> named_children();

  void train(bool on = true);
  bool training() const { return training_; }

  // Frozen modules keep normalization layers in inference mode and mark
  // their parameters non-trainable.
  void freeze();
  bool frozen() const { return frozen_; }

  // Applies `tag` to every untagged parameter in this subtree.
  void tag_untagged(ParamTag tag);
  void zero_grad();

 protected:
  Var& register_parameter(const std::string& name, Tensor init, bool weight_decay = true,
                          ParamTag tag = ParamTag::kUntagged);
  Tensor& register_buffer(const std::string& name, Tensor init);
  template <typename M>
  std::shared_ptr<M> register_module(const std::string& name, std::shared_ptr<M> child) {
    children_.emplace_back(name, child);
    return child;
  }
  virtual void on_train_changed() {}

 private:
  bool training_ = true;
  bool frozen_ = false;
  std::vector<std::pair<std::string, std::unique_ptr<Parameter>>> params_;
  std::vector<std::pair<std::string, std::unique_ptr<Tensor>>> buffers_;
  std::vector<std::pair<std::string, std::shared_ptr<Module>>> children_;
};

class Linear : public Module {
 public:
  enum class Init { kDefault, kXavier, kZero };
  Linear(int64_t in, int64_t out, bool bias = true, Init init = Init::kDefault);
  Var forward(const Var& x) const;
  Var& weight() { return weight_; }
  Var& bias() { return bias_; }
  int64_t in_features() const { return in_; }
  int64_t out_features() const { return out_; }

 private:
  int64_t in_, out_;
  Var weight_;
  Var bias_;
};

class LayerNorm : public Module {
 public:
  explicit LayerNorm(int64_t dim);
  Var forward(const Var& x) const;

 private:
  Var gamma_, beta_;
};

class Conv2d : public Module {
 public:
  Conv2d(int64_t in, int64_t out, int kernel, int stride = 1, int padding = 0, bool bias = true);
  Var forward(const Var& x) const;
  int64_t out_channels() const { return out_; }

 private:
  int64_t out_;
  int stride_, padding_;
  Var weight_, bias_;
};

class BatchNorm2d : public Module {
 public:
  explicit BatchNorm2d(int64_t channels, double momentum = 0.1);
  Var forward(const Var& x);

 private:
  double momentum_;
  Var gamma_, beta_;
  Tensor* running_mean_;
  Tensor* running_var_;
};

class MLP : public Module {
 public:
  MLP(int64_t in, int64_t hidden, int64_t out, int layers);
  Var forward(const Var& x) const;
  Linear& last() { return *layers_.back(); }

 private:
  std::vector<std::shared_ptr<Linear>> layers_;
};

class Embedding : public Module {
 public:
  Embedding(int64_t count, int64_t dim, double init_std = 1.0);
  const Var& all() const { return weight_; }
  Var& mutable_all() { return weight_; }
  Var rows(const std::vector<int64_t>& index) const;

 private:
  Var weight_;
};

}  // namespace detkit::nn
