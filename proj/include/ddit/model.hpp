#pragma once

// Dual-branch diffusion transformer. Image patches and text tokens run in
// parallel streams with their own projections and MLPs and meet in one joint
// attention per block. The image stream is modulated by the diffusion
// timestep (AdaLN); the text stream uses learned static modulation and sees
// no timestep. A bidirectional text encoder feeds the text stream.

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "ddit/grad_check.hpp"
#include "ddit/image_flow.hpp"
#include "ddit/rng.hpp"
#include "ddit/tensor.hpp"
#include "ddit/text_diffusion.hpp"

namespace ddit {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DDiTConfig {
  std::size_t depth = 4;
  std::size_t width = 128;
  std::size_t heads = 4;
  std::size_t patch = 4;
  GridShape image{16, 16, 3};
  int vocab = 32;              // includes the mask id, which is vocab - 1
  std::size_t text_len = 16;
  std::size_t mlp_ratio = 4;
  std::size_t encoder_depth = 2;
  std::size_t time_dim = 64;

  void validate() const;
  std::size_t image_tokens() const { return (image.height / patch) * (image.width / patch); }
  std::size_t patch_dim() const { return patch * patch * image.channels; }
  Vocab vocabulary() const { return Vocab(vocab, vocab - 1); }

  bool operator==(const DDiTConfig&) const = default;
};

// Closed-form parameter count for a configuration.
std::size_t param_count(const DDiTConfig& cfg);

enum class InitMode {
  // AdaLN projections and the velocity head start at zero (zero gates).
  standard,
  // Every tensor random, including gates and biases. Used by diagnostics
  // that need all paths live from the first forward pass.
  dense,
};

class ModelParams {
 public:
  static ModelParams init(const DDiTConfig& cfg, Rng& rng, InitMode mode = InitMode::standard);

  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return tensors_.contains(name); }

  std::map<std::string, Tensor>& tensors() { return tensors_; }
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }

  std::size_t count() const;
  void zero_grad();
  std::vector<NamedTensor> named();

  void add(std::string name, Tensor t);

 private:
  std::map<std::string, Tensor> tensors_;
};

// Image grid <-> [tokens, patch*patch*C] with tokens in row-major patch order
// and (dy, dx, c) order inside a token.
std::vector<double> patchify(const ImageGrid& img, std::size_t patch);
ImageGrid unpatchify(std::span<const double> tokens, GridShape shape, std::size_t patch);

struct ForwardOptions {
  // Diagnostic: text queries attend to text keys only, cutting the image
  // stream out of the text stream's attention.
  bool isolate_text_stream = false;
};

struct DualVars {
  Var velocity;      // [batch * image tokens, patch_dim]
  Var text_logits;   // [batch * text_len, vocab]
};

// One example of a stacked batch. Examples share weights but never attend
// to each other.
struct BatchItem {
  const ImageGrid* image = nullptr;
  const TokenSequence* text = nullptr;
  double t = 0.0;    // image timestep
};

struct DualOutput {
  ImageGrid velocity;
  std::vector<double> text_logits;   // text_len x vocab, row-major
};

// Bidirectional encoder over token ids: embeddings + positions + encoder
// blocks. Returns [text_len, width].
Var text_encode(Tape& tape, ModelParams& params, const DDiTConfig& cfg, const TokenSequence& tokens);

DualVars forward(Tape& tape, ModelParams& params, const DDiTConfig& cfg, const ImageGrid& img_t,
                 const TokenSequence& text_t, double t_img, const ForwardOptions& opts = {});

DualVars forward_batch(Tape& tape, ModelParams& params, const DDiTConfig& cfg, std::span<const BatchItem> items,
                       const ForwardOptions& opts = {});

// Forward passes without keeping the tape.
std::vector<DualOutput> predict_batch(ModelParams& params, const DDiTConfig& cfg, std::span<const BatchItem> items,
                                      const ForwardOptions& opts = {});
DualOutput predict(ModelParams& params, const DDiTConfig& cfg, const ImageGrid& img_t,
                   const TokenSequence& text_t, double t_img, const ForwardOptions& opts = {});

// Sinusoidal embedding of t (scaled by 1000), cos half then sin half.
std::vector<double> timestep_embedding(double t, std::size_t dim);

}  // namespace ddit
