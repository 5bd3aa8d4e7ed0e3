#include "bicanet/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "bicanet/log.hpp"
#include "json.hpp"

namespace bicanet {
namespace {

using json = nlohmann::ordered_json;

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// ---- config <-> json ------------------------------------------------------------

/// Reads declared keys from one JSON object and rejects the rest.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError("config: '" + path_ + "' must be a JSON object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config: bad value for '" + path_ + key + "': " + e.what());
    }
  }

  ObjectReader child(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    return ObjectReader(j_.contains(key) ? j_.at(key) : empty, path_ + key + ".");
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("config: unknown key '" + path_ + k + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_synthetic(ObjectReader& s, data::SyntheticSpec& spec) {
  s.get("num_classes", spec.num_classes);
  s.get("min_shapes", spec.min_shapes);
  s.get("max_shapes", spec.max_shapes);
  s.get("width", spec.width);
  s.get("height", spec.height);
  s.get("color_jitter", spec.color_jitter);
  s.get("color_confusion", spec.color_confusion);
  s.get("noise", spec.noise);
  s.get("seed", spec.seed);
  s.finish();
}

const char* policy_name(AbsentClassPolicy p) { return p == AbsentClassPolicy::kZero ? "zero" : "exclude"; }

json config_json(const TrainConfig& c) {
  json j;
  j["lr_base"] = c.lr_base;
  j["momentum"] = c.momentum;
  j["weight_decay"] = c.weight_decay;
  j["power"] = c.power;
  j["max_iter"] = c.max_iter;
  j["epochs"] = c.epochs;
  j["batch"] = c.batch;
  j["lambda"] = c.lambda;
  j["crop"] = c.crop;
  j["num_classes"] = c.num_classes;
  j["cardinality"] = c.cardinality;
  j["long_kernel"] = c.long_kernel;
  j["attention_reduction"] = c.attention_reduction;
  j["bcib_batch_norm"] = c.bcib_batch_norm;
  j["seed"] = c.seed;
  j["data_seed"] = c.data_seed;
  j["ablation"] = {{"use_ccpb", c.ablation.use_ccpb}, {"use_bcib", c.ablation.use_bcib}, {"use_mcfb", c.ablation.use_mcfb}};
  j["backbone"] = {{"stem_width", c.backbone.stem_width},
                   {"widths", c.backbone.widths},
                   {"blocks_per_stage", c.backbone.blocks_per_stage}};
  j["ohem"] = {{"enabled", c.ohem.enabled}, {"threshold", c.ohem.threshold}, {"min_keep_fraction", c.ohem.min_keep_fraction}};
  j["augment"] = c.augment;
  const auto& a = c.augmentation;
  j["augmentation"] = {{"scale_min", a.scale_min},   {"scale_max", a.scale_max},
                       {"aspect_min", a.aspect_min}, {"aspect_max", a.aspect_max},
                       {"horizontal_flip", a.horizontal_flip}, {"vertical_flip", a.vertical_flip}};
  j["data_dir"] = c.data_dir;
  const auto& s = c.synthetic;
  j["synthetic"] = {{"num_classes", s.num_classes}, {"min_shapes", s.min_shapes},   {"max_shapes", s.max_shapes},
                    {"width", s.width},             {"height", s.height},           {"color_jitter", s.color_jitter},
                    {"color_confusion", s.color_confusion}, {"noise", s.noise}, {"seed", s.seed}};
  j["synthetic_train"] = c.synthetic_train;
  j["synthetic_val"] = c.synthetic_val;
  j["train_split"] = c.train_split;
  j["val_split"] = c.val_split;
  j["output_dir"] = c.output_dir;
  j["eval_train"] = c.eval_train;
  j["checkpoint_every_epochs"] = c.checkpoint_every_epochs;
  j["absent_classes"] = policy_name(c.absent_classes);
  return j;
}

void flatten(const json& j, const std::string& prefix, std::map<std::string, std::string>& out) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) flatten(v, prefix.empty() ? k : prefix + "." + k, out);
  } else {
    out[prefix] = j.dump();
  }
}

// Fields that only affect where results go, not what is computed.
bool resume_may_differ(const std::string& key) {
  return key == "output_dir" || key == "checkpoint_every_epochs" || key == "eval_train";
}

// ---- binary helpers ---------------------------------------------------------------

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_string(std::vector<std::uint8_t>& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

void put_tensors(std::vector<std::uint8_t>& out, const std::vector<std::pair<std::string, Tensor<float>>>& tensors) {
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_string(out, name);
    const Shape s = t.shape();
    for (int e : {s.n, s.c, s.h, s.w}) put_u32(out, static_cast<std::uint32_t>(e));
    for (float v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
}

class Cursor {
 public:
  explicit Cursor(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  std::size_t pos() const { return pos_; }
  bool at_end() const { return pos_ == bytes_.size(); }

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) throw ParseError(pos_, std::string("checkpoint truncated while reading ") + what);
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }

  std::string string(const char* what) {
    const std::uint32_t n = u32(what);
    need(n, what);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }

  std::vector<std::pair<std::string, Tensor<float>>> tensors(const char* what) {
    const std::uint32_t count = u32(what);
    std::vector<std::pair<std::string, Tensor<float>>> out;
    for (std::uint32_t k = 0; k < count; ++k) {
      std::string name = string("tensor name");
      const std::size_t at = pos_;
      Shape s;
      s.n = static_cast<int>(u32("extent"));
      s.c = static_cast<int>(u32("extent"));
      s.h = static_cast<int>(u32("extent"));
      s.w = static_cast<int>(u32("extent"));
      if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1) throw ParseError(at, "tensor '" + name + "' has an empty extent");
      need(s.numel() * 4, "tensor data");
      Tensor<float> t(s);
      for (auto& v : t.data()) v = std::bit_cast<float>(u32("tensor data"));
      out.emplace_back(std::move(name), std::move(t));
    }
    return out;
  }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void restore_tensors(ParamStore<float>& store, const std::vector<std::pair<std::string, Tensor<float>>>& tensors) {
  std::map<std::string, const Tensor<float>*> by_name;
  for (const auto& [name, t] : tensors) by_name[name] = &t;
  for (auto& e : store.entries()) {
    auto it = by_name.find(e.name);
    if (it == by_name.end()) throw DataError("checkpoint lacks tensor '" + e.name + "'");
    if (!(it->second->shape() == e.var.shape())) {
      throw ShapeError(e.name, "checkpoint " + it->second->shape().str() + " vs model " + e.var.shape().str());
    }
    std::copy(it->second->data().begin(), it->second->data().end(), e.var.mutable_value().data().begin());
    by_name.erase(it);
  }
  if (!by_name.empty()) throw DataError("checkpoint has unexpected tensor '" + by_name.begin()->first + "'");
  store.mark_initialized();
}

int reflect(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
  return i;
}

}  // namespace

// ---- config -----------------------------------------------------------------------

void validate(const TrainConfig& c) {
  if (!(c.lr_base > 0)) throw ConfigError("config: lr_base must be > 0");
  if (c.momentum < 0 || c.momentum >= 1) throw ConfigError("config: momentum must be in [0, 1)");
  if (c.weight_decay < 0) throw ConfigError("config: weight_decay must be >= 0");
  if (!(c.power > 0)) throw ConfigError("config: power must be > 0");
  if (c.lambda < 0) throw ConfigError("config: lambda must be >= 0");
  if (c.batch < 1) throw ConfigError("config: batch must be >= 1");
  if (c.epochs < 1 && c.max_iter <= 0) throw ConfigError("config: need epochs >= 1 or max_iter > 0");
  if (c.max_iter < 0) throw ConfigError("config: max_iter must be >= 0");
  if (c.crop < 32 || c.crop % 32 != 0) throw ConfigError("config: crop must be a positive multiple of 32");
  if (c.num_classes < 2 || c.num_classes >= LabelMap::kIgnore) throw ConfigError("config: num_classes must be in [2, 254]");
  if (c.checkpoint_every_epochs < 1) throw ConfigError("config: checkpoint_every_epochs must be >= 1");
  validate(c.ablation);
  if (c.ohem.threshold < 0 || c.ohem.threshold > 1) throw ConfigError("config: ohem.threshold must be in [0, 1]");
  if (c.ohem.min_keep_fraction < 0 || c.ohem.min_keep_fraction > 1) {
    throw ConfigError("config: ohem.min_keep_fraction must be in [0, 1]");
  }
  if (c.data_dir.empty()) {
    data::validate(c.synthetic);
    if (c.synthetic.num_classes != c.num_classes) throw ConfigError("config: synthetic.num_classes must equal num_classes");
    if (c.synthetic_train < 1 || c.synthetic_val < 0) throw ConfigError("config: synthetic_train must be >= 1 and synthetic_val >= 0");
  }
}

std::string to_json(const TrainConfig& config) { return config_json(config).dump(2); }

TrainConfig train_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(e.byte, std::string("config: ") + e.what());
  }
  TrainConfig c;
  ObjectReader r(j, "");
  r.get("lr_base", c.lr_base);
  r.get("momentum", c.momentum);
  r.get("weight_decay", c.weight_decay);
  r.get("power", c.power);
  r.get("max_iter", c.max_iter);
  r.get("epochs", c.epochs);
  r.get("batch", c.batch);
  r.get("lambda", c.lambda);
  r.get("crop", c.crop);
  r.get("num_classes", c.num_classes);
  r.get("cardinality", c.cardinality);
  r.get("long_kernel", c.long_kernel);
  r.get("attention_reduction", c.attention_reduction);
  r.get("bcib_batch_norm", c.bcib_batch_norm);
  r.get("seed", c.seed);
  r.get("data_seed", c.data_seed);
  {
    auto a = r.child("ablation");
    a.get("use_ccpb", c.ablation.use_ccpb);
    a.get("use_bcib", c.ablation.use_bcib);
    a.get("use_mcfb", c.ablation.use_mcfb);
    a.finish();
  }
  {
    auto b = r.child("backbone");
    b.get("stem_width", c.backbone.stem_width);
    b.get("widths", c.backbone.widths);
    b.get("blocks_per_stage", c.backbone.blocks_per_stage);
    b.finish();
  }
  {
    auto o = r.child("ohem");
    o.get("enabled", c.ohem.enabled);
    o.get("threshold", c.ohem.threshold);
    o.get("min_keep_fraction", c.ohem.min_keep_fraction);
    o.finish();
  }
  r.get("augment", c.augment);
  {
    auto a = r.child("augmentation");
    a.get("scale_min", c.augmentation.scale_min);
    a.get("scale_max", c.augmentation.scale_max);
    a.get("aspect_min", c.augmentation.aspect_min);
    a.get("aspect_max", c.augmentation.aspect_max);
    a.get("horizontal_flip", c.augmentation.horizontal_flip);
    a.get("vertical_flip", c.augmentation.vertical_flip);
    a.finish();
  }
  r.get("data_dir", c.data_dir);
  {
    auto s = r.child("synthetic");
    read_synthetic(s, c.synthetic);
  }
  r.get("synthetic_train", c.synthetic_train);
  r.get("synthetic_val", c.synthetic_val);
  r.get("train_split", c.train_split);
  r.get("val_split", c.val_split);
  r.get("output_dir", c.output_dir);
  r.get("eval_train", c.eval_train);
  r.get("checkpoint_every_epochs", c.checkpoint_every_epochs);
  std::string policy = policy_name(c.absent_classes);
  r.get("absent_classes", policy);
  if (policy == "exclude") {
    c.absent_classes = AbsentClassPolicy::kExclude;
  } else if (policy == "zero") {
    c.absent_classes = AbsentClassPolicy::kZero;
  } else {
    throw ConfigError("config: absent_classes must be \"exclude\" or \"zero\"");
  }
  r.finish();
  validate(c);
  return c;
}

data::SyntheticSpec synthetic_spec_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(e.byte, std::string("synthetic spec: ") + e.what());
  }
  data::SyntheticSpec spec;
  ObjectReader r(j, "");
  read_synthetic(r, spec);
  data::validate(spec);
  return spec;
}

std::vector<data::SegSample> load_dataset_split(const TrainConfig& c, const std::string& split) {
  if (!c.data_dir.empty()) return data::load_split(c.data_dir, split);
  std::size_t first = 0, count = 0;
  if (split == c.train_split) {
    count = static_cast<std::size_t>(c.synthetic_train);
  } else if (split == c.val_split) {
    first = static_cast<std::size_t>(c.synthetic_train);
    count = static_cast<std::size_t>(c.synthetic_val);
  } else {
    throw DataError("unknown split '" + split + "' for synthetic data (have '" + c.train_split + "' and '" +
                    c.val_split + "')");
  }
  std::vector<data::SegSample> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(data::generate_sample(c.synthetic, first + i));
  return out;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  return train_config_from_json(std::string(bytes.begin(), bytes.end()));
}

ModelConfig model_config(const TrainConfig& c) {
  ModelConfig m;
  m.num_classes = c.num_classes;
  m.backbone = c.backbone;
  m.cardinality = c.cardinality;
  m.long_kernel = c.long_kernel;
  m.global_kernel = c.crop;
  m.attention_reduction = c.attention_reduction;
  m.bcib_norm = c.bcib_batch_norm ? Norm::kBatch : Norm::kNone;
  m.ablation = c.ablation;
  return m;
}

// ---- schedule and optimiser -----------------------------------------------------------

double poly_lr(double lr_base, std::int64_t iter, std::int64_t max_iter, double power) {
  if (max_iter <= 0) throw std::invalid_argument("poly_lr: max_iter must be positive");
  if (iter < 0) throw std::invalid_argument("poly_lr: iteration must be non-negative");
  if (iter > max_iter) {
    log::warn("poly_lr: iteration " + std::to_string(iter) + " is past max_iter " + std::to_string(max_iter) +
              "; learning rate clamped to 0");
    return 0.0;
  }
  return lr_base * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), power);
}

template <typename T>
Sgd<T>::Sgd(const ParamStore<T>& store) {
  for (const auto& e : store.entries()) {
    if (e.kind == ParamKind::kLearnable) velocity_.emplace_back(e.name, Tensor<T>(e.var.shape(), T(0)));
  }
}

template <typename T>
void Sgd<T>::step(ParamStore<T>& store, double lr, double momentum, double weight_decay) {
  std::size_t k = 0;
  for (auto& e : store.entries()) {
    if (e.kind != ParamKind::kLearnable) continue;
    if (k >= velocity_.size() || velocity_[k].first != e.name) {
      throw std::logic_error("optimiser state does not match parameter '" + e.name + "'");
    }
    if (!e.var.has_grad()) throw std::runtime_error("no gradient for parameter '" + e.name + "'");
    const double decay = e.weight_decay ? weight_decay : 0.0;
    auto p = e.var.mutable_value().data();
    const auto g = e.var.grad().data();
    auto v = velocity_[k].second.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double vi = momentum * v[i] + (static_cast<double>(g[i]) + decay * p[i]);
      v[i] = static_cast<T>(vi);
      p[i] = static_cast<T>(p[i] - lr * vi);
    }
    ++k;
  }
}

template class Sgd<float>;
template class Sgd<double>;

// ---- checkpoints ---------------------------------------------------------------------

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  std::vector<std::uint8_t> out{'B', 'C', 'A', 'N'};
  put_u32(out, Checkpoint::kVersion);
  put_string(out, c.config_json);
  put_tensors(out, c.tensors);
  put_tensors(out, c.momentum);
  put_u64(out, c.iteration);
  put_string(out, c.rng_state);
  return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || !std::equal(bytes.begin(), bytes.begin() + 4, "BCAN")) {
    throw ParseError(0, "not a checkpoint (magic \"BCAN\" missing)");
  }
  Cursor cur(bytes);
  cur.need(4, "magic");
  cur.u32("magic");
  const std::size_t version_at = cur.pos();
  const std::uint32_t version = cur.u32("version");
  if (version != Checkpoint::kVersion) throw ParseError(version_at, "unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.config_json = cur.string("config");
  c.tensors = cur.tensors("tensors");
  c.momentum = cur.tensors("momentum buffers");
  c.iteration = cur.u64("iteration");
  c.rng_state = cur.string("rng state");
  if (!cur.at_end()) throw ParseError(cur.pos(), "trailing bytes after checkpoint");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_bytes(path)); }

// ---- inference -------------------------------------------------------------------------

LabelMap predict_labels(const BiCANet<float>& model, const Tensor<float>& image, Mode mode) {
  if (mode == Mode::kTrain) throw std::invalid_argument("predict_labels: training mode would update the model");
  const Shape s = image.shape();
  if (s.n != 1 || s.c != 3) throw ShapeError("channels", "predict expects a (1, 3, h, w) image, got " + s.str());
  const int H = (s.h + 31) / 32 * 32, W = (s.w + 31) / 32 * 32;
  Tensor<float> x = image;
  if (H != s.h || W != s.w) {
    log::info("predict: padding " + std::to_string(s.h) + "x" + std::to_string(s.w) + " input reflectively to " +
              std::to_string(H) + "x" + std::to_string(W));
    x = Tensor<float>(Shape{1, 3, H, W});
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < H; ++y)
        for (int xx = 0; xx < W; ++xx) x.at(0, c, y, xx) = image.at(0, c, reflect(y, s.h), reflect(xx, s.w));
  }
  Tape<float> tape(false);
  const auto out = model.forward(tape, Var<float>(std::move(x)), mode);
  const LabelMap full = ops::argmax_channels(out.logits.value());
  if (H == s.h && W == s.w) return full;
  LabelMap cropped(1, s.h, s.w);
  for (int y = 0; y < s.h; ++y)
    for (int xx = 0; xx < s.w; ++xx) cropped.at(0, y, xx) = full.at(0, y, xx);
  return cropped;
}

ConfusionMatrix evaluate(const BiCANet<float>& model, const std::vector<data::SegSample>& samples, Mode mode) {
  ConfusionMatrix cm(model.config().num_classes);
  for (const auto& s : samples) cm.accumulate(predict_labels(model, s.image, mode), s.labels);
  return cm;
}

// ---- trainer ---------------------------------------------------------------------------

Trainer::Trainer(const TrainConfig& config)
    : config_(config), model_((validate(config), model_config(config))), rng_(mix(config.data_seed)) {
  init_params(model_.params(), config_.seed);
  sgd_ = Sgd<float>(model_.params());

  if (!config_.data_dir.empty()) {
    const auto manifest = data::read_manifest(config_.data_dir);
    if (manifest.num_classes != config_.num_classes) {
      throw ConfigError("config: dataset has " + std::to_string(manifest.num_classes) + " classes, config says " +
                        std::to_string(config_.num_classes));
    }
    const bool has_val = std::any_of(manifest.splits.begin(), manifest.splits.end(),
                                     [&](const auto& s) { return s.first == config_.val_split; });
    if (has_val && !config_.val_split.empty()) val_ = load_dataset_split(config_, config_.val_split);
  } else {
    val_ = load_dataset_split(config_, config_.val_split);
  }
  train_ = load_dataset_split(config_, config_.train_split);
  if (train_.empty()) throw DataError("training split is empty");

  per_epoch_ = (static_cast<std::int64_t>(train_.size()) + config_.batch - 1) / config_.batch;
  max_iter_ = config_.max_iter > 0 ? config_.max_iter : config_.epochs * per_epoch_;
  if (config_.batch < 8) {
    log::info("batch " + std::to_string(config_.batch) +
              ": batch-norm uses per-batch statistics, which are noisy at this size");
  }
  log::info("config: " + config_json(config_).dump());
}

const std::vector<data::SegSample>& Trainer::split(const std::string& name) const {
  if (name == config_.train_split) return train_;
  if (name == config_.val_split) return val_;
  throw DataError("unknown split '" + name + "'");
}

std::vector<std::size_t> Trainer::epoch_order(std::int64_t epoch) const {
  std::vector<std::size_t> order(train_.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 r(mix(config_.data_seed ^ mix(static_cast<std::uint64_t>(epoch) + 1)));
  std::shuffle(order.begin(), order.end(), r);
  return order;
}

LossReport Trainer::step() {
  if (iteration_ >= max_iter_) throw std::logic_error("training already reached max_iter");
  const std::int64_t epoch = iteration_ / per_epoch_;
  const std::int64_t slot = iteration_ % per_epoch_;
  const auto order = epoch_order(epoch);
  const std::size_t first = static_cast<std::size_t>(slot * config_.batch);
  const std::size_t last = std::min(order.size(), first + static_cast<std::size_t>(config_.batch));
  const int b = static_cast<int>(last - first);

  data::AugmentConfig aug = config_.augmentation;
  if (!config_.augment) {
    aug.scale_min = aug.scale_max = 1.0;
    aug.aspect_min = aug.aspect_max = 1.0;
    aug.horizontal_flip = aug.vertical_flip = false;
  }
  aug.crop_height = aug.crop_width = config_.crop;

  const int C = config_.crop;
  Tensor<float> x(Shape{b, 3, C, C});
  LabelMap labels(b, C, C);
  for (int k = 0; k < b; ++k) {
    const data::SegSample s = data::augment(train_[order[first + k]], aug, rng_);
    std::copy(s.image.data().begin(), s.image.data().end(),
              x.data().begin() + static_cast<std::ptrdiff_t>(k) * 3 * C * C);
    std::copy(s.labels.data.begin(), s.labels.data.end(),
              labels.data.begin() + static_cast<std::ptrdiff_t>(k) * C * C);
  }

  Tape<float> tape;
  const auto out = model_.forward(tape, Var<float>(std::move(x)), Mode::kTrain);
  const auto loss = compute_loss(tape, out, labels, config_.lambda, config_.ohem);
  model_.params().zero_grad();
  tape.backward(loss.total);
  const double lr = poly_lr(config_.lr_base, iteration_, max_iter_, config_.power);
  sgd_.step(model_.params(), lr, config_.momentum, config_.weight_decay);
  ++iteration_;
  history_.push_back(loss.report);
  if (!std::isfinite(loss.report.total)) throw std::runtime_error("training diverged: non-finite loss");
  return loss.report;
}

MetricsRow Trainer::evaluate_split(const std::string& name, int epoch, Mode mode) const {
  return summarize(evaluate(model_, split(name), mode), epoch, name, config_.absent_classes);
}

void Trainer::append_metrics(const std::vector<MetricsRow>& rows) const {
  if (config_.output_dir.empty() || rows.empty()) return;
  const std::filesystem::path path = std::filesystem::path(config_.output_dir) / "metrics.csv";
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  if (fresh) out << metrics_csv_header(config_.num_classes) << "\n";
  for (const auto& r : rows) out << metrics_csv_line(r) << "\n";
}

std::vector<MetricsRow> Trainer::run(std::optional<std::int64_t> limit) {
  const bool write = !config_.output_dir.empty();
  const std::filesystem::path dir = config_.output_dir;
  if (write) {
    std::filesystem::create_directories(dir);
    if (iteration_ == 0) {
      std::filesystem::remove(dir / "metrics.csv");
      std::ofstream(dir / "config.json", std::ios::binary) << to_json(config_) << "\n";
    }
  }
  std::vector<MetricsRow> produced;
  std::int64_t steps = 0;
  while (iteration_ < max_iter_ && (!limit || steps < *limit)) {
    step();
    ++steps;
    const bool epoch_end = iteration_ % per_epoch_ == 0 || iteration_ == max_iter_;
    if (!epoch_end) continue;
    const int epoch = static_cast<int>((iteration_ + per_epoch_ - 1) / per_epoch_);
    std::vector<MetricsRow> rows;
    if (config_.eval_train) rows.push_back(evaluate_split(config_.train_split, epoch));
    if (!val_.empty()) rows.push_back(evaluate_split(config_.val_split, epoch));
    append_metrics(rows);
    produced.insert(produced.end(), rows.begin(), rows.end());
    double mean = 0.0;
    const std::size_t span = std::min<std::size_t>(history_.size(), static_cast<std::size_t>(per_epoch_));
    for (std::size_t i = history_.size() - span; i < history_.size(); ++i) mean += history_[i].total;
    std::string msg = "epoch " + std::to_string(epoch) + " iter " + std::to_string(iteration_) + "/" +
                      std::to_string(max_iter_) + " loss " + std::to_string(mean / static_cast<double>(span));
    for (const auto& r : rows) msg += " " + r.split + ".miou " + std::to_string(r.miou);
    log::info(msg);
    if (write && (epoch % config_.checkpoint_every_epochs == 0 || iteration_ == max_iter_)) {
      save_checkpoint(dir / "checkpoint.bcan", checkpoint());
    }
  }
  if (write && iteration_ > 0) save_checkpoint(dir / "checkpoint.bcan", checkpoint());
  return produced;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  c.config_json = to_json(config_);
  for (const auto& e : model_.params().entries()) c.tensors.emplace_back(e.name, e.var.value());
  c.momentum = sgd_.velocity();
  c.iteration = static_cast<std::uint64_t>(iteration_);
  std::ostringstream rng;
  rng << rng_;
  c.rng_state = rng.str();
  return c;
}

void Trainer::resume(const std::filesystem::path& path) {
  const Checkpoint c = load_checkpoint(path);
  std::map<std::string, std::string> saved, now;
  flatten(json::parse(c.config_json), "", saved);
  flatten(config_json(config_), "", now);
  std::string diff;
  for (const auto& [k, v] : now) {
    if (resume_may_differ(k)) continue;
    auto it = saved.find(k);
    const std::string old = it == saved.end() ? "<absent>" : it->second;
    if (old != v) diff += "\n  " + k + ": checkpoint " + old + ", config " + v;
  }
  if (!diff.empty()) throw ConfigError("refusing to resume: configuration differs from checkpoint" + diff);

  restore_tensors(model_.params(), c.tensors);
  auto& vel = sgd_.velocity();
  if (c.momentum.size() != vel.size()) throw DataError("checkpoint momentum buffers do not match the model");
  for (std::size_t i = 0; i < vel.size(); ++i) {
    if (c.momentum[i].first != vel[i].first || !(c.momentum[i].second.shape() == vel[i].second.shape())) {
      throw DataError("checkpoint momentum buffer '" + c.momentum[i].first + "' does not match the model");
    }
    vel[i].second = c.momentum[i].second;
  }
  iteration_ = static_cast<std::int64_t>(c.iteration);
  std::istringstream rng(c.rng_state);
  rng >> rng_;
  if (!rng) throw DataError("checkpoint RNG state is malformed");
  history_.clear();
}

LoadedModel load_model(const std::filesystem::path& path) {
  const Checkpoint c = load_checkpoint(path);
  TrainConfig cfg = train_config_from_json(c.config_json);
  LoadedModel out{cfg, BiCANet<float>(model_config(cfg)), c.iteration};
  restore_tensors(out.model.params(), c.tensors);
  return out;
}

PredictionFiles predict_file(const BiCANet<float>& model, const std::filesystem::path& image,
                             const std::filesystem::path& out_dir) {
  const Tensor<float> x = data::from_raster(data::read_pnm(image));
  const LabelMap labels = predict_labels(model, x);
  std::filesystem::create_directories(out_dir);
  PredictionFiles files{out_dir / (image.stem().string() + "_color.ppm"), out_dir / (image.stem().string() + "_labels.pgm")};
  data::write_pnm(files.color, data::colorize(labels));
  data::write_labels(files.labels, labels);
  return files;
}

}  // namespace bicanet
