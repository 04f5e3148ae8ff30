#include "marble/model.hpp"

#include <cmath>
#include <fstream>
#include <map>

#include "binio.hpp"
#include "marble/error.hpp"

namespace marble {

namespace {

constexpr std::uint16_t kCheckpointVersion = 1;

Tensor uniform(Shape shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

std::string_view head_name(HeadKind head) {
  return head == HeadKind::Classification ? "classification" : "survival";
}

HeadKind parse_head(std::string_view s) {
  if (s == "classification") return HeadKind::Classification;
  if (s == "survival") return HeadKind::Survival;
  throw ConfigError("unknown head kind '" + std::string(s) + "'");
}

MarbleParams init_marble(const ModelDims& dims, Rng& rng) {
  if (dims.levels == 0) throw ArgumentError("init_marble: at least one level is required");
  if (dims.head == HeadKind::Classification && dims.classes < 2) {
    throw ArgumentError("init_marble: classification needs at least two classes");
  }
  const std::size_t D = dims.d_model;
  MarbleParams p;
  p.head = dims.head;
  for (std::size_t k = 0; k < dims.levels; ++k) {
    p.blocks.push_back(init_ssm_block(D, dims.inner, dims.state, rng));
  }
  const double fuse_bound = 1.0 / std::sqrt(2.0 * static_cast<double>(D));
  for (std::size_t k = 1; k < dims.levels; ++k) {
    p.fuse.push_back(Linear<Tensor>{uniform({2 * D, D}, fuse_bound, rng), Tensor(Shape{D}, 0.0)});
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(D));
  p.pool_w = uniform({D}, bound, rng);
  if (dims.head == HeadKind::Classification) {
    p.cls_w = uniform({dims.classes, D}, bound, rng);
    p.cls_b = Tensor(Shape{dims.classes}, 0.0);
  } else {
    p.cox_beta = uniform({D}, bound, rng);
  }
  return p;
}

ModelDims dims_of(const MarbleParams& p) {
  ModelDims d;
  d.head = p.head;
  d.levels = p.blocks.size();
  if (!p.blocks.empty()) {
    const SsmDims s = dims_of(p.blocks.front());
    d.d_model = s.d_model;
    d.inner = s.inner;
    d.state = s.state;
  }
  d.classes = p.head == HeadKind::Classification ? p.cls_w.rows() : 1;
  return d;
}

MarbleParams zeros_like(const MarbleParams& p) {
  MarbleParams z = p;
  z.visit([](const std::string&, Tensor& t) { t.fill(0.0); });
  return z;
}

std::vector<std::pair<std::string, Tensor*>> named_tensors(MarbleParams& p) {
  std::vector<std::pair<std::string, Tensor*>> out;
  p.visit([&](const std::string& n, Tensor& t) { out.emplace_back(n, &t); });
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> named_tensors(const MarbleParams& p) {
  std::vector<std::pair<std::string, const Tensor*>> out;
  const_cast<MarbleParams&>(p).visit(
      [&](const std::string& n, Tensor& t) { out.emplace_back(n, &t); });
  return out;
}

double squared_norm(const MarbleParams& p) {
  double s = 0.0;
  for (const auto& [name, t] : named_tensors(p)) {
    for (double v : t->data()) s += v * v;
  }
  return s;
}

std::size_t parameter_count(const MarbleParams& p) {
  std::size_t n = 0;
  for (const auto& [name, t] : named_tensors(p)) n += t->size();
  return n;
}

MarbleVars bind(Tape& tape, const MarbleParams& p, MarbleParams* grads) {
  MarbleVars v;
  v.head = p.head;
  v.blocks.resize(p.blocks.size());
  v.fuse.resize(p.fuse.size());
  const auto values = named_tensors(p);
  std::vector<Tensor*> sinks(values.size(), nullptr);
  if (grads) {
    auto g = named_tensors(*grads);
    if (g.size() != values.size()) throw ContractError("bind: gradient layout mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) sinks[i] = g[i].second;
  }
  std::size_t i = 0;
  v.visit([&](const std::string&, Var& var) {
    var = tape.param(*values[i].second, sinks[i]);
    ++i;
  });
  return v;
}

Var fuse_level(Var x, Var y_prev, std::span<const std::size_t> parents, const Linear<Var>& phi) {
  if (parents.size() != x.value().rows()) {
    throw DimensionError("fuse_level: " + std::to_string(parents.size()) + " parents for " +
                         std::to_string(x.value().rows()) + " tokens");
  }
  Var context = gather_rows(y_prev, parents);
  return add_bias(matmul(concat_last_dim(x, context), phi.weight), phi.bias);
}

Pooled attention_pool(Var y, Var w) {
  const Tensor& yv = y.value();
  if (yv.rank() != 2 || yv.rows() == 0) {
    throw DimensionError("attention_pool: expected T x D with T >= 1, got " + shape_str(yv.shape()));
  }
  const std::size_t T = yv.rows(), D = yv.cols();
  if (w.value().shape() != Shape{D}) {
    throw DimensionError("attention_pool: w " + shape_str(w.value().shape()) + " vs D=" +
                         std::to_string(D));
  }
  Var scores = reshape(matmul(y, reshape(w, {D, 1})), {T});
  Var weights = softmax_1d(scores);
  Var z = reshape(matmul(reshape(weights, {1, T}), y), {D});
  return Pooled{z, weights};
}

Var classify(Var z, Var cls_w, Var cls_b) {
  const std::size_t D = z.value().size();
  const std::size_t C = cls_w.value().rows();
  if (cls_w.value().shape() != Shape{C, D} || cls_b.value().shape() != Shape{C}) {
    throw DimensionError("classify: head " + shape_str(cls_w.value().shape()) + " / " +
                         shape_str(cls_b.value().shape()) + " does not match z of length " +
                         std::to_string(D));
  }
  return add(reshape(matmul(cls_w, reshape(z, {D, 1})), {C}), cls_b);
}

Var risk_score(Var z, Var beta) {
  if (z.value().shape() != beta.value().shape()) {
    throw DimensionError("risk_score: beta " + shape_str(beta.value().shape()) + " vs z " +
                         shape_str(z.value().shape()));
  }
  return dot(beta, z);
}

SlideVars encode_slide(Tape& tape, const TokenBag& bag, const MarbleVars& params) {
  if (bag.levels.size() != params.blocks.size()) {
    throw DimensionError("encode_slide: bag has " + std::to_string(bag.levels.size()) +
                         " levels, model expects " + std::to_string(params.blocks.size()));
  }
  for (std::size_t k = 0; k < bag.levels.size(); ++k) {
    if (bag.levels[k].size() == 0) {
      throw DimensionError("encode_slide: level " + std::to_string(k) + " is empty");
    }
  }
  const std::size_t D = params.pool_w.value().size();
  if (bag.dim != D) {
    throw DimensionError("encode_slide: bag D=" + std::to_string(bag.dim) + " but model D=" +
                         std::to_string(D));
  }
  SlideVars out;
  for (std::size_t k = 0; k < bag.levels.size(); ++k) {
    Var x = tape.constant(bag.levels[k].embeddings);
    if (k > 0) x = fuse_level(x, out.levels[k - 1], bag.levels[k].parents, params.fuse[k - 1]);
    out.levels.push_back(ssm_block_forward(x, params.blocks[k]));
    out.level_order.push_back(k);
  }
  Pooled pooled = attention_pool(out.levels.back(), params.pool_w);
  out.pooled = pooled.z;
  out.weights = pooled.weights;
  out.head = params.head == HeadKind::Classification
                 ? classify(pooled.z, params.cls_w, params.cls_b)
                 : risk_score(pooled.z, params.cox_beta);
  return out;
}

SlideOutput encode_slide(const TokenBag& bag, const MarbleParams& params) {
  Tape tape(false);
  SlideVars v = encode_slide(tape, bag, bind(tape, params, nullptr));
  SlideOutput out;
  for (const Var& y : v.levels) out.levels.push_back(y.value());
  out.pooled = v.pooled.value();
  out.weights = v.weights.value();
  out.head = v.head.value();
  return out;
}

std::string checkpoint_bytes(const MarbleParams& params) {
  binio::Writer w;
  w.put_bytes("MRBL");
  w.put<std::uint16_t>(kCheckpointVersion);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(params.head));
  if (params.blocks.empty()) throw CheckpointError("checkpoint: model has no levels");
  w.put<std::uint8_t>(static_cast<std::uint8_t>(params.blocks.size() - 1));
  const auto named = named_tensors(params);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.put_bytes(name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t->rank()));
    for (auto d : t->shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (double v : t->data()) w.put_f64(v);
  }
  return w.bytes();
}

MarbleParams parse_checkpoint(std::string_view bytes) {
  binio::Reader r(bytes, "checkpoint");
  if (r.get_bytes(4, "magic") != "MRBL") r.fail("bad magic");
  const auto version = r.get<std::uint16_t>("version");
  if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version));
  const auto head_tag = r.get<std::uint8_t>("head tag");
  if (head_tag > 1) r.fail("unknown head tag " + std::to_string(head_tag));
  const auto s = r.get<std::uint8_t>("level count");
  const auto count = r.get<std::uint32_t>("record count");

  std::map<std::string, Tensor> records;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>("name length");
    std::string name(r.get_bytes(len, "name"));
    const auto rank = r.get<std::uint8_t>("rank");
    Shape shape;
    for (std::uint8_t d = 0; d < rank; ++d) {
      const auto extent = r.get<std::uint32_t>("shape");
      if (extent == 0) r.fail("zero extent in " + name);
      shape.push_back(extent);
    }
    const std::size_t n = shape_size(shape);
    r.need(n * 8, "payload of " + name);
    std::vector<double> data(n);
    for (auto& v : data) v = r.get_f64("payload");
    if (!records.emplace(name, Tensor(std::move(shape), std::move(data))).second) {
      r.fail("duplicate record " + name);
    }
  }
  if (r.remaining() != 0) r.fail("trailing bytes");

  // Rebuild the parameter skeleton from the recorded names, then fill it.
  MarbleParams p;
  p.head = static_cast<HeadKind>(head_tag);
  p.blocks.resize(static_cast<std::size_t>(s) + 1);
  p.fuse.resize(s);
  std::size_t used = 0;
  p.visit([&](const std::string& name, Tensor& t) {
    auto it = records.find(name);
    if (it == records.end()) throw CheckpointError("checkpoint: missing record " + name);
    t = it->second;
    ++used;
  });
  if (used != records.size()) throw CheckpointError("checkpoint: unexpected extra records");

  const ModelDims d = dims_of(p);
  for (std::size_t k = 0; k < p.blocks.size(); ++k) {
    const SsmDims b = dims_of(p.blocks[k]);
    if (b.d_model != d.d_model || b.inner != d.inner || b.state != d.state) {
      throw CheckpointError("checkpoint: block " + std::to_string(k) + " dims disagree");
    }
  }
  return p;
}

void save_checkpoint(const MarbleParams& params, const std::string& path, std::uint64_t seed) {
  binio::write_file(path, checkpoint_bytes(params));
  const ModelDims d = dims_of(params);
  std::string manifest;
  manifest += "D=" + std::to_string(d.d_model) + "\n";
  manifest += "E=" + std::to_string(d.inner) + "\n";
  manifest += "N=" + std::to_string(d.state) + "\n";
  manifest += "S=" + std::to_string(d.levels - 1) + "\n";
  manifest += "C=" + std::to_string(d.classes) + "\n";
  manifest += "head=" + std::string(head_name(d.head)) + "\n";
  manifest += "seed=" + std::to_string(seed) + "\n";
  binio::write_file(path + ".manifest", manifest);
}

MarbleParams load_checkpoint(const std::string& path) {
  try {
    return parse_checkpoint(binio::read_file(path));
  } catch (const FormatError& e) {
    throw CheckpointError(e.what());
  }
}

}  // namespace marble
