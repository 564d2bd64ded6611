#include "ocnet/net.hpp"

#include "ocnet/errors.hpp"
#include "ocnet/io.hpp"
#include "ocnet/rng.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace ocnet {

std::size_t MlpArch::param_count() const {
  std::size_t total = 0;
  for (int l = 0; l < layers(); ++l) {
    total += static_cast<std::size_t>(fan_out(l)) * static_cast<std::size_t>(fan_in(l) + 1);
  }
  return total;
}

MlpParams::MlpParams(MlpArch a) : arch(std::move(a)), theta(Vec::Zero(static_cast<Eigen::Index>(arch.param_count()))) {}

std::size_t MlpParams::offset(int layer) const {
  std::size_t off = 0;
  for (int l = 0; l < layer; ++l) {
    off += static_cast<std::size_t>(arch.fan_out(l)) * static_cast<std::size_t>(arch.fan_in(l) + 1);
  }
  return off;
}

Eigen::Map<const RowMat> MlpParams::weight(int layer) const {
  return {theta.data() + offset(layer), arch.fan_out(layer), arch.fan_in(layer)};
}
Eigen::Map<RowMat> MlpParams::weight(int layer) {
  return {theta.data() + offset(layer), arch.fan_out(layer), arch.fan_in(layer)};
}
Eigen::Map<const Vec> MlpParams::bias(int layer) const {
  return {theta.data() + offset(layer) + arch.fan_out(layer) * arch.fan_in(layer), arch.fan_out(layer)};
}
Eigen::Map<Vec> MlpParams::bias(int layer) {
  return {theta.data() + offset(layer) + arch.fan_out(layer) * arch.fan_in(layer), arch.fan_out(layer)};
}

MlpParams init_params(const MlpArch& arch, std::uint64_t seed) {
  if (arch.state_dim < 1 || arch.control_dim < 1) throw ConfigError("network dimensions must be >= 1");
  MlpParams p(arch);
  Rng rng(seed);
  for (int l = 0; l < arch.layers(); ++l) {
    const double s = 1.0 / std::sqrt(static_cast<double>(arch.fan_in(l)));
    auto w = p.weight(l);
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = s * (2.0 * rng.uniform() - 1.0);
    }
  }
  return p;
}

MlpParams init_params(int n, int m, std::uint64_t seed) {
  MlpArch arch;
  arch.state_dim = n;
  arch.control_dim = m;
  return init_params(arch, seed);
}

Vec net_input(const MlpArch& arch, double t, const Vec& x) {
  if (!arch.time_input) return x;
  Vec in(x.size() + 1);
  in << t, x;
  return in;
}

namespace {

// tanh(|x|) = (1 - e) / (1 + e), e = exp(-2|x|), sign restored afterwards.
// Every element goes through the packet exp, including a zero-padded tail, so
// a value never depends on its position in the batch. Much cheaper than
// std::tanh here.
void tanh_inplace(Mat& z) {
  using namespace Eigen::internal;
  using P = packet_traits<double>::type;
  constexpr Eigen::Index W = packet_traits<double>::size;
  const P one = pset1<P>(1.0), minus_two = pset1<P>(-2.0), sign = pset1<P>(-0.0);
  auto kernel = [&](const P& x) {
    const P e = pexp(pmul(minus_two, pabs(x)));
    return por(pand(x, sign), pdiv(psub(one, e), padd(one, e)));
  };
  double* d = z.data();
  const Eigen::Index n = z.size(), full = n / W * W;
  for (Eigen::Index i = 0; i < full; i += W) pstoreu(d + i, kernel(ploadu<P>(d + i)));
  if (full < n) {
    alignas(64) double buf[W] = {};
    std::copy(d + full, d + n, buf);
    pstore(buf, kernel(pload<P>(buf)));
    std::copy(buf, buf + (n - full), d + full);
  }
}

}  // namespace

Mat forward_batch(const MlpParams& p, const Mat& inputs, ForwardCache& cache) {
  const int L = p.arch.layers();
  cache.acts.resize(static_cast<std::size_t>(L) + 1);
  cache.acts[0] = inputs;
  for (int l = 0; l < L; ++l) {
    Mat z = p.weight(l) * cache.acts[static_cast<std::size_t>(l)];
    z.colwise() += p.bias(l);
    if (l + 1 < L) tanh_inplace(z);
    cache.acts[static_cast<std::size_t>(l) + 1] = std::move(z);
  }
  return cache.acts.back();
}

Mat forward_batch(const MlpParams& p, const Mat& inputs) {
  const int L = p.arch.layers();
  Mat a = inputs;
  for (int l = 0; l < L; ++l) {
    Mat z = p.weight(l) * a;
    z.colwise() += p.bias(l);
    if (l + 1 < L) tanh_inplace(z);
    a = std::move(z);
  }
  return a;
}

Vec forward(const MlpParams& p, double t, const Vec& x) { return forward_batch(p, net_input(p.arch, t, x)).col(0); }

Vec backward_cached(const MlpParams& p, const ForwardCache& cache, const Mat& upstream, Mat* d_inputs) {
  const int L = p.arch.layers();
  Vec grad(p.theta.size());
  Mat g = upstream;  // d loss / d pre-activation of the current layer
  for (int l = L - 1; l >= 0; --l) {
    const Mat& a_in = cache.acts[static_cast<std::size_t>(l)];
    const std::size_t off = p.offset(l);
    const int fo = p.arch.fan_out(l), fi = p.arch.fan_in(l);
    Eigen::Map<RowMat> dw(grad.data() + off, fo, fi);
    Eigen::Map<Vec> db(grad.data() + off + static_cast<std::size_t>(fo * fi), fo);
    dw.noalias() = g * a_in.transpose();
    db = g.rowwise().sum();
    if (l > 0) {
      Mat prev = p.weight(l).transpose() * g;
      prev.array() *= 1.0 - a_in.array().square();
      g = std::move(prev);
    } else if (d_inputs) {
      *d_inputs = p.weight(0).transpose() * g;
    }
  }
  return grad;
}

Vec backward_batch(const MlpParams& p, const Mat& inputs, const Mat& upstream, Mat* d_inputs) {
  ForwardCache cache;
  forward_batch(p, inputs, cache);
  return backward_cached(p, cache, upstream, d_inputs);
}

BackwardResult backward(const MlpParams& p, double t, const Vec& x, const Vec& upstream) {
  Mat d_in;
  BackwardResult r;
  r.grad.arch = p.arch;
  r.grad.theta = backward_batch(p, net_input(p.arch, t, x), upstream, &d_in);
  r.dx = d_in.col(0).tail(x.size());
  return r;
}

AdamState::AdamState(std::size_t size, double lr_)
    : m(Vec::Zero(static_cast<Eigen::Index>(size))), v(Vec::Zero(static_cast<Eigen::Index>(size))), lr(lr_) {}

void adam_step(AdamState& s, MlpParams& params, const Vec& grad) {
  if (grad.size() != params.theta.size()) throw ConfigError("gradient and parameter sizes differ");
  if (s.m.size() != grad.size()) {
    s.m = Vec::Zero(grad.size());
    s.v = Vec::Zero(grad.size());
  }
  ++s.step;
  s.m = s.beta1 * s.m + (1.0 - s.beta1) * grad;
  s.v = s.beta2 * s.v + (1.0 - s.beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  params.theta.array() -= s.lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + s.eps);
}

// ---------------------------------------------------------------------------
// checkpoint text format

namespace {

constexpr const char* kCheckpointTag = "ocnet-checkpoint v1";

void put_vec(std::ostringstream& os, const char* key, const Vec& v) {
  os << key << ' ' << v.size() << '\n';
  for (Eigen::Index i = 0; i < v.size(); ++i) os << format_double(v[i]) << '\n';
}

class LineReader {
 public:
  explicit LineReader(const std::string& text) : in_(text) {}

  std::string line() {
    std::string s;
    if (!std::getline(in_, s)) throw IoError("checkpoint truncated");
    if (!s.empty() && s.back() == '\r') s.pop_back();
    return s;
  }

  std::string value(const std::string& key) {
    const std::string s = line();
    if (s.rfind(key + ' ', 0) != 0) throw IoError("checkpoint: expected '" + key + "', got '" + s + "'");
    return s.substr(key.size() + 1);
  }

  Vec vec(const std::string& key) {
    long count = 0;
    try {
      count = std::stol(value(key));
    } catch (const std::logic_error&) {
      throw IoError("checkpoint: bad count for " + key);
    }
    if (count < 0) throw IoError("checkpoint: negative count for " + key);
    Vec v(count);
    for (long i = 0; i < count; ++i) v[i] = parse_double(line());
    return v;
  }

 private:
  std::istringstream in_;
};

long to_long(const std::string& s) {
  try {
    std::size_t pos = 0;
    const long v = std::stol(s, &pos);
    if (pos != s.size()) throw IoError("checkpoint: bad integer '" + s + "'");
    return v;
  } catch (const std::logic_error&) {
    throw IoError("checkpoint: bad integer '" + s + "'");
  }
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  const MlpArch& a = ck.params.arch;
  std::ostringstream os;
  os << kCheckpointTag << '\n';
  os << "problem " << ck.meta.problem << '\n';
  os << "horizon " << format_double(ck.meta.horizon) << '\n';
  os << "seed " << ck.meta.seed << '\n';
  os << "stage " << ck.meta.stage << '\n';
  os << "init " << ck.meta.init_scheme << '\n';
  os << "state_dim " << a.state_dim << '\n';
  os << "control_dim " << a.control_dim << '\n';
  os << "time_input " << (a.time_input ? 1 : 0) << '\n';
  os << "hidden";
  for (int h : a.hidden) os << ' ' << h;
  os << '\n';
  put_vec(os, "theta", ck.params.theta);
  if (ck.optimizer) {
    const AdamState& s = *ck.optimizer;
    os << "adam 1\n";
    os << "step " << s.step << '\n';
    os << "lr " << format_double(s.lr) << '\n';
    os << "beta1 " << format_double(s.beta1) << '\n';
    os << "beta2 " << format_double(s.beta2) << '\n';
    os << "eps " << format_double(s.eps) << '\n';
    put_vec(os, "m", s.m);
    put_vec(os, "v", s.v);
  } else {
    os << "adam 0\n";
  }
  os << "end\n";
  write_file_atomic(path, os.str());
}

Checkpoint load_checkpoint(const std::string& path) {
  LineReader r(read_file(path));
  const std::string tag = r.line();
  if (tag.rfind("ocnet-checkpoint", 0) != 0) throw IoError(path + " is not a checkpoint file");
  if (tag != kCheckpointTag) throw SchemaMismatch("unsupported checkpoint version '" + tag + "'");
  Checkpoint ck;
  ck.meta.problem = r.value("problem");
  ck.meta.horizon = parse_double(r.value("horizon"));
  try {
    ck.meta.seed = std::stoull(r.value("seed"));
  } catch (const std::logic_error&) {
    throw IoError("checkpoint: bad seed");
  }
  ck.meta.stage = r.value("stage");
  ck.meta.init_scheme = r.value("init");
  MlpArch a;
  a.state_dim = static_cast<int>(to_long(r.value("state_dim")));
  a.control_dim = static_cast<int>(to_long(r.value("control_dim")));
  a.time_input = to_long(r.value("time_input")) != 0;
  a.hidden.clear();
  {
    std::istringstream hs(r.value("hidden"));
    std::string tok;
    while (hs >> tok) a.hidden.push_back(static_cast<int>(to_long(tok)));
  }
  if (a.state_dim < 1 || a.control_dim < 1) throw IoError("checkpoint: bad dimensions");
  for (int h : a.hidden) {
    if (h < 1) throw IoError("checkpoint: bad hidden width");
  }
  ck.params.arch = a;
  ck.params.theta = r.vec("theta");
  if (static_cast<std::size_t>(ck.params.theta.size()) != a.param_count()) {
    throw IoError("checkpoint: parameter count does not match the architecture");
  }
  if (to_long(r.value("adam")) != 0) {
    AdamState s;
    s.step = to_long(r.value("step"));
    s.lr = parse_double(r.value("lr"));
    s.beta1 = parse_double(r.value("beta1"));
    s.beta2 = parse_double(r.value("beta2"));
    s.eps = parse_double(r.value("eps"));
    s.m = r.vec("m");
    s.v = r.vec("v");
    if (s.m.size() != ck.params.theta.size() || s.v.size() != ck.params.theta.size()) {
      throw IoError("checkpoint: optimizer moments do not match the parameters");
    }
    ck.optimizer = std::move(s);
  }
  if (r.line() != "end") throw IoError("checkpoint: missing end marker");
  return ck;
}

Checkpoint load_checkpoint(const std::string& path, const std::string& problem, int state_dim, int control_dim) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.params.arch.state_dim != state_dim || ck.params.arch.control_dim != control_dim) {
    throw SchemaMismatch("checkpoint " + path + " is for a " + std::to_string(ck.params.arch.state_dim) + "-state, " +
                         std::to_string(ck.params.arch.control_dim) + "-control network ('" + ck.meta.problem +
                         "'), not " + problem);
  }
  if (!ck.meta.problem.empty() && ck.meta.problem != problem) {
    throw SchemaMismatch("checkpoint " + path + " was trained on '" + ck.meta.problem + "', not '" + problem + "'");
  }
  return ck;
}

}  // namespace ocnet
