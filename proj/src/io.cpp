#include "sprune/io.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace sprune {

namespace {

constexpr char kMagic[8] = {'S', 'P', 'R', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

struct Writer {
  std::string buf;

  template <class T>
  void raw(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const char* p = reinterpret_cast<const char*>(&v);
    buf.append(p, sizeof(T));
  }
  void f64(double v) { raw(v); }
  void i32(std::int32_t v) { raw(v); }
  void i64(std::int64_t v) { raw(v); }
  void u32(std::uint32_t v) { raw(v); }
  void u64(std::uint64_t v) { raw(v); }
  void str(const std::string& s) {
    u64(s.size());
    buf.append(s);
  }
  void mat(const Matrix& m) {
    i64(m.rows());
    i64(m.cols());
    buf.append(reinterpret_cast<const char*>(m.data()),
               sizeof(double) * m.size());
  }
  void vec(const Vector& v) {
    i64(v.size());
    buf.append(reinterpret_cast<const char*>(v.data()),
               sizeof(double) * v.size());
  }
};

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) {
    if (pos + n > buf.size()) {
      throw std::runtime_error("checkpoint truncated");
    }
  }
  template <class T>
  T raw() {
    static_assert(std::is_trivially_copyable_v<T>);
    need(sizeof(T));
    T v;
    std::memcpy(&v, buf.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  double f64() { return raw<double>(); }
  std::int32_t i32() { return raw<std::int32_t>(); }
  std::int64_t i64() { return raw<std::int64_t>(); }
  std::uint32_t u32() { return raw<std::uint32_t>(); }
  std::uint64_t u64() { return raw<std::uint64_t>(); }
  std::string str() {
    std::uint64_t n = u64();
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
  Matrix mat() {
    std::int64_t r = i64(), c = i64();
    if (r < 0 || c < 0) {
      throw std::runtime_error("checkpoint corrupted");
    }
    need(sizeof(double) * r * c);
    Matrix m(r, c);
    std::memcpy(m.data(), buf.data() + pos, sizeof(double) * r * c);
    pos += sizeof(double) * r * c;
    return m;
  }
  Vector vec() {
    std::int64_t n = i64();
    if (n < 0) {
      throw std::runtime_error("checkpoint corrupted");
    }
    need(sizeof(double) * n);
    Vector v(n);
    std::memcpy(v.data(), buf.data() + pos, sizeof(double) * n);
    pos += sizeof(double) * n;
    return v;
  }
};

void write_config(Writer& w, const TrainConfig& c) {
  w.f64(c.lambda);
  w.i32(c.batch_size);
  w.f64(c.lr);
  w.u32(static_cast<std::uint32_t>(c.schedule));
  w.f64(c.rm_tau);
  w.f64(c.adam_beta1);
  w.f64(c.adam_beta2);
  w.f64(c.adam_eps);
  w.u32(static_cast<std::uint32_t>(c.estimator));
  w.f64(c.concrete_temperature);
  w.i32(c.hybrid_top_k);
  if (const auto* b = std::get_if<BetaPrior>(&c.prior)) {
    w.u32(0);
    w.f64(b->alpha);
    w.f64(b->beta);
  } else {
    w.u32(1);
    w.f64(std::get<FlatteningPrior>(c.prior).gamma);
    w.f64(0.0);
  }
  w.f64(c.clip.eps1);
  w.f64(c.clip.eps2);
  w.f64(c.theta0);
  w.f64(c.theta_lo);
  w.f64(c.theta_hi);
  w.f64(c.theta_tol);
  w.f64(c.theta_per);
  w.i64(c.drop_after);
  w.f64(c.phi_max);
  w.f64(c.grad_tol);
  w.i32(c.epochs);
  w.i32(c.fine_tune_epochs);
  w.f64(c.fine_tune_lr);
  w.f64(c.input_threshold);
  w.u64(c.seed);
}

TrainConfig read_config(Reader& r) {
  TrainConfig c;
  c.lambda = r.f64();
  c.batch_size = r.i32();
  c.lr = r.f64();
  c.schedule = static_cast<ScheduleKind>(r.u32());
  c.rm_tau = r.f64();
  c.adam_beta1 = r.f64();
  c.adam_beta2 = r.f64();
  c.adam_eps = r.f64();
  c.estimator = static_cast<EstimatorKind>(r.u32());
  c.concrete_temperature = r.f64();
  c.hybrid_top_k = r.i32();
  std::uint32_t tag = r.u32();
  double pa = r.f64(), pb = r.f64();
  if (tag == 0) {
    c.prior = BetaPrior{pa, pb};
  } else {
    c.prior = FlatteningPrior{pa};
  }
  c.clip.eps1 = r.f64();
  c.clip.eps2 = r.f64();
  c.theta0 = r.f64();
  c.theta_lo = r.f64();
  c.theta_hi = r.f64();
  c.theta_tol = r.f64();
  c.theta_per = r.f64();
  c.drop_after = r.i64();
  c.phi_max = r.f64();
  c.grad_tol = r.f64();
  c.epochs = r.i32();
  c.fine_tune_epochs = r.i32();
  c.fine_tune_lr = r.f64();
  c.input_threshold = r.f64();
  c.seed = r.u64();
  return c;
}

void write_network(Writer& w, const Network& net) {
  w.i32(net.input_size);
  w.u32(static_cast<std::uint32_t>(net.loss.type));
  w.f64(net.loss.tau);
  w.u64(net.layers.size());
  for (const auto& layer : net.layers) {
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      w.u32(0);
      w.u32(d->gated);
      w.u32(static_cast<std::uint32_t>(d->act));
      w.f64(d->slope);
      w.mat(d->weights);
      w.vec(d->bias);
    } else if (const auto* c = std::get_if<ConvLayer>(&layer)) {
      w.u32(1);
      w.i32(c->spec.in_c);
      w.i32(c->spec.in_h);
      w.i32(c->spec.in_w);
      w.i32(c->spec.out_c);
      w.i32(c->spec.k);
      w.u32(c->gated);
      w.u32(static_cast<std::uint32_t>(c->act));
      w.f64(c->slope);
      w.mat(c->kernels);
      w.vec(c->bias);
    } else if (const auto* p = std::get_if<PoolLayer>(&layer)) {
      w.u32(2);
      w.i32(p->spec.c);
      w.i32(p->spec.h);
      w.i32(p->spec.w);
    } else {
      w.u32(3);
      w.i32(std::get<FlattenLayer>(layer).size);
    }
  }
}

Network read_network(Reader& r) {
  Network net;
  net.input_size = r.i32();
  net.loss.type = static_cast<LossKind::Type>(r.u32());
  net.loss.tau = r.f64();
  std::uint64_t n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    std::uint32_t tag = r.u32();
    if (tag == 0) {
      DenseLayer d;
      d.gated = r.u32() != 0;
      d.act = static_cast<Activation>(r.u32());
      d.slope = r.f64();
      d.weights = r.mat();
      d.bias = r.vec();
      net.layers.emplace_back(std::move(d));
    } else if (tag == 1) {
      ConvLayer c;
      c.spec.in_c = r.i32();
      c.spec.in_h = r.i32();
      c.spec.in_w = r.i32();
      c.spec.out_c = r.i32();
      c.spec.k = r.i32();
      c.gated = r.u32() != 0;
      c.act = static_cast<Activation>(r.u32());
      c.slope = r.f64();
      c.kernels = r.mat();
      c.bias = r.vec();
      net.layers.emplace_back(std::move(c));
    } else if (tag == 2) {
      PoolLayer p;
      p.spec.c = r.i32();
      p.spec.h = r.i32();
      p.spec.w = r.i32();
      net.layers.emplace_back(p);
    } else if (tag == 3) {
      net.layers.emplace_back(FlattenLayer{r.i32()});
    } else {
      throw std::runtime_error("checkpoint corrupted: unknown layer tag");
    }
  }
  return net;
}

std::uint32_t read_be32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) {
    throw std::runtime_error("truncated IDX file: " + what);
  }
  return (std::uint32_t{b[0]} << 24) | (std::uint32_t{b[1]} << 16) |
         (std::uint32_t{b[2]} << 8) | b[3];
}

}  // namespace

Dataset load_idx(const std::string& images_path,
                 const std::string& labels_path) {
  std::ifstream imgs(images_path, std::ios::binary);
  if (!imgs) {
    throw std::runtime_error("cannot open " + images_path);
  }
  if (read_be32(imgs, images_path) != 2051) {
    throw std::runtime_error("bad image magic in " + images_path);
  }
  std::uint32_t n = read_be32(imgs, images_path);
  std::uint32_t rows = read_be32(imgs, images_path);
  std::uint32_t cols = read_be32(imgs, images_path);

  std::ifstream labs(labels_path, std::ios::binary);
  if (!labs) {
    throw std::runtime_error("cannot open " + labels_path);
  }
  if (read_be32(labs, labels_path) != 2049) {
    throw std::runtime_error("bad label magic in " + labels_path);
  }
  std::uint32_t nl = read_be32(labs, labels_path);
  if (n != nl) {
    throw std::runtime_error("image/label count mismatch");
  }

  std::size_t dim = static_cast<std::size_t>(rows) * cols;
  std::vector<unsigned char> pix(dim);
  Dataset ds;
  ds.x.resize(dim, n);
  ds.y = Matrix::Zero(10, n);
  for (std::uint32_t i = 0; i < n; ++i) {
    if (!imgs.read(reinterpret_cast<char*>(pix.data()), dim)) {
      throw std::runtime_error("truncated IDX file: " + images_path);
    }
    for (std::size_t j = 0; j < dim; ++j) {
      ds.x(j, i) = pix[j] / 255.0;
    }
    int lab = labs.get();
    if (lab < 0 || lab > 9) {
      throw std::runtime_error("bad label value in " + labels_path);
    }
    ds.y(lab, i) = 1.0;
  }
  return ds;
}

Dataset synth_blobs(int classes, int dim, int n_per_class,
                    std::uint64_t seed) {
  if (classes < 1 || dim < 1 || n_per_class < 1) {
    throw std::invalid_argument("synth_blobs: all sizes must be >= 1");
  }
  Rng rng(seed);
  Matrix centers(dim, classes);
  for (int c = 0; c < classes; ++c) {
    for (int j = 0; j < dim; ++j) {
      centers(j, c) = 2.0 * rng.normal();
    }
  }
  int n = classes * n_per_class;
  Dataset ds;
  ds.x.resize(dim, n);
  ds.y = Matrix::Zero(classes, n);
  for (int i = 0; i < n; ++i) {
    int c = i % classes;  // interleaved classes
    for (int j = 0; j < dim; ++j) {
      ds.x(j, i) = centers(j, c) + rng.normal();
    }
    ds.y(c, i) = 1.0;
  }
  return ds;
}

void save_checkpoint(const std::string& path, const Trainer& trainer) {
  Writer w;
  write_config(w, trainer.config());
  write_network(w, trainer.net());
  const GateState& gs = trainer.gates();
  w.u64(gs.layers.size());
  for (const auto& gl : gs.layers) {
    w.vec(gl.theta);
    w.vec(gl.theta_max);
    w.vec(gl.last_xi);
    w.u64(gl.alive.size());
    w.buf.append(gl.alive.data(), gl.alive.size());
  }
  const OptState& os = trainer.opt();
  w.i64(os.t);
  w.u64(os.layers.size());
  for (const auto& ol : os.layers) {
    w.mat(ol.mw);
    w.mat(ol.vw);
    w.vec(ol.mb);
    w.vec(ol.vb);
    w.vec(ol.mt);
    w.vec(ol.vt);
  }
  w.i64(trainer.iteration());
  w.u64(trainer.initial_weights());
  w.u64(trainer.orig_units().size());
  for (const auto& ids : trainer.orig_units()) {
    w.u64(ids.size());
    for (int id : ids) {
      w.i32(id);
    }
  }
  w.str(trainer.rng().serialize());

  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw std::runtime_error("cannot write " + path);
  }
  out.write(kMagic, sizeof(kMagic));
  std::uint32_t version = kVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  std::uint64_t size = w.buf.size();
  std::uint64_t checksum = fnv1a(w.buf);
  out.write(reinterpret_cast<const char*>(&size), sizeof(size));
  out.write(reinterpret_cast<const char*>(&checksum), sizeof(checksum));
  out.write(w.buf.data(), w.buf.size());
  if (!out) {
    throw std::runtime_error("write failed for " + path);
  }
}

namespace {

std::string read_payload(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw std::runtime_error("cannot open " + path);
  }
  char magic[8];
  std::uint32_t version;
  std::uint64_t size, checksum;
  if (!in.read(magic, sizeof(magic)) ||
      !in.read(reinterpret_cast<char*>(&version), sizeof(version)) ||
      !in.read(reinterpret_cast<char*>(&size), sizeof(size)) ||
      !in.read(reinterpret_cast<char*>(&checksum), sizeof(checksum))) {
    throw std::runtime_error("checkpoint truncated");
  }
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("not a checkpoint file");
  }
  if (version != kVersion) {
    throw std::runtime_error("unsupported checkpoint version");
  }
  std::string buf(size, '\0');
  if (!in.read(buf.data(), size)) {
    throw std::runtime_error("checkpoint truncated");
  }
  if (fnv1a(buf) != checksum) {
    throw std::runtime_error("checkpoint checksum mismatch");
  }
  return buf;
}

}  // namespace

TrainConfig checkpoint_config(const std::string& path) {
  std::string buf = read_payload(path);
  Reader r{buf};
  return read_config(r);
}

Trainer load_checkpoint(const std::string& path) {
  std::string buf = read_payload(path);
  Reader r{buf};
  TrainConfig cfg = read_config(r);
  Network net = read_network(r);

  Trainer trainer(std::move(net), cfg);

  GateState gs;
  std::uint64_t n = r.u64();
  gs.layers.resize(n);
  for (auto& gl : gs.layers) {
    gl.theta = r.vec();
    gl.theta_max = r.vec();
    gl.last_xi = r.vec();
    std::uint64_t na = r.u64();
    r.need(na);
    gl.alive.assign(buf.data() + r.pos, buf.data() + r.pos + na);
    r.pos += na;
  }
  trainer.gates() = std::move(gs);

  OptState os;
  os.t = r.i64();
  os.layers.resize(r.u64());
  for (auto& ol : os.layers) {
    ol.mw = r.mat();
    ol.vw = r.mat();
    ol.mb = r.vec();
    ol.vb = r.vec();
    ol.mt = r.vec();
    ol.vt = r.vec();
  }
  trainer.opt() = std::move(os);

  trainer.set_iteration(r.i64());
  trainer.set_initial_weights(r.u64());
  std::vector<std::vector<int>> orig(r.u64());
  for (auto& ids : orig) {
    ids.resize(r.u64());
    for (auto& id : ids) {
      id = r.i32();
    }
  }
  trainer.orig_units() = std::move(orig);
  trainer.rng().deserialize(r.str());
  return trainer;
}

void emit_metrics(const std::string& path,
                  const std::vector<MetricsRow>& rows) {
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("cannot write " + path);
  }
  out << "epoch,iteration,train_loss,eval_loss,accuracy,alive_units,"
         "prune_percent";
  if (!rows.empty()) {
    for (const auto& st : rows.front().layer_stats) {
      out << ",l" << st.layer << "_alive,l" << st.layer << "_theta_mean,l"
          << st.layer << "_theta_min,l" << st.layer << "_theta_max";
    }
  }
  out << "\n";
  out.precision(17);
  for (const auto& row : rows) {
    out << row.epoch << ',' << row.iteration << ',' << row.train_loss << ','
        << row.eval_loss << ',' << row.accuracy << ',' << row.alive_units
        << ',' << row.prune_percent;
    for (const auto& st : row.layer_stats) {
      out << ',' << st.alive << ',' << st.theta_mean << ',' << st.theta_min
          << ',' << st.theta_max;
    }
    out << "\n";
  }
  if (!out) {
    throw std::runtime_error("write failed for " + path);
  }
}

void emit_theta_trajectory(
    const std::string& path,
    const std::vector<std::vector<std::pair<UnitId, double>>>& snapshots,
    const std::vector<UnitId>& units) {
  std::ofstream out(path);
  if (!out) {
    throw std::runtime_error("cannot write " + path);
  }
  out << "epoch";
  for (const UnitId& u : units) {
    out << ",l" << u.layer << "_u" << u.unit;
  }
  out << "\n";
  out.precision(17);
  for (std::size_t e = 0; e < snapshots.size(); ++e) {
    out << (e + 1);
    for (const UnitId& u : units) {
      double theta = 0.0;  // pruned units read 0
      for (const auto& [id, th] : snapshots[e]) {
        if (id == u) {
          theta = th;
          break;
        }
      }
      out << ',' << theta;
    }
    out << "\n";
  }
  if (!out) {
    throw std::runtime_error("write failed for " + path);
  }
}

nlohmann::json config_to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["lambda"] = c.lambda;
  j["batch_size"] = c.batch_size;
  j["lr"] = c.lr;
  j["schedule"] = c.schedule == ScheduleKind::Adam           ? "adam"
                  : c.schedule == ScheduleKind::RobbinsMonro ? "robbins-monro"
                                                             : "constant";
  j["rm_tau"] = c.rm_tau;
  j["estimator"] = c.estimator == EstimatorKind::Taylor     ? "taylor"
                   : c.estimator == EstimatorKind::Concrete ? "concrete"
                   : c.estimator == EstimatorKind::Sampling ? "sampling"
                                                            : "hybrid";
  j["concrete_temperature"] = c.concrete_temperature;
  j["hybrid_top_k"] = c.hybrid_top_k;
  if (const auto* b = std::get_if<BetaPrior>(&c.prior)) {
    j["prior"] = {{"family", "beta"}, {"alpha", b->alpha}, {"beta", b->beta}};
  } else {
    j["prior"] = {{"family", "flattening"},
                  {"gamma", std::get<FlatteningPrior>(c.prior).gamma}};
  }
  j["eps1"] = c.clip.eps1;
  j["eps2"] = c.clip.eps2;
  j["theta0"] = c.theta0;
  j["theta_lo"] = c.theta_lo;
  j["theta_hi"] = c.theta_hi;
  j["theta_tol"] = c.theta_tol;
  j["theta_per"] = c.theta_per;
  j["drop_after"] = c.drop_after;
  j["phi_max"] = c.phi_max;
  j["grad_tol"] = c.grad_tol;
  j["epochs"] = c.epochs;
  j["fine_tune_epochs"] = c.fine_tune_epochs;
  j["fine_tune_lr"] = c.fine_tune_lr;
  j["input_threshold"] = c.input_threshold;
  j["seed"] = c.seed;
  return j;
}

TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) {
      field = j.at(key).get<std::decay_t<decltype(field)>>();
    }
  };
  get("lambda", c.lambda);
  get("batch_size", c.batch_size);
  get("lr", c.lr);
  if (j.contains("schedule")) {
    std::string s = j.at("schedule");
    if (s == "adam") {
      c.schedule = ScheduleKind::Adam;
    } else if (s == "robbins-monro") {
      c.schedule = ScheduleKind::RobbinsMonro;
    } else if (s == "constant") {
      c.schedule = ScheduleKind::Constant;
    } else {
      throw std::invalid_argument("unknown schedule: " + s);
    }
  }
  get("rm_tau", c.rm_tau);
  if (j.contains("estimator")) {
    std::string s = j.at("estimator");
    if (s == "taylor") {
      c.estimator = EstimatorKind::Taylor;
    } else if (s == "concrete") {
      c.estimator = EstimatorKind::Concrete;
    } else if (s == "sampling") {
      c.estimator = EstimatorKind::Sampling;
    } else if (s == "hybrid") {
      c.estimator = EstimatorKind::Hybrid;
    } else {
      throw std::invalid_argument("unknown estimator: " + s);
    }
  }
  get("concrete_temperature", c.concrete_temperature);
  get("hybrid_top_k", c.hybrid_top_k);
  if (j.contains("prior")) {
    const auto& p = j.at("prior");
    std::string fam = p.at("family");
    if (fam == "beta") {
      c.prior = BetaPrior{p.at("alpha").get<double>(),
                          p.at("beta").get<double>()};
    } else if (fam == "flattening") {
      c.prior = FlatteningPrior{p.at("gamma").get<double>()};
    } else {
      throw std::invalid_argument("unknown prior family: " + fam);
    }
  }
  get("eps1", c.clip.eps1);
  get("eps2", c.clip.eps2);
  get("theta0", c.theta0);
  get("theta_lo", c.theta_lo);
  get("theta_hi", c.theta_hi);
  get("theta_tol", c.theta_tol);
  get("theta_per", c.theta_per);
  get("drop_after", c.drop_after);
  get("phi_max", c.phi_max);
  get("grad_tol", c.grad_tol);
  get("epochs", c.epochs);
  get("fine_tune_epochs", c.fine_tune_epochs);
  get("fine_tune_lr", c.fine_tune_lr);
  get("input_threshold", c.input_threshold);
  get("seed", c.seed);
  return c;
}

}  // namespace sprune
