#include "advg/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "advg/errors.hpp"
#include "advg/io_util.hpp"
#include "advg/rng.hpp"

namespace advg {

SparseProjection SparseProjection::init(std::uint32_t input_dim,
                                        std::uint32_t output_dim,
                                        std::uint64_t seed) {
  if (input_dim < 1 || output_dim < 1)
    throw ContractError("SparseProjection::init: dimensions must be >= 1");
  SparseProjection r;
  r.input_dim = input_dim;
  r.output_dim = output_dim;
  r.seed = seed;
  r.row_ptr.assign(input_dim + 1, 0);
  const double q = 1.0 / (2.0 * std::sqrt(static_cast<double>(input_dim)));
  // Per-row streams so rows can be regenerated independently.
  for (std::uint32_t d = 0; d < input_dim; ++d) {
    Rng rng(derive_seed(seed, "proj_row", d));
    for (std::uint32_t p = 0; p < output_dim; ++p) {
      const double u = rng.uniform01();
      if (u < q) {
        r.col.push_back(p);
        r.sign.push_back(1);
      } else if (u < 2.0 * q) {
        r.col.push_back(p);
        r.sign.push_back(-1);
      }
    }
    r.row_ptr[d + 1] = static_cast<std::uint32_t>(r.col.size());
  }
  return r;
}

void SparseProjection::apply(const SparseBinaryVector& x, double* out) const {
  if (x.dim != input_dim)
    throw ContractError("projection: input dimension mismatch");
  std::fill(out, out + output_dim, 0.0);
  for (const std::uint32_t d : x.on)
    for (std::uint32_t k = row_ptr[d]; k < row_ptr[d + 1]; ++k)
      out[col[k]] += static_cast<double>(sign[k]);
}

void SparseProjection::apply_dense(const double* x, double* out) const {
  std::fill(out, out + output_dim, 0.0);
  for (std::uint32_t d = 0; d < input_dim; ++d) {
    const double v = x[d];
    if (v == 0.0) continue;
    for (std::uint32_t k = row_ptr[d]; k < row_ptr[d + 1]; ++k)
      out[col[k]] += static_cast<double>(sign[k]) * v;
  }
}

Normalizer Normalizer::fit(const double* X, std::size_t n, std::size_t p) {
  if (n == 0) throw ContractError("Normalizer::fit: empty sample");
  Normalizer norm;
  norm.mean.assign(p, 0.0);
  norm.stddev.assign(p, 0.0);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t j = 0; j < p; ++j) norm.mean[j] += X[s * p + j];
  for (std::size_t j = 0; j < p; ++j) norm.mean[j] /= static_cast<double>(n);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t j = 0; j < p; ++j) {
      const double d = X[s * p + j] - norm.mean[j];
      norm.stddev[j] += d * d;
    }
  for (std::size_t j = 0; j < p; ++j) {
    norm.stddev[j] = std::sqrt(norm.stddev[j] / static_cast<double>(n));
    if (norm.stddev[j] < kStddevFloor) norm.stddev[j] = kStddevFloor;
  }
  return norm;
}

void Normalizer::apply(double* v) const {
  for (std::size_t j = 0; j < mean.size(); ++j) v[j] = (v[j] - mean[j]) / stddev[j];
}

void MlpModel::check_shapes() const {
  if (layers.size() != hidden_count + 1)
    throw ContractError("model: layer count does not match hidden_count");
  std::uint32_t expect_in = projected_dim();
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& l = layers[k];
    const std::uint32_t expect_out = k + 1 == layers.size() ? kClasses : hidden_dim;
    if (l.cols != expect_in || l.rows != expect_out ||
        l.W.size() != static_cast<std::size_t>(l.rows) * l.cols ||
        l.b.size() != l.rows)
      throw ContractError("model: layer shape chain is broken");
    expect_in = l.rows;
  }
  if (normalizer.mean.size() != projected_dim() ||
      normalizer.stddev.size() != projected_dim())
    throw ContractError("model: normalizer size mismatch");
  if (!(temperature > 0.0)) throw ContractError("model: temperature must be positive");
}

std::array<double, 2> softmax2(const std::array<double, 2>& z, double temperature) {
  if (!(temperature > 0.0)) throw ContractError("softmax2: temperature must be positive");
  const double s0 = z[0] / temperature, s1 = z[1] / temperature;
  const double m = std::max(s0, s1);
  const double e0 = std::exp(s0 - m), e1 = std::exp(s1 - m);
  const double sum = e0 + e1;
  return {e0 / sum, e1 / sum};
}

namespace {

struct ForwardState {
  std::vector<std::vector<double>> pre;   // pre-activation per hidden layer
  std::vector<std::vector<double>> act;   // act[0] = v, act[k+1] = relu(pre[k])
  std::array<double, 2> logits{};
};

ForwardState run_layers(const MlpModel& model, const double* v) {
  ForwardState st;
  const std::size_t H = model.hidden_count;
  st.act.resize(H + 1);
  st.pre.resize(H);
  st.act[0].assign(v, v + model.projected_dim());
  for (std::size_t k = 0; k < H; ++k) {
    const auto& l = model.layers[k];
    st.pre[k].resize(l.rows);
    kernels::affine(l.W.data(), l.b.data(), st.act[k].data(), st.pre[k].data(),
                    l.rows, l.cols);
    st.act[k + 1] = st.pre[k];
    kernels::relu_inplace(st.act[k + 1].data(), st.act[k + 1].size());
  }
  const auto& out = model.layers[H];
  double logits[2];
  kernels::affine(out.W.data(), out.b.data(), st.act[H].data(), logits, out.rows,
                  out.cols);
  st.logits = {logits[0], logits[1]};
  return st;
}

double effective_temperature(const MlpModel& model, double override_t) {
  return override_t > 0.0 ? override_t : model.temperature;
}

}  // namespace

Prediction forward_projected(const MlpModel& model, const double* v,
                             double temperature_override) {
  const ForwardState st = run_layers(model, v);
  Prediction p;
  p.logits = st.logits;
  p.probs = softmax2(st.logits, effective_temperature(model, temperature_override));
  return p;
}

Prediction forward(const MlpModel& model, const SparseBinaryVector& x,
                   double temperature_override) {
  std::vector<double> v(model.projected_dim());
  model.projection.apply(x, v.data());
  model.normalizer.apply(v.data());
  return forward_projected(model, v.data(), temperature_override);
}

Prediction forward_dense(const MlpModel& model, const double* x,
                         double temperature_override) {
  std::vector<double> v(model.projected_dim());
  model.projection.apply_dense(x, v.data());
  model.normalizer.apply(v.data());
  return forward_projected(model, v.data(), temperature_override);
}

namespace {

// d probs / d v as 2 x P, from saved activations.
std::vector<double> jacobian_from_state(const MlpModel& model,
                                        const ForwardState& st, double T) {
  const std::size_t P = model.projected_dim();
  const std::size_t H = model.hidden_count;

  // d logits_i / d v via one backward pass per class.
  std::vector<double> jz(2 * P);
  std::vector<double> g, next;
  for (int i = 0; i < 2; ++i) {
    const auto& out = model.layers[H];
    g.assign(out.W.begin() + static_cast<std::ptrdiff_t>(i * out.cols),
             out.W.begin() + static_cast<std::ptrdiff_t>((i + 1) * out.cols));
    for (std::size_t k = H; k-- > 0;) {
      for (std::size_t u = 0; u < g.size(); ++u)
        if (st.pre[k][u] <= 0.0) g[u] = 0.0;
      const auto& l = model.layers[k];
      next.assign(l.cols, 0.0);
      for (std::size_t r = 0; r < l.rows; ++r) {
        const double gr = g[r];
        if (gr == 0.0) continue;
        const double* wr = l.W.data() + r * l.cols;
        for (std::size_t c = 0; c < l.cols; ++c) next[c] += gr * wr[c];
      }
      g.swap(next);
    }
    std::copy(g.begin(), g.end(), jz.begin() + static_cast<std::ptrdiff_t>(i * P));
  }

  // Chain through the temperature softmax: dp_i/dz_k = (1/T) p_i (delta - p_k).
  const auto p = softmax2(st.logits, T);
  std::vector<double> jp(2 * P);
  for (int i = 0; i < 2; ++i) {
    const double s_ii = p[static_cast<std::size_t>(i)] *
                        (1.0 - p[static_cast<std::size_t>(i)]) / T;
    const double s_io = -p[static_cast<std::size_t>(i)] *
                        p[static_cast<std::size_t>(1 - i)] / T;
    for (std::size_t j = 0; j < P; ++j)
      jp[static_cast<std::size_t>(i) * P + j] =
          s_ii * jz[static_cast<std::size_t>(i) * P + j] +
          s_io * jz[static_cast<std::size_t>(1 - i) * P + j];
  }
  return jp;
}

}  // namespace

std::vector<double> jacobian_projected(const MlpModel& model,
                                       const SparseBinaryVector& x,
                                       double temperature_override) {
  std::vector<double> v(model.projected_dim());
  model.projection.apply(x, v.data());
  model.normalizer.apply(v.data());
  const ForwardState st = run_layers(model, v.data());
  return jacobian_from_state(model, st,
                             effective_temperature(model, temperature_override));
}

std::vector<double> jacobian_original(const MlpModel& model,
                                      const SparseBinaryVector& x,
                                      double temperature_override) {
  const std::vector<double> jp = jacobian_projected(model, x, temperature_override);
  const std::size_t P = model.projected_dim();
  const std::size_t D = model.input_dim();

  // Fold in 1/stddev once, then push each projection row through.
  std::vector<double> scaled(2 * P);
  for (int i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < P; ++j)
      scaled[static_cast<std::size_t>(i) * P + j] =
          jp[static_cast<std::size_t>(i) * P + j] / model.normalizer.stddev[j];

  std::vector<double> jo(2 * D, 0.0);
  const auto& proj = model.projection;
  for (std::size_t d = 0; d < D; ++d) {
    double acc0 = 0.0, acc1 = 0.0;
    for (std::uint32_t k = proj.row_ptr[d]; k < proj.row_ptr[d + 1]; ++k) {
      const double s = static_cast<double>(proj.sign[k]);
      acc0 += s * scaled[proj.col[k]];
      acc1 += s * scaled[P + proj.col[k]];
    }
    jo[d] = acc0;
    jo[D + d] = acc1;
  }
  return jo;
}

// --- serialization ---------------------------------------------------------

namespace {

constexpr const char* kModelHeader = "advgauntlet-model v1";
constexpr const char* kModelTrailer = "end advgauntlet-model";
constexpr const char* kEnsembleHeader = "advgauntlet-ensemble v1";
constexpr const char* kEnsembleTrailer = "end advgauntlet-ensemble";

void append_matrix(std::string& out, const char* name, std::size_t rows,
                   std::size_t cols, const double* data) {
  out += "matrix ";
  out += name;
  out += ' ';
  out += std::to_string(rows);
  out += ' ';
  out += std::to_string(cols);
  out += '\n';
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      if (c) out += ' ';
      out += fmt_double(data[r * cols + c]);
    }
    out += '\n';
  }
}

// Line-oriented cursor over the serialized text.
struct LineReader {
  const std::string& text;
  const std::string origin;
  std::size_t pos = 0;
  std::size_t line_no = 0;

  bool next(std::string_view& line) {
    while (pos < text.size()) {
      std::size_t end = text.find('\n', pos);
      if (end == std::string::npos) end = text.size();
      line = std::string_view(text).substr(pos, end - pos);
      pos = end + 1;
      ++line_no;
      if (!line.empty()) return true;
    }
    return false;
  }

  std::string_view expect_line(const char* what) {
    std::string_view line;
    if (!next(line)) throw ParseError(origin, line_no, std::string("truncated file, expected ") + what);
    return line;
  }
};

std::vector<double> parse_row(LineReader& rd, std::size_t count) {
  const std::string_view line = rd.expect_line("matrix row");
  std::vector<double> row;
  row.reserve(count);
  const char* p = line.data();
  const char* end = line.data() + line.size();
  while (p < end) {
    char* after = nullptr;
    const double v = std::strtod(p, &after);
    if (after == p) throw ParseError(rd.origin, rd.line_no, "bad matrix entry");
    if (!std::isfinite(v))
      throw ParseError(rd.origin, rd.line_no, "non-finite parameter in model file");
    row.push_back(v);
    p = after;
    while (p < end && *p == ' ') ++p;
  }
  if (row.size() != count)
    throw ParseError(rd.origin, rd.line_no, "matrix row has wrong length");
  return row;
}

struct MatrixBlock {
  std::string name;
  std::size_t rows = 0, cols = 0;
  std::vector<double> data;
};

MatrixBlock parse_matrix(LineReader& rd, const std::string& expect_name) {
  const std::string_view head = rd.expect_line("matrix block");
  const auto fields = split(head, ' ');
  if (fields.size() != 4 || fields[0] != "matrix")
    throw ParseError(rd.origin, rd.line_no, "expected 'matrix <name> <rows> <cols>'");
  MatrixBlock m;
  m.name = fields[1];
  if (m.name != expect_name)
    throw ParseError(rd.origin, rd.line_no,
                     "expected matrix '" + expect_name + "', found '" + m.name + "'");
  m.rows = static_cast<std::size_t>(parse_int(fields[2]));
  m.cols = static_cast<std::size_t>(parse_int(fields[3]));
  m.data.reserve(m.rows * m.cols);
  for (std::size_t r = 0; r < m.rows; ++r) {
    const auto row = parse_row(rd, m.cols);
    m.data.insert(m.data.end(), row.begin(), row.end());
  }
  return m;
}

}  // namespace

std::string model_to_text(const MlpModel& model) {
  model.check_shapes();
  std::string out;
  out.reserve(1 << 20);
  out += kModelHeader;
  out += '\n';
  out += "meta input_dim " + std::to_string(model.input_dim()) + "\n";
  out += "meta projected_dim " + std::to_string(model.projected_dim()) + "\n";
  out += "meta hidden_count " + std::to_string(model.hidden_count) + "\n";
  out += "meta hidden_dim " + std::to_string(model.hidden_dim) + "\n";
  out += "meta classes 2\n";
  out += "meta temperature " + fmt_double(model.temperature) + "\n";
  out += "meta train_seed " + std::to_string(model.train_seed) + "\n";
  out += "meta defense " + model.defense + "\n";
  out += "meta projection_seed " + std::to_string(model.projection.seed) + "\n";

  // Projection written densely, row-major, entries in {-1, 0, 1}.
  const auto& proj = model.projection;
  out += "matrix projection " + std::to_string(proj.input_dim) + " " +
         std::to_string(proj.output_dim) + "\n";
  std::vector<int> dense_row(proj.output_dim);
  for (std::uint32_t d = 0; d < proj.input_dim; ++d) {
    std::fill(dense_row.begin(), dense_row.end(), 0);
    for (std::uint32_t k = proj.row_ptr[d]; k < proj.row_ptr[d + 1]; ++k)
      dense_row[proj.col[k]] = proj.sign[k];
    for (std::uint32_t p = 0; p < proj.output_dim; ++p) {
      if (p) out += ' ';
      out += std::to_string(dense_row[p]);
    }
    out += '\n';
  }

  append_matrix(out, "normalizer_mean", 1, model.normalizer.mean.size(),
                model.normalizer.mean.data());
  append_matrix(out, "normalizer_stddev", 1, model.normalizer.stddev.size(),
                model.normalizer.stddev.data());
  for (std::size_t k = 0; k < model.layers.size(); ++k) {
    const auto& l = model.layers[k];
    const std::string wk = "W" + std::to_string(k);
    const std::string bk = "b" + std::to_string(k);
    append_matrix(out, wk.c_str(), l.rows, l.cols, l.W.data());
    append_matrix(out, bk.c_str(), 1, l.b.size(), l.b.data());
  }
  out += kModelTrailer;
  out += '\n';
  return out;
}

namespace {

MlpModel model_from_reader(LineReader& rd) {
  if (rd.expect_line("model header") != kModelHeader)
    throw ParseError(rd.origin, rd.line_no, "unsupported model file version");

  MlpModel model;
  std::uint32_t input_dim = 0, projected_dim = 0;
  std::uint64_t projection_seed = 0;

  // Metadata block, then the fixed matrix sequence.
  std::string_view line;
  for (;;) {
    const std::size_t before = rd.pos;
    line = rd.expect_line("metadata or matrix block");
    if (line.rfind("meta ", 0) != 0) {
      rd.pos = before;  // rewind, this is the first matrix line
      --rd.line_no;
      break;
    }
    const auto fields = split(line, ' ');
    if (fields.size() < 3) throw ParseError(rd.origin, rd.line_no, "bad meta line");
    const std::string& key = fields[1];
    const std::string value = std::string(line.substr(5 + key.size() + 1));
    if (key == "input_dim") input_dim = static_cast<std::uint32_t>(parse_int(value));
    else if (key == "projected_dim") projected_dim = static_cast<std::uint32_t>(parse_int(value));
    else if (key == "hidden_count") model.hidden_count = static_cast<std::uint32_t>(parse_int(value));
    else if (key == "hidden_dim") model.hidden_dim = static_cast<std::uint32_t>(parse_int(value));
    else if (key == "classes") {
      if (parse_int(value) != 2)
        throw ParseError(rd.origin, rd.line_no, "only two-class models are supported");
    } else if (key == "temperature") model.temperature = parse_double(value);
    else if (key == "train_seed") model.train_seed = parse_uint(value);
    else if (key == "defense") model.defense = value;
    else if (key == "projection_seed") projection_seed = parse_uint(value);
    else throw ParseError(rd.origin, rd.line_no, "unknown meta key '" + key + "'");
  }

  const MatrixBlock proj = parse_matrix(rd, "projection");
  if (proj.rows != input_dim || proj.cols != projected_dim)
    throw ParseError(rd.origin, rd.line_no, "projection shape disagrees with metadata");
  auto& sp = model.projection;
  sp.input_dim = input_dim;
  sp.output_dim = projected_dim;
  sp.seed = projection_seed;
  sp.row_ptr.assign(input_dim + 1, 0);
  for (std::size_t d = 0; d < proj.rows; ++d) {
    for (std::size_t p = 0; p < proj.cols; ++p) {
      const double e = proj.data[d * proj.cols + p];
      if (e == 0.0) continue;
      if (e != 1.0 && e != -1.0)
        throw ParseError(rd.origin, rd.line_no, "projection entries must be -1, 0 or 1");
      sp.col.push_back(static_cast<std::uint32_t>(p));
      sp.sign.push_back(e > 0 ? 1 : -1);
    }
    sp.row_ptr[d + 1] = static_cast<std::uint32_t>(sp.col.size());
  }

  const MatrixBlock mean = parse_matrix(rd, "normalizer_mean");
  const MatrixBlock stddev = parse_matrix(rd, "normalizer_stddev");
  if (mean.cols != projected_dim || stddev.cols != projected_dim)
    throw ParseError(rd.origin, rd.line_no, "normalizer shape disagrees with metadata");
  model.normalizer.mean = mean.data;
  model.normalizer.stddev = stddev.data;

  for (std::size_t k = 0; k <= model.hidden_count; ++k) {
    const MatrixBlock w = parse_matrix(rd, "W" + std::to_string(k));
    const MatrixBlock b = parse_matrix(rd, "b" + std::to_string(k));
    DenseLayer l;
    l.rows = static_cast<std::uint32_t>(w.rows);
    l.cols = static_cast<std::uint32_t>(w.cols);
    l.W = w.data;
    l.b = b.data;
    if (b.cols != w.rows)
      throw ParseError(rd.origin, rd.line_no, "bias length disagrees with weight rows");
    model.layers.push_back(std::move(l));
  }

  if (rd.expect_line("model trailer") != kModelTrailer)
    throw ParseError(rd.origin, rd.line_no, "missing model trailer (truncated file?)");
  model.check_shapes();
  return model;
}

}  // namespace

MlpModel model_from_text(const std::string& text, const std::string& origin) {
  LineReader rd{text, origin};
  return model_from_reader(rd);
}

void save_model(const MlpModel& model, const std::filesystem::path& path) {
  write_text_file(path, model_to_text(model));
}

MlpModel load_model(const std::filesystem::path& path) {
  return model_from_text(read_text_file(path), path.string());
}

void save_ensemble(std::span<const MlpModel> members, const std::filesystem::path& path) {
  if (members.empty()) throw ContractError("save_ensemble: empty member list");
  std::string out;
  out += kEnsembleHeader;
  out += '\n';
  out += "count " + std::to_string(members.size()) + "\n";
  for (const auto& m : members) out += model_to_text(m);
  out += kEnsembleTrailer;
  out += '\n';
  write_text_file(path, out);
}

std::vector<MlpModel> load_ensemble(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  LineReader rd{text, path.string()};
  if (rd.expect_line("ensemble header") != kEnsembleHeader)
    throw ParseError(path.string(), rd.line_no, "unsupported ensemble file version");
  const auto count_line = rd.expect_line("ensemble count");
  const auto fields = split(count_line, ' ');
  if (fields.size() != 2 || fields[0] != "count")
    throw ParseError(path.string(), rd.line_no, "expected 'count <E>'");
  const auto count = static_cast<std::size_t>(parse_int(fields[1]));
  std::vector<MlpModel> members;
  members.reserve(count);
  for (std::size_t i = 0; i < count; ++i) members.push_back(model_from_reader(rd));
  if (rd.expect_line("ensemble trailer") != kEnsembleTrailer)
    throw ParseError(path.string(), rd.line_no, "missing ensemble trailer");
  return members;
}

std::vector<MlpModel> load_target(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  const std::size_t eol = text.find('\n');
  const std::string first = text.substr(0, eol);
  if (first == kModelHeader) {
    std::vector<MlpModel> v;
    v.push_back(model_from_text(text, path.string()));
    return v;
  }
  if (first == kEnsembleHeader) return load_ensemble(path);
  throw ParseError(path.string(), 1, "not a model or ensemble file");
}

}  // namespace advg
