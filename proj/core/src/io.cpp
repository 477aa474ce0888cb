#include "mixedlrmoe/io.hpp"

#include <json.hpp>

#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace mixedlrmoe {

namespace {

using ordered_json = nlohmann::ordered_json;

// Shortest decimal representation that round-trips the exact double.
std::string format_double(double v) {
  char buf[40];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

bool parse_double(std::string_view s, double* out) {
  if (s.empty()) return false;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), *out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t pos = line.find(',', start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

// Column name f<k> marks the factor column of level k (1-based in files).
bool factor_level_of(const std::string& name, int* level) {
  if (name.size() < 2 || name[0] != 'f') return false;
  int value = 0;
  const auto res =
      std::from_chars(name.data() + 1, name.data() + name.size(), value);
  if (res.ec != std::errc() || res.ptr != name.data() + name.size()) {
    return false;
  }
  *level = value;
  return true;
}

// ---------------------------------------------------------------------------
// JSON helpers (archives, configs, sidecars)

ordered_json matrix_to_json(const Eigen::MatrixXd& m) {
  ordered_json rows = ordered_json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    ordered_json row = ordered_json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

Eigen::MatrixXd matrix_from_json(const ordered_json& j, Eigen::Index cols_hint,
                                 const std::string& what) {
  if (!j.is_array()) throw ParseError(what + ": expected an array of rows");
  const Eigen::Index rows = static_cast<Eigen::Index>(j.size());
  Eigen::Index cols = cols_hint;
  if (rows > 0) {
    if (!j[0].is_array()) throw ParseError(what + ": rows must be arrays");
    cols = static_cast<Eigen::Index>(j[0].size());
  }
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    if (!j[static_cast<std::size_t>(i)].is_array() ||
        static_cast<Eigen::Index>(j[static_cast<std::size_t>(i)].size()) != cols) {
      throw ParseError(what + ": ragged rows");
    }
    for (Eigen::Index c = 0; c < cols; ++c) {
      m(i, c) = j[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)]
                    .get<double>();
    }
  }
  return m;
}

ordered_json vector_to_json(const Eigen::VectorXd& v) {
  ordered_json arr = ordered_json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v(i));
  return arr;
}

Eigen::VectorXd vector_from_json(const ordered_json& j, const std::string& what) {
  if (!j.is_array()) throw ParseError(what + ": expected an array");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    v(i) = j[static_cast<std::size_t>(i)].get<double>();
  }
  return v;
}

// JSON has no literal for infinities; traces may legitimately hold -inf.
ordered_json encode_real(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

double decode_real(const ordered_json& j, const std::string& what) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  }
  throw ParseError(what + ": expected a real number");
}

ordered_json expert_to_json(const ExpertFamily& f) {
  ordered_json j;
  j["family"] = expert_family_name(f);
  std::visit(
      [&j](const auto& e) {
        using T = std::decay_t<decltype(e)>;
        if constexpr (std::is_same_v<T, GammaExpert>) {
          j["shape"] = e.shape;
          j["scale"] = e.scale;
        } else if constexpr (std::is_same_v<T, LogNormalExpert>) {
          j["meanlog"] = e.meanlog;
          j["sdlog"] = e.sdlog;
        } else {
          j["zero_prob"] = e.zero_prob;
          j["meanlog"] = e.meanlog;
          j["sdlog"] = e.sdlog;
        }
      },
      f);
  return j;
}

ExpertFamily expert_from_json(const ordered_json& j) {
  const ExpertTag tag = expert_tag_from_name(j.at("family").get<std::string>());
  switch (tag) {
    case ExpertTag::gamma:
      return GammaExpert(j.at("shape").get<double>(),
                         j.at("scale").get<double>());
    case ExpertTag::lognormal:
      return LogNormalExpert(j.at("meanlog").get<double>(),
                             j.at("sdlog").get<double>());
    case ExpertTag::zi_lognormal:
      return ZiLogNormalExpert(j.at("zero_prob").get<double>(),
                               j.at("meanlog").get<double>(),
                               j.at("sdlog").get<double>());
  }
  throw ParseError("expert_from_json: unreachable");
}

ordered_json model_to_json(const MixedLRMoEModel& m) {
  ordered_json j;
  j["num_classes"] = m.classes();
  j["factor_counts"] = m.design.factor_counts;
  j["alpha"] = matrix_to_json(m.alpha);
  j["beta"] = matrix_to_json(m.beta);
  ordered_json experts = ordered_json::array();
  for (const auto& row : m.experts) {
    ordered_json jrow = ordered_json::array();
    for (const ExpertFamily& f : row) jrow.push_back(expert_to_json(f));
    experts.push_back(std::move(jrow));
  }
  j["experts"] = std::move(experts);
  return j;
}

MixedLRMoEModel model_from_json(const ordered_json& j) {
  MixedLRMoEModel m;
  const int g = j.at("num_classes").get<int>();
  m.design.factor_counts = j.at("factor_counts").get<std::vector<int>>();
  m.alpha = matrix_from_json(j.at("alpha"), 0, "model.alpha");
  m.beta = matrix_from_json(j.at("beta"),
                            static_cast<Eigen::Index>(m.design.levels()),
                            "model.beta");
  const ordered_json& experts = j.at("experts");
  if (!experts.is_array() || static_cast<int>(experts.size()) != g) {
    throw ParseError("model.experts: expected one row per class");
  }
  for (const ordered_json& jrow : experts) {
    if (!jrow.is_array()) throw ParseError("model.experts: rows must be arrays");
    std::vector<ExpertFamily> row;
    for (const ordered_json& jf : jrow) row.push_back(expert_from_json(jf));
    m.experts.push_back(std::move(row));
  }
  if (m.alpha.rows() != g || m.beta.rows() != g) {
    throw ParseError("model: alpha/beta row counts disagree with num_classes");
  }
  m.validate();
  return m;
}

ordered_json posterior_to_json(const VariationalPosterior& p) {
  ordered_json j;
  ordered_json mu = ordered_json::array(), s2 = ordered_json::array();
  for (int l = 0; l < p.levels(); ++l) {
    mu.push_back(vector_to_json(p.mu[l]));
    s2.push_back(vector_to_json(p.sigma2[l]));
  }
  j["mu"] = std::move(mu);
  j["sigma2"] = std::move(s2);
  return j;
}

VariationalPosterior posterior_from_json(const ordered_json& j) {
  VariationalPosterior p;
  const ordered_json& mu = j.at("mu");
  const ordered_json& s2 = j.at("sigma2");
  if (!mu.is_array() || !s2.is_array() || mu.size() != s2.size()) {
    throw ParseError("posterior: mu and sigma2 must be matching arrays");
  }
  for (std::size_t l = 0; l < mu.size(); ++l) {
    p.mu.push_back(vector_from_json(mu[l], "posterior.mu"));
    p.sigma2.push_back(vector_from_json(s2[l], "posterior.sigma2"));
  }
  return p;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out << content;
  if (!out.good()) throw std::runtime_error("failed writing '" + path + "'");
}

ordered_json parse_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path + "'");
  try {
    return ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  }
}

void check_known_keys(const ordered_json& j,
                      const std::vector<std::string>& known,
                      const std::string& where) {
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const std::string& k : known) {
      if (item.key() == k) {
        ok = true;
        break;
      }
    }
    if (!ok) throw ParseError(where + ": unknown key '" + item.key() + "'");
  }
}

// ---------------------------------------------------------------------------
// CSV core

struct CsvLayout {
  std::size_t y_col = 0;
  std::vector<std::size_t> factor_cols;           // per level
  std::vector<std::size_t> covariate_cols;        // file order
  std::vector<std::string> covariate_names;
};

CsvLayout parse_header(const std::vector<std::string>& header,
                       const std::string& path) {
  CsvLayout layout;
  std::map<int, std::size_t> factor_map;
  bool have_y = false;
  for (std::size_t c = 0; c < header.size(); ++c) {
    const std::string& name = header[c];
    if (name == "y") {
      if (have_y) throw ParseError(path + ": duplicate 'y' column");
      have_y = true;
      layout.y_col = c;
      continue;
    }
    int level = 0;
    if (factor_level_of(name, &level)) {
      if (level < 1) {
        throw ParseError(path + ": factor columns are numbered from f1");
      }
      if (factor_map.count(level)) {
        throw ParseError(path + ": duplicate factor column '" + name + "'");
      }
      factor_map[level] = c;
      continue;
    }
    if (name.empty()) throw ParseError(path + ": empty column name");
    layout.covariate_cols.push_back(c);
    layout.covariate_names.push_back(name);
  }
  if (!have_y) throw ParseError(path + ": missing required 'y' column");
  int expected = 1;
  for (const auto& [level, col] : factor_map) {
    if (level != expected) {
      throw ParseError(path + ": factor columns must be contiguous f1..fL (missing f" +
                       std::to_string(expected) + ")");
    }
    layout.factor_cols.push_back(col);
    ++expected;
  }
  return layout;
}

TabularDataset read_dataset_impl(
    const std::string& path, const std::vector<std::string>* want_covariates,
    const std::vector<std::vector<std::string>>* train_factor_ids,
    Eigen::Index* unseen_rows) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open '" + path + "'");

  std::string line;
  if (!std::getline(in, line)) throw ParseError(path + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  CsvLayout layout = parse_header(split_csv_line(line), path);

  // Map the file's covariate columns onto the requested order, if any.
  std::vector<std::size_t> cov_order(layout.covariate_cols.size());
  std::vector<std::string> cov_names = layout.covariate_names;
  if (want_covariates) {
    cov_order.clear();
    cov_names = *want_covariates;
    for (const std::string& want : *want_covariates) {
      bool found = false;
      for (std::size_t k = 0; k < layout.covariate_names.size(); ++k) {
        if (layout.covariate_names[k] == want) {
          cov_order.push_back(layout.covariate_cols[k]);
          found = true;
          break;
        }
      }
      if (!found) {
        throw ParseError(path + ": missing covariate column '" + want +
                         "' required by the model archive");
      }
    }
  } else {
    cov_order = layout.covariate_cols;
  }

  const int levels = static_cast<int>(layout.factor_cols.size());
  if (train_factor_ids &&
      static_cast<int>(train_factor_ids->size()) != levels) {
    throw ParseError(path + ": file has " + std::to_string(levels) +
                     " factor level(s) but the model archive expects " +
                     std::to_string(train_factor_ids->size()));
  }

  TabularDataset out;
  out.covariate_names = cov_names;
  out.factor_ids.resize(static_cast<std::size_t>(levels));
  std::vector<std::unordered_map<std::string, int>> dict(
      static_cast<std::size_t>(levels));
  std::vector<int> train_sizes(static_cast<std::size_t>(levels), 0);
  if (train_factor_ids) {
    for (int l = 0; l < levels; ++l) {
      out.factor_ids[l] = (*train_factor_ids)[l];
      train_sizes[l] = static_cast<int>(out.factor_ids[l].size());
      for (int s = 0; s < train_sizes[l]; ++s) {
        dict[l].emplace(out.factor_ids[l][static_cast<std::size_t>(s)], s);
      }
    }
  }

  std::vector<double> x_vals, y_vals;
  std::vector<int> f_vals;
  std::vector<std::string> bad_lines;
  Eigen::Index n = 0, unseen = 0;
  const std::size_t width =
      1 + layout.covariate_cols.size() + layout.factor_cols.size();
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;  // tolerate a trailing blank line
    const std::vector<std::string> tok = split_csv_line(line);
    const auto reject = [&](const std::string& why) {
      if (bad_lines.size() < 10) {
        bad_lines.push_back("line " + std::to_string(line_no) + ": " + why);
      }
    };
    if (tok.size() != width) {
      reject("expected " + std::to_string(width) + " fields, got " +
             std::to_string(tok.size()));
      continue;
    }
    double y = 0.0;
    if (!parse_double(tok[layout.y_col], &y)) {
      reject("unparseable response '" + tok[layout.y_col] + "'");
      continue;
    }
    bool row_ok = true;
    std::vector<double> xs(cov_order.size());
    for (std::size_t k = 0; k < cov_order.size(); ++k) {
      if (!parse_double(tok[cov_order[k]], &xs[k])) {
        reject("unparseable covariate '" + tok[cov_order[k]] + "' in column '" +
               cov_names[k] + "'");
        row_ok = false;
        break;
      }
    }
    if (!row_ok) continue;
    std::vector<int> fs(static_cast<std::size_t>(levels));
    bool row_unseen = false;
    for (int l = 0; l < levels; ++l) {
      const std::string& id = tok[layout.factor_cols[static_cast<std::size_t>(l)]];
      if (id.empty()) {
        reject("empty factor id at level " + std::to_string(l + 1));
        row_ok = false;
        break;
      }
      auto it = dict[l].find(id);
      if (it == dict[l].end()) {
        const int idx = static_cast<int>(out.factor_ids[l].size());
        out.factor_ids[l].push_back(id);
        it = dict[l].emplace(id, idx).first;
      }
      if (train_factor_ids && it->second >= train_sizes[l]) row_unseen = true;
      fs[static_cast<std::size_t>(l)] = it->second;
    }
    if (!row_ok) continue;
    if (row_unseen) ++unseen;
    y_vals.push_back(y);
    for (double v : xs) x_vals.push_back(v);
    for (int v : fs) f_vals.push_back(v);
    ++n;
  }

  if (!bad_lines.empty()) {
    std::ostringstream msg;
    msg << path << ": " << bad_lines.size() << " unparseable row(s)";
    msg << " (showing up to 10):";
    for (const std::string& b : bad_lines) msg << "\n  " << b;
    throw ParseError(msg.str());
  }
  if (n == 0) throw ParseError(path + ": no data rows");

  const Eigen::Index p_dim = static_cast<Eigen::Index>(cov_order.size()) + 1;
  out.data.X.resize(n, p_dim);
  out.data.Y.resize(n, 1);
  out.data.factors.resize(n, levels);
  for (Eigen::Index i = 0; i < n; ++i) {
    out.data.X(i, 0) = 1.0;
    for (Eigen::Index k = 0; k + 1 < p_dim; ++k) {
      out.data.X(i, k + 1) =
          x_vals[static_cast<std::size_t>(i) * cov_order.size() +
                 static_cast<std::size_t>(k)];
    }
    out.data.Y(i, 0) = y_vals[static_cast<std::size_t>(i)];
    for (int l = 0; l < levels; ++l) {
      out.data.factors(i, l) =
          f_vals[static_cast<std::size_t>(i) * static_cast<std::size_t>(levels) +
                 static_cast<std::size_t>(l)];
    }
  }
  for (int l = 0; l < levels; ++l) {
    out.data.design.factor_counts.push_back(
        static_cast<int>(out.factor_ids[l].size()));
  }
  if (unseen_rows) *unseen_rows = unseen;
  try {
    out.data.validate();
  } catch (const std::invalid_argument& e) {
    throw ParseError(path + ": " + e.what());
  }
  return out;
}

}  // namespace

TabularDataset read_dataset_csv(const std::string& path) {
  return read_dataset_impl(path, nullptr, nullptr, nullptr);
}

TabularDataset read_dataset_csv(
    const std::string& path, const std::vector<std::string>& covariate_names,
    const std::vector<std::vector<std::string>>& train_factor_ids,
    Eigen::Index* unseen_rows) {
  return read_dataset_impl(path, &covariate_names, &train_factor_ids,
                           unseen_rows);
}

void write_dataset_csv(const std::string& path, const TabularDataset& tabular) {
  const Dataset& data = tabular.data;
  data.validate();
  if (data.response_dim() != 1) {
    throw std::invalid_argument(
        "write_dataset_csv: the tabular format carries a single response column");
  }
  if (static_cast<Eigen::Index>(tabular.covariate_names.size()) + 1 !=
      data.covariate_dim()) {
    throw std::invalid_argument(
        "write_dataset_csv: covariate names must cover every non-intercept column");
  }
  for (int l = 0; l < data.levels(); ++l) {
    if (static_cast<int>(tabular.factor_ids[static_cast<std::size_t>(l)].size()) !=
        data.design.factor_counts[l]) {
      throw std::invalid_argument(
          "write_dataset_csv: factor id dictionary does not match the design");
    }
  }

  std::ostringstream os;
  for (const std::string& name : tabular.covariate_names) os << name << ',';
  os << 'y';
  for (int l = 0; l < data.levels(); ++l) os << ",f" << (l + 1);
  os << '\n';
  for (Eigen::Index i = 0; i < data.n(); ++i) {
    for (Eigen::Index p = 1; p < data.covariate_dim(); ++p) {
      os << format_double(data.X(i, p)) << ',';
    }
    os << format_double(data.Y(i, 0));
    for (int l = 0; l < data.levels(); ++l) {
      os << ','
         << tabular.factor_ids[static_cast<std::size_t>(l)]
                              [static_cast<std::size_t>(data.factors(i, l))];
    }
    os << '\n';
  }
  write_text_file(path, os.str());
}

void save_archive(const std::string& path, const ModelArchive& archive) {
  archive.model.validate();
  archive.posterior.validate(archive.model.design);
  if (static_cast<Eigen::Index>(archive.covariate_names.size()) + 1 !=
      archive.model.covariate_dim()) {
    throw std::invalid_argument(
        "save_archive: covariate names must cover every non-intercept column");
  }
  if (static_cast<int>(archive.factor_ids.size()) != archive.model.levels()) {
    throw std::invalid_argument(
        "save_archive: factor dictionaries must cover every level");
  }
  for (int l = 0; l < archive.model.levels(); ++l) {
    if (static_cast<int>(archive.factor_ids[static_cast<std::size_t>(l)].size()) !=
        archive.model.design.factor_counts[l]) {
      throw std::invalid_argument(
          "save_archive: factor dictionary size does not match the design");
    }
  }

  ordered_json j;
  j["schema_version"] = archive.schema_version;
  j["model"] = model_to_json(archive.model);
  j["covariates"] = archive.covariate_names;
  j["factor_ids"] = archive.factor_ids;
  j["posterior"] = posterior_to_json(archive.posterior);
  ordered_json report;
  ordered_json trace = ordered_json::array(), pre = ordered_json::array();
  for (double v : archive.report.elbo_trace) trace.push_back(encode_real(v));
  for (double v : archive.report.elbo_pre_trace) pre.push_back(encode_real(v));
  report["elbo_trace"] = std::move(trace);
  report["elbo_pre_trace"] = std::move(pre);
  report["converged"] = archive.report.converged;
  report["stop_reason"] = archive.report.stop_reason;
  report["n_params"] = archive.report.n_params;
  report["responsibility_mass"] =
      vector_to_json(archive.report.responsibility_mass);
  report["warnings"] = archive.report.warnings;
  report["final_elbo_seed"] = archive.report.final_elbo_seed;
  j["report"] = std::move(report);
  ordered_json fitj;
  fitj["seed"] = archive.fit_seed;
  fitj["mc_samples"] = archive.mc_samples;
  j["fit"] = std::move(fitj);

  write_text_file(path, j.dump(2) + "\n");
}

ModelArchive load_archive(const std::string& path) {
  const ordered_json j = parse_json_file(path);
  try {
    ModelArchive archive;
    archive.schema_version = j.at("schema_version").get<int>();
    if (archive.schema_version != 1) {
      throw ParseError(path + ": unsupported archive schema version " +
                       std::to_string(archive.schema_version));
    }
    archive.model = model_from_json(j.at("model"));
    archive.covariate_names =
        j.at("covariates").get<std::vector<std::string>>();
    archive.factor_ids =
        j.at("factor_ids").get<std::vector<std::vector<std::string>>>();
    archive.posterior = posterior_from_json(j.at("posterior"));
    const ordered_json& report = j.at("report");
    for (const ordered_json& v : report.at("elbo_trace")) {
      archive.report.elbo_trace.push_back(decode_real(v, "report.elbo_trace"));
    }
    for (const ordered_json& v : report.at("elbo_pre_trace")) {
      archive.report.elbo_pre_trace.push_back(
          decode_real(v, "report.elbo_pre_trace"));
    }
    archive.report.converged = report.at("converged").get<bool>();
    archive.report.stop_reason = report.at("stop_reason").get<std::string>();
    archive.report.n_params = report.at("n_params").get<int>();
    archive.report.responsibility_mass =
        vector_from_json(report.at("responsibility_mass"),
                         "report.responsibility_mass");
    archive.report.warnings =
        report.at("warnings").get<std::vector<std::string>>();
    archive.report.final_elbo_seed =
        report.at("final_elbo_seed").get<std::uint64_t>();
    archive.fit_seed = j.at("fit").at("seed").get<std::uint64_t>();
    archive.mc_samples = j.at("fit").at("mc_samples").get<int>();

    archive.posterior.validate(archive.model.design);
    if (static_cast<Eigen::Index>(archive.covariate_names.size()) + 1 !=
        archive.model.covariate_dim()) {
      throw ParseError(path + ": covariate names do not match alpha's columns");
    }
    if (static_cast<int>(archive.factor_ids.size()) != archive.model.levels()) {
      throw ParseError(path + ": factor dictionaries do not cover every level");
    }
    for (int l = 0; l < archive.model.levels(); ++l) {
      if (static_cast<int>(
              archive.factor_ids[static_cast<std::size_t>(l)].size()) !=
          archive.model.design.factor_counts[l]) {
        throw ParseError(path + ": factor dictionary size mismatch at level " +
                         std::to_string(l + 1));
      }
    }
    return archive;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw ParseError(path + ": " + e.what());
  }
}

FitConfig read_fit_config(const std::string& path) {
  const ordered_json j = parse_json_file(path);
  FitConfig config;
  try {
    check_known_keys(j,
                     {"schema_version", "num_classes", "experts", "mc_samples",
                      "max_ecm_iters", "elbo_rel_tol", "elbo_window",
                      "irls_max_iters", "irls_grad_tol", "vi_max_iters",
                      "hessian_ridge", "seed"},
                     path);
    if (j.contains("schema_version") &&
        j.at("schema_version").get<int>() != 1) {
      throw ParseError(path + ": unsupported fit config schema version");
    }
    config.num_classes = j.at("num_classes").get<int>();
    const ordered_json& experts = j.at("experts");
    config.expert_tags.clear();
    if (experts.is_string()) {
      config.expert_tags.push_back(
          {expert_tag_from_name(experts.get<std::string>())});
    } else if (experts.is_array() && !experts.empty() &&
               experts[0].is_string()) {
      // One family name per class.
      for (const ordered_json& e : experts) {
        config.expert_tags.push_back(
            {expert_tag_from_name(e.get<std::string>())});
      }
    } else if (experts.is_array()) {
      // Full grid: per class, per response dimension.
      for (const ordered_json& row : experts) {
        std::vector<ExpertTag> tags;
        for (const ordered_json& e : row) {
          tags.push_back(expert_tag_from_name(e.get<std::string>()));
        }
        config.expert_tags.push_back(std::move(tags));
      }
    } else {
      throw ParseError(path + ": 'experts' must be a family name or an array");
    }
    if (j.contains("mc_samples")) config.mc_samples = j.at("mc_samples").get<int>();
    if (j.contains("max_ecm_iters")) {
      config.max_ecm_iters = j.at("max_ecm_iters").get<int>();
    }
    if (j.contains("elbo_rel_tol")) {
      config.elbo_rel_tol = j.at("elbo_rel_tol").get<double>();
    }
    if (j.contains("elbo_window")) config.elbo_window = j.at("elbo_window").get<int>();
    if (j.contains("irls_max_iters")) {
      config.irls_max_iters = j.at("irls_max_iters").get<int>();
    }
    if (j.contains("irls_grad_tol")) {
      config.irls_grad_tol = j.at("irls_grad_tol").get<double>();
    }
    if (j.contains("vi_max_iters")) config.vi_max_iters = j.at("vi_max_iters").get<int>();
    if (j.contains("hessian_ridge")) {
      config.hessian_ridge = j.at("hessian_ridge").get<double>();
    }
    if (j.contains("seed")) config.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw ParseError(path + ": " + e.what());
  }
  return config;
}

SimSpec read_sim_spec(const std::string& path) {
  const ordered_json j = parse_json_file(path);
  SimSpec spec;
  try {
    check_known_keys(
        j, {"schema_version", "n", "seed", "assignment", "covariates", "model"},
        path);
    if (j.contains("schema_version") &&
        j.at("schema_version").get<int>() != 1) {
      throw ParseError(path + ": unsupported simulation spec schema version");
    }
    spec.n = j.at("n").get<int>();
    if (j.contains("seed")) spec.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("assignment")) {
      const std::string a = j.at("assignment").get<std::string>();
      if (a == "uniform") {
        spec.assignment = SimSpec::Assignment::uniform;
      } else if (a == "balanced") {
        spec.assignment = SimSpec::Assignment::balanced;
      } else {
        throw ParseError(path + ": assignment must be 'uniform' or 'balanced'");
      }
    }
    if (j.contains("covariates")) {
      for (const ordered_json& c : j.at("covariates")) {
        check_known_keys(c, {"name", "type", "p", "mean", "sd", "lo", "hi"},
                         path + " covariate");
        CovariateSpec cov;
        if (c.contains("name")) cov.name = c.at("name").get<std::string>();
        const std::string type = c.at("type").get<std::string>();
        if (type == "bernoulli") {
          cov.kind = CovariateSpec::Kind::bernoulli;
          cov.a = c.at("p").get<double>();
        } else if (type == "normal") {
          cov.kind = CovariateSpec::Kind::normal;
          cov.a = c.at("mean").get<double>();
          cov.b = c.at("sd").get<double>();
        } else if (type == "uniform") {
          cov.kind = CovariateSpec::Kind::uniform;
          cov.a = c.at("lo").get<double>();
          cov.b = c.at("hi").get<double>();
        } else {
          throw ParseError(path + ": unknown covariate type '" + type + "'");
        }
        spec.covariates.push_back(std::move(cov));
      }
    }
    spec.model = model_from_json(j.at("model"));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw ParseError(path + ": " + e.what());
  }
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw ParseError(path + ": " + e.what());
  }
  return spec;
}

void write_truth_sidecar(const std::string& path, const SimSpec& spec,
                         const SimulationOutput& out) {
  ordered_json j;
  j["schema_version"] = 1;
  j["seed"] = spec.seed;
  j["assignment"] = spec.assignment == SimSpec::Assignment::balanced
                        ? "balanced"
                        : "uniform";
  j["model"] = model_to_json(spec.model);
  ordered_json effects = ordered_json::array();
  for (const Eigen::VectorXd& w : out.effects.w) {
    effects.push_back(vector_to_json(w));
  }
  j["true_effects"] = std::move(effects);
  ordered_json labels = ordered_json::array();
  for (Eigen::Index i = 0; i < out.labels.size(); ++i) {
    labels.push_back(out.labels(i) + 1);  // classes are 1-based in files
  }
  j["true_labels"] = std::move(labels);
  write_text_file(path, j.dump(2) + "\n");
}

}  // namespace mixedlrmoe
