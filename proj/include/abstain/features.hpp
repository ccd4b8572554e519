#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "abstain/errors.hpp"
#include "abstain/trialstore.hpp"

// Item covariates: multi-seed difficulty, retrieval similarity and
// embedding principal components.
namespace abstain::features {

struct DifficultyScore {
  std::string item_id;
  int n_seeds = 0;
  int n_correct = 0;
  double score = 0;  // n_correct / n_seeds
};

// Proportion of runs in which each item was answered correctly. Every item
// must appear in every run; a repeated item within a run is an error.
inline std::vector<DifficultyScore> difficulty(const std::vector<PhaseRun>& runs) {
  if (runs.empty()) throw DomainError("difficulty: no runs");
  std::map<std::string, DifficultyScore> acc;
  std::vector<std::set<std::string>> present(runs.size());
  for (std::size_t r = 0; r < runs.size(); ++r)
    for (const auto& t : runs[r].trials) {
      if (!present[r].insert(t.item_id).second)
        throw DomainError("difficulty: item " + t.item_id + " appears twice in run " + runs[r].run_id);
      auto& d = acc[t.item_id];
      d.item_id = t.item_id;
      d.n_correct += t.is_correct ? 1 : 0;
    }
  for (std::size_t r = 0; r < runs.size(); ++r) {
    std::vector<std::string> missing;
    for (const auto& [id, _] : acc)
      if (!present[r].count(id)) missing.push_back(id);
    if (!missing.empty()) {
      std::string msg = "difficulty: run " + (runs[r].run_id.empty() ? std::to_string(r) : runs[r].run_id) + " is missing " +
                        std::to_string(missing.size()) + " item(s):";
      for (const auto& id : missing) msg += " " + id;
      throw DomainError(msg);
    }
  }
  std::vector<DifficultyScore> out;
  for (auto& [id, d] : acc) {
    d.n_seeds = static_cast<int>(runs.size());
    d.score = static_cast<double>(d.n_correct) / d.n_seeds;
    out.push_back(d);
  }
  return out;
}

struct RagScore {
  std::string item_id;
  double score = 0;
  int n_retrieved = 0;
  bool failed = false;
};

inline double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw DomainError("cosine: dimension mismatch (" + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0 || bb == 0) throw DomainError("cosine: zero-norm embedding");
  return ab / std::sqrt(aa * bb);
}

// Maximum cosine similarity between the question and the retrieved
// contexts. Nothing retrieved counts as a failed retrieval scored 0.
inline RagScore rag_score(std::span<const double> question, const std::vector<std::vector<double>>& retrieved,
                          std::string item_id = {}) {
  RagScore r;
  r.item_id = std::move(item_id);
  if (retrieved.empty()) {
    r.failed = true;
    return r;
  }
  r.score = -std::numeric_limits<double>::infinity();
  for (const auto& c : retrieved) r.score = std::max(r.score, cosine(question, c));
  r.n_retrieved = static_cast<int>(retrieved.size());
  return r;
}

struct Pca {
  Eigen::MatrixXd components;  // k x d, orthonormal rows
  Eigen::MatrixXd scores;      // n x k
  Eigen::VectorXd explained_variance_ratio;
  Eigen::VectorXd mean;
  int rank = 0;
};

// Centred PCA via SVD (columns are not scaled). Each component is signed so
// its largest-magnitude loading is positive. Ratios are each component's
// share of the total variance. With strict_rank a data rank below k is an
// error; otherwise the surplus components carry zero variance.
inline Pca pca_components(const Eigen::MatrixXd& x, int k = static_cast<int>(kNumPcs), bool strict_rank = true) {
  const auto n = x.rows(), d = x.cols();
  if (k < 1) throw DomainError("pca: k must be positive");
  if (n <= k) throw DomainError("pca: need more rows than components (n = " + std::to_string(n) + ", k = " + std::to_string(k) + ")");
  if (d < k) throw DomainError("pca: need at least k columns (d = " + std::to_string(d) + ", k = " + std::to_string(k) + ")");
  Pca p;
  p.mean = x.colwise().mean();
  const Eigen::MatrixXd c = x.rowwise() - p.mean.transpose();
  Eigen::BDCSVD<Eigen::MatrixXd> svd(c, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& s = svd.singularValues();
  const double tol = static_cast<double>(std::max(n, d)) * std::numeric_limits<double>::epsilon() * (s.size() ? s(0) : 0.0);
  p.rank = static_cast<int>((s.array() > tol).count());
  if (strict_rank && p.rank < k)
    throw DomainError("pca: data rank " + std::to_string(p.rank) + " is below the " + std::to_string(k) + " requested components");
  const double total = s.squaredNorm();
  p.components = svd.matrixV().leftCols(k).transpose();
  p.explained_variance_ratio = Eigen::VectorXd::Zero(k);
  for (int j = 0; j < k; ++j) {
    if (j >= p.rank) {
      p.explained_variance_ratio(j) = 0;
      continue;
    }
    p.explained_variance_ratio(j) = total > 0 ? s(j) * s(j) / total : 0.0;
    Eigen::Index arg;
    p.components.row(j).cwiseAbs().maxCoeff(&arg);
    if (p.components(j, arg) < 0) p.components.row(j) *= -1;
  }
  p.scores = c * p.components.transpose();
  for (int j = p.rank; j < k; ++j) p.scores.col(j).setZero();
  return p;
}

// ----- offline retrieval -----------------------------------------------------

struct Document {
  std::string doc_id;
  std::string title;
  std::string text;
};

inline std::vector<Document> load_corpus(const std::filesystem::path& path) {
  std::vector<Document> docs;
  read_jsonl(path, [&](std::size_t line, const json& j) {
    try {
      docs.push_back({j.at("doc_id").get<std::string>(), j.value("title", std::string()), j.at("text").get<std::string>()});
    } catch (const json::exception& e) {
      throw ParseError(std::string("corpus document: ") + e.what(), line);
    }
  });
  return docs;
}

// Lower-cased alphanumeric runs; other bytes separate tokens.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char ch : text) {
    if (std::isalnum(ch)) {
      cur.push_back(static_cast<char>(std::tolower(ch)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

struct Hit {
  std::size_t doc = 0;
  double score = 0;
};

// Okapi BM25 over title and text.
class Bm25Index {
 public:
  explicit Bm25Index(std::vector<Document> docs, double k1 = 1.5, double b = 0.75)
      : docs_(std::move(docs)), k1_(k1), b_(b) {
    tf_.resize(docs_.size());
    double total = 0;
    for (std::size_t i = 0; i < docs_.size(); ++i) {
      const auto toks = tokenize(docs_[i].title + " " + docs_[i].text);
      len_.push_back(static_cast<double>(toks.size()));
      total += len_.back();
      for (const auto& t : toks) ++tf_[i][t];
      for (const auto& [t, _] : tf_[i]) ++df_[t];
    }
    avg_len_ = docs_.empty() ? 0.0 : total / static_cast<double>(docs_.size());
  }

  const std::vector<Document>& documents() const noexcept { return docs_; }

  // Documents with a positive score, best first (ties by corpus order).
  std::vector<Hit> search(std::string_view query, std::size_t top = 5) const {
    auto terms = tokenize(query);
    std::sort(terms.begin(), terms.end());
    terms.erase(std::unique(terms.begin(), terms.end()), terms.end());
    const double n = static_cast<double>(docs_.size());
    std::vector<Hit> hits;
    for (std::size_t i = 0; i < docs_.size(); ++i) {
      double s = 0;
      for (const auto& t : terms) {
        const auto it = tf_[i].find(t);
        if (it == tf_[i].end()) continue;
        const double df = df_.at(t);
        const double idf = std::log(1.0 + (n - df + 0.5) / (df + 0.5));
        const double f = it->second;
        s += idf * f * (k1_ + 1) / (f + k1_ * (1 - b_ + b_ * len_[i] / avg_len_));
      }
      if (s > 0) hits.push_back({i, s});
    }
    std::stable_sort(hits.begin(), hits.end(), [](const Hit& a, const Hit& b) { return a.score > b.score; });
    if (hits.size() > top) hits.resize(top);
    return hits;
  }

 private:
  std::vector<Document> docs_;
  std::vector<std::unordered_map<std::string, int>> tf_;
  std::unordered_map<std::string, int> df_;
  std::vector<double> len_;
  double avg_len_ = 0;
  double k1_, b_;
};

// First `max_chars` characters of `text`, never splitting a UTF-8 sequence.
inline std::string truncate_utf8(const std::string& text, std::size_t max_chars) {
  std::size_t chars = 0, i = 0;
  while (i < text.size() && chars < max_chars) {
    const auto c = static_cast<unsigned char>(text[i]);
    const std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 1;
    i = std::min(text.size(), i + len);
    ++chars;
  }
  return text.substr(0, i);
}

struct RetrievalOptions {
  std::size_t top = 5;
  std::size_t max_docs = 3;
  std::size_t max_chars = 500;
};

// Top lexical matches, keeping the leading characters of up to max_docs of
// them. No match gives an empty list, which scores as a failed retrieval.
inline std::vector<std::string> retrieve_contexts(std::string_view question, const Bm25Index& index,
                                                  const RetrievalOptions& opt = {}) {
  std::vector<std::string> out;
  for (const auto& h : index.search(question, opt.top)) {
    if (out.size() == opt.max_docs) break;
    out.push_back(truncate_utf8(index.documents()[h.doc].text, opt.max_chars));
  }
  return out;
}

// ----- ingested embeddings ----------------------------------------------------

// One line per item: {"item_id", "embedding": [...], "context_embeddings": [[...], ...]}.
// A missing or empty context list is a failed retrieval.
struct ItemEmbedding {
  std::string item_id;
  std::vector<double> embedding;
  std::vector<std::vector<double>> context_embeddings;
};

inline std::vector<ItemEmbedding> load_embeddings(const std::filesystem::path& path) {
  std::vector<ItemEmbedding> out;
  std::set<std::string> seen;
  read_jsonl(path, [&](std::size_t line, const json& j) {
    ItemEmbedding e;
    try {
      e.item_id = j.at("item_id").get<std::string>();
      e.embedding = j.at("embedding").get<std::vector<double>>();
      if (j.contains("context_embeddings")) e.context_embeddings = j.at("context_embeddings").get<std::vector<std::vector<double>>>();
    } catch (const json::exception& ex) {
      throw ParseError(std::string("embedding record: ") + ex.what(), line);
    }
    if (e.embedding.empty()) throw ValidationError("line " + std::to_string(line) + ": embedding: empty");
    if (!out.empty() && e.embedding.size() != out.front().embedding.size())
      throw ValidationError("line " + std::to_string(line) + ": embedding: dimension differs from the first record");
    if (!seen.insert(e.item_id).second) throw ValidationError("line " + std::to_string(line) + ": duplicate item " + e.item_id);
    out.push_back(std::move(e));
  });
  return out;
}

// Assembles feature rows: difficulty from the runs, RAG from the context
// embeddings, and the first k principal components of the question
// embeddings. Items are those with embeddings; each needs a difficulty.
inline std::vector<FeatureRow> build_features(const std::vector<DifficultyScore>& diff, const std::vector<ItemEmbedding>& emb,
                                              int k = static_cast<int>(kNumPcs), bool keep_raw = false) {
  if (emb.empty()) throw DomainError("build_features: no embeddings");
  std::map<std::string, double> by_id;
  for (const auto& d : diff) by_id[d.item_id] = d.score;
  const auto n = static_cast<Eigen::Index>(emb.size());
  const auto dim = static_cast<Eigen::Index>(emb.front().embedding.size());
  Eigen::MatrixXd x(n, dim);
  for (Eigen::Index i = 0; i < n; ++i)
    x.row(i) = Eigen::Map<const Eigen::RowVectorXd>(emb[static_cast<std::size_t>(i)].embedding.data(), dim);
  const auto p = pca_components(x, k);
  std::vector<FeatureRow> rows;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& e = emb[static_cast<std::size_t>(i)];
    const auto it = by_id.find(e.item_id);
    if (it == by_id.end()) throw JoinError("no difficulty score for item " + e.item_id);
    FeatureRow r;
    r.item_id = e.item_id;
    r.difficulty = it->second;
    const auto rag = rag_score(e.embedding, e.context_embeddings, e.item_id);
    r.rag_score = rag.score;
    r.rag_failed = rag.failed;
    r.embedding_pcs.assign(kNumPcs, 0.0);
    for (int j = 0; j < k && j < static_cast<int>(kNumPcs); ++j) r.embedding_pcs[static_cast<std::size_t>(j)] = p.scores(i, j);
    if (keep_raw) r.raw_embedding = e.embedding;
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace abstain::features
