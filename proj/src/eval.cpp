#include "mmfm/eval.hpp"

#include <cctype>
#include <fstream>

#include "mmfm/errors.hpp"

namespace mmfm {

namespace fs = std::filesystem;
using json = nlohmann::json;

json EvalRecord::to_json() const {
  return {{"run_id", run_id},
          {"benchmark", benchmark},
          {"item_id", item_id},
          {"predicted", predicted},
          {"gold", gold},
          {"correct", correct},
          {"skip_pretrain", flags.skip_pretrain},
          {"dino_like", flags.dino_like},
          {"large_lm", flags.large_lm}};
}

EvalRecord EvalRecord::from_json(const json& j) {
  try {
    EvalRecord r;
    r.run_id = j.at("run_id").get<std::string>();
    r.benchmark = j.at("benchmark").get<std::string>();
    r.item_id = j.at("item_id").get<std::string>();
    r.predicted = j.at("predicted").get<std::string>();
    r.gold = j.at("gold").get<std::string>();
    r.correct = j.at("correct").get<int>();
    r.flags = {j.at("skip_pretrain").get<int>(), j.at("dino_like").get<int>(), j.at("large_lm").get<int>()};
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed eval record: ") + e.what());
  }
}

json MetricSummary::to_json() const {
  json j = {{"benchmark", benchmark}, {"accuracy", accuracy}, {"n_items", n_items}};
  if (precision) j["precision"] = *precision;
  if (recall) j["recall"] = *recall;
  if (f1) j["f1"] = *f1;
  return j;
}

namespace {

std::string squash(std::string_view text) {
  std::string out;
  bool space = false;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      if (space && !out.empty()) out += ' ';
      out += static_cast<char>(std::tolower(c));
      space = false;
    } else {
      space = true;
    }
  }
  return out;
}

/// Letter of an option reference "(b)" / "b)", if the raw text is one.
std::optional<char> option_letter(std::string_view text) {
  std::string t;
  for (char ch : text)
    if (!std::isspace(static_cast<unsigned char>(ch))) t += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  if (!t.empty() && t.back() == '.') t.pop_back();
  if (t.size() == 3 && t[0] == '(' && t[2] == ')' && std::isalpha(static_cast<unsigned char>(t[1]))) return t[1];
  if (t.size() == 2 && t[1] == ')' && std::isalpha(static_cast<unsigned char>(t[0]))) return t[0];
  return std::nullopt;
}

/// Text of option `letter` in a question listing "(a) ... (b) ...".
std::optional<std::string> option_text(std::string_view question, char letter) {
  std::string q;
  for (char ch : question) q += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  const std::string tag = std::string("(") + letter + ")";
  const auto at = q.find(tag);
  if (at == std::string::npos) return std::nullopt;
  const auto start = at + tag.size();
  auto end = q.size();
  for (auto k = start; k + 2 < q.size(); ++k) {
    if (q[k] == '(' && std::isalpha(static_cast<unsigned char>(q[k + 1])) && q[k + 2] == ')') {
      end = k;
      break;
    }
  }
  return squash(std::string_view(q).substr(start, end - start));
}

bool binary(const std::string& s) { return s == "yes" || s == "no"; }

}  // namespace

std::string normalize_answer(std::string_view text, std::string_view question) {
  if (!question.empty()) {
    if (const auto letter = option_letter(text)) {
      if (auto opt = option_text(question, *letter)) return *opt;
    }
  }
  return squash(text);
}

BinaryMetrics f1_from_records(std::span<const EvalRecord> records) {
  BinaryMetrics m;
  for (const auto& r : records) {
    if (!binary(r.gold)) throw InputError("item " + r.item_id + " has non-binary gold answer '" + r.gold + "'");
    const bool pred = r.predicted == "yes", gold = r.gold == "yes";
    if (pred && gold) ++m.tp;
    else if (pred) ++m.fp;
    else if (gold) ++m.fn;
    else ++m.tn;
  }
  m.precision = m.tp + m.fp ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp) : 0.0;
  m.recall = m.tp + m.fn ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn) : 0.0;
  m.f1 = m.precision + m.recall > 0 ? 2 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

MetricSummary summarize(const std::string& benchmark, std::span<const EvalRecord> records) {
  if (records.empty()) throw InputError("benchmark " + benchmark + " has no items to summarize");
  MetricSummary s;
  s.benchmark = benchmark;
  s.n_items = records.size();
  std::size_t hits = 0;
  for (const auto& r : records) hits += static_cast<std::size_t>(r.correct);
  s.accuracy = static_cast<double>(hits) / static_cast<double>(records.size());
  if (benchmark == "toy-pope") {
    const auto m = f1_from_records(records);
    s.precision = m.precision;
    s.recall = m.recall;
    s.f1 = m.f1;
  }
  return s;
}

EvalOutput evaluate_with(const std::string& run_id, const DesignFlags& flags, const std::string& benchmark,
                         std::span<const Sample> items, const Answerer& answer, const std::optional<fs::path>& out_dir) {
  if (items.empty()) throw InputError("benchmark " + benchmark + " is empty");
  std::ofstream stream;
  fs::path jsonl;
  if (out_dir) {
    fs::create_directories(*out_dir);
    jsonl = *out_dir / (benchmark + ".jsonl");
    stream.open(jsonl, std::ios::trunc);
    if (!stream) throw InputError("cannot write " + jsonl.string());
  }
  EvalOutput out;
  out.records.reserve(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Sample& item = items[i];
    EvalRecord r;
    r.run_id = run_id;
    r.benchmark = benchmark;
    r.item_id = item.id;
    r.predicted = normalize_answer(answer(i, item), item.question);
    r.gold = normalize_answer(item.answer, item.question);
    r.correct = r.predicted == r.gold ? 1 : 0;
    r.flags = flags;
    if (out_dir) stream << r.to_json().dump() << '\n' << std::flush;
    out.records.push_back(std::move(r));
  }
  out.summary = summarize(benchmark, out.records);
  if (out_dir) {
    const auto path = *out_dir / (benchmark + ".summary.json");
    auto tmp = path;
    tmp += ".tmp";
    std::ofstream(tmp) << out.summary.to_json().dump(2) << '\n';
    fs::rename(tmp, path);
  }
  return out;
}

EvalOutput evaluate(const Checkpoint& ck, const Tokenizer& tokenizer, const std::string& benchmark,
                    std::span<const Sample> items, const std::optional<fs::path>& out_dir) {
  if (tokenizer.vocab_size() != ck.config.language.vocab_size)
    throw ConfigError("tokenizer vocabulary " + std::to_string(tokenizer.vocab_size()) + " does not match the checkpoint's " +
                      std::to_string(ck.config.language.vocab_size));
  const RunManifest manifest = RunManifest::from_json(ck.manifest);
  const MultimodalModel model(ck.config, ck.params);
  if (items.empty()) throw InputError("benchmark " + benchmark + " is empty");
  const FeatureBank feats = encode_corpus(model, items);
  const Answerer greedy = [&](std::size_t i, const Sample& item) {
    const auto ids = generate_from_features(model, feats.of(i), item.prompt(), kMaxAnswerTokens, Tokenizer::kEndOfAnswer);
    return tokenizer.decode(ids);
  };
  return evaluate_with(manifest.run_id(), design_flags(manifest), benchmark, items, greedy, out_dir);
}

std::vector<EvalRecord> load_records(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw InputError("cannot open " + path.string());
  std::vector<EvalRecord> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(EvalRecord::from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw FormatError("bad JSON in " + path.string() + ": " + e.what());
    }
  }
  return out;
}

}  // namespace mmfm
