#include "adavib/halluc_metrics.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "adavib/errors.hpp"

namespace adavib {

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

[[noreturn]] void parse_fail(const std::string& source, std::size_t line, const std::string& msg) {
  throw ParseError(source + ":" + std::to_string(line) + ": " + msg);
}

ObjectId parse_id(const std::string& s, const std::string& source, std::size_t line) {
  const std::string t = trim(s);
  if (t.empty() || !std::all_of(t.begin(), t.end(), [](unsigned char c) { return std::isdigit(c); })) {
    parse_fail(source, line, "bad object id '" + s + "'");
  }
  return static_cast<ObjectId>(std::stoull(t));
}

std::vector<ObjectId> parse_id_list(const std::string& s, const std::string& source,
                                    std::size_t line) {
  std::vector<ObjectId> out;
  if (trim(s).empty()) {
    return out;
  }
  for (const auto& part : split(s, ',')) {
    out.push_back(parse_id(part, source, line));
  }
  return out;
}

// Calls fn(fields, line_no) for every non-comment, non-blank line.
template <typename Fn>
void for_each_record(std::istream& in, Fn&& fn) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    if (line.empty() || line[0] == '#') {
      continue;
    }
    fn(split(line, '\t'), line_no);
  }
}

}  // namespace

void ObjectVocabulary::add_object(ObjectId id, std::string name) {
  if (id != names_.size()) {
    throw InvalidArgument("object ids must be contiguous from 0; got " + std::to_string(id));
  }
  names_.push_back(std::move(name));
}

void ObjectVocabulary::add_synonym(std::string_view phrase, ObjectId id) {
  if (id >= names_.size()) {
    throw InvalidArgument("synonym refers to unknown object " + std::to_string(id));
  }
  std::vector<std::string> words = normalize_words(phrase);
  if (words.empty()) {
    throw InvalidArgument("empty synonym phrase for object " + std::to_string(id));
  }
  const auto it = phrases_.find(words);
  if (it != phrases_.end() && it->second != id) {
    throw InvalidArgument("synonym '" + std::string(phrase) + "' maps to objects " +
                          std::to_string(it->second) + " and " + std::to_string(id));
  }
  max_words_ = std::max(max_words_, words.size());
  phrases_.emplace(std::move(words), id);
}

ObjectId ObjectVocabulary::lookup(std::span<const std::string> words) const {
  const auto it = phrases_.find(std::vector<std::string>(words.begin(), words.end()));
  return it == phrases_.end() ? names_.size() : it->second;
}

ObjectVocabulary parse_object_vocabulary(std::istream& in, const std::string& source) {
  ObjectVocabulary vocab;
  for_each_record(in, [&](const std::vector<std::string>& f, std::size_t line) {
    if (f.size() != 3) {
      parse_fail(source, line, "expected 3 tab-separated fields, got " + std::to_string(f.size()));
    }
    const ObjectId id = parse_id(f[0], source, line);
    if (id != vocab.size()) {
      parse_fail(source, line, "object ids must be contiguous from 0");
    }
    vocab.add_object(id, trim(f[1]));
    for (const auto& syn : split(f[2], ',')) {
      try {
        vocab.add_synonym(syn, id);
      } catch (const InvalidArgument& e) {
        parse_fail(source, line, e.what());
      }
    }
  });
  return vocab;
}

ObjectVocabulary load_object_vocabulary(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open vocabulary file " + path);
  }
  return parse_object_vocabulary(in, path);
}

std::vector<std::string> normalize_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) {
    words.push_back(std::move(cur));
  }
  return words;
}

std::vector<ObjectId> extract_objects(std::string_view caption, const ObjectVocabulary& vocab) {
  const std::vector<std::string> words = normalize_words(caption);
  std::vector<ObjectId> out;
  std::size_t i = 0;
  while (i < words.size()) {
    std::size_t matched = 0;
    const std::size_t longest = std::min(vocab.max_phrase_words(), words.size() - i);
    for (std::size_t n = longest; n >= 1; --n) {
      const ObjectId id = vocab.lookup(std::span(words).subspan(i, n));
      if (id < vocab.size()) {
        out.push_back(id);
        matched = n;
        break;
      }
    }
    i += matched == 0 ? 1 : matched;
  }
  return out;
}

ChairReport chair_scores(std::span<const CaptionRecord> captions, const ObjectVocabulary& vocab) {
  ChairReport r;
  for (const CaptionRecord& c : captions) {
    CaptionDetail d{c.id, extract_objects(c.caption, vocab), {}};
    for (ObjectId o : d.mentioned) {
      if (std::find(c.gold.begin(), c.gold.end(), o) == c.gold.end()) {
        d.hallucinated.push_back(o);
      }
    }
    r.captions += 1;
    r.mentions += d.mentioned.size();
    r.hallucinated_mentions += d.hallucinated.size();
    r.hallucinated_captions += d.hallucinated.empty() ? 0 : 1;
    r.details.push_back(std::move(d));
  }
  r.chair_s = r.captions == 0 ? 0.0
                              : static_cast<double>(r.hallucinated_captions) /
                                    static_cast<double>(r.captions);
  r.chair_i = r.mentions == 0 ? 0.0
                              : static_cast<double>(r.hallucinated_mentions) /
                                    static_cast<double>(r.mentions);
  return r;
}

std::vector<CaptionRecord> parse_captions(std::istream& in, const std::string& source) {
  std::vector<CaptionRecord> out;
  for_each_record(in, [&](const std::vector<std::string>& f, std::size_t line) {
    if (f.size() != 3) {
      parse_fail(source, line, "expected 3 tab-separated fields, got " + std::to_string(f.size()));
    }
    out.push_back({f[0], f[1], parse_id_list(f[2], source, line)});
  });
  return out;
}

const char* to_string(Answer a) {
  switch (a) {
    case Answer::Yes: return "yes";
    case Answer::No: return "no";
    case Answer::Unparsable: return "unparsable";
  }
  return "?";
}

Answer parse_answer(std::string_view response) {
  for (const std::string& w : normalize_words(response)) {
    if (w == "yes") {
      return Answer::Yes;
    }
    if (w == "no") {
      return Answer::No;
    }
  }
  return Answer::Unparsable;
}

PopeReport pope_scores(std::span<const Answer> predictions, std::span<const bool> gold_yes) {
  if (predictions.size() != gold_yes.size()) {
    throw InvalidArgument("pope_scores: " + std::to_string(predictions.size()) +
                          " predictions for " + std::to_string(gold_yes.size()) + " labels");
  }
  if (predictions.empty()) {
    throw InvalidArgument("pope_scores: no predictions");
  }
  PopeReport r;
  r.total = predictions.size();
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const Answer a = predictions[i];
    if (a == Answer::Unparsable) {
      r.unparsable += 1;
    }
    if (gold_yes[i]) {
      (a == Answer::Yes ? r.tp : r.fn) += 1;
    } else if (a == Answer::Yes) {
      r.fp += 1;
    } else if (a == Answer::No) {
      r.tn += 1;
    }
  }
  const auto ratio = [](std::size_t num, std::size_t den) {
    return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  r.accuracy = ratio(r.tp + r.tn, r.total);
  r.precision = ratio(r.tp, r.tp + r.fp);
  r.recall = ratio(r.tp, r.tp + r.fn);
  const double pr = r.precision + r.recall;
  r.f1 = pr == 0.0 ? 0.0 : 2.0 * r.precision * r.recall / pr;
  return r;
}

std::vector<PopeRecord> parse_pope(std::istream& in, const std::string& source) {
  std::vector<PopeRecord> out;
  for_each_record(in, [&](const std::vector<std::string>& f, std::size_t line) {
    if (f.size() != 4) {
      parse_fail(source, line, "expected 4 tab-separated fields, got " + std::to_string(f.size()));
    }
    std::string gold = trim(f[2]);
    std::transform(gold.begin(), gold.end(), gold.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (gold != "yes" && gold != "no") {
      parse_fail(source, line, "gold label must be yes or no, got '" + f[2] + "'");
    }
    out.push_back({f[0], f[1], gold == "yes", f[3]});
  });
  return out;
}

}  // namespace adavib
