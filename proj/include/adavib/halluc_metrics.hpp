#pragma once

// Object-hallucination scoring: CHAIR (sentence- and instance-level) over
// captions, and POPE accuracy/precision/recall/F1 over yes/no answers.
//
// File formats (tab-separated, '#' starts a comment line):
//   vocabulary: object_id  name  synonym[,synonym...]
//   captions:   caption_id  caption  gold_object_id[,gold_object_id...]
//   pope:       question_id  question  gold(yes|no)  response

#include <cstddef>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace adavib {

using ObjectId = std::size_t;

class ObjectVocabulary {
 public:
  // Registers object `id` (ids must be added in order 0, 1, 2, ...).
  void add_object(ObjectId id, std::string name);
  // Maps a surface phrase (normalized like captions) to an object. Throws
  // InvalidArgument on an empty phrase or one already mapped elsewhere.
  void add_synonym(std::string_view phrase, ObjectId id);

  std::size_t size() const { return names_.size(); }
  const std::string& name(ObjectId id) const { return names_.at(id); }
  std::size_t max_phrase_words() const { return max_words_; }
  // Object for an exact word sequence, or size() if unknown.
  ObjectId lookup(std::span<const std::string> words) const;

 private:
  std::vector<std::string> names_;
  std::map<std::vector<std::string>, ObjectId> phrases_;
  std::size_t max_words_ = 0;
};

ObjectVocabulary parse_object_vocabulary(std::istream& in, const std::string& source);
ObjectVocabulary load_object_vocabulary(const std::string& path);

// Lowercase, every non-alphanumeric character becomes a space, split.
std::vector<std::string> normalize_words(std::string_view text);

// Greedy left-to-right longest-match scan; every mention is kept.
std::vector<ObjectId> extract_objects(std::string_view caption, const ObjectVocabulary& vocab);

struct CaptionRecord {
  std::string id;
  std::string caption;
  std::vector<ObjectId> gold;
};

struct CaptionDetail {
  std::string id;
  std::vector<ObjectId> mentioned;
  std::vector<ObjectId> hallucinated;
};

struct ChairReport {
  double chair_s = 0.0;
  double chair_i = 0.0;
  std::size_t captions = 0;
  std::size_t hallucinated_captions = 0;
  std::size_t mentions = 0;
  std::size_t hallucinated_mentions = 0;
  std::vector<CaptionDetail> details;
};

ChairReport chair_scores(std::span<const CaptionRecord> captions, const ObjectVocabulary& vocab);

std::vector<CaptionRecord> parse_captions(std::istream& in, const std::string& source);

enum class Answer { Yes, No, Unparsable };

const char* to_string(Answer a);

// A leading yes/no word decides; otherwise the first yes/no word anywhere.
Answer parse_answer(std::string_view response);

struct PopeReport {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t fn = 0;
  std::size_t unparsable = 0;
  std::size_t total = 0;
};

// "yes" is the positive class. An unparsable answer is never a yes
// prediction: against gold yes it is a false negative, against gold no it is
// simply wrong (in the accuracy denominator only).
PopeReport pope_scores(std::span<const Answer> predictions, std::span<const bool> gold_yes);

struct PopeRecord {
  std::string id;
  std::string question;
  bool gold_yes = false;
  std::string response;
};

std::vector<PopeRecord> parse_pope(std::istream& in, const std::string& source);

}  // namespace adavib
