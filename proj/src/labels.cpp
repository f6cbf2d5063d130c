// SPDX-License-Identifier: Apache-2.0
#include "slicevoco/labels.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <vector>

#include "slicevoco/errors.hpp"
#include "slicevoco/rvol.hpp"

namespace slicevoco {

std::string column_name(std::size_t column) {
  return std::string(kOrganNames[column / kNumClasses]) + "_" +
         std::string(kClassNames[column % kNumClasses]);
}

std::string_view to_string(InjuryLevel level) { return kClassNames[static_cast<int>(level)]; }

InjuryLevel parse_injury_level(std::string_view text) {
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (text == kClassNames[c]) return static_cast<InjuryLevel>(c);
  }
  throw DataError("unknown injury level '" + std::string(text) + "'");
}

namespace {

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

void write_labels_csv(const std::filesystem::path& path, const LabelTable& labels) {
  std::string text = "patient_id,kidney,liver,spleen\n";
  for (const auto& [id, triple] : labels) {
    text += id;
    for (auto level : triple.organs) {
      text += ',';
      text += to_string(level);
    }
    text += '\n';
  }
  write_file_atomic(path, text);
}

LabelTable read_labels_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open labels file " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw DataError("labels file is empty: " + path.string());
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "patient_id,kidney,liver,spleen") {
    throw DataError("unexpected labels header '" + line + "' in " + path.string());
  }
  LabelTable table;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_fields(line);
    if (fields.size() != 4) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected 4 fields");
    }
    OrganLabelTriple triple;
    for (std::size_t o = 0; o < kNumOrgans; ++o) triple.organs[o] = parse_injury_level(fields[o + 1]);
    if (!table.emplace(fields[0], triple).second) {
      throw DataError("duplicate patient id '" + fields[0] + "' in " + path.string());
    }
  }
  return table;
}

OrganLabelTriple StudyPrediction::argmax() const {
  OrganLabelTriple t;
  for (std::size_t o = 0; o < kNumOrgans; ++o) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < kNumClasses; ++c) {
      if (probs[o][c] > probs[o][best]) best = c;
    }
    t.organs[o] = static_cast<InjuryLevel>(best);
  }
  return t;
}

void write_predictions_csv(const std::filesystem::path& path, const PredictionTable& preds) {
  std::string text = "patient_id";
  for (std::size_t c = 0; c < kNumColumns; ++c) text += "," + column_name(c);
  text += '\n';
  char buf[32];
  for (const auto& [id, p] : preds) {
    text += id;
    for (std::size_t c = 0; c < kNumColumns; ++c) {
      std::snprintf(buf, sizeof(buf), ",%.9f", p.column(c));
      text += buf;
    }
    text += '\n';
  }
  write_file_atomic(path, text);
}

PredictionTable read_predictions_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open predictions file " + path.string());
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::string expected = "patient_id";
  for (std::size_t c = 0; c < kNumColumns; ++c) expected += "," + column_name(c);
  if (line != expected) throw DataError("unexpected predictions header in " + path.string());
  PredictionTable table;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_fields(line);
    if (fields.size() != kNumColumns + 1) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected 10 fields");
    }
    StudyPrediction p;
    for (std::size_t c = 0; c < kNumColumns; ++c) {
      try {
        p.probs[c / kNumClasses][c % kNumClasses] = std::stod(fields[c + 1]);
      } catch (const std::exception&) {
        throw DataError(path.string() + ":" + std::to_string(line_no) + ": bad probability '" + fields[c + 1] + "'");
      }
    }
    if (!table.emplace(fields[0], p).second) throw DataError("duplicate patient id '" + fields[0] + "'");
  }
  return table;
}

}  // namespace slicevoco
