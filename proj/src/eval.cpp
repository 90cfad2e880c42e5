#include "distlab/eval.hpp"

#include <fstream>

#include "json.hpp"

namespace distlab {

std::string metric_name(MetricKind m) { return m == MetricKind::LogPpl ? "log_ppl" : "error_rate"; }

std::string choice_norm_name(ChoiceNorm n) {
  return n == ChoiceNorm::TotalNll ? "total" : "pertoken";
}

ChoiceNorm choice_norm_from_name(const std::string& name) {
  if (name == "total") return ChoiceNorm::TotalNll;
  if (name == "pertoken") return ChoiceNorm::PerTokenNll;
  throw std::invalid_argument("unknown choice normalization '" + name +
                              "' (expected total or pertoken)");
}

std::string eval_report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["format"] = "distlab-eval-v1";
  j["dataset"] = r.dataset_id;
  j["metric"] = metric_name(r.metric);
  j["value"] = r.value;
  j["tokens"] = r.token_count;
  j["examples"] = r.example_count;
  j["model_digest"] = r.model_digest;
  return j.dump(2) + "\n";
}

std::vector<MultipleChoiceItem> load_mc_items(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("mc items: cannot open " + path);
  std::vector<MultipleChoiceItem> items;
  std::string line;
  for (std::int64_t lineno = 1; std::getline(in, line); ++lineno) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error("mc items: line " + std::to_string(lineno) + ": " + e.what());
    }
    MultipleChoiceItem item;
    try {
      item.context = j.at("context").get<std::vector<std::int32_t>>();
      item.choices = j.at("choices").get<std::vector<std::vector<std::int32_t>>>();
      item.gold = j.at("gold").get<std::int64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("mc items: line " + std::to_string(lineno) + ": " + e.what());
    }
    if (item.choices.size() < 2)
      throw std::runtime_error("mc items: line " + std::to_string(lineno) + ": fewer than 2 choices");
    if (item.gold < 0 || item.gold >= static_cast<std::int64_t>(item.choices.size()))
      throw std::runtime_error("mc items: line " + std::to_string(lineno) + ": gold index " +
                               std::to_string(item.gold) + " out of range");
    for (const auto& c : item.choices)
      if (c.empty())
        throw std::runtime_error("mc items: line " + std::to_string(lineno) + ": empty choice");
    items.push_back(std::move(item));
  }
  return items;
}

}  // namespace distlab
