// SPDX-License-Identifier: Apache-2.0
#include "sketchpipe/trainset.h"

#include <cctype>

#include "sketchpipe/error.h"

namespace sketchpipe {

namespace {

constexpr std::pair<TokenRole, std::string_view> kRoleNames[] = {
    {TokenRole::kUserText, "user_text"},
    {TokenRole::kAssistantText, "assistant_text"},
    {TokenRole::kVisionStart, "vision_start"},
    {TokenRole::kVisionEnd, "vision_end"},
    {TokenRole::kImageEmbedding, "image_embedding"},
    {TokenRole::kToolCallOpen, "tool_call_open"},
    {TokenRole::kToolCallClose, "tool_call_close"},
};

bool assistant_emitted(TokenRole r) {
  return r == TokenRole::kAssistantText || r == TokenRole::kToolCallOpen ||
         r == TokenRole::kToolCallClose;
}

[[noreturn]] void bad_sequence(const std::string& why, std::size_t pos) {
  throw Error(ErrorCode::kInvalidArgument, why + " at position " + std::to_string(pos));
}

class Builder {
 public:
  explicit Builder(const TrainsetConfig& cfg) : cfg_(cfg) {}

  void text(TokenRole role, std::string s) {
    const std::size_t n = cfg_.counter(s);
    if (n == 0) return;
    ex_.spans.push_back({role, std::move(s), {}, n});
  }

  void delimiter(TokenRole role, std::string_view s) {
    ex_.spans.push_back({role, std::string(s), {}, 1});
  }

  void image(const std::string& digest) {
    delimiter(TokenRole::kVisionStart, "<vision_start>");
    ex_.spans.push_back({TokenRole::kImageEmbedding, {}, digest, cfg_.image_tokens});
    delimiter(TokenRole::kVisionEnd, "<vision_end>");
    ex_.image_refs.push_back(digest);
  }

  TrainingExample take() { return std::move(ex_); }

 private:
  const TrainsetConfig& cfg_;
  TrainingExample ex_;
};

}  // namespace

std::string_view to_string(TokenRole r) {
  for (const auto& [role, name] : kRoleNames) {
    if (role == r) return name;
  }
  return "user_text";
}

TokenRole parse_token_role(std::string_view s) {
  for (const auto& [role, name] : kRoleNames) {
    if (name == s) return role;
  }
  throw Error(ErrorCode::kCorruptRecord, "unknown token role '" + std::string(s) + "'");
}

std::string_view to_string(TrainPhase p) { return p == TrainPhase::kPhase1 ? "phase1" : "phase2"; }

TrainPhase parse_train_phase(std::string_view s) {
  if (s == "phase1") return TrainPhase::kPhase1;
  if (s == "phase2") return TrainPhase::kPhase2;
  throw Error(ErrorCode::kConfig, "unknown phase '" + std::string(s) + "'");
}

std::vector<TokenRole> TrainingExample::roles() const {
  std::vector<TokenRole> out;
  out.reserve(size());
  for (const auto& s : spans) out.insert(out.end(), s.n_tokens, s.role);
  return out;
}

std::size_t TrainingExample::size() const {
  std::size_t n = 0;
  for (const auto& s : spans) n += s.n_tokens;
  return n;
}

std::size_t count_words(std::string_view text) {
  std::size_t n = 0;
  bool in_word = false;
  for (const char c : text) {
    const bool space = std::isspace(static_cast<unsigned char>(c)) != 0;
    if (!space && !in_word) ++n;
    in_word = !space;
  }
  return n;
}

TrainsetConfig TrainsetConfig::from_json(const nlohmann::json& j) {
  TrainsetConfig c;
  try {
    c.image_tokens = j.value("image_tokens", c.image_tokens);
    c.include_system_prompt = j.value("include_system_prompt", c.include_system_prompt);
    c.failure_notice_reason = j.value("failure_notice_reason", c.failure_notice_reason);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfig, std::string("trainset config: ") + e.what());
  }
  if (c.image_tokens == 0) throw Error(ErrorCode::kConfig, "image_tokens must be >= 1");
  return c;
}

TrainingExample standardize(const Trajectory& t, const VQAInstance& instance,
                            const PromptTemplates& templates, const TrainsetConfig& cfg) {
  validate_trajectory(t);
  if (!t.final_answer) {
    throw Error(ErrorCode::kInvalidArgument,
                "trajectory " + t.id + " has no final answer (termination " +
                    std::string(to_string(t.termination)) + ")");
  }
  if (t.instance_id != instance.id) {
    throw Error(ErrorCode::kInvalidArgument,
                "trajectory " + t.id + " belongs to instance " + t.instance_id);
  }
  if (cfg.image_tokens == 0) throw Error(ErrorCode::kConfig, "image_tokens must be >= 1");

  Builder b(cfg);
  if (cfg.include_system_prompt) b.text(TokenRole::kUserText, templates.solver_system);
  b.text(TokenRole::kUserText, fill_template(templates.question, {{"question", instance.question}}));
  b.image(t.steps.front().image_hash);

  const std::size_t last = t.steps.size() - 1;
  for (std::size_t i = 0; i <= last; ++i) {
    const TrajectoryStep& step = t.steps[i];
    if (i == last && t.termination == Termination::kMaxSteps) {
      b.text(TokenRole::kUserText, templates.force_answer);
    }
    b.text(TokenRole::kAssistantText, step.reasoning);
    if (step.action) {
      b.delimiter(TokenRole::kToolCallOpen, kToolCallOpen);
      b.text(TokenRole::kAssistantText, *step.action);
      b.delimiter(TokenRole::kToolCallClose, kToolCallClose);
    }
    if (i == last) break;
    if (step.edit_failed) {
      b.text(TokenRole::kUserText, fill_template(templates.failure_notice,
                                                 {{"failure_notice", cfg.failure_notice_reason}}));
    }
    b.image(t.steps[i + 1].image_hash);
  }
  b.text(TokenRole::kAssistantText, std::string(kAnswerDelimiter) + " " + *t.final_answer);

  TrainingExample ex = b.take();
  ex.trajectory_id = t.id;
  return ex;
}

MaskResult build_mask(std::span<const TokenRole> roles) {
  MaskResult r;
  r.mask.assign(roles.size(), false);
  r.stats.total = roles.size();

  bool inside = false;
  bool boundary_supervised = false;
  std::size_t embeddings = 0;
  std::optional<TokenRole> last_outside;
  long image = -1;

  auto supervise = [&](std::size_t pos, long segment) {
    if (segment < 0) bad_sequence("supervised token before the first image", pos);
    r.mask[pos] = true;
    if (static_cast<std::size_t>(segment) >= r.segments.size()) r.segments.resize(segment + 1);
    r.segments[segment].push_back(pos);
  };

  for (std::size_t pos = 0; pos < roles.size(); ++pos) {
    const TokenRole role = roles[pos];
    ++r.stats.per_role[role];
    switch (role) {
      case TokenRole::kVisionStart:
        if (inside) bad_sequence("nested vision_start", pos);
        inside = true;
        embeddings = 0;
        boundary_supervised = last_outside && assistant_emitted(*last_outside);
        if (boundary_supervised) supervise(pos, image);
        ++image;
        break;
      case TokenRole::kImageEmbedding:
        if (!inside) bad_sequence("unbracketed image_embedding", pos);
        ++embeddings;
        break;
      case TokenRole::kVisionEnd:
        if (!inside) bad_sequence("vision_end without vision_start", pos);
        if (embeddings == 0) bad_sequence("image without embeddings", pos);
        inside = false;
        if (boundary_supervised) supervise(pos, image);
        break;
      default:
        if (inside) bad_sequence("text inside an image", pos);
        last_outside = role;
        if (assistant_emitted(role)) supervise(pos, image);
        break;
    }
  }
  if (inside) bad_sequence("unterminated image", roles.size());
  // One segment per image, including images followed by no supervised text.
  if (image >= 0) r.segments.resize(static_cast<std::size_t>(image) + 1);
  for (const auto& s : r.segments) r.stats.supervised += s.size();
  return r;
}

MaskResult build_mask(const TrainingExample& e, TrainPhase) {
  const auto roles = e.roles();
  return build_mask(std::span<const TokenRole>(roles));
}

void apply_mask(TrainingExample& e, TrainPhase phase) {
  MaskResult r = build_mask(e, phase);
  e.phase = phase;
  e.mask = std::move(r.mask);
  e.segments = std::move(r.segments);
}

LossWeights aggregate_loss_weights(const std::vector<TrainingExample>& examples) {
  LossWeights w;
  std::size_t total = 0;
  for (const auto& e : examples) {
    if (e.mask.size() != e.size()) {
      throw Error(ErrorCode::kInvalidArgument, "example " + e.trajectory_id + " has no mask");
    }
    std::size_t n = 0;
    for (const bool m : e.mask) n += m ? 1 : 0;
    w.supervised.push_back(n);
    total += n;
  }
  if (total == 0) throw Error(ErrorCode::kEmptyInput, "no supervised tokens");
  w.normalizer = 1.0 / static_cast<double>(total);
  return w;
}

std::vector<std::pair<std::size_t, std::size_t>> mask_runs(const std::vector<bool>& mask) {
  std::vector<std::pair<std::size_t, std::size_t>> runs;
  for (std::size_t i = 0; i < mask.size();) {
    if (!mask[i]) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < mask.size() && mask[j]) ++j;
    runs.emplace_back(i, j - i);
    i = j;
  }
  return runs;
}

nlohmann::json to_json(const TrainingExample& e) {
  nlohmann::json tokens = nlohmann::json::array();
  for (const auto& s : e.spans) {
    nlohmann::json tok{{"role", std::string(to_string(s.role))}, {"n_tokens", s.n_tokens}};
    if (s.role == TokenRole::kImageEmbedding) {
      tok["image_digest"] = s.image_digest;
    } else {
      tok["text"] = s.text;
    }
    tokens.push_back(std::move(tok));
  }
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& [start, len] : mask_runs(e.mask)) runs.push_back({start, len});
  return {{"trajectory_id", e.trajectory_id},
          {"phase", std::string(to_string(e.phase))},
          {"tokens", std::move(tokens)},
          {"mask_runs", std::move(runs)},
          {"segments", e.segments}};
}

TrainingExample training_example_from_json(const nlohmann::json& j) {
  try {
    TrainingExample e;
    e.trajectory_id = j.value("trajectory_id", "");
    e.phase = parse_train_phase(j.value("phase", "phase1"));
    for (const auto& tok : j.at("tokens")) {
      TokenSpan s;
      s.role = parse_token_role(tok.at("role").get<std::string>());
      s.n_tokens = tok.at("n_tokens").get<std::size_t>();
      if (s.role == TokenRole::kImageEmbedding) {
        s.image_digest = tok.at("image_digest").get<std::string>();
        e.image_refs.push_back(s.image_digest);
      } else {
        s.text = tok.at("text").get<std::string>();
      }
      e.spans.push_back(std::move(s));
    }
    e.mask.assign(e.size(), false);
    for (const auto& run : j.at("mask_runs")) {
      const auto start = run.at(0).get<std::size_t>();
      const auto len = run.at(1).get<std::size_t>();
      if (start + len > e.mask.size()) throw Error(ErrorCode::kCorruptRecord, "mask run out of range");
      for (std::size_t i = start; i < start + len; ++i) e.mask[i] = true;
    }
    e.segments = j.at("segments").get<std::vector<std::vector<std::size_t>>>();
    return e;
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorCode::kCorruptRecord, std::string("training example: ") + ex.what());
  }
}

}  // namespace sketchpipe
