//! Per-subgraph answers, helpfulness scoring, final synthesis and the
//! nine-metric judge.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::llm::{Gateway, LlmError};
use crate::prompting::HardPrompt;
use crate::vector;

pub const INTERMEDIATE_SYSTEM: &str =
    "You answer questions from a supplied knowledge subgraph. Stay grounded in the material.";
pub const HELPFULNESS_SYSTEM: &str =
    "You grade answers for relevance, coherence and detail. Reply only with the requested score line.";
pub const SYNTHESIS_SYSTEM: &str =
    "You merge several draft answers into one final answer without repeating yourself.";
pub const JUDGE_SYSTEM: &str =
    "You are a strict evaluator. Reply only with the requested score line.";
pub const VANILLA_SYSTEM: &str = "You are a helpful assistant.";

pub const NINE_METRICS: [&str; 9] = [
    "Comprehensiveness",
    "Diversity",
    "Empowerment",
    "Directness",
    "Clarity and Brevity",
    "Depth and Specificity",
    "Subjectivity and Nuance",
    "Implication Focus",
    "Ethical Alignment",
];

pub const MAX_SCORE: u32 = 10;
/// Word count at which the heuristic detail score saturates.
pub const DETAIL_SATURATION_WORDS: f64 = 300.0;
pub const HEURISTIC_COHERENCE: f64 = 5.0;

const REASK_SUFFIX: &str =
    "\n\nYour previous reply could not be read. Reply with the single SCORES line only.";

#[derive(Debug, Error)]
pub enum OrchestrationError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("judge reply unreadable after retry: {raw:?}")]
    Judge { raw: String },
    #[error("prompt template {name}: {message}")]
    Template { name: String, message: String },
    #[error("prompt template io {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Gateway(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub intermediate: String,
    pub helpfulness: String,
    pub synthesis: String,
    pub judge9: String,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self {
            intermediate: include_str!("../prompts/intermediate.txt").to_string(),
            helpfulness: include_str!("../prompts/helpfulness.txt").to_string(),
            synthesis: include_str!("../prompts/synthesis.txt").to_string(),
            judge9: include_str!("../prompts/judge9.txt").to_string(),
        }
    }
}

fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in pairs {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

impl PromptSet {
    const FILES: [(&'static str, &'static [&'static str]); 4] = [
        ("intermediate.txt", &["query", "prompt"]),
        ("helpfulness.txt", &["query", "response"]),
        ("synthesis.txt", &["query", "responses"]),
        ("judge9.txt", &["query", "answer"]),
    ];

    fn slot(&mut self, name: &str) -> &mut String {
        match name {
            "intermediate.txt" => &mut self.intermediate,
            "helpfulness.txt" => &mut self.helpfulness,
            "synthesis.txt" => &mut self.synthesis,
            _ => &mut self.judge9,
        }
    }

    /// Defaults overridden by whichever of the four files exist in `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self, OrchestrationError> {
        let mut set = Self::default();
        for (name, _) in Self::FILES {
            let path = dir.join(name);
            if path.is_file() {
                let text =
                    std::fs::read_to_string(&path).map_err(|source| OrchestrationError::Io {
                        path: path.display().to_string(),
                        source,
                    })?;
                *set.slot(name) = text;
            }
        }
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), OrchestrationError> {
        let mut copy = self.clone();
        for (name, keys) in Self::FILES {
            let text = copy.slot(name);
            for k in keys {
                if !text.contains(&format!("{{{k}}}")) {
                    return Err(OrchestrationError::Template {
                        name: name.to_string(),
                        message: format!("missing placeholder {{{k}}}"),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubScores {
    pub relevance: f64,
    pub coherence: f64,
    pub detail: f64,
}

impl SubScores {
    pub fn mean(&self) -> f64 {
        (self.relevance + self.coherence + self.detail) / 3.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    Judge,
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntermediateResponse {
    pub subgraph_ref: String,
    pub text: String,
    pub helpfulness: Option<f64>,
    pub sub_scores: Option<SubScores>,
    pub score_source: Option<ScoreSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub text: String,
    pub used_responses: Vec<String>,
    pub query_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeReport {
    pub scores: Vec<MetricScore>,
    pub overall: f64,
}

impl JudgeReport {
    pub fn from_scores(values: [f64; 9]) -> Self {
        let overall = values.iter().sum::<f64>() / values.len() as f64;
        Self {
            scores: NINE_METRICS
                .iter()
                .zip(values)
                .map(|(n, s)| MetricScore {
                    name: n.to_string(),
                    score: s,
                })
                .collect(),
            overall,
        }
    }
}

/// First line holding exactly `n` integers in `0..=10`, with an optional
/// `SCORES:` prefix.
pub fn parse_score_line(reply: &str, n: usize) -> Option<Vec<u32>> {
    reply.lines().find_map(|line| {
        let line = line.trim();
        let body = match line.get(..7) {
            Some(p) if p.eq_ignore_ascii_case("scores:") => &line[7..],
            _ => line,
        };
        let nums: Vec<u32> = body
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| t.parse::<u32>().ok().filter(|v| *v <= MAX_SCORE))
            .collect::<Option<_>>()?;
        (nums.len() == n).then_some(nums)
    })
}

pub fn answer_subgraph(
    gateway: &Gateway,
    prompts: &PromptSet,
    query: &str,
    subgraph_ref: &str,
    prompt: &HardPrompt,
) -> Result<IntermediateResponse, OrchestrationError> {
    if query.trim().is_empty() {
        return Err(OrchestrationError::Input("empty query".into()));
    }
    if prompt.text.trim().is_empty() {
        return Err(OrchestrationError::Input("empty prompt".into()));
    }
    let user = fill(
        &prompts.intermediate,
        &[("query", query), ("prompt", &prompt.text)],
    );
    let text = gateway
        .chat(INTERMEDIATE_SYSTEM, &user)
        .map_err(|e| match e {
            LlmError::MalformedResponse(m) => OrchestrationError::Generation(m),
            other => other.into(),
        })?
        .response_text;
    Ok(IntermediateResponse {
        subgraph_ref: subgraph_ref.to_string(),
        text,
        helpfulness: None,
        sub_scores: None,
        score_source: None,
    })
}

pub fn heuristic_scores(
    gateway: &Gateway,
    query: &str,
    response: &str,
) -> Result<SubScores, OrchestrationError> {
    let v = gateway.embed(&[query, response])?;
    let cos = vector::cosine_unchecked(&v[0].values, &v[1].values);
    let words = response.split_whitespace().count() as f64;
    Ok(SubScores {
        relevance: 10.0 * cos.max(0.0),
        coherence: HEURISTIC_COHERENCE,
        detail: 10.0 * (words / DETAIL_SATURATION_WORDS).min(1.0),
    })
}

/// Asks for three sub-scores, re-asks once, then falls back to
/// [`heuristic_scores`]. Chat failures also fall back; only embedding failures
/// in the fallback surface as errors.
pub fn score_helpfulness(
    gateway: &Gateway,
    prompts: &PromptSet,
    query: &str,
    mut response: IntermediateResponse,
) -> Result<IntermediateResponse, OrchestrationError> {
    if response.text.trim().is_empty() {
        return Err(OrchestrationError::Input("empty response".into()));
    }
    let user = fill(
        &prompts.helpfulness,
        &[("query", query), ("response", &response.text)],
    );
    let mut judged = None;
    for attempt in [user.clone(), format!("{user}{REASK_SUFFIX}")] {
        match gateway.chat(HELPFULNESS_SYSTEM, &attempt) {
            Ok(ex) => {
                if let Some(v) = parse_score_line(&ex.response_text, 3) {
                    judged = Some(v);
                    break;
                }
            }
            Err(e) => {
                tracing::warn!(error = %e, "helpfulness call failed, using heuristic");
                break;
            }
        }
    }
    let (scores, source) = match judged {
        Some(v) => (
            SubScores {
                relevance: v[0] as f64,
                coherence: v[1] as f64,
                detail: v[2] as f64,
            },
            ScoreSource::Judge,
        ),
        None => (
            heuristic_scores(gateway, query, &response.text)?,
            ScoreSource::Heuristic,
        ),
    };
    response.helpfulness = Some(scores.mean());
    response.sub_scores = Some(scores);
    response.score_source = Some(source);
    Ok(response)
}

/// Descending helpfulness, ties by subgraph reference. Unscored responses sort last.
pub fn sort_by_helpfulness(responses: &mut [IntermediateResponse]) {
    responses.sort_by(|a, b| {
        let (ha, hb) = (
            a.helpfulness.unwrap_or(f64::NEG_INFINITY),
            b.helpfulness.unwrap_or(f64::NEG_INFINITY),
        );
        hb.total_cmp(&ha)
            .then_with(|| a.subgraph_ref.cmp(&b.subgraph_ref))
    });
}

pub fn synthesis_prompt(
    prompts: &PromptSet,
    query: &str,
    sorted: &[IntermediateResponse],
) -> String {
    let blocks: Vec<String> = sorted
        .iter()
        .enumerate()
        .map(|(i, r)| {
            format!(
                "### Draft {} (subgraph {}, helpfulness {:.2})\n{}\n",
                i + 1,
                r.subgraph_ref,
                r.helpfulness.unwrap_or(0.0),
                r.text.trim_end()
            )
        })
        .collect();
    fill(
        &prompts.synthesis,
        &[("query", query), ("responses", &blocks.join("\n"))],
    )
}

pub fn synthesize_final(
    gateway: &Gateway,
    prompts: &PromptSet,
    query: &str,
    scored: &[IntermediateResponse],
) -> Result<FinalAnswer, OrchestrationError> {
    if scored.is_empty() {
        return Err(OrchestrationError::Input(
            "no responses to synthesize".into(),
        ));
    }
    let mut sorted = scored.to_vec();
    sort_by_helpfulness(&mut sorted);
    let user = synthesis_prompt(prompts, query, &sorted);
    let text = gateway.chat(SYNTHESIS_SYSTEM, &user)?.response_text;
    Ok(FinalAnswer {
        text,
        used_responses: sorted.into_iter().map(|r| r.subgraph_ref).collect(),
        query_text: query.to_string(),
    })
}

pub fn judge_nine_metrics(
    gateway: &Gateway,
    prompts: &PromptSet,
    query: &str,
    answer: &str,
) -> Result<JudgeReport, OrchestrationError> {
    if answer.trim().is_empty() {
        return Err(OrchestrationError::Input("empty answer".into()));
    }
    let user = fill(&prompts.judge9, &[("query", query), ("answer", answer)]);
    let mut raw = String::new();
    for attempt in [user.clone(), format!("{user}{REASK_SUFFIX}")] {
        raw = gateway.chat(JUDGE_SYSTEM, &attempt)?.response_text;
        if let Some(v) = parse_score_line(&raw, 9) {
            let mut values = [0.0; 9];
            for (slot, x) in values.iter_mut().zip(v) {
                *slot = x as f64;
            }
            return Ok(JudgeReport::from_scores(values));
        }
    }
    Err(OrchestrationError::Judge { raw })
}

/// The baseline without retrieval: the bare query goes to chat.
pub fn vanilla_answer(gateway: &Gateway, query: &str) -> Result<String, OrchestrationError> {
    if query.trim().is_empty() {
        return Err(OrchestrationError::Input("empty query".into()));
    }
    Ok(gateway.chat(VANILLA_SYSTEM, query)?.response_text)
}

fn digest_scores(seed: u64, tag: &str, user: &str, n: usize, low: u32) -> String {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    h.update(user.as_bytes());
    let d = h.finalize();
    let span = MAX_SCORE - low;
    let nums: Vec<String> = (0..n)
        .map(|i| (low + d[i] as u32 % span).to_string())
        .collect();
    format!("SCORES: {}", nums.join(" "))
}

/// Mock helpfulness grade: three digest-derived scores in 4..=9.
pub fn mock_helpfulness_reply(seed: u64, user: &str) -> String {
    digest_scores(seed, "helpfulness", user, 3, 4)
}

/// Mock nine-metric grade: digest-derived scores in 5..=9.
pub fn mock_judge_reply(seed: u64, user: &str) -> String {
    digest_scores(seed, "judge", user, 9, 5)
}
