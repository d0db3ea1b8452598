//! Pairwise preference evaluation with an LLM judge.

use std::fmt::Write as _;

use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};

use crate::llm::LlmError;
use crate::query_tools::LlmTools;
use crate::trace::Trace;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub question: String,
    pub answer_a: String,
    pub answer_b: String,
    pub system_a: String,
    pub system_b: String,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("line {line}: {detail}")]
    Item { line: usize, detail: String },
    #[error("judge failed: {0}")]
    Judge(#[from] LlmError),
    #[error("judge reply has no usable winner: {0}")]
    Reply(String),
}

impl EvalItem {
    pub fn validate(&self) -> Result<(), String> {
        let fields = [
            ("question", &self.question),
            ("answer_a", &self.answer_a),
            ("answer_b", &self.answer_b),
            ("system_a", &self.system_a),
            ("system_b", &self.system_b),
        ];
        match fields.iter().find(|(_, v)| v.trim().is_empty()) {
            Some((name, _)) => Err(format!("{name} is empty")),
            None => Ok(()),
        }
    }

    /// The same comparison seen from the other system.
    pub fn swapped(&self) -> Self {
        EvalItem {
            question: self.question.clone(),
            answer_a: self.answer_b.clone(),
            answer_b: self.answer_a.clone(),
            system_a: self.system_b.clone(),
            system_b: self.system_a.clone(),
        }
    }

    /// Parses JSON lines, skipping blank lines.
    pub fn parse_jsonl(input: &str) -> Result<Vec<EvalItem>, EvalError> {
        input
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                let item: EvalItem = serde_json::from_str(l).map_err(|e| EvalError::Item {
                    line: i + 1,
                    detail: e.to_string(),
                })?;
                item.validate().map_err(|detail| EvalError::Item { line: i + 1, detail })?;
                Ok(item)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Richness,
    Relevance,
}

impl Criterion {
    pub const ALL: [Criterion; 2] = [Criterion::Richness, Criterion::Relevance];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Richness => "information richness",
            Criterion::Relevance => "information relevance",
        }
    }

    pub fn definition(self) -> &'static str {
        match self {
            Criterion::Richness => {
                "Prefer the answer that covers the topic in more depth and breadth, giving explanation \
                 and context beyond the bare minimum needed to respond."
            }
            Criterion::Relevance => {
                "Prefer the answer whose content bears directly on the question asked; material that \
                 does not address the question counts against an answer however detailed it is."
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Win,
    Tie,
    Lose,
}

impl Verdict {
    pub fn flipped(self) -> Self {
        match self {
            Verdict::Win => Verdict::Lose,
            Verdict::Tie => Verdict::Tie,
            Verdict::Lose => Verdict::Win,
        }
    }
}

/// A verdict for system A of one item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub criterion: Criterion,
    pub verdict: Verdict,
}

#[derive(Deserialize)]
struct JudgeReply {
    winner: serde_json::Value,
}

/// +1 when the first-shown answer wins, -1 when the second does, 0 for a tie.
async fn judge_once(
    tools: &LlmTools,
    question: &str,
    first: &str,
    second: &str,
    criterion: Criterion,
    trace: &mut Trace,
) -> Result<i8, EvalError> {
    let request = tools.request(
        "judge",
        &[
            ("criterion", criterion.name()),
            ("criterion_definition", criterion.definition()),
            ("question", question),
            ("first", first),
            ("second", second),
        ],
    );
    let reply: JudgeReply = tools.gateway.complete_json(request, "judge", trace).await?;
    let winner = match &reply.winner {
        serde_json::Value::String(s) => s.trim().to_lowercase(),
        serde_json::Value::Number(n) => n.to_string(),
        other => return Err(EvalError::Reply(other.to_string())),
    };
    match winner.as_str() {
        "1" => Ok(1),
        "2" => Ok(-1),
        "tie" => Ok(0),
        other => Err(EvalError::Reply(other.to_string())),
    }
}

/// Judges the item twice with the answers in both positions. Preferences that
/// point in opposite directions cancel to a tie.
pub async fn judge_pair(
    tools: &LlmTools,
    item: &EvalItem,
    criterion: Criterion,
    trace: &mut Trace,
) -> Result<Judgment, EvalError> {
    if item.answer_a.trim() == item.answer_b.trim() {
        return Ok(Judgment {
            criterion,
            verdict: Verdict::Tie,
        });
    }
    let forward = judge_once(tools, &item.question, &item.answer_a, &item.answer_b, criterion, trace).await?;
    let backward = judge_once(tools, &item.question, &item.answer_b, &item.answer_a, criterion, trace).await?;
    let verdict = match (forward - backward).signum() {
        1 => Verdict::Win,
        -1 => Verdict::Lose,
        _ => Verdict::Tie,
    };
    Ok(Judgment { criterion, verdict })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub win: usize,
    pub tie: usize,
    pub lose: usize,
}

impl Counts {
    pub fn total(&self) -> usize {
        self.win + self.tie + self.lose
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceTable {
    pub richness: Counts,
    pub relevance: Counts,
}

impl PreferenceTable {
    pub fn counts(&self, criterion: Criterion) -> &Counts {
        match criterion {
            Criterion::Richness => &self.richness,
            Criterion::Relevance => &self.relevance,
        }
    }
}

pub fn aggregate(judgments: &[Judgment]) -> PreferenceTable {
    let mut table = PreferenceTable::default();
    for j in judgments {
        let c = match j.criterion {
            Criterion::Richness => &mut table.richness,
            Criterion::Relevance => &mut table.relevance,
        };
        match j.verdict {
            Verdict::Win => c.win += 1,
            Verdict::Tie => c.tie += 1,
            Verdict::Lose => c.lose += 1,
        }
    }
    table
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRow {
    pub system_a: String,
    pub system_b: String,
    pub table: PreferenceTable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemJudgment {
    pub item: usize,
    pub criterion: Criterion,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedItem {
    pub item: usize,
    pub criterion: Criterion,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<PreferenceRow>,
    pub judgments: Vec<ItemJudgment>,
    pub skipped: Vec<SkippedItem>,
}

impl EvalReport {
    /// Aligned text table with Win/Tie/Lose columns per criterion.
    pub fn render(&self) -> String {
        let labels: Vec<String> = self.rows.iter().map(|r| format!("{} vs {}", r.system_a, r.system_b)).collect();
        let width = labels.iter().map(|l| l.chars().count()).max().unwrap_or(0).max("Models".len());
        let mut out = String::new();
        let _ = writeln!(out, "{:width$}  {:^14}  {:^14}", "", "Richness", "Relevance");
        let _ = writeln!(out, "{:width$}  {:>4} {:>4} {:>4}  {:>4} {:>4} {:>4}", "Models", "Win", "Tie", "Lose", "Win", "Tie", "Lose");
        for (label, row) in labels.iter().zip(&self.rows) {
            let (r, v) = (row.table.richness, row.table.relevance);
            let _ = writeln!(
                out,
                "{label:width$}  {:>4} {:>4} {:>4}  {:>4} {:>4} {:>4}",
                r.win, r.tie, r.lose, v.win, v.tie, v.lose
            );
        }
        if !self.skipped.is_empty() {
            let _ = writeln!(out, "skipped: {}", self.skipped.len());
        }
        out
    }
}

/// Judges every item on both criteria, `concurrency` items at a time, and
/// tabulates one row per (system A, system B) pair in order of appearance.
pub async fn run_eval(tools: &LlmTools, items: &[EvalItem], concurrency: usize) -> EvalReport {
    let tasks = items
        .iter()
        .enumerate()
        .flat_map(|(i, item)| Criterion::ALL.into_iter().map(move |c| (i, item, c)));
    let outcomes: Vec<(usize, Criterion, Result<Judgment, EvalError>)> = stream::iter(tasks)
        .map(|(i, item, c)| async move {
            let mut trace = Trace::new("eval", i as u32);
            (i, c, judge_pair(tools, item, c, &mut trace).await)
        })
        .buffered(concurrency.max(1))
        .collect()
        .await;

    let mut judgments = Vec::new();
    let mut skipped = Vec::new();
    for (item, criterion, outcome) in outcomes {
        match outcome {
            Ok(j) => judgments.push(ItemJudgment { item, criterion, verdict: j.verdict }),
            Err(e) => skipped.push(SkippedItem { item, criterion, error: e.to_string() }),
        }
    }

    let mut pairs: Vec<(String, String)> = Vec::new();
    for item in items {
        let key = (item.system_a.clone(), item.system_b.clone());
        if !pairs.contains(&key) {
            pairs.push(key);
        }
    }
    let rows = pairs
        .into_iter()
        .map(|(a, b)| {
            let js: Vec<Judgment> = judgments
                .iter()
                .filter(|j| items[j.item].system_a == a && items[j.item].system_b == b)
                .map(|j| Judgment { criterion: j.criterion, verdict: j.verdict })
                .collect();
            PreferenceRow { system_a: a, system_b: b, table: aggregate(&js) }
        })
        .collect();
    EvalReport { rows, judgments, skipped }
}
