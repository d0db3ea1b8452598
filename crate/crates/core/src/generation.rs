//! Grounded answer generation and sentence-level citation by BM25 matching.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::index::{Bm25Corpus, Bm25Params};
use crate::llm::LlmError;
use crate::postprocess::{numbered_passages, Passage};
use crate::query_tools::{format_history, HistoryTurn, LlmTools};
use crate::text::index_terms;
use crate::trace::Trace;

pub const GENERATION_TEMPERATURE: f64 = 0.3;
pub const DEFAULT_MIN_CITED_TOKENS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerDraft {
    pub text: String,
    /// Source ids of the passages offered in the prompt.
    pub used_passage_ids: Vec<String>,
}

/// Byte offsets into the answer text, end exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Citation {
    pub sentence_index: usize,
    pub source_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnswerWithCitations {
    pub text: String,
    pub sentences: Vec<Span>,
    pub citations: Vec<Citation>,
}

impl AnswerWithCitations {
    /// An answer with sentence spans and no citations (direct route).
    pub fn uncited(text: String) -> Self {
        AnswerWithCitations {
            sentences: split_sentences(&text),
            text,
            citations: Vec::new(),
        }
    }

    pub fn sentence(&self, i: usize) -> &str {
        let s = self.sentences[i];
        &self.text[s.start..s.end]
    }

    /// Cited source ids in order of first citation.
    pub fn cited_sources(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.citations
            .iter()
            .filter(|c| seen.insert(c.source_id.clone()))
            .map(|c| c.source_id.clone())
            .collect()
    }

    /// Text with an inline `[n]` after each cited sentence, `n` indexing `cited_sources()` from 1.
    pub fn render_with_markers(&self) -> String {
        let sources = self.cited_sources();
        let mut out = String::with_capacity(self.text.len() + 8 * self.citations.len());
        for (i, span) in self.sentences.iter().enumerate() {
            let sentence = &self.text[span.start..span.end];
            match self.citations.iter().find(|c| c.sentence_index == i) {
                Some(c) => {
                    let n = sources.iter().position(|s| *s == c.source_id).expect("cited source") + 1;
                    let body = sentence.trim_end();
                    out.push_str(body);
                    out.push_str(&format!(" [{n}]"));
                    out.push_str(&sentence[body.len()..]);
                }
                None => out.push_str(sentence),
            }
        }
        out
    }
}

pub async fn generate(
    tools: &LlmTools,
    query_text: &str,
    passages: &[Passage],
    history: &[HistoryTurn],
    trace: &mut Trace,
) -> Result<AnswerDraft, LlmError> {
    let hist = format_history(history);
    let request = if passages.is_empty() {
        tools.request("direct", &[("query", query_text), ("history", &hist)])
    } else {
        let listing = numbered_passages(passages);
        tools.request("generate", &[("query", query_text), ("history", &hist), ("passages", &listing)])
    };
    let text = tools
        .gateway
        .complete(request.temperature(GENERATION_TEMPERATURE), trace)
        .await?;
    Ok(AnswerDraft {
        text: text.trim().to_string(),
        used_passage_ids: passages.iter().map(|p| p.source_id.clone()).collect(),
    })
}

/// One generation call turning (sub-query, sub-answer) pairs into the final draft.
pub async fn compose(
    tools: &LlmTools,
    query_text: &str,
    sub_answers: &[(String, String)],
    used_passage_ids: Vec<String>,
    trace: &mut Trace,
) -> Result<AnswerDraft, LlmError> {
    let listing = sub_answers
        .iter()
        .enumerate()
        .map(|(i, (q, a))| format!("{}. {q}\n{a}", i + 1))
        .collect::<Vec<_>>()
        .join("\n\n");
    let request = tools.request("compose", &[("query", query_text), ("sub_answers", &listing)]);
    let text = tools
        .gateway
        .complete(request.temperature(GENERATION_TEMPERATURE), trace)
        .await?;
    Ok(AnswerDraft {
        text: text.trim().to_string(),
        used_passage_ids,
    })
}

const ABBREVIATIONS: &[&str] = &["e.g.", "i.e.", "al.", "fig.", "figs.", "eq.", "eqs.", "cf.", "vs."];
const CLOSERS: &[char] = &['"', '\'', ')', ']', '”', '’'];

fn ends_with_abbreviation(text: &str, dot_end: usize) -> bool {
    let head = &text[..dot_end];
    let word = head.rsplit(char::is_whitespace).next().unwrap_or(head);
    let word = word.trim_start_matches(['(', '[', '"']).to_lowercase();
    ABBREVIATIONS.contains(&word.as_str())
}

/// Sentence spans tiling `text`: a sentence ends at `.`, `!` or `?` (plus closing
/// quotes or brackets) followed by whitespace or the end, unless the period ends
/// a known abbreviation. Trailing whitespace belongs to the sentence before it.
pub fn split_sentences(text: &str) -> Vec<Span> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    let byte_at = |i: usize| if i < n { chars[i].0 } else { text.len() };
    let mut spans = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < n {
        let c = chars[i].1;
        if !matches!(c, '.' | '!' | '?') {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        while j < n && (matches!(chars[j].1, '.' | '!' | '?') || CLOSERS.contains(&chars[j].1)) {
            j += 1;
        }
        let at_boundary = j == n || chars[j].1.is_whitespace();
        let run_is_single_period = c == '.' && j == i + 1;
        if at_boundary && !(run_is_single_period && ends_with_abbreviation(text, byte_at(i + 1))) {
            while j < n && chars[j].1.is_whitespace() {
                j += 1;
            }
            let end = byte_at(j);
            spans.push(Span { start, end });
            start = end;
        }
        i = j;
    }
    if start < text.len() {
        spans.push(Span { start, end: text.len() });
    }
    spans
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CitationConfig {
    pub params: Bm25Params,
    /// Sentences with fewer index terms are never cited.
    pub min_sentence_tokens: usize,
}

impl Default for CitationConfig {
    fn default() -> Self {
        CitationConfig {
            params: Bm25Params::default(),
            min_sentence_tokens: DEFAULT_MIN_CITED_TOKENS,
        }
    }
}

/// Cites, for every long-enough sentence, the passage with the highest BM25 score
/// when that score is positive. Passages form a mini corpus, one document each;
/// only passages offered to the generator are eligible; ties go to the lowest source id.
pub fn attach_citations(draft: &AnswerDraft, passages: &[Passage], cfg: &CitationConfig) -> AnswerWithCitations {
    let offered: BTreeSet<&str> = draft.used_passage_ids.iter().map(String::as_str).collect();
    let mut docs: Vec<&Passage> = passages
        .iter()
        .filter(|p| offered.contains(p.source_id.as_str()))
        .collect();
    docs.sort_by(|a, b| a.source_id.cmp(&b.source_id));
    docs.dedup_by(|b, a| a.source_id == b.source_id);
    let corpus = Bm25Corpus::from_terms(docs.iter().map(|p| index_terms(&p.text)), cfg.params);

    let sentences = split_sentences(&draft.text);
    let mut citations = Vec::new();
    for (i, span) in sentences.iter().enumerate() {
        let terms = index_terms(&draft.text[span.start..span.end]);
        if terms.len() < cfg.min_sentence_tokens || docs.is_empty() {
            continue;
        }
        let scores = corpus.score_all(&terms);
        let mut best: Option<(usize, f64)> = None;
        for (d, &s) in scores.iter().enumerate() {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((d, s));
            }
        }
        if let Some((d, score)) = best.filter(|(_, s)| *s > 0.0) {
            citations.push(Citation {
                sentence_index: i,
                source_id: docs[d].source_id.clone(),
                score,
            });
        }
    }
    AnswerWithCitations {
        text: draft.text.clone(),
        sentences,
        citations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(text: &str) -> Vec<&str> {
        split_sentences(text).iter().map(|s| &text[s.start..s.end]).collect()
    }

    #[test]
    fn splits_simple_sentences() {
        assert_eq!(texts("A is B. C is D."), vec!["A is B. ", "C is D."]);
        assert!(split_sentences("").is_empty());
    }

    #[test]
    fn abbreviations_do_not_split() {
        assert_eq!(texts("See et al. 2023 for details."), vec!["See et al. 2023 for details."]);
        assert_eq!(texts("Methods (e.g. PPO) work. See Fig. 3 now!"), vec!["Methods (e.g. PPO) work. ", "See Fig. 3 now!"]);
        assert_eq!(texts("Value is 3.5 here? Yes."), vec!["Value is 3.5 here? ", "Yes."]);
    }

    #[test]
    fn closing_quotes_and_trailing_fragment() {
        assert_eq!(texts("He said \"stop.\" Then left"), vec!["He said \"stop.\" ", "Then left"]);
        assert_eq!(texts("  lead. x"), vec!["  lead. ", "x"]);
    }

    #[test]
    fn spans_reconstruct_text() {
        let t = "One. Two!  Three?\nFour… five. ünï. ";
        let joined: String = texts(t).concat();
        assert_eq!(joined, t);
    }

    fn passage(id: &str, text: &str) -> Passage {
        Passage {
            source_id: id.into(),
            text: text.into(),
            member_chunks: vec![format!("{id}#0")],
            best_score: 1.0,
            is_web: false,
        }
    }

    #[test]
    fn verbatim_sentence_cites_its_passage() {
        let passages = vec![
            passage("p1", "alpha beta gamma delta epsilon zeta"),
            passage("p2", "one two three four five six"),
        ];
        let draft = AnswerDraft {
            text: "one two three four five six. Yes it is. Nothing shared here at all today.".into(),
            used_passage_ids: vec!["p1".into(), "p2".into()],
        };
        let a = attach_citations(&draft, &passages, &CitationConfig::default());
        assert_eq!(a.sentences.len(), 3);
        assert_eq!(a.citations.len(), 1);
        assert_eq!(a.citations[0].sentence_index, 0);
        assert_eq!(a.citations[0].source_id, "p2");
        assert_eq!(a.render_with_markers(), "one two three four five six. [1] Yes it is. Nothing shared here at all today.");
    }

    #[test]
    fn only_offered_passages_are_cited() {
        let passages = vec![passage("p1", "one two three four five six")];
        let draft = AnswerDraft {
            text: "one two three four five six.".into(),
            used_passage_ids: vec![],
        };
        assert!(attach_citations(&draft, &passages, &CitationConfig::default()).citations.is_empty());
    }
}
