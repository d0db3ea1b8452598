//! Ordered, streamable record of every pipeline step in one turn.

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::mpsc::UnboundedSender;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    ClarificationAsked,
    PlanChosen,
    QueryRewritten,
    SubqueriesPlanned,
    ShardsSelected,
    ChunksRetrieved,
    Reranked,
    PassagesFused,
    PassagesFiltered,
    SubAnswer,
    FinalDraft,
    CitationsAttached,
    Reflection,
    Polished,
    Warning,
    FinalAnswer,
    Error,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::ClarificationAsked => "clarification_asked",
            EventKind::PlanChosen => "plan_chosen",
            EventKind::QueryRewritten => "query_rewritten",
            EventKind::SubqueriesPlanned => "subqueries_planned",
            EventKind::ShardsSelected => "shards_selected",
            EventKind::ChunksRetrieved => "chunks_retrieved",
            EventKind::Reranked => "reranked",
            EventKind::PassagesFused => "passages_fused",
            EventKind::PassagesFiltered => "passages_filtered",
            EventKind::SubAnswer => "sub_answer",
            EventKind::FinalDraft => "final_draft",
            EventKind::CitationsAttached => "citations_attached",
            EventKind::Reflection => "reflection",
            EventKind::Polished => "polished",
            EventKind::Warning => "warning",
            EventKind::FinalAnswer => "final_answer",
            EventKind::Error => "error",
        }
    }

    /// Events that only a retrieval-route turn may produce.
    pub fn is_retrieval(self) -> bool {
        matches!(
            self,
            EventKind::ShardsSelected
                | EventKind::ChunksRetrieved
                | EventKind::Reranked
                | EventKind::PassagesFused
                | EventKind::PassagesFiltered
        )
    }

    /// Events after which a turn's stream closes.
    pub fn is_terminal(self) -> bool {
        matches!(self, EventKind::FinalAnswer | EventKind::ClarificationAsked | EventKind::Error)
    }
}

/// One gateway call, attached to the first event emitted after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub tag: String,
    pub retries: u32,
    pub latency_ms: u64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub seq: u64,
    pub kind: EventKind,
    pub session_id: String,
    pub turn: u32,
    pub payload: Value,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub calls: Vec<CallRecord>,
    pub ts: DateTime<Utc>,
}

impl TraceEvent {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace events serialize")
    }

    /// JSON without wall-clock fields (`ts`, call latencies), for replay comparison.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("trace events serialize");
        let obj = v.as_object_mut().expect("object");
        obj.remove("ts");
        if let Some(Value::Array(calls)) = obj.get_mut("calls") {
            for c in calls {
                if let Some(c) = c.as_object_mut() {
                    c.remove("latency_ms");
                }
            }
        }
        v.to_string()
    }
}

/// Event recorder for one turn. A root trace numbers events from 0 and forwards
/// them to an optional live sink; a child trace buffers events that the root
/// later absorbs in a deterministic order.
#[derive(Debug)]
pub struct Trace {
    session_id: String,
    turn: u32,
    next_seq: u64,
    events: Vec<TraceEvent>,
    pending_calls: Vec<CallRecord>,
    sink: Option<UnboundedSender<TraceEvent>>,
}

impl Trace {
    pub fn new(session_id: impl Into<String>, turn: u32) -> Self {
        Trace {
            session_id: session_id.into(),
            turn,
            next_seq: 0,
            events: Vec::new(),
            pending_calls: Vec::new(),
            sink: None,
        }
    }

    pub fn with_sink(mut self, sink: UnboundedSender<TraceEvent>) -> Self {
        self.sink = Some(sink);
        self
    }

    pub fn child(&self) -> Trace {
        Trace::new(self.session_id.clone(), self.turn)
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn turn(&self) -> u32 {
        self.turn
    }

    pub fn record_call(&mut self, call: CallRecord) {
        self.pending_calls.push(call);
    }

    pub fn emit(&mut self, kind: EventKind, payload: Value) {
        let event = TraceEvent {
            seq: self.next_seq,
            kind,
            session_id: self.session_id.clone(),
            turn: self.turn,
            payload,
            calls: std::mem::take(&mut self.pending_calls),
            ts: Utc::now(),
        };
        self.push(event);
    }

    fn push(&mut self, event: TraceEvent) {
        self.next_seq += 1;
        if let Some(sink) = &self.sink {
            // a closed receiver only means nobody is watching live
            let _ = sink.send(event.clone());
        }
        self.events.push(event);
    }

    pub fn warn(&mut self, step: &str, message: impl Into<String>) {
        self.emit(
            EventKind::Warning,
            serde_json::json!({ "step": step, "message": message.into() }),
        );
    }

    /// Appends a child's events (renumbered) and carries over its unattached calls.
    pub fn absorb(&mut self, child: Trace) {
        for mut event in child.events {
            if !self.pending_calls.is_empty() {
                let mut calls = std::mem::take(&mut self.pending_calls);
                calls.append(&mut event.calls);
                event.calls = calls;
            }
            event.seq = self.next_seq;
            self.push(event);
        }
        self.pending_calls.extend(child.pending_calls);
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn into_events(self) -> Vec<TraceEvent> {
        self.events
    }

    pub fn has_pending_calls(&self) -> bool {
        !self.pending_calls.is_empty()
    }
}
