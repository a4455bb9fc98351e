//! Event order for the LM-head backward when the head is replicated.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmHeadPlan {
    pub workers: usize,
    pub ga_steps: usize,
    /// Cross-entropy chunks per micro-batch.
    pub chunks: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Main,
    Copy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmHeadOp {
    WeightGrad,
    InputGrad,
    /// Send of the accumulated LM-head gradient to the other workers.
    SendHeadGrad,
    /// Synchronization of the embedding gradient after the blocks.
    SyncEmbeddingGrad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleEvent {
    /// Slot on the main-stream clock when the event starts.
    pub t: usize,
    /// 1-based micro-batch index within the accumulation window.
    pub micro_step: usize,
    pub chunk: Option<usize>,
    pub stream: Stream,
    pub op: LmHeadOp,
}

/// Per chunk, the weight-gradient matmul is issued before the
/// input-gradient matmul so that, in the last chunk of the last micro-batch,
/// the gradient send (copy stream) overlaps the input-gradient work.
/// Gradients of replicated parameters are only synchronized in the last
/// micro-batch.
pub fn schedule_lmhead_backward(plan: &LmHeadPlan) -> Vec<ScheduleEvent> {
    let chunks = plan.chunks.max(1);
    let mut events = Vec::new();
    let mut t = 0;
    for step in 1..=plan.ga_steps {
        let last_step = step == plan.ga_steps;
        for c in 1..=chunks {
            let ev = |t, stream, op| ScheduleEvent { t, micro_step: step, chunk: Some(c), stream, op };
            events.push(ev(t, Stream::Main, LmHeadOp::WeightGrad));
            t += 1;
            if last_step && c == chunks && plan.workers > 1 {
                events.push(ev(t, Stream::Copy, LmHeadOp::SendHeadGrad));
            }
            events.push(ev(t, Stream::Main, LmHeadOp::InputGrad));
            t += 1;
        }
        if last_step && plan.workers > 1 {
            events.push(ScheduleEvent {
                t,
                micro_step: step,
                chunk: None,
                stream: Stream::Copy,
                op: LmHeadOp::SyncEmbeddingGrad,
            });
        }
    }
    events
}
