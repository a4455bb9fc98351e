use serde::{Deserialize, Serialize};

use super::{Stream, WorkerGroup};

/// One protocol event, timestamped on a simulated clock in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub time: f64,
    pub worker: usize,
    pub stream: Stream,
    pub op: String,
    pub bytes: u64,
}

pub fn to_jsonl(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("trace events serialise"));
        out.push('\n');
    }
    out
}

fn copy_events(group: &WorkerGroup, worker: usize, t: f64, bytes: u64, label: &str, out: &mut Vec<TraceEvent>) -> f64 {
    let dt = bytes as f64 / group.topology.link_bandwidth;
    if group.topology.p2p {
        out.push(TraceEvent { time: t, worker, stream: Stream::Copy, op: format!("{label}.p2p"), bytes });
        t + dt
    } else {
        out.push(TraceEvent { time: t, worker, stream: Stream::Copy, op: format!("{label}.d2h"), bytes });
        out.push(TraceEvent { time: t + dt, worker, stream: Stream::Copy, op: format!("{label}.h2d"), bytes });
        t + 2.0 * dt
    }
}

/// Timeline of one reduce-scatter: local add on the main stream, W-1 copy
/// rounds on the copy stream (free to overlap the next layer's backward),
/// then the final reduction back on the main stream.
///
/// `add_time` is the duration of one chunk add.
pub fn reduce_scatter_trace(group: &WorkerGroup, chunk_bytes: u64, t0: f64, add_time: f64) -> Vec<TraceEvent> {
    let w = group.workers;
    let mut ev = Vec::new();
    for worker in 0..w {
        ev.push(TraceEvent { time: t0, worker, stream: Stream::Main, op: "local_add".into(), bytes: chunk_bytes });
    }
    let mut t = t0 + add_time;
    for r in 1..w {
        let mut end = t;
        for worker in 0..w {
            end = end.max(copy_events(group, worker, t, chunk_bytes, &format!("copy.round{r}"), &mut ev));
        }
        t = end;
    }
    for r in 1..w {
        for worker in 0..w {
            ev.push(TraceEvent {
                time: t,
                worker,
                stream: Stream::Main,
                op: format!("reduce.round{r}"),
                bytes: chunk_bytes,
            });
        }
        t += add_time;
    }
    ev
}

/// Timeline of an all-gather: every worker pulls the W-1 shards it does not own.
pub fn all_gather_trace(group: &WorkerGroup, shard_bytes: u64, t0: f64) -> Vec<TraceEvent> {
    let w = group.workers;
    let mut ev = Vec::new();
    let mut t = t0;
    for r in 1..w {
        let mut end = t;
        for worker in 0..w {
            end = end.max(copy_events(group, worker, t, shard_bytes, &format!("gather.round{r}"), &mut ev));
        }
        t = end;
    }
    ev
}
