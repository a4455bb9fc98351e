//! Model of the bounded issue queue behind the multi-threaded deadlock.
//!
//! The mechanism is a hypothesis: some per-process launch resource fills up
//! while one worker has queued a collective that cannot complete until the
//! others enqueue it too. The checker enumerates every interleaving of
//! CPU-side issues and GPU-side executions and reports any reachable state
//! where nothing can move.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QueueOp {
    Kernel,
    /// Collective with a global id; it completes only once every worker
    /// has enqueued the same id.
    Collective(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssueModel {
    /// Pending-op limit; `None` is unbounded.
    pub capacity: Option<usize>,
    /// Whether the limit is one pool for the whole process or one per worker.
    pub shared: bool,
    /// CPU-side barrier: after issuing a collective a worker issues nothing
    /// until every worker has issued it.
    pub barrier: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transition {
    Issue { worker: usize, op: QueueOp },
    Execute { worker: usize, op: QueueOp },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    /// Every interleaving finishes; `trace` is one of them.
    Completed { trace: Vec<Transition>, states: usize },
    /// A reachable stuck state and the path leading to it.
    Deadlock { trace: Vec<Transition>, issued: Vec<usize>, executed: Vec<usize>, states: usize },
}

impl Outcome {
    pub fn is_deadlock(&self) -> bool {
        matches!(self, Outcome::Deadlock { .. })
    }
}

type State = (Vec<usize>, Vec<usize>);

struct Checker<'a> {
    ops: &'a [Vec<QueueOp>],
    model: IssueModel,
}

impl Checker<'_> {
    fn all_issued(&self, issued: &[usize], id: u32) -> bool {
        self.ops
            .iter()
            .zip(issued)
            .all(|(prog, &n)| prog[..n].contains(&QueueOp::Collective(id)))
    }

    fn successors(&self, (issued, executed): &State) -> Vec<(Transition, State)> {
        let w = self.ops.len();
        let pending_total: usize = (0..w).map(|i| issued[i] - executed[i]).sum();
        let mut out = Vec::new();
        for i in 0..w {
            let prog = &self.ops[i];
            if issued[i] < prog.len() {
                let pending = if self.model.shared { pending_total } else { issued[i] - executed[i] };
                let room = self.model.capacity.is_none_or(|c| pending < c);
                let held = self.model.barrier
                    && issued[i] > 0
                    && matches!(prog[issued[i] - 1], QueueOp::Collective(id) if !self.all_issued(issued, id));
                if room && !held {
                    let mut next = issued.clone();
                    next[i] += 1;
                    out.push((Transition::Issue { worker: i, op: prog[issued[i]] }, (next, executed.clone())));
                }
            }
            if executed[i] < issued[i] {
                let op = prog[executed[i]];
                let ready = match op {
                    QueueOp::Kernel => true,
                    QueueOp::Collective(id) => self.all_issued(issued, id),
                };
                if ready {
                    let mut next = executed.clone();
                    next[i] += 1;
                    out.push((Transition::Execute { worker: i, op }, (issued.clone(), next)));
                }
            }
        }
        out
    }
}

fn path(parents: &HashMap<State, Option<(State, Transition)>>, mut s: State) -> Vec<Transition> {
    let mut trace = Vec::new();
    while let Some(Some((prev, t))) = parents.get(&s) {
        trace.push(*t);
        s = prev.clone();
    }
    trace.reverse();
    trace
}

/// Exhaustive breadth-first search over all interleavings of `schedule`.
pub fn barrier_protocol(schedule: &[Vec<QueueOp>], model: IssueModel) -> Outcome {
    let checker = Checker { ops: schedule, model };
    let w = schedule.len();
    let start: State = (vec![0; w], vec![0; w]);
    let done = |s: &State| (0..w).all(|i| s.1[i] == schedule[i].len());
    let mut parents: HashMap<State, Option<(State, Transition)>> = HashMap::new();
    parents.insert(start.clone(), None);
    let mut queue = VecDeque::from([start]);
    let mut finished = None;
    while let Some(s) = queue.pop_front() {
        if done(&s) {
            finished.get_or_insert_with(|| s.clone());
            continue;
        }
        let next = checker.successors(&s);
        if next.is_empty() {
            return Outcome::Deadlock {
                trace: path(&parents, s.clone()),
                issued: s.0,
                executed: s.1,
                states: parents.len(),
            };
        }
        for (t, n) in next {
            if !parents.contains_key(&n) {
                parents.insert(n.clone(), Some((s.clone(), t)));
                queue.push_back(n);
            }
        }
    }
    let trace = finished.map(|s| path(&parents, s)).unwrap_or_default();
    Outcome::Completed { trace, states: parents.len() }
}
