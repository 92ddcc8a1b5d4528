//! Completion graphs: deferred posts and callables with a partial order.
//! A node fires once all of its predecessors have completed.

use std::fmt;
use std::sync::atomic::{AtomicU8, AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

use parking_lot::Mutex;

use super::Comp;
use crate::error::{Error, Result};
use crate::types::{State, Status};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphState {
    Building,
    Running,
    Done,
}

type PostFn = dyn FnMut(Comp) -> Result<Status> + Send;
type CallFn = dyn FnOnce() + Send;

pub enum GraphAction {
    /// A communication to post when the node fires. It receives the
    /// completion handle that marks this node complete and returns the
    /// posting status.
    Post(Box<PostFn>),
    /// Runs inline when the node fires and completes immediately.
    Call(Box<CallFn>),
}

impl GraphAction {
    pub fn post(f: impl FnMut(Comp) -> Result<Status> + Send + 'static) -> Self {
        GraphAction::Post(Box::new(f))
    }

    pub fn call(f: impl FnOnce() + Send + 'static) -> Self {
        GraphAction::Call(Box::new(f))
    }
}

impl fmt::Debug for GraphAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GraphAction::Post(_) => f.write_str("GraphAction::Post"),
            GraphAction::Call(_) => f.write_str("GraphAction::Call"),
        }
    }
}

struct Building {
    actions: Vec<GraphAction>,
    edges: Vec<(usize, usize)>,
}

struct RunNode {
    action: Mutex<Option<GraphAction>>,
    pending: AtomicUsize,
    successors: Vec<usize>,
}

struct Run {
    nodes: Vec<RunNode>,
    remaining: AtomicUsize,
    retry: Mutex<Vec<usize>>,
    error: Mutex<Option<Error>>,
}

struct Shared {
    building: Mutex<Option<Building>>,
    run: OnceLock<Run>,
    state: AtomicU8,
}

const BUILDING: u8 = 0;
const RUNNING: u8 = 1;
const DONE: u8 = 2;

/// Single-shot completion graph.
#[derive(Clone)]
pub struct Graph {
    shared: Arc<Shared>,
}

/// Completion handle for one node of a running graph.
#[derive(Clone)]
pub struct GraphNode {
    shared: Arc<Shared>,
    node: usize,
}

impl GraphNode {
    pub fn id(&self) -> NodeId {
        NodeId(self.node)
    }

    pub(crate) fn signal(&self, _status: Status) {
        let g = Graph {
            shared: self.shared.clone(),
        };
        g.complete(self.node);
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph {
            shared: Arc::new(Shared {
                building: Mutex::new(Some(Building {
                    actions: Vec::new(),
                    edges: Vec::new(),
                })),
                run: OnceLock::new(),
                state: AtomicU8::new(BUILDING),
            }),
        }
    }

    pub fn add_node(&self, action: GraphAction) -> Result<NodeId> {
        let mut b = self.shared.building.lock();
        let b = b
            .as_mut()
            .ok_or_else(|| Error::invalid("graph already started"))?;
        b.actions.push(action);
        Ok(NodeId(b.actions.len() - 1))
    }

    /// `to` starts only after `from` completes.
    pub fn add_edge(&self, from: NodeId, to: NodeId) -> Result<()> {
        let mut b = self.shared.building.lock();
        let b = b
            .as_mut()
            .ok_or_else(|| Error::invalid("graph already started"))?;
        let n = b.actions.len();
        if from.0 >= n || to.0 >= n {
            return Err(Error::invalid("edge names an unknown node"));
        }
        b.edges.push((from.0, to.0));
        Ok(())
    }

    /// Fire every node without predecessors. Fails on a cycle.
    pub fn start(&self) -> Result<()> {
        let building = {
            let mut guard = self.shared.building.lock();
            let b = guard
                .as_ref()
                .ok_or_else(|| Error::invalid("graph already started"))?;
            check_acyclic(b.actions.len(), &b.edges)?;
            guard.take().unwrap()
        };
        let n = building.actions.len();
        let mut indeg = vec![0usize; n];
        let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(u, v) in &building.edges {
            indeg[v] += 1;
            succ[u].push(v);
        }
        let nodes = building
            .actions
            .into_iter()
            .zip(indeg.iter().zip(succ))
            .map(|(a, (&d, s))| RunNode {
                action: Mutex::new(Some(a)),
                pending: AtomicUsize::new(d),
                successors: s,
            })
            .collect();
        let run = Run {
            nodes,
            remaining: AtomicUsize::new(n),
            retry: Mutex::new(Vec::new()),
            error: Mutex::new(None),
        };
        if self.shared.run.set(run).is_err() {
            return Err(Error::invalid("graph already started"));
        }
        if n == 0 {
            self.shared.state.store(DONE, Ordering::Release);
            return Ok(());
        }
        self.shared.state.store(RUNNING, Ordering::Release);
        let roots: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        self.fire_all(roots);
        Ok(())
    }

    pub fn state(&self) -> GraphState {
        match self.shared.state.load(Ordering::Acquire) {
            BUILDING => GraphState::Building,
            RUNNING => GraphState::Running,
            _ => GraphState::Done,
        }
    }

    /// Re-attempt nodes whose post asked for a retry, then report state.
    pub fn test(&self) -> Result<GraphState> {
        if let Some(run) = self.shared.run.get() {
            if let Some(e) = run.error.lock().take() {
                return Err(e);
            }
            let retry = std::mem::take(&mut *run.retry.lock());
            if !retry.is_empty() {
                self.fire_all(retry);
            }
        }
        Ok(self.state())
    }

    pub fn node_comp(&self, node: NodeId) -> Comp {
        Comp::Graph(GraphNode {
            shared: self.shared.clone(),
            node: node.0,
        })
    }

    fn fire_all(&self, mut ready: Vec<usize>) {
        let run = self.shared.run.get().expect("graph running");
        while let Some(i) = ready.pop() {
            let action = run.nodes[i].action.lock().take();
            let completed = match action {
                Some(GraphAction::Call(f)) => {
                    f();
                    true
                }
                Some(GraphAction::Post(mut f)) => match f(self.node_comp(NodeId(i))) {
                    Ok(s) => match s.state {
                        State::Done => true,
                        State::Posted => false,
                        State::Retry(_) => {
                            *run.nodes[i].action.lock() = Some(GraphAction::Post(f));
                            run.retry.lock().push(i);
                            false
                        }
                    },
                    Err(e) => {
                        run.error.lock().get_or_insert(e);
                        false
                    }
                },
                None => false,
            };
            if completed {
                self.release(i, &mut ready);
            }
        }
    }

    fn complete(&self, node: usize) {
        let mut ready = Vec::new();
        self.release(node, &mut ready);
        if !ready.is_empty() {
            self.fire_all(ready);
        }
    }

    fn release(&self, node: usize, ready: &mut Vec<usize>) {
        let run = self.shared.run.get().expect("graph running");
        for &s in &run.nodes[node].successors {
            if run.nodes[s].pending.fetch_sub(1, Ordering::AcqRel) == 1 {
                ready.push(s);
            }
        }
        if run.remaining.fetch_sub(1, Ordering::AcqRel) == 1 {
            self.shared.state.store(DONE, Ordering::Release);
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("state", &self.state())
            .finish()
    }
}

fn check_acyclic(n: usize, edges: &[(usize, usize)]) -> Result<()> {
    let mut indeg = vec![0usize; n];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(u, v) in edges {
        indeg[v] += 1;
        succ[u].push(v);
    }
    let mut stack: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut seen = 0;
    while let Some(u) = stack.pop() {
        seen += 1;
        for &v in &succ[u] {
            indeg[v] -= 1;
            if indeg[v] == 0 {
                stack.push(v);
            }
        }
    }
    if seen == n {
        Ok(())
    } else {
        Err(Error::invalid("graph contains a cycle"))
    }
}
