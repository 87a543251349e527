//! Generation plans: tasks, their dependency graph and the order in which
//! files are written.
//!
//! Edges follow the folder tiers of an OpenFOAM case. Every `system/` file
//! precedes every `constant/` file, every `constant/` file precedes every `0/`
//! file, all of them precede auxiliary scripts, and `system/controlDict`
//! precedes the rest of `system/` because it names the solver.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Folder tier of a case file, in generation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    System,
    Constant,
    Initial,
    Auxiliary,
}

impl Tier {
    pub fn of(path: &str) -> Tier {
        match path.split('/').next().unwrap_or("") {
            "system" if path.contains('/') => Tier::System,
            "constant" if path.contains('/') => Tier::Constant,
            "0" if path.contains('/') => Tier::Initial,
            _ => Tier::Auxiliary,
        }
    }

    pub fn rank(self) -> i32 {
        self as i32
    }
}

/// Default priority for a path: the tier scaled by 100, with `controlDict`
/// pulled to the front of its tier.
pub fn default_priority(path: &str) -> i32 {
    let bump = if path == "system/controlDict" { 0 } else { 10 };
    Tier::of(path).rank() * 100 + bump
}

/// One file to generate: target path, priority and retrieved constraints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub file: String,
    pub priority: i32,
    #[serde(default)]
    pub constraints: String,
}

impl Task {
    pub fn new(file: impl Into<String>) -> Self {
        let file = file.into();
        Self {
            priority: default_priority(&file),
            file,
            constraints: String::new(),
        }
    }

    pub fn tier(&self) -> Tier {
        Tier::of(&self.file)
    }

    /// Directory part of the path, empty for files at the case root.
    pub fn folder(&self) -> &str {
        self.file.rsplit_once('/').map(|(d, _)| d).unwrap_or("")
    }

    pub fn file_name(&self) -> &str {
        self.file
            .rsplit_once('/')
            .map(|(_, f)| f)
            .unwrap_or(&self.file)
    }

    fn sort_key(&self) -> (Tier, i32, &str) {
        (self.tier(), self.priority, &self.file)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("dependency cycle: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("edge ({0}, {1}) references a missing task")]
    DanglingEdge(usize, usize),
}

/// Directed graph over task indices.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyGraph {
    vertices: usize,
    edges: Vec<(usize, usize)>,
}

impl DependencyGraph {
    pub fn new(vertices: usize, edges: Vec<(usize, usize)>) -> Result<Self, GraphError> {
        if let Some(&(a, b)) = edges.iter().find(|(a, b)| *a >= vertices || *b >= vertices) {
            return Err(GraphError::DanglingEdge(a, b));
        }
        Ok(Self { vertices, edges })
    }

    /// Tier edges for a task list.
    pub fn derive(tasks: &[Task]) -> Self {
        let mut edges = Vec::new();
        for (i, a) in tasks.iter().enumerate() {
            for (j, b) in tasks.iter().enumerate() {
                if i != j && depends_on(&b.file, &a.file) {
                    edges.push((i, j));
                }
            }
        }
        Self {
            vertices: tasks.len(),
            edges,
        }
    }

    pub fn vertices(&self) -> usize {
        self.vertices
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Predecessor set of task `i`, ascending.
    pub fn pre(&self, i: usize) -> Vec<usize> {
        let mut pre: Vec<usize> = self
            .edges
            .iter()
            .filter(|(_, s)| *s == i)
            .map(|(p, _)| *p)
            .collect();
        pre.sort_unstable();
        pre.dedup();
        pre
    }
}

/// Whether the file at `succ` depends on the file at `pred`.
fn depends_on(succ: &str, pred: &str) -> bool {
    use Tier::*;
    match (Tier::of(pred), Tier::of(succ)) {
        (System, Constant) | (Constant, Initial) => true,
        (System | Constant | Initial, Auxiliary) => true,
        (System, System) => pred == "system/controlDict" && succ != pred,
        _ => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub tasks: Vec<Task>,
    pub graph: DependencyGraph,
}

impl Plan {
    /// Builds a plan with tier-derived edges. Duplicate paths keep the first.
    pub fn from_tasks(tasks: Vec<Task>) -> Self {
        let mut seen = std::collections::HashSet::new();
        let tasks: Vec<Task> = tasks
            .into_iter()
            .filter(|t| seen.insert(t.file.clone()))
            .collect();
        let graph = DependencyGraph::derive(&tasks);
        Self { tasks, graph }
    }

    pub fn with_graph(tasks: Vec<Task>, graph: DependencyGraph) -> Result<Self, GraphError> {
        if graph.vertices() != tasks.len() {
            return Err(GraphError::DanglingEdge(graph.vertices(), tasks.len()));
        }
        Ok(Self { tasks, graph })
    }

    pub fn contains(&self, path: &str) -> bool {
        self.tasks.iter().any(|t| t.file == path)
    }

    pub fn index_of(&self, path: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.file == path)
    }

    /// Appends a task unless its path is already planned and re-derives the
    /// tier edges.
    pub fn push(&mut self, task: Task) {
        if !self.contains(&task.file) {
            self.tasks.push(task);
            self.graph = DependencyGraph::derive(&self.tasks);
        }
    }
}

impl fmt::Display for Plan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for task in &self.tasks {
            writeln!(f, "{} (priority {})", task.file, task.priority)?;
        }
        Ok(())
    }
}

/// Kahn's algorithm that always emits the ready task with the smallest
/// (tier, priority, path) key. Returns task indices.
pub fn topological_indices(plan: &Plan) -> Result<Vec<usize>, GraphError> {
    let n = plan.tasks.len();
    let mut indegree = vec![0usize; n];
    let mut succ = vec![Vec::new(); n];
    for &(p, s) in plan.graph.edges() {
        indegree[s] += 1;
        succ[p].push(s);
    }

    let key = |i: usize| {
        let (tier, prio, path) = plan.tasks[i].sort_key();
        Reverse((tier, prio, path.to_string(), i))
    };
    let mut ready: BinaryHeap<_> = (0..n).filter(|&i| indegree[i] == 0).map(key).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse((_, _, _, i))) = ready.pop() {
        order.push(i);
        for &s in &succ[i] {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.push(key(s));
            }
        }
    }

    if order.len() == n {
        Ok(order)
    } else {
        let cycle = find_cycle(&indegree, &succ);
        Err(GraphError::Cycle(
            cycle
                .into_iter()
                .map(|i| plan.tasks[i].file.clone())
                .collect(),
        ))
    }
}

/// Tasks in dependency order.
pub fn topological_order(plan: &Plan) -> Result<Vec<Task>, GraphError> {
    Ok(topological_indices(plan)?
        .into_iter()
        .map(|i| plan.tasks[i].clone())
        .collect())
}

/// Finds a cycle among the vertices Kahn could not remove. Each of them still
/// has an unremoved predecessor, so walking predecessors must revisit a vertex.
fn find_cycle(indegree: &[usize], succ: &[Vec<usize>]) -> Vec<usize> {
    let stuck = |v: usize| indegree[v] > 0;
    let Some(start) = (0..indegree.len()).find(|&v| stuck(v)) else {
        return Vec::new();
    };
    let mut pred = vec![Vec::new(); indegree.len()];
    for (p, ss) in succ.iter().enumerate() {
        for &s in ss {
            if stuck(p) && stuck(s) {
                pred[s].push(p);
            }
        }
    }
    let mut position = vec![None; indegree.len()];
    let mut path = Vec::new();
    let mut v = start;
    loop {
        if let Some(at) = position[v] {
            let mut cycle: Vec<usize> = path[at..].to_vec();
            cycle.reverse();
            return cycle;
        }
        position[v] = Some(path.len());
        path.push(v);
        v = pred[v][0];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(paths: &[&str]) -> Plan {
        Plan::from_tasks(paths.iter().map(|p| Task::new(*p)).collect())
    }

    fn files(tasks: &[Task]) -> Vec<&str> {
        tasks.iter().map(|t| t.file.as_str()).collect()
    }

    #[test]
    fn orders_the_three_tiers() {
        let p = plan(&["0/U", "constant/transportProperties", "system/controlDict"]);
        let order = topological_order(&p).unwrap();
        assert_eq!(
            files(&order),
            ["system/controlDict", "constant/transportProperties", "0/U"]
        );
    }

    #[test]
    fn single_task() {
        let p = plan(&["system/fvSchemes"]);
        assert_eq!(files(&topological_order(&p).unwrap()), ["system/fvSchemes"]);
    }

    #[test]
    fn two_cycle_is_reported() {
        let tasks = vec![Task::new("a"), Task::new("b")];
        let graph = DependencyGraph::new(2, vec![(0, 1), (1, 0)]).unwrap();
        let err = topological_order(&Plan::with_graph(tasks, graph).unwrap()).unwrap_err();
        match err {
            GraphError::Cycle(mut c) => {
                c.sort();
                assert_eq!(c, ["a", "b"]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn cycle_behind_a_tail_is_isolated() {
        // 0 -> 1 -> 2 -> 1, 2 -> 3: the cycle is {1, 2}; 3 is stuck but not in it.
        let tasks = ["x", "y", "z", "w"].map(Task::new).to_vec();
        let graph = DependencyGraph::new(4, vec![(0, 1), (1, 2), (2, 1), (2, 3)]).unwrap();
        let err = topological_indices(&Plan::with_graph(tasks, graph).unwrap()).unwrap_err();
        let GraphError::Cycle(mut c) = err else {
            panic!()
        };
        c.sort();
        assert_eq!(c, ["y", "z"]);
    }

    #[test]
    fn control_dict_leads_system_tier() {
        let p = plan(&[
            "system/fvSchemes",
            "system/blockMeshDict",
            "system/controlDict",
        ]);
        let order = topological_order(&p).unwrap();
        assert_eq!(order[0].file, "system/controlDict");
        assert!(p
            .graph
            .pre(p.index_of("system/fvSchemes").unwrap())
            .contains(&2));
    }

    #[test]
    fn scripts_come_last() {
        let p = plan(&["Allrun", "0/p", "system/controlDict"]);
        assert_eq!(
            files(&topological_order(&p).unwrap()),
            ["system/controlDict", "0/p", "Allrun"]
        );
    }

    #[test]
    fn dangling_edges_are_rejected() {
        assert_eq!(
            DependencyGraph::new(2, vec![(0, 2)]),
            Err(GraphError::DanglingEdge(0, 2))
        );
    }

    #[test]
    fn tiers_from_paths() {
        assert_eq!(Tier::of("system/controlDict"), Tier::System);
        assert_eq!(Tier::of("0/U"), Tier::Initial);
        assert_eq!(Tier::of("0/include/initialConditions"), Tier::Initial);
        assert_eq!(Tier::of("Allrun"), Tier::Auxiliary);
        assert_eq!(Tier::of("mesh/make_mesh.py"), Tier::Auxiliary);
        assert_eq!(default_priority("system/controlDict"), 0);
        assert_eq!(default_priority("0/U"), 210);
    }
}
