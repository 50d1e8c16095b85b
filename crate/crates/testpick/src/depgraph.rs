//! Build dependency graph: files, libraries and test targets connected by
//! "depends on" edges, with the reachability and distance queries that drive
//! test selection.
//!
//! An edge `(a, b)` means `b` directly depends on `a`, so impact flows in
//! edge direction. The graph is validated once at construction (acyclic,
//! files are sources, tests are sinks) and is immutable afterwards; all
//! queries are pure.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Distance reported for test targets that are not reachable from any
/// modified file. Kept fixed (rather than derived from a particular graph)
/// so feature values and trained models stay comparable across graph
/// snapshots; recorded in the feature schema metadata.
pub const UNREACHABLE_DISTANCE: u32 = 1 << 20;

/// Stable identifier of a graph node (file, library or test target).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    File,
    Library,
    Test,
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeKind::File => f.write_str("file"),
            NodeKind::Library => f.write_str("library"),
            NodeKind::Test => f.write_str("test"),
        }
    }
}

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("duplicate node `{0}`")]
    DuplicateNode(NodeId),
    #[error("edge endpoint `{0}` is not a declared node")]
    UnknownEndpoint(NodeId),
    #[error("dependency cycle detected through `{0}`")]
    CycleDetected(NodeId),
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("`{0}` is a {1}, expected a {2}")]
    WrongKind(NodeId, NodeKind, NodeKind),
    #[error("file `{0}` has an incoming edge from `{1}`; files must be sources")]
    FileWithIncomingEdge(NodeId, NodeId),
    #[error("test `{0}` has an outgoing edge to `{1}`; tests must be sinks")]
    TestWithOutgoingEdge(NodeId, NodeId),
    #[error("graph has {0} nodes, exceeding the supported maximum of {max}", max = UNREACHABLE_DISTANCE - 1)]
    TooManyNodes(usize),
    #[error("{path}:{line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("failed to read graph file: {0}")]
    Io(#[from] std::io::Error),
}

/// Immutable dependency DAG. Nodes are indexed internally; public queries
/// speak [`NodeId`].
#[derive(Debug, Clone)]
pub struct BuildGraph {
    ids: Vec<NodeId>,
    kinds: Vec<NodeKind>,
    index: BTreeMap<NodeId, usize>,
    /// `dependents[a]` lists nodes that directly depend on node `a`.
    dependents: Vec<Vec<usize>>,
}

impl BuildGraph {
    /// Validates and builds a graph from node declarations and edges.
    ///
    /// An edge `(a, b)` declares that `b` depends on `a`. Construction fails
    /// on duplicate nodes, edges naming undeclared nodes, edges into files or
    /// out of tests, and cycles.
    pub fn build(
        nodes: Vec<(NodeId, NodeKind)>,
        edges: Vec<(NodeId, NodeId)>,
    ) -> Result<Self, GraphError> {
        if nodes.len() >= UNREACHABLE_DISTANCE as usize {
            return Err(GraphError::TooManyNodes(nodes.len()));
        }
        let mut ids = Vec::with_capacity(nodes.len());
        let mut kinds = Vec::with_capacity(nodes.len());
        let mut index = BTreeMap::new();
        for (id, kind) in nodes {
            if index.contains_key(&id) {
                return Err(GraphError::DuplicateNode(id));
            }
            index.insert(id.clone(), ids.len());
            ids.push(id);
            kinds.push(kind);
        }

        let mut dependents = vec![Vec::new(); ids.len()];
        for (from, to) in edges {
            let a = *index
                .get(&from)
                .ok_or_else(|| GraphError::UnknownEndpoint(from.clone()))?;
            let b = *index
                .get(&to)
                .ok_or_else(|| GraphError::UnknownEndpoint(to.clone()))?;
            if kinds[b] == NodeKind::File {
                return Err(GraphError::FileWithIncomingEdge(
                    ids[b].clone(),
                    ids[a].clone(),
                ));
            }
            if kinds[a] == NodeKind::Test {
                return Err(GraphError::TestWithOutgoingEdge(
                    ids[a].clone(),
                    ids[b].clone(),
                ));
            }
            dependents[a].push(b);
        }
        for deps in &mut dependents {
            deps.sort_unstable();
            deps.dedup();
        }

        let graph = BuildGraph {
            ids,
            kinds,
            index,
            dependents,
        };
        graph.check_acyclic()?;
        Ok(graph)
    }

    /// Kahn's algorithm; reports one node left on a cycle if any.
    fn check_acyclic(&self) -> Result<(), GraphError> {
        let n = self.ids.len();
        let mut in_degree = vec![0usize; n];
        for deps in &self.dependents {
            for &b in deps {
                in_degree[b] += 1;
            }
        }
        let mut queue: VecDeque<usize> =
            (0..n).filter(|&i| in_degree[i] == 0).collect();
        let mut seen = 0usize;
        while let Some(a) = queue.pop_front() {
            seen += 1;
            for &b in &self.dependents[a] {
                in_degree[b] -= 1;
                if in_degree[b] == 0 {
                    queue.push_back(b);
                }
            }
        }
        if seen < n {
            let culprit = (0..n)
                .find(|&i| in_degree[i] > 0)
                .expect("some node remains on a cycle");
            return Err(GraphError::CycleDetected(self.ids[culprit].clone()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.index.contains_key(id)
    }

    pub fn kind(&self, id: &NodeId) -> Option<NodeKind> {
        self.index.get(id).map(|&i| self.kinds[i])
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&NodeId, NodeKind)> {
        self.ids.iter().zip(self.kinds.iter().copied())
    }

    pub fn edges(&self) -> impl Iterator<Item = (&NodeId, &NodeId)> {
        self.dependents.iter().enumerate().flat_map(move |(a, deps)| {
            deps.iter().map(move |&b| (&self.ids[a], &self.ids[b]))
        })
    }

    /// All test-kind node ids, in id order.
    pub fn test_targets(&self) -> impl Iterator<Item = &NodeId> {
        self.index
            .iter()
            .filter(|(_, &i)| self.kinds[i] == NodeKind::Test)
            .map(|(id, _)| id)
    }

    fn resolve(&self, id: &NodeId) -> Result<usize, GraphError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| GraphError::UnknownNode(id.clone()))
    }

    fn resolve_files(&self, modified: &BTreeSet<NodeId>) -> Result<Vec<usize>, GraphError> {
        modified
            .iter()
            .map(|id| {
                let i = self.resolve(id)?;
                if self.kinds[i] != NodeKind::File {
                    return Err(GraphError::WrongKind(id.clone(), self.kinds[i], NodeKind::File));
                }
                Ok(i)
            })
            .collect()
    }

    /// Multi-source BFS in dependency direction. Returns hop counts indexed
    /// by node, `UNREACHABLE_DISTANCE` where no path exists.
    fn distances_from(&self, sources: &[usize]) -> Vec<u32> {
        let mut dist = vec![UNREACHABLE_DISTANCE; self.ids.len()];
        let mut queue = VecDeque::new();
        for &s in sources {
            if dist[s] != 0 {
                dist[s] = 0;
                queue.push_back(s);
            }
        }
        while let Some(a) = queue.pop_front() {
            for &b in &self.dependents[a] {
                if dist[b] == UNREACHABLE_DISTANCE {
                    dist[b] = dist[a] + 1;
                    queue.push_back(b);
                }
            }
        }
        dist
    }

    /// The set of test targets transitively depending on any modified file.
    pub fn dependent_tests(
        &self,
        modified: &BTreeSet<NodeId>,
    ) -> Result<BTreeSet<NodeId>, GraphError> {
        let sources = self.resolve_files(modified)?;
        let dist = self.distances_from(&sources);
        Ok(dist
            .iter()
            .enumerate()
            .filter(|&(i, &d)| d != UNREACHABLE_DISTANCE && self.kinds[i] == NodeKind::Test)
            .map(|(i, _)| self.ids[i].clone())
            .collect())
    }

    /// Minimum directed hop count from any modified file to `target`;
    /// `UNREACHABLE_DISTANCE` when no path exists.
    pub fn min_distance(
        &self,
        modified: &BTreeSet<NodeId>,
        target: &NodeId,
    ) -> Result<u32, GraphError> {
        let t = self.resolve(target)?;
        if self.kinds[t] != NodeKind::Test {
            return Err(GraphError::WrongKind(target.clone(), self.kinds[t], NodeKind::Test));
        }
        let sources = self.resolve_files(modified)?;
        Ok(self.distances_from(&sources)[t])
    }

    /// Distances to every *reachable* test target in one pass, for scoring
    /// all dependent tests of a change without re-running BFS per target.
    /// The key set equals [`BuildGraph::dependent_tests`].
    pub fn test_distances(
        &self,
        modified: &BTreeSet<NodeId>,
    ) -> Result<BTreeMap<NodeId, u32>, GraphError> {
        let sources = self.resolve_files(modified)?;
        let dist = self.distances_from(&sources);
        Ok(self
            .index
            .iter()
            .filter(|(_, &i)| self.kinds[i] == NodeKind::Test && dist[i] != UNREACHABLE_DISTANCE)
            .map(|(id, &i)| (id.clone(), dist[i]))
            .collect())
    }

    /// Writes the graph in the JSON-lines interchange format: one
    /// `{"node": .., "kind": ..}` line per node, then one
    /// `{"edge": [from, to]}` line per edge.
    pub fn save(&self, w: &mut impl Write) -> std::io::Result<()> {
        for (id, kind) in self.nodes() {
            let line = GraphLine::Node {
                node: id.clone(),
                kind,
            };
            serde_json::to_writer(&mut *w, &line)?;
            writeln!(w)?;
        }
        for (a, b) in self.edges() {
            let line = GraphLine::Edge {
                edge: (a.clone(), b.clone()),
            };
            serde_json::to_writer(&mut *w, &line)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save_to_path(&self, path: &Path) -> std::io::Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut file)
    }

    /// Loads a graph from the JSON-lines format, rejecting malformed lines
    /// with their line number.
    pub fn load(r: impl Read, path: &str) -> Result<Self, GraphError> {
        let reader = BufReader::new(r);
        let mut nodes = Vec::new();
        let mut edges = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: GraphLine =
                serde_json::from_str(&line).map_err(|e| GraphError::Malformed {
                    path: path.to_string(),
                    line: lineno + 1,
                    message: e.to_string(),
                })?;
            match parsed {
                GraphLine::Node { node, kind } => nodes.push((node, kind)),
                GraphLine::Edge { edge } => edges.push(edge),
            }
        }
        Self::build(nodes, edges)
    }

    pub fn load_from_path(path: &Path) -> Result<Self, GraphError> {
        let file = std::fs::File::open(path)?;
        Self::load(file, &path.display().to_string())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
enum GraphLine {
    Node { node: NodeId, kind: NodeKind },
    Edge { edge: (NodeId, NodeId) },
}
