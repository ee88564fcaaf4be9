//! Spatial adjacency graphs and their ICAR structure matrices.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::gmrf::StructureMatrix;
use crate::sparse::SymMatrix;

/// Undirected neighbourhood graph over areas. Row order of every derived
/// matrix follows `area_ids`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialGraph {
    area_ids: Vec<String>,
    edges: BTreeSet<(usize, usize)>,
}

impl SpatialGraph {
    /// Builds a graph from labels and index pairs. Pairs are unordered and
    /// duplicates collapse.
    pub fn new(
        area_ids: Vec<String>,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let n = area_ids.len();
        if n == 0 {
            return Err(Error::InvalidDimension("graph has no areas".into()));
        }
        let mut seen = BTreeSet::new();
        for id in &area_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate area id `{id}`")));
            }
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::InvalidInput(format!(
                    "edge ({a}, {b}) references an area outside [0, {n})"
                )));
            }
            if a == b {
                return Err(Error::InvalidInput(format!("self-loop at area {a}")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        Ok(Self {
            area_ids,
            edges: set,
        })
    }

    /// Rook-adjacency lattice with `rows * cols` areas labelled `r{row}c{col}`.
    pub fn grid(rows: usize, cols: usize) -> Result<Self> {
        let ids = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| format!("r{r}c{c}")))
            .collect();
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if c + 1 < cols {
                    edges.push((i, i + 1));
                }
                if r + 1 < rows {
                    edges.push((i, i + cols));
                }
            }
        }
        Self::new(ids, edges)
    }

    /// Path graph `a0 - a1 - ... - a{n-1}`.
    pub fn path(n: usize) -> Result<Self> {
        let ids = (0..n).map(|i| format!("a{i}")).collect();
        Self::new(ids, (1..n).map(|i| (i - 1, i)))
    }

    pub fn n_areas(&self) -> usize {
        self.area_ids.len()
    }

    pub fn area_ids(&self) -> &[String] {
        &self.area_ids
    }

    /// Edges as `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.area_ids.iter().position(|a| a == id)
    }

    pub fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_areas()];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    /// Writes the graph in the adjacency-list text format.
    pub fn to_adjacency_text(&self) -> String {
        let mut out = String::new();
        for (i, list) in self.neighbours().iter().enumerate() {
            let _ = write!(out, "{}:", self.area_ids[i]);
            for &j in list {
                let _ = write!(out, " {}", self.area_ids[j]);
            }
            out.push('\n');
        }
        out
    }
}

/// Parses `<area_id>: <id> <id> ...` records. `#` lines are comments and
/// blank lines are skipped. Neighbour lists are symmetrized.
pub fn parse_adjacency(text: &str) -> Result<SpatialGraph> {
    let mut records: Vec<(usize, &str, Vec<&str>)> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = lineno + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, rest) = line
            .split_once(':')
            .ok_or_else(|| Error::parse(lineno, "expected `<area_id>: <neighbours>`"))?;
        let id = id.trim();
        if id.is_empty() || id.contains(char::is_whitespace) {
            return Err(Error::parse(lineno, format!("invalid area id `{id}`")));
        }
        if index.insert(id, records.len()).is_some() {
            return Err(Error::parse(
                lineno,
                format!("duplicate record for area `{id}`"),
            ));
        }
        records.push((lineno, id, rest.split_whitespace().collect()));
    }
    if records.is_empty() {
        return Err(Error::InvalidInput("adjacency file lists no areas".into()));
    }

    let mut edges = Vec::new();
    for (i, (lineno, id, neighbours)) in records.iter().enumerate() {
        for nb in neighbours {
            let j = *index
                .get(nb)
                .ok_or_else(|| Error::parse(*lineno, format!("unknown neighbour `{nb}`")))?;
            if j == i {
                return Err(Error::parse(*lineno, format!("self-loop at area `{id}`")));
            }
            edges.push((i, j));
        }
    }
    let ids = records.iter().map(|r| r.1.to_string()).collect();
    SpatialGraph::new(ids, edges)
}

/// Partition of the areas into connected components, each sorted, ordered by
/// smallest member.
pub fn connected_components(g: &SpatialGraph) -> Vec<Vec<usize>> {
    let adj = g.neighbours();
    let mut label = vec![usize::MAX; g.n_areas()];
    let mut comps = Vec::new();
    for start in 0..g.n_areas() {
        if label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut members = vec![start];
        let mut stack = vec![start];
        label[start] = id;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if label[w] == usize::MAX {
                    label[w] = id;
                    members.push(w);
                    stack.push(w);
                }
            }
        }
        members.sort_unstable();
        comps.push(members);
    }
    comps
}

/// `R = D - W` with rank deficiency equal to the number of components.
pub fn icar_structure(g: &SpatialGraph) -> StructureMatrix {
    let n = g.n_areas();
    let mut entries = Vec::with_capacity(n + g.n_edges());
    let mut degree = vec![0.0; n];
    for (a, b) in g.edges() {
        degree[a] += 1.0;
        degree[b] += 1.0;
        entries.push((a, b, -1.0));
    }
    entries.extend(degree.iter().enumerate().map(|(i, &d)| (i, i, d)));
    let matrix = SymMatrix::from_entries(n, entries);
    StructureMatrix::new(matrix, connected_components(g).len())
}
