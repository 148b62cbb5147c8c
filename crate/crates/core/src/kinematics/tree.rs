use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binio;
use crate::dataio::JOINT_NAMES;
use crate::error::{Error, FormatError, Result};

/// Rooted tree over the K parts. Edges are stored parent to child.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KinematicTree {
    names: Vec<String>,
    edges: Vec<(usize, usize)>,
    parent: Vec<Option<usize>>,
    /// Index into `edges` of the edge ending at each node.
    parent_edge: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    root: usize,
    /// Breadth-first order from the root.
    order: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeJson {
    pub names: Vec<String>,
    pub edges: Vec<(String, String)>,
}

impl KinematicTree {
    pub fn new(names: Vec<String>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let k = names.len();
        if k == 0 {
            return Err(Error::contract("tree needs at least one node"));
        }
        if edges.len() != k - 1 {
            return Err(Error::contract(format!("{k} nodes need {} edges, got {}", k - 1, edges.len())));
        }
        let mut parent = vec![None; k];
        let mut parent_edge = vec![None; k];
        let mut children = vec![Vec::new(); k];
        for (e, &(p, c)) in edges.iter().enumerate() {
            if p >= k || c >= k || p == c {
                return Err(Error::contract(format!("edge ({p}, {c}) is invalid for {k} nodes")));
            }
            if parent[c].is_some() {
                return Err(Error::contract(format!("node {c} has two parents")));
            }
            parent[c] = Some(p);
            parent_edge[c] = Some(e);
            children[p].push(c);
        }
        let roots: Vec<usize> = (0..k).filter(|&i| parent[i].is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::contract(format!("tree must have one root, found {}", roots.len())));
        }
        let root = roots[0];
        let mut order = Vec::with_capacity(k);
        let mut queue = VecDeque::from([root]);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            queue.extend(children[v].iter().copied());
        }
        if order.len() != k {
            return Err(Error::contract("tree is disconnected or contains a cycle"));
        }
        Ok(KinematicTree {
            names,
            edges,
            parent,
            parent_edge,
            children,
            root,
            order,
        })
    }

    /// The 19-part skeleton rooted at the head: a spine chain with arms
    /// hanging off the neck and legs off the lower spine.
    pub fn default19() -> Self {
        let edges = vec![
            (0, 1),
            (1, 2),
            (2, 3),
            (3, 4),
            (1, 5),
            (5, 6),
            (6, 7),
            (7, 8),
            (1, 9),
            (9, 10),
            (10, 11),
            (11, 12),
            (4, 13),
            (13, 14),
            (14, 15),
            (4, 16),
            (16, 17),
            (17, 18),
        ];
        Self::new(JOINT_NAMES.iter().map(|s| s.to_string()).collect(), edges).expect("valid default tree")
    }

    /// Path `0 - 1 - ... - (k-1)`.
    pub fn chain(k: usize) -> Result<Self> {
        Self::new((0..k).map(|i| format!("J{i}")).collect(), (1..k).map(|i| (i - 1, i)).collect())
    }

    /// Tree with node `i > 0` attached to `parents[i - 1] < i`.
    pub fn from_parents(parents: &[usize]) -> Result<Self> {
        let k = parents.len() + 1;
        Self::new(
            (0..k).map(|i| format!("J{i}")).collect(),
            parents.iter().enumerate().map(|(i, &p)| (p, i + 1)).collect(),
        )
    }

    pub fn k(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn parent(&self, v: usize) -> Option<usize> {
        self.parent[v]
    }

    pub fn parent_edge(&self, v: usize) -> Option<usize> {
        self.parent_edge[v]
    }

    pub fn children(&self, v: usize) -> &[usize] {
        &self.children[v]
    }

    /// Breadth-first order; reversing it visits children before parents.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Neighbour set of `v`: its parent and children.
    pub fn neighbors(&self, v: usize) -> Vec<usize> {
        let mut n: Vec<usize> = self.parent[v].into_iter().chain(self.children[v].iter().copied()).collect();
        n.sort_unstable();
        n
    }

    /// Edge index and whether `(a, b)` is stored as `(b, a)`.
    pub fn edge_between(&self, a: usize, b: usize) -> Result<(usize, bool)> {
        if a < self.k() && b < self.k() {
            if self.parent[b] == Some(a) {
                return Ok((self.parent_edge[b].expect("has parent"), false));
            }
            if self.parent[a] == Some(b) {
                return Ok((self.parent_edge[a].expect("has parent"), true));
            }
        }
        Err(Error::contract(format!("({a}, {b}) is not an edge of the tree")))
    }

    pub fn to_json(&self) -> TreeJson {
        TreeJson {
            names: self.names.clone(),
            edges: self
                .edges
                .iter()
                .map(|&(p, c)| (self.names[p].clone(), self.names[c].clone()))
                .collect(),
        }
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let j: TreeJson = serde_json::from_slice(bytes)?;
        let index = |n: &str| {
            j.names
                .iter()
                .position(|m| m == n)
                .ok_or_else(|| FormatError::invalid("edges", format!("unknown node `{n}`")))
        };
        for (i, n) in j.names.iter().enumerate() {
            if j.names[..i].contains(n) {
                return Err(FormatError::invalid("names", format!("duplicate node `{n}`")));
            }
        }
        let edges = j
            .edges
            .iter()
            .map(|(p, c)| Ok((index(p)?, index(c)?)))
            .collect::<Result<Vec<_>, FormatError>>()?;
        Self::new(j.names.clone(), edges).map_err(|e| FormatError::invalid("tree", e.to_string()))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(&self.to_json()).expect("tree serialises");
        binio::write_file(path, s.as_bytes())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        binio::decode_file(path, Self::from_json_bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("n{i}")).collect()
    }

    #[test]
    fn default_tree_shape() {
        let t = KinematicTree::default19();
        assert_eq!(t.k(), 19);
        assert_eq!(t.edges().len(), 18);
        assert_eq!(t.root(), 0);
        assert_eq!(t.neighbors(1), vec![0, 2, 5, 9]);
        assert_eq!(t.neighbors(4), vec![3, 13, 16]);
        for c in 1..19 {
            assert!(t.parent(c).unwrap() < c);
        }
    }

    #[test]
    fn neighbour_sets_are_symmetric() {
        let t = KinematicTree::default19();
        for a in 0..19 {
            for b in t.neighbors(a) {
                assert!(t.neighbors(b).contains(&a));
            }
        }
    }

    #[test]
    fn invalid_trees_are_rejected() {
        // Cycle plus a disconnected node.
        assert!(KinematicTree::new(names(4), vec![(0, 1), (1, 2), (2, 1)]).is_err());
        // Node with two parents, leaving two roots.
        assert!(KinematicTree::new(names(4), vec![(0, 1), (2, 3), (0, 1)]).is_err());
        // Cycle not containing the root.
        assert!(KinematicTree::new(names(4), vec![(1, 2), (2, 3), (3, 1)]).is_err());
        // Wrong edge count.
        assert!(KinematicTree::new(names(3), vec![(0, 1)]).is_err());
        assert!(KinematicTree::new(names(2), vec![(0, 0)]).is_err());
    }

    #[test]
    fn edge_lookup_both_directions() {
        let t = KinematicTree::default19();
        assert_eq!(t.edge_between(5, 6).unwrap(), (5, false));
        assert_eq!(t.edge_between(6, 5).unwrap(), (5, true));
        assert!(t.edge_between(0, 18).is_err());
    }

    #[test]
    fn json_round_trip() {
        let t = KinematicTree::default19();
        let s = serde_json::to_vec(&t.to_json()).unwrap();
        assert_eq!(KinematicTree::from_json_bytes(&s).unwrap(), t);
        let bad = br#"{"names": ["a", "b"], "edges": [["a", "c"]]}"#;
        assert!(KinematicTree::from_json_bytes(bad).is_err());
        let dup = br#"{"names": ["a", "a"], "edges": [["a", "a"]]}"#;
        assert!(KinematicTree::from_json_bytes(dup).is_err());
    }
}
