//! Symmetric neighbor relation over players.

use serde::{Deserialize, Serialize};

/// How two players came to be neighbors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    /// Spatially adjacent segments.
    Physical,
    /// Segments assigned to the same concept.
    Semantic,
    Both,
}

impl EdgeKind {
    fn merge(self, other: EdgeKind) -> EdgeKind {
        if self == other {
            self
        } else {
            EdgeKind::Both
        }
    }

    pub fn is_physical(self) -> bool {
        matches!(self, EdgeKind::Physical | EdgeKind::Both)
    }

    pub fn is_semantic(self) -> bool {
        matches!(self, EdgeKind::Semantic | EdgeKind::Both)
    }
}

/// Which edge families survive [`NeighborGraph::ablate`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    NoPhysical,
    NoSemantic,
}

/// Adjacency lists kept sorted by neighbor index; no self-loops, always symmetric.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborGraph {
    adjacency: Vec<Vec<(usize, EdgeKind)>>,
}

impl NeighborGraph {
    pub fn new(player_count: usize) -> Self {
        Self {
            adjacency: vec![Vec::new(); player_count],
        }
    }

    pub fn ring(n: usize) -> Self {
        let mut g = Self::new(n);
        for i in 0..n {
            g.add_edge(i, (i + 1) % n, EdgeKind::Physical);
        }
        g
    }

    pub fn grid(rows: usize, cols: usize) -> Self {
        let mut g = Self::new(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if c + 1 < cols {
                    g.add_edge(i, i + 1, EdgeKind::Physical);
                }
                if r + 1 < rows {
                    g.add_edge(i, i + cols, EdgeKind::Physical);
                }
            }
        }
        g
    }

    pub fn complete(n: usize) -> Self {
        let mut g = Self::new(n);
        for a in 0..n {
            for b in a + 1..n {
                g.add_edge(a, b, EdgeKind::Physical);
            }
        }
        g
    }

    pub fn player_count(&self) -> usize {
        self.adjacency.len()
    }

    /// Adds `a -- b`; an existing edge of the other kind becomes [`EdgeKind::Both`].
    /// Self-loops are ignored.
    ///
    /// Panics if either endpoint is out of range.
    pub fn add_edge(&mut self, a: usize, b: usize, kind: EdgeKind) {
        let n = self.player_count();
        assert!(a < n && b < n, "edge ({a}, {b}) out of range for {n} players");
        if a == b {
            return;
        }
        self.insert_half(a, b, kind);
        self.insert_half(b, a, kind);
    }

    fn insert_half(&mut self, from: usize, to: usize, kind: EdgeKind) {
        let list = &mut self.adjacency[from];
        match list.binary_search_by_key(&to, |&(j, _)| j) {
            Ok(pos) => list[pos].1 = list[pos].1.merge(kind),
            Err(pos) => list.insert(pos, (to, kind)),
        }
    }

    pub fn neighbors(&self, i: usize) -> impl ExactSizeIterator<Item = usize> + '_ {
        self.adjacency[i].iter().map(|&(j, _)| j)
    }

    pub fn neighbor_list(&self, i: usize) -> Vec<usize> {
        self.neighbors(i).collect()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn edge_kind(&self, a: usize, b: usize) -> Option<EdgeKind> {
        let list = self.adjacency.get(a)?;
        list.binary_search_by_key(&b, |&(j, _)| j)
            .ok()
            .map(|pos| list[pos].1)
    }

    /// Each undirected edge once, as `(a, b, kind)` with `a < b`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, EdgeKind)> + '_ {
        self.adjacency.iter().enumerate().flat_map(|(a, list)| {
            list.iter()
                .filter(move |&&(b, _)| a < b)
                .map(move |&(b, k)| (a, b, k))
        })
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Union of both graphs' edges. Panics on mismatched player counts.
    pub fn union(&self, other: &NeighborGraph) -> NeighborGraph {
        assert_eq!(self.player_count(), other.player_count());
        let mut g = self.clone();
        for (a, b, k) in other.edges() {
            g.add_edge(a, b, k);
        }
        g
    }

    /// Drops one edge family. Edges that carry both kinds keep the surviving one.
    pub fn ablate(&self, ablation: Ablation) -> NeighborGraph {
        let keep = |k: EdgeKind| -> Option<EdgeKind> {
            match ablation {
                Ablation::None => Some(k),
                Ablation::NoPhysical => k.is_semantic().then_some(EdgeKind::Semantic),
                Ablation::NoSemantic => k.is_physical().then_some(EdgeKind::Physical),
            }
        };
        let mut g = NeighborGraph::new(self.player_count());
        for (a, b, k) in self.edges() {
            if let Some(k) = keep(k) {
                g.add_edge(a, b, k);
            }
        }
        g
    }

    pub fn is_symmetric(&self) -> bool {
        self.adjacency.iter().enumerate().all(|(a, list)| {
            list.iter()
                .all(|&(b, k)| b != a && self.edge_kind(b, a) == Some(k))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ring_and_grid_degrees() {
        let ring = NeighborGraph::ring(4);
        assert_eq!(ring.neighbor_list(0), vec![1, 3]);
        assert_eq!(ring.edge_count(), 4);

        let grid = NeighborGraph::grid(3, 4);
        assert_eq!(grid.degree(0), 2);
        assert_eq!(grid.degree(5), 4);
        assert_eq!(grid.edge_count(), 17);
        assert!(grid.is_symmetric());
    }

    #[test]
    fn merging_kinds_yields_both() {
        let mut g = NeighborGraph::new(3);
        g.add_edge(0, 1, EdgeKind::Physical);
        g.add_edge(1, 0, EdgeKind::Semantic);
        g.add_edge(1, 2, EdgeKind::Semantic);
        g.add_edge(2, 2, EdgeKind::Semantic);
        assert_eq!(g.edge_kind(0, 1), Some(EdgeKind::Both));
        assert_eq!(g.edge_kind(2, 1), Some(EdgeKind::Semantic));
        assert_eq!(g.degree(2), 1);
        assert!(g.is_symmetric());

        let no_sem = g.ablate(Ablation::NoSemantic);
        assert_eq!(no_sem.edges().collect::<Vec<_>>(), vec![(0, 1, EdgeKind::Physical)]);
        let no_phys = g.ablate(Ablation::NoPhysical);
        assert_eq!(no_phys.edge_count(), 2);
        assert!(no_phys.edges().all(|(_, _, k)| k == EdgeKind::Semantic));
    }

    #[test]
    fn union_is_symmetric() {
        let a = NeighborGraph::ring(5);
        let mut b = NeighborGraph::new(5);
        b.add_edge(0, 2, EdgeKind::Semantic);
        b.add_edge(0, 1, EdgeKind::Semantic);
        let u = a.union(&b);
        assert!(u.is_symmetric());
        assert_eq!(u.edge_count(), 6);
        assert_eq!(u.edge_kind(1, 0), Some(EdgeKind::Both));
    }
}
