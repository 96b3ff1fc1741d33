//! First-order adjacency between like elements, used for BFS sparsity
//! patterns and neighborhood feature aggregation.

use crate::mesh::Mesh;

/// Neighbor lists per element kind. Every list is sorted ascending, contains
/// no duplicates and never the element itself. Vertices isolated by face
/// removal simply get empty lists; they stay in the vertex array.
#[derive(Debug, Clone)]
pub struct AdjacencyStructures {
    /// Vertices sharing an edge.
    pub vertex_adj: Vec<Vec<usize>>,
    /// Edges sharing a vertex.
    pub edge_adj: Vec<Vec<usize>>,
    /// Faces sharing an edge.
    pub face_adj: Vec<Vec<usize>>,
}

impl AdjacencyStructures {
    pub fn build(mesh: &Mesh) -> AdjacencyStructures {
        let n_v = mesh.n_vertices();
        let n_e = mesh.n_edges();
        let n_f = mesh.n_faces();

        let mut vertex_adj = vec![Vec::new(); n_v];
        let mut edges_at_vertex = vec![Vec::new(); n_v];
        for (e, &(a, b)) in mesh.edges().iter().enumerate() {
            vertex_adj[a].push(b);
            vertex_adj[b].push(a);
            edges_at_vertex[a].push(e);
            edges_at_vertex[b].push(e);
        }
        for adj in &mut vertex_adj {
            adj.sort_unstable();
        }

        let mut edge_adj = vec![Vec::new(); n_e];
        for (e, &(a, b)) in mesh.edges().iter().enumerate() {
            for &v in &[a, b] {
                for &other in &edges_at_vertex[v] {
                    if other != e {
                        edge_adj[e].push(other);
                    }
                }
            }
        }
        for adj in &mut edge_adj {
            adj.sort_unstable();
            adj.dedup();
        }

        let mut face_adj = vec![Vec::new(); n_f];
        for e in 0..n_e {
            let fs = mesh.edge_face_ids(e);
            if fs.len() == 2 {
                face_adj[fs[0]].push(fs[1]);
                face_adj[fs[1]].push(fs[0]);
            }
        }
        for adj in &mut face_adj {
            adj.sort_unstable();
            adj.dedup();
        }

        AdjacencyStructures {
            vertex_adj,
            edge_adj,
            face_adj,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::Mesh;

    fn tetrahedron() -> Mesh {
        Mesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, 0.0, 1.0],
            ],
            vec![[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]],
        )
        .unwrap()
    }

    #[test]
    fn tetrahedron_vertex_adjacency_is_complete() {
        let adj = AdjacencyStructures::build(&tetrahedron());
        for (v, nbrs) in adj.vertex_adj.iter().enumerate() {
            let want: Vec<usize> = (0..4).filter(|&u| u != v).collect();
            assert_eq!(nbrs, &want);
        }
    }

    #[test]
    fn tetrahedron_edge_adjacency() {
        let adj = AdjacencyStructures::build(&tetrahedron());
        // Each tetrahedron edge touches every other edge except its opposite.
        for nbrs in &adj.edge_adj {
            assert_eq!(nbrs.len(), 4);
        }
    }

    #[test]
    fn tetrahedron_face_adjacency() {
        let adj = AdjacencyStructures::build(&tetrahedron());
        for (f, nbrs) in adj.face_adj.iter().enumerate() {
            let want: Vec<usize> = (0..4).filter(|&g| g != f).collect();
            assert_eq!(nbrs, &want);
        }
    }

    #[test]
    fn lists_exclude_self_and_are_sorted() {
        let m = Mesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [1.0, 1.0, 0.0],
            ],
            vec![[0, 1, 2], [1, 3, 2]],
        )
        .unwrap();
        let adj = AdjacencyStructures::build(&m);
        for (v, nbrs) in adj.vertex_adj.iter().enumerate() {
            assert!(nbrs.windows(2).all(|w| w[0] < w[1]));
            assert!(!nbrs.contains(&v));
        }
        for (e, nbrs) in adj.edge_adj.iter().enumerate() {
            assert!(nbrs.windows(2).all(|w| w[0] < w[1]));
            assert!(!nbrs.contains(&e));
        }
    }

    #[test]
    fn isolated_vertex_gets_empty_list() {
        let m = Mesh::new(
            vec![
                [0.0, 0.0, 0.0],
                [1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [9.0, 9.0, 9.0],
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let adj = AdjacencyStructures::build(&m);
        assert!(adj.vertex_adj[3].is_empty());
    }
}
