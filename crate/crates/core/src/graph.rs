//! Bipartite interaction graph, degree normalization, and sparse propagation.
//!
//! Users and items share one node index space: users occupy `[0, M)` and
//! item `i` sits at node `M + i`. A single row-compressed matrix then
//! drives aggregation in both directions.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::data::IndexedDataset;
use crate::error::{Error, Result};
use crate::mat::Mat;

/// Immutable bipartite graph over train interactions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionGraph {
    num_users: usize,
    num_items: usize,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl InteractionGraph {
    /// Build from explicit (user, item) edges.
    pub fn from_edges(
        num_users: usize,
        num_items: usize,
        edges: &[(usize, usize)],
    ) -> Result<Self> {
        let n = num_users + num_items;
        let mut degree = vec![0usize; n];
        for &(u, i) in edges {
            if u >= num_users || i >= num_items {
                return Err(Error::Config(format!("edge ({u},{i}) out of range")));
            }
            degree[u] += 1;
            degree[num_users + i] += 1;
        }
        let mut offsets = vec![0usize; n + 1];
        for v in 0..n {
            offsets[v + 1] = offsets[v] + degree[v];
        }
        let mut cursor = offsets.clone();
        let mut neighbors = vec![0usize; 2 * edges.len()];
        for &(u, i) in edges {
            let item_node = num_users + i;
            neighbors[cursor[u]] = item_node;
            cursor[u] += 1;
            neighbors[cursor[item_node]] = u;
            cursor[item_node] += 1;
        }
        for v in 0..n {
            let list = &mut neighbors[offsets[v]..offsets[v + 1]];
            list.sort_unstable();
            if list.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Config(format!("duplicate edge at node {v}")));
            }
        }
        Ok(InteractionGraph {
            num_users,
            num_items,
            offsets,
            neighbors,
        })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn item_node(&self, item: usize) -> usize {
        self.num_users + item
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn has_edge(&self, v: usize, x: usize) -> bool {
        self.neighbors(v).binary_search(&x).is_ok()
    }
}

/// Graph over the dataset's train edges only.
pub fn build_graph(dataset: &IndexedDataset) -> Result<InteractionGraph> {
    InteractionGraph::from_edges(dataset.num_users, dataset.num_items, &dataset.train)
}

/// Sparse per-edge aggregation weights over the unified node space.
///
/// The nonzero pattern is always the adjacency pattern; only values change
/// (through momentum blending).
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl AggregationMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn row(&self, v: usize) -> (&[usize], &[f64]) {
        let range = self.row_ptr[v]..self.row_ptr[v + 1];
        (&self.col_idx[range.clone()], &self.values[range])
    }

    pub fn row_sum(&self, v: usize) -> f64 {
        self.values[self.row_ptr[v]..self.row_ptr[v + 1]]
            .iter()
            .sum()
    }

    pub fn get(&self, v: usize, x: usize) -> Option<f64> {
        let (cols, vals) = self.row(v);
        cols.binary_search(&x).ok().map(|k| vals[k])
    }

    pub fn same_pattern(&self, other: &AggregationMatrix) -> bool {
        self.n == other.n && self.row_ptr == other.row_ptr && self.col_idx == other.col_idx
    }

    /// Matrix with identical pattern and values produced by `f(row, col, value)`.
    pub fn map_with_pattern(
        &self,
        mut f: impl FnMut(usize, usize, f64) -> f64,
    ) -> AggregationMatrix {
        let mut out = self.clone();
        for v in 0..self.n {
            for k in self.row_ptr[v]..self.row_ptr[v + 1] {
                out.values[k] = f(v, self.col_idx[k], self.values[k]);
            }
        }
        out
    }

    /// Sparse-dense product `self * dense`, accumulated in f64.
    ///
    /// Rows without stored entries come out all-zero.
    pub fn spmm(&self, dense: &Mat) -> Result<Mat> {
        if dense.rows() != self.n {
            return Err(Error::ShapeMismatch(format!(
                "spmm: matrix is {0}x{0}, dense has {1} rows",
                self.n,
                dense.rows()
            )));
        }
        let k = dense.cols();
        let mut out = Mat::zeros(self.n, k);
        for v in 0..self.n {
            let acc = {
                let mut acc = vec![0.0; k];
                for idx in self.row_ptr[v]..self.row_ptr[v + 1] {
                    let w = self.values[idx];
                    let src = dense.row(self.col_idx[idx]);
                    for (a, s) in acc.iter_mut().zip(src.iter()) {
                        *a += w * s;
                    }
                }
                acc
            };
            out.row_mut(v).copy_from_slice(&acc);
        }
        Ok(out)
    }

    /// Transposed product `self^T * dense`; needed because blended weight
    /// matrices are generally asymmetric.
    pub fn spmm_t(&self, dense: &Mat) -> Result<Mat> {
        if dense.rows() != self.n {
            return Err(Error::ShapeMismatch(format!(
                "spmm_t: matrix is {0}x{0}, dense has {1} rows",
                self.n,
                dense.rows()
            )));
        }
        let k = dense.cols();
        let mut out = Mat::zeros(self.n, k);
        for v in 0..self.n {
            let src = dense.row(v).to_vec();
            for idx in self.row_ptr[v]..self.row_ptr[v + 1] {
                let w = self.values[idx];
                let dst = out.row_mut(self.col_idx[idx]);
                for (d, s) in dst.iter_mut().zip(src.iter()) {
                    *d += w * s;
                }
            }
        }
        Ok(out)
    }

    /// Binary snapshot: header (M, N, nnz as u64 LE) then row offsets,
    /// column indices (u64 LE) and values (f64 LE bits).
    pub fn write_snapshot(&self, num_users: usize, num_items: usize, path: &Path) -> Result<()> {
        assert_eq!(num_users + num_items, self.n, "node count mismatch");
        let mut buf = Vec::with_capacity(24 + 8 * (self.row_ptr.len() + 2 * self.values.len()));
        for header in [num_users as u64, num_items as u64, self.nnz() as u64] {
            buf.extend_from_slice(&header.to_le_bytes());
        }
        for &p in &self.row_ptr {
            buf.extend_from_slice(&(p as u64).to_le_bytes());
        }
        for &c in &self.col_idx {
            buf.extend_from_slice(&(c as u64).to_le_bytes());
        }
        for &v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_snapshot(path: &Path) -> Result<(usize, usize, AggregationMatrix)> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let corrupt = |reason: &str| Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        let mut cursor = 0usize;
        let read_u64 = |bytes: &[u8], cursor: &mut usize| -> Result<u64> {
            let end = *cursor + 8;
            let chunk = bytes
                .get(*cursor..end)
                .ok_or_else(|| corrupt("truncated"))?;
            *cursor = end;
            Ok(u64::from_le_bytes(chunk.try_into().unwrap()))
        };
        let m = read_u64(&bytes, &mut cursor)? as usize;
        let n_items = read_u64(&bytes, &mut cursor)? as usize;
        let nnz = read_u64(&bytes, &mut cursor)? as usize;
        let n = m + n_items;
        let expected = 24 + 8 * (n + 1) + 16 * nnz;
        if bytes.len() != expected {
            return Err(corrupt(&format!(
                "expected {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        for _ in 0..=n {
            row_ptr.push(read_u64(&bytes, &mut cursor)? as usize);
        }
        if row_ptr[0] != 0 || row_ptr[n] != nnz || row_ptr.windows(2).any(|w| w[0] > w[1]) {
            return Err(corrupt("bad row offsets"));
        }
        let mut col_idx = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            let c = read_u64(&bytes, &mut cursor)? as usize;
            if c >= n {
                return Err(corrupt("column index out of range"));
            }
            col_idx.push(c);
        }
        let mut values = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            let end = cursor + 8;
            values.push(f64::from_le_bytes(bytes[cursor..end].try_into().unwrap()));
            cursor = end;
        }
        Ok((
            m,
            n_items,
            AggregationMatrix {
                n,
                row_ptr,
                col_idx,
                values,
            },
        ))
    }
}

/// Symmetric degree normalization: entry (v, x) = 1 / sqrt(deg(v) deg(x)).
pub fn normalized_adjacency(graph: &InteractionGraph) -> AggregationMatrix {
    let n = graph.num_nodes();
    let mut row_ptr = Vec::with_capacity(n + 1);
    row_ptr.push(0);
    let mut col_idx = Vec::with_capacity(2 * graph.edge_count());
    let mut values = Vec::with_capacity(2 * graph.edge_count());
    for v in 0..n {
        let dv = graph.degree(v) as f64;
        for &x in graph.neighbors(v) {
            let dx = graph.degree(x) as f64;
            col_idx.push(x);
            values.push(1.0 / (dv * dx).sqrt());
        }
        row_ptr.push(col_idx.len());
    }
    AggregationMatrix {
        n,
        row_ptr,
        col_idx,
        values,
    }
}

/// Row sum of the initial normalized weights at `v`; the per-node
/// normalizer that turns degree weights into a probability scale.
pub fn normalizer_f(graph: &InteractionGraph, v: usize) -> Result<f64> {
    let dv = graph.degree(v);
    if dv == 0 {
        return Err(Error::ZeroDegree(v));
    }
    let dv = dv as f64;
    Ok(graph
        .neighbors(v)
        .iter()
        .map(|&x| 1.0 / (dv * graph.degree(x) as f64).sqrt())
        .sum())
}

/// Closed-form history likelihood p(x | v): probability that neighbor `x`
/// is drawn from `v`'s interaction history under the degree prior.
pub fn history_likelihood(graph: &InteractionGraph, center: usize, neighbor: usize) -> Result<f64> {
    if !graph.has_edge(center, neighbor) {
        return Err(Error::NotANeighbor { center, neighbor });
    }
    let denom: f64 = graph
        .neighbors(center)
        .iter()
        .map(|&x| 1.0 / (graph.degree(x) as f64).sqrt())
        .sum();
    Ok((1.0 / (graph.degree(neighbor) as f64).sqrt()) / denom)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn dense_from(w: &AggregationMatrix) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; w.n()]; w.n()];
        for v in 0..w.n() {
            let (cols, vals) = w.row(v);
            for (&c, &x) in cols.iter().zip(vals.iter()) {
                d[v][c] = x;
            }
        }
        d
    }

    #[test]
    fn single_edge_degrees() {
        let g = InteractionGraph::from_edges(1, 1, &[(0, 0)]).unwrap();
        assert_eq!(g.degree(0), 1);
        assert_eq!(g.degree(1), 1);
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn counting_oracle_over_edge_list() {
        let edges = [(0, 0), (0, 1), (1, 0)];
        let g = InteractionGraph::from_edges(2, 2, &edges).unwrap();
        // Oracle: count each endpoint directly from the edge list.
        let mut du = [0usize; 2];
        let mut di = [0usize; 2];
        for &(u, i) in &edges {
            du[u] += 1;
            di[i] += 1;
        }
        assert_eq!(g.degree(0), du[0]);
        assert_eq!(g.degree(1), du[1]);
        assert_eq!(g.degree(g.item_node(0)), di[0]);
        assert_eq!(g.degree(g.item_node(1)), di[1]);
        assert_eq!(du, [2, 1]);
        assert_eq!(di, [2, 1]);
    }

    #[test]
    fn degree_sums_match_edge_count() {
        let g =
            InteractionGraph::from_edges(3, 4, &[(0, 0), (0, 3), (1, 1), (2, 1), (2, 2)]).unwrap();
        let user_sum: usize = (0..3).map(|v| g.degree(v)).sum();
        let item_sum: usize = (3..7).map(|v| g.degree(v)).sum();
        assert_eq!(user_sum, g.edge_count());
        assert_eq!(item_sum, g.edge_count());
    }

    #[test]
    fn normalization_single_edge_is_unit() {
        let g = InteractionGraph::from_edges(1, 1, &[(0, 0)]).unwrap();
        let w = normalized_adjacency(&g);
        assert_eq!(w.get(0, 1), Some(1.0));
        assert_eq!(w.get(1, 0), Some(1.0));
    }

    #[test]
    fn normalization_degree_two_pair() {
        // Both endpoints of (u0, i0) have degree 2 -> weight 1/sqrt(4) = 0.5.
        let g = InteractionGraph::from_edges(2, 2, &[(0, 0), (0, 1), (1, 0)]).unwrap();
        assert!((w_entry(&g, 0, g.item_node(0)) - 0.5).abs() < 1e-15);
    }

    fn w_entry(g: &InteractionGraph, v: usize, x: usize) -> f64 {
        normalized_adjacency(g).get(v, x).unwrap()
    }

    #[test]
    fn normalizer_single_neighbor_unit() {
        let g = InteractionGraph::from_edges(1, 1, &[(0, 0)]).unwrap();
        assert_eq!(normalizer_f(&g, 0).unwrap(), 1.0);
    }

    #[test]
    fn normalizer_hand_value() {
        // u0 has neighbors i0 (degree 1) and i1 (degree 4):
        // F(u0) = (1/sqrt(2))(1 + 1/2) = 1.0606601717798212
        let g =
            InteractionGraph::from_edges(4, 2, &[(0, 0), (0, 1), (1, 1), (2, 1), (3, 1)]).unwrap();
        let f = normalizer_f(&g, 0).unwrap();
        assert!((f - 1.060_660_171_779_821_2).abs() < 1e-15, "{f}");
    }

    #[test]
    fn normalizer_matches_row_sum() {
        let g = random_graph(5, 6, 0xfeed);
        let w = normalized_adjacency(&g);
        for v in 0..g.num_nodes() {
            if g.degree(v) == 0 {
                assert!(normalizer_f(&g, v).is_err());
                continue;
            }
            let f = normalizer_f(&g, v).unwrap();
            assert!((f - w.row_sum(v)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_degree_is_domain_error() {
        // Item 1 never interacted.
        let g = InteractionGraph::from_edges(1, 2, &[(0, 0)]).unwrap();
        assert!(matches!(
            normalizer_f(&g, g.item_node(1)),
            Err(Error::ZeroDegree(_))
        ));
    }

    #[test]
    fn likelihood_single_neighbor_is_one() {
        let g = InteractionGraph::from_edges(1, 1, &[(0, 0)]).unwrap();
        assert_eq!(history_likelihood(&g, 0, 1).unwrap(), 1.0);
    }

    #[test]
    fn likelihood_hand_values() {
        // Neighbor degrees {1, 4} -> p = (1)/(1 + 1/2) = 2/3 and (1/2)/(3/2) = 1/3.
        let g =
            InteractionGraph::from_edges(4, 2, &[(0, 0), (0, 1), (1, 1), (2, 1), (3, 1)]).unwrap();
        let p0 = history_likelihood(&g, 0, g.item_node(0)).unwrap();
        let p1 = history_likelihood(&g, 0, g.item_node(1)).unwrap();
        assert!((p0 - 2.0 / 3.0).abs() < 1e-15);
        assert!((p1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn likelihood_rejects_non_neighbor() {
        let g = InteractionGraph::from_edges(2, 2, &[(0, 0), (1, 1)]).unwrap();
        assert!(matches!(
            history_likelihood(&g, 0, g.item_node(1)),
            Err(Error::NotANeighbor { .. })
        ));
    }

    pub(crate) fn random_graph(m: usize, n: usize, seed: u64) -> InteractionGraph {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, "test_graph", 0);
        let mut edges = Vec::new();
        for u in 0..m {
            for i in 0..n {
                if rng.gen::<f64>() < 0.4 {
                    edges.push((u, i));
                }
            }
        }
        if edges.is_empty() {
            edges.push((0, 0));
        }
        InteractionGraph::from_edges(m, n, &edges).unwrap()
    }

    #[test]
    fn factorization_identity_on_random_graphs() {
        // F(v) * p(x|v) reproduces the degree-normalized weight.
        for seed in 0..20 {
            let g = random_graph(4, 5, seed);
            let w = normalized_adjacency(&g);
            for v in 0..g.num_nodes() {
                if g.degree(v) == 0 {
                    continue;
                }
                let f = normalizer_f(&g, v).unwrap();
                let mut total_p = 0.0;
                for &x in g.neighbors(v) {
                    let p = history_likelihood(&g, v, x).unwrap();
                    total_p += p;
                    let expect = w.get(v, x).unwrap();
                    assert!((f * p - expect).abs() <= 1e-12);
                }
                assert!((total_p - 1.0).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn sparse_matches_dense_oracle() {
        let g = random_graph(4, 4, 7);
        let w = normalized_adjacency(&g);
        // Dense oracle: D^(-1/2) A D^(-1/2) built entrywise.
        let n = g.num_nodes();
        for v in 0..n {
            for x in 0..n {
                let expect = if g.degree(v) > 0 && g.has_edge(v, x) {
                    1.0 / ((g.degree(v) as f64) * (g.degree(x) as f64)).sqrt()
                } else {
                    0.0
                };
                let got = w.get(v, x).unwrap_or(0.0);
                assert!((got - expect).abs() <= 1e-12);
            }
        }
        // Symmetry of the initial matrix.
        let d = dense_from(&w);
        for v in 0..n {
            for x in 0..n {
                assert_eq!(d[v][x], d[x][v]);
            }
        }
    }

    #[test]
    fn spmm_unit_weight_passthrough() {
        let g = InteractionGraph::from_edges(1, 1, &[(0, 0)]).unwrap();
        let w = normalized_adjacency(&g);
        let e = Mat::from_vec(2, 2, vec![0.0, 0.0, 1.0, 2.0]).unwrap();
        let out = w.spmm(&e).unwrap();
        assert_eq!(out.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn spmm_zero_embeddings() {
        let g = random_graph(3, 3, 1);
        let w = normalized_adjacency(&g);
        let out = w.spmm(&Mat::zeros(g.num_nodes(), 4)).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn spmm_matches_dense_matmul_oracle() {
        use rand::Rng;
        let g = random_graph(5, 5, 3);
        let w = normalized_adjacency(&g);
        let n = g.num_nodes();
        let k = 4;
        let mut rng = crate::rng::stream(5, "spmm", 0);
        let mut e = Mat::zeros(n, k);
        e.data_mut()
            .iter_mut()
            .for_each(|x| *x = rng.gen::<f64>() - 0.5);
        let got = w.spmm(&e).unwrap();
        let d = dense_from(&w);
        for v in 0..n {
            for c in 0..k {
                let expect: f64 = (0..n).map(|x| d[v][x] * e.get(x, c)).sum();
                assert!((got.get(v, c) - expect).abs() <= 1e-12);
            }
        }
        // Transpose product against the same dense oracle.
        let got_t = w.spmm_t(&e).unwrap();
        for v in 0..n {
            for c in 0..k {
                let expect: f64 = (0..n).map(|x| d[x][v] * e.get(x, c)).sum();
                assert!((got_t.get(v, c) - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn spmm_is_linear() {
        use rand::Rng;
        let g = random_graph(4, 6, 9);
        let w = normalized_adjacency(&g);
        let n = g.num_nodes();
        let mut rng = crate::rng::stream(6, "lin", 0);
        let mut e1 = Mat::zeros(n, 3);
        let mut e2 = Mat::zeros(n, 3);
        e1.data_mut()
            .iter_mut()
            .for_each(|x| *x = rng.gen::<f64>() - 0.5);
        e2.data_mut()
            .iter_mut()
            .for_each(|x| *x = rng.gen::<f64>() - 0.5);
        let (a, b) = (0.7, -1.3);
        let mut combo = e1.clone();
        combo.scale(a);
        combo.axpy(b, &e2).unwrap();
        let lhs = w.spmm(&combo).unwrap();
        let mut rhs = w.spmm(&e1).unwrap();
        rhs.scale(a);
        rhs.axpy(b, &w.spmm(&e2).unwrap()).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data().iter()) {
            assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn spmm_shape_mismatch() {
        let g = random_graph(2, 2, 0);
        let w = normalized_adjacency(&g);
        assert!(w.spmm(&Mat::zeros(g.num_nodes() + 1, 2)).is_err());
    }

    #[test]
    fn snapshot_roundtrip() {
        let g = random_graph(4, 5, 11);
        let w = normalized_adjacency(&g);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        w.write_snapshot(g.num_users(), g.num_items(), &path)
            .unwrap();
        let (m, n, back) = AggregationMatrix::read_snapshot(&path).unwrap();
        assert_eq!((m, n), (4, 5));
        assert_eq!(w, back);
    }

    #[test]
    fn snapshot_rejects_truncation() {
        let g = random_graph(3, 3, 2);
        let w = normalized_adjacency(&g);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        w.write_snapshot(g.num_users(), g.num_items(), &path)
            .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(AggregationMatrix::read_snapshot(&path).is_err());
    }
}
