//! Hierarchy structure, aggregation/summing/projection matrices, and the
//! data coherency metric `c(y) = ||y - A y||`.
//!
//! Coherency is always measured against the leaves: an aggregate is coherent
//! when it equals the sum of its leaf descendants.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// A forest of named series. Node order is fixed at construction and shared
/// by every matrix and panel built from the spec.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchySpec {
    node_ids: Vec<String>,
    parent: Vec<Option<usize>>,
    level: Vec<u32>,
    children: Vec<Vec<usize>>,
    index: HashMap<String, usize>,
}

impl HierarchySpec {
    /// Build from `(child, parent)` edges. Node order is first appearance,
    /// scanning each edge child-then-parent.
    pub fn from_edges<S: AsRef<str>>(edges: &[(S, Option<S>)]) -> Result<Self> {
        let mut node_ids: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut intern = |id: &str, node_ids: &mut Vec<String>| -> usize {
            if let Some(&i) = index.get(id) {
                return i;
            }
            node_ids.push(id.to_string());
            index.insert(id.to_string(), node_ids.len() - 1);
            node_ids.len() - 1
        };

        let mut declared: Vec<(usize, Option<usize>)> = Vec::with_capacity(edges.len());
        for (child, parent) in edges {
            let child = child.as_ref().trim();
            if child.is_empty() {
                return Err(Error::Hierarchy("empty node id".into()));
            }
            let c = intern(child, &mut node_ids);
            let p = match parent {
                Some(p) if !p.as_ref().trim().is_empty() => {
                    Some(intern(p.as_ref().trim(), &mut node_ids))
                }
                _ => None,
            };
            declared.push((c, p));
        }

        let m = node_ids.len();
        let mut parent = vec![None; m];
        let mut seen = vec![false; m];
        for &(c, p) in &declared {
            if seen[c] {
                return Err(Error::Hierarchy(format!(
                    "duplicate node id '{}'",
                    node_ids[c]
                )));
            }
            if p == Some(c) {
                return Err(Error::Hierarchy(format!(
                    "cycle detected: '{}' is its own parent",
                    node_ids[c]
                )));
            }
            seen[c] = true;
            parent[c] = p;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Hierarchy(format!(
                "parent '{}' is never declared as a node",
                node_ids[i]
            )));
        }
        Self::from_parents(node_ids, parent)
    }

    /// Build from an ordered id list and parent indices.
    pub fn from_parents(node_ids: Vec<String>, parent: Vec<Option<usize>>) -> Result<Self> {
        let m = node_ids.len();
        if parent.len() != m {
            return Err(Error::Hierarchy(format!(
                "{} parent entries for {m} nodes",
                parent.len()
            )));
        }
        if m == 0 {
            return Err(Error::Hierarchy("empty leaf set".into()));
        }
        let mut index = HashMap::with_capacity(m);
        for (i, id) in node_ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Hierarchy(format!("duplicate node id '{id}'")));
            }
        }
        let mut children = vec![Vec::new(); m];
        for (c, p) in parent.iter().enumerate() {
            if let Some(p) = *p {
                if p >= m {
                    return Err(Error::Hierarchy(format!("parent index {p} out of range")));
                }
                children[p].push(c);
            }
        }

        // Walk up from every node; a walk longer than m revisits a node.
        let mut level = vec![0u32; m];
        for start in 0..m {
            let mut depth = 1u32;
            let mut cur = start;
            while let Some(p) = parent[cur] {
                depth += 1;
                if depth as usize > m {
                    return Err(Error::Hierarchy(format!(
                        "cycle detected through '{}'",
                        node_ids[start]
                    )));
                }
                cur = p;
            }
            level[start] = depth;
        }
        if children.iter().all(|c| !c.is_empty()) {
            return Err(Error::Hierarchy("empty leaf set".into()));
        }

        Ok(HierarchySpec {
            node_ids,
            parent,
            level,
            children,
            index,
        })
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file)
    }

    pub fn from_csv_reader(reader: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() != 2
            || headers.get(0).map(str::trim) != Some("child")
            || headers.get(1).map(str::trim) != Some("parent")
        {
            return Err(Error::Hierarchy(format!(
                "expected header 'child,parent', found '{}'",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut edges = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let child = rec.get(0).unwrap_or("").to_string();
            let parent = rec.get(1).map(str::to_string).filter(|p| !p.trim().is_empty());
            edges.push((child, parent));
        }
        Self::from_edges(&edges)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.to_csv_writer(file)
    }

    pub fn to_csv_writer(&self, writer: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["child", "parent"])?;
        for (i, id) in self.node_ids.iter().enumerate() {
            let p = self.parent[i].map_or("", |p| self.node_ids[p].as_str());
            w.write_record([id.as_str(), p])?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.node_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ids.is_empty()
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.parent[i]
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    /// Level of node `i`, 1 for roots.
    pub fn level(&self, i: usize) -> u32 {
        self.level[i]
    }

    pub fn levels(&self) -> Vec<u32> {
        let mut l = self.level.clone();
        l.sort_unstable();
        l.dedup();
        l
    }

    pub fn nodes_at_level(&self, level: u32) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.level[i] == level).collect()
    }

    pub fn is_leaf(&self, i: usize) -> bool {
        self.children[i].is_empty()
    }

    pub fn leaf_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_leaf(i)).collect()
    }

    /// Leaf descendants of `i` in node order (a leaf is its own descendant).
    pub fn leaf_descendants(&self, i: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![i];
        while let Some(n) = stack.pop() {
            if self.is_leaf(n) {
                out.push(n);
            } else {
                stack.extend(self.children[n].iter().copied());
            }
        }
        out.sort_unstable();
        out
    }

    /// Restrict to the given nodes (in the given order). Every kept node's
    /// parent must also be kept. Returns an error if a kept aggregate ends up
    /// with no children.
    pub fn retain(&self, keep: &[usize]) -> Result<HierarchySpec> {
        let mut remap = vec![None; self.len()];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = Some(new);
        }
        let mut parent = Vec::with_capacity(keep.len());
        for &old in keep {
            parent.push(match self.parent[old] {
                None => None,
                Some(p) => Some(remap[p].ok_or_else(|| {
                    Error::Hierarchy(format!(
                        "'{}' kept but its parent '{}' was removed",
                        self.node_ids[old], self.node_ids[p]
                    ))
                })?),
            });
        }
        for &old in keep {
            if !self.is_leaf(old) && self.children[old].iter().all(|c| remap[*c].is_none()) {
                return Err(Error::Hierarchy(format!(
                    "aggregate '{}' would be left with zero children",
                    self.node_ids[old]
                )));
            }
        }
        let ids = keep.iter().map(|&i| self.node_ids[i].clone()).collect();
        HierarchySpec::from_parents(ids, parent)
    }
}

/// The `m x m` 0/1 matrix mapping any vector to its leaf-derived aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationMatrix {
    entries: Tensor,
    leaf_indices: Vec<usize>,
}

impl AggregationMatrix {
    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn leaf_indices(&self) -> &[usize] {
        &self.leaf_indices
    }

    pub fn dim(&self) -> usize {
        self.entries.rows()
    }

    /// `A y` for a single vector.
    pub fn apply(&self, y: &[f64]) -> Result<Vec<f64>> {
        self.entries.matvec(y)
    }

    pub fn summing(&self) -> SummingMatrix {
        SummingMatrix {
            entries: self.entries.select_cols(&self.leaf_indices),
            leaf_indices: self.leaf_indices.clone(),
        }
    }
}

/// The `m x b` matrix mapping leaf values to every series.
#[derive(Clone, Debug, PartialEq)]
pub struct SummingMatrix {
    entries: Tensor,
    leaf_indices: Vec<usize>,
}

impl SummingMatrix {
    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn leaf_indices(&self) -> &[usize] {
        &self.leaf_indices
    }
}

pub fn build_aggregation(spec: &HierarchySpec) -> Result<AggregationMatrix> {
    let m = spec.len();
    let leaf_indices = spec.leaf_indices();
    if leaf_indices.is_empty() {
        return Err(Error::Hierarchy("empty leaf set".into()));
    }
    let mut entries = Tensor::zeros(m, m);
    for i in 0..m {
        for j in spec.leaf_descendants(i) {
            entries.set(i, j, 1.0);
        }
    }
    Ok(AggregationMatrix {
        entries,
        leaf_indices,
    })
}

/// `||y - A y||_2`.
pub fn coherency(yhat: &[f64], a: &AggregationMatrix) -> Result<f64> {
    if yhat.len() != a.dim() {
        return Err(Error::shape(
            "coherency",
            format!("vector of length {} for m = {}", yhat.len(), a.dim()),
        ));
    }
    let ay = a.apply(yhat)?;
    Ok(yhat
        .iter()
        .zip(&ay)
        .map(|(y, s)| (y - s) * (y - s))
        .sum::<f64>()
        .sqrt())
}

/// Mean over columns (timesteps) of the per-column coherency of an `m x T`
/// panel.
pub fn coherency_panel(yhat: &Tensor, a: &AggregationMatrix) -> Result<f64> {
    if yhat.rows() != a.dim() {
        return Err(Error::shape(
            "coherency_panel",
            format!("{} rows for m = {}", yhat.rows(), a.dim()),
        ));
    }
    if yhat.cols() == 0 {
        return Err(Error::InvalidArgument("coherency_panel needs T >= 1".into()));
    }
    let mut total = 0.0;
    for t in 0..yhat.cols() {
        total += coherency(&yhat.column(t), a)?;
    }
    Ok(total / yhat.cols() as f64)
}

/// Orthogonal projector `S (S^T S)^{-1} S^T` onto the coherent subspace.
pub fn projection_matrix(s: &SummingMatrix) -> Result<Tensor> {
    let st = s.entries();
    let (m, b) = st.shape();
    let sm = DMatrix::from_row_slice(m, b, st.as_slice());
    let gram = sm.transpose() * &sm;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Solve("S^T S is not positive definite".into()))?;
    let x = chol.solve(&sm.transpose());
    let p = &sm * x;
    let mut out = Tensor::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            out.set(i, j, 0.5 * (p[(i, j)] + p[(j, i)]));
        }
    }
    if !out.is_finite() {
        return Err(Error::Solve("projection contains non-finite entries".into()));
    }
    Ok(out)
}

/// The three-level example tree: `y1` over `y2,y3`; `y2` over `y4,y5,y6`;
/// `y3` over `y7,y8`.
pub fn example_tree() -> HierarchySpec {
    HierarchySpec::from_edges(&[
        ("y1", None),
        ("y2", Some("y1")),
        ("y3", Some("y1")),
        ("y4", Some("y2")),
        ("y5", Some("y2")),
        ("y6", Some("y2")),
        ("y7", Some("y3")),
        ("y8", Some("y3")),
    ])
    .expect("example tree is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_leaf() -> HierarchySpec {
        HierarchySpec::from_edges(&[("root", None), ("l1", Some("root")), ("l2", Some("root"))])
            .unwrap()
    }

    #[test]
    fn example_tree_matrix() {
        let a = build_aggregation(&example_tree()).unwrap();
        let expected = [
            [0., 0., 0., 1., 1., 1., 1., 1.],
            [0., 0., 0., 1., 1., 1., 0., 0.],
            [0., 0., 0., 0., 0., 0., 1., 1.],
            [0., 0., 0., 1., 0., 0., 0., 0.],
            [0., 0., 0., 0., 1., 0., 0., 0.],
            [0., 0., 0., 0., 0., 1., 0., 0.],
            [0., 0., 0., 0., 0., 0., 1., 0.],
            [0., 0., 0., 0., 0., 0., 0., 1.],
        ];
        for (i, row) in expected.iter().enumerate() {
            assert_eq!(a.entries().row(i), row, "row {i}");
        }
        assert_eq!(a.leaf_indices(), &[3, 4, 5, 6, 7]);
    }

    #[test]
    fn single_node_and_two_leaf() {
        let one = HierarchySpec::from_edges(&[("solo", None::<&str>)]).unwrap();
        assert_eq!(build_aggregation(&one).unwrap().entries(), &Tensor::identity(1));

        let a = build_aggregation(&two_leaf()).unwrap();
        assert_eq!(
            a.entries().as_slice(),
            &[0., 1., 1., 0., 1., 0., 0., 0., 1.]
        );
    }

    #[test]
    fn construction_errors() {
        let dup = HierarchySpec::from_edges(&[("a", None), ("a", None)]);
        assert!(matches!(dup, Err(Error::Hierarchy(m)) if m.contains("duplicate")));
        let cyc = HierarchySpec::from_edges(&[("a", Some("b")), ("b", Some("a"))]);
        assert!(matches!(cyc, Err(Error::Hierarchy(m)) if m.contains("cycle")));
        let own = HierarchySpec::from_edges(&[("a", Some("a"))]);
        assert!(matches!(own, Err(Error::Hierarchy(m)) if m.contains("cycle")));
        let empty: Vec<(&str, Option<&str>)> = vec![];
        assert!(HierarchySpec::from_edges(&empty).is_err());
        let undeclared = HierarchySpec::from_edges(&[("a", Some("b"))]);
        assert!(undeclared.is_err());
    }

    #[test]
    fn levels_from_depth() {
        let spec = example_tree();
        assert_eq!(spec.levels(), vec![1, 2, 3]);
        assert_eq!(spec.nodes_at_level(2), vec![1, 2]);
        for leaf in spec.leaf_indices() {
            let mut cur = leaf;
            while let Some(p) = spec.parent(cur) {
                assert!(spec.level(leaf) > spec.level(p));
                cur = p;
            }
        }
    }

    #[test]
    fn coherency_examples() {
        let a = build_aggregation(&example_tree()).unwrap();
        let y = [12., 7., 5., 3., 2., 2., 3., 2.];
        assert_eq!(coherency(&y, &a).unwrap(), 0.0);
        let y = [13., 7., 5., 3., 2., 2., 3., 2.];
        assert_eq!(coherency(&y, &a).unwrap(), 1.0);
        assert!(coherency(&[1.0, 2.0], &a).is_err());
    }

    #[test]
    fn coherency_panel_means_columns() {
        let a = build_aggregation(&two_leaf()).unwrap();
        // column 0 off by 1 at the root, column 1 off by 3.
        let panel = Tensor::from_rows(&[vec![3.0, 5.0], vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(coherency_panel(&panel, &a).unwrap(), 2.0);
        let single = Tensor::from_rows(&[vec![3.0], vec![1.0], vec![1.0]]).unwrap();
        assert_eq!(coherency_panel(&single, &a).unwrap(), 1.0);
        assert!(coherency_panel(&Tensor::zeros(3, 0), &a).is_err());
    }

    #[test]
    fn projection_identity_for_flat_hierarchy() {
        let flat = HierarchySpec::from_edges(&[("a", None::<&str>), ("b", None), ("c", None)])
            .unwrap();
        let a = build_aggregation(&flat).unwrap();
        let p = projection_matrix(&a.summing()).unwrap();
        assert!(p.max_abs_diff(&Tensor::identity(3)) < 1e-14);
    }

    #[test]
    fn projection_makes_random_vectors_coherent() {
        let a = build_aggregation(&example_tree()).unwrap();
        let p = projection_matrix(&a.summing()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let y: Vec<f64> = (0..8).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let py = p.matvec(&y).unwrap();
            let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(coherency(&py, &a).unwrap() <= 1e-8 * norm);
        }
        let coherent = [12., 7., 5., 3., 2., 2., 3., 2.];
        let pc = p.matvec(&coherent).unwrap();
        for (x, y) in pc.iter().zip(&coherent) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn retain_rejects_orphaned_aggregate() {
        let spec = two_leaf();
        assert!(spec.retain(&[0]).is_err());
        let kept = spec.retain(&[0, 2]).unwrap();
        assert_eq!(kept.node_ids(), &["root".to_string(), "l2".to_string()]);
    }

    #[test]
    fn csv_round_trip() {
        let spec = example_tree();
        let mut buf = Vec::new();
        spec.to_csv_writer(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("child,parent\ny1,\ny2,y1\n"));
        let back = HierarchySpec::from_csv_reader(buf.as_slice()).unwrap();
        assert_eq!(back, spec);
        assert!(HierarchySpec::from_csv_reader("a,b\nx,\n".as_bytes()).is_err());
    }
}
