//! Class-similarity clustering, class-group partitions and the margin
//! specification matrices built from them.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    /// Mean pairwise Euclidean distance between members.
    #[default]
    Average,
    /// `sqrt(2 |A| |B| / (|A| + |B|)) * ||centroid(A) - centroid(B)||`.
    Ward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterNode {
    pub left: Option<usize>,
    pub right: Option<usize>,
    /// Merge height; 0 for leaves.
    pub distance: f64,
    /// Sorted class indices beneath this node.
    pub classes: Vec<usize>,
}

impl ClusterNode {
    pub fn is_leaf(&self) -> bool {
        self.left.is_none()
    }

    pub fn children(&self) -> Option<(usize, usize)> {
        self.left.zip(self.right)
    }
}

/// Binary dendrogram over classes. Nodes `0..n` are the leaves (node `i` is
/// class `i`); node `n + k` is the `k`-th merge, so the root is the last node.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterTree {
    n_classes: usize,
    linkage: Linkage,
    nodes: Vec<ClusterNode>,
}

impl ClusterTree {
    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn linkage(&self) -> Linkage {
        self.linkage
    }

    pub fn root(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn node(&self, id: usize) -> &ClusterNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[ClusterNode] {
        &self.nodes
    }

    /// Internal nodes in merge order.
    pub fn merges(&self) -> &[ClusterNode] {
        &self.nodes[self.n_classes..]
    }

    /// Builds a tree from an explicit merge list of `(left, right, distance)`
    /// node ids, validating structure.
    pub fn from_merges(
        n_classes: usize,
        linkage: Linkage,
        merges: &[(usize, usize, f64)],
    ) -> Result<ClusterTree> {
        if n_classes < 2 {
            return Err(Error::invalid("a cluster tree needs at least 2 classes"));
        }
        if merges.len() != n_classes - 1 {
            return Err(Error::invalid(format!(
                "{} merges for {n_classes} classes",
                merges.len()
            )));
        }
        let mut nodes: Vec<ClusterNode> = (0..n_classes)
            .map(|c| ClusterNode {
                left: None,
                right: None,
                distance: 0.0,
                classes: vec![c],
            })
            .collect();
        let mut used = vec![false; 2 * n_classes - 1];
        for (k, &(l, r, d)) in merges.iter().enumerate() {
            let id = n_classes + k;
            if l >= id || r >= id || l == r || used[l] || used[r] {
                return Err(Error::invalid(format!("merge {k} references invalid nodes {l}, {r}")));
            }
            if !d.is_finite() || d < 0.0 {
                return Err(Error::invalid(format!("merge {k} has distance {d}")));
            }
            used[l] = true;
            used[r] = true;
            let mut classes = nodes[l].classes.clone();
            classes.extend_from_slice(&nodes[r].classes);
            classes.sort_unstable();
            nodes.push(ClusterNode {
                left: Some(l),
                right: Some(r),
                distance: d,
                classes,
            });
        }
        Ok(ClusterTree {
            n_classes,
            linkage,
            nodes,
        })
    }

    /// Longest root-to-leaf path counted in internal nodes.
    pub fn depth(&self) -> usize {
        fn go(t: &ClusterTree, id: usize) -> usize {
            match t.nodes[id].children() {
                None => 0,
                Some((l, r)) => 1 + go(t, l).max(go(t, r)),
            }
        }
        go(self, self.root())
    }

    /// Indented text rendering, one node per line.
    pub fn render_text(&self, names: Option<&[String]>) -> String {
        fn go(t: &ClusterTree, id: usize, depth: usize, names: Option<&[String]>, out: &mut String) {
            let node = &t.nodes[id];
            let indent = "  ".repeat(depth);
            let label = |c: usize| names.and_then(|n| n.get(c)).cloned().unwrap_or_else(|| c.to_string());
            match node.children() {
                None => {
                    let _ = writeln!(out, "{indent}- {}", label(node.classes[0]));
                }
                Some((l, r)) => {
                    let members: Vec<String> = node.classes.iter().map(|&c| label(c)).collect();
                    let _ = writeln!(out, "{indent}+ [{}] @ {:.6}", members.join(", "), node.distance);
                    go(t, l, depth + 1, names, out);
                    go(t, r, depth + 1, names, out);
                }
            }
        }
        let mut out = String::new();
        go(self, self.root(), 0, names, &mut out);
        out
    }

    fn to_nested(&self, id: usize) -> TreeJson {
        let node = &self.nodes[id];
        match node.children() {
            None => TreeJson::Leaf {
                class: node.classes[0],
            },
            Some((l, r)) => TreeJson::Merge {
                id,
                distance: node.distance,
                classes: node.classes.clone(),
                children: vec![self.to_nested(l), self.to_nested(r)],
            },
        }
    }

    pub fn to_file(&self) -> ClusterTreeFile {
        ClusterTreeFile {
            n_classes: self.n_classes,
            linkage: self.linkage,
            root: self.to_nested(self.root()),
        }
    }

    pub fn from_file(file: &ClusterTreeFile) -> Result<ClusterTree> {
        let n = file.n_classes;
        if n < 2 {
            return Err(Error::schema("n_classes", "must be at least 2"));
        }
        let mut merges: Vec<Option<(usize, usize, f64)>> = vec![None; n - 1];
        fn walk(
            t: &TreeJson,
            n: usize,
            path: &str,
            merges: &mut [Option<(usize, usize, f64)>],
        ) -> Result<(usize, Vec<usize>)> {
            match t {
                TreeJson::Leaf { class } => {
                    if *class >= n {
                        return Err(Error::schema(path, format!("class {class} >= n_classes")));
                    }
                    Ok((*class, vec![*class]))
                }
                TreeJson::Merge {
                    id,
                    distance,
                    classes,
                    children,
                } => {
                    if children.len() != 2 {
                        return Err(Error::schema(path, "merge nodes need exactly 2 children"));
                    }
                    if *id < n || *id >= 2 * n - 1 {
                        return Err(Error::schema(path, format!("merge id {id} out of range")));
                    }
                    let (l, mut lc) = walk(&children[0], n, &format!("{path}.children[0]"), merges)?;
                    let (r, rc) = walk(&children[1], n, &format!("{path}.children[1]"), merges)?;
                    lc.extend(rc);
                    lc.sort_unstable();
                    if &lc != classes {
                        return Err(Error::schema(path, "classes do not match children"));
                    }
                    let slot = &mut merges[id - n];
                    if slot.is_some() {
                        return Err(Error::schema(path, format!("duplicate merge id {id}")));
                    }
                    *slot = Some((l, r, *distance));
                    Ok((*id, lc))
                }
            }
        }
        let (root, classes) = walk(&file.root, n, "root", &mut merges)?;
        if root != 2 * n - 2 || classes != (0..n).collect::<Vec<_>>() {
            return Err(Error::schema("root", "root must be the last merge and cover every class"));
        }
        let merges: Vec<(usize, usize, f64)> = merges.into_iter().map(|m| m.expect("all merges visited")).collect();
        ClusterTree::from_merges(n, file.linkage, &merges).map_err(|e| Error::schema("root", e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<ClusterTree> {
        ClusterTree::from_file(&crate::error::parse_document(text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterTreeFile {
    pub n_classes: usize,
    pub linkage: Linkage,
    pub root: TreeJson,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeJson {
    Leaf {
        class: usize,
    },
    Merge {
        id: usize,
        distance: f64,
        classes: Vec<usize>,
        children: Vec<TreeJson>,
    },
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn cluster_distance(
    linkage: Linkage,
    a: &[usize],
    b: &[usize],
    pairwise: &[f64],
    rows: &[&[f64]],
    n: usize,
) -> f64 {
    match linkage {
        Linkage::Average => {
            let mut total = 0.0;
            for &i in a {
                for &j in b {
                    total += pairwise[i * n + j];
                }
            }
            total / (a.len() * b.len()) as f64
        }
        Linkage::Ward => {
            let centroid = |members: &[usize]| -> Vec<f64> {
                let d = rows[0].len();
                let mut c = vec![0.0; d];
                for &m in members {
                    for (ck, v) in c.iter_mut().zip(rows[m]) {
                        *ck += v;
                    }
                }
                c.iter_mut().for_each(|v| *v /= members.len() as f64);
                c
            };
            let (na, nb) = (a.len() as f64, b.len() as f64);
            (2.0 * na * nb / (na + nb)).sqrt() * euclidean(&centroid(a), &centroid(b))
        }
    }
}

/// Agglomerative clustering of class weight rows (`[n_classes, d]`) under
/// Euclidean distance. Among equally distant cluster pairs, the pair whose
/// smallest class indices `(min A, min B)` are lexicographically smallest is
/// merged first; the left child is always the cluster holding the smaller index.
pub fn agglomerative_cluster(class_weights: &Tensor, linkage: Linkage) -> Result<ClusterTree> {
    let (n, _) = match class_weights.shape() {
        &[n, d] => (n, d),
        s => return Err(Error::shape(format!("class weights must be [n, d], got {s:?}"))),
    };
    if n < 2 {
        return Err(Error::invalid(format!("clustering needs at least 2 classes, got {n}")));
    }
    let rows: Vec<&[f64]> = (0..n).map(|i| class_weights.row(i)).collect();
    let mut pairwise = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            pairwise[i * n + j] = euclidean(rows[i], rows[j]);
        }
    }
    // (node id, sorted members); kept ordered by smallest member.
    let mut active: Vec<(usize, Vec<usize>)> = (0..n).map(|c| (c, vec![c])).collect();
    let mut merges = Vec::with_capacity(n - 1);
    for k in 0..n - 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..active.len() {
            for b in a + 1..active.len() {
                let d = cluster_distance(linkage, &active[a].1, &active[b].1, &pairwise, &rows, n);
                if best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, a, b));
                }
            }
        }
        let (d, a, b) = best.expect("at least two active clusters");
        let (right_id, right) = active.remove(b);
        let (left_id, mut members) = active.remove(a);
        merges.push((left_id, right_id, d));
        members.extend(right);
        members.sort_unstable();
        let pos = active
            .iter()
            .position(|(_, m)| m[0] > members[0])
            .unwrap_or(active.len());
        active.insert(pos, (n + k, members));
    }
    ClusterTree::from_merges(n, linkage, &merges)
}

/// Mapping of classes to dense group ids `0..n_groups`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupPartition {
    group_of: Vec<usize>,
    n_groups: usize,
}

impl GroupPartition {
    pub fn from_group_of(group_of: Vec<usize>) -> Result<GroupPartition> {
        let n_groups = group_of.iter().max().map_or(0, |&m| m + 1);
        if group_of.is_empty() {
            return Err(Error::invalid("partition over zero classes"));
        }
        let used: BTreeSet<usize> = group_of.iter().copied().collect();
        if used.len() != n_groups {
            return Err(Error::invalid("group ids must be dense 0..n_groups"));
        }
        Ok(GroupPartition { group_of, n_groups })
    }

    /// Groups listed explicitly; group `g` is `groups[g]`.
    pub fn from_groups(groups: &[Vec<usize>], n_classes: usize) -> Result<GroupPartition> {
        let mut group_of = vec![usize::MAX; n_classes];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::invalid(format!("group {g} is empty")));
            }
            for &c in members {
                if c >= n_classes {
                    return Err(Error::invalid(format!("class {c} >= n_classes {n_classes}")));
                }
                if group_of[c] != usize::MAX {
                    return Err(Error::invalid(format!("class {c} appears in two groups")));
                }
                group_of[c] = g;
            }
        }
        if let Some(c) = group_of.iter().position(|&g| g == usize::MAX) {
            return Err(Error::invalid(format!("class {c} is not in any group")));
        }
        GroupPartition::from_group_of(group_of)
    }

    pub fn single_group(n_classes: usize) -> GroupPartition {
        GroupPartition {
            group_of: vec![0; n_classes],
            n_groups: 1,
        }
    }

    pub fn singletons(n_classes: usize) -> GroupPartition {
        GroupPartition {
            group_of: (0..n_classes).collect(),
            n_groups: n_classes,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.group_of.len()
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn group_of(&self, class: usize) -> usize {
        self.group_of[class]
    }

    pub fn same_group(&self, a: usize, b: usize) -> bool {
        self.group_of[a] == self.group_of[b]
    }

    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.n_groups];
        for (c, &g) in self.group_of.iter().enumerate() {
            groups[g].push(c);
        }
        groups
    }

    pub fn to_file(&self) -> PartitionFile {
        PartitionFile {
            n_classes: self.n_classes(),
            groups: self.groups(),
        }
    }

    pub fn from_file(file: &PartitionFile) -> Result<GroupPartition> {
        GroupPartition::from_groups(&file.groups, file.n_classes)
            .map_err(|e| Error::schema("groups", e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<GroupPartition> {
        GroupPartition::from_file(&crate::error::parse_document(text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionFile {
    pub n_classes: usize,
    pub groups: Vec<Vec<usize>>,
}

/// Two-group partition at an internal node: its left and right children.
/// Classes outside the node are not covered, so the result is over the
/// node's own classes, relabelled `0..k` in ascending order.
pub fn partition_at(tree: &ClusterTree, node: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = tree
        .nodes
        .get(node)
        .ok_or_else(|| Error::invalid(format!("node {node} does not exist")))?;
    let (l, r) = n
        .children()
        .ok_or_else(|| Error::invalid(format!("node {node} is a leaf")))?;
    Ok((tree.nodes[l].classes.clone(), tree.nodes[r].classes.clone()))
}

/// The root's two children as a partition over all classes.
pub fn top_level_split(tree: &ClusterTree) -> GroupPartition {
    let (a, b) = partition_at(tree, tree.root()).expect("root of a valid tree is internal");
    GroupPartition::from_groups(&[a, b], tree.n_classes).expect("root children cover all classes")
}

/// Margin specification matrix with entries in {-1, 0, +1}. Every active row
/// `i` reads `+1` at the true class and `-1` at `i`; row `y` is zero.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpecMatrix {
    n: usize,
    y: usize,
    entries: Vec<i8>,
}

#[derive(Clone, Copy)]
enum RowFilter {
    All,
    OutGroup,
    InGroup,
}

fn build_spec(y: usize, n: usize, partition: Option<&GroupPartition>, filter: RowFilter) -> Result<SpecMatrix> {
    if y >= n {
        return Err(Error::invalid(format!("true label {y} out of range for {n} classes")));
    }
    if let Some(p) = partition {
        if p.n_classes() != n {
            return Err(Error::invalid(format!(
                "partition covers {} classes, network has {n}",
                p.n_classes()
            )));
        }
    }
    let mut entries = vec![0i8; n * n];
    for i in (0..n).filter(|&i| i != y) {
        let keep = match (filter, partition) {
            (RowFilter::All, _) => true,
            (RowFilter::OutGroup, Some(p)) => !p.same_group(i, y),
            (RowFilter::InGroup, Some(p)) => p.same_group(i, y),
            (_, None) => unreachable!("group filters need a partition"),
        };
        if keep {
            entries[i * n + y] = 1;
            entries[i * n + i] = -1;
        }
    }
    Ok(SpecMatrix { n, y, entries })
}

pub fn spec_standard(y: usize, n_classes: usize) -> Result<SpecMatrix> {
    build_spec(y, n_classes, None, RowFilter::All)
}

/// Rows only for classes outside the true class's group.
pub fn spec_outer(y: usize, partition: &GroupPartition, n_classes: usize) -> Result<SpecMatrix> {
    build_spec(y, n_classes, Some(partition), RowFilter::OutGroup)
}

/// Rows only for other classes inside the true class's group.
pub fn spec_inner(y: usize, partition: &GroupPartition, n_classes: usize) -> Result<SpecMatrix> {
    build_spec(y, n_classes, Some(partition), RowFilter::InGroup)
}

impl SpecMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn label(&self) -> usize {
        self.y
    }

    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.entries[i * self.n + j]
    }

    pub fn entries(&self) -> &[i8] {
        &self.entries
    }

    pub fn row_is_active(&self, i: usize) -> bool {
        self.entries[i * self.n..(i + 1) * self.n].iter().any(|&v| v != 0)
    }

    pub fn active_rows(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.row_is_active(i)).collect()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.n, self.n],
            self.entries.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("square matrix")
    }

    /// `C f` for a logit vector.
    pub fn apply(&self, logits: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                (0..self.n)
                    .map(|j| f64::from(self.get(i, j)) * logits[j])
                    .sum()
            })
            .collect()
    }

    /// Checks the structural row invariants.
    pub fn check_invariants(&self) -> std::result::Result<(), String> {
        let n = self.n;
        for i in 0..n {
            let row = &self.entries[i * n..(i + 1) * n];
            if row.iter().any(|v| !(-1..=1).contains(v)) {
                return Err(format!("row {i} has an entry outside {{-1, 0, 1}}"));
            }
            if row.iter().map(|&v| i32::from(v)).sum::<i32>() != 0 {
                return Err(format!("row {i} does not sum to zero"));
            }
            if i == self.y {
                if row.iter().any(|&v| v != 0) {
                    return Err("true-label row is not zero".into());
                }
                continue;
            }
            if row.iter().any(|&v| v != 0) {
                let plus: Vec<usize> = (0..n).filter(|&j| row[j] == 1).collect();
                let minus: Vec<usize> = (0..n).filter(|&j| row[j] == -1).collect();
                if plus != [self.y] || minus != [i] {
                    return Err(format!("row {i} is not e_y - e_i"));
                }
            }
        }
        Ok(())
    }
}
