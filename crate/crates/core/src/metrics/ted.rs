//! Ordered tree edit distance (Zhang–Shasha) and TEDS.
//!
//! Unit costs for insert, delete and rename; a rename is free when labels
//! are equal.

use crate::hierarchy::{DocumentTree, NodeKind};

/// A rooted, ordered, labelled tree stored as an arena.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderedTree<L> {
    labels: Vec<L>,
    children: Vec<Vec<usize>>,
}

impl<L> OrderedTree<L> {
    pub fn leaf(label: L) -> Self {
        OrderedTree {
            labels: vec![label],
            children: vec![Vec::new()],
        }
    }

    /// Builds a tree from a parent list where `parents[0]` is `None` (the
    /// root) and every other parent index precedes its child. Children keep
    /// index order.
    pub fn from_parents(labels: Vec<L>, parents: &[Option<usize>]) -> Self {
        assert_eq!(labels.len(), parents.len());
        let mut children = vec![Vec::new(); labels.len()];
        for (i, p) in parents.iter().enumerate() {
            match p {
                Some(p) => {
                    assert!(*p < i, "parent must precede child");
                    children[*p].push(i);
                }
                None => assert_eq!(i, 0, "only node 0 may be the root"),
            }
        }
        OrderedTree { labels, children }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, idx: usize) -> &L {
        &self.labels[idx]
    }

    pub fn children(&self, idx: usize) -> &[usize] {
        &self.children[idx]
    }

    /// Post-order node indices and, for each post-order position (1-based),
    /// the post-order position of its leftmost leaf descendant.
    fn post_order(&self) -> (Vec<usize>, Vec<usize>) {
        let n = self.len();
        let mut order = Vec::with_capacity(n);
        let mut leftmost = vec![0usize; n + 1];
        if n == 0 {
            return (order, leftmost);
        }
        let mut lml_by_node = vec![0usize; n];
        // (node, next child to visit)
        let mut stack = vec![(0usize, 0usize)];
        while let Some(&mut (node, ref mut next)) = stack.last_mut() {
            if *next < self.children[node].len() {
                let child = self.children[node][*next];
                *next += 1;
                stack.push((child, 0));
            } else {
                stack.pop();
                order.push(node);
                let pos = order.len();
                lml_by_node[node] = match self.children[node].first() {
                    Some(&first) => lml_by_node[first],
                    None => pos,
                };
                leftmost[pos] = lml_by_node[node];
            }
        }
        (order, leftmost)
    }
}

impl OrderedTree<(NodeKind, String)> {
    /// Labels are `(kind, normalized text)` with lowercase, collapsed
    /// whitespace.
    pub fn from_document_tree(tree: &DocumentTree) -> Self {
        let pre = tree.pre_order();
        let mut position = vec![0usize; tree.len()];
        for (pos, &idx) in pre.iter().enumerate() {
            position[idx] = pos;
        }
        let labels = pre
            .iter()
            .map(|&i| {
                let node = tree.node(i);
                (node.kind, normalize_label(&node.text))
            })
            .collect();
        let parents: Vec<Option<usize>> = pre
            .iter()
            .map(|&i| tree.node(i).parent.map(|p| position[p]))
            .collect();
        OrderedTree::from_parents(labels, &parents)
    }
}

pub fn normalize_label(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn key_roots(leftmost: &[usize], n: usize) -> Vec<usize> {
    // For each distinct leftmost leaf keep the highest node having it.
    let mut highest = vec![0usize; n + 1];
    for pos in 1..=n {
        highest[leftmost[pos]] = pos;
    }
    let mut roots: Vec<usize> = highest.into_iter().filter(|&p| p != 0).collect();
    roots.sort_unstable();
    roots
}

pub fn tree_edit_distance<L: Eq>(a: &OrderedTree<L>, b: &OrderedTree<L>) -> usize {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return n.max(m);
    }
    let (order_a, la) = a.post_order();
    let (order_b, lb) = b.post_order();
    let ka = key_roots(&la, n);
    let kb = key_roots(&lb, m);

    let mut td = vec![0u32; (n + 1) * (m + 1)];
    let mut fd = vec![0u32; (n + 1) * (m + 1)];
    let w = m + 2;

    for &i in &ka {
        for &j in &kb {
            let (li, lj) = (la[i], lb[j]);
            let rows = i - li + 2;
            let cols = j - lj + 2;
            if fd.len() < rows * w {
                fd.resize(rows * w, 0);
            }
            fd[0] = 0;
            for dx in 1..rows {
                fd[dx * w] = fd[(dx - 1) * w] + 1;
            }
            for dy in 1..cols {
                fd[dy] = fd[dy - 1] + 1;
            }
            for x in li..=i {
                let dx = x - li + 1;
                for y in lj..=j {
                    let dy = y - lj + 1;
                    let delete = fd[(dx - 1) * w + dy] + 1;
                    let insert = fd[dx * w + dy - 1] + 1;
                    let value = if la[x] == li && lb[y] == lj {
                        let rename = u32::from(a.labels[order_a[x - 1]] != b.labels[order_b[y - 1]]);
                        let v = delete.min(insert).min(fd[(dx - 1) * w + dy - 1] + rename);
                        td[x * (m + 1) + y] = v;
                        v
                    } else {
                        let px = la[x] - li;
                        let py = lb[y] - lj;
                        delete.min(insert).min(fd[px * w + py] + td[x * (m + 1) + y])
                    };
                    fd[dx * w + dy] = value;
                }
            }
        }
    }
    td[n * (m + 1) + m] as usize
}

/// `1 - TED / max(|a|, |b|)`, floored at 0: distance can exceed the larger
/// size when shapes disagree (a star against a chain, say).
pub fn teds_ordered<L: Eq>(a: &OrderedTree<L>, b: &OrderedTree<L>) -> f64 {
    let size = a.len().max(b.len());
    if size == 0 {
        return 1.0;
    }
    (1.0 - tree_edit_distance(a, b) as f64 / size as f64).max(0.0)
}

/// Tree-edit-distance similarity between two document trees.
pub fn teds(pred: &DocumentTree, gold: &DocumentTree) -> f64 {
    teds_ordered(
        &OrderedTree::from_document_tree(pred),
        &OrderedTree::from_document_tree(gold),
    )
}
