//! Exact nearest-neighbour queries under the max-norm.
//!
//! Both indexes answer the two questions the kNN estimators ask about a
//! point that belongs to the indexed set: how far is its k-th neighbour
//! (itself excluded), and how many points lie strictly inside a ball.

/// Below this many points the brute-force index is used.
pub const BRUTE_FORCE_BELOW: usize = 200;

const LEAF_SIZE: usize = 16;

pub trait NeighborIndex {
    /// Max-norm distance from point `i` to its `k`-th nearest other point.
    fn kth_distance(&self, i: usize, k: usize) -> f64;
    /// Number of points `j` (including `i` itself) with `dist(i, j) < radius`.
    fn count_within(&self, i: usize, radius: f64) -> usize;
}

#[inline]
pub fn max_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc.max((x - y).abs()))
}

/// Builds the index appropriate for the sample size.
pub fn build_index<'a>(data: &'a [f64], dim: usize) -> Box<dyn NeighborIndex + 'a> {
    if data.len() / dim < BRUTE_FORCE_BELOW {
        Box::new(BruteForce::new(data, dim))
    } else {
        Box::new(KdTree::new(data, dim))
    }
}

pub struct BruteForce<'a> {
    data: &'a [f64],
    dim: usize,
}

impl<'a> BruteForce<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Self {
        BruteForce { data, dim }
    }

    fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn len(&self) -> usize {
        self.data.len() / self.dim
    }
}

impl NeighborIndex for BruteForce<'_> {
    fn kth_distance(&self, i: usize, k: usize) -> f64 {
        let q = self.point(i);
        let mut dists: Vec<f64> = (0..self.len())
            .filter(|&j| j != i)
            .map(|j| max_norm(q, self.point(j)))
            .collect();
        let (_, kth, _) = dists.select_nth_unstable_by(k - 1, f64::total_cmp);
        *kth
    }

    fn count_within(&self, i: usize, radius: f64) -> usize {
        let q = self.point(i);
        (0..self.len()).filter(|&j| max_norm(q, self.point(j)) < radius).count()
    }
}

struct Node {
    start: usize,
    end: usize,
    /// Child node ids; `None` for leaves.
    children: Option<(usize, usize)>,
}

/// k-d tree over a fixed point set with per-node bounding boxes.
pub struct KdTree {
    dim: usize,
    /// Points in tree order.
    points: Vec<f64>,
    /// Position of each original point in tree order.
    position: Vec<usize>,
    nodes: Vec<Node>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl KdTree {
    pub fn new(data: &[f64], dim: usize) -> Self {
        let n = data.len() / dim;
        let mut perm: Vec<usize> = (0..n).collect();
        let mut tree = KdTree {
            dim,
            points: Vec::new(),
            position: vec![0; n],
            nodes: Vec::new(),
            lo: Vec::new(),
            hi: Vec::new(),
        };
        if n > 0 {
            tree.build(data, &mut perm, 0, n);
        }
        tree.points = perm
            .iter()
            .flat_map(|&p| data[p * dim..(p + 1) * dim].iter().copied())
            .collect();
        for (pos, &p) in perm.iter().enumerate() {
            tree.position[p] = pos;
        }
        tree
    }

    fn build(&mut self, data: &[f64], perm: &mut [usize], start: usize, end: usize) -> usize {
        let dim = self.dim;
        let id = self.nodes.len();
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for &p in &perm[start..end] {
            for d in 0..dim {
                let v = data[p * dim + d];
                lo[d] = lo[d].min(v);
                hi[d] = hi[d].max(v);
            }
        }
        let (split, spread) =
            (0..dim).map(|d| (d, hi[d] - lo[d])).fold(
                (0, f64::NEG_INFINITY),
                |best, cur| if cur.1 > best.1 { cur } else { best },
            );
        self.lo.extend_from_slice(&lo);
        self.hi.extend_from_slice(&hi);
        self.nodes.push(Node {
            start,
            end,
            children: None,
        });
        if end - start <= LEAF_SIZE || !(spread > 0.0) {
            return id;
        }
        let mid = start + (end - start) / 2;
        perm[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            data[a * dim + split].total_cmp(&data[b * dim + split])
        });
        let left = self.build(data, perm, start, mid);
        let right = self.build(data, perm, mid, end);
        self.nodes[id].children = Some((left, right));
        id
    }

    #[inline]
    fn point(&self, pos: usize) -> &[f64] {
        &self.points[pos * self.dim..(pos + 1) * self.dim]
    }

    #[inline]
    fn min_dist(&self, node: usize, q: &[f64]) -> f64 {
        let lo = &self.lo[node * self.dim..(node + 1) * self.dim];
        let hi = &self.hi[node * self.dim..(node + 1) * self.dim];
        let mut d = 0.0f64;
        for j in 0..self.dim {
            d = d.max(lo[j] - q[j]).max(q[j] - hi[j]);
        }
        d
    }

    #[inline]
    fn max_dist(&self, node: usize, q: &[f64]) -> f64 {
        let lo = &self.lo[node * self.dim..(node + 1) * self.dim];
        let hi = &self.hi[node * self.dim..(node + 1) * self.dim];
        let mut d = 0.0f64;
        for j in 0..self.dim {
            d = d.max((q[j] - lo[j]).abs()).max((hi[j] - q[j]).abs());
        }
        d
    }

    fn knn(&self, node: usize, q: &[f64], skip: usize, best: &mut Vec<f64>, k: usize) {
        if best.len() == k && self.min_dist(node, q) >= best[k - 1] {
            return;
        }
        let n = &self.nodes[node];
        match n.children {
            None => {
                for pos in n.start..n.end {
                    if pos == skip {
                        continue;
                    }
                    let d = max_norm(q, self.point(pos));
                    if best.len() < k {
                        let at = best.partition_point(|&b| b <= d);
                        best.insert(at, d);
                    } else if d < best[k - 1] {
                        best.pop();
                        let at = best.partition_point(|&b| b <= d);
                        best.insert(at, d);
                    }
                }
            }
            Some((l, r)) => {
                let (first, second) = if self.min_dist(l, q) <= self.min_dist(r, q) {
                    (l, r)
                } else {
                    (r, l)
                };
                self.knn(first, q, skip, best, k);
                self.knn(second, q, skip, best, k);
            }
        }
    }

    fn count(&self, node: usize, q: &[f64], radius: f64) -> usize {
        if self.min_dist(node, q) >= radius {
            return 0;
        }
        let n = &self.nodes[node];
        if self.max_dist(node, q) < radius {
            return n.end - n.start;
        }
        match n.children {
            None => (n.start..n.end)
                .filter(|&pos| max_norm(q, self.point(pos)) < radius)
                .count(),
            Some((l, r)) => self.count(l, q, radius) + self.count(r, q, radius),
        }
    }
}

impl NeighborIndex for KdTree {
    fn kth_distance(&self, i: usize, k: usize) -> f64 {
        let pos = self.position[i];
        let q = self.point(pos).to_vec();
        let mut best = Vec::with_capacity(k + 1);
        self.knn(0, &q, pos, &mut best, k);
        best[k - 1]
    }

    fn count_within(&self, i: usize, radius: f64) -> usize {
        let q = self.point(self.position[i]).to_vec();
        self.count(0, &q, radius)
    }
}
