//! Barnes–Hut style tree code for the unnormalized empirical field.
//!
//! Sources are split along their widest data-space extent. A node far enough
//! from the query (bounding-box diagonal over distance to its charge-weighted
//! centroid below `theta`) is replaced by its multipole expansion; leaves are
//! always summed directly.
//!
//! The expansion is taken about the centroid, so the dipole term vanishes.
//! [`Expansion`] picks the highest moment kept. Even orders carry most of the
//! error for roughly symmetric cells (odd moments nearly cancel), so the
//! default for low dimensions is the fourth moment; it costs `n^4` storage per
//! node, so [`build_tree`] drops to the quadrupole above [`HEXADECAPOLE_MAX_DIM`].

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent f64 methods when std is linked
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{domain, Error, Result};
use crate::field::{inverse_power, AugmentedPoint, SINGULAR_RADIUS};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expansion {
    Monopole,
    Quadrupole,
    Octupole,
    #[default]
    Hexadecapole,
}

impl Expansion {
    /// Highest moment order kept.
    pub fn order(self) -> usize {
        match self {
            Expansion::Monopole => 0,
            Expansion::Quadrupole => 2,
            Expansion::Octupole => 3,
            Expansion::Hexadecapole => 4,
        }
    }
}

/// Largest data dimension for which [`build_tree`] keeps fourth moments.
pub const HEXADECAPOLE_MAX_DIM: usize = 6;

#[derive(Debug, Clone)]
struct Node {
    start: usize,
    end: usize,
    charge: f64,
    centroid: Vec<f64>,
    /// Charge-weighted central moments of order 2..=4, row-major, each
    /// empty when above the tree's expansion order.
    m2: Vec<f64>,
    m3: Vec<f64>,
    m4: Vec<f64>,
    /// Contractions over the first index pair: `tr m2`, `m3_aac`, `m4_aacd`
    /// and `m4_aacc`.
    tr2: f64,
    tr3: Vec<f64>,
    tr4: Vec<f64>,
    tr4_full: f64,
    diag: f64,
    children: Option<(usize, usize)>,
}

/// Immutable tree over a dataset's sources.
#[derive(Debug, Clone)]
pub struct TreeCode {
    n: usize,
    points: Vec<f64>,
    charges: Vec<f64>,
    original: Vec<usize>,
    nodes: Vec<Node>,
    theta: f64,
    leaf_capacity: usize,
    expansion: Expansion,
}

/// Unnormalized vector sum and its matching scalar normalizer.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeSums {
    pub vector: Vec<f64>,
    pub scalar: f64,
    /// Nodes replaced by an expansion.
    pub approximated: usize,
    /// Sources summed directly.
    pub direct: usize,
}

impl TreeSums {
    pub fn normalized(&self) -> Vec<f64> {
        self.vector.iter().map(|v| v / self.scalar).collect()
    }
}

/// Build with the fourth-moment expansion, or the quadrupole in high
/// dimensions.
pub fn build_tree(d: &Dataset, leaf_capacity: usize, theta: f64) -> Result<TreeCode> {
    let e = if d.dim().n() <= HEXADECAPOLE_MAX_DIM {
        Expansion::Hexadecapole
    } else {
        Expansion::Quadrupole
    };
    build_tree_with(d, leaf_capacity, theta, e)
}

pub fn build_tree_with(
    d: &Dataset,
    leaf_capacity: usize,
    theta: f64,
    expansion: Expansion,
) -> Result<TreeCode> {
    if d.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if leaf_capacity == 0 {
        return Err(domain!("leaf capacity must be positive"));
    }
    if !(theta >= 0.0) || !theta.is_finite() {
        return Err(domain!("opening angle must be finite and nonnegative, got {theta}"));
    }
    let n = d.dim().n();
    let mut order: Vec<usize> = (0..d.len()).collect();
    let mut nodes = Vec::new();
    split(d, &mut order, 0, d.len(), leaf_capacity, expansion, &mut nodes);

    let mut points = Vec::with_capacity(d.len() * n);
    let mut charges = Vec::with_capacity(d.len());
    for &i in &order {
        points.extend_from_slice(d.point(i));
        charges.push(d.charge(i));
    }
    Ok(TreeCode {
        n,
        points,
        charges,
        original: order,
        nodes,
        theta,
        leaf_capacity,
        expansion,
    })
}

fn split(
    d: &Dataset,
    order: &mut [usize],
    start: usize,
    end: usize,
    cap: usize,
    expansion: Expansion,
    nodes: &mut Vec<Node>,
) -> usize {
    let n = d.dim().n();
    let slice = &order[start..end];

    let mut lo = vec![f64::INFINITY; n];
    let mut hi = vec![f64::NEG_INFINITY; n];
    let mut charge = 0.0;
    let mut centroid = vec![0.0; n];
    for &i in slice {
        let p = d.point(i);
        let q = d.charge(i);
        charge += q;
        for j in 0..n {
            lo[j] = lo[j].min(p[j]);
            hi[j] = hi[j].max(p[j]);
            centroid[j] += q * p[j];
        }
    }
    linalg::scale_in_place(&mut centroid, 1.0 / charge);
    let k_max = expansion.order();
    let mut m2 = Vec::new();
    let mut m3 = Vec::new();
    let mut m4 = Vec::new();
    if k_max >= 2 {
        m2 = vec![0.0; n * n];
    }
    if k_max >= 3 {
        m3 = vec![0.0; n * n * n];
    }
    if k_max >= 4 {
        m4 = vec![0.0; n * n * n * n];
    }
    let mut s = vec![0.0; n];
    for &i in slice.iter().filter(|_| k_max >= 2) {
        let p = d.point(i);
        let q = d.charge(i);
        for a in 0..n {
            s[a] = p[a] - centroid[a];
        }
        for a in 0..n {
            for b in 0..n {
                let qab = q * s[a] * s[b];
                m2[a * n + b] += qab;
                for c in 0..n.min(m3.len()) {
                    let qabc = qab * s[c];
                    m3[(a * n + b) * n + c] += qabc;
                    for e in 0..n.min(m4.len()) {
                        m4[((a * n + b) * n + c) * n + e] += qabc * s[e];
                    }
                }
            }
        }
    }
    let tr2 = (0..n.min(m2.len())).map(|a| m2[a * n + a]).sum();
    let tr3: Vec<f64> = (0..n.min(m3.len()))
        .map(|c| (0..n).map(|a| m3[(a * n + a) * n + c]).sum())
        .collect();
    let tr4: Vec<f64> = (0..(n * n).min(m4.len()))
        .map(|ce| (0..n).map(|a| m4[(a * n + a) * n * n + ce]).sum())
        .collect();
    let tr4_full = (0..tr4.len().min(n)).map(|c| tr4[c * n + c]).sum();
    let diag = lo.iter().zip(&hi).map(|(l, h)| (h - l) * (h - l)).sum::<f64>().sqrt();

    let id = nodes.len();
    nodes.push(Node {
        start,
        end,
        charge,
        centroid,
        m2,
        m3,
        m4,
        tr2,
        tr3,
        tr4,
        tr4_full,
        diag,
        children: None,
    });

    if end - start > cap && diag > 0.0 {
        let axis = (0..n)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        let mid = (end - start) / 2;
        order[start..end].select_nth_unstable_by(mid, |&a, &b| d.point(a)[axis].total_cmp(&d.point(b)[axis]));
        let left = split(d, order, start, start + mid, cap, expansion, nodes);
        let right = split(d, order, start + mid, end, cap, expansion, nodes);
        nodes[id].children = Some((left, right));
    }
    id
}

impl TreeCode {
    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn leaf_capacity(&self) -> usize {
        self.leaf_capacity
    }

    pub fn expansion(&self) -> Expansion {
        self.expansion
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn len(&self) -> usize {
        self.charges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.charges.is_empty()
    }

    /// Leaves as ranges of original source indices.
    pub fn leaves(&self) -> Vec<Vec<usize>> {
        self.nodes
            .iter()
            .filter(|nd| nd.children.is_none())
            .map(|nd| self.original[nd.start..nd.end].to_vec())
            .collect()
    }

    /// Total charge and charge-weighted centroid of the root.
    pub fn root_moments(&self) -> (f64, &[f64]) {
        (self.nodes[0].charge, &self.nodes[0].centroid)
    }

    fn direct(&self, node: &Node, q: &AugmentedPoint, out: &mut TreeSums) -> Result<()> {
        let n = self.n;
        let aug = n + 1;
        let z2 = q.z * q.z;
        for k in node.start..node.end {
            let p = &self.points[k * n..(k + 1) * n];
            let r2 = linalg::dist_sq(&q.x, p) + z2;
            if r2 < SINGULAR_RADIUS * SINGULAR_RADIUS {
                return Err(Error::Singularity { index: self.original[k] });
            }
            let w = self.charges[k] * inverse_power(1.0 / r2, aug);
            for j in 0..n {
                out.vector[j] += w * (q.x[j] - p[j]);
            }
            out.vector[n] += w * q.z;
            out.scalar += w;
        }
        out.direct += node.end - node.start;
        Ok(())
    }

    /// Taylor terms `(-1)^k / k! * M_k : grad^k` of the kernel about the
    /// centroid. With `F(u) = u^(-p/2)`, `u = |r|^2`, the scalar kernel is
    /// `F` and the vector kernel `r F`; derivatives are written through
    /// `F1..F4`, the `u`-derivatives of `F`.
    fn expand(&self, node: &Node, r: &[f64], rho2: f64, out: &mut TreeSums) {
        let n = self.n;
        let h = 0.5 * (n + 1) as f64;
        let base = inverse_power(1.0 / rho2, n + 1);
        let qn = node.charge;
        for (o, rj) in out.vector.iter_mut().zip(r) {
            *o += qn * base * rj;
        }
        out.scalar += qn * base;
        let order = self.expansion.order();
        if order < 2 {
            out.approximated += 1;
            return;
        }
        let mut f = [base; 5];
        for k in 1..5 {
            f[k] = -f[k - 1] * (h + (k - 1) as f64) / rho2;
        }
        let x = &r[..n];
        // scalar part and the extra vector part (data components only)
        let mut sc = 0.0;
        let mut vec_extra = vec![0.0; n];

        let m2r: Vec<f64> = (0..n).map(|a| linalg::dot(&node.m2[a * n..(a + 1) * n], x)).collect();
        let rm2r = linalg::dot(&m2r, x);
        sc += 0.5 * (2.0 * node.tr2 * f[1] + 4.0 * rm2r * f[2]);
        for j in 0..n {
            vec_extra[j] += 2.0 * m2r[j] * f[1];
        }

        if order >= 3 {
            // m3rr_j = m3_jbc r_b r_c
            let m3rr: Vec<f64> = (0..n)
                .map(|a| (0..n).map(|b| x[b] * linalg::dot(&node.m3[(a * n + b) * n..(a * n + b + 1) * n], x)).sum())
                .collect();
            let m3rrr = linalg::dot(&m3rr, x);
            let t3r = linalg::dot(&node.tr3, x);
            sc -= (12.0 * t3r * f[2] + 8.0 * m3rrr * f[3]) / 6.0;
            for j in 0..n {
                vec_extra[j] -= 0.5 * (2.0 * node.tr3[j] * f[1] + 4.0 * m3rr[j] * f[2]);
            }
        }

        if order >= 4 {
            let mut m4rrr = vec![0.0; n];
            for a in 0..n {
                let mut acc = 0.0;
                for b in 0..n {
                    for c in 0..n {
                        let row = &node.m4[((a * n + b) * n + c) * n..((a * n + b) * n + c + 1) * n];
                        acc += x[b] * x[c] * linalg::dot(row, x);
                    }
                }
                m4rrr[a] = acc;
            }
            let m4rrrr = linalg::dot(&m4rrr, x);
            let t4r: Vec<f64> = (0..n).map(|a| linalg::dot(&node.tr4[a * n..(a + 1) * n], x)).collect();
            let rt4r = linalg::dot(&t4r, x);
            sc += (12.0 * node.tr4_full * f[2] + 48.0 * rt4r * f[3] + 16.0 * m4rrrr * f[4]) / 24.0;
            for j in 0..n {
                vec_extra[j] += (12.0 * t4r[j] * f[2] + 8.0 * m4rrr[j] * f[3]) / 6.0;
            }
        }

        for (j, o) in out.vector.iter_mut().enumerate() {
            *o += sc * r[j] + if j < n { vec_extra[j] } else { 0.0 };
        }
        out.scalar += sc;
        out.approximated += 1;
    }
}

/// Approximate `sum_i q_i (q - x_i)/|q - x_i|^(N+1)` and `sum_i q_i/|q - x_i|^(N+1)`.
pub fn tree_field(q: &AugmentedPoint, tree: &TreeCode) -> Result<TreeSums> {
    if q.data_dim() != tree.n {
        return Err(Error::DimensionMismatch {
            expected: tree.n,
            got: q.data_dim(),
        });
    }
    let n = tree.n;
    let mut out = TreeSums {
        vector: vec![0.0; n + 1],
        scalar: 0.0,
        approximated: 0,
        direct: 0,
    };
    let mut r = vec![0.0; n + 1];
    let mut stack = vec![0usize];
    while let Some(id) = stack.pop() {
        let node = &tree.nodes[id];
        let Some((left, right)) = node.children else {
            tree.direct(node, q, &mut out)?;
            continue;
        };
        for j in 0..n {
            r[j] = q.x[j] - node.centroid[j];
        }
        r[n] = q.z;
        let rho2 = linalg::norm_sq(&r);
        if tree.theta > 0.0 && node.diag * node.diag < tree.theta * tree.theta * rho2 {
            tree.expand(node, &r, rho2, &mut out);
        } else {
            stack.push(right);
            stack.push(left);
        }
    }
    Ok(out)
}

/// Tree approximation of the normalized empirical field `E_hat`.
pub fn tree_empirical_field(q: &AugmentedPoint, tree: &TreeCode) -> Result<Vec<f64>> {
    Ok(tree_field(q, tree)?.normalized())
}

/// Evaluate many queries against one tree.
pub fn tree_field_batch(queries: &[AugmentedPoint], tree: &TreeCode) -> Result<Vec<TreeSums>> {
    queries.iter().map(|q| tree_field(q, tree)).collect()
}
