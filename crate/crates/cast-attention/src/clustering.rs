//! Clustering mechanisms over the affinity matrix A_g, plus the cluster
//! gather operator G, its scatter-sum reverse, and the membership mask.
//!
//! Both mechanisms are deterministic: ordering is by descending score with
//! ties broken toward the lowest token index.

use std::rc::Rc;

use crate::error::{CastError, Result};
use crate::tensor::{self, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Mechanism {
    TopK,
    SATopK,
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mechanism::TopK => write!(f, "topk"),
            Mechanism::SATopK => write!(f, "satopk"),
        }
    }
}

/// Output of a clustering mechanism: per-cluster token index lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub n_tokens: usize,
    pub n_clusters: usize,
    pub cluster_size: usize,
    /// Row j holds cluster j's kappa token indices in assignment order.
    pub indices: Vec<Vec<usize>>,
    pub mechanism: Mechanism,
}

impl ClusterAssignment {
    /// Flat `[cluster 0 members..., cluster 1 members...]` view, the index
    /// list used by gather/scatter.
    pub fn flat_indices(&self) -> Rc<Vec<usize>> {
        Rc::new(self.indices.iter().flatten().copied().collect())
    }

    /// Compact fingerprint for stability checks during gradient probing.
    pub fn fingerprint(&self) -> Vec<usize> {
        self.indices.iter().flatten().copied().collect()
    }
}

/// Binary N x N_c membership indicator.
#[derive(Debug, Clone, PartialEq)]
pub struct MembershipMask {
    pub n_tokens: usize,
    pub n_clusters: usize,
    pub data: Vec<f64>,
}

impl MembershipMask {
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            vec![self.n_tokens, self.n_clusters],
            self.data.iter().map(|&v| T::from_f64(v)).collect(),
        )
    }

    /// Complement 1 - M.
    pub fn complement_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            vec![self.n_tokens, self.n_clusters],
            self.data.iter().map(|&v| T::from_f64(1.0 - v)).collect(),
        )
    }
}

fn check_affinity<T: Scalar>(affinity: &Tensor<T>) -> Result<(usize, usize)> {
    if affinity.rank() != 2 {
        return Err(CastError::Shape(format!("affinity must be [N, N_c], got {:?}", affinity.shape())));
    }
    affinity.check_finite("cluster affinity")?;
    Ok((affinity.shape()[0], affinity.shape()[1]))
}

/// Per cluster, the kappa tokens with the largest affinity in that cluster's
/// column, in descending score order. A token may land in 0..N_c clusters.
pub fn topk_cluster<T: Scalar>(affinity: &Tensor<T>, kappa: usize) -> Result<ClusterAssignment> {
    let (n, n_c) = check_affinity(affinity)?;
    if kappa > n {
        return Err(CastError::Config(format!("kappa {} exceeds N {}", kappa, n)));
    }
    let top = tensor::topk_indices(affinity, kappa, 0)?;
    let mut indices = vec![Vec::with_capacity(kappa); n_c];
    for s in 0..kappa {
        for (j, cluster) in indices.iter_mut().enumerate() {
            cluster.push(top.data[s * n_c + j]);
        }
    }
    Ok(ClusterAssignment {
        n_tokens: n,
        n_clusters: n_c,
        cluster_size: kappa,
        indices,
        mechanism: Mechanism::TopK,
    })
}

/// Greedy single-assignment clustering: tokens are visited in descending
/// order of their maximum affinity; on pass p an unassigned token goes to its
/// p-th preference cluster if that cluster still has room. Guaranteed to
/// place every token when N_c * kappa >= N.
pub fn sa_topk_cluster<T: Scalar>(affinity: &Tensor<T>, kappa: usize) -> Result<ClusterAssignment> {
    let (n, n_c) = check_affinity(affinity)?;
    if n_c * kappa < n {
        return Err(CastError::Config(format!(
            "capacity N_c*kappa = {} below N = {}",
            n_c * kappa,
            n
        )));
    }
    // Per-token cluster preference order (descending), and the global token
    // order by maximum score.
    let pref = tensor::argsort_desc(affinity, 1)?;
    let data = affinity.data();
    let mut order: Vec<usize> = (0..n).collect();
    let max_score = |t: usize| -> T {
        let row = &data[t * n_c..(t + 1) * n_c];
        let mut m = row[0];
        for &v in &row[1..] {
            if v > m {
                m = v;
            }
        }
        m
    };
    order.sort_by(|&a, &b| tensor::desc_order(max_score(a), a, max_score(b), b));

    let mut indices = vec![Vec::with_capacity(kappa); n_c];
    let mut assigned = vec![false; n];
    let mut remaining = n;
    for pass in 0..n_c {
        if remaining == 0 {
            break;
        }
        for &t in &order {
            if assigned[t] {
                continue;
            }
            let c = pref.data[t * n_c + pass];
            if indices[c].len() < kappa {
                indices[c].push(t);
                assigned[t] = true;
                remaining -= 1;
            }
        }
    }
    debug_assert_eq!(remaining, 0);
    Ok(ClusterAssignment {
        n_tokens: n,
        n_clusters: n_c,
        cluster_size: kappa,
        indices,
        mechanism: Mechanism::SATopK,
    })
}

/// G: copies token rows into `[N_c, kappa, ...]` cluster blocks. Requires a
/// full assignment (every cluster holds exactly kappa members).
pub fn gather_g<T: Scalar>(assign: &ClusterAssignment, x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape()[0] != assign.n_tokens {
        return Err(CastError::Shape(format!(
            "assignment over {} tokens, input has {:?}",
            assign.n_tokens,
            x.shape()
        )));
    }
    require_full(assign)?;
    let flat = assign.flat_indices();
    let gathered = tensor::gather_rows(x, &flat)?;
    let mut shape = vec![assign.n_clusters, assign.cluster_size];
    shape.extend_from_slice(&x.shape()[1..]);
    gathered.reshaped(&shape)
}

/// G^-1: scatter-sum of cluster blocks back to token rows. Duplicates sum,
/// unclustered tokens get zero rows.
pub fn scatter_ginv<T: Scalar>(assign: &ClusterAssignment, y: &Tensor<T>) -> Result<Tensor<T>> {
    if y.rank() < 2 || y.shape()[0] != assign.n_clusters || y.shape()[1] != assign.cluster_size {
        return Err(CastError::Shape(format!(
            "expected leading [{}, {}], got {:?}",
            assign.n_clusters,
            assign.cluster_size,
            y.shape()
        )));
    }
    require_full(assign)?;
    let flat = assign.flat_indices();
    let mut shape = vec![assign.n_clusters * assign.cluster_size];
    shape.extend_from_slice(&y.shape()[2..]);
    let rows = y.reshaped(&shape)?;
    tensor::scatter_add_rows(&rows, &flat, assign.n_tokens)
}

fn require_full(assign: &ClusterAssignment) -> Result<()> {
    if assign.indices.iter().any(|c| c.len() != assign.cluster_size) {
        return Err(CastError::Shape(
            "assignment has underfull clusters; pad N to a multiple of N_c first".into(),
        ));
    }
    Ok(())
}

/// Exact indicator matrix: M[i, j] = 1 iff token i is in cluster j.
pub fn membership_mask(assign: &ClusterAssignment) -> MembershipMask {
    let mut data = vec![0.0; assign.n_tokens * assign.n_clusters];
    for (j, cluster) in assign.indices.iter().enumerate() {
        for &t in cluster {
            data[t * assign.n_clusters + j] = 1.0;
        }
    }
    MembershipMask { n_tokens: assign.n_tokens, n_clusters: assign.n_clusters, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn aff(n: usize, n_c: usize, vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(vec![n, n_c], vals.to_vec())
    }

    #[test]
    fn topk_hand_case() {
        let a = aff(4, 2, &[0.9, 0.1, 0.8, 0.2, 0.2, 0.7, 0.1, 0.6]);
        let c = topk_cluster(&a, 2).unwrap();
        assert_eq!(c.indices[0], vec![0, 1]);
        assert_eq!(c.indices[1], vec![2, 3]);
    }

    #[test]
    fn topk_all_equal_leaves_tail_unclustered() {
        let a = aff(4, 2, &[0.5; 8]);
        let c = topk_cluster(&a, 2).unwrap();
        assert_eq!(c.indices[0], vec![0, 1]);
        assert_eq!(c.indices[1], vec![0, 1]);
        let m = membership_mask(&c);
        assert_eq!(&m.data[2 * 2..], &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn topk_single_cluster_is_score_order() {
        let a = aff(4, 1, &[0.3, 0.9, 0.1, 0.5]);
        let c = topk_cluster(&a, 4).unwrap();
        assert_eq!(c.indices[0], vec![1, 3, 0, 2]);
        assert!(topk_cluster(&a, 5).is_err());
    }

    #[test]
    fn topk_selected_dominate_unselected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::from_vec(vec![32, 4], (0..128).map(|_| rng.gen::<f64>()).collect());
        let c = topk_cluster(&a, 8).unwrap();
        for j in 0..4 {
            let selected: Vec<usize> = c.indices[j].clone();
            let min_sel = selected.iter().map(|&t| a.data()[t * 4 + j]).fold(f64::MAX, f64::min);
            for t in 0..32 {
                if !selected.contains(&t) {
                    assert!(a.data()[t * 4 + j] <= min_sel);
                }
            }
        }
    }

    #[test]
    fn sa_topk_hand_case_with_deferral() {
        // token 2 prefers cluster 0 but it fills with tokens 0 and 1 first.
        let a = aff(4, 2, &[0.9, 0.8, 0.85, 0.1, 0.7, 0.6, 0.2, 0.3]);
        let c = sa_topk_cluster(&a, 2).unwrap();
        assert_eq!(c.indices[0], vec![0, 1]);
        assert_eq!(c.indices[1], vec![3, 2]);
    }

    #[test]
    fn sa_topk_is_partition_when_capacity_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let a = Tensor::from_vec(vec![24, 4], (0..96).map(|_| rng.gen::<f64>()).collect());
            let c = sa_topk_cluster(&a, 6).unwrap();
            let mut all: Vec<usize> = c.indices.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..24).collect::<Vec<_>>());
            assert!(c.indices.iter().all(|cl| cl.len() == 6));
        }
    }

    #[test]
    fn sa_topk_capacity_shortfall_errors() {
        let a = aff(4, 2, &[0.0; 8]);
        assert!(matches!(sa_topk_cluster(&a, 1), Err(CastError::Config(_))));
    }

    #[test]
    fn sa_topk_global_max_gets_first_choice() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let a = Tensor::from_vec(vec![16, 4], (0..64).map(|_| rng.gen::<f64>()).collect());
            let c = sa_topk_cluster(&a, 4).unwrap();
            let (mut best_t, mut best_c, mut best_v) = (0, 0, f64::MIN);
            for t in 0..16 {
                for j in 0..4 {
                    if a.data()[t * 4 + j] > best_v {
                        best_v = a.data()[t * 4 + j];
                        best_t = t;
                        best_c = j;
                    }
                }
            }
            assert!(c.indices[best_c].contains(&best_t));
        }
    }

    #[test]
    fn both_mechanisms_are_permutation_equivariant() {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 20;
        let n_c = 4;
        let a = Tensor::from_vec(vec![n, n_c], (0..n * n_c).map(|_| rng.gen::<f64>()).collect());
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permuted = tensor::gather_rows(&a, &perm).unwrap();
        // perm maps new row r to old row perm[r]; old index t appears at inv[t].
        let mut inv = vec![0usize; n];
        for (r, &t) in perm.iter().enumerate() {
            inv[t] = r;
        }
        for mech in [Mechanism::TopK, Mechanism::SATopK] {
            let (base, shuf) = match mech {
                Mechanism::TopK => (topk_cluster(&a, 5).unwrap(), topk_cluster(&permuted, 5).unwrap()),
                Mechanism::SATopK => {
                    (sa_topk_cluster(&a, 5).unwrap(), sa_topk_cluster(&permuted, 5).unwrap())
                }
            };
            for j in 0..n_c {
                let mapped: Vec<usize> = base.indices[j].iter().map(|&t| inv[t]).collect();
                assert_eq!(mapped, shuf.indices[j], "{:?} cluster {}", mech, j);
            }
        }
    }

    #[test]
    fn topk_never_selects_zeroed_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        // 12 real tokens with strictly positive scores, 4 padding rows at 0.
        let mut vals = vec![0.0; 16 * 2];
        for t in 0..12 {
            for j in 0..2 {
                vals[t * 2 + j] = rng.gen::<f64>() * 0.9 + 0.1;
            }
        }
        let a = aff(16, 2, &vals);
        let c = topk_cluster(&a, 6).unwrap();
        for cluster in &c.indices {
            assert!(cluster.iter().all(|&t| t < 12));
        }
    }

    #[test]
    fn gather_scatter_and_mask() {
        let a = aff(4, 2, &[0.9, 0.1, 0.8, 0.2, 0.2, 0.7, 0.1, 0.6]);
        let assign = topk_cluster(&a, 2).unwrap();
        let x = Tensor::from_vec(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let g = gather_g(&assign, &x).unwrap();
        assert_eq!(g.shape(), &[2, 2, 1]);
        assert_eq!(g.data(), &[1.0, 2.0, 3.0, 4.0]);
        let back = scatter_ginv(&assign, &g).unwrap();
        assert_eq!(back, x);
        let m = membership_mask(&assign);
        assert_eq!(m.data, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn scatter_sums_duplicates_and_zero_fills() {
        // token 0 in both clusters, tokens 2 and 3 unclustered
        let assign = ClusterAssignment {
            n_tokens: 4,
            n_clusters: 2,
            cluster_size: 1,
            indices: vec![vec![0], vec![0]],
            mechanism: Mechanism::TopK,
        };
        let y = Tensor::from_vec(vec![2, 1, 1], vec![5.0, 7.0]);
        let r = scatter_ginv(&assign, &y).unwrap();
        assert_eq!(r.data(), &[12.0, 0.0, 0.0, 0.0]);
        let m = membership_mask(&assign);
        assert_eq!(&m.data[0..2], &[1.0, 1.0]);
    }

    #[test]
    fn mask_column_sums_equal_kappa() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Tensor::from_vec(vec![32, 4], (0..128).map(|_| rng.gen::<f64>()).collect());
        for assign in [topk_cluster(&a, 8).unwrap(), sa_topk_cluster(&a, 8).unwrap()] {
            let m = membership_mask(&assign);
            for j in 0..4 {
                let s: f64 = (0..32).map(|t| m.data[t * 4 + j]).sum();
                assert_eq!(s, 8.0);
            }
        }
    }
}
