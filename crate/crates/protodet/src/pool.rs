//! The hierarchical concept pool: a matrix of unit-norm semantic prototypes
//! with coarse/fine levels and parent links.
//!
//! Offline construction filters aligned region/text pairs by cosine
//! confidence, K-Means groups the survivors into coarse prototypes, and
//! DBSCAN splits each coarse cluster into fine prototypes. Online, prototypes
//! drift toward the assignment-weighted, LayerNorm-stabilized mean of
//! incoming embeddings under a momentum blend.

use std::path::Path;

use crate::cluster::{dbscan, kmeans, NOISE};
use crate::error::{Error, Result};
use crate::io::{atomic_write, Reader, Writer};
use crate::tensor::{cosine_sim, layer_norm, normalize, softmax_t, Tensor};

/// ε used inside the momentum update's LayerNorm.
pub const LN_EPSILON: f64 = 1e-5;

/// Prototypes whose total assignment mass in a batch falls below this floor
/// are left untouched: LayerNorm of a near-zero weighted sum only amplifies
/// noise.
pub const MASS_FLOOR: f64 = 1e-3;

/// A unit-norm vector in the shared d-dimensional semantic space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Accepts a vector already unit-norm within 1e-6.
    pub fn new(v: Vec<f64>) -> Result<Self> {
        let n = crate::tensor::norm(&v);
        if (n - 1.0).abs() > 1e-6 {
            return Err(Error::Parameter(format!(
                "embedding must be unit-norm, got norm {n}"
            )));
        }
        Ok(Self(v))
    }

    /// Normalizes an arbitrary non-zero vector.
    pub fn from_unnormalized(v: &[f64]) -> Result<Self> {
        Ok(Self(normalize(v)?))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for Embedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// A region/text embedding pair with its cached cosine similarity.
#[derive(Debug, Clone)]
pub struct AlignedPair {
    pub region: Embedding,
    pub text: Embedding,
    pub similarity: f64,
    /// Category the teacher drew this pair from; metadata only.
    pub source_category: Option<u32>,
}

impl AlignedPair {
    pub fn new(region: Embedding, text: Embedding, source_category: Option<u32>) -> Result<Self> {
        let similarity = cosine_sim(region.as_slice(), text.as_slice())?;
        Ok(Self { region, text, similarity, source_category })
    }
}

/// Keeps the text embeddings of pairs whose similarity strictly exceeds
/// `delta`, preserving input order.
pub fn filter_aligned_pairs(pairs: &[AlignedPair], delta: f64) -> Result<Vec<Embedding>> {
    Ok(filter_aligned_pair_indices(pairs, delta)?
        .into_iter()
        .map(|i| pairs[i].text.clone())
        .collect())
}

/// Index variant of [`filter_aligned_pairs`] for callers that also need the
/// region side of the surviving pairs.
pub fn filter_aligned_pair_indices(pairs: &[AlignedPair], delta: f64) -> Result<Vec<usize>> {
    if !(-1.0..1.0).contains(&delta) {
        return Err(Error::Parameter(format!(
            "filter threshold must lie in (-1, 1), got {delta}"
        )));
    }
    Ok(pairs
        .iter()
        .enumerate()
        .filter(|(_, p)| p.similarity > delta)
        .map(|(i, _)| i)
        .collect())
}

/// Coarse prototypes are K-Means centroids; fine prototypes are DBSCAN
/// sub-centroids inside one coarse cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Coarse,
    Fine,
}

/// The prototype matrix plus hierarchy tags.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptPool {
    prototypes: Vec<Vec<f64>>,
    levels: Vec<Level>,
    parents: Vec<usize>,
    m1: usize,
    m2: usize,
    tau: f64,
    gamma: f64,
}

/// Which input embeddings belong to each prototype index after construction.
/// Coarse entries list their whole K-Means cluster; fine entries list their
/// DBSCAN sub-cluster.
#[derive(Debug, Clone)]
pub struct PoolMembership {
    pub members: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
struct FineCandidate {
    parent: usize,
    sub: usize,
    centroid: Vec<f64>,
    members: Vec<usize>,
}

impl ConceptPool {
    /// Offline construction (filtered embeddings in, hierarchy out).
    ///
    /// `m2_cap` bounds the fine count: DBSCAN's cluster count is
    /// data-dependent, so surplus sub-clusters are dropped smallest-first.
    /// A coarse cluster only contributes fine prototypes when DBSCAN finds at
    /// least two sub-clusters in it; a single sub-cluster carries no
    /// structure beyond the coarse centroid itself.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        embeddings: &[Embedding],
        m1: usize,
        m2_cap: usize,
        eps: f64,
        min_pts: usize,
        tau: f64,
        gamma: f64,
        seed: u64,
    ) -> Result<(Self, PoolMembership)> {
        if embeddings.is_empty() {
            return Err(Error::Parameter("cannot build a pool from an empty embedding set".into()));
        }
        if embeddings.len() < m1 {
            return Err(Error::Parameter(format!(
                "need at least m1={m1} embeddings, got {}",
                embeddings.len()
            )));
        }
        if tau <= 0.0 {
            return Err(Error::Parameter("tau must be positive".into()));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Parameter("gamma must lie in [0, 1]".into()));
        }

        let points: Vec<Vec<f64>> = embeddings.iter().map(|e| e.as_slice().to_vec()).collect();
        let km = kmeans(&points, m1, seed)?;

        let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(m1);
        for c in &km.centroids {
            prototypes.push(normalize(c)?);
        }

        let mut cluster_members: Vec<Vec<usize>> = vec![Vec::new(); m1];
        for (i, &j) in km.assignments.iter().enumerate() {
            cluster_members[j].push(i);
        }

        // Fine candidates per coarse cluster.
        let mut candidates: Vec<FineCandidate> = Vec::new();
        for (j, members) in cluster_members.iter().enumerate() {
            if members.len() < 2 {
                continue;
            }
            let sub_points: Vec<Vec<f64>> = members.iter().map(|&i| points[i].clone()).collect();
            let labels = dbscan(&sub_points, eps, min_pts)?;
            let n_sub = labels.iter().filter(|&&l| l != NOISE).max().map_or(0, |&l| l as usize + 1);
            if n_sub < 2 {
                continue;
            }
            for s in 0..n_sub {
                let sub_members: Vec<usize> = members
                    .iter()
                    .zip(&labels)
                    .filter(|(_, &l)| l == s as i64)
                    .map(|(&i, _)| i)
                    .collect();
                let mut centroid = vec![0.0; points[0].len()];
                for &i in &sub_members {
                    for (c, v) in centroid.iter_mut().zip(&points[i]) {
                        *c += v;
                    }
                }
                for c in centroid.iter_mut() {
                    *c /= sub_members.len() as f64;
                }
                candidates.push(FineCandidate { parent: j, sub: s, centroid, members: sub_members });
            }
        }

        // Largest sub-clusters win the m2_cap slots; layout stays (parent, sub).
        candidates.sort_by(|a, b| {
            b.members
                .len()
                .cmp(&a.members.len())
                .then(a.parent.cmp(&b.parent))
                .then(a.sub.cmp(&b.sub))
        });
        candidates.truncate(m2_cap);
        candidates.sort_by(|a, b| a.parent.cmp(&b.parent).then(a.sub.cmp(&b.sub)));

        let mut levels = vec![Level::Coarse; m1];
        let mut parents: Vec<usize> = (0..m1).collect();
        let mut members: Vec<Vec<usize>> = cluster_members;
        for cand in &candidates {
            prototypes.push(normalize(&cand.centroid)?);
            levels.push(Level::Fine);
            parents.push(cand.parent);
            members.push(cand.members.clone());
        }
        let m2 = candidates.len();

        let pool = Self { prototypes, levels, parents, m1, m2, tau, gamma };
        pool.validate()?;
        Ok((pool, PoolMembership { members }))
    }

    /// Same hierarchy with replacement prototype vectors (normalized here).
    /// Used to re-anchor the pool on visual centroids after text clustering.
    pub fn with_prototype_vectors(&self, vectors: Vec<Vec<f64>>) -> Result<Self> {
        if vectors.len() != self.len() {
            return Err(Error::Dimension(format!(
                "expected {} prototype vectors, got {}",
                self.len(),
                vectors.len()
            )));
        }
        let mut prototypes = Vec::with_capacity(vectors.len());
        for v in &vectors {
            if v.len() != self.dim() {
                return Err(Error::Dimension("prototype vector has wrong dimension".into()));
            }
            prototypes.push(normalize(v)?);
        }
        let mut out = self.clone();
        out.prototypes = prototypes;
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prototypes.len() != self.m1 + self.m2 {
            return Err(Error::State("prototype count != m1 + m2".into()));
        }
        for (j, p) in self.prototypes.iter().enumerate() {
            let n = crate::tensor::norm(p);
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::State(format!("prototype {j} has norm {n}")));
            }
            match self.levels[j] {
                Level::Coarse => {
                    if j >= self.m1 || self.parents[j] != j {
                        return Err(Error::State(format!("coarse prototype {j} misplaced")));
                    }
                }
                Level::Fine => {
                    if j < self.m1 || self.parents[j] >= self.m1 {
                        return Err(Error::State(format!("fine prototype {j} has bad parent")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.first().map_or(0, |p| p.len())
    }

    pub fn m1(&self) -> usize {
        self.m1
    }

    pub fn m2(&self) -> usize {
        self.m2
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn prototype(&self, j: usize) -> &[f64] {
        &self.prototypes[j]
    }

    pub fn level(&self, j: usize) -> Level {
        self.levels[j]
    }

    pub fn parent(&self, j: usize) -> usize {
        self.parents[j]
    }

    /// Prototype matrix as an `[M, d]` tensor (rows are prototypes).
    pub fn matrix(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.len() * self.dim());
        for p in &self.prototypes {
            data.extend_from_slice(p);
        }
        Tensor::from_parts(vec![self.len(), self.dim()], data)
    }

    /// Soft assignment of one embedding over all prototypes at the pool's τ.
    pub fn soft_assign(&self, e: &[f64]) -> Result<Vec<f64>> {
        if self.is_empty() {
            return Err(Error::State("soft_assign against an empty pool".into()));
        }
        let sims: Vec<f64> = self
            .prototypes
            .iter()
            .map(|p| cosine_sim(e, p))
            .collect::<Result<_>>()?;
        softmax_t(&sims, self.tau)
    }

    /// Row-stochastic assignment matrix for a batch.
    pub fn soft_assign_batch(&self, batch: &[Embedding]) -> Result<Vec<Vec<f64>>> {
        batch.iter().map(|e| self.soft_assign(e.as_slice())).collect()
    }

    /// One online momentum step; returns the updated snapshot.
    ///
    /// For every prototype with enough assignment mass:
    /// `A_j ← normalize(γ·A_j + (1−γ)·LayerNorm(Σ_i D_{i,j}·e_i))`.
    /// γ = 1 is a bit-exact fixed point; an empty batch is a no-op.
    pub fn momentum_update(&self, batch: &[Embedding]) -> Result<ConceptPool> {
        let mut out = self.clone();
        if batch.is_empty() || self.gamma == 1.0 {
            return Ok(out);
        }
        let assignment = self.soft_assign_batch(batch)?;
        for j in 0..self.len() {
            let mass: f64 = assignment.iter().map(|row| row[j]).sum();
            if mass < MASS_FLOOR {
                continue;
            }
            let mut weighted = vec![0.0; self.dim()];
            for (row, e) in assignment.iter().zip(batch) {
                let w = row[j];
                for (acc, v) in weighted.iter_mut().zip(e.as_slice()) {
                    *acc += w * v;
                }
            }
            let stabilized = layer_norm(&weighted, LN_EPSILON)?;
            let blended: Vec<f64> = self.prototypes[j]
                .iter()
                .zip(&stabilized)
                .map(|(a, s)| self.gamma * a + (1.0 - self.gamma) * s)
                .collect();
            match normalize(&blended) {
                Ok(p) => out.prototypes[j] = p,
                Err(_) => {
                    log::warn!("momentum update left prototype {j} unchanged (degenerate blend)");
                }
            }
        }
        Ok(out)
    }

    /// Serializes into the versioned little-endian pool format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(b"DHCP");
        w.u32(1);
        w.u32(self.dim() as u32);
        w.u32(self.m1 as u32);
        w.u32(self.m2 as u32);
        w.f64(self.tau);
        w.f64(self.gamma);
        for p in &self.prototypes {
            for &v in p {
                w.f32(v as f32);
            }
        }
        for l in &self.levels {
            w.u8(match l {
                Level::Coarse => 0,
                Level::Fine => 1,
            });
        }
        for &p in &self.parents {
            w.u32(p as u32);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.bytes(4, "magic")?;
        if magic != b"DHCP" {
            return Err(Error::Format("bad magic (expected \"DHCP\")".into()));
        }
        let version = r.u32("version")?;
        if version != 1 {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let d = r.u32("d")? as usize;
        let m1 = r.u32("m1")? as usize;
        let m2 = r.u32("m2")? as usize;
        let tau = r.f64("tau")?;
        let gamma = r.f64("gamma")?;
        if d == 0 {
            return Err(Error::Format("d must be positive".into()));
        }
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::Format(format!("tau out of range: {tau}")));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Format(format!("gamma out of range: {gamma}")));
        }
        let m = m1 + m2;
        let mut prototypes = Vec::with_capacity(m);
        for j in 0..m {
            let mut row = Vec::with_capacity(d);
            for _ in 0..d {
                row.push(r.f32(&format!("prototype {j}"))? as f64);
            }
            prototypes.push(row);
        }
        let mut levels = Vec::with_capacity(m);
        for j in 0..m {
            levels.push(match r.u8(&format!("level {j}"))? {
                0 => Level::Coarse,
                1 => Level::Fine,
                other => {
                    return Err(Error::Format(format!("level {j} has invalid tag {other}")))
                }
            });
        }
        let mut parents = Vec::with_capacity(m);
        for j in 0..m {
            parents.push(r.u32(&format!("parent {j}"))? as usize);
        }
        r.expect_eof("pool file")?;
        let pool = Self { prototypes, levels, parents, m1, m2, tau, gamma };
        pool.validate().map_err(|e| Error::Format(format!("inconsistent pool: {e}")))?;
        Ok(pool)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, stream};
    use approx::assert_abs_diff_eq;
    use rand::RngExt;
    use rand_distr::StandardNormal;

    fn unit(v: Vec<f64>) -> Embedding {
        Embedding::from_unnormalized(&v).unwrap()
    }

    fn pair(v: Vec<f64>, u: Vec<f64>) -> AlignedPair {
        AlignedPair::new(unit(v), unit(u), None).unwrap()
    }

    #[test]
    fn filter_keeps_identical_pair() {
        let p = pair(vec![1.0, 0.0], vec![1.0, 0.0]);
        let kept = filter_aligned_pairs(&[p], 0.9).unwrap();
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn filter_drops_orthogonal_pair() {
        let p = pair(vec![1.0, 0.0], vec![0.0, 1.0]);
        let kept = filter_aligned_pairs(&[p], 0.5).unwrap();
        assert!(kept.is_empty());
    }

    #[test]
    fn filter_boundary_is_strict() {
        // cos([1,0],[1,1]) = 1/√2; threshold exactly there must drop.
        let p = pair(vec![1.0, 0.0], vec![1.0, 1.0]);
        let delta = p.similarity;
        let kept = filter_aligned_pairs(&[p], delta).unwrap();
        assert!(kept.is_empty());
    }

    #[test]
    fn filter_rejects_bad_delta() {
        assert!(matches!(
            filter_aligned_pairs(&[], 1.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn filter_preserves_order() {
        let pairs = vec![
            pair(vec![1.0, 0.0, 0.0], vec![1.0, 0.1, 0.0]),
            pair(vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]), // dropped
            pair(vec![0.0, 0.0, 1.0], vec![0.0, 0.1, 1.0]),
        ];
        let kept = filter_aligned_pairs(&pairs, 0.8).unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0], pairs[0].text);
        assert_eq!(kept[1], pairs[2].text);
    }

    /// Synthetic anchors with two internal modes per coarse cluster.
    fn bimodal_embeddings(m1: usize, per_mode: usize, seed: u64) -> Vec<Embedding> {
        let d = 16;
        let mut rng = stream_rng(seed, stream::POOL);
        let mut out = Vec::new();
        for c in 0..m1 {
            // Anchor per cluster on its own axis pair, two modes tilted apart.
            for mode in 0..2 {
                let mut base = vec![0.0; d];
                base[2 * c] = 1.0;
                base[2 * c + 1] = if mode == 0 { 0.25 } else { -0.25 };
                for _ in 0..per_mode {
                    let noisy: Vec<f64> = base
                        .iter()
                        .map(|v| v + 0.01 * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    out.push(unit(noisy));
                }
            }
        }
        out
    }

    #[test]
    fn build_pool_finds_modes_and_parents() {
        let m1 = 4;
        let embeddings = bimodal_embeddings(m1, 12, 5);
        let (pool, membership) =
            ConceptPool::build(&embeddings, m1, 64, 0.2, 3, 0.07, 0.99, 7).unwrap();
        assert_eq!(pool.m1(), m1);
        assert_eq!(pool.m2(), 2 * m1, "each coarse cluster should split into its 2 modes");
        pool.validate().unwrap();
        // Every fine prototype's nearest coarse prototype is its parent.
        for j in m1..pool.len() {
            let mut best = 0;
            let mut best_cos = -2.0;
            for c in 0..m1 {
                let cos = cosine_sim(pool.prototype(j), pool.prototype(c)).unwrap();
                if cos > best_cos {
                    best_cos = cos;
                    best = c;
                }
            }
            assert_eq!(best, pool.parent(j), "fine prototype {j} parent mismatch");
        }
        assert_eq!(membership.members.len(), pool.len());
        assert!(membership.members.iter().all(|m| !m.is_empty()));
    }

    #[test]
    fn build_pool_cap_zero_is_coarse_only() {
        let embeddings = bimodal_embeddings(4, 10, 2);
        let (pool, _) = ConceptPool::build(&embeddings, 4, 0, 0.2, 3, 0.07, 0.99, 7).unwrap();
        assert_eq!(pool.m2(), 0);
        assert_eq!(pool.len(), 4);
    }

    #[test]
    fn build_pool_identical_embeddings() {
        let e = unit(vec![1.0, 1.0, 0.0, 0.0]);
        let embeddings = vec![e; 12];
        let (pool, _) = ConceptPool::build(&embeddings, 3, 8, 0.3, 3, 0.07, 0.99, 7).unwrap();
        assert_eq!(pool.m1(), 3);
        assert_eq!(pool.m2(), 0, "identical inputs carry no fine structure");
        for j in 0..pool.len() {
            assert_abs_diff_eq!(
                cosine_sim(pool.prototype(j), embeddings[0].as_slice()).unwrap(),
                1.0,
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn build_pool_needs_enough_embeddings() {
        let e = unit(vec![1.0, 0.0]);
        assert!(matches!(
            ConceptPool::build(&[e], 2, 0, 0.3, 3, 0.07, 0.99, 7),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn soft_assign_peaks_at_matching_prototype() {
        // e equals prototype j, all others orthogonal.
        let d = 8;
        let mut protos = Vec::new();
        for j in 0..4 {
            let mut v = vec![0.0; d];
            v[j] = 1.0;
            protos.push(unit(v));
        }
        let (pool, _) = {
            // Build a pool by hand through identical-mode construction:
            // 4 orthogonal one-hot clusters, m2_cap = 0.
            let mut embeddings = Vec::new();
            for p in &protos {
                for _ in 0..3 {
                    embeddings.push(p.clone());
                }
            }
            ConceptPool::build(&embeddings, 4, 0, 0.3, 2, 0.07, 0.99, 1).unwrap()
        };
        let j_star = 2;
        let w = pool.soft_assign(protos[j_star].as_slice()).unwrap();
        let m = pool.len() as f64;
        let bound = 1.0 - (m - 1.0) * (-1.0f64 / 0.07).exp();
        let peak = w
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        assert!(*peak.1 >= bound, "peak mass {} below closed-form bound {bound}", peak.1);
        assert_abs_diff_eq!(
            cosine_sim(pool.prototype(peak.0), protos[j_star].as_slice()).unwrap(),
            1.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn soft_assign_uniform_over_identical_prototypes() {
        let e = unit(vec![1.0, 2.0, 3.0]);
        let embeddings = vec![e.clone(); 8];
        let (pool, _) = ConceptPool::build(&embeddings, 4, 0, 0.3, 2, 0.07, 0.99, 1).unwrap();
        let w = pool.soft_assign(&[0.5, -0.2, 0.8]).unwrap();
        for v in &w {
            assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-9);
        }
    }

    #[test]
    fn soft_assign_rows_sum_to_one() {
        let embeddings = bimodal_embeddings(3, 8, 9);
        let (pool, _) = ConceptPool::build(&embeddings, 3, 12, 0.2, 3, 0.07, 0.99, 7).unwrap();
        let mut rng = stream_rng(1, stream::POOL);
        for _ in 0..50 {
            let v: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w = pool.soft_assign(&v).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn soft_assign_argmax_scale_invariant() {
        let embeddings = bimodal_embeddings(3, 8, 4);
        let (pool, _) = ConceptPool::build(&embeddings, 3, 12, 0.2, 3, 0.07, 0.99, 7).unwrap();
        let e: Vec<f64> = (0..16).map(|i| ((i * 7 + 3) % 5) as f64 - 2.0).collect();
        let argmax = |w: &[f64]| {
            w.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        let base = argmax(&pool.soft_assign(&e).unwrap());
        for scale in [0.01, 0.5, 3.0, 250.0] {
            let scaled: Vec<f64> = e.iter().map(|v| v * scale).collect();
            assert_eq!(argmax(&pool.soft_assign(&scaled).unwrap()), base);
        }
    }

    fn single_proto_pool(proto: Vec<f64>, gamma: f64) -> ConceptPool {
        let e = unit(proto);
        let embeddings = vec![e; 2];
        let (pool, _) = ConceptPool::build(&embeddings, 1, 0, 0.3, 2, 0.07, gamma, 1).unwrap();
        pool
    }

    #[test]
    fn momentum_gamma_one_is_bit_exact_fixed_point() {
        let pool = single_proto_pool(vec![1.0, 0.0], 1.0);
        let batch = vec![unit(vec![0.0, 1.0]), unit(vec![1.0, 1.0])];
        let updated = pool.momentum_update(&batch).unwrap();
        assert_eq!(pool, updated);
    }

    #[test]
    fn momentum_blend_matches_hand_example() {
        // A = [1, 0], batch = {[0, 1]} ⇒ weighted sum [0, 1],
        // LayerNorm ≈ [−1, 1], blend at γ=0.99 ≈ [0.98, 0.01] pre-normalization.
        let pool = single_proto_pool(vec![1.0, 0.0], 0.99);
        let updated = pool.momentum_update(&[unit(vec![0.0, 1.0])]).unwrap();
        let expected_pre = [0.98, 0.01];
        let expected = normalize(&expected_pre).unwrap();
        assert_abs_diff_eq!(updated.prototype(0)[0], expected[0], epsilon = 1e-4);
        assert_abs_diff_eq!(updated.prototype(0)[1], expected[1], epsilon = 1e-4);
    }

    #[test]
    fn momentum_gamma_zero_is_replacement() {
        let pool = single_proto_pool(vec![1.0, 0.0, 0.0, 0.0], 0.0);
        let batch = vec![unit(vec![0.2, 0.9, 0.1, -0.3])];
        let updated = pool.momentum_update(&batch).unwrap();
        // γ=0 ⇒ prototype equals unit-normalized LayerNorm of the weighted sum.
        let w = pool.soft_assign(batch[0].as_slice()).unwrap()[0];
        let weighted: Vec<f64> = batch[0].as_slice().iter().map(|v| v * w).collect();
        let expect = normalize(&layer_norm(&weighted, LN_EPSILON).unwrap()).unwrap();
        for (a, b) in updated.prototype(0).iter().zip(&expect) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn momentum_empty_batch_is_noop() {
        let pool = single_proto_pool(vec![1.0, 0.0], 0.5);
        let updated = pool.momentum_update(&[]).unwrap();
        assert_eq!(pool, updated);
    }

    #[test]
    fn momentum_hierarchy_is_preserved() {
        let embeddings = bimodal_embeddings(3, 10, 6);
        let (pool, _) = ConceptPool::build(&embeddings, 3, 12, 0.2, 3, 0.07, 0.9, 7).unwrap();
        let mut rng = stream_rng(2, stream::POOL);
        let mut current = pool.clone();
        for _ in 0..20 {
            let batch: Vec<Embedding> = (0..5)
                .map(|_| {
                    let v: Vec<f64> =
                        (0..16).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                    unit(v)
                })
                .collect();
            current = current.momentum_update(&batch).unwrap();
        }
        assert_eq!(current.m1(), pool.m1());
        assert_eq!(current.m2(), pool.m2());
        for j in 0..pool.len() {
            assert_eq!(current.level(j), pool.level(j));
            assert_eq!(current.parent(j), pool.parent(j));
        }
        current.validate().unwrap();
    }

    #[test]
    fn momentum_tracks_a_drifting_direction() {
        // Batches drawn around a fixed direction pull the prototype toward it.
        let d = 16;
        let mut target = vec![0.0; d];
        target[3] = 1.0;
        let pool = {
            let mut start = vec![0.02; d];
            start[0] = 1.0;
            single_proto_pool_with_dim(start, 0.9)
        };
        let mut cos_trace = Vec::new();
        let mut current = pool;
        for seed in 0..100u64 {
            let mut rng = stream_rng(seed, stream::POOL);
            let batch: Vec<Embedding> = (0..8)
                .map(|_| {
                    let v: Vec<f64> = target
                        .iter()
                        .map(|t| t + 0.05 * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    unit(v)
                })
                .collect();
            current = current.momentum_update(&batch).unwrap();
            cos_trace.push(cosine_sim(current.prototype(0), &target).unwrap());
        }
        let early: f64 = cos_trace[..10].iter().sum::<f64>() / 10.0;
        let late: f64 = cos_trace[90..].iter().sum::<f64>() / 10.0;
        assert!(
            late > early && late > 0.9,
            "prototype failed to track direction: early {early:.3}, late {late:.3}"
        );
    }

    fn single_proto_pool_with_dim(proto: Vec<f64>, gamma: f64) -> ConceptPool {
        let e = unit(proto);
        let embeddings = vec![e; 2];
        let (pool, _) = ConceptPool::build(&embeddings, 1, 0, 0.3, 2, 0.07, gamma, 1).unwrap();
        pool
    }

    #[test]
    fn save_load_round_trip() {
        let embeddings = bimodal_embeddings(3, 10, 8);
        let (pool, _) = ConceptPool::build(&embeddings, 3, 12, 0.2, 3, 0.07, 0.99, 7).unwrap();
        let bytes = pool.to_bytes();
        let loaded = ConceptPool::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.m1(), pool.m1());
        assert_eq!(loaded.m2(), pool.m2());
        assert_eq!(loaded.tau(), pool.tau());
        assert_eq!(loaded.gamma(), pool.gamma());
        for j in 0..pool.len() {
            assert_eq!(loaded.level(j), pool.level(j));
            assert_eq!(loaded.parent(j), pool.parent(j));
            // Values agree at serialized (f32) precision, bit-exactly.
            for (a, b) in loaded.prototype(j).iter().zip(pool.prototype(j)) {
                assert_eq!(*a, *b as f32 as f64);
            }
        }
        // Round-trip of a loaded pool is bit-exact.
        assert_eq!(loaded.to_bytes(), ConceptPool::from_bytes(&loaded.to_bytes()).unwrap().to_bytes());
    }

    #[test]
    fn load_rejects_truncation() {
        let embeddings = bimodal_embeddings(2, 8, 8);
        let (pool, _) = ConceptPool::build(&embeddings, 2, 4, 0.2, 3, 0.07, 0.99, 7).unwrap();
        let bytes = pool.to_bytes();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            match ConceptPool::from_bytes(&bytes[..cut]) {
                Err(Error::Format(msg)) => {
                    assert!(!msg.is_empty());
                }
                other => panic!("expected format error for cut {cut}, got {other:?}"),
            }
        }
    }

    #[test]
    fn load_rejects_bad_magic_and_version() {
        let embeddings = bimodal_embeddings(2, 8, 8);
        let (pool, _) = ConceptPool::build(&embeddings, 2, 4, 0.2, 3, 0.07, 0.99, 7).unwrap();
        let mut bytes = pool.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(ConceptPool::from_bytes(&bytes), Err(Error::Format(_))));
        let mut bytes = pool.to_bytes();
        bytes[4] = 9; // version
        match ConceptPool::from_bytes(&bytes) {
            Err(Error::Format(msg)) => assert!(msg.contains("version")),
            other => panic!("expected version error, got {other:?}"),
        }
    }
}
