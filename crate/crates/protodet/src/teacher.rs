//! Deterministic teacher: seeded category anchors stand in for the frozen
//! vision-language encoders.
//!
//! Region and description embeddings are noisy draws around a category's
//! anchor; the noise scale σ is the expected noise *norm* (per-component
//! standard deviation σ/√d), so σ is comparable across dimensions. Region
//! and description draws come from disjoint seed streams, which keeps
//! same-category cosine high but below 1. The textual prototype matrix `P`
//! is index-paired with the concept pool it was built against.

use rand::RngExt;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::io::{Reader, Writer};
use crate::pool::{ConceptPool, Embedding, PoolMembership};
use crate::tensor::{cosine_sim, normalize, softmax_t};

/// Hard cap on pairwise |cosine| between anchors of distinct categories.
pub const ANCHOR_MAX_COS: f64 = 0.3;

const ANCHOR_MAX_TRIES: usize = 20_000;

/// Deterministic generator of anchors, noisy embeddings, and teacher
/// distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherBank {
    anchors: Vec<Embedding>,
    pub region_noise_sigma: f64,
    pub text_noise_sigma: f64,
    pub teacher_tau: f64,
    textual_prototypes: Option<Vec<Vec<f64>>>,
}

/// Rejection-samples unit anchors with pairwise |cos| ≤ [`ANCHOR_MAX_COS`].
pub fn make_anchors(num_categories: usize, d: usize, seed: u64) -> Result<Vec<Embedding>> {
    if num_categories < 2 {
        return Err(Error::Parameter("need at least 2 categories".into()));
    }
    if d < 4 {
        return Err(Error::Parameter("anchor dimension must be at least 4".into()));
    }
    let mut rng = crate::rng::stream_rng(seed, crate::rng::stream::ANCHORS);
    let mut anchors: Vec<Embedding> = Vec::with_capacity(num_categories);
    while anchors.len() < num_categories {
        let mut accepted = false;
        for _ in 0..ANCHOR_MAX_TRIES {
            let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let candidate = Embedding::from_unnormalized(&v)?;
            let ok = anchors.iter().all(|a| {
                cosine_sim(a.as_slice(), candidate.as_slice())
                    .map(|c| c.abs() <= ANCHOR_MAX_COS)
                    .unwrap_or(false)
            });
            if ok {
                anchors.push(candidate);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::Parameter(format!(
                "could not place {num_categories} anchors with pairwise |cos| <= {ANCHOR_MAX_COS} in d={d}; dimension too small"
            )));
        }
    }
    Ok(anchors)
}

fn noisy_anchor(anchor: &Embedding, sigma: f64, rng: &mut ChaCha12Rng) -> Result<Embedding> {
    if sigma == 0.0 {
        return Ok(anchor.clone());
    }
    let d = anchor.dim() as f64;
    let per_component = sigma / d.sqrt();
    let v: Vec<f64> = anchor
        .as_slice()
        .iter()
        .map(|a| a + per_component * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Embedding::from_unnormalized(&v)
}

impl TeacherBank {
    pub fn new(
        num_categories: usize,
        d: usize,
        seed: u64,
        region_noise_sigma: f64,
        text_noise_sigma: f64,
        teacher_tau: f64,
    ) -> Result<Self> {
        if region_noise_sigma < 0.0 || text_noise_sigma < 0.0 {
            return Err(Error::Parameter("noise sigmas must be nonnegative".into()));
        }
        if teacher_tau <= 0.0 {
            return Err(Error::Parameter("teacher tau must be positive".into()));
        }
        Ok(Self {
            anchors: make_anchors(num_categories, d, seed)?,
            region_noise_sigma,
            text_noise_sigma,
            teacher_tau,
            textual_prototypes: None,
        })
    }

    pub fn num_categories(&self) -> usize {
        self.anchors.len()
    }

    pub fn dim(&self) -> usize {
        self.anchors.first().map_or(0, |a| a.dim())
    }

    pub fn anchor(&self, category: usize) -> Result<&Embedding> {
        self.anchors
            .get(category)
            .ok_or_else(|| Error::Parameter(format!("unknown category {category}")))
    }

    pub fn anchors(&self) -> &[Embedding] {
        &self.anchors
    }

    /// Noisy region embedding for a category (`f_img` stand-in).
    pub fn embed_region(&self, category: usize, rng: &mut ChaCha12Rng) -> Result<Embedding> {
        let anchor = self.anchor(category)?;
        noisy_anchor(anchor, self.region_noise_sigma, rng)
    }

    /// Noisy description embedding for a category (`f_txt ∘ captioner` stand-in).
    pub fn embed_description(&self, category: usize, rng: &mut ChaCha12Rng) -> Result<Embedding> {
        let anchor = self.anchor(category)?;
        noisy_anchor(anchor, self.text_noise_sigma, rng)
    }

    /// Builds `P`: per pool prototype, the unit centroid of the member text
    /// embeddings. Prototypes with no members copy the pool row.
    pub fn build_textual_prototypes(
        &mut self,
        pool: &ConceptPool,
        text_embeddings: &[Embedding],
        membership: &PoolMembership,
    ) -> Result<()> {
        if membership.members.len() != pool.len() {
            return Err(Error::Contract(format!(
                "membership covers {} prototypes, pool has {}",
                membership.members.len(),
                pool.len()
            )));
        }
        let mut prototypes = Vec::with_capacity(pool.len());
        for (j, members) in membership.members.iter().enumerate() {
            if members.is_empty() {
                log::warn!("prototype {j} has no member text embeddings; copying pool row into P");
                prototypes.push(pool.prototype(j).to_vec());
                continue;
            }
            let mut centroid = vec![0.0; pool.dim()];
            for &i in members {
                let e = text_embeddings.get(i).ok_or_else(|| {
                    Error::Contract(format!("membership index {i} out of bounds"))
                })?;
                for (c, v) in centroid.iter_mut().zip(e.as_slice()) {
                    *c += v;
                }
            }
            for c in centroid.iter_mut() {
                *c /= members.len() as f64;
            }
            prototypes.push(normalize(&centroid)?);
        }
        self.textual_prototypes = Some(prototypes);
        Ok(())
    }

    pub fn textual_prototypes(&self) -> Result<&[Vec<f64>]> {
        self.textual_prototypes
            .as_deref()
            .ok_or_else(|| Error::State("textual prototypes not built".into()))
    }

    /// Asserts the A/P index pairing against a pool (call after pool load).
    pub fn check_pairing(&self, pool: &ConceptPool) -> Result<()> {
        let p = self.textual_prototypes()?;
        if p.len() != pool.len() {
            return Err(Error::State(format!(
                "teacher P has {} rows, pool has {} prototypes",
                p.len(),
                pool.len()
            )));
        }
        Ok(())
    }

    /// Teacher distribution of a projected query over `P` at the teacher τ.
    pub fn teacher_distribution(&self, q_hat: &[f64]) -> Result<Vec<f64>> {
        let p = self.textual_prototypes()?;
        if p.is_empty() {
            return Err(Error::State("teacher P is empty".into()));
        }
        let sims: Vec<f64> = p
            .iter()
            .map(|row| cosine_sim(q_hat, row))
            .collect::<Result<_>>()?;
        softmax_t(&sims, self.teacher_tau)
    }

    /// Category target for one region embedding: softmax over anchor cosines.
    pub fn category_targets(&self, region_embedding: &[f64]) -> Result<Vec<f64>> {
        let sims: Vec<f64> = self
            .anchors
            .iter()
            .map(|a| cosine_sim(region_embedding, a.as_slice()))
            .collect::<Result<_>>()?;
        softmax_t(&sims, self.teacher_tau)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.num_categories() as u32);
        w.u32(self.dim() as u32);
        w.f64(self.region_noise_sigma);
        w.f64(self.text_noise_sigma);
        w.f64(self.teacher_tau);
        for a in &self.anchors {
            for &v in a.as_slice() {
                w.f64(v);
            }
        }
        match &self.textual_prototypes {
            Some(p) => {
                w.u32(p.len() as u32);
                for row in p {
                    for &v in row {
                        w.f64(v);
                    }
                }
            }
            None => w.u32(0),
        }
        w.into_bytes()
    }

    pub fn from_reader(r: &mut Reader<'_>) -> Result<Self> {
        let k = r.u32("teacher category count")? as usize;
        let d = r.u32("teacher dim")? as usize;
        let region_noise_sigma = r.f64("region noise sigma")?;
        let text_noise_sigma = r.f64("text noise sigma")?;
        let teacher_tau = r.f64("teacher tau")?;
        let mut anchors = Vec::with_capacity(k);
        for j in 0..k {
            let mut v = Vec::with_capacity(d);
            for _ in 0..d {
                v.push(r.f64(&format!("anchor {j}"))?);
            }
            anchors.push(
                Embedding::new(v)
                    .map_err(|e| Error::Format(format!("anchor {j} not unit-norm: {e}")))?,
            );
        }
        let m = r.u32("teacher P row count")? as usize;
        let textual_prototypes = if m == 0 {
            None
        } else {
            let mut p = Vec::with_capacity(m);
            for j in 0..m {
                let mut row = Vec::with_capacity(d);
                for _ in 0..d {
                    row.push(r.f64(&format!("teacher P row {j}"))?);
                }
                p.push(row);
            }
            Some(p)
        };
        Ok(Self { anchors, region_noise_sigma, text_noise_sigma, teacher_tau, textual_prototypes })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let bank = Self::from_reader(&mut r)?;
        r.expect_eof("teacher bank")?;
        Ok(bank)
    }
}
