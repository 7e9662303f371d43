//! Offline preparation: teacher bank, aligned-pair corpus, filtering, and
//! hierarchical pool construction, all deterministic in the config seed.

use rand::RngExt;

use crate::config::{PoolInit, RunConfig};
use crate::error::Result;
use crate::pool::{filter_aligned_pair_indices, AlignedPair, ConceptPool, Embedding};
use crate::rng::{stream, stream_rng};
use crate::teacher::TeacherBank;

/// Counters printed by `build-pool`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PoolStats {
    pub kept_pairs: usize,
    pub dropped_pairs: usize,
    pub m1: usize,
    pub m2_actual: usize,
}

/// Pool plus the teacher that produced it (with `P` built and index-paired).
#[derive(Debug, Clone)]
pub struct Prepared {
    pub pool: ConceptPool,
    pub bank: TeacherBank,
    pub stats: PoolStats,
}

pub fn build_bank(cfg: &RunConfig) -> Result<TeacherBank> {
    TeacherBank::new(
        cfg.num_categories(),
        cfg.d,
        cfg.seed,
        cfg.sigma_region,
        cfg.sigma_text,
        cfg.teacher_tau,
    )
}

/// Draws `pairs_per_category` region/description pairs per category. A
/// `mismatch_fraction` of descriptions comes from the wrong category,
/// standing in for bad captions that the δ-filter must reject.
pub fn generate_aligned_pairs(cfg: &RunConfig, bank: &TeacherBank) -> Result<Vec<AlignedPair>> {
    let mut region_rng = stream_rng(cfg.seed, stream::REGION);
    let mut text_rng = stream_rng(cfg.seed, stream::TEXT);
    let mut mismatch_rng = stream_rng(cfg.seed, stream::POOL);
    let k = cfg.num_categories();
    let mut pairs = Vec::with_capacity(k * cfg.pairs_per_category);
    for category in 0..k {
        for _ in 0..cfg.pairs_per_category {
            let region = bank.embed_region(category, &mut region_rng)?;
            let text_category = if k > 1 && mismatch_rng.random::<f64>() < cfg.mismatch_fraction {
                (category + 1 + mismatch_rng.random_range(0..k - 1)) % k
            } else {
                category
            };
            let text = bank.embed_description(text_category, &mut text_rng)?;
            pairs.push(AlignedPair::new(region, text, Some(category as u32))?);
        }
    }
    Ok(pairs)
}

/// Full offline pipeline: pairs → δ-filter → text clustering → pool + `P`,
/// with prototype vectors re-anchored on visual centroids when configured.
pub fn prepare_pool(cfg: &RunConfig) -> Result<Prepared> {
    let mut bank = build_bank(cfg)?;
    let pairs = generate_aligned_pairs(cfg, &bank)?;
    let kept = filter_aligned_pair_indices(&pairs, cfg.delta)?;
    let dropped = pairs.len() - kept.len();

    let texts: Vec<Embedding> = kept.iter().map(|&i| pairs[i].text.clone()).collect();
    let regions: Vec<Embedding> = kept.iter().map(|&i| pairs[i].region.clone()).collect();

    let (text_pool, membership) = ConceptPool::build(
        &texts,
        cfg.m1,
        cfg.m2_cap,
        cfg.eps,
        cfg.min_pts,
        cfg.tau,
        cfg.gamma,
        cfg.seed,
    )?;

    bank.build_textual_prototypes(&text_pool, &texts, &membership)?;

    let pool = match cfg.pool_init {
        PoolInit::Text => text_pool,
        PoolInit::Visual => {
            // Same clusters, visual centroids; empty members keep the text row.
            let mut vectors = Vec::with_capacity(text_pool.len());
            for (j, members) in membership.members.iter().enumerate() {
                if members.is_empty() {
                    vectors.push(text_pool.prototype(j).to_vec());
                    continue;
                }
                let mut centroid = vec![0.0; text_pool.dim()];
                for &i in members {
                    for (c, v) in centroid.iter_mut().zip(regions[i].as_slice()) {
                        *c += v;
                    }
                }
                for c in centroid.iter_mut() {
                    *c /= members.len() as f64;
                }
                vectors.push(centroid);
            }
            text_pool.with_prototype_vectors(vectors)?
        }
    };

    bank.check_pairing(&pool)?;
    let stats = PoolStats {
        kept_pairs: kept.len(),
        dropped_pairs: dropped,
        m1: pool.m1(),
        m2_actual: pool.m2(),
    };
    Ok(Prepared { pool, bank, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::cosine_sim;

    fn small_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.num_base = 4;
        cfg.num_novel = 2;
        cfg.d = 16;
        cfg.m1 = 3;
        cfg.m2_cap = 12;
        cfg.pairs_per_category = 24;
        cfg.seed = 5;
        cfg
    }

    #[test]
    fn filter_rejects_mostly_mismatched_pairs() {
        let cfg = small_cfg();
        let bank = build_bank(&cfg).unwrap();
        let pairs = generate_aligned_pairs(&cfg, &bank).unwrap();
        let kept = filter_aligned_pair_indices(&pairs, cfg.delta).unwrap();
        let mismatched_kept = kept
            .iter()
            .filter(|&&i| pairs[i].similarity < 0.6)
            .count();
        assert_eq!(mismatched_kept, 0);
        // Roughly mismatch_fraction of the corpus is dropped.
        let drop_rate = (pairs.len() - kept.len()) as f64 / pairs.len() as f64;
        assert!(drop_rate > 0.03 && drop_rate < 0.25, "drop rate {drop_rate}");
    }

    #[test]
    fn prepare_is_deterministic() {
        let cfg = small_cfg();
        let a = prepare_pool(&cfg).unwrap();
        let b = prepare_pool(&cfg).unwrap();
        assert_eq!(a.pool.to_bytes(), b.pool.to_bytes());
        assert_eq!(a.bank, b.bank);
        assert_eq!(a.stats.kept_pairs, b.stats.kept_pairs);
    }

    #[test]
    fn visual_and_text_inits_share_structure() {
        let mut cfg = small_cfg();
        cfg.pool_init = PoolInit::Text;
        let text = prepare_pool(&cfg).unwrap();
        cfg.pool_init = PoolInit::Visual;
        let visual = prepare_pool(&cfg).unwrap();
        assert_eq!(text.pool.m1(), visual.pool.m1());
        assert_eq!(text.pool.m2(), visual.pool.m2());
        for j in 0..text.pool.len() {
            assert_eq!(text.pool.parent(j), visual.pool.parent(j));
            // Region and text centroids of the same cluster stay aligned.
            let cos = cosine_sim(text.pool.prototype(j), visual.pool.prototype(j)).unwrap();
            assert!(cos > 0.8, "prototype {j}: text/visual cos {cos}");
        }
    }

    #[test]
    fn coarse_only_cap() {
        let mut cfg = small_cfg();
        cfg.m2_cap = 0;
        let prepared = prepare_pool(&cfg).unwrap();
        assert_eq!(prepared.stats.m2_actual, 0);
        assert_eq!(prepared.pool.len(), cfg.m1);
    }

    #[test]
    fn merged_coarse_clusters_split_into_fine_categories() {
        // m1 below the category count forces coarse clusters to merge
        // categories; DBSCAN inside them should rediscover the categories.
        let cfg = small_cfg();
        let prepared = prepare_pool(&cfg).unwrap();
        assert!(
            prepared.stats.m2_actual >= cfg.num_categories() - cfg.m1,
            "expected fine prototypes to split merged categories, got {}",
            prepared.stats.m2_actual
        );
        // Fine prototypes sit near category anchors.
        let mut close = 0;
        for j in prepared.pool.m1()..prepared.pool.len() {
            let best = prepared
                .bank
                .anchors()
                .iter()
                .map(|a| cosine_sim(prepared.pool.prototype(j), a.as_slice()).unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            if best > 0.9 {
                close += 1;
            }
        }
        assert!(close >= prepared.pool.m2() / 2);
    }
}
