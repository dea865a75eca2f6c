//! Re-identification evaluation on pooled mid-level features.

mod attention;

pub use attention::{attention_maps, export_attention, write_pgm, AttentionMap};

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{resize_nearest, EvalSet};
use crate::error::{Error, Result};
use crate::kernel::{Domain, FeatureBatch};
use crate::model::MmfaModel;
use crate::tensor::{Real, Tensor};

const EMBED_CHUNK: usize = 64;

/// Pooled features for every image, computed in eval mode.
pub fn embed<T: Real>(model: &MmfaModel<T>, images: &[Tensor<T>], domain: Domain) -> Result<FeatureBatch<T>> {
    if images.is_empty() {
        return Err(Error::Batch("nothing to embed".into()));
    }
    let input = model.config().extractor.input;
    let d = model.feature_dim();
    let mut data = Vec::with_capacity(images.len() * d);
    for chunk in images.chunks(EMBED_CHUNK) {
        let resized = chunk
            .iter()
            .map(|t| resize_nearest(t, input.height, input.width))
            .collect::<Result<Vec<_>>>()?;
        data.extend_from_slice(model.embed(Tensor::stack(&resized)?)?.data());
    }
    FeatureBatch::new(Tensor::new(vec![images.len(), d], data)?, domain)
}

fn l2_normalize<T: Real>(f: &FeatureBatch<T>) -> Result<FeatureBatch<T>> {
    let (n, d) = (f.len(), f.dim());
    let mut data = f.features().data().to_vec();
    for row in data.chunks_mut(d) {
        let norm = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
        if norm > T::zero() {
            row.iter_mut().for_each(|v| *v = *v / norm);
        }
    }
    FeatureBatch::new(Tensor::new(vec![n, d], data)?, f.domain())
}

/// Euclidean distances between every query row and every gallery row.
pub fn distance_matrix<T: Real>(q: &FeatureBatch<T>, g: &FeatureBatch<T>) -> Result<Tensor<T>> {
    if q.dim() != g.dim() {
        return Err(Error::dim(format!("query dim {} vs gallery dim {}", q.dim(), g.dim())));
    }
    let mut out = Vec::with_capacity(q.len() * g.len());
    for i in 0..q.len() {
        let a = q.row(i);
        for j in 0..g.len() {
            let s = a.iter().zip(g.row(j)).fold(T::zero(), |acc, (&x, &y)| {
                let d = x - y;
                acc + d * d
            });
            out.push(s.sqrt());
        }
    }
    Tensor::new(vec![q.len(), g.len()], out)
}

/// CMC and mAP over the valid queries of one ranking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankMetrics {
    /// Match rate at ranks `1..=g`.
    pub cmc: Vec<f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub valid_queries: usize,
    pub skipped_queries: usize,
}

/// Ranks each gallery by ascending distance (ties by gallery index), drops
/// junk entries that share both identity and camera with the query, then
/// accumulates CMC and average precision. Queries left without any relevant
/// entry are skipped and counted.
pub fn rank_metrics<T: Real>(
    dists: &Tensor<T>,
    q_ids: &[i64],
    q_cams: &[i64],
    g_ids: &[i64],
    g_cams: &[i64],
) -> Result<RankMetrics> {
    let (nq, ng) = dists.dims2()?;
    if q_ids.len() != nq || q_cams.len() != nq || g_ids.len() != ng || g_cams.len() != ng {
        return Err(Error::dim(format!("distance matrix is {nq}×{ng}; id/camera lists disagree")));
    }
    if !dists.is_finite() {
        return Err(Error::Numeric("distance matrix has non-finite entries".into()));
    }
    let mut hits = vec![0usize; ng];
    let mut ap_sum = 0.0;
    let mut valid = 0usize;
    let mut order: Vec<usize> = Vec::with_capacity(ng);
    for qi in 0..nq {
        let row = dists.row(qi);
        order.clear();
        order.extend(0..ng);
        order.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).expect("finite"));
        let mut rank = 0usize;
        let mut found = 0usize;
        let mut first: Option<usize> = None;
        let mut precision_sum = 0.0;
        for &j in &order {
            let same_id = g_ids[j] == q_ids[qi];
            if same_id && g_cams[j] == q_cams[qi] {
                continue;
            }
            rank += 1;
            if same_id {
                found += 1;
                first.get_or_insert(rank);
                precision_sum += found as f64 / rank as f64;
            }
        }
        let Some(first) = first else { continue };
        valid += 1;
        hits[first - 1] += 1;
        ap_sum += precision_sum / found as f64;
    }
    if valid == 0 {
        return Err(Error::Protocol("no query has a valid relevant gallery entry".into()));
    }
    let mut cmc = Vec::with_capacity(ng);
    let mut acc = 0usize;
    for h in hits {
        acc += h;
        cmc.push(acc as f64 / valid as f64);
    }
    Ok(RankMetrics {
        cmc,
        map: ap_sum / valid as f64,
        valid_queries: valid,
        skipped_queries: nq - valid,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    SingleQuery,
    RandomSplits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalProtocol {
    pub kind: ProtocolKind,
    pub splits: usize,
    pub ratio: f64,
    pub seed: u64,
    /// L2-normalise features before measuring distances.
    #[serde(default)]
    pub normalize: bool,
}

impl EvalProtocol {
    pub fn single_query() -> Self {
        EvalProtocol {
            kind: ProtocolKind::SingleQuery,
            splits: 1,
            ratio: 0.5,
            seed: 0,
            normalize: false,
        }
    }

    pub fn random_splits(splits: usize, ratio: f64, seed: u64) -> Self {
        EvalProtocol {
            kind: ProtocolKind::RandomSplits,
            splits,
            ratio,
            seed,
            normalize: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.splits == 0 {
            return Err(Error::Config("splits must be >= 1".into()));
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::Config(format!("split ratio {} outside (0,1)", self.ratio)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cmc: Vec<f64>,
    #[serde(rename = "mAP")]
    pub map: f64,
    pub protocol: EvalProtocol,
    pub skipped_queries: usize,
    pub valid_queries: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub splits: Vec<RankMetrics>,
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.cmc.first().copied().unwrap_or(0.0)
    }

    fn single(m: RankMetrics, protocol: &EvalProtocol) -> Self {
        EvalReport {
            cmc: m.cmc,
            map: m.map,
            protocol: protocol.clone(),
            skipped_queries: m.skipped_queries,
            valid_queries: m.valid_queries,
            splits: Vec::new(),
        }
    }

    /// Mean over splits; shorter CMC curves are extended with their last value.
    fn averaged(splits: Vec<RankMetrics>, protocol: &EvalProtocol) -> Self {
        let n = splits.len() as f64;
        let len = splits.iter().map(|s| s.cmc.len()).max().unwrap_or(0);
        let cmc = (0..len)
            .map(|r| {
                splits
                    .iter()
                    .map(|s| s.cmc.get(r).or(s.cmc.last()).copied().unwrap_or(0.0))
                    .sum::<f64>()
                    / n
            })
            .collect();
        EvalReport {
            cmc,
            map: splits.iter().map(|s| s.map).sum::<f64>() / n,
            protocol: protocol.clone(),
            skipped_queries: splits.iter().map(|s| s.skipped_queries).sum(),
            valid_queries: splits.iter().map(|s| s.valid_queries).sum(),
            splits,
        }
    }
}

/// One identity-level split: the held-out half with one query and one
/// gallery image per identity, taken from two different cameras.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub train_ids: Vec<i64>,
    pub test_ids: Vec<i64>,
    pub query: Vec<usize>,
    pub gallery: Vec<usize>,
}

/// Builds split `index` of a seeded series. Only identities seen by at least
/// two cameras take part.
pub fn plan_split(ids: &[i64], cams: &[i64], ratio: f64, seed: u64, index: usize) -> Result<SplitPlan> {
    let mut by_id: BTreeMap<i64, BTreeMap<i64, Vec<usize>>> = BTreeMap::new();
    for (i, (&id, &cam)) in ids.iter().zip(cams).enumerate() {
        by_id.entry(id).or_default().entry(cam).or_default().push(i);
    }
    let mut eligible: Vec<i64> = by_id.iter().filter(|(_, c)| c.len() >= 2).map(|(&id, _)| id).collect();
    if eligible.len() < 2 {
        return Err(Error::Protocol(format!(
            "{} identities appear in two cameras; a split needs at least 2",
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    eligible.shuffle(&mut rng);
    let n = eligible.len();
    let n_test = ((n as f64 * ratio).round() as usize).clamp(1, n - 1);
    let mut test_ids = eligible[..n_test].to_vec();
    let mut train_ids = eligible[n_test..].to_vec();
    test_ids.sort_unstable();
    train_ids.sort_unstable();
    let mut query = Vec::with_capacity(n_test);
    let mut gallery = Vec::with_capacity(n_test);
    for id in &test_ids {
        let views = &by_id[id];
        let mut cams: Vec<i64> = views.keys().copied().collect();
        cams.shuffle(&mut rng);
        query.push(*views[&cams[0]].choose(&mut rng).expect("nonempty view"));
        gallery.push(*views[&cams[1]].choose(&mut rng).expect("nonempty view"));
    }
    Ok(SplitPlan {
        train_ids,
        test_ids,
        query,
        gallery,
    })
}

fn subset<T: Real>(f: &FeatureBatch<T>, idx: &[usize]) -> Result<FeatureBatch<T>> {
    let d = f.dim();
    let data = idx.iter().flat_map(|&i| f.row(i).to_vec()).collect();
    FeatureBatch::new(Tensor::new(vec![idx.len(), d], data)?, f.domain())
}

fn pick(v: &[i64], idx: &[usize]) -> Vec<i64> {
    idx.iter().map(|&i| v[i]).collect()
}

/// What to evaluate on.
pub enum EvalData<'a, T> {
    QueryGallery {
        query: &'a EvalSet<T>,
        gallery: &'a EvalSet<T>,
    },
    Whole(&'a EvalSet<T>),
}

/// Runs a protocol end to end. `single_query` accepts either fixed query
/// and gallery sets or one set used as both; `random_splits` needs one set.
pub fn run_protocol<T: Real>(model: &MmfaModel<T>, data: EvalData<'_, T>, protocol: &EvalProtocol) -> Result<EvalReport> {
    protocol.validate()?;
    let prep = |f: FeatureBatch<T>| if protocol.normalize { l2_normalize(&f) } else { Ok(f) };
    match (protocol.kind, data) {
        (ProtocolKind::SingleQuery, EvalData::QueryGallery { query, gallery }) => {
            let q = prep(embed(model, &query.images, Domain::Target)?)?;
            let g = prep(embed(model, &gallery.images, Domain::Target)?)?;
            let m = rank_metrics(&distance_matrix(&q, &g)?, &query.ids, &query.cams, &gallery.ids, &gallery.cams)?;
            Ok(EvalReport::single(m, protocol))
        }
        (ProtocolKind::SingleQuery, EvalData::Whole(set)) => {
            let f = prep(embed(model, &set.images, Domain::Target)?)?;
            let m = rank_metrics(&distance_matrix(&f, &f)?, &set.ids, &set.cams, &set.ids, &set.cams)?;
            Ok(EvalReport::single(m, protocol))
        }
        (ProtocolKind::RandomSplits, EvalData::Whole(set)) => {
            let f = prep(embed(model, &set.images, Domain::Target)?)?;
            random_splits_on_features(&f, &set.ids, &set.cams, protocol)
        }
        (ProtocolKind::RandomSplits, EvalData::QueryGallery { .. }) => Err(Error::Protocol(
            "random_splits draws its own query/gallery; pass a single data set".into(),
        )),
    }
}

/// The split protocol over precomputed features.
pub fn random_splits_on_features<T: Real>(
    features: &FeatureBatch<T>,
    ids: &[i64],
    cams: &[i64],
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    protocol.validate()?;
    let mut results = Vec::with_capacity(protocol.splits);
    for s in 0..protocol.splits {
        let plan = plan_split(ids, cams, protocol.ratio, protocol.seed, s)?;
        let q = subset(features, &plan.query)?;
        let g = subset(features, &plan.gallery)?;
        results.push(rank_metrics(
            &distance_matrix(&q, &g)?,
            &pick(ids, &plan.query),
            &pick(cams, &plan.query),
            &pick(ids, &plan.gallery),
            &pick(cams, &plan.gallery),
        )?);
    }
    Ok(EvalReport::averaged(results, protocol))
}
