use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const VECTORS: &str = "vectors";
const IDS: &str = "ids";

/// Unit-norm image embedding keyed by record id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: Vec<f32>,
}

impl EmbeddingRecord {
    /// Normalizes `vector` to unit length.
    pub fn normalized(id: impl Into<String>, vector: Vec<f32>) -> Result<Self> {
        let norm = vector.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::Validation("cannot normalize a zero or non-finite vector".into()));
        }
        Ok(EmbeddingRecord {
            id: id.into(),
            vector: vector.iter().map(|&v| (v as f64 / norm) as f32).collect(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let norm = self.vector.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
        if (norm - 1.0).abs() >= 1e-5 {
            return Err(Error::Validation(format!(
                "embedding `{}` has norm {norm}, expected 1",
                self.id
            )));
        }
        Ok(())
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Writes an `[n, d]` matrix plus the id list in the tensor container format.
pub fn write_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let d = records.first().map_or(0, |r| r.vector.len());
    let mut data = Vec::with_capacity(records.len() * d);
    for r in records {
        if r.vector.len() != d {
            return Err(Error::Validation(format!("embedding `{}` has dim {}, expected {d}", r.id, r.vector.len())));
        }
        data.extend_from_slice(&r.vector);
    }
    let mut c = Container::new();
    c.insert(VECTORS, &Tensor::from_vec(&[records.len(), d], data)?);
    c.meta.insert(IDS.into(), Value::from(records.iter().map(|r| r.id.clone()).collect::<Vec<_>>()));
    c.save(path)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let c = Container::load(path)?;
    let m = c.get::<f32>(VECTORS)?;
    let ids: Vec<String> = c
        .meta
        .get(IDS)
        .cloned()
        .map(serde_json::from_value)
        .transpose()?
        .ok_or_else(|| Error::Integrity { tensor: IDS.into(), reason: "embedding id list missing".into() })?;
    let [n, d] = *m.shape() else {
        return Err(Error::Integrity { tensor: VECTORS.into(), reason: format!("expected [n, d], got {:?}", m.shape()) });
    };
    if ids.len() != n {
        return Err(Error::Integrity { tensor: IDS.into(), reason: format!("{} ids for {n} vectors", ids.len()) });
    }
    let data = m.data();
    let records: Vec<EmbeddingRecord> = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| EmbeddingRecord { id, vector: data[i * d..(i + 1) * d].to_vec() })
        .collect();
    for r in &records {
        r.validate()?;
    }
    Ok(records)
}

/// DBSCAN output: clusters (each sorted by id, ordered by first id) and noise.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clustering {
    pub clusters: Vec<Vec<String>>,
    pub noise: Vec<String>,
}

fn check_params(sim_threshold: f64, min_pts: usize) -> Result<()> {
    if !(sim_threshold > 0.0 && sim_threshold < 1.0) {
        return Err(Error::Validation(format!("similarity threshold {sim_threshold} outside (0, 1)")));
    }
    if min_pts == 0 {
        return Err(Error::Validation("min_pts must be >= 1".into()));
    }
    Ok(())
}

/// DBSCAN with neighbourhood `{y : cos(x, y) >= sim_threshold}` (self included).
///
/// Clusters are the connected components of core points; a border point
/// joins the cluster of its lowest-id core neighbour, which makes the result
/// independent of input order.
pub fn dbscan_cosine(records: &[&EmbeddingRecord], sim_threshold: f64, min_pts: usize) -> Result<Clustering> {
    check_params(sim_threshold, min_pts)?;
    let mut pts: Vec<&EmbeddingRecord> = records.to_vec();
    pts.sort_by(|a, b| a.id.cmp(&b.id));
    let n = pts.len();
    if let Some(d) = pts.first().map(|p| p.vector.len()) {
        if let Some(bad) = pts.iter().find(|p| p.vector.len() != d) {
            return Err(Error::Validation(format!("embedding `{}` has dim {}, expected {d}", bad.id, bad.vector.len())));
        }
    }

    let mut neighbours: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for i in 0..n {
        for j in i + 1..n {
            if cosine(&pts[i].vector, &pts[j].vector) >= sim_threshold {
                neighbours[i].push(j);
                neighbours[j].push(i);
            }
        }
    }
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for start in 0..n {
        if !core[start] || label[start].is_some() {
            continue;
        }
        label[start] = Some(next);
        let mut stack = vec![start];
        while let Some(p) = stack.pop() {
            for &q in &neighbours[p] {
                if core[q] && label[q].is_none() {
                    label[q] = Some(next);
                    stack.push(q);
                }
            }
        }
        next += 1;
    }
    for i in 0..n {
        if !core[i] {
            let mut nb = neighbours[i].clone();
            nb.sort_unstable();
            label[i] = nb.into_iter().find(|&q| core[q]).and_then(|q| label[q]);
        }
    }

    let mut clusters = vec![Vec::new(); next];
    let mut noise = Vec::new();
    for (i, l) in label.iter().enumerate() {
        match l {
            Some(c) => clusters[*c].push(pts[i].id.clone()),
            None => noise.push(pts[i].id.clone()),
        }
    }
    Ok(Clustering { clusters, noise })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DedupConfig {
    #[serde(default = "default_threshold")]
    pub sim_threshold: f64,
    #[serde(default = "default_min_pts")]
    pub min_pts: usize,
    #[serde(default = "default_partition")]
    pub partition_size: usize,
    #[serde(default = "default_rounds")]
    pub max_rounds: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_threshold() -> f64 {
    0.9
}
fn default_min_pts() -> usize {
    2
}
fn default_partition() -> usize {
    1024
}
fn default_rounds() -> usize {
    16
}

impl Default for DedupConfig {
    fn default() -> Self {
        DedupConfig {
            sim_threshold: default_threshold(),
            min_pts: default_min_pts(),
            partition_size: default_partition(),
            max_rounds: default_rounds(),
            seed: 0,
        }
    }
}

impl DedupConfig {
    pub fn validate(&self) -> Result<()> {
        check_params(self.sim_threshold, self.min_pts)?;
        if self.partition_size < 2 {
            return Err(Error::Validation("partition_size must be >= 2".into()));
        }
        if self.max_rounds == 0 {
            return Err(Error::Validation("max_rounds must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupState {
    /// Rounds completed so far.
    pub round: usize,
    /// Current representative ids, sorted.
    pub representatives: Vec<String>,
    pub partition_size: usize,
    pub seed: u64,
}

impl DedupState {
    pub fn initial(records: &[EmbeddingRecord], partition_size: usize, seed: u64) -> Self {
        let mut representatives: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
        representatives.sort();
        DedupState { round: 0, representatives, partition_size, seed }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundAudit {
    pub round: usize,
    pub input_size: usize,
    pub chunks: usize,
    pub clusters: usize,
    pub noise: usize,
    pub output_size: usize,
}

/// `n` items split into `ceil(n / size)` contiguous chunks whose sizes
/// differ by at most one.
pub fn partition_bounds(n: usize, size: usize) -> Vec<Range<usize>> {
    if n == 0 {
        return Vec::new();
    }
    let k = n.div_ceil(size.max(1));
    let (base, extra) = (n / k, n % k);
    let mut start = 0;
    (0..k)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

fn round_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One partition → cluster → select pass. The first round partitions in id
/// order; later rounds shuffle under a round-specific stream of the seed.
pub fn dedup_round(
    state: &DedupState,
    index: &HashMap<&str, &EmbeddingRecord>,
    sim_threshold: f64,
    min_pts: usize,
) -> Result<(DedupState, RoundAudit)> {
    if state.partition_size < 2 {
        return Err(Error::Validation("partition_size must be >= 2".into()));
    }
    let mut order: Vec<&EmbeddingRecord> = state
        .representatives
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Validation(format!("no embedding for id `{id}`")))
        })
        .collect::<Result<_>>()?;
    let r = state.round as u64;
    if state.round > 0 {
        order.shuffle(&mut round_rng(state.seed, 2 * r));
    }
    let mut pick = round_rng(state.seed, 2 * r + 1);
    let chunks = partition_bounds(order.len(), state.partition_size);
    let (mut clusters, mut noise) = (0, 0);
    let mut kept = Vec::with_capacity(order.len());
    for range in &chunks {
        let c = dbscan_cosine(&order[range.clone()], sim_threshold, min_pts)?;
        clusters += c.clusters.len();
        noise += c.noise.len();
        for members in c.clusters {
            kept.push(members[pick.random_range(0..members.len())].clone());
        }
        kept.extend(c.noise);
    }
    kept.sort();
    let audit = RoundAudit {
        round: state.round + 1,
        input_size: order.len(),
        chunks: chunks.len(),
        clusters,
        noise,
        output_size: kept.len(),
    };
    let next = DedupState {
        round: state.round + 1,
        representatives: kept,
        partition_size: state.partition_size,
        seed: state.seed,
    };
    Ok((next, audit))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    pub config: DedupConfig,
    pub input_size: usize,
    pub rounds: Vec<RoundAudit>,
    pub converged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    pub representatives: Vec<String>,
    pub removed: usize,
}

/// Repeats [`dedup_round`] until two consecutive rounds produce the same
/// representative set, or `max_rounds` is exhausted.
pub fn dedup_converge(records: &[EmbeddingRecord], cfg: &DedupConfig) -> Result<DedupReport> {
    cfg.validate()?;
    let mut index: HashMap<&str, &EmbeddingRecord> = HashMap::with_capacity(records.len());
    for r in records {
        r.validate()?;
        if index.insert(r.id.as_str(), r).is_some() {
            return Err(Error::Validation(format!("duplicate embedding id `{}`", r.id)));
        }
    }
    let dims: BTreeMap<usize, usize> = records.iter().fold(BTreeMap::new(), |mut m, r| {
        *m.entry(r.vector.len()).or_default() += 1;
        m
    });
    if dims.len() > 1 {
        return Err(Error::Validation(format!("mixed embedding dimensions {:?}", dims.keys().collect::<Vec<_>>())));
    }
    let mut state = DedupState::initial(records, cfg.partition_size, cfg.seed);
    let mut rounds = Vec::new();
    let mut converged = false;
    while rounds.len() < cfg.max_rounds {
        let (next, audit) = dedup_round(&state, &index, cfg.sim_threshold, cfg.min_pts)?;
        log::info!(
            "dedup round {}: {} -> {} ({} chunks, {} clusters)",
            audit.round,
            audit.input_size,
            audit.output_size,
            audit.chunks,
            audit.clusters
        );
        let unchanged = !rounds.is_empty() && next.representatives == state.representatives;
        rounds.push(audit);
        state = next;
        if unchanged {
            converged = true;
            break;
        }
    }
    let warning = (!converged).then(|| format!("no convergence within {} rounds", cfg.max_rounds));
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(DedupReport {
        config: *cfg,
        input_size: records.len(),
        rounds,
        converged,
        warning,
        removed: records.len() - state.representatives.len(),
        representatives: state.representatives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn unit(id: &str, v: Vec<f32>) -> EmbeddingRecord {
        EmbeddingRecord::normalized(id, v).unwrap()
    }

    fn basis(d: usize, k: usize) -> Vec<f32> {
        let mut v = vec![0.0; d];
        v[k] = 1.0;
        v
    }

    fn refs(r: &[EmbeddingRecord]) -> Vec<&EmbeddingRecord> {
        r.iter().collect()
    }

    #[test]
    fn identical_vectors_form_one_cluster() {
        let recs: Vec<_> = (0..5).map(|i| unit(&format!("p{i}"), vec![1.0, 2.0, 3.0])).collect();
        let c = dbscan_cosine(&refs(&recs), 0.9, 2).unwrap();
        assert_eq!(c.clusters.len(), 1);
        assert_eq!(c.clusters[0].len(), 5);
        assert!(c.noise.is_empty());
    }

    #[test]
    fn orthogonal_vectors_are_noise() {
        let recs: Vec<_> = (0..4).map(|i| unit(&format!("o{i}"), basis(4, i))).collect();
        let c = dbscan_cosine(&refs(&recs), 0.9, 2).unwrap();
        assert!(c.clusters.is_empty());
        assert_eq!(c.noise.len(), 4);
        assert_eq!(dbscan_cosine(&[], 0.9, 2).unwrap(), Clustering::default());
    }

    #[test]
    fn one_close_pair_among_five() {
        let v1 = basis(5, 0);
        let s = (1.0f32 - 0.99 * 0.99).sqrt();
        let v2 = vec![0.99, s, 0.0, 0.0, 0.0];
        let recs = vec![
            unit("v1", v1),
            unit("v2", v2),
            unit("v3", basis(5, 2)),
            unit("v4", basis(5, 3)),
            unit("v5", vec![0.0, 0.0, 0.3, 0.3, 0.9]),
        ];
        // brute-force oracle over all pairs
        for i in 0..5 {
            for j in i + 1..5 {
                let s = cosine(&recs[i].vector, &recs[j].vector);
                assert_eq!(s >= 0.9, (i, j) == (0, 1), "pair {i},{j}: {s}");
            }
        }
        let c = dbscan_cosine(&refs(&recs), 0.9, 2).unwrap();
        assert_eq!(c.clusters, vec![vec!["v1".to_string(), "v2".to_string()]]);
        assert_eq!(c.noise, vec!["v3", "v4", "v5"]);
    }

    #[test]
    fn border_point_goes_to_lowest_id_core() {
        // b touches only a1 and c1, both core; with min_pts = 4 b itself is not core
        let recs = vec![
            unit("a1", vec![1.0, 0.0, 0.0]),
            unit("a2", vec![1.0, -0.3, 0.0]),
            unit("a3", vec![1.0, 0.0, 0.3]),
            unit("b", vec![1.0, 1.0, 0.0]),
            unit("c1", vec![0.0, 1.0, 0.0]),
            unit("c2", vec![-0.3, 1.0, 0.0]),
            unit("c3", vec![0.0, 1.0, 0.3]),
        ];
        let mut rev = refs(&recs);
        rev.reverse();
        let c1 = dbscan_cosine(&refs(&recs), 0.7, 4).unwrap();
        let c2 = dbscan_cosine(&rev, 0.7, 4).unwrap();
        assert_eq!(c1, c2);
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(c1.clusters, vec![s(&["a1", "a2", "a3", "b"]), s(&["c1", "c2", "c3"])]);
    }

    #[test]
    fn invalid_parameters() {
        assert!(dbscan_cosine(&[], 0.0, 2).is_err());
        assert!(dbscan_cosine(&[], 1.0, 2).is_err());
        assert!(dbscan_cosine(&[], 0.5, 0).is_err());
    }

    #[test]
    fn partition_bounds_are_balanced() {
        assert_eq!(partition_bounds(10, 4), vec![0..4, 4..7, 7..10]);
        assert_eq!(partition_bounds(8, 4), vec![0..4, 4..8]);
        assert!(partition_bounds(0, 4).is_empty());
    }

    fn planted(groups: usize, per: usize, singles: usize, seed: u64) -> Vec<EmbeddingRecord> {
        let d = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect() };
        let mut out = Vec::new();
        for g in 0..groups {
            let centre = gauss(d);
            for m in 0..per {
                let noise = gauss(d);
                let v: Vec<f32> = centre.iter().zip(&noise).map(|(c, n)| c + 0.1 * n).collect();
                out.push(unit(&format!("g{g:02}m{m}"), v));
            }
        }
        for s in 0..singles {
            out.push(unit(&format!("s{s:02}"), gauss(d)));
        }
        out
    }

    #[test]
    fn duplicate_free_input_converges_after_one_confirmation_round() {
        let recs = planted(0, 0, 12, 1);
        let rep = dedup_converge(&recs, &DedupConfig::default()).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.rounds.len(), 2);
        assert_eq!(rep.representatives.len(), 12);
    }

    #[test]
    fn two_chunks_with_one_pair_each() {
        let mut recs = planted(0, 0, 6, 2);
        recs[1] = unit(&recs[1].id.clone(), recs[0].vector.clone());
        recs[4] = unit(&recs[4].id.clone(), recs[5].vector.clone());
        let index: HashMap<&str, &EmbeddingRecord> = recs.iter().map(|r| (r.id.as_str(), r)).collect();
        let state = DedupState::initial(&recs, 3, 0);
        let (next, audit) = dedup_round(&state, &index, 0.9, 2).unwrap();
        assert_eq!(audit.chunks, 2);
        assert_eq!(next.representatives.len(), 4);
    }

    #[test]
    fn cross_chunk_duplicates_merge_in_a_later_round() {
        let mut recs = planted(0, 0, 8, 3);
        let copy = |recs: &mut Vec<EmbeddingRecord>, from: usize, to: usize| {
            recs[to] = unit(&recs[to].id.clone(), recs[from].vector.clone());
        };
        // first-round chunks are {s00..s03} and {s04..s07}; s03 and s04 straddle them
        copy(&mut recs, 0, 1);
        copy(&mut recs, 0, 2);
        copy(&mut recs, 3, 4);
        copy(&mut recs, 5, 6);
        copy(&mut recs, 5, 7);
        let cfg = DedupConfig { partition_size: 4, seed: 5, ..DedupConfig::default() };
        let index: HashMap<&str, &EmbeddingRecord> = recs.iter().map(|r| (r.id.as_str(), r)).collect();
        let s0 = DedupState::initial(&recs, 4, cfg.seed);
        let (s1, a1) = dedup_round(&s0, &index, 0.9, 2).unwrap();
        assert_eq!(a1.chunks, 2);
        assert_eq!(s1.representatives.len(), 4);
        assert!(s1.representatives.contains(&"s03".to_string()));
        assert!(s1.representatives.contains(&"s04".to_string()));
        let rep = dedup_converge(&recs, &cfg).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.representatives.len(), 3);
        assert_eq!(rep.rounds.iter().map(|r| r.output_size).collect::<Vec<_>>(), vec![4, 3, 3]);
    }

    #[test]
    fn planted_groups_reduce_to_one_each_and_are_idempotent() {
        let recs = planted(20, 5, 0, 4);
        let rep = dedup_converge(&recs, &DedupConfig { partition_size: 48, ..DedupConfig::default() }).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.representatives.len(), 20);
        let groups: std::collections::BTreeSet<&str> = rep.representatives.iter().map(|id| &id[..3]).collect();
        assert_eq!(groups.len(), 20);

        let survivors: Vec<EmbeddingRecord> =
            recs.iter().filter(|r| rep.representatives.contains(&r.id)).cloned().collect();
        let again = dedup_converge(&survivors, &DedupConfig::default()).unwrap();
        assert_eq!(again.representatives, rep.representatives);
    }

    #[test]
    fn embeddings_file_round_trip() {
        let recs = planted(2, 2, 2, 6);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.fdt");
        write_embeddings(&p, &recs).unwrap();
        assert_eq!(read_embeddings(&p).unwrap(), recs);
    }
}
