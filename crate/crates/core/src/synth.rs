//! Deterministic synthetic multimodal corpus.
//!
//! Clusters own a unit latent; each item perturbs its cluster latent by
//! `noise_sigma`, and each modality feature is a fixed linear image of the
//! item latent plus a smaller per-record noise. Every item yields a query
//! record `q/{i}` and a target record `t/{i}` that form a gold pair.
//! Twin clusters have latents at cosine `hard_cosine` and supply the hard
//! negatives.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datasets::{build_sequence_samples, GoldPair, GradedLabel, ItemRecord, Modality, SequenceMode, SequenceSample};
use crate::embedding::{cosine, Embedding, EmbeddingStore};
use crate::error::{Error, Result};
use crate::io::{read_json, read_jsonl, read_store, write_json, write_jsonl, write_store};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_clusters: usize,
    pub items_per_cluster: usize,
    /// Spread of item latents around their cluster latent.
    pub noise_sigma: f64,
    /// Per-record observation noise, as a fraction of `noise_sigma`.
    pub view_noise: f64,
    pub latent_dim: usize,
    pub vision_dim: usize,
    pub audio_dim: usize,
    pub text_dim: usize,
    /// Fraction of clusters that belong to a near-duplicate twin pair.
    pub hard_fraction: f64,
    pub hard_cosine: f64,
    /// Fraction of items whose pair is held out for evaluation.
    pub test_fraction: f64,
    pub graded_per_query: usize,
    pub id_systems: usize,
    pub id_dim: usize,
    pub sequences: usize,
    pub history_len: usize,
    pub seq_len: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_clusters: 8,
            items_per_cluster: 250,
            noise_sigma: 0.3,
            view_noise: 0.1,
            latent_dim: 16,
            vision_dim: 32,
            audio_dim: 16,
            text_dim: 24,
            hard_fraction: 0.5,
            hard_cosine: 0.92,
            test_fraction: 0.25,
            graded_per_query: 4,
            id_systems: 2,
            id_dim: 16,
            sequences: 400,
            history_len: 16,
            seq_len: 10,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_clusters", self.n_clusters),
            ("items_per_cluster", self.items_per_cluster),
            ("latent_dim", self.latent_dim),
            ("vision_dim", self.vision_dim),
            ("audio_dim", self.audio_dim),
            ("text_dim", self.text_dim),
            ("id_dim", self.id_dim),
            ("seq_len", self.seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be at least 1")));
        }
        if !(self.noise_sigma >= 0.0 && self.view_noise >= 0.0) {
            return Err(Error::invalid("noise_sigma and view_noise must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) || !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::invalid("hard_fraction must be in [0, 1] and test_fraction in [0, 1)"));
        }
        if !(0.9..1.0).contains(&self.hard_cosine) {
            return Err(Error::invalid("hard_cosine must be in [0.9, 1)"));
        }
        if self.n_clusters > self.latent_dim {
            return Err(Error::invalid(format!(
                "{} clusters need latent_dim >= n_clusters, got {}",
                self.n_clusters, self.latent_dim
            )));
        }
        Ok(())
    }

    pub fn twin_pairs(&self) -> usize {
        ((self.hard_fraction * self.n_clusters as f64 / 2.0).round() as usize).min(self.n_clusters / 2)
    }

    pub fn raw_dim(&self, m: Modality) -> usize {
        match m {
            Modality::Vision => self.vision_dim,
            Modality::Audio => self.audio_dim,
            Modality::Text => self.text_dim,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub spec: SynthSpec,
    /// Query records `q/{i}` then target records `t/{i}`.
    pub items: Vec<ItemRecord>,
    /// Gold `(q/{i}, t/{i})` pairs tagged with split and cluster.
    pub pairs: Vec<GoldPair>,
    pub orders: Vec<GradedLabel>,
    /// Noisy item latents per record id, a stand-in for a previous
    /// embedding model.
    pub latents: EmbeddingStore,
    /// Per ID system, one embedding per target record.
    pub id_embeddings: Vec<EmbeddingStore>,
    pub sequences_train: Vec<SequenceSample>,
    pub sequences_test: Vec<SequenceSample>,
    /// Cluster index pairs whose latents are near-duplicates.
    pub twins: Vec<(usize, usize)>,
}

impl SynthData {
    pub fn pairs_in(&self, split: &str) -> Vec<GoldPair> {
        self.pairs.iter().filter(|p| p.split.as_deref() == Some(split)).cloned().collect()
    }

    /// Cluster of the item behind a `q/` or `t/` record id.
    pub fn cluster_of(&self, id: &str) -> Option<usize> {
        let idx: usize = id.split_once('/')?.1.parse().ok()?;
        Some(idx / self.spec.items_per_cluster)
    }

    pub fn twin_of(&self, cluster: usize) -> Option<usize> {
        self.twins.iter().find_map(|&(a, b)| match cluster {
            c if c == a => Some(b),
            c if c == b => Some(a),
            _ => None,
        })
    }

    /// Writes every artifact into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(dir.join("items.jsonl"), &self.items)?;
        write_jsonl(dir.join("pairs.jsonl"), &self.pairs)?;
        write_jsonl(dir.join("orders.jsonl"), &self.orders)?;
        write_store(dir.join("latents.bin"), &self.latents)?;
        let test_targets: Vec<usize> = self
            .pairs_in("test")
            .iter()
            .filter_map(|p| self.latents.position(&p.target))
            .collect();
        write_store(dir.join("bench.bin"), &self.latents.select(&test_targets))?;
        for (k, store) in self.id_embeddings.iter().enumerate() {
            write_store(dir.join(format!("ids.{k}.bin")), store)?;
        }
        write_jsonl(dir.join("sequences.train.jsonl"), &self.sequences_train)?;
        write_jsonl(dir.join("sequences.test.jsonl"), &self.sequences_test)?;
        write_json(
            dir.join(META_FILE),
            &SynthMeta {
                spec: self.spec.clone(),
                twins: self.twins.clone(),
            },
        )
    }

    /// Reads a directory produced by [`SynthData::write`].
    pub fn load(dir: &Path) -> Result<Self> {
        let meta: SynthMeta = read_json(dir.join(META_FILE))?;
        let id_embeddings = (0..meta.spec.id_systems)
            .map(|k| read_store(dir.join(format!("ids.{k}.bin"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            items: read_jsonl(dir.join("items.jsonl"))?,
            pairs: read_jsonl(dir.join("pairs.jsonl"))?,
            orders: read_jsonl(dir.join("orders.jsonl"))?,
            latents: read_store(dir.join("latents.bin"))?,
            id_embeddings,
            sequences_train: read_jsonl(dir.join("sequences.train.jsonl"))?,
            sequences_test: read_jsonl(dir.join("sequences.test.jsonl"))?,
            spec: meta.spec,
            twins: meta.twins,
        })
    }
}

const META_FILE: &str = "synth.json";

#[derive(Serialize, Deserialize)]
struct SynthMeta {
    spec: SynthSpec,
    twins: Vec<(usize, usize)>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// `count` orthonormal vectors in `dim` dimensions via Gram-Schmidt.
fn orthonormal(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, dim, 1.0);
        for b in &basis {
            let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-12 {
            normalize(&mut v);
            basis.push(v);
        }
    }
    basis
}

/// `rows × cols` map stored row-major. With `rows >= cols` the columns are
/// orthonormal, so cosines between latents are preserved exactly.
fn linear_map(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    if rows >= cols {
        let columns = orthonormal(rng, cols, rows);
        (0..rows).map(|r| columns.iter().map(|c| c[r]).collect()).collect()
    } else {
        (0..rows).map(|_| gaussian(rng, cols, 1.0 / (cols as f64).sqrt())).collect()
    }
}

fn apply(map: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    map.iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

pub fn gen_synthetic(spec: &SynthSpec, seed: u64) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = spec.latent_dim;

    let twins_n = spec.twin_pairs();
    let base = orthonormal(&mut rng, spec.n_clusters, l);
    let mut centers = base.clone();
    let mut twins = Vec::new();
    let off = (1.0 - spec.hard_cosine * spec.hard_cosine).sqrt();
    for j in 0..twins_n {
        let (a, b) = (2 * j, 2 * j + 1);
        // The partner keeps `hard_cosine` of its twin and takes the rest
        // from its own orthogonal direction.
        centers[b] = base[a].iter().zip(&base[b]).map(|(x, y)| spec.hard_cosine * x + off * y).collect();
        twins.push((a, b));
    }

    let maps: Vec<(Modality, Vec<Vec<f64>>)> =
        Modality::ALL.iter().map(|&m| (m, linear_map(&mut rng, spec.raw_dim(m), l))).collect();
    let id_maps: Vec<Vec<Vec<f64>>> = (0..spec.id_systems).map(|_| linear_map(&mut rng, spec.id_dim, l)).collect();

    let n = spec.n_clusters * spec.items_per_cluster;
    let item_std = spec.noise_sigma / (l as f64).sqrt();
    let latents: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let c = &centers[i / spec.items_per_cluster];
            gaussian(&mut rng, l, item_std).iter().zip(c).map(|(e, c)| c + e).collect()
        })
        .collect();

    let n_test = (spec.test_fraction * n as f64).round() as usize;
    let test: BTreeSet<usize> = rand::seq::index::sample(&mut rng, n, n_test).into_iter().collect();
    let split = |i: usize| if test.contains(&i) { "test" } else { "train" };

    let view_std = spec.view_noise * item_std;
    let record = |id: String, u: &[f64], rng: &mut ChaCha8Rng| {
        let noisy: Vec<f64> = u.iter().zip(gaussian(rng, l, view_std)).map(|(a, b)| a + b).collect();
        let mut r = ItemRecord::new(id);
        for (m, map) in &maps {
            r = r.with_feature(*m, apply(map, &noisy));
        }
        (r, noisy)
    };
    let mut queries = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    let mut latent_store = EmbeddingStore::new(l);
    let mut pending = Vec::with_capacity(2 * n);
    for (i, u) in latents.iter().enumerate() {
        let (q, qn) = record(format!("q/{i}"), u, &mut rng);
        let (mut t, tn) = record(format!("t/{i}"), u, &mut rng);
        let cluster = i / spec.items_per_cluster;
        t.tags.insert(format!("cluster-{cluster}"));
        t.positive_behavior_count = rng.random_range(0..=5);
        t.behavior_labels.insert(format!("topic-{cluster}"));
        for label in ["like", "share", "comment"] {
            if rng.random_bool(0.5) {
                t.behavior_labels.insert(label.to_string());
            }
        }
        pending.push((q.id.clone(), qn));
        pending.push((t.id.clone(), tn));
        queries.push(q);
        targets.push(t);
    }
    // Queries first, then targets, matching `items`.
    pending.sort_by_key(|(id, _)| !id.starts_with("q/"));
    for (id, v) in pending {
        latent_store.push(id, Embedding::new(v)?)?;
    }

    let pairs: Vec<GoldPair> = (0..n)
        .map(|i| GoldPair {
            split: Some(split(i).to_string()),
            cluster: Some(i / spec.items_per_cluster),
            ..GoldPair::new(format!("q/{i}"), format!("t/{i}"))
        })
        .collect();

    let train_idx: Vec<usize> = (0..n).filter(|i| !test.contains(i)).collect();
    let mut orders = Vec::new();
    if spec.graded_per_query >= 2 {
        for &i in &train_idx {
            let cluster = i / spec.items_per_cluster;
            let same: Vec<usize> = train_idx
                .iter()
                .copied()
                .filter(|&j| j != i && j / spec.items_per_cluster == cluster)
                .collect();
            let mut chosen = vec![i];
            if let Some(&j) = same.choose(&mut rng) {
                chosen.push(j);
            }
            while chosen.len() < spec.graded_per_query.min(train_idx.len()) {
                let j = train_idx[rng.random_range(0..train_idx.len())];
                if !chosen.contains(&j) {
                    chosen.push(j);
                }
            }
            for j in chosen {
                orders.push(GradedLabel {
                    query: format!("q/{i}"),
                    target: format!("t/{j}"),
                    score: cosine(&latents[i], &latents[j])?,
                });
            }
        }
    }

    let mut id_embeddings = Vec::new();
    for map in &id_maps {
        let mut store = EmbeddingStore::new(spec.id_dim);
        for (i, u) in latents.iter().enumerate() {
            let mut v = apply(map, u);
            v.iter_mut().for_each(|x| *x += view_std * rng.sample::<f64, _>(StandardNormal));
            store.push(format!("t/{i}"), Embedding::new(v)?)?;
        }
        id_embeddings.push(store);
    }

    let target_latents = EmbeddingStore::from_parts(
        (0..n).map(|i| format!("t/{i}")).collect(),
        latents.iter().map(|u| Embedding::new(u.clone())).collect::<Result<_>>()?,
    )?;
    let (mut sequences_train, mut sequences_test) = (Vec::new(), Vec::new());
    let engaged: Vec<usize> = (0..n).filter(|&i| targets[i].positive_behavior_count >= 3).collect();
    if spec.history_len >= 2 && !engaged.is_empty() {
        for s in 0..spec.sequences {
            let target = engaged[rng.random_range(0..engaged.len())];
            let cluster = target / spec.items_per_cluster;
            // A single interest peak: the history is drawn from the
            // target's nearest same-cluster neighbours, in random order.
            let mut pool: Vec<(f64, usize)> = (cluster * spec.items_per_cluster..(cluster + 1) * spec.items_per_cluster)
                .filter(|&j| j != target)
                .map(|j| Ok((cosine(&latents[target], &latents[j])?, j)))
                .collect::<Result<_>>()?;
            pool.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut pool: Vec<usize> = pool.into_iter().take(spec.history_len - 1).map(|(_, j)| j).collect();
            pool.shuffle(&mut rng);
            let mut history: Vec<ItemRecord> = pool.iter().map(|&j| targets[j].clone()).collect();
            history.push(targets[target].clone());
            let samples = build_sequence_samples(
                &history,
                SequenceMode::ContentSinglePeak,
                spec.seq_len,
                Some(&target_latents),
            )?;
            let bucket = if s % 4 == 3 {
                &mut sequences_test
            } else {
                &mut sequences_train
            };
            bucket.extend(samples);
        }
    }

    let mut items = queries;
    items.extend(targets);
    Ok(SynthData {
        spec: spec.clone(),
        items,
        pairs,
        orders,
        latents: latent_store,
        id_embeddings,
        sequences_train,
        sequences_test,
        twins,
    })
}

/// Mean cosine between the per-modality features of two records.
pub fn feature_cosine(a: &ItemRecord, b: &ItemRecord, m: Modality) -> Result<f64> {
    match (a.feature(m), b.feature(m)) {
        (Some(x), Some(y)) => cosine(x, y),
        _ => Err(Error::invalid(format!("{m} missing on `{}` or `{}`", a.id, b.id))),
    }
}
