//! Synthetic sequence tasks, dataset splits and the exact-match metric.
//!
//! Every example is `[task marker, payload…, SEP]` followed by the answer
//! and an `END` token. Labels are correct by construction.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::write_atomic;
use crate::lm::{AdapterSet, TransformerLm};
use crate::rng::Rng;

/// Reserved token ids. Digits occupy `0..10`.
pub mod vocab {
    pub const SEP: u32 = 10;
    pub const END: u32 = 11;
    pub const MARK_MODSUM: u32 = 12;
    pub const MARK_COPY: u32 = 13;
    pub const MARK_SORT: u32 = 14;
    /// Smallest vocabulary that can express every task.
    pub const MIN_VOCAB: usize = 15;
    /// First id usable as an alternative task marker.
    pub const FREE: u32 = 15;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Modsum,
    Copy,
    SortDigits,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Modsum, TaskKind::Copy, TaskKind::SortDigits];

    pub fn marker(self) -> u32 {
        match self {
            TaskKind::Modsum => vocab::MARK_MODSUM,
            TaskKind::Copy => vocab::MARK_COPY,
            TaskKind::SortDigits => vocab::MARK_SORT,
        }
    }

    /// Answer tokens for a payload of digits.
    pub fn answer(self, payload: &[u32], modulus: u32) -> Vec<u32> {
        match self {
            TaskKind::Modsum => vec![payload.iter().sum::<u32>() % modulus],
            TaskKind::Copy => payload.to_vec(),
            TaskKind::SortDigits => {
                let mut v = payload.to_vec();
                v.sort_unstable();
                v
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Number of payload digits.
    pub length: usize,
    /// Modulus for `modsum`; digits are drawn from `0..modulus`.
    #[serde(default = "default_modulus")]
    pub modulus: u32,
    #[serde(default)]
    pub seed: u64,
    /// Token used as the task marker instead of the kind's default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marker: Option<u32>,
}

fn default_modulus() -> u32 {
    10
}

impl TaskSpec {
    pub fn new(kind: TaskKind, length: usize, seed: u64) -> Self {
        TaskSpec {
            kind,
            length,
            modulus: 10,
            seed,
            marker: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::config("task.length", "must be positive"));
        }
        if self.modulus < 2 || self.modulus > 10 {
            return Err(Error::config("task.modulus", "must lie in 2..=10"));
        }
        if let Some(m) = self.marker {
            if m < vocab::FREE && m != self.kind.marker() {
                return Err(Error::config("task.marker", format!("token {m} is reserved")));
            }
        }
        Ok(())
    }

    /// Longest token sequence (prompt + answer + END) this task produces.
    pub fn max_sequence_len(&self) -> usize {
        let answer = match self.kind {
            TaskKind::Modsum => 1,
            _ => self.length,
        };
        self.length + 2 + answer + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub kind: TaskKind,
    /// Marker, payload and the trailing separator.
    pub prompt: Vec<u32>,
    /// Answer tokens without the `END` terminator.
    pub answer: Vec<u32>,
}

impl Example {
    pub fn new(kind: TaskKind, payload: &[u32], modulus: u32) -> Self {
        Self::with_marker(kind, kind.marker(), payload, modulus)
    }

    pub fn with_marker(kind: TaskKind, marker: u32, payload: &[u32], modulus: u32) -> Self {
        let mut prompt = Vec::with_capacity(payload.len() + 2);
        prompt.push(marker);
        prompt.extend_from_slice(payload);
        prompt.push(vocab::SEP);
        Example {
            kind,
            answer: kind.answer(payload, modulus),
            prompt,
        }
    }

    /// Prompt, answer and `END`.
    pub fn full_sequence(&self) -> Vec<u32> {
        let mut s = self.prompt.clone();
        s.extend_from_slice(&self.answer);
        s.push(vocab::END);
        s
    }

    pub fn len(&self) -> usize {
        self.prompt.len() + self.answer.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Where a dataset came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    Full,
    Public,
    Private,
    Client(usize),
    Shadow(usize),
    Fresh,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Full => write!(f, "full"),
            Provenance::Public => write!(f, "public"),
            Provenance::Private => write!(f, "private"),
            Provenance::Client(i) => write!(f, "private:client_{i}"),
            Provenance::Shadow(k) => write!(f, "shadow:{k}"),
            Provenance::Fresh => write!(f, "fresh"),
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("unknown provenance tag `{s}`"));
        Ok(match s {
            "full" => Provenance::Full,
            "public" => Provenance::Public,
            "private" => Provenance::Private,
            "fresh" => Provenance::Fresh,
            _ => {
                if let Some(i) = s.strip_prefix("private:client_") {
                    Provenance::Client(i.parse().map_err(|_| bad())?)
                } else if let Some(k) = s.strip_prefix("shadow:") {
                    Provenance::Shadow(k.parse().map_err(|_| bad())?)
                } else {
                    return Err(bad());
                }
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    kind: TaskKind,
    prompt: Vec<u32>,
    answer: Vec<u32>,
    provenance: String,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, provenance: Provenance) -> Self {
        Dataset {
            examples,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn max_sequence_len(&self) -> usize {
        self.examples.iter().map(Example::len).max().unwrap_or(0)
    }

    fn subset(&self, idx: &[usize], provenance: Provenance) -> Dataset {
        Dataset::new(idx.iter().map(|&i| self.examples[i].clone()).collect(), provenance)
    }

    /// Per-kind fractions, in [`TaskKind::ALL`] order.
    pub fn kind_proportions(&self) -> [f64; 3] {
        let mut counts = [0usize; 3];
        for e in &self.examples {
            counts[TaskKind::ALL.iter().position(|k| *k == e.kind).unwrap()] += 1;
        }
        let n = self.len().max(1) as f64;
        counts.map(|c| c as f64 / n)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.examples {
            let rec = JsonlRecord {
                kind: e.kind,
                prompt: e.prompt.clone(),
                answer: e.answer.clone(),
                provenance: self.provenance.to_string(),
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl()?.as_bytes())
    }

    pub fn load_jsonl(path: &Path) -> Result<Dataset> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let reader = BufReader::new(fs::File::open(path)?);
        let mut examples = Vec::new();
        let mut provenance = None;
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: JsonlRecord = serde_json::from_str(&line)?;
            let p: Provenance = rec.provenance.parse()?;
            if *provenance.get_or_insert(p) != p {
                return Err(Error::Format(format!(
                    "{}: mixed provenance tags in one dataset",
                    path.display()
                )));
            }
            examples.push(Example {
                kind: rec.kind,
                prompt: rec.prompt,
                answer: rec.answer,
            });
        }
        Ok(Dataset::new(examples, provenance.unwrap_or(Provenance::Full)))
    }
}

pub fn generate_dataset(spec: &TaskSpec, n: usize) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed).derive_named("task");
    let base = match spec.kind {
        TaskKind::Modsum => spec.modulus as usize,
        _ => 10,
    };
    let examples = (0..n)
        .map(|_| {
            let payload: Vec<u32> = (0..spec.length).map(|_| rng.below(base) as u32).collect();
            Example::with_marker(spec.kind, spec.marker.unwrap_or(spec.kind.marker()), &payload, spec.modulus)
        })
        .collect();
    Ok(Dataset::new(examples, Provenance::Full))
}

/// Draws `n` examples whose kinds follow `weights` (one spec per kind).
pub fn generate_mixture(specs: &[TaskSpec], weights: &[f64], n: usize, seed: u64) -> Result<Dataset> {
    if specs.is_empty() || specs.len() != weights.len() {
        return Err(Error::config("mixture", "one weight per task spec required"));
    }
    let total: f64 = weights.iter().sum();
    let mut rng = Rng::new(seed).derive_named("mixture");
    let pools: Vec<Dataset> = specs
        .iter()
        .map(|s| generate_dataset(s, n))
        .collect::<Result<_>>()?;
    let mut cursor = vec![0usize; specs.len()];
    let mut examples = Vec::with_capacity(n);
    for _ in 0..n {
        let mut u = rng.uniform() * total;
        let mut pick = specs.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        examples.push(pools[pick].examples[cursor[pick]].clone());
        cursor[pick] += 1;
    }
    Ok(Dataset::new(examples, Provenance::Full))
}

/// Random half/half partition into `(private D, public D_p)`.
pub fn split_public_private(full: &Dataset, seed: u64) -> (Dataset, Dataset) {
    let perm = Rng::new(seed).derive_named("public-private").permutation(full.len());
    let half = full.len() / 2;
    (
        full.subset(&perm[..half], Provenance::Private),
        full.subset(&perm[half..], Provenance::Public),
    )
}

/// `count` shadow subsets of `n_per` examples each. Sampling is without
/// replacement inside a subset and independent across subsets.
pub fn split_shadow(public: &Dataset, count: usize, n_per: usize, seed: u64) -> Result<Vec<Dataset>> {
    if count == 0 {
        return Err(Error::config("curation.shadow_count", "must be positive"));
    }
    if n_per == 0 || n_per > public.len() {
        return Err(Error::config(
            "curation.n_per",
            format!("{n_per} examples per shadow set but the public set has {}", public.len()),
        ));
    }
    let root = Rng::new(seed).derive_named("shadow");
    Ok((0..count)
        .map(|k| {
            let mut rng = root.derive(k as u64);
            let mut idx: Vec<usize> = (0..public.len()).collect();
            for i in 0..n_per {
                let j = i + rng.below(idx.len() - i);
                idx.swap(i, j);
            }
            public.subset(&idx[..n_per], Provenance::Shadow(k))
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum ClientSplit {
    Uniform,
    Dirichlet { alpha: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientShard {
    pub train: Dataset,
    pub test: Dataset,
}

impl ClientShard {
    /// Keeps the first `n` train examples and moves the rest to the front of
    /// the test split.
    pub fn cap_train(&mut self, n: usize) {
        if self.train.examples.len() > n {
            let mut surplus = self.train.examples.split_off(n);
            surplus.append(&mut self.test.examples);
            self.test.examples = surplus;
        }
    }
}

/// Partitions `private` into `clients` disjoint shards, each split into
/// train/test at `train_ratio`.
pub fn split_clients(
    private: &Dataset,
    clients: usize,
    mode: &ClientSplit,
    train_ratio: f64,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if clients == 0 {
        return Err(Error::config("clients.count", "must be positive"));
    }
    if !(0.0..=1.0).contains(&train_ratio) {
        return Err(Error::config("clients.train_ratio", "must lie in [0, 1]"));
    }
    if private.len() < clients {
        return Err(Error::config("clients.count", "more clients than private examples"));
    }
    let mut rng = Rng::new(seed).derive_named("clients");
    let shards: Vec<Vec<usize>> = match mode {
        ClientSplit::Uniform => {
            let perm = rng.permutation(private.len());
            let base = private.len() / clients;
            let extra = private.len() % clients;
            let mut start = 0;
            (0..clients)
                .map(|i| {
                    let len = base + usize::from(i < extra);
                    let s = perm[start..start + len].to_vec();
                    start += len;
                    s
                })
                .collect()
        }
        ClientSplit::Dirichlet { alpha } => {
            if alpha.is_empty() || alpha.iter().any(|&a| a <= 0.0) {
                return Err(Error::config("clients.split.alpha", "concentrations must be positive"));
            }
            let mut pools: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, e) in private.examples.iter().enumerate() {
                let k = TaskKind::ALL.iter().position(|x| *x == e.kind).unwrap();
                pools.entry(k % alpha.len()).or_default().push(i);
            }
            for pool in pools.values_mut() {
                rng.shuffle(pool);
            }
            let size = private.len() / clients;
            (0..clients)
                .map(|_| {
                    let p = rng.dirichlet(alpha);
                    let mut shard = Vec::with_capacity(size);
                    for (k, frac) in p.iter().enumerate() {
                        let want = (frac * size as f64).round() as usize;
                        if let Some(pool) = pools.get_mut(&k) {
                            let take = want.min(pool.len()).min(size - shard.len());
                            shard.extend(pool.drain(..take));
                        }
                    }
                    // top up from whatever remains when a pool ran dry
                    for pool in pools.values_mut() {
                        let take = (size - shard.len()).min(pool.len());
                        shard.extend(pool.drain(..take));
                    }
                    shard
                })
                .collect()
        }
    };
    Ok(shards
        .into_iter()
        .enumerate()
        .map(|(i, idx)| {
            let n_train = (idx.len() as f64 * train_ratio).round() as usize;
            ClientShard {
                train: private.subset(&idx[..n_train], Provenance::Client(i)),
                test: private.subset(&idx[n_train..], Provenance::Client(i)),
            }
        })
        .collect())
}

/// Concatenates datasets (used for the pooled ceiling model).
pub fn combine(parts: &[&Dataset], provenance: Provenance) -> Dataset {
    Dataset::new(
        parts.iter().flat_map(|d| d.examples.iter().cloned()).collect(),
        provenance,
    )
}

/// Fraction of examples whose greedy decode reproduces the label exactly.
pub fn exact_match(model: &TransformerLm, adapters: Option<&AdapterSet>, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::config("exact_match", "empty evaluation set"));
    }
    let predictions = crate::lm::greedy_answers(model, adapters, &test.examples)?;
    let hits = predictions
        .iter()
        .zip(&test.examples)
        .filter(|(p, e)| **p == e.answer)
        .count();
    Ok(hits as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sorted(d: &Dataset) -> Vec<Example> {
        let mut v = d.examples.clone();
        v.sort_by(|a, b| (&a.prompt, &a.answer).cmp(&(&b.prompt, &b.answer)));
        v
    }

    #[test]
    fn modsum_label() {
        let e = Example::new(TaskKind::Modsum, &[3, 5, 4], 10);
        assert_eq!(e.answer, vec![2]);
        assert_eq!(e.full_sequence(), vec![12, 3, 5, 4, 10, 2, 11]);
    }

    #[test]
    fn copy_and_sort_labels() {
        let spec = TaskSpec::new(TaskKind::Copy, 4, 1);
        for e in generate_dataset(&spec, 20).unwrap().examples {
            assert_eq!(e.answer, e.prompt[1..5]);
        }
        let e = Example::new(TaskKind::SortDigits, &[3, 1, 2], 10);
        assert_eq!(e.answer, vec![1, 2, 3]);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = TaskSpec::new(TaskKind::Modsum, 3, 9);
        assert_eq!(generate_dataset(&spec, 50).unwrap(), generate_dataset(&spec, 50).unwrap());
    }

    #[test]
    fn public_private_is_a_partition() {
        let full = generate_dataset(&TaskSpec::new(TaskKind::Copy, 5, 2), 100).unwrap();
        let (d, dp) = split_public_private(&full, 4);
        assert_eq!((d.len(), dp.len()), (50, 50));
        let merged = combine(&[&d, &dp], Provenance::Full);
        assert_eq!(sorted(&merged), sorted(&full));
        let (d2, _) = split_public_private(&full, 5);
        assert_ne!(d.examples, d2.examples);
    }

    #[test]
    fn shadow_shapes() {
        let full = generate_dataset(&TaskSpec::new(TaskKind::Modsum, 3, 2), 200).unwrap();
        let (_, dp) = split_public_private(&full, 0);
        let shadows = split_shadow(&dp, 32, 64, 1).unwrap();
        assert_eq!(shadows.len(), 32);
        assert!(shadows.iter().all(|s| s.len() == 64));
        assert_eq!(shadows[5].provenance, Provenance::Shadow(5));
        let one = split_shadow(&dp, 1, dp.len(), 1).unwrap();
        assert_eq!(sorted(&one[0]), sorted(&dp));
        assert!(matches!(split_shadow(&dp, 2, dp.len() + 1, 1), Err(Error::Config { .. })));
    }

    #[test]
    fn uniform_clients() {
        let full = generate_dataset(&TaskSpec::new(TaskKind::Modsum, 3, 2), 1000).unwrap();
        let shards = split_clients(&full, 5, &ClientSplit::Uniform, 0.9, 3).unwrap();
        for s in &shards {
            assert_eq!((s.train.len(), s.test.len()), (180, 20));
        }
        let single = split_clients(&full, 1, &ClientSplit::Uniform, 1.0, 3).unwrap();
        assert_eq!(sorted(&single[0].train), sorted(&full));
    }

    #[test]
    fn dirichlet_clients_are_heterogeneous() {
        let specs: Vec<TaskSpec> = TaskKind::ALL.iter().map(|&k| TaskSpec::new(k, 3, 7)).collect();
        let full = generate_mixture(&specs, &[1.0, 1.0, 1.0], 1500, 7).unwrap();
        let shards = split_clients(
            &full,
            3,
            &ClientSplit::Dirichlet { alpha: vec![1.0, 1.0, 1.0] },
            0.9,
            11,
        )
        .unwrap();
        let props: Vec<[f64; 3]> = shards
            .iter()
            .map(|s| combine(&[&s.train, &s.test], Provenance::Full).kind_proportions())
            .collect();
        let spread = (0..3)
            .map(|k| {
                let col: Vec<f64> = props.iter().map(|p| p[k]).collect();
                col.iter().cloned().fold(0.0, f64::max) - col.iter().cloned().fold(1.0, f64::min)
            })
            .fold(0.0, f64::max);
        assert!(spread > 0.1, "proportions {props:?}");
        for s in &shards {
            assert_eq!(s.train.len() + s.test.len(), 500);
        }
    }

    #[test]
    fn provenance_tags_round_trip() {
        for p in [Provenance::Public, Provenance::Client(3), Provenance::Shadow(12)] {
            assert_eq!(p.to_string().parse::<Provenance>().unwrap(), p);
        }
        assert_eq!(Provenance::Client(2).to_string(), "private:client_2");
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_dataset(&TaskSpec::new(TaskKind::SortDigits, 4, 1), 10).unwrap();
        let d = Dataset::new(d.examples, Provenance::Shadow(3));
        let path = dir.path().join("d.jsonl");
        d.save_jsonl(&path).unwrap();
        assert_eq!(Dataset::load_jsonl(&path).unwrap(), d);
    }
}
