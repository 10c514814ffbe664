//! Synthetic frame-to-token task.
//!
//! Each token owns a prototype feature vector. Prototypes come in close
//! pairs so that a token is most easily confused with its partner.
//! Transcripts follow a sparse bigram chain, which gives models that see
//! token context something to exploit. Every token is expanded into a run of
//! noisy prototype frames.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::ctc::{TokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::nn::params::fnv1a;

/// Optional heavy upper tail of the transcript-length distribution: with
/// probability `prob` the length is drawn log-uniformly from
/// `max_len + 1 ..= tail_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthTail {
    pub tail_max: usize,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub tail: Option<LengthTail>,
    pub min_duration: usize,
    pub max_duration: usize,
    pub feat_dim: usize,
    pub noise_sigma: f64,
    /// Per-frame probability of emitting the partner token's prototype.
    pub confusability: f64,
    /// Euclidean distance between the two prototypes of a confusable pair.
    pub pair_separation: f64,
    /// Number of preferred successors per token in the transcript chain.
    pub bigram_successors: usize,
    /// Probability of moving to a preferred successor.
    pub bigram_mass: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            vocab_size: 30,
            min_len: 3,
            max_len: 20,
            tail: None,
            min_duration: 2,
            max_duration: 6,
            feat_dim: 16,
            noise_sigma: 0.3,
            confusability: 0.05,
            pair_separation: 0.6,
            bigram_successors: 3,
            bigram_mass: 0.85,
            seed: 1,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("task spec: {m}")));
        if self.vocab_size < 2 {
            return bad("vocab_size must be at least 2");
        }
        if self.min_len < 1 || self.max_len < self.min_len {
            return bad("lengths must satisfy 1 <= min_len <= max_len");
        }
        if self.min_duration < 1 || self.max_duration < self.min_duration {
            return bad("durations must satisfy 1 <= min_duration <= max_duration");
        }
        if self.feat_dim == 0 {
            return bad("feat_dim must be positive");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.confusability) || !(0.0..=1.0).contains(&self.bigram_mass) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.bigram_successors == 0 || self.bigram_successors >= self.vocab_size {
            return bad("bigram_successors must be in 1..vocab_size");
        }
        if let Some(t) = self.tail {
            if t.tail_max <= self.max_len || !(0.0..=1.0).contains(&t.prob) {
                return bad("tail needs tail_max > max_len and prob in [0, 1]");
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            size: self.vocab_size,
        }
    }

    /// Largest transcript length this spec can produce.
    pub fn longest(&self) -> usize {
        self.tail.map_or(self.max_len, |t| t.tail_max)
    }

    /// Exact probability of drawing transcript length `len`.
    pub fn length_pmf(&self, len: usize) -> f64 {
        let base_n = (self.max_len - self.min_len + 1) as f64;
        let base = if (self.min_len..=self.max_len).contains(&len) {
            1.0 / base_n
        } else {
            0.0
        };
        match self.tail {
            None => base,
            Some(t) => {
                let tail = if len > self.max_len && len <= t.tail_max {
                    let lo = ((self.max_len + 1) as f64).ln();
                    let hi = ((t.tail_max + 1) as f64).ln();
                    (((len + 1) as f64).ln() - (len as f64).ln()) / (hi - lo)
                } else {
                    0.0
                };
                (1.0 - t.prob) * base + t.prob * tail
            }
        }
    }
}

/// Same task with a heavy tail of long transcripts reaching eight times the
/// base maximum length.
pub fn long_tail_spec(base: &TaskSpec) -> TaskSpec {
    TaskSpec {
        tail: Some(LengthTail {
            tail_max: base.max_len * 8,
            prob: 0.5,
        }),
        ..base.clone()
    }
}

/// Fixed task structure derived from the spec seed: prototypes, partners
/// and bigram successors.
#[derive(Debug, Clone)]
pub struct TaskModel {
    pub prototypes: Array2<f64>,
    pub successors: Vec<Vec<usize>>,
}

impl TaskModel {
    pub fn new(spec: &TaskSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0f_c0de_b00c);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let (v, d) = (spec.vocab_size, spec.feat_dim);
        let mut prototypes = Array2::zeros((v, d));
        for pair in 0..v.div_ceil(2) {
            let center: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
            let mut dir: Vec<f64> = (0..d).map(|_| normal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            dir.iter_mut().for_each(|x| *x *= 0.5 * spec.pair_separation / norm);
            for (k, sign) in [(2 * pair, 1.0), (2 * pair + 1, -1.0)] {
                if k < v {
                    for j in 0..d {
                        prototypes[[k, j]] = center[j] + sign * dir[j];
                    }
                }
            }
        }
        let successors = (0..v)
            .map(|t| {
                // Successors exclude the token itself.
                rand::seq::index::sample(&mut rng, v - 1, spec.bigram_successors)
                    .into_iter()
                    .map(|k| if k >= t { k + 1 } else { k })
                    .collect()
            })
            .collect();
        TaskModel {
            prototypes,
            successors,
        }
    }

    /// The confusable partner of `token`, if it has one.
    pub fn partner(&self, token: usize) -> Option<usize> {
        let p = token ^ 1;
        (p < self.prototypes.nrows()).then_some(p)
    }
}

/// One synthetic utterance. Features are stored as 32-bit floats, which is
/// also their on-disk precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub transcript: TokenSequence,
    pub frames: usize,
    pub dim: usize,
    pub features: Vec<f32>,
    /// Half-open frame span of each transcript token.
    pub spans: Vec<(usize, usize)>,
}

impl Utterance {
    pub fn features_f64(&self) -> Array2<f64> {
        Array2::from_shape_vec(
            (self.frames, self.dim),
            self.features.iter().map(|&x| x as f64).collect(),
        )
        .expect("feature buffer matches frames x dim")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub utterances: Vec<Utterance>,
}

fn utterance_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn sample_length(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> usize {
    if let Some(t) = spec.tail {
        if rng.random::<f64>() < t.prob {
            let lo = ((spec.max_len + 1) as f64).ln();
            let hi = ((t.tail_max + 1) as f64).ln();
            let x = (lo + rng.random::<f64>() * (hi - lo)).exp();
            return (x.floor() as usize).clamp(spec.max_len + 1, t.tail_max);
        }
    }
    rng.random_range(spec.min_len..=spec.max_len)
}

/// Generates utterance `index` of the dataset described by `spec`. Depends
/// only on `(spec, index)`, so generation can be sharded freely.
pub fn generate_one(spec: &TaskSpec, task: &TaskModel, index: usize) -> Utterance {
    let mut rng = utterance_rng(spec.seed, index);
    let v = spec.vocab_size;
    let len = sample_length(spec, &mut rng);
    let mut transcript = Vec::with_capacity(len);
    for i in 0..len {
        let tok = if i == 0 {
            rng.random_range(0..v)
        } else if rng.random::<f64>() < spec.bigram_mass {
            let succ: &Vec<usize> = &task.successors[transcript[i - 1]];
            succ[rng.random_range(0..succ.len())]
        } else {
            // Any token but the previous one.
            let k = rng.random_range(0..v - 1);
            if k >= transcript[i - 1] {
                k + 1
            } else {
                k
            }
        };
        transcript.push(tok);
    }
    let durations: Vec<usize> = (0..len)
        .map(|_| rng.random_range(spec.min_duration..=spec.max_duration))
        .collect();
    let seq = TokenSequence(transcript.clone());
    let frames: usize = durations.iter().sum();
    assert!(frames >= seq.min_frames(), "generator produced an infeasible pair");

    let d = spec.feat_dim;
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("valid sigma");
    let mut features = Vec::with_capacity(frames * d);
    let mut spans = Vec::with_capacity(len);
    let mut start = 0;
    for (&tok, &dur) in transcript.iter().zip(&durations) {
        for _ in 0..dur {
            let mut src = tok;
            if spec.confusability > 0.0 && rng.random::<f64>() < spec.confusability {
                src = task.partner(tok).unwrap_or(tok);
            }
            for j in 0..d {
                let n = if spec.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                features.push((task.prototypes[[src, j]] + n) as f32);
            }
        }
        spans.push((start, start + dur));
        start += dur;
    }
    Utterance {
        id: format!("utt{index:06}"),
        transcript: seq,
        frames,
        dim: d,
        features,
        spans,
    }
}

pub fn generate(spec: &TaskSpec, count: usize) -> Result<Dataset> {
    spec.validate()?;
    let task = TaskModel::new(spec);
    let utterances = (0..count).map(|i| generate_one(spec, &task, i)).collect();
    Ok(Dataset {
        spec: spec.clone(),
        utterances,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// Finalizer that spreads low-bit differences over the whole word; ids that
/// differ in one digit otherwise land in the same split.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic partition by a hash of each utterance id.
pub fn split(dataset: &Dataset, ratios: [f64; 3]) -> Result<Splits> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let mut out = Splits {
        train: Vec::new(),
        dev: Vec::new(),
        test: Vec::new(),
    };
    for utt in &dataset.utterances {
        let u = (mix64(fnv1a(utt.id.as_bytes())) >> 11) as f64 / (1u64 << 53) as f64;
        if u < ratios[0] {
            out.train.push(utt.clone());
        } else if u < ratios[0] + ratios[1] || ratios[2] == 0.0 {
            out.dev.push(utt.clone());
        } else {
            out.test.push(utt.clone());
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    count: usize,
    spec: TaskSpec,
}

#[derive(Serialize, Deserialize)]
struct Line {
    id: String,
    transcript: Vec<usize>,
    features: String,
    t: usize,
    d: usize,
    spans: Vec<(usize, usize)>,
}

const DATASET_FORMAT: &str = "nar-dataset";

pub fn encode_features(features: &[f32]) -> String {
    let mut bytes = Vec::with_capacity(features.len() * 4);
    for f in features {
        bytes.extend_from_slice(&f.to_le_bytes());
    }
    B64.encode(bytes)
}

pub fn decode_features(encoded: &str) -> Result<Vec<f32>> {
    let bytes = B64
        .decode(encoded)
        .map_err(|e| Error::invalid(format!("feature payload: {e}")))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::invalid("feature payload is not a whole number of f32 values"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Writes the dataset as JSON lines: a header carrying the spec, then one
/// utterance per line.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: 1,
        count: dataset.utterances.len(),
        spec: dataset.spec.clone(),
    };
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut w, &header).map_err(|e| Error::json("dataset header", e))?;
    w.write_all(b"\n").map_err(io)?;
    for u in &dataset.utterances {
        let line = Line {
            id: u.id.clone(),
            transcript: u.transcript.0.clone(),
            features: encode_features(&u.features),
            t: u.frames,
            d: u.dim,
            spans: u.spans.clone(),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::json(&u.id, e))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::invalid(format!("{}: empty dataset file", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| Error::json("dataset header", e))?;
    if header.format != DATASET_FORMAT {
        return Err(Error::invalid(format!("unexpected format {}", header.format)));
    }
    let mut utterances = Vec::with_capacity(header.count);
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(&line).map_err(|e| Error::json(format!("line {}", n + 2), e))?;
        let features = decode_features(&l.features)?;
        if features.len() != l.t * l.d {
            return Err(Error::shape(format!(
                "{}: {} feature values for {} x {}",
                l.id,
                features.len(),
                l.t,
                l.d
            )));
        }
        utterances.push(Utterance {
            id: l.id,
            transcript: TokenSequence::new(l.transcript, &header.spec.vocab())?,
            frames: l.t,
            dim: l.d,
            features,
            spans: l.spans,
        });
    }
    Ok(Dataset {
        spec: header.spec,
        utterances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TaskSpec {
        TaskSpec {
            seed: 3,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn utterances_are_ctc_feasible_and_consistent() {
        let ds = generate(&small(), 200).unwrap();
        for u in &ds.utterances {
            assert!(u.frames >= u.transcript.min_frames());
            assert_eq!(u.features.len(), u.frames * u.dim);
            assert_eq!(u.spans.len(), u.transcript.len());
            assert_eq!(u.spans.last().unwrap().1, u.frames);
            assert!((3..=20).contains(&u.transcript.len()));
        }
    }

    #[test]
    fn generation_is_deterministic_and_shardable() {
        let spec = small();
        let a = generate(&spec, 20).unwrap();
        let b = generate(&spec, 20).unwrap();
        assert_eq!(a, b);
        let task = TaskModel::new(&spec);
        assert_eq!(generate_one(&spec, &task, 13), a.utterances[13]);
    }

    #[test]
    fn noiseless_frames_are_separable_by_majority_vote() {
        let spec = TaskSpec {
            noise_sigma: 0.0,
            confusability: 0.0,
            ..small()
        };
        let task = TaskModel::new(&spec);
        let ds = generate(&spec, 50).unwrap();
        for u in &ds.utterances {
            let feats = u.features_f64();
            let mut labels: Vec<usize> = (0..u.frames)
                .map(|t| {
                    (0..spec.vocab_size)
                        .min_by(|&a, &b| {
                            let da: f64 = (0..spec.feat_dim).map(|j| (feats[[t, j]] - task.prototypes[[a, j]]).powi(2)).sum();
                            let db: f64 = (0..spec.feat_dim).map(|j| (feats[[t, j]] - task.prototypes[[b, j]]).powi(2)).sum();
                            da.total_cmp(&db)
                        })
                        .unwrap()
                })
                .collect();
            labels.dedup();
            assert_eq!(labels, u.transcript.0);
        }
    }

    #[test]
    fn transcripts_never_repeat_a_token() {
        let ds = generate(&small(), 200).unwrap();
        assert!(ds.utterances.iter().all(|u| u.transcript.adjacent_repeats() == 0));
    }

    #[test]
    fn split_partitions_exactly() {
        let ds = generate(&small(), 300).unwrap();
        let s = split(&ds, [0.8, 0.1, 0.1]).unwrap();
        assert_eq!(s.train.len() + s.dev.len() + s.test.len(), 300);
        let mut ids: Vec<&str> = s.train.iter().chain(&s.dev).chain(&s.test).map(|u| u.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 300);
        assert!((200..=280).contains(&s.train.len()), "{}", s.train.len());
        assert!(!s.dev.is_empty() && !s.test.is_empty());
        assert_eq!(s, split(&ds, [0.8, 0.1, 0.1]).unwrap());
        let all = split(&ds, [1.0, 0.0, 0.0]).unwrap();
        assert_eq!(all.train.len(), 300);
        assert!(split(&ds, [0.5, 0.2, 0.2]).is_err());
        assert!(split(&ds, [1.2, -0.2, 0.0]).is_err());
    }

    #[test]
    fn long_tail_only_changes_lengths() {
        let base = small();
        let lt = long_tail_spec(&base);
        assert_eq!(lt.longest(), 160);
        assert_eq!(TaskSpec { tail: None, ..lt.clone() }, base);
        let total: f64 = (1..=160).map(|l| lt.length_pmf(l)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let ds = generate(&small(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, ds);
        let bytes = std::fs::read(&path).unwrap();
        write_dataset(&back, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
    }
}
