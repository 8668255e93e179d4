//! Synthetic grounding corpus.
//!
//! Each sample is a clip of `frame_count` feature frames plus `k` query
//! vectors, each query answered by one ground-truth span. A fixed signature
//! bank (keyed only by feature width and bank size, not by the corpus seed)
//! acts as the shared vocabulary: corpora with different seeds draw
//! different episodes over the same signatures, so a model trained on one
//! corpus is tested on unseen compositions rather than unseen concepts.
//!
//! A frame inside an event's span carries that event's signature (events may
//! overlap; their signatures add), plus Gaussian noise. The query is its
//! event's signature plus independent noise of the same scale.

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::stream_seed;
use crate::span::TimeSpan;

/// Bank contents depend only on (d_in, bank_size); corpus seeds control
/// episode sampling, never the vocabulary.
const BANK_SEED: u64 = 0x9a1f_03bd_77c2_4e68;

/// Generation parameters; also the sidecar metadata written next to a saved
/// corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_samples: usize,
    pub frame_count: usize,
    pub d_in: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub noise: f64,
    pub bank_size: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_samples: 1000,
            frame_count: 64,
            d_in: 32,
            k_min: 1,
            k_max: 4,
            noise: 0.1,
            bank_size: 128,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_samples == 0 {
            return fail("n_samples must be positive".into());
        }
        if self.frame_count < 4 {
            return fail(format!("frame_count {} too small (minimum 4)", self.frame_count));
        }
        if self.d_in < 4 {
            return fail(format!("d_in {} too small (minimum 4)", self.d_in));
        }
        if self.k_min == 0 || self.k_max < self.k_min {
            return fail(format!("bad query range {}..={}", self.k_min, self.k_max));
        }
        if self.bank_size < self.k_max {
            return fail(format!(
                "bank_size {} cannot cover {} distinct events",
                self.bank_size, self.k_max
            ));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return fail(format!("noise {} must be finite and non-negative", self.noise));
        }
        Ok(())
    }
}

/// One clip: row-major `frame_count x d_in` frames, `k x d_in` queries, and
/// per-query ground-truth spans (`spans[j]` answers query row `j`).
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingSample {
    pub sample_id: u64,
    pub frames: Vec<f64>,
    pub queries: Vec<f64>,
    pub spans: Vec<TimeSpan>,
}

impl GroundingSample {
    pub fn k(&self) -> usize {
        self.spans.len()
    }
}

/// Unit-norm signature rows, `bank_size x d_in`.
pub fn signature_bank(d_in: usize, bank_size: usize) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(stream_seed(&[BANK_SEED, d_in as u64, bank_size as u64]));
    let mut bank = vec![0.0; bank_size * d_in];
    for row in bank.chunks_exact_mut(d_in) {
        loop {
            for v in row.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-6 {
                row.iter_mut().for_each(|v| *v /= norm);
                break;
            }
        }
    }
    bank
}

/// Event durations: mostly short, some medium, occasionally long.
fn draw_width(rng: &mut ChaCha20Rng, min_width: f64) -> f64 {
    let roll: f64 = rng.gen();
    let w: f64 = if roll < 0.5 {
        rng.gen_range(0.05..0.15)
    } else if roll < 0.8 {
        rng.gen_range(0.15..0.4)
    } else {
        rng.gen_range(0.4..0.8)
    };
    w.clamp(min_width, 1.0)
}

fn draw_spans(rng: &mut ChaCha20Rng, k: usize, min_width: f64) -> Vec<TimeSpan> {
    let mut spans: Vec<TimeSpan> = Vec::with_capacity(k);
    while spans.len() < k {
        let w = draw_width(rng, min_width);
        let s = rng.gen_range(0.0..=(1.0 - w));
        let cand = TimeSpan::new(s, s + w).expect("constructed within bounds");
        // Exact duplicates would make two queries share one answer.
        if !spans.contains(&cand) {
            spans.push(cand);
        }
    }
    spans
}

fn generate_one(spec: &CorpusSpec, bank: &[f64], sample_id: u64) -> GroundingSample {
    let mut rng = ChaCha20Rng::seed_from_u64(stream_seed(&[spec.seed, sample_id]));
    let (t, d) = (spec.frame_count, spec.d_in);
    let k = rng.gen_range(spec.k_min..=spec.k_max);
    let events = index_sample(&mut rng, spec.bank_size, k).into_vec();
    let min_width = 2.0 / t as f64;
    let spans = draw_spans(&mut rng, k, min_width);

    let mut frames = vec![0.0; t * d];
    for v in frames.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = spec.noise * z;
    }
    for f in 0..t {
        let center = (f as f64 + 0.5) / t as f64;
        for (ev, span) in events.iter().zip(&spans) {
            if center >= span.start() && center <= span.end() {
                let sig = &bank[ev * d..(ev + 1) * d];
                for (dst, s) in frames[f * d..(f + 1) * d].iter_mut().zip(sig) {
                    *dst += s;
                }
            }
        }
    }

    let mut queries = vec![0.0; k * d];
    for (q, ev) in queries.chunks_exact_mut(d).zip(&events) {
        let sig = &bank[ev * d..(ev + 1) * d];
        for (dst, s) in q.iter_mut().zip(sig) {
            let z: f64 = rng.sample(StandardNormal);
            *dst = s + spec.noise * z;
        }
    }

    GroundingSample {
        sample_id,
        frames,
        queries,
        spans,
    }
}

/// Generates the full corpus. Every sample derives its own stream from
/// (seed, sample_id), so prefixes are stable when `n_samples` grows.
pub fn generate(spec: &CorpusSpec) -> Result<Vec<GroundingSample>> {
    spec.validate()?;
    let bank = signature_bank(spec.d_in, spec.bank_size);
    Ok((0..spec.n_samples as u64)
        .map(|id| generate_one(spec, &bank, id))
        .collect())
}

/// Feature-space localization without a model: mark frames whose inner
/// product with the query clears a threshold, take the longest marked run
/// (earliest on ties), and fall back to a one-frame span at the best frame
/// when nothing clears the threshold.
///
/// The inner product is the right statistic for additive events: a frame
/// carrying the queried signature scores near 1 no matter how many other
/// events overlap it, while background frames score near 0. The threshold
/// 0.4 leaves margin on both sides for noise and signature cross-talk.
pub fn oracle_localize(frames: &[f64], query: &[f64], frame_count: usize, d_in: usize) -> TimeSpan {
    const THRESHOLD: f64 = 0.4;
    let score = |f: usize| -> f64 {
        frames[f * d_in..(f + 1) * d_in]
            .iter()
            .zip(query)
            .map(|(a, b)| a * b)
            .sum()
    };
    let scores: Vec<f64> = (0..frame_count).map(score).collect();

    let mut best: Option<(usize, usize)> = None;
    let mut run_start = None;
    for f in 0..=frame_count {
        let marked = f < frame_count && scores[f] > THRESHOLD;
        match (marked, run_start) {
            (true, None) => run_start = Some(f),
            (false, Some(s)) => {
                if best.is_none_or(|(bs, be)| f - s > be - bs) {
                    best = Some((s, f));
                }
                run_start = None;
            }
            _ => {}
        }
    }
    let t = frame_count as f64;
    if let Some((s, e)) = best {
        return TimeSpan::new(s as f64 / t, e as f64 / t).expect("frame bounds");
    }
    let argmax = scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite scores"))
        .map(|(i, _)| i)
        .unwrap_or(0);
    TimeSpan::new(argmax as f64 / t, (argmax + 1) as f64 / t).expect("frame bounds")
}

fn push_floats(line: &mut String, values: &[f64]) {
    for v in values {
        write!(line, " {v}").expect("writing to string");
    }
}

/// Saves the corpus as one text record per sample plus a JSON sidecar at
/// `<path>.meta.json`. Floats use shortest round-trip formatting, so a
/// load returns bit-identical samples.
pub fn save(path: &Path, spec: &CorpusSpec, samples: &[GroundingSample]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!(
        "corpus v1 {} {} {}\n",
        samples.len(),
        spec.frame_count,
        spec.d_in
    ));
    for s in samples {
        let mut line = format!("{} {}", s.sample_id, s.k());
        for sp in &s.spans {
            write!(line, " {} {}", sp.start(), sp.end()).expect("writing to string");
        }
        push_floats(&mut line, &s.frames);
        push_floats(&mut line, &s.queries);
        line.push('\n');
        out.push_str(&line);
    }
    fs::write(path, out)?;
    let meta = serde_json::to_string_pretty(spec)
        .map_err(|e| Error::Corpus(format!("encoding sidecar: {e}")))?;
    fs::write(sidecar_path(path), meta)?;
    Ok(())
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".meta.json");
    os.into()
}

pub fn load(path: &Path) -> Result<(CorpusSpec, Vec<GroundingSample>)> {
    let meta = fs::read_to_string(sidecar_path(path))?;
    let spec: CorpusSpec =
        serde_json::from_str(&meta).map_err(|e| Error::Corpus(format!("bad sidecar: {e}")))?;
    spec.validate()
        .map_err(|e| Error::Corpus(format!("bad sidecar: {e}")))?;

    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Corpus("empty corpus file".into()))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 5 || fields[0] != "corpus" || fields[1] != "v1" {
        return Err(Error::Corpus(format!("unrecognized header: {header}")));
    }
    let n: usize = parse_field(fields[2], "sample count")?;
    let t: usize = parse_field(fields[3], "frame count")?;
    let d: usize = parse_field(fields[4], "feature width")?;
    if t != spec.frame_count || d != spec.d_in {
        return Err(Error::Corpus(format!(
            "header {t}x{d} disagrees with sidecar {}x{}",
            spec.frame_count, spec.d_in
        )));
    }

    let mut samples = Vec::with_capacity(n);
    for (ln, line) in lines.enumerate() {
        let mut it = line.split_whitespace();
        let mut next_f64 = |what: &str| -> Result<f64> {
            it.next()
                .ok_or_else(|| Error::Corpus(format!("record {ln}: missing {what}")))?
                .parse::<f64>()
                .map_err(|e| Error::Corpus(format!("record {ln}: bad {what}: {e}")))
        };
        let sample_id = next_f64("sample id")? as u64;
        let k = next_f64("query count")? as usize;
        if k == 0 {
            return Err(Error::Corpus(format!("record {ln}: zero queries")));
        }
        let mut spans = Vec::with_capacity(k);
        for _ in 0..k {
            let s = next_f64("span start")?;
            let e = next_f64("span end")?;
            spans.push(TimeSpan::new(s, e)?);
        }
        let mut frames = Vec::with_capacity(t * d);
        for _ in 0..t * d {
            frames.push(next_f64("frame value")?);
        }
        let mut queries = Vec::with_capacity(k * d);
        for _ in 0..k * d {
            queries.push(next_f64("query value")?);
        }
        if it.next().is_some() {
            return Err(Error::Corpus(format!("record {ln}: trailing values")));
        }
        samples.push(GroundingSample {
            sample_id,
            frames,
            queries,
            spans,
        });
    }
    if samples.len() != n {
        return Err(Error::Corpus(format!(
            "header promised {n} records, found {}",
            samples.len()
        )));
    }
    Ok((spec, samples))
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse()
        .map_err(|e| Error::Corpus(format!("bad {what}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            n_samples: 50,
            frame_count: 32,
            d_in: 16,
            k_min: 1,
            k_max: 3,
            noise: 0.1,
            bank_size: 24,
            seed: 7,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        let mut other = spec.clone();
        other.seed = 8;
        assert_ne!(generate(&other).unwrap(), a);
    }

    #[test]
    fn prefixes_are_stable_as_the_corpus_grows() {
        let mut spec = small_spec();
        let big = generate(&spec).unwrap();
        spec.n_samples = 10;
        let small = generate(&spec).unwrap();
        assert_eq!(&big[..10], &small[..]);
    }

    #[test]
    fn shapes_and_bounds_hold() {
        let spec = small_spec();
        let min_w = 2.0 / spec.frame_count as f64;
        for s in generate(&spec).unwrap() {
            let k = s.k();
            assert!(k >= spec.k_min && k <= spec.k_max);
            assert_eq!(s.frames.len(), spec.frame_count * spec.d_in);
            assert_eq!(s.queries.len(), k * spec.d_in);
            for sp in &s.spans {
                assert!(sp.length() >= min_w - 1e-12);
            }
            for i in 0..k {
                for j in 0..i {
                    assert_ne!(s.spans[i], s.spans[j]);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let ok = small_spec();
        for f in [
            |s: &mut CorpusSpec| s.n_samples = 0,
            |s: &mut CorpusSpec| s.frame_count = 3,
            |s: &mut CorpusSpec| s.d_in = 2,
            |s: &mut CorpusSpec| s.k_min = 0,
            |s: &mut CorpusSpec| s.k_max = 0,
            |s: &mut CorpusSpec| s.bank_size = 1,
            |s: &mut CorpusSpec| s.noise = -0.1,
            |s: &mut CorpusSpec| s.noise = f64::NAN,
        ] {
            let mut bad = ok.clone();
            f(&mut bad);
            assert!(bad.validate().is_err());
        }
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn bank_is_shared_across_seeds_and_unit_norm() {
        let a = signature_bank(16, 24);
        let b = signature_bank(16, 24);
        assert_eq!(a, b);
        for row in a.chunks_exact(16) {
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
        assert_ne!(signature_bank(16, 25)[..16], a[..16]);
    }

    /// Exact recovery holds for isolated events; overlapping events leak
    /// signature cross-talk into neighboring frames by design, which the
    /// noisy mIoU test below covers instead.
    #[test]
    fn noiseless_oracle_recovers_isolated_spans_to_frame_resolution() {
        let mut spec = small_spec();
        spec.noise = 0.0;
        spec.k_min = 1;
        spec.k_max = 1;
        spec.n_samples = 200;
        let grid = 1.0 / spec.frame_count as f64;
        for s in generate(&spec).unwrap() {
            for (j, gt) in s.spans.iter().enumerate() {
                let q = &s.queries[j * spec.d_in..(j + 1) * spec.d_in];
                let got = oracle_localize(&s.frames, q, spec.frame_count, spec.d_in);
                assert!(
                    (got.start() - gt.start()).abs() <= grid + 1e-12
                        && (got.end() - gt.end()).abs() <= grid + 1e-12,
                    "sample {} query {j}: {:?} vs {:?}",
                    s.sample_id,
                    got,
                    gt
                );
            }
        }
    }

    #[test]
    fn noisy_oracle_keeps_high_overlap() {
        let mut spec = small_spec();
        spec.frame_count = 64;
        spec.d_in = 32;
        spec.n_samples = 500;
        let mut iou_sum = 0.0;
        let mut count = 0usize;
        for s in generate(&spec).unwrap() {
            for (j, gt) in s.spans.iter().enumerate() {
                let q = &s.queries[j * spec.d_in..(j + 1) * spec.d_in];
                let got = oracle_localize(&s.frames, q, spec.frame_count, spec.d_in);
                iou_sum += got.iou(gt);
                count += 1;
            }
        }
        let miou = iou_sum / count as f64;
        assert!(miou >= 0.85, "oracle mIoU {miou}");
    }

    #[test]
    fn oracle_falls_back_to_best_frame() {
        let d = 4;
        let t = 8;
        let mut frames = vec![0.0; t * d];
        // Weak trace at frame 5, nothing above threshold anywhere.
        frames[5 * d] = 0.3;
        frames[5 * d + 1] = -0.4;
        let query = vec![0.3, -0.4, 0.0, 0.0];
        let got = oracle_localize(&frames, &query, t, d);
        assert!((got.start() - 5.0 / 8.0).abs() < 1e-12);
        assert!((got.end() - 6.0 / 8.0).abs() < 1e-12);

        let zeros = vec![0.0; t * d];
        let fallback = oracle_localize(&zeros, &query, t, d);
        assert!((fallback.length() - 1.0 / 8.0).abs() < 1e-12);
    }

    #[test]
    fn save_load_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demo.corpus");
        let spec = small_spec();
        let samples = generate(&spec).unwrap();
        save(&path, &spec, &samples).unwrap();
        let (spec2, samples2) = load(&path).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(samples, samples2);
    }

    #[test]
    fn load_rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demo.corpus");
        let spec = small_spec();
        let samples = generate(&spec).unwrap();
        save(&path, &spec, &samples).unwrap();

        // Truncated record.
        let text = fs::read_to_string(&path).unwrap();
        let mut cut = text.trim_end().to_string();
        cut.truncate(cut.len() - 20);
        cut.push('\n');
        fs::write(&path, &cut).unwrap();
        assert!(load(&path).is_err());

        // Missing sidecar.
        save(&path, &spec, &samples).unwrap();
        fs::remove_file(sidecar_path(&path)).unwrap();
        assert!(load(&path).is_err());
    }
}
