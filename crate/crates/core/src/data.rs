//! Synthetic multimodal records: a 16×16 grayscale "radiograph" and a short
//! bag of symptom tokens per sample.
//!
//! Images encode the class through a geometric motif on a dim background,
//! text through class-specific token blocks that partially overlap, so text
//! is informative but weaker than a clean image.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::Modality;
use crate::error::{FmtError, Result};

pub const IMAGE_SIDE: usize = 16;
pub const IMAGE_DIM: usize = IMAGE_SIDE * IMAGE_SIDE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<Vec<usize>>,
    pub has_image: bool,
    pub has_text: bool,
}

impl Record {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| {
            Err(FmtError::Validation {
                id: self.id.clone(),
                msg: msg.to_string(),
            })
        };
        if self.has_image != self.image.is_some() {
            return fail("has_image disagrees with image field");
        }
        if self.has_text != self.text.is_some() {
            return fail("has_text disagrees with text field");
        }
        if !self.has_image && !self.has_text {
            return fail("both modalities absent");
        }
        if let Some(img) = &self.image {
            if img.len() != IMAGE_DIM {
                return fail(&format!("image has {} values, expected {IMAGE_DIM}", img.len()));
            }
            if img.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return fail("image values must lie in [0, 1]");
            }
        }
        Ok(())
    }

    pub fn has(&self, modality: Modality) -> bool {
        match modality {
            Modality::Image => self.has_image,
            Modality::Text => self.has_text,
        }
    }

    /// Copy with `modality` removed.
    pub fn without(&self, modality: Modality) -> Record {
        let mut r = self.clone();
        match modality {
            Modality::Image => {
                r.image = None;
                r.has_image = false;
            }
            Modality::Text => {
                r.text = None;
                r.has_text = false;
            }
        }
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n: usize,
    pub seed: u64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Probability that a record loses one modality.
    pub missing_rate: f64,
    pub vocab: usize,
    pub text_len: usize,
    pub num_classes: usize,
    /// Weight of a class's own token block; shared tokens weigh 1.
    pub text_signal: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n: 200,
            seed: 0,
            noise: 0.0,
            missing_rate: 0.0,
            vocab: 32,
            text_len: 8,
            num_classes: 2,
            text_signal: 1.6,
        }
    }
}

impl GenConfig {
    /// Moderate-noise benchmark: both channels informative, image stronger.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            n: 400,
            seed,
            noise: 1.5,
            text_signal: 2.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(FmtError::Config("num_classes must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(FmtError::Config("missing_rate must lie in [0, 1)".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(FmtError::Config("noise must be a finite value >= 0".into()));
        }
        if self.vocab < 2 * self.num_classes {
            return Err(FmtError::Config(format!(
                "vocab {} too small for {} class blocks",
                self.vocab, self.num_classes
            )));
        }
        if self.text_len == 0 {
            return Err(FmtError::Config("text_len must be at least 1".into()));
        }
        if !(self.text_signal >= 1.0 && self.text_signal.is_finite()) {
            return Err(FmtError::Config("text_signal must be >= 1".into()));
        }
        Ok(())
    }
}

/// Noise-free image for `class`.
pub fn class_template(class: usize) -> Vec<f64> {
    const BACKGROUND: f64 = 0.2;
    const BRIGHT: f64 = 0.8;
    let mut img = vec![BACKGROUND; IMAGE_DIM];
    let center = (IMAGE_SIDE as f64 - 1.0) / 2.0;
    for r in 0..IMAGE_SIDE {
        for c in 0..IMAGE_SIDE {
            let (dr, dc) = (r as f64 - center, c as f64 - center);
            let dist = (dr * dr + dc * dc).sqrt();
            let on = match class {
                0 => false,
                1 => dist <= 4.0,
                2 => (6..10).contains(&r),
                3 => (6..10).contains(&c),
                4 => (3.0..=5.5).contains(&dist),
                k => {
                    // a 4×4 square whose position walks along the diagonal
                    let off = (k - 5) % (IMAGE_SIDE - 4);
                    (off..off + 4).contains(&r) && (off..off + 4).contains(&c)
                }
            };
            if on {
                img[r * IMAGE_SIDE + c] = BRIGHT;
            }
        }
    }
    img
}

fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Token weights for `class`: a shared half of the vocabulary, then one block
/// per class in the upper half. The class's own block has weight
/// `text_signal`; foreign blocks have weight `min(noise, 1)`, so noise-free
/// text is separable and noisy text overlaps across classes.
fn token_weights(cfg: &GenConfig, class: usize) -> Vec<f64> {
    let shared = cfg.vocab / 2;
    let block = (cfg.vocab - shared) / cfg.num_classes;
    (0..cfg.vocab)
        .map(|tok| {
            if tok < shared {
                return 1.0;
            }
            if (tok - shared) / block.max(1) == class {
                cfg.text_signal
            } else {
                cfg.noise.min(1.0)
            }
        })
        .collect()
}

/// Record `index` of the dataset described by `cfg`.
pub fn generate_record(cfg: &GenConfig, index: usize) -> Record {
    let mut rng = record_rng(cfg.seed, index);
    let label = index % cfg.num_classes;
    let image: Vec<f64> = class_template(label)
        .into_iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (v + cfg.noise * z).clamp(0.0, 1.0)
        })
        .collect();
    let weights = token_weights(cfg, label);
    let dist = rand_distr::weighted::WeightedIndex::new(&weights).expect("positive token weights");
    let text: Vec<usize> = (0..cfg.text_len).map(|_| dist.sample(&mut rng)).collect();
    let mut record = Record {
        id: format!("rec-{index:05}"),
        label,
        image: Some(image),
        text: Some(text),
        has_image: true,
        has_text: true,
    };
    if rng.random::<f64>() < cfg.missing_rate {
        let lost = if rng.random::<bool>() { Modality::Image } else { Modality::Text };
        record = record.without(lost);
    }
    record
}

/// Class-balanced dataset; a pure function of `cfg`.
pub fn generate(cfg: &GenConfig) -> Result<Vec<Record>> {
    cfg.validate()?;
    Ok((0..cfg.n).into_par_iter().map(|i| generate_record(cfg, i)).collect())
}

pub fn to_jsonl(records: &[Record]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| FmtError::Contract(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save(records: &[Record], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(to_jsonl(records)?.as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn parse_jsonl(reader: impl BufRead) -> Result<Vec<Record>> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| FmtError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

pub fn load(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    parse_jsonl(BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        Self {
            train_fraction: 0.75,
            seed,
        }
    }

    pub fn train_size(&self, n: usize) -> usize {
        (self.train_fraction * n as f64).floor() as usize
    }
}

/// Seeded, class-stratified split with `|train| = floor(train_fraction · n)`.
///
/// Records are shuffled within each label, then interleaved label by label,
/// so every prefix of the ordering is balanced to within one record per
/// class before the cut.
pub fn split(records: &[Record], spec: SplitSpec) -> Result<(Vec<Record>, Vec<Record>)> {
    let n = records.len();
    if n < 2 {
        return Err(FmtError::Config(format!("split needs at least 2 records, got {n}")));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(FmtError::Config("train_fraction must lie in (0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let max_label = records.iter().map(|r| r.label).max().unwrap_or(0);
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); max_label + 1];
    for (i, r) in records.iter().enumerate() {
        by_label[r.label].push(i);
    }
    for group in &mut by_label {
        group.shuffle(&mut rng);
    }
    let mut label_order: Vec<usize> = (0..by_label.len()).collect();
    label_order.shuffle(&mut rng);
    let mut order = Vec::with_capacity(n);
    let longest = by_label.iter().map(Vec::len).max().unwrap_or(0);
    for k in 0..longest {
        for &l in &label_order {
            if let Some(&i) = by_label[l].get(k) {
                order.push(i);
            }
        }
    }
    let cut = spec.train_size(n);
    let (train_idx, test_idx) = order.split_at(cut);
    let mut train_idx = train_idx.to_vec();
    let mut test_idx = test_idx.to_vec();
    train_idx.shuffle(&mut rng);
    test_idx.shuffle(&mut rng);
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Ok((pick(&train_idx), pick(&test_idx)))
}

pub fn class_histogram(records: &[Record], num_classes: usize) -> Vec<usize> {
    let mut h = vec![0; num_classes.max(records.iter().map(|r| r.label + 1).max().unwrap_or(0))];
    for r in records {
        h[r.label] += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_by_construction() {
        let cfg = GenConfig { n: 40, seed: 1, ..Default::default() };
        let recs = generate(&cfg).unwrap();
        assert_eq!(class_histogram(&recs, 2), vec![20, 20]);
        assert!(recs.iter().all(|r| r.validate().is_ok()));
    }

    #[test]
    fn parallel_generation_matches_sequential() {
        let cfg = GenConfig { n: 64, seed: 9, noise: 0.3, missing_rate: 0.2, ..Default::default() };
        let seq: Vec<_> = (0..cfg.n).map(|i| generate_record(&cfg, i)).collect();
        assert_eq!(generate(&cfg).unwrap(), seq);
    }

    #[test]
    fn missing_rate_drops_exactly_one_modality() {
        let cfg = GenConfig { n: 400, seed: 2, missing_rate: 0.5, ..Default::default() };
        let recs = generate(&cfg).unwrap();
        let degraded = recs.iter().filter(|r| !(r.has_image && r.has_text)).count();
        assert!(degraded > 150 && degraded < 250, "{degraded}");
        assert!(recs.iter().all(|r| r.has_image || r.has_text));
    }

    #[test]
    fn nearest_template_is_perfect_without_noise() {
        let cfg = GenConfig { n: 60, seed: 3, num_classes: 5, vocab: 40, ..Default::default() };
        let templates: Vec<_> = (0..5).map(class_template).collect();
        for r in generate(&cfg).unwrap() {
            let img = r.image.as_ref().unwrap();
            let nearest = (0..5)
                .min_by(|&a, &b| {
                    let d = |t: &Vec<f64>| t.iter().zip(img).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
                    d(&templates[a]).total_cmp(&d(&templates[b]))
                })
                .unwrap();
            assert_eq!(nearest, r.label);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(GenConfig { num_classes: 1, ..Default::default() }.validate().is_err());
        assert!(GenConfig { missing_rate: 1.0, ..Default::default() }.validate().is_err());
        assert!(GenConfig { noise: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn parse_reports_line_numbers() {
        let good = to_jsonl(&generate(&GenConfig { n: 2, ..Default::default() }).unwrap()).unwrap();
        let text = format!("{good}{{\"id\": 3\n");
        match parse_jsonl(text.as_bytes()) {
            Err(FmtError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_unknown_fields_and_inconsistent_flags() {
        let line = r#"{"id":"a","label":0,"text":[1],"has_image":false,"has_text":true,"extra":1}"#;
        assert!(matches!(parse_jsonl(line.as_bytes()), Err(FmtError::Parse { line: 1, .. })));
        let line = r#"{"id":"b7","label":0,"has_image":false,"has_text":true}"#;
        match parse_jsonl(line.as_bytes()) {
            Err(FmtError::Validation { id, .. }) => assert_eq!(id, "b7"),
            other => panic!("unexpected {other:?}"),
        }
        let line = r#"{"id":"c","label":0,"has_image":false,"has_text":false}"#;
        assert!(matches!(parse_jsonl(line.as_bytes()), Err(FmtError::Validation { .. })));
    }

    #[test]
    fn empty_input_is_empty_dataset() {
        assert!(parse_jsonl(&b""[..]).unwrap().is_empty());
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        for (n, train) in [(40, 30), (43, 32), (2, 1), (200, 150)] {
            let recs = generate(&GenConfig { n, ..Default::default() }).unwrap();
            let (a, b) = split(&recs, SplitSpec::new(5)).unwrap();
            assert_eq!((a.len(), b.len()), (train, n - train));
            let mut ids: Vec<_> = a.iter().chain(&b).map(|r| r.id.clone()).collect();
            ids.sort();
            ids.dedup();
            assert_eq!(ids.len(), n);
        }
        let one = generate(&GenConfig { n: 1, ..Default::default() }).unwrap();
        assert!(split(&one, SplitSpec::new(0)).is_err());
    }

    #[test]
    fn split_is_seeded() {
        let recs = generate(&GenConfig { n: 40, ..Default::default() }).unwrap();
        let ids = |s| {
            let (a, _) = split(&recs, SplitSpec::new(s)).unwrap();
            a.into_iter().map(|r| r.id).collect::<Vec<_>>()
        };
        assert_eq!(ids(1), ids(1));
        assert_ne!(ids(1), ids(2));
    }

    #[test]
    fn split_keeps_classes_near_balance() {
        for seed in 0..50 {
            let recs = generate(&GenConfig { n: 40 + seed as usize, seed, ..Default::default() }).unwrap();
            let (a, b) = split(&recs, SplitSpec::new(seed)).unwrap();
            for part in [&a, &b] {
                let h = class_histogram(part, 2);
                let half = part.len() as f64 / 2.0;
                for c in h {
                    assert!((c as f64 - half).abs() <= 0.15 * part.len() as f64 + 1e-9, "{c} of {}", part.len());
                }
            }
        }
    }
}
