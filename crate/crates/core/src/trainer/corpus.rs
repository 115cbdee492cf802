//! Synthetic studies with known findings.
//!
//! Each finding owns a random unit signature in visual-feature space. An image
//! is the sum of the signatures of the findings it shows, broadcast to every
//! token, plus Gaussian pixel noise. The report lists the present findings and,
//! for a fixed subset of routinely negated findings, a "no ..." phrase when the
//! finding is absent.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

use crate::embedding::TokenGrid;
use crate::error::{Error, Result};

const MODIFIERS: &[&str] = &[
    "mild", "small", "moderate", "patchy", "focal", "diffuse", "bilateral", "left", "right", "basilar", "apical",
    "subtle", "trace", "large", "chronic",
];

const OBSERVATIONS: &[&str] = &[
    "atelectasis",
    "pleural effusion",
    "opacity",
    "consolidation",
    "pulmonary edema",
    "cardiomegaly",
    "nodule",
    "pneumothorax",
    "calcification",
    "scarring",
    "hyperinflation",
    "fracture",
    "thickening",
    "vascular congestion",
    "granuloma",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewPosition {
    Frontal,
    Lateral,
}

impl ViewPosition {
    pub fn as_str(self) -> &'static str {
        match self {
            ViewPosition::Frontal => "frontal",
            ViewPosition::Lateral => "lateral",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct View {
    pub position: ViewPosition,
    pub tokens: TokenGrid,
    /// Phrases supported by this view alone.
    #[serde(default)]
    pub phrases: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Study {
    pub id: String,
    pub views: Vec<View>,
    /// Union of the per-view phrases, frontal first.
    #[serde(default)]
    pub phrases: Vec<String>,
}

impl Study {
    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::validation(format!("study {} has no views", self.id)));
        }
        let channels = self.views[0].tokens.channels();
        if let Some(v) = self.views.iter().find(|v| v.tokens.channels() != channels) {
            return Err(Error::DimensionMismatch {
                expected: channels,
                got: v.tokens.channels(),
            });
        }
        Ok(())
    }

    pub fn view(&self, position: ViewPosition) -> Option<&View> {
        self.views.iter().find(|v| v.position == position)
    }
}

/// Reads one study per line; blank lines are skipped.
pub fn read_studies<R: BufRead>(reader: R) -> Result<Vec<Study>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let study: Study = serde_json::from_str(&line).map_err(|e| Error::Format {
            line: i + 1,
            message: e.to_string(),
        })?;
        study.validate().map_err(|e| Error::Format {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(study);
    }
    Ok(out)
}

pub fn write_studies<W: Write>(studies: &[Study], mut w: W) -> Result<()> {
    for s in studies {
        serde_json::to_writer(&mut w, s).map_err(|e| Error::External(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub phrase: String,
    pub signature: Vec<f64>,
    /// Whether reports mention this finding as "no ..." when it is absent.
    pub negated_when_absent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusConfig {
    pub num_findings: usize,
    pub signature_dim: usize,
    pub grid_side: usize,
    pub train_studies: usize,
    pub val_studies: usize,
    pub test_studies: usize,
    /// Mean number of present findings per study.
    pub mean_findings: f64,
    /// 1 (frontal only) or 2 (frontal and lateral).
    pub views: usize,
    /// Standard deviation of the per-token Gaussian noise.
    pub noise_level: f64,
    pub lateral_drop_prob: f64,
    pub num_negated: usize,
    pub negation_prob: f64,
    /// Upper bound on phrases per study, normally the decoder's query count.
    pub max_phrases: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        Self {
            num_findings: 20,
            signature_dim: 32,
            grid_side: 4,
            train_studies: 2000,
            val_studies: 200,
            test_studies: 200,
            mean_findings: 7.16,
            views: 1,
            noise_level: 0.1,
            lateral_drop_prob: 0.3,
            num_negated: 2,
            negation_prob: 1.0,
            max_phrases: 16,
            seed: 0,
        }
    }
}

impl SyntheticCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::validation(format!("corpus config: {m}")));
        if self.num_findings < 2 {
            return fail("num_findings must be at least 2");
        }
        if self.num_findings > MODIFIERS.len() * OBSERVATIONS.len() {
            return fail("num_findings exceeds the phrase vocabulary");
        }
        if self.signature_dim == 0 || self.grid_side == 0 {
            return fail("signature_dim and grid_side must be positive");
        }
        if self.train_studies == 0 || self.val_studies == 0 || self.test_studies == 0 {
            return fail("study counts must be positive");
        }
        if !(self.mean_findings.is_finite() && self.mean_findings >= 1.0) {
            return fail("mean_findings must be at least 1");
        }
        if !(1..=2).contains(&self.views) {
            return fail("views must be 1 or 2");
        }
        if !(self.noise_level.is_finite() && self.noise_level >= 0.0) {
            return fail("noise_level must be non-negative");
        }
        for (name, p) in [("lateral_drop_prob", self.lateral_drop_prob), ("negation_prob", self.negation_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return fail(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.num_negated > self.num_findings {
            return fail("num_negated exceeds num_findings");
        }
        if self.max_phrases == 0 {
            return fail("max_phrases must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub findings: Vec<Finding>,
    pub train: Vec<Study>,
    pub val: Vec<Study>,
    pub test: Vec<Study>,
}

impl Corpus {
    /// Every phrase a study can contain, present forms first.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut out: Vec<String> = self.findings.iter().map(|f| f.phrase.clone()).collect();
        out.extend(self.findings.iter().filter(|f| f.negated_when_absent).map(|f| format!("no {}", f.phrase)));
        out
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn render(rng: &mut ChaCha8Rng, cfg: &SyntheticCorpusConfig, findings: &[Finding], present: &[usize]) -> TokenGrid {
    let d = cfg.signature_dim;
    let mut base = vec![0.0; d];
    for &f in present {
        for (b, s) in base.iter_mut().zip(&findings[f].signature) {
            *b += s;
        }
    }
    let tokens = cfg.grid_side * cfg.grid_side;
    let mut data = Vec::with_capacity(tokens * d);
    let noise = Normal::new(0.0, cfg.noise_level).expect("validated noise level");
    for _ in 0..tokens {
        data.extend(base.iter().map(|&b| if cfg.noise_level > 0.0 { b + noise.sample(rng) } else { b }));
    }
    TokenGrid::new(cfg.grid_side, d, data).expect("shape is consistent by construction")
}

fn study(rng: &mut ChaCha8Rng, cfg: &SyntheticCorpusConfig, findings: &[Finding], id: String) -> Study {
    let f = cfg.num_findings;
    let cap = f.min(cfg.max_phrases);
    let extra = if cfg.mean_findings > 1.0 {
        Poisson::new(cfg.mean_findings - 1.0).expect("positive mean").sample(rng) as usize
    } else {
        0
    };
    let count = (1 + extra).min(cap);
    let mut present: Vec<usize> = rand::seq::index::sample(rng, f, count).into_vec();
    present.sort_unstable();

    let mut negations = Vec::new();
    for (i, finding) in findings.iter().enumerate() {
        if finding.negated_when_absent && !present.contains(&i) && rng.random_bool(cfg.negation_prob) {
            negations.push(format!("no {}", finding.phrase));
        }
    }
    negations.truncate(cfg.max_phrases - count);

    let phrases_for = |shown: &[usize]| -> Vec<String> {
        let mut p: Vec<String> = shown.iter().map(|&i| findings[i].phrase.clone()).collect();
        p.extend(negations.iter().cloned());
        p
    };

    let mut views = vec![View {
        position: ViewPosition::Frontal,
        tokens: render(rng, cfg, findings, &present),
        phrases: phrases_for(&present),
    }];
    if cfg.views == 2 {
        let kept: Vec<usize> = present.iter().copied().filter(|_| !rng.random_bool(cfg.lateral_drop_prob)).collect();
        views.push(View {
            position: ViewPosition::Lateral,
            tokens: render(rng, cfg, findings, &kept),
            phrases: phrases_for(&kept),
        });
    }
    let mut pooled: Vec<String> = Vec::new();
    for v in &views {
        for p in &v.phrases {
            if !pooled.contains(p) {
                pooled.push(p.clone());
            }
        }
    }
    Study {
        id,
        views,
        phrases: pooled,
    }
}

/// Builds the finding table and the train, validation and test splits.
pub fn generate_corpus(cfg: &SyntheticCorpusConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut names: Vec<String> = MODIFIERS
        .iter()
        .flat_map(|m| OBSERVATIONS.iter().map(move |o| format!("{m} {o}")))
        .collect();
    names.shuffle(&mut rng);
    let findings: Vec<Finding> = names
        .into_iter()
        .take(cfg.num_findings)
        .enumerate()
        .map(|(i, phrase)| Finding {
            phrase,
            signature: unit_vector(&mut rng, cfg.signature_dim),
            negated_when_absent: i < cfg.num_negated,
        })
        .collect();

    let mut split = |prefix: &str, n: usize| -> Vec<Study> {
        (0..n).map(|i| study(&mut rng, cfg, &findings, format!("{prefix}-{i:05}"))).collect()
    };
    let train = split("train", cfg.train_studies);
    let val = split("val", cfg.val_studies);
    let test = split("test", cfg.test_studies);
    Ok(Corpus {
        findings,
        train,
        val,
        test,
    })
}
