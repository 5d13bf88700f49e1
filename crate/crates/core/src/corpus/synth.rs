//! The synthetic report task. Each finding owns a unit "visual signature";
//! a positive finding is planted into one random cell of one random image
//! over Gaussian noise, and the reference report states exactly the planted
//! findings plus negated statements for a random subset of absent ones.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Grid, GridShape, Study, StudySet};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FindingSpec {
    pub name: String,
    /// Probability that a study is positive for this finding.
    pub prevalence: f64,
    /// Affirmative sentence templates; `{a|b}` picks one alternative.
    pub positive: Vec<String>,
    /// Negated sentence templates.
    pub negated: Vec<String>,
    /// Visual signature; drawn from `signature_seed` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signature: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_studies: usize,
    pub k: usize,
    pub grid: GridShape,
    pub findings: Vec<FindingSpec>,
    /// Background sentence templates, emitted in pool order.
    pub background: Vec<String>,
    /// Inclusive range of background sentences per report.
    pub background_count: (usize, usize),
    /// Fraction of absent findings stated as negated sentences.
    pub negated_rate: f64,
    pub signal_amplitude: f64,
    pub noise_std: f64,
    pub signature_seed: u64,
    pub seed: u64,
    pub id_prefix: String,
}

/// Findings planted in one study.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Planted {
    pub positives: Vec<String>,
    pub negated: Vec<String>,
}

fn finding(name: &str, prevalence: f64, positive: &[&str], negated: &[&str]) -> FindingSpec {
    FindingSpec {
        name: name.to_string(),
        prevalence,
        positive: positive.iter().map(|s| s.to_string()).collect(),
        negated: negated.iter().map(|s| s.to_string()).collect(),
        signature: None,
    }
}

impl SynthConfig {
    /// Low-variance templates used for model training at desk scale.
    pub fn desk(num_studies: usize, seed: u64) -> Self {
        let p = 0.35;
        SynthConfig {
            num_studies,
            k: 2,
            grid: GridShape {
                rows: 3,
                cols: 3,
                dim: 16,
            },
            findings: vec![
                finding("atelectasis", p, &["There is mild bibasilar atelectasis."], &["There is no atelectasis."]),
                finding(
                    "cardiomegaly",
                    p,
                    &["The cardiac silhouette is enlarged."],
                    &["The heart is not enlarged."],
                ),
                finding(
                    "consolidation",
                    p,
                    &["There is focal consolidation in the right lower lobe."],
                    &["There is no focal consolidation."],
                ),
                finding("edema", p, &["There is mild pulmonary edema."], &["There is no pulmonary edema."]),
                finding(
                    "pleural effusion",
                    p,
                    &["There is a small left pleural effusion."],
                    &["There is no pleural effusion."],
                ),
                finding(
                    "pneumothorax",
                    p,
                    &["There is a small right apical pneumothorax."],
                    &["There is no pneumothorax."],
                ),
            ],
            background: vec!["The cardiomediastinal silhouette is normal.".into()],
            background_count: (1, 1),
            negated_rate: 0.3,
            signal_amplitude: 4.0,
            noise_std: 1.0,
            signature_seed: 7,
            seed,
            id_prefix: "s".into(),
        }
    }

    /// Paraphrase-rich templates; used for mining NLI pairs.
    pub fn varied(num_studies: usize, seed: u64) -> Self {
        let mut c = SynthConfig::desk(num_studies, seed);
        let p = 0.35;
        c.findings = vec![
            finding(
                "atelectasis",
                p,
                &[
                    "There is {mild|minimal|moderate} bibasilar atelectasis.",
                    "{Mild|Minimal} atelectasis is seen at the {left|right} lung base.",
                    "There is {mild|minimal} {left|right} basilar atelectasis.",
                    "There is {mild|minimal|subsegmental} atelectasis at the {left|right} lung base.",
                ],
                &[
                    "There is no atelectasis.",
                    "No atelectasis is seen.",
                    "No atelectasis is seen at the {left|right} lung base.",
                ],
            ),
            finding(
                "cardiomegaly",
                p,
                &[
                    "The heart is {mildly|moderately|severely} enlarged.",
                    "The cardiac silhouette is {mildly|moderately} enlarged.",
                    "The heart appears again mild-to-moderately enlarged.",
                    "There is {mild|moderate} cardiomegaly.",
                    "The heart size is {mildly|moderately} enlarged.",
                ],
                &[
                    "The heart is not enlarged.",
                    "The heart is not {significantly|markedly} enlarged.",
                    "The cardiac silhouette is not enlarged.",
                    "No cardiomegaly.",
                    "There is no cardiomegaly.",
                ],
            ),
            finding(
                "consolidation",
                p,
                &[
                    "There is focal consolidation in the {right|left} {lower|upper} lobe.",
                    "{Patchy|Focal} consolidation is present at the {right|left} lung base.",
                ],
                &[
                    "There is no focal consolidation.",
                    "There is no focal consolidation in the {right|left} {lower|upper} lobe.",
                    "No consolidation is seen.",
                    "The lungs are clear of consolidation.",
                ],
            ),
            finding(
                "edema",
                p,
                &[
                    "There is {mild|moderate} pulmonary edema.",
                    "There is {mild|moderate} interstitial pulmonary edema in both lungs.",
                    "{Mild|Moderate} pulmonary edema is present.",
                    "{Mild|Moderate} pulmonary edema is present in both lungs.",
                ],
                &[
                    "There is no pulmonary edema.",
                    "No pulmonary edema.",
                    "No pulmonary edema is seen in either lung.",
                ],
            ),
            finding(
                "pleural effusion",
                p,
                &[
                    "There is a {small|moderate|large} {left|right|bilateral} pleural effusion.",
                    "There are {small|moderate} bilateral pleural effusions.",
                    "A {small|moderate} {left-sided|right-sided} pleural effusion is present.",
                    "There is a {small|moderate|large} {left|right} pleural effusion at the lung base.",
                ],
                &[
                    "There is no pleural effusion.",
                    "No pleural effusions.",
                    "No {left|right} pleural effusion is seen.",
                    "There is no {left|right} pleural effusion.",
                    "There is no {left-sided|right-sided} pleural effusion at the lung base.",
                ],
            ),
            finding(
                "pneumothorax",
                p,
                &[
                    "There is a small {left|right} apical pneumothorax.",
                    "{Small|Tiny} {left|right} pneumothorax.",
                    "There is a {small|tiny} {left|right} pneumothorax.",
                ],
                &["There is no pneumothorax.", "No pneumothorax.", "There is no {left|right} pneumothorax."],
            ),
        ];
        c.background = vec![
            "The cardiomediastinal silhouette is {normal|unremarkable|stable|unchanged}.".into(),
            "{Normal|Unremarkable|Stable|Unchanged} cardiomediastinal silhouette.".into(),
            "The {hilar|mediastinal} contours are {normal|unremarkable|stable|unchanged}.".into(),
            "Heart size is {normal|stable|unchanged}.".into(),
            "The osseous structures are {normal|unremarkable|stable|unchanged}.".into(),
            "The {trachea|aorta} is {normal|unremarkable|stable|unchanged}.".into(),
        ];
        c.background_count = (1, 3);
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.findings.is_empty() {
            return Err(Error::Config("synthetic finding inventory is empty".into()));
        }
        if self.k == 0 || self.grid.is_empty() {
            return Err(Error::Config("synthetic images need K ≥ 1 and a non-empty grid".into()));
        }
        let (lo, hi) = self.background_count;
        if lo > hi || hi > self.background.len() {
            return Err(Error::Config(format!(
                "background count range ({lo}, {hi}) incompatible with {} templates",
                self.background.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.negated_rate) {
            return Err(Error::Config("negated rate must lie in [0, 1]".into()));
        }
        if !(self.noise_std >= 0.0 && self.signal_amplitude.is_finite()) {
            return Err(Error::Config("noise and amplitude must be finite, noise ≥ 0".into()));
        }
        for f in &self.findings {
            if f.positive.is_empty() || f.negated.is_empty() {
                return Err(Error::Config(format!("finding {:?} needs positive and negated templates", f.name)));
            }
            if !(0.0..=1.0).contains(&f.prevalence) {
                return Err(Error::Config(format!("prevalence of {:?} outside [0, 1]", f.name)));
            }
            for t in f.positive.iter().chain(&f.negated) {
                parse_template(t).map_err(Error::Config)?;
            }
        }
        for t in &self.background {
            parse_template(t).map_err(Error::Config)?;
        }
        Ok(())
    }

    /// Unit signature vectors, one per finding, pairwise distinct.
    pub fn signatures(&self) -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.signature_seed);
        let d = self.grid.dim;
        let mut out: Vec<Vec<f64>> = Vec::new();
        for f in &self.findings {
            let mut v = match &f.signature {
                Some(v) if v.len() != d => {
                    return Err(Error::Config(format!("signature of {:?} has dimension {}, grid has {d}", f.name, v.len())))
                }
                Some(v) => v.clone(),
                None => (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
            };
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Config(format!("signature of {:?} is zero", f.name)));
            }
            v.iter_mut().for_each(|x| *x /= norm);
            for (g, prev) in self.findings.iter().zip(&out) {
                let cos: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                if cos > 1.0 - 1e-9 {
                    return Err(Error::Config(format!("findings {:?} and {:?} share a signature", g.name, f.name)));
                }
            }
            out.push(v);
        }
        Ok(out)
    }
}

/// Reference text for a study with nothing to report.
pub const EMPTY_REPORT: &str = "No acute cardiopulmonary process.";

type Template = Vec<Vec<String>>;

/// Splits a template into literal and alternative segments.
fn parse_template(t: &str) -> std::result::Result<Template, String> {
    let mut parts = Vec::new();
    let mut rest = t;
    while let Some(open) = rest.find('{') {
        parts.push(vec![rest[..open].to_string()]);
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| format!("unclosed brace in template {t:?}"))?
            + open;
        parts.push(rest[open + 1..close].split('|').map(str::to_string).collect());
        rest = &rest[close + 1..];
    }
    if rest.contains('}') {
        return Err(format!("unbalanced brace in template {t:?}"));
    }
    parts.push(vec![rest.to_string()]);
    Ok(parts)
}

/// Fills every `{a|b|…}` slot with a uniformly chosen alternative.
pub fn expand_template<R: Rng + ?Sized>(template: &str, rng: &mut R) -> Result<String> {
    let parts = parse_template(template).map_err(Error::Config)?;
    Ok(parts
        .iter()
        .map(|alts| {
            if alts.len() == 1 {
                alts[0].as_str()
            } else {
                alts[rng.gen_range(0..alts.len())].as_str()
            }
        })
        .collect())
}

fn pick<'a, R: Rng + ?Sized>(templates: &'a [String], rng: &mut R) -> &'a str {
    &templates[rng.gen_range(0..templates.len())]
}

pub fn synth_generate(config: &SynthConfig) -> Result<StudySet> {
    synth_generate_with_labels(config).map(|(set, _)| set)
}

/// Generates the study set together with the findings planted per study.
pub fn synth_generate_with_labels(config: &SynthConfig) -> Result<(StudySet, Vec<Planted>)> {
    config.validate()?;
    let signatures = config.signatures()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let g = config.grid;
    let mut studies = Vec::with_capacity(config.num_studies);
    let mut labels = Vec::with_capacity(config.num_studies);
    for i in 0..config.num_studies {
        let mut images: Vec<Grid> = (0..config.k)
            .map(|_| Grid {
                shape: g,
                data: (0..g.len())
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * config.noise_std)
                    .collect(),
            })
            .collect();
        let mut planted = Planted::default();
        let mut positive = vec![false; config.findings.len()];
        for (f, spec) in config.findings.iter().enumerate() {
            if rng.gen::<f64>() < spec.prevalence {
                positive[f] = true;
                let img = rng.gen_range(0..config.k);
                let (r, c) = (rng.gen_range(0..g.rows), rng.gen_range(0..g.cols));
                for (x, s) in images[img].cell_mut(r, c).iter_mut().zip(&signatures[f]) {
                    *x += config.signal_amplitude * s;
                }
            }
        }
        let mut sentences = Vec::new();
        let (lo, hi) = config.background_count;
        let n_bg = rng.gen_range(lo..=hi);
        let mut chosen = sample(&mut rng, config.background.len(), n_bg).into_vec();
        chosen.sort_unstable();
        for b in chosen {
            sentences.push(expand_template(&config.background[b], &mut rng)?);
        }
        for (f, spec) in config.findings.iter().enumerate() {
            if positive[f] {
                sentences.push(expand_template(pick(&spec.positive, &mut rng), &mut rng)?);
                planted.positives.push(spec.name.clone());
            }
        }
        for (f, spec) in config.findings.iter().enumerate() {
            if !positive[f] && rng.gen::<f64>() < config.negated_rate {
                sentences.push(expand_template(pick(&spec.negated, &mut rng), &mut rng)?);
                planted.negated.push(spec.name.clone());
            }
        }
        if sentences.is_empty() {
            sentences.push(EMPTY_REPORT.to_string());
        }
        studies.push(Study {
            id: format!("{}{:05}", config.id_prefix, i),
            images,
            reference: sentences.join(" "),
        });
        labels.push(planted);
    }
    Ok((StudySet::new(studies, g, config.k), labels))
}
