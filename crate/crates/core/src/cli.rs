//! Command-line pipeline: synthetic data, NLI pair mining, training,
//! generation, reward scoring and clinical evaluation.
//!
//! Every subcommand resolves a [`RunConfig`] from built-in defaults, an
//! optional JSON file (`--config`, merged key by key) and flags (flags win),
//! and writes the resolved config to `config.json` in its output directory.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cliniceval::{
    correlate_rewards, label_observations, micro_metrics, per_observation_metrics, report_accuracy, MetricReport,
};
use crate::corpus::{load_reports, save_reports, split_dataset, synth_generate, StudySet, SynthConfig, Vocab};
use crate::error::{Error, Result};
use crate::m2trans::{load_checkpoint, DecodeMode};
use crate::nli::{build_backend, NliBackendConfig};
use crate::nlipairs::{corpus_sentences, generate_training_pairs, write_pairs_jsonl, PairGenConfig, Rule, Shortfall};
use crate::rewards::{ReportReward, RewardKind, RewardScorer};
use crate::simscore::EmbeddingProvider;
use crate::textproc::{analyze_report, Lexicon};
use crate::trainer::{generate_reports, run_training, write_report_jsonl, Phase, Rewards, TrainConfig, TrainRun};

/// Everything a pipeline run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    /// Lexicon JSON; the bundled lexicon when unset.
    pub lexicon: Option<PathBuf>,
    /// Word-vector text file; hashed n-gram embeddings when unset.
    pub vectors: Option<PathBuf>,
    pub embedding_dim: usize,
    pub shared_weight: f64,
    pub synth: SynthConfig,
    /// Train, validation and test fractions.
    pub split: (f64, f64, f64),
    pub train: TrainConfig,
    pub finetune: TrainConfig,
    pub pairs: PairGenConfig,
    pub nli: NliBackendConfig,
    pub decode: DecodeMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            lexicon: None,
            vectors: None,
            embedding_dim: 256,
            shared_weight: 0.2,
            synth: SynthConfig::desk(700, 0),
            split: (5.0 / 7.0, 1.0 / 7.0, 1.0 / 7.0),
            train: TrainConfig::desk_nll(20, 0),
            finetune: TrainConfig::desk_joint(3, 0),
            pairs: PairGenConfig::default(),
            nli: NliBackendConfig::default(),
            decode: DecodeMode::Beam { width: 4 },
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

impl RunConfig {
    /// Defaults overlaid with the JSON object at `path`, key by key.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        let mut base = serde_json::to_value(RunConfig::default())?;
        merge(&mut base, patch);
        serde_json::from_value(base).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Sets the run seed and every component seed derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.train.seed = seed;
        self.finetune.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.finetune.validate()?;
        self.nli.validate()?;
        for p in self.lexicon.iter().chain(&self.vectors) {
            if !p.exists() {
                return Err(Error::Validation(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    pub fn lexicon(&self) -> Result<Lexicon> {
        self.lexicon.as_deref().map_or_else(|| Ok(Lexicon::builtin()), Lexicon::load)
    }

    pub fn provider(&self) -> Result<EmbeddingProvider> {
        match &self.vectors {
            Some(p) => EmbeddingProvider::load_wordvec(p),
            None => Ok(EmbeddingProvider::hashed(self.embedding_dim, self.shared_weight)),
        }
    }

    /// A scorer for `kind` with this run's lexicon, embeddings and NLI backend.
    pub fn scorer(&self, kind: RewardKind) -> Result<RewardScorer> {
        let lexicon = self.lexicon()?;
        let provider = self.provider()?;
        let nli = build_backend(&self.nli, &lexicon, &provider)?;
        Ok(RewardScorer::new(kind, lexicon, provider, nli))
    }
}

#[derive(Parser, Debug)]
#[command(name = "factharness", version, about = "Factual rewards and report generation on synthetic studies")]
pub struct Cli {
    /// JSON run configuration merged over the defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic study set and its train/val/test split.
    Synth(SynthArgs),
    /// Mine weakly labeled NLI pairs from a corpus.
    NliPairs(NliPairsArgs),
    /// Train a model on the NLL loss.
    Train(TrainArgs),
    /// Fine-tune a checkpoint on the joint NLL and reward loss.
    Finetune(FinetuneArgs),
    /// Decode reports for one split.
    Generate(GenerateArgs),
    /// Score generated reports against references.
    Reward(RewardArgs),
    /// Clinical metrics of generated reports.
    Evaluate(PairArgs),
    /// Spearman correlation of per-report metrics with clinical accuracy.
    Correlate(CorrelateArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub num_studies: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct NliPairsArgs {
    /// Study file (JSON Lines) whose sentences are paired.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Multiplies every configured quota.
    #[arg(long)]
    pub quota_scale: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
pub struct TrainArgs {
    /// Directory holding train.jsonl and val.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Initial checkpoint; its directory must hold vocab.json.
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Checkpoint; its directory must hold vocab.json.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct RewardArgs {
    #[arg(long)]
    pub gen: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// One of bertscore, fact_ent, fact_entnli.
    #[arg(long)]
    pub metric: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct PairArgs {
    #[arg(long)]
    pub gen: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct CorrelateArgs {
    #[arg(long)]
    pub gen: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// JSON object of extra per-report metric columns, aligned with the
    /// reference order.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code: 0 on success, 2 on usage errors, 1 on any other error.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Resolves the configuration and runs the parsed command.
pub fn execute(cli: &Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    match &cli.command {
        Command::Synth(a) => {
            if let Some(n) = a.num_studies {
                config.synth.num_studies = n;
            }
        }
        Command::Train(a) => {
            if let Some(e) = a.epochs {
                config.train.epochs = e;
            }
        }
        Command::Finetune(a) => {
            if let Some(e) = a.epochs {
                config.finetune.epochs = e;
            }
        }
        Command::NliPairs(a) => {
            if let Some(f) = a.quota_scale {
                if !(f.is_finite() && f >= 0.0) {
                    return Err(Error::Validation(format!("quota scale {f} must be non-negative")));
                }
                for q in config.pairs.quotas.0.values_mut() {
                    *q = (*q as f64 * f).round() as usize;
                }
            }
        }
        _ => {}
    }
    config.validate()?;
    let out = out_dir(&cli.command);
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(
        &out.join("config.json"),
        &serde_json::json!({ "invocation": &cli.command, "config": &config }),
    )?;
    match &cli.command {
        Command::Synth(a) => synth(&config, a),
        Command::NliPairs(a) => nli_pairs(&config, a),
        Command::Train(a) => train(&config, &a.data, None, &a.out),
        Command::Finetune(a) => train(&config, &a.data, Some(&a.init), &a.out),
        Command::Generate(a) => generate(&config, a),
        Command::Reward(a) => reward(&config, a),
        Command::Evaluate(a) => evaluate(&config, a),
        Command::Correlate(a) => correlate(&config, a),
    }
}

fn out_dir(command: &Command) -> &Path {
    match command {
        Command::Synth(a) => &a.out,
        Command::NliPairs(a) => &a.out,
        Command::Train(a) => &a.out,
        Command::Finetune(a) => &a.out,
        Command::Generate(a) => &a.out,
        Command::Reward(a) => &a.out,
        Command::Evaluate(a) => &a.out,
        Command::Correlate(a) => &a.out,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in rows {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

fn synth(config: &RunConfig, a: &SynthArgs) -> Result<()> {
    let set = synth_generate(&config.synth)?;
    let (train, val, test) = split_dataset(&set, config.split, config.seed)?;
    save_reports(&set, &a.out.join("studies.jsonl"))?;
    for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
        save_reports(part, &a.out.join(format!("{name}.jsonl")))?;
    }
    log::info!("wrote {} studies ({} / {} / {})", set.len(), train.len(), val.len(), test.len());
    Ok(())
}

#[derive(Serialize)]
struct PairSummary {
    sentences: usize,
    examined: usize,
    counts: BTreeMap<Rule, usize>,
    shortfalls: Vec<Shortfall>,
}

fn nli_pairs(config: &RunConfig, a: &NliPairsArgs) -> Result<()> {
    let set = load_reports(&a.corpus, config.synth.grid, config.synth.k)?;
    let sentences = corpus_sentences(&set);
    let lexicon = config.lexicon()?;
    let provider = config.provider()?;
    let g = generate_training_pairs(&sentences, &config.pairs, &lexicon, &provider, config.seed)?;
    write_pairs_jsonl(&g.pairs, &a.out.join("pairs.jsonl"))?;
    write_json(
        &a.out.join("summary.json"),
        &PairSummary {
            sentences: sentences.len(),
            examined: g.examined,
            counts: Rule::ALL.iter().map(|&r| (r, g.count(r))).collect(),
            shortfalls: g.shortfalls.clone(),
        },
    )
}

fn vocab_beside(checkpoint: &Path) -> Result<Vocab> {
    let path = checkpoint.with_file_name("vocab.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads `<data>/<split>.jsonl` under `vocab`.
fn load_split(config: &RunConfig, data: &Path, split: &str, vocab: &Vocab) -> Result<StudySet> {
    let set = load_reports(&data.join(format!("{split}.jsonl")), config.synth.grid, config.synth.k)?;
    Ok(StudySet {
        vocab: vocab.clone(),
        ..set
    })
}

fn train(config: &RunConfig, data: &Path, init: Option<&Path>, out: &Path) -> Result<()> {
    let (phase, tc, params, vocab) = match init {
        None => {
            let train = load_reports(&data.join("train.jsonl"), config.synth.grid, config.synth.k)?;
            (Phase::Nll, &config.train, None, train.vocab)
        }
        Some(ckpt) => (Phase::Joint, &config.finetune, Some(load_checkpoint(ckpt)?), vocab_beside(ckpt)?),
    };
    let train = load_split(config, data, "train", &vocab)?;
    let val = load_split(config, data, "val", &vocab)?;
    let lexicon = config.lexicon()?;
    let nlg = config.scorer(tc.nlg_reward)?;
    let fact = tc.fact_reward.map(|k| config.scorer(k)).transpose()?;
    let run = TrainRun {
        train: &train,
        val: &val,
        rewards: Rewards {
            nlg: Some(&nlg),
            fact: fact.as_ref().map(|f| f as &dyn ReportReward),
        },
        lexicon: &lexicon,
        checkpoint_dir: Some(out),
    };
    let report = run_training(&run, phase, tc, params)?;
    write_json(&out.join("vocab.json"), &vocab)?;
    write_report_jsonl(&report.records, &out.join("report.jsonl"))?;
    log::info!("best epoch {:?} after {} steps", report.best_epoch, report.steps);
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TextRecord {
    id: String,
    findings: String,
}

fn generate(config: &RunConfig, a: &GenerateArgs) -> Result<()> {
    let vocab = vocab_beside(&a.checkpoint)?;
    let params = load_checkpoint(&a.checkpoint)?;
    let set = load_split(config, &a.data, &a.split, &vocab)?;
    let texts = generate_reports(&params, &set, config.decode)?;
    let rows: Vec<TextRecord> = set
        .studies
        .iter()
        .zip(texts)
        .map(|(s, findings)| TextRecord {
            id: s.id.clone(),
            findings,
        })
        .collect();
    write_jsonl(&a.out.join("generated.jsonl"), &rows)
}

/// Reads `{id, findings}` records; other fields are ignored.
pub fn read_texts(path: &Path) -> Result<Vec<(String, String)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TextRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((r.id, r.findings));
    }
    Ok(out)
}

/// Generated texts aligned to the reference order by id.
fn aligned(gen: &Path, reference: &Path) -> Result<(Vec<String>, Vec<String>, Vec<String>)> {
    let gen: HashMap<String, String> = read_texts(gen)?.into_iter().collect();
    let refs = read_texts(reference)?;
    if refs.is_empty() {
        return Err(Error::Validation(format!("{} holds no reports", reference.display())));
    }
    let mut ids = Vec::new();
    let mut g = Vec::new();
    let mut r = Vec::new();
    for (id, text) in refs {
        let generated = gen
            .get(&id)
            .ok_or_else(|| Error::Validation(format!("no generated report for {id}")))?;
        g.push(generated.clone());
        r.push(text);
        ids.push(id);
    }
    Ok((ids, g, r))
}

#[derive(Serialize)]
struct Score<'a> {
    id: &'a str,
    score: f64,
}

fn reward(config: &RunConfig, a: &RewardArgs) -> Result<()> {
    let kind: RewardKind = a.metric.parse()?;
    let scorer = config.scorer(kind)?;
    let (ids, gen, refs) = aligned(&a.gen, &a.reference)?;
    let scores = gen
        .iter()
        .zip(&refs)
        .map(|(g, r)| scorer.score(g, r))
        .collect::<Result<Vec<f64>>>()?;
    let rows: Vec<Score<'_>> = ids.iter().zip(&scores).map(|(id, &score)| Score { id, score }).collect();
    write_jsonl(&a.out.join("scores.jsonl"), &rows)?;
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    write_json(
        &a.out.join("summary.json"),
        &serde_json::json!({ "metric": kind.as_str(), "reports": scores.len(), "mean": mean }),
    )?;
    println!("{} mean {mean:.6} over {} reports", kind.as_str(), scores.len());
    Ok(())
}

fn clinical_report(lexicon: &Lexicon, gen: &[String], refs: &[String]) -> Result<(MetricReport, Vec<f64>)> {
    let label = |t: &String| label_observations(&analyze_report(t, lexicon), lexicon);
    let p: Vec<_> = gen.iter().map(label).collect();
    let r: Vec<_> = refs.iter().map(label).collect();
    let accuracy = p.iter().zip(&r).map(|(a, b)| report_accuracy(a, b)).collect();
    let report = MetricReport {
        per_observation: per_observation_metrics(&p, &r)?,
        micro: micro_metrics(&p, &r)?,
        correlations: BTreeMap::new(),
    };
    Ok((report, accuracy))
}

fn evaluate(config: &RunConfig, a: &PairArgs) -> Result<()> {
    let (_, gen, refs) = aligned(&a.gen, &a.reference)?;
    let (report, _) = clinical_report(&config.lexicon()?, &gen, &refs)?;
    write_json(&a.out.join("metrics.json"), &report)?;
    println!(
        "micro precision {:.4} recall {:.4} f1 {:.4} accuracy {:.4}",
        report.micro.precision, report.micro.recall, report.micro.f1, report.micro.accuracy
    );
    Ok(())
}

fn correlate(config: &RunConfig, a: &CorrelateArgs) -> Result<()> {
    let (ids, gen, refs) = aligned(&a.gen, &a.reference)?;
    let (mut report, accuracy) = clinical_report(&config.lexicon()?, &gen, &refs)?;
    let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for kind in [RewardKind::Bertscore, RewardKind::FactEnt, RewardKind::FactEntnli] {
        let scorer = config.scorer(kind)?;
        let values = gen
            .iter()
            .zip(&refs)
            .map(|(g, r)| scorer.score(g, r))
            .collect::<Result<Vec<f64>>>()?;
        columns.insert(kind.as_str().to_string(), values);
    }
    if let Some(path) = &a.metrics {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let extra: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text)?;
        for (name, values) in extra {
            if values.len() != ids.len() {
                return Err(Error::Validation(format!(
                    "metric {name} has {} values for {} reports",
                    values.len(),
                    ids.len()
                )));
            }
            columns.insert(name, values);
        }
    }
    report.correlations = correlate_rewards(&columns, &accuracy)?;
    let rows: Vec<Value> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let mut row = serde_json::Map::new();
            row.insert("id".into(), Value::from(id.as_str()));
            row.insert("clinical_accuracy".into(), Value::from(accuracy[i]));
            for (name, values) in &columns {
                row.insert(name.clone(), Value::from(values[i]));
            }
            Value::Object(row)
        })
        .collect();
    write_jsonl(&a.out.join("per_report.jsonl"), &rows)?;
    write_json(&a.out.join("correlation.json"), &report)?;
    for (name, rho) in &report.correlations {
        println!("{name}\t{rho:.4}");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_texts(path: &Path, rows: &[(&str, &str)]) {
        let rows: Vec<TextRecord> = rows
            .iter()
            .map(|(id, t)| TextRecord {
                id: id.to_string(),
                findings: t.to_string(),
            })
            .collect();
        write_jsonl(path, &rows).unwrap();
    }

    fn run(args: &[&str]) -> i32 {
        run_cli(std::iter::once("factharness").chain(args.iter().copied()))
    }

    #[test]
    fn usage_errors_exit_with_two() {
        assert_eq!(run(&["frobnicate"]), 2);
        assert_eq!(run(&["reward", "--bogus"]), 2);
        assert_eq!(run(&[]), 2);
        assert_eq!(run(&["--help"]), 0);
    }

    #[test]
    fn validation_errors_exit_with_one() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let missing = dir.path().join("missing.jsonl");
        let code = run(&[
            "reward",
            "--gen",
            missing.to_str().unwrap(),
            "--ref",
            missing.to_str().unwrap(),
            "--metric",
            "fact_ent",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 1);
        let refs = dir.path().join("r.jsonl");
        write_texts(&refs, &[("a", "There is no pleural effusion.")]);
        let code = run(&[
            "reward",
            "--gen",
            refs.to_str().unwrap(),
            "--ref",
            refs.to_str().unwrap(),
            "--metric",
            "rouge",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 1);
    }

    #[test]
    fn identical_reports_score_one() {
        let dir = tempfile::tempdir().unwrap();
        let refs = dir.path().join("r.jsonl");
        write_texts(
            &refs,
            &[
                ("a", "There is a small left pleural effusion. The heart is not enlarged."),
                ("b", "There is mild pulmonary edema."),
                ("c", "No acute cardiopulmonary process."),
            ],
        );
        for metric in ["fact_ent", "fact_entnli", "bertscore"] {
            let out = dir.path().join(metric);
            let code = run(&[
                "reward",
                "--gen",
                refs.to_str().unwrap(),
                "--ref",
                refs.to_str().unwrap(),
                "--metric",
                metric,
                "--out",
                out.to_str().unwrap(),
            ]);
            assert_eq!(code, 0);
            let scores = std::fs::read_to_string(out.join("scores.jsonl")).unwrap();
            for line in scores.lines() {
                let v: Value = serde_json::from_str(line).unwrap();
                assert!((v["score"].as_f64().unwrap() - 1.0).abs() < 1e-9, "{metric}: {line}");
            }
            let summary: Value =
                serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
            assert!((summary["mean"].as_f64().unwrap() - 1.0).abs() < 1e-9);
            assert!(out.join("config.json").exists());
        }
    }

    #[test]
    fn correlate_reports_rho_one_for_a_copy_of_accuracy() {
        let dir = tempfile::tempdir().unwrap();
        let refs = dir.path().join("r.jsonl");
        let gen = dir.path().join("g.jsonl");
        write_texts(
            &refs,
            &[
                ("a", "There is mild pulmonary edema. There is a small left pleural effusion."),
                ("b", "The cardiac silhouette is enlarged."),
                ("c", "There is no pneumothorax."),
                ("d", "There is mild bibasilar atelectasis."),
            ],
        );
        write_texts(
            &gen,
            &[
                ("a", "There is mild pulmonary edema. There is a small left pleural effusion."),
                ("b", "There is mild pulmonary edema."),
                ("c", "There is no pneumothorax. The cardiac silhouette is enlarged."),
                ("d", "There is mild pulmonary edema. There is a small left pleural effusion."),
            ],
        );
        let out = dir.path().join("out");
        // accuracy per report is 1, 0.6, 0.8, 0.4
        let metrics = dir.path().join("m.json");
        std::fs::write(&metrics, r#"{"copy": [1.0, 0.6, 0.8, 0.4], "reversed": [0.0, 0.4, 0.2, 0.6]}"#).unwrap();
        let code = run(&[
            "correlate",
            "--gen",
            gen.to_str().unwrap(),
            "--ref",
            refs.to_str().unwrap(),
            "--metrics",
            metrics.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let report: Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("correlation.json")).unwrap()).unwrap();
        assert!((report["correlations"]["copy"].as_f64().unwrap() - 1.0).abs() < 1e-12);
        assert!((report["correlations"]["reversed"].as_f64().unwrap() + 1.0).abs() < 1e-12);
        for key in ["bertscore", "fact_ent", "fact_entnli"] {
            assert!(report["correlations"][key].is_number(), "{key}");
        }
    }

    #[test]
    fn config_file_merges_and_seed_flag_wins() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"seed": 5, "synth": {"num_studies": 12}, "train": {"epochs": 2}}"#).unwrap();
        let c = RunConfig::load(&cfg).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.synth.num_studies, 12);
        assert_eq!(c.synth.k, RunConfig::default().synth.k);
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.batch_size, 8);
        let out = dir.path().join("synth");
        let code = run(&[
            "synth",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "9",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        let echoed: Value = serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
        assert_eq!(echoed["config"]["seed"], 9);
        assert_eq!(echoed["config"]["synth"]["seed"], 9);
        assert_eq!(echoed["config"]["synth"]["num_studies"], 12);
        assert_eq!(echoed["invocation"]["command"], "synth");
        let all = read_texts(&out.join("studies.jsonl")).unwrap();
        assert_eq!(all.len(), 12);
        let parts: usize = ["train", "val", "test"]
            .iter()
            .map(|s| read_texts(&out.join(format!("{s}.jsonl"))).unwrap().len())
            .sum();
        assert_eq!(parts, 12);

        std::fs::write(&cfg, r#"{"train": {"clip_norm": 0}}"#).unwrap();
        let code = run(&["synth", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code, 1);
    }
}
