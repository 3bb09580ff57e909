use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use repaug::augment::{augment, AugmentationSpec};
use repaug::config::RESOLVED_CONFIG_FILE;
use repaug::eval::{mrr_from_ranks, norm_report, retrieve};
use repaug::io::{atomic_write, read_embedding_cache, write_embedding_cache, Payload};
use repaug::milab::{verify_theorem1, verify_theorem2, BoundReport};
use repaug::synth::{generate, SynthConfig};
use repaug::train::STATE_FILE;
use repaug::{
    eval, rng, BoundConfig, Corpus, EncoderModel, Error, Featurizer, GaussianPairSource, PairData, RunConfig,
    Split, Tensor, Trainer,
};
use serde::Serialize;

use crate::{BoundArgs, EvalArgs, Failure, InspectArgs, SynthArgs, TrainArgs};

type Outcome = Result<(), Failure>;

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

pub fn synth(a: SynthArgs) -> Outcome {
    let corpus = generate(&SynthConfig {
        pairs: a.pairs,
        vocab: a.vocab,
        noise: a.noise,
        seed: a.seed,
        ..SynthConfig::default()
    })?;
    corpus.save(&a.out)?;
    println!("wrote {} pairs to {}", corpus.len(), a.out.display());
    println!("{}", corpus.stats());
    Ok(())
}

fn resolve_config(a: &TrainArgs) -> Result<RunConfig, Failure> {
    if a.resume {
        let dir = a
            .out
            .as_ref()
            .ok_or_else(|| Failure::Usage("--resume needs --out pointing at an earlier run".into()))?;
        return Ok(RunConfig::load(&dir.join(RESOLVED_CONFIG_FILE))?);
    }
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &a.corpus {
        cfg.data.corpus = v.clone();
    }
    if let Some(v) = &a.out {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if a.no_aug {
        cfg.train.aug_enabled = false;
    }
    if let Some(v) = a.aug_copies {
        cfg.train.aug_copies = v;
    }
    if let Some(v) = &a.aug_methods {
        cfg.augment.menu = v.clone();
    }
    if let Some(v) = a.loss {
        cfg.loss.kind = v;
    }
    if a.normalize_output {
        cfg.model.normalize_output = true;
    }
    Ok(cfg)
}

fn split_data(corpus: &Corpus, split: Split, f: &Featurizer) -> Result<Option<PairData>, Error> {
    let records = corpus.split(split);
    if records.is_empty() {
        return Ok(None);
    }
    PairData::from_records(&records, f).map(Some)
}

/// Input width implied by a vector corpus, if it is one.
fn vector_dim(corpus: &Corpus) -> Option<usize> {
    corpus.records.first().and_then(|r| match &r.payload {
        Payload::Vectors { qvec, .. } => Some(qvec.len()),
        Payload::Text { .. } => None,
    })
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct TrainSummary {
    epochs: usize,
    aug: String,
    best_epoch: Option<usize>,
    best_valid_mrr: Option<f64>,
    final_test_mrr: Option<f64>,
    best_test_mrr: Option<f64>,
}

pub fn train(a: TrainArgs) -> Outcome {
    let mut cfg = resolve_config(&a)?;
    let corpus = Corpus::load(&cfg.data.corpus)?;
    if let Some(dim) = vector_dim(&corpus) {
        cfg.data.hash_dim = dim;
    }
    cfg.validate()?;
    let f = Featurizer::new(cfg.data.hash_dim);
    let train_data = split_data(&corpus, Split::Train, &f)?
        .ok_or_else(|| Error::Config(format!("{} has no training records", cfg.data.corpus.display())))?;
    let valid = split_data(&corpus, Split::Valid, &f)?.map(|d| d.eval_set()).transpose()?;
    let test = split_data(&corpus, Split::Test, &f)?.map(|d| d.eval_set()).transpose()?;

    let out = cfg.out_dir.clone();
    let mut trainer = if a.resume && out.join(STATE_FILE).exists() {
        Trainer::load(&out)?
    } else {
        cfg.save_resolved()?;
        let model = EncoderModel::new(cfg.encoder_config(), cfg.seed)?;
        Trainer::new(model, cfg.train_config(), cfg.loss_config())?
    };
    while !trainer.done() {
        let m = trainer.run_epoch(&train_data, valid.as_ref())?;
        trainer.save(&out)?;
        let mut line = format!("epoch {:>3}  loss {:.5}", m.epoch, m.loss);
        if let (Some(mrr), Some(std)) = (m.mrr, m.norm_std) {
            let _ = write!(line, "  valid mrr {mrr:.4}  norm std {std:.4}");
        }
        println!("{line}");
    }

    let test_mrr = |model: &EncoderModel| -> Result<Option<f64>, Error> {
        test.as_ref().map(|set| eval::mrr(set, model)).transpose()
    };
    let secs = &trainer.epoch_seconds;
    let summary = TrainSummary {
        epochs: trainer.state.epochs_done,
        aug: trainer.state.config.aug_label(),
        best_epoch: trainer.state.best_epoch,
        best_valid_mrr: trainer.state.best_mrr,
        final_test_mrr: test_mrr(&trainer.model)?,
        best_test_mrr: trainer.best_model.as_ref().map(&test_mrr).transpose()?.flatten(),
    };
    // Timings stay out of the artifacts so reruns are byte-identical.
    write_json(&out.join("summary.json"), &summary)?;
    if !secs.is_empty() {
        println!("mean epoch time {:.2} s", secs.iter().sum::<f64>() / secs.len() as f64);
    }
    if let Some(v) = summary.final_test_mrr {
        println!("test mrr (final model) {v:.4}");
    }
    if let (Some(v), Some(e)) = (summary.best_test_mrr, summary.best_epoch) {
        println!("test mrr (best valid, epoch {e}) {v:.4}");
    }
    Ok(())
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct EvalReport {
    checkpoint: PathBuf,
    corpus: PathBuf,
    split: Split,
    queries: usize,
    mrr: f64,
    k: Option<usize>,
    mrr_at_k: Option<f64>,
    norm_mean: f64,
    norm_std: f64,
    kde_bandwidth: f64,
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn eval(a: EvalArgs) -> Outcome {
    if a.k == Some(0) {
        return Err(Failure::Usage("--k must be at least 1".into()));
    }
    let model = EncoderModel::load(&a.checkpoint)?;
    let corpus = Corpus::load(&a.corpus)?;
    let f = Featurizer::new(model.config().input_dim());
    let data = split_data(&corpus, a.split, &f)?
        .ok_or_else(|| Error::Config(format!("{} has no {:?} records", a.corpus.display(), a.split)))?;
    if data.input_dim() != model.config().input_dim() {
        return Err(Error::Config(format!(
            "corpus vectors have width {}, checkpoint expects {}",
            data.input_dim(),
            model.config().input_dim()
        ))
        .into());
    }
    let set = data.eval_set()?;
    let r = retrieve(&set, &model)?;
    let norms = norm_report(&r.code_embeddings)?;
    let report = EvalReport {
        checkpoint: a.checkpoint.clone(),
        corpus: a.corpus.clone(),
        split: a.split,
        queries: r.ranks.len(),
        mrr: mrr_from_ranks(&r.ranks, None)?,
        k: a.k,
        mrr_at_k: a.k.map(|k| mrr_from_ranks(&r.ranks, Some(k))).transpose()?,
        norm_mean: norms.mean,
        norm_std: norms.std,
        kde_bandwidth: norms.bandwidth,
    };
    println!("queries {}  mrr {:.4}", report.queries, report.mrr);
    if let (Some(k), Some(v)) = (report.k, report.mrr_at_k) {
        println!("mrr@{k} {v:.4}");
    }
    println!("item norms: mean {:.4}  std {:.4}", report.norm_mean, report.norm_std);
    if let Some(path) = &a.report {
        write_json(path, &report)?;
        let mut kde = String::from("norm,density\n");
        for (x, d) in norms.kde_grid.iter().zip(&norms.kde_density) {
            let _ = writeln!(kde, "{x},{d}");
        }
        atomic_write(&sibling(path, "kde.csv"), kde.as_bytes())?;
        let mut pca = String::from("pc1,pc2,norm\n");
        for ([x, y], n) in norms.pca.iter().zip(&norms.norms) {
            let _ = writeln!(pca, "{x},{y},{n}");
        }
        atomic_write(&sibling(path, "pca.csv"), pca.as_bytes())?;
    }
    if let Some(path) = &a.embeddings {
        write_embedding_cache(path, &r.code_embeddings)?;
    }
    Ok(())
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct BoundSummary {
    dim: usize,
    rho: f64,
    true_mi: f64,
    tolerance: f64,
    reports: Vec<BoundReport>,
    violations: usize,
}

pub fn verify_bounds(a: BoundArgs) -> Outcome {
    if a.seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let source = GaussianPairSource::uniform(a.dim, a.rho)?;
    let mut reports = Vec::new();
    for seed in 0..a.seeds {
        let cfg = BoundConfig {
            batch: a.batch,
            copies: a.copies,
            lambda: a.lambda,
            steps: a.steps,
            eval_batches: a.eval_batches,
            seed,
            loss_shift: a.loss_shift,
            ..BoundConfig::default()
        };
        for r in [verify_theorem1(&source, &cfg)?, verify_theorem2(&source, &cfg)?] {
            let tag = if r.holds(a.tolerance) { "ok" } else { "VIOLATED" };
            println!(
                "seed {seed} theorem {}: loss {:.4}  bound {:.4}  true MI {:.4}  {tag}",
                r.theorem, r.loss, r.bound, r.true_mi
            );
            reports.push(r);
        }
    }
    let violations = reports.iter().filter(|r| !r.holds(a.tolerance)).count();
    let summary = BoundSummary {
        dim: a.dim,
        rho: a.rho,
        true_mi: source.true_mi(),
        tolerance: a.tolerance,
        reports,
        violations,
    };
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_json(&dir.join("bounds.json"), &summary)?;
    }
    if violations > 0 {
        return Err(Failure::Violation(format!(
            "{violations} bound(s) exceed the true MI by more than {}",
            a.tolerance
        )));
    }
    Ok(())
}

fn apply_params(spec: &mut AugmentationSpec, params: &str) -> Result<(), Failure> {
    for item in params.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("parameter `{item}` is not key=value")))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("parameter `{key}` needs a number, got `{value}`")))?;
        match key.trim() {
            "lambda" => {
                spec.lambda_low = v;
                spec.lambda_high = v;
            }
            "lambda_low" => spec.lambda_low = v,
            "lambda_high" => spec.lambda_high = v,
            "p" | "drop_prob" => spec.drop_prob = v,
            "p_b" | "bernoulli_prob" => spec.bernoulli_prob = v,
            "sigma" => spec.sigma = v,
            other => {
                return Err(Failure::Usage(format!(
                    "unknown parameter `{other}` (valid: lambda, lambda_low, lambda_high, p, p_b, sigma)"
                )))
            }
        }
    }
    Ok(())
}

fn read_matrix(path: &Path) -> Result<Tensor, Error> {
    if path.extension().is_some_and(|e| e == "raec") {
        return read_embedding_cache(path, None);
    }
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let rows: Vec<Vec<f64>> =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Tensor::from_rows(&rows)
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct Inspection {
    spec: AugmentationSpec,
    before: Vec<Vec<f64>>,
    after: Vec<Vec<f64>>,
    norm_before: Vec<f64>,
    norm_after: Vec<f64>,
    norm_delta: Vec<f64>,
}

pub fn inspect_aug(a: InspectArgs) -> Outcome {
    let mut spec = AugmentationSpec::for_method(a.method);
    apply_params(&mut spec, &a.params)?;
    spec.validate()?;
    let x = read_matrix(&a.input)?;
    let y = augment(&x, &spec, &mut rng::stream(a.seed, &[rng::label::AUGMENT]))?;
    let (nb, na) = (x.row_norms(), y.row_norms());
    let rows = |t: &Tensor| t.iter_rows().map(<[f64]>::to_vec).collect::<Vec<_>>();
    let out = Inspection {
        spec,
        before: rows(&x),
        after: rows(&y),
        norm_delta: na.iter().zip(&nb).map(|(a, b)| a - b).collect(),
        norm_before: nb,
        norm_after: na,
    };
    match &a.out {
        Some(path) => write_json(path, &out)?,
        None => println!("{}", serde_json::to_string_pretty(&out).map_err(|e| Error::Format(e.to_string()))?),
    }
    Ok(())
}
