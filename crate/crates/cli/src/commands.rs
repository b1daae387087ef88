use std::path::{Path, PathBuf};

use fiona_core::dataio::{
    pair, read_femb, stratified_split, synth_generate_split, write_femb, EmbeddingDataset, PairedDataset,
};
use fiona_core::metrics::{self, read_scores, write_scores, ScoreSet};
use fiona_core::models::{read_checkpoint, write_checkpoint, Architecture, ModelGraph};
use fiona_core::objective::Batch;
use fiona_core::rng::{self, Stream};
use fiona_core::train::{evaluate_with_ids, train, TrainReport};
use fiona_core::{Error, Result};

use crate::config::RunConfig;

pub fn format_eer(eer: f64) -> String {
    format!("EER: {:.2}%", 100.0 * eer)
}

/// One modality, or two joined on utterance id.
pub enum Data {
    Single(EmbeddingDataset),
    Paired(PairedDataset),
}

impl Data {
    pub fn dims(&self) -> Vec<usize> {
        match self {
            Data::Single(d) => vec![d.dim()],
            Data::Paired(p) => vec![p.dims().0, p.dims().1],
        }
    }

    pub fn ids(&self) -> &[String] {
        match self {
            Data::Single(d) => d.ids(),
            Data::Paired(p) => p.ids(),
        }
    }

    pub fn to_batch(&self) -> Result<Batch> {
        match self {
            Data::Single(d) => d.to_batch(),
            Data::Paired(p) => p.to_batch(),
        }
    }

    fn split(&self, fraction: f64, seed: u64) -> Result<(Data, Data)> {
        Ok(match self {
            Data::Single(d) => {
                let (kept, held) = stratified_split(d, fraction, seed)?;
                (Data::Single(kept), Data::Single(held))
            }
            Data::Paired(p) => {
                let (kept, held) = stratified_split(p, fraction, seed)?;
                (Data::Paired(kept), Data::Paired(held))
            }
        })
    }
}

pub fn load_pair(a: &Path, b: &Path) -> Result<Data> {
    Ok(Data::Paired(pair(&read_femb(a)?, &read_femb(b)?)?))
}

pub struct Fitted {
    pub model: ModelGraph,
    pub report: TrainReport,
    pub scores: ScoreSet,
}

/// Carves the validation slice, trains from a seeded initialisation and
/// scores `eval`.
pub fn fit(cfg: &RunConfig, arch: Architecture, train_data: &Data, eval_data: &Data) -> Result<Fitted> {
    let dims = train_data.dims();
    if eval_data.dims() != dims {
        return Err(Error::Data(format!(
            "eval embedding widths {:?} differ from training widths {dims:?}",
            eval_data.dims()
        )));
    }
    let model_cfg = cfg.model_config(arch, &dims);
    model_cfg.validate().map_err(|e| match e {
        Error::DegenerateInput { detail, .. } => Error::Data(format!("{arch}: {detail}")),
        e => e,
    })?;
    let train_cfg = cfg.train_config();
    train_cfg.validate(arch)?;
    let (kept, held) = train_data.split(cfg.val_fraction()?, cfg.seed())?;
    let mut model = ModelGraph::new(model_cfg, &mut rng::stream(cfg.seed(), Stream::Init))?;
    let report = train(&mut model, &kept.to_batch()?, &held.to_batch()?, &train_cfg)?;
    let scores = evaluate_with_ids(&model, &eval_data.to_batch()?, eval_data.ids())?;
    Ok(Fitted { model, report, scores })
}

fn create_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn write_run(out: &Path, cfg: &RunConfig, fitted: &Fitted) -> Result<()> {
    create_dir(out)?;
    write_checkpoint(&fitted.model, &out.join("model.fmdl"))?;
    let report = out.join("report.json");
    std::fs::write(&report, fitted.report.to_json()).map_err(|e| Error::io(&report, e))?;
    write_scores(&fitted.scores, &out.join("scores.txt"))?;
    cfg.with_training_defaults().write(&out.join("config.toml"))
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::Config(format!("{flag} is required (flag or config file)")))
}

fn report_eer(fitted: &Fitted) -> Result<()> {
    let best = fitted.report.best();
    eprintln!(
        "trained {} epochs, best epoch {} (val loss {:.4})",
        fitted.report.epochs.len(),
        best.epoch,
        best.val_loss
    );
    println!("{}", format_eer(metrics::eer(&fitted.scores)?));
    Ok(())
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let synth_cfg = cfg.synth_config();
    let (train_set, eval_set) = synth_generate_split(&synth_cfg)?;
    create_dir(out)?;
    for (portion, data) in [("train", &train_set), ("eval", &eval_set)] {
        write_femb(data.a(), &out.join(format!("a_{portion}.femb")))?;
        write_femb(data.b(), &out.join(format!("b_{portion}.femb")))?;
    }
    cfg.with_synth_defaults().write(&out.join("config.toml"))?;
    println!(
        "wrote a/b train and eval sets to {} ({} per class, dims {:?}, single-branch Bayes error {:.2}%)",
        out.display(),
        synth_cfg.n_per_class,
        synth_cfg.dims,
        100.0 * synth_cfg.single_branch_bayes_error()
    );
    Ok(())
}

pub fn train_single(cfg: &RunConfig, out: &Path) -> Result<()> {
    let arch = cfg.arch()?;
    if arch.is_fusion() {
        return Err(Error::Config(format!("{arch} is a fusion mode; use train-fusion")));
    }
    let train_data = Data::Single(read_femb(required(&cfg.data.train, "--train")?)?);
    let eval_data = Data::Single(read_femb(required(&cfg.data.eval, "--eval")?)?);
    let fitted = fit(cfg, arch, &train_data, &eval_data)?;
    write_run(out, cfg, &fitted)?;
    report_eer(&fitted)
}

pub fn train_fusion(cfg: &RunConfig, out: &Path, lambda_flag: bool) -> Result<()> {
    let arch = cfg.arch()?;
    if !arch.is_fusion() {
        return Err(Error::Config(format!("{arch} is a single-branch architecture; use train")));
    }
    if arch == Architecture::ConcatFusion && lambda_flag {
        eprintln!("warning: --lambda has no effect in concat mode");
    }
    let d = &cfg.data;
    let train_data = load_pair(required(&d.train_a, "--train-a")?, required(&d.train_b, "--train-b")?)?;
    let eval_data = load_pair(required(&d.eval_a, "--eval-a")?, required(&d.eval_b, "--eval-b")?)?;
    let fitted = fit(cfg, arch, &train_data, &eval_data)?;
    write_run(out, cfg, &fitted)?;
    if let Some(cka) = fitted.report.best().mean_batch_cka {
        eprintln!("mean batch CKA at best epoch: {cka:.4}");
    }
    report_eer(&fitted)
}

pub fn eval(checkpoint: &Path, eval_a: &Path, eval_b: Option<&Path>, out: &Path) -> Result<()> {
    let model = read_checkpoint(checkpoint)?;
    let data = match (model.arch().is_fusion(), eval_b) {
        (true, Some(b)) => load_pair(eval_a, b)?,
        (true, None) => return Err(Error::Config(format!("{} checkpoint needs --eval-b", model.arch()))),
        (false, None) => Data::Single(read_femb(eval_a)?),
        (false, Some(_)) => {
            return Err(Error::Config(format!("{} checkpoint takes one input; drop --eval-b", model.arch())))
        }
    };
    let scores = evaluate_with_ids(&model, &data.to_batch()?, data.ids())?;
    write_scores(&scores, out)?;
    match metrics::eer(&scores) {
        Ok(v) => println!("{}", format_eer(v)),
        Err(Error::MetricUndefined(why)) => eprintln!("scores written; EER undefined: {why}"),
        Err(e) => return Err(e),
    }
    Ok(())
}

pub fn eer(scores: &Path) -> Result<()> {
    let set = read_scores(scores)?;
    println!("{}", format_eer(metrics::eer(&set)?));
    Ok(())
}
