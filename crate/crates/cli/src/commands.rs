use std::fmt;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use ndarray::ArrayView2;
use serde_json::json;
use spectral_erc::bench::run_bench;
use spectral_erc::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use spectral_erc::config::{Overrides, RunConfig};
use spectral_erc::corpus::{generate_synthetic, load_corpus, write_corpus, Corpus, Split, SynthSpec};
use spectral_erc::graph::symmetric_eigenvalues;
use spectral_erc::model::{
    active_parameter_counts, conversation_filters, forward, mean_pairwise_cosine, ModelParams,
};
use spectral_erc::spectral::{circulant_projection, kernel_spectrum};
use spectral_erc::train::{evaluate_with_flips, model_shape, train as run_training};
use spectral_erc::Error;

use crate::RunFlags;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad configuration or an unusable input file.
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidConfig(_) | Error::Parse { .. } => CliError::Usage(msg),
            Error::Io(io) if io.kind() == ErrorKind::NotFound => CliError::Usage(msg),
            _ => CliError::Runtime(msg),
        }
    }
}

type CliResult = Result<(), CliError>;

/// Reads an input file, reporting a missing one as a usage error with its path.
fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{}: no such file", path.display())))
    }
}

fn write_file(path: &Path, contents: &str) -> CliResult {
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, contents: &str) -> CliResult {
    match out {
        Some(p) => write_file(p, contents),
        None => {
            print!("{contents}");
            Ok(())
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run_config(flags: &RunFlags) -> Result<RunConfig, CliError> {
    let mut cfg = match &flags.config {
        Some(p) => {
            require(p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: flags.seed,
        deterministic: flags.deterministic,
        ablate: flags.ablate.clone(),
        modalities: flags.modalities.clone(),
        mode: flags.mode.clone(),
        depth: flags.depth,
    })?;
    Ok(cfg)
}

fn corpus_at(path: &Path) -> Result<Corpus, CliError> {
    require(path)?;
    Ok(load_corpus(path)?)
}

fn parse_split(s: &str) -> Split {
    match s {
        "train" => Split::Train,
        "val" => Split::Val,
        _ => Split::Test,
    }
}

pub fn synth(spec_path: Option<&Path>, seed: Option<u64>, out: &Path) -> CliResult {
    let mut spec = match spec_path {
        Some(p) => {
            require(p)?;
            let text = fs::read_to_string(p).map_err(Error::from)?;
            serde_json::from_str::<SynthSpec>(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
        }
        None => SynthSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let corpus = generate_synthetic(&spec)?;
    write_corpus(&corpus, out)?;
    write_file(
        &with_suffix(out, ".spec.json"),
        &(serde_json::to_string_pretty(&spec).expect("spec serializes") + "\n"),
    )?;
    eprintln!(
        "wrote {} conversations ({} utterances) to {}",
        corpus.conversations.len(),
        corpus.n_utterances(),
        out.display()
    );
    Ok(())
}

pub fn train(corpus_path: &Path, flags: &RunFlags, out: &Path, log_path: Option<&Path>) -> CliResult {
    let cfg = run_config(flags)?;
    let corpus = corpus_at(corpus_path)?;
    let outcome = run_training(&corpus, &cfg.model, &cfg.train, cfg.seed, |_| {})?;
    let meta = CheckpointMeta {
        config: cfg.clone(),
        shape: model_shape(&corpus),
    };
    save_checkpoint(out, &meta, &outcome.params)?;
    let log_path = log_path.map(Path::to_path_buf).unwrap_or_else(|| with_suffix(out, ".log.jsonl"));
    write_file(&log_path, &outcome.log_jsonl())?;
    write_file(&with_suffix(out, ".config.json"), &(cfg.to_json() + "\n"))?;
    let best = &outcome.log[outcome.best_epoch - 1];
    println!(
        "best epoch {} of {}: val w-f1 {:.4}, val w-acc {:.4}",
        outcome.best_epoch,
        outcome.log.len(),
        best.val_w_f1,
        best.val_w_acc
    );
    Ok(())
}

pub fn eval(corpus_path: &Path, ckpt: &Path, split: &str, out: Option<&Path>) -> CliResult {
    require(ckpt)?;
    let (meta, params) = load_checkpoint(ckpt)?;
    let corpus = corpus_at(corpus_path)?;
    if model_shape(&corpus) != meta.shape {
        return Err(CliError::Usage(format!(
            "corpus shape {:?} does not match checkpoint shape {:?}",
            model_shape(&corpus),
            meta.shape
        )));
    }
    let convs = corpus.split(parse_split(split));
    if convs.is_empty() {
        return Err(CliError::Usage(format!("corpus has no '{split}' conversations")));
    }
    let report = evaluate_with_flips(&params, &meta.config.model, &convs, corpus.n_classes)?;
    print!("{}", report.metrics.table());
    let doc = json!({
        "split": split,
        "config": meta.config,
        "metrics": report.metrics,
        "flipped_acc": report.flipped_acc,
        "n_flipped": report.n_flipped,
    });
    let text = serde_json::to_string_pretty(&doc).expect("report serializes") + "\n";
    println!("{text}");
    if let Some(p) = out {
        write_file(p, &text)?;
    }
    Ok(())
}

pub fn bench(sizes: &[usize], d: usize, repeats: usize, seed: u64, out: Option<&Path>) -> CliResult {
    let report = run_bench(sizes, d, repeats, seed)?;
    emit(out, &report.to_csv())?;
    let worst = report.rows.iter().fold(0.0f64, |m, r| m.max(r.residual));
    eprintln!("max residual {worst:.3e}");
    if report.rows.len() >= 2 {
        eprintln!(
            "log-log slope: spatial {:.3}, frequency {:.3}",
            report.spatial_slope, report.frequency_slope
        );
    }
    Ok(())
}

fn matrix_csv(m: ArrayView2<f64>) -> String {
    m.rows()
        .into_iter()
        .map(|r| r.iter().map(|v| format!("{v:.17e}")).collect::<Vec<_>>().join(",") + "\n")
        .collect()
}

fn model_for(
    flags: &RunFlags,
    ckpt: Option<&Path>,
    corpus: &Corpus,
) -> Result<(RunConfig, ModelParams), CliError> {
    match ckpt {
        Some(p) => {
            require(p)?;
            let (meta, params) = load_checkpoint(p)?;
            if model_shape(corpus) != meta.shape {
                return Err(CliError::Usage("corpus does not match the checkpoint".into()));
            }
            Ok((meta.config, params))
        }
        None => {
            let cfg = run_config(flags)?;
            let params = ModelParams::init(&cfg.model, &model_shape(corpus), cfg.seed)?;
            Ok((cfg, params))
        }
    }
}

pub fn spectrum(
    corpus_path: &Path,
    flags: &RunFlags,
    ckpt: Option<&Path>,
    which: &str,
    out: Option<&Path>,
    dump_dir: Option<&Path>,
) -> CliResult {
    let corpus = corpus_at(corpus_path)?;
    let (cfg, params) = model_for(flags, ckpt, &corpus)?;
    let conv = match corpus.conversations.iter().find(|c| c.id == which) {
        Some(c) => c,
        None => which
            .parse::<usize>()
            .ok()
            .and_then(|i| corpus.conversations.get(i))
            .ok_or_else(|| CliError::Usage(format!("no conversation '{which}'")))?,
    };
    let filters = conversation_filters(&params, &cfg.model, conv)?;
    let ev_low = symmetric_eigenvalues(filters.low.view())?;
    let ev_high = symmetric_eigenvalues(filters.high.view())?;
    let lam_low = kernel_spectrum(circulant_projection(filters.low.view()).view());
    let lam_high = kernel_spectrum(circulant_projection(filters.high.view()).view());

    let mut csv = String::from("kind,index,low,high\n");
    for (k, (l, h)) in ev_low.iter().zip(&ev_high).enumerate() {
        csv += &format!("eigenvalue,{k},{l:.12e},{h:.12e}\n");
    }
    for (f, (l, h)) in lam_low.iter().zip(lam_high.iter()).enumerate() {
        csv += &format!("spectrum_abs,{f},{:.12e},{:.12e}\n", l.norm(), h.norm());
    }
    emit(out, &csv)?;

    if let Some(dir) = dump_dir {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
        let adjacency = filters.low.clone() - ndarray::Array2::<f64>::eye(filters.low.nrows());
        write_file(&dir.join("normalized_adjacency.csv"), &matrix_csv(adjacency.view()))?;
        write_file(&dir.join("low_pass.csv"), &matrix_csv(filters.low.view()))?;
        write_file(&dir.join("high_pass.csv"), &matrix_csv(filters.high.view()))?;
        write_file(&dir.join("config.json"), &(cfg.to_json() + "\n"))?;
    }
    Ok(())
}

pub fn params_count(corpus_path: Option<&Path>, flags: &RunFlags) -> CliResult {
    let cfg = run_config(flags)?;
    let shape = match corpus_path {
        Some(p) => model_shape(&corpus_at(p)?),
        None => {
            let spec = SynthSpec::default();
            spectral_erc::model::ModelShape {
                dims: spec.dims,
                n_classes: spec.n_classes,
                n_speakers: spec.n_speakers,
            }
        }
    };
    let params = ModelParams::zeros(&cfg.model, &shape);
    let counts = active_parameter_counts(&params, &cfg.model);
    let mut total = 0;
    for (group, n) in &counts {
        println!("{group:<10} {n:>10}");
        total += n;
    }
    println!("{:<10} {total:>10}", "total");
    Ok(())
}

pub fn probe(corpus_path: &Path, flags: &RunFlags, depths: &[usize], out: Option<&Path>) -> CliResult {
    let base = run_config(flags)?;
    let corpus = corpus_at(corpus_path)?;
    let test = corpus.split(Split::Test);
    if test.is_empty() {
        return Err(CliError::Usage("corpus has no test conversations".into()));
    }
    let mut csv = String::from("depth,mean_pairwise_cosine,test_w_f1,finite\n");
    for &depth in depths {
        let mut cfg = base.clone();
        cfg.model.depth = depth;
        cfg.validate()?;
        let outcome = run_training(&corpus, &cfg.model, &cfg.train, cfg.seed, |_| {})?;
        let mut total = 0.0;
        let mut finite = true;
        for conv in &test {
            let nodes = forward(&outcome.params, &cfg.model, conv)?.node_embeddings();
            finite &= nodes.iter().all(|v| v.is_finite());
            total += mean_pairwise_cosine(nodes.view());
        }
        let eval = evaluate_with_flips(&outcome.params, &cfg.model, &test, corpus.n_classes)?;
        let line = format!(
            "{depth},{:.6},{:.4},{finite}\n",
            total / test.len() as f64,
            eval.metrics.weighted_f1
        );
        log::info!("{}", line.trim_end());
        csv += &line;
    }
    emit(out, &csv)
}
