use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::Serialize;
use serde_json::{json, Value};
use spade_core::dataset::{
    build_splits, load_corpus, load_training_corpus, save_corpus, ClassRole, DatasetSplit, MnistCorpus,
};
use spade_core::detector::{
    classify, read_scores_json, reconstruct_samples, score_corpus, score_training, write_scores_csv, write_scores_json,
    Decision, DetectorConfig, Method, Models, ScoreRecord,
};
use spade_core::eval::{
    export_report, render_table, roc_of_records, run_known_digit_experiment, CellResult, ExperimentConfig,
    ExperimentReport, Timings,
};
use spade_core::nn::{load_checkpoint, load_model, resume_cnn, resume_vae, save_checkpoint, Cnn, TrainState, Vae};
use spade_core::raster::Map2;
use spade_core::saliency::{render_overlay, spade_roi};

use crate::config::{resolve, RunConfig};
use crate::{
    Cli, Command, EvaluateArgs, Failure, GenerateArgs, ModelKind, ScoreArgs, SplitFlags, TrainArgs, TrainFlags,
    VisualizeArgs,
};

type Overrides = Vec<(String, Value)>;

fn push<T: Serialize>(out: &mut Overrides, path: &str, value: Option<T>) {
    if let Some(v) = value {
        out.push((
            path.to_string(),
            serde_json::to_value(v).expect("flag value serializes"),
        ));
    }
}

fn split_overrides(out: &mut Overrides, flags: &SplitFlags) {
    push(out, "split.seed", flags.seed);
    push(out, "split.normal_digit", flags.normal_digit);
    push(out, "split.known_anomaly_digit", flags.known_digit);
    push(out, "split.max_train_per_class", flags.max_train_per_class);
    push(out, "split.max_eval_per_digit", flags.max_eval_per_digit);
}

fn train_overrides(out: &mut Overrides, section: &str, flags: &TrainFlags) {
    push(out, &format!("{section}.max_epochs"), flags.epochs);
    push(out, &format!("{section}.batch_size"), flags.batch_size);
    push(out, &format!("{section}.learning_rate"), flags.learning_rate);
    push(out, &format!("{section}.convergence_patience"), flags.patience);
    push(out, &format!("{section}.seed"), flags.train_seed);
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let mut overrides = Overrides::new();
    push(&mut overrides, "data_dir", cli.data_dir.clone());
    push(&mut overrides, "jobs", cli.jobs);
    match &cli.command {
        Command::Generate(a) => {
            push(&mut overrides, "mnist_dir", a.mnist_dir.clone());
            push(&mut overrides, "corpus_dir", a.out.clone());
            split_overrides(&mut overrides, &a.split);
        }
        Command::Train(a) => {
            push(&mut overrides, "corpus_dir", a.corpus.clone());
            let section = match a.model {
                ModelKind::Vae => "vae_train",
                ModelKind::Cnn => "cnn_train",
            };
            train_overrides(&mut overrides, section, &a.train);
        }
        Command::Score(a) => {
            push(&mut overrides, "corpus_dir", a.corpus.clone());
            push(&mut overrides, "detector.method", a.method);
            push(&mut overrides, "detector.threshold", a.threshold);
        }
        Command::Evaluate(a) => {
            push(&mut overrides, "mnist_dir", a.mnist_dir.clone());
            push(&mut overrides, "experiment.known_digits", a.digits.clone());
            push(&mut overrides, "experiment.methods", a.methods.clone());
            push(&mut overrides, "experiment.seeds", a.seeds.clone());
            push(&mut overrides, "split.max_train_per_class", a.max_train_per_class);
            push(&mut overrides, "split.max_eval_per_digit", a.max_eval_per_digit);
            train_overrides(&mut overrides, "vae_train", &a.train);
            train_overrides(&mut overrides, "cnn_train", &a.train);
        }
        Command::Visualize(a) => push(&mut overrides, "corpus_dir", a.corpus.clone()),
    }
    let config = resolve(cli.config.as_deref(), overrides).map_err(|e| Failure::Usage(format!("{e:#}")))?;
    if let Some(jobs) = config.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::Generate(a) => generate(&config, &a),
        Command::Train(a) => train(config, &a),
        Command::Score(a) => score(config, &a),
        Command::Evaluate(a) => evaluate(&config, &a),
        Command::Visualize(a) => visualize(&config, &a),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn generate(config: &RunConfig, _args: &GenerateArgs) -> Result<(), Failure> {
    let mnist_dir = config.mnist_dir();
    let mnist = MnistCorpus::load(&mnist_dir).with_context(|| format!("loading MNIST from {}", mnist_dir.display()))?;
    let split = build_splits(&mnist, &config.split, &config.noise)?;
    let out = config.corpus_dir();
    let manifest = save_corpus(&split, &out).with_context(|| format!("writing corpus to {}", out.display()))?;
    write_json(&out.join("run_config.json"), &config.echo())?;

    let mut counts: BTreeMap<(u8, &str, &str), usize> = BTreeMap::new();
    for s in &split.train_normal {
        *counts
            .entry((s.digit_label, "train", ClassRole::Normal.as_str()))
            .or_default() += 1;
    }
    for s in &split.train_known_anomaly {
        *counts
            .entry((s.digit_label, "train", ClassRole::KnownAnomaly.as_str()))
            .or_default() += 1;
    }
    for e in &split.eval_all {
        *counts
            .entry((e.sample.digit_label, "eval", e.role.as_str()))
            .or_default() += 1;
    }
    println!("corpus: {}", out.display());
    println!("{:<6}{:<7}{:<17}{:>7}", "digit", "part", "role", "count");
    for ((digit, part, role), n) in counts {
        println!("{digit:<6}{part:<7}{role:<17}{n:>7}");
    }
    println!("samples: {}", manifest.samples.len());
    println!("checksum: {}", manifest.checksum);
    Ok(())
}

fn loss_history<M>(state: &TrainState<M>, model: &str, echo: &Value) -> Value {
    json!({
        "schema_version": 1,
        "model": model,
        "epochs": state.epoch,
        "history": state.history,
        "config": echo,
    })
}

fn train(mut config: RunConfig, args: &TrainArgs) -> Result<(), Failure> {
    let corpus_dir = config.corpus_dir();
    let (manifest, split) = load_training_corpus(&corpus_dir)
        .with_context(|| format!("loading training corpus from {}", corpus_dir.display()))?;
    config.split = manifest.generator.split.clone();
    config.noise = manifest.generator.noise.clone();
    let corpus_digit = config.split.known_anomaly_digit;
    match (args.model, args.known_digit) {
        (ModelKind::Cnn, None) => {
            return Err(Failure::Usage(
                "--model cnn needs --known-digit (the known anomaly class)".into(),
            ))
        }
        (ModelKind::Cnn, Some(d)) if d != corpus_digit => {
            return Err(Failure::Usage(format!(
                "--known-digit {d} but the corpus at {} was generated with known digit {corpus_digit}",
                corpus_dir.display()
            )))
        }
        (ModelKind::Vae, Some(d)) => {
            log::warn!("--known-digit {d} ignored: the VAE trains on the normal class only");
        }
        _ => {}
    }
    let out = args.out.clone().unwrap_or_else(|| match args.model {
        ModelKind::Vae => config.runs_dir.join("vae"),
        ModelKind::Cnn => config.runs_dir.join(format!("cnn_digit{corpus_digit}")),
    });
    let echo = config.echo();
    let resuming = args.resume && out.join("metadata.json").exists();
    match args.model {
        ModelKind::Vae => {
            let mut state = if resuming {
                let mut s = load_checkpoint::<Vae<f32>>(&out)?;
                s.config.max_epochs = config.vae_train.max_epochs;
                s.config.convergence_patience = config.vae_train.convergence_patience;
                s
            } else {
                TrainState::fresh(&config.vae_arch, &config.vae_train)?
            };
            resume_vae(&mut state, &split)?;
            save_checkpoint(&out, &state, echo.clone())?;
            write_json(&out.join("loss_history.json"), &loss_history(&state, "vae", &echo))?;
            report_training("vae", &state, &out);
        }
        ModelKind::Cnn => {
            let mut state = if resuming {
                let mut s = load_checkpoint::<Cnn<f32>>(&out)?;
                s.config.max_epochs = config.cnn_train.max_epochs;
                s.config.convergence_patience = config.cnn_train.convergence_patience;
                s
            } else {
                TrainState::fresh(&config.cnn_arch, &config.cnn_train)?
            };
            resume_cnn(&mut state, &split)?;
            save_checkpoint(&out, &state, echo.clone())?;
            write_json(&out.join("loss_history.json"), &loss_history(&state, "cnn", &echo))?;
            report_training("cnn", &state, &out);
        }
    }
    Ok(())
}

fn report_training<M>(model: &str, state: &TrainState<M>, out: &Path) {
    println!("trained {model} for {} epochs", state.epoch);
    if let Some(last) = state.history.last() {
        print!(
            "final train loss {:.6}, held-out loss {:.6}",
            last.train_loss, last.val_loss
        );
        match last.val_accuracy {
            Some(acc) => println!(", held-out accuracy {acc:.4}"),
            None => println!(),
        }
    }
    println!("checkpoint: {}", out.display());
}

struct LoadedModels {
    vae: Option<Vae<f32>>,
    cnn: Option<Cnn<f32>>,
}

impl LoadedModels {
    fn load(vae: Option<&Path>, cnn: Option<&Path>) -> anyhow::Result<Self> {
        let load_vae =
            |p: &Path| load_model::<Vae<f32>>(p).with_context(|| format!("loading VAE from {}", p.display()));
        let load_cnn =
            |p: &Path| load_model::<Cnn<f32>>(p).with_context(|| format!("loading CNN from {}", p.display()));
        Ok(Self {
            vae: vae.map(load_vae).transpose()?,
            cnn: cnn.map(load_cnn).transpose()?,
        })
    }

    fn models(&self) -> Models<'_> {
        Models {
            vae: self.vae.as_ref(),
            cnn: self.cnn.as_ref(),
        }
    }
}

fn require_models(method: Method, args_vae: Option<&PathBuf>, args_cnn: Option<&PathBuf>) -> Result<(), Failure> {
    if method.needs_vae() && args_vae.is_none() {
        return Err(Failure::Usage(format!(
            "--method {method} needs a VAE checkpoint (--vae)"
        )));
    }
    if method.needs_cnn() && args_cnn.is_none() {
        return Err(Failure::Usage(format!(
            "--method {method} needs a classifier checkpoint (--cnn)"
        )));
    }
    Ok(())
}

fn score(mut config: RunConfig, args: &ScoreArgs) -> Result<(), Failure> {
    let method = config.detector.method;
    require_models(method, args.vae.as_ref(), args.cnn.as_ref())?;
    if args.overlay_dir.is_some() && (args.vae.is_none() || args.cnn.is_none()) {
        return Err(Failure::Usage("--overlay-dir needs both --vae and --cnn".into()));
    }
    let corpus_dir = config.corpus_dir();
    let split = load_corpus(&corpus_dir).with_context(|| format!("loading corpus from {}", corpus_dir.display()))?;
    config.split = split.spec.clone();
    config.noise = split.noise.clone();
    let loaded = LoadedModels::load(args.vae.as_deref(), args.cnn.as_deref())?;
    let models = loaded.models();

    if args.youden {
        let train = score_training(&models, &split, method)?;
        let scores: Vec<f64> = train.iter().map(|r| r.score).collect();
        let labels: Vec<bool> = train.iter().map(|r| r.role.is_anomaly()).collect();
        config.detector.threshold = Some(spade_core::detector::youden_threshold(&scores, &labels)?);
    }
    let records = score_corpus(&models, &split, method)?;

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| config.runs_dir.join(format!("scores_{method}.csv")));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut echo = config.echo();
    echo["checkpoints"] = json!({ "vae": args.vae, "cnn": args.cnn });
    write_scores_csv(&records, &out)?;
    let json_path = out.with_extension("json");
    write_scores_json(&records, echo, &json_path)?;
    println!("scored {} samples with {method}", records.len());
    println!("scores: {} and {}", out.display(), json_path.display());

    if let Some(threshold) = config.detector.threshold {
        let cfg = DetectorConfig { threshold, method };
        let flagged = records
            .iter()
            .filter(|r| classify(r.score, &cfg) == Decision::IncorrectPattern)
            .count();
        println!(
            "threshold {threshold}: {flagged} of {} flagged as incorrect patterns",
            records.len()
        );
    }

    if let Some(dir) = &args.overlay_dir {
        let mut ranked: Vec<&ScoreRecord> = records.iter().collect();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.sample_id.cmp(&b.sample_id)));
        let ids: Vec<String> = ranked
            .iter()
            .take(args.overlay_count)
            .map(|r| r.sample_id.clone())
            .collect();
        let written = write_overlays(&loaded, &split, &ids, dir, true)?;
        println!("overlays: {written} written to {}", dir.display());
    }
    Ok(())
}

fn write_overlays(
    loaded: &LoadedModels,
    split: &DatasetSplit,
    ids: &[String],
    dir: &Path,
    ranked_names: bool,
) -> Result<usize, Failure> {
    let (vae, cnn) = match (&loaded.vae, &loaded.cnn) {
        (Some(v), Some(c)) => (v, c),
        _ => return Err(Failure::Usage("overlays need both a VAE and a classifier".into())),
    };
    let mut samples = Vec::new();
    for id in ids {
        match split.eval_all.iter().find(|e| &e.sample.sample_id == id) {
            Some(e) => samples.push(&e.sample),
            None => return Err(Failure::Usage(format!("no evaluation sample with id {id}"))),
        }
    }
    let recons = reconstruct_samples(vae, &samples)?;
    for (rank, (sample, u_hat)) in samples.iter().zip(&recons).enumerate() {
        let u = sample.to_tensor();
        let roi = spade_roi(cnn, &u, u_hat)?;
        let (w, h) = sample.image.dimensions();
        let gray = Map2::new(h as usize, w as usize, u.data().iter().map(|&v| f64::from(v)).collect())?;
        let name = if ranked_names {
            format!("{:03}_{}.png", rank + 1, sample.sample_id)
        } else {
            format!("{}.png", sample.sample_id)
        };
        render_overlay(&gray, &roi, &dir.join(name))?;
    }
    Ok(samples.len())
}

fn visualize(config: &RunConfig, args: &VisualizeArgs) -> Result<(), Failure> {
    let corpus_dir = config.corpus_dir();
    let split = load_corpus(&corpus_dir).with_context(|| format!("loading corpus from {}", corpus_dir.display()))?;
    let loaded = LoadedModels::load(Some(&args.vae), Some(&args.cnn))?;
    let n = write_overlays(&loaded, &split, &args.samples, &args.out, false)?;
    println!("overlays: {n} written to {}", args.out.display());
    Ok(())
}

fn evaluate(config: &RunConfig, args: &EvaluateArgs) -> Result<(), Failure> {
    let out = args.out.clone().unwrap_or_else(|| config.runs_dir.join("report"));
    let report = if args.scores.is_empty() {
        run_experiment(config, args, &out)?
    } else {
        report_from_scores(config, &args.scores)?
    };
    export_report(&report, &out)?;
    print!("{}", render_table(&report));
    println!("report: {}", out.display());
    if !report.complete {
        return Err(Failure::Runtime(anyhow!(
            "some cells failed; the report is marked incomplete"
        )));
    }
    Ok(())
}

fn run_experiment(config: &RunConfig, args: &EvaluateArgs, out: &Path) -> anyhow::Result<ExperimentReport> {
    let mnist_dir = config.mnist_dir();
    let mnist = MnistCorpus::load(&mnist_dir).with_context(|| format!("loading MNIST from {}", mnist_dir.display()))?;
    let experiment = ExperimentConfig {
        split: config.split.clone(),
        noise: config.noise.clone(),
        known_digits: config.experiment.known_digits.clone(),
        methods: config.experiment.methods.clone(),
        seeds: config.experiment.seeds.clone(),
        vae_arch: config.vae_arch.clone(),
        cnn_arch: config.cnn_arch.clone(),
        vae_train: config.vae_train.clone(),
        cnn_train: config.cnn_train.clone(),
    };
    let artifacts = args.keep_artifacts.then(|| out.join("artifacts"));
    Ok(run_known_digit_experiment(
        &mnist,
        &experiment,
        config.echo(),
        artifacts.as_deref(),
    )?)
}

fn report_from_scores(config: &RunConfig, paths: &[PathBuf]) -> anyhow::Result<ExperimentReport> {
    let wanted = &config.experiment.methods;
    let mut cells = Vec::new();
    let (mut digits, mut seeds, mut methods) = (Vec::new(), Vec::new(), Vec::new());
    let mut normal_digit = config.split.normal_digit;
    for path in paths {
        let doc = read_scores_json(path).with_context(|| format!("reading scores {}", path.display()))?;
        let field = |key: &str| {
            doc.config["split"][key]
                .as_u64()
                .ok_or_else(|| anyhow!("{} does not record split.{key}", path.display()))
        };
        let digit = field("known_anomaly_digit")? as u8;
        let seed = field("seed")?;
        normal_digit = field("normal_digit")? as u8;
        let mut present: Vec<Method> = doc.records.iter().map(|r| r.method).collect();
        present.sort();
        present.dedup();
        for m in present.into_iter().filter(|m| wanted.contains(m)) {
            cells.push(match roc_of_records(&doc.records, m) {
                Ok((roc, normals, anomalies)) => CellResult::from_roc(seed, digit, m, &roc, normals, anomalies),
                Err(e) => CellResult::failed(seed, digit, m, &e),
            });
            methods.push(m);
        }
        digits.push(digit);
        seeds.push(seed);
    }
    digits.sort();
    digits.dedup();
    seeds.sort();
    seeds.dedup();
    methods.sort();
    methods.dedup();
    if methods.is_empty() {
        anyhow::bail!("the score files hold none of the requested methods");
    }
    Ok(ExperimentReport::assemble(
        config.echo(),
        normal_digit,
        digits,
        methods,
        seeds,
        cells,
        Vec::new(),
        Timings::default(),
    ))
}
