use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AnalyzeArgs, BenchArgs, CheckpointArgs, ConfigArgs, RecallArgs, SynthArgs, TrainArgs};
use crate::config::{DataConfig, RunConfig};
use crate::efficiency::{acceleration_ratio, bench_csv, bench_model, keyword_position_histogram, BenchRow, CostModel};
use crate::error::{Error, Result};
use crate::gating::GateMethod;
use crate::model::{load_checkpoint, CheckpointManifest, GateFormer, MANIFEST_FILE};
use crate::recall::{build_index, recall_experiment, Relevance};
use crate::text::{
    load_mind_impressions, load_mind_news, sample_negatives, synth_corpus, Impression, NewsMap, SynthConfig, UserHistory,
    Vocabulary,
};
use crate::training::{evaluate, train as train_model, EvalReport, TrainOutcome};

pub struct Dataset {
    pub vocab: Vocabulary,
    pub news: NewsMap,
    pub train: Vec<Impression>,
    pub dev: Vec<Impression>,
}

/// Reads vocabulary, news and behaviors. The training log is read only
/// when `need_train` is set; an empty `data.dev` yields no dev split.
pub fn load_dataset(cfg: &DataConfig, need_train: bool) -> Result<Dataset> {
    let vocab = Vocabulary::load(&cfg.path(&cfg.vocab)?)?;
    let (news, stats) = load_mind_news(&cfg.path(&cfg.news)?, &vocab, cfg.max_tokens, cfg.news_fields()?)?;
    if stats.skipped > 0 {
        warn!("skipped {} malformed news rows", stats.skipped);
    }
    let load = |file: &str| -> Result<Vec<Impression>> {
        let (imps, stats) = load_mind_impressions(&cfg.path(file)?, &news, cfg.max_history)?;
        if stats.skipped > 0 {
            warn!("{file}: skipped {} rows", stats.skipped);
        }
        Ok(imps)
    };
    let train = if need_train { load(&cfg.train)? } else { Vec::new() };
    let dev = if cfg.dev.is_empty() { Vec::new() } else { load(&cfg.dev)? };
    info!(
        "loaded {} news, {} train and {} dev impressions",
        news.len(),
        train.len(),
        dev.len()
    );
    Ok(Dataset { vocab, news, train, dev })
}

fn run_config(args: &ConfigArgs, overrides: &[(String, String)], adjust: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
    let mut cfg = RunConfig::resolve(args.config.as_deref(), overrides)?;
    if let Some(d) = &args.data {
        cfg.data.dir = Some(d.clone());
    }
    if let Some(t) = args.threads {
        cfg.train.threads = t;
    }
    adjust(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn attach_corpus(model: &mut GateFormer<f64>, news: &NewsMap) -> Result<()> {
    if model.method() == GateMethod::Bm25 {
        model.set_corpus(build_index(news)?);
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let occupied = fs::read_dir(&a.out).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !a.force {
        return Err(Error::usage(format!("{} exists and is not empty; pass --force to overwrite", a.out.display())));
    }
    let cfg = SynthConfig {
        seed: a.seed,
        n_users: a.users,
        n_items: a.items,
        n_topics: a.topics,
        tokens_per_item: a.tokens_per_item,
        signal_tokens: a.signal_tokens,
        dev_fraction: a.dev_fraction,
        policy: a.policy,
        ..SynthConfig::default()
    };
    let corpus = synth_corpus(&cfg)?;
    corpus.write(&a.out)?;
    println!(
        "wrote {} items, {} users, {} train and {} dev impressions to {}",
        corpus.items.len(),
        corpus.users.len(),
        corpus.train.len(),
        corpus.dev.len(),
        a.out.display()
    );
    Ok(())
}

fn report_line(label: &str, step: usize, r: &EvalReport) -> String {
    format!("{label},{step},{},{},{},{},{}", r.auc, r.mrr, r.ndcg5, r.ndcg10, r.impressions)
}

const REPORT_HEADER: &str = "which,step,auc,mrr,ndcg5,ndcg10,impressions";

fn train_one(cfg: &RunConfig, ds: &Dataset, out: Option<&Path>) -> Result<(GateFormer<f64>, TrainOutcome<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let samples = sample_negatives(&ds.train, cfg.train.k_neg, &mut rng);
    let mut model = GateFormer::<f64>::new(ds.vocab.len(), &cfg.model_config(), cfg.train.seed)?;
    attach_corpus(&mut model, &ds.news)?;
    if model.gate.is_none() {
        info!("gate method `{}` has no trainable selector", cfg.gate.method);
    }
    let outcome = train_model(&mut model, &samples, &ds.dev, &cfg.train, out, &cfg.fingerprint())?;
    model.store = outcome.best_store.clone();
    Ok((model, outcome))
}

pub fn train(a: &TrainArgs, overrides: &[(String, String)]) -> Result<()> {
    let cfg = run_config(&a.cfg, overrides, |c| {
        if let Some(s) = a.seed {
            c.train.seed = s;
        }
        if let Some(s) = a.steps {
            c.train.steps = s;
        }
    })?;
    let ds = load_dataset(&cfg.data, true)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    write_file(&a.out.join("config.toml"), &cfg.to_toml())?;
    let (_, outcome) = train_one(&cfg, &ds, Some(&a.out))?;
    println!("# config {}", cfg.fingerprint());
    println!("{REPORT_HEADER}");
    println!("{}", report_line("best", outcome.best_step, &outcome.best));
    println!("{}", report_line("last", cfg.train.steps, &outcome.last));
    Ok(())
}

fn checkpoint_dir(p: &Path) -> PathBuf {
    if p.join(MANIFEST_FILE).is_file() {
        p.to_path_buf()
    } else {
        p.join("checkpoint")
    }
}

/// Loads a checkpoint and the run config whose model and gate sections
/// come from it. Without `--config`, the `config.toml` saved next to the
/// checkpoint by `train` is used.
fn open_checkpoint(
    a: &CheckpointArgs,
    overrides: &[(String, String)],
) -> Result<(GateFormer<f64>, CheckpointManifest, RunConfig, Dataset)> {
    if let Some((k, _)) = overrides.iter().find(|(k, _)| k.starts_with("model.") || k.starts_with("gate.")) {
        return Err(Error::Config(format!("`{k}` is fixed by the checkpoint")));
    }
    let dir = checkpoint_dir(&a.checkpoint);
    if !dir.join(MANIFEST_FILE).is_file() {
        return Err(Error::usage(format!("no checkpoint at {}", a.checkpoint.display())));
    }
    let (mut model, manifest) = load_checkpoint::<f64>(&dir)?;
    let saved = ConfigArgs {
        config: a.cfg.config.clone().or_else(|| {
            [a.checkpoint.join("config.toml"), dir.join("..").join("config.toml")]
                .into_iter()
                .find(|p| p.is_file())
        }),
        data: a.cfg.data.clone(),
        threads: a.cfg.threads,
    };
    let cfg = run_config(&saved, overrides, |c| {
        c.model = manifest.config.model.clone();
        c.gate = manifest.config.gate.clone();
    })?;
    let ds = load_dataset(&cfg.data, false)?;
    if model.vocab_size != ds.vocab.len() {
        return Err(Error::Data(format!(
            "checkpoint vocabulary has {} entries, data vocabulary {}",
            model.vocab_size,
            ds.vocab.len()
        )));
    }
    attach_corpus(&mut model, &ds.news)?;
    Ok((model, manifest, cfg, ds))
}

fn emit(table: &str, out: Option<&Path>) -> Result<()> {
    print!("{table}");
    match out {
        Some(p) => write_file(p, table),
        None => Ok(()),
    }
}

pub fn eval(a: &CheckpointArgs, overrides: &[(String, String)]) -> Result<()> {
    let (model, manifest, cfg, ds) = open_checkpoint(a, overrides)?;
    if ds.dev.is_empty() {
        return Err(Error::usage("no dev impressions to evaluate"));
    }
    let r = evaluate(&model, &ds.dev, cfg.train.threads)?;
    let table = format!(
        "# config {}\n{REPORT_HEADER}\n{}\n",
        cfg.fingerprint(),
        report_line("eval", manifest.step as usize, &r)
    );
    emit(&table, a.out.as_deref())
}

/// One history per user, in log order.
fn user_histories(imps: &[Impression]) -> Vec<(&str, &Impression)> {
    let mut seen = HashSet::new();
    imps.iter()
        .filter(|i| seen.insert(i.user_id.as_str()))
        .map(|i| (i.user_id.as_str(), i))
        .collect()
}

pub fn bench(a: &BenchArgs, overrides: &[(String, String)]) -> Result<()> {
    if a.k.is_empty() {
        return Err(Error::usage("--k needs at least one value"));
    }
    let base = run_config(&a.cfg, overrides, |c| {
        if let Some(s) = a.seed {
            c.train.seed = s;
        }
        if let Some(s) = a.steps {
            c.train.steps = s;
        }
    })?;
    let ds = load_dataset(&base.data, a.checkpoints.is_none())?;
    let pool = if ds.dev.is_empty() { &ds.train } else { &ds.dev };
    let histories: Vec<UserHistory> = user_histories(pool).into_iter().map(|(_, i)| i.history.clone()).collect();
    if histories.is_empty() {
        return Err(Error::usage("no user histories to time"));
    }
    let mut rows: Vec<BenchRow> = Vec::with_capacity(a.k.len());
    for &k in &a.k {
        let mut cfg = base.clone();
        cfg.gate.k = k;
        cfg.validate()?;
        let model = match &a.checkpoints {
            Some(root) => {
                let dir = checkpoint_dir(&root.join(format!("k{k}")));
                let (mut m, manifest) = load_checkpoint::<f64>(&dir)?;
                if manifest.config.gate.k != k {
                    return Err(Error::Data(format!("{} holds K = {}", dir.display(), manifest.config.gate.k)));
                }
                attach_corpus(&mut m, &ds.news)?;
                m
            }
            None => train_one(&cfg, &ds, None)?.0,
        };
        let row = bench_model(&model, &histories, &ds.dev, a.reps)?;
        let lens: Vec<usize> = histories[0].items().iter().map(|s| s.len()).collect();
        let acc = acceleration_ratio(&CostModel::from_config(&model.config, &lens)?);
        info!(
            "K={k}: measured speedup {:.2}x, analytic gamma {:.2} (bound {:.2}), compression {:.1}x",
            row.speedup(),
            acc.gamma,
            acc.bound,
            acc.compression
        );
        rows.push(row);
    }
    let table = bench_csv(&rows, &base.fingerprint());
    write_file(&a.out.join("bench.csv"), &table)?;
    let mut dat = String::from("# k wall_us full_wall_us flops full_flops auc\n");
    for r in &rows {
        let _ = writeln!(dat, "{} {} {} {} {} {}", r.k, r.wall_us, r.full_wall_us, r.flops, r.full_flops, r.auc);
    }
    write_file(&a.out.join("bench.dat"), &dat)?;
    print!("{table}");
    Ok(())
}

pub fn recall(a: &RecallArgs, overrides: &[(String, String)]) -> Result<()> {
    let (model, manifest, cfg, ds) = open_checkpoint(&a.ck, overrides)?;
    if ds.dev.is_empty() {
        return Err(Error::usage("no dev impressions for recall"));
    }
    let index = build_index(&ds.news)?;
    let relevance = a.dense_relevance.map_or(Relevance::Clicked, Relevance::DenseTop);
    let report = recall_experiment(&model, &ds.news, &index, &ds.dev, &a.k, a.n_sparse, relevance, manifest.seed)?;
    info!("recall over {} impressions", report.impressions);
    emit(&report.to_csv(&cfg.fingerprint()), a.ck.out.as_deref())
}

pub fn analyze(a: &AnalyzeArgs, overrides: &[(String, String)]) -> Result<()> {
    let (model, _, cfg, ds) = open_checkpoint(&a.ck, overrides)?;
    if ds.dev.is_empty() {
        return Err(Error::usage("no dev impressions to analyze"));
    }
    let users = user_histories(&ds.dev);
    let histories: Vec<UserHistory> = users.iter().map(|(_, i)| i.history.clone()).collect();
    let hist = keyword_position_histogram(&model, &histories)?;
    if let Some(t) = hist.spearman() {
        info!("position vs count: spearman rho {:.4}, p {:.3e}", t.statistic, t.p_value);
    }
    let fp = cfg.fingerprint();
    let mut dump = format!("# config {fp}\nuser_id\titem_id\trank\tposition\ttoken\tscore\tbeta\n");
    for (u, (user, imp)) in users.iter().enumerate().take(a.dump_users) {
        let sels = model.selections(&imp.history, u as u64)?;
        for (item, sel) in imp.history_ids.iter().zip(&sels) {
            for (rank, (((&pos, &tok), &score), &beta)) in
                sel.positions.iter().zip(&sel.token_ids).zip(&sel.scores).zip(&sel.beta).enumerate()
            {
                let _ = writeln!(dump, "{user}\t{item}\t{rank}\t{pos}\t{}\t{score}\t{beta}", ds.vocab.token(tok));
            }
        }
    }
    let table = hist.to_csv(&fp);
    print!("{table}");
    if let Some(dir) = &a.ck.out {
        write_file(&dir.join("positions.csv"), &table)?;
        write_file(&dir.join("keywords.tsv"), &dump)?;
    }
    Ok(())
}
