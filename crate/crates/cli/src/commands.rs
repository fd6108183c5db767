//! Command implementations: thin orchestration over the library crate.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use gode_core::datapipe::{
    k_core_filter, load_checkpoint, load_dataset, load_interactions, save_checkpoint,
    save_dataset, split, Dataset,
};
use gode_core::embedding::EmbeddingSet;
use gode_core::eval::{evaluate, run_variant_study, EvalSplit, MetricsReport};
use gode_core::graph::{build_graph, BipartiteGraph};
use gode_core::postconv::{
    convolve, embedding_discrepancy, save_sidecar, ConvConfig, ConvMode, ConvSidecar, Readout,
};
use gode_core::synth::{generate, SynthConfig};
use gode_core::trainer::{fit, TrainConfig, TrainMode};
use gode_core::{Error, Result};

use crate::config::{resolve, resolve_list, ConfigFile};
use crate::{
    BenchArgs, ConvFlags, ConvolveArgs, EvalArgs, PrepareArgs, SweepArgs, SynthArgs, TrainArgs,
    TrainFlags, VariantsArgs,
};

fn load_config(path: &Option<PathBuf>) -> Result<ConfigFile> {
    match path {
        Some(p) => ConfigFile::load(p),
        None => Ok(ConfigFile::default()),
    }
}

fn resolve_train_config(
    flags: &TrainFlags,
    k_flag: Option<u32>,
    file: &ConfigFile,
) -> Result<TrainConfig> {
    let defaults = TrainConfig::default();
    let mode_str: String = resolve(flags.mode.clone(), file, "train", "mode", "mf".into())?;
    let mode = match mode_str.as_str() {
        "mf" => TrainMode::Mf,
        // The in-training convolution baseline aggregates without self-loops.
        "gcn" => TrainMode::Gcn {
            k: resolve(k_flag, file, "train", "k", 2)?,
            self_loop: false,
        },
        other => {
            return Err(Error::InvalidConfig(format!(
                "mode `{other}`: expected `mf` or `gcn`"
            )))
        }
    };
    let cfg = TrainConfig {
        d: resolve(flags.d, file, "train", "d", defaults.d)?,
        batch_size: resolve(flags.batch_size, file, "train", "batch_size", defaults.batch_size)?,
        lr: resolve(flags.lr, file, "train", "lr", defaults.lr)?,
        gamma: resolve(flags.gamma, file, "train", "gamma", defaults.gamma)?,
        patience: resolve(flags.patience, file, "train", "patience", defaults.patience)?,
        max_epochs: resolve(flags.max_epochs, file, "train", "max_epochs", defaults.max_epochs)?,
        seed: resolve(flags.seed, file, "train", "seed", defaults.seed)?,
        mode,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_conv_mode(s: &str) -> Result<ConvMode> {
    match s {
        "discrete" => Ok(ConvMode::Discrete),
        "discrete_sl" => Ok(ConvMode::DiscreteSl),
        "ode" => Ok(ConvMode::Ode),
        other => Err(Error::InvalidConfig(format!(
            "conv `{other}`: expected `discrete`, `discrete_sl` or `ode`"
        ))),
    }
}

fn resolve_conv_config(
    flags: &ConvFlags,
    file: &ConfigFile,
    default_mode: &str,
) -> Result<ConvConfig> {
    let defaults = ConvConfig::default();
    let mode_str: String = resolve(flags.conv.clone(), file, "conv", "conv", default_mode.into())?;
    let readout_str: String =
        resolve(flags.readout.clone(), file, "conv", "readout", "layer_sum".into())?;
    let readout = match readout_str.as_str() {
        "layer_sum" => Readout::LayerSum,
        "last_layer" => Readout::LastLayer,
        other => {
            return Err(Error::InvalidConfig(format!(
                "readout `{other}`: expected `layer_sum` or `last_layer`"
            )))
        }
    };
    let cfg = ConvConfig {
        mode: parse_conv_mode(&mode_str)?,
        k: resolve(flags.k, file, "conv", "k", defaults.k)?,
        t: resolve(flags.t, file, "conv", "t", defaults.t)?,
        dt: resolve(flags.dt, file, "conv", "dt", defaults.dt)?,
        readout,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn parse_split(s: &str) -> Result<EvalSplit> {
    match s {
        "test" => Ok(EvalSplit::Test),
        "validation" | "valid" => Ok(EvalSplit::Validation),
        other => Err(Error::InvalidConfig(format!(
            "split `{other}`: expected `test` or `validation`"
        ))),
    }
}

fn resolve_ks(flag: Option<Vec<usize>>, file: &ConfigFile) -> Result<Vec<usize>> {
    let mut ks = resolve_list(flag, file, "eval", "ks", vec![20, 50])?;
    ks.sort_unstable();
    ks.dedup();
    Ok(ks)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text)?;
    Ok(())
}

fn check_dims(e: &EmbeddingSet, ds: &Dataset) -> Result<()> {
    if e.n_users() != ds.n_users || e.n_items() != ds.n_items {
        return Err(Error::ShapeMismatch {
            expected: format!("{} users x {} items", ds.n_users, ds.n_items),
            found: format!("{} users x {} items", e.n_users(), e.n_items()),
        });
    }
    Ok(())
}

pub fn cmd_prepare(args: PrepareArgs) -> Result<()> {
    let file = load_config(&args.config)?;
    let k_core = resolve(args.k_core, &file, "prepare", "k_core", 5u32)?;
    let ratios: Vec<f64> =
        resolve_list(args.ratios, &file, "prepare", "ratios", vec![0.8, 0.1, 0.1])?;
    if ratios.len() != 3 {
        return Err(Error::InvalidConfig(format!(
            "ratios need exactly 3 values, got {}",
            ratios.len()
        )));
    }
    let seed = resolve(args.seed, &file, "prepare", "seed", 42u64)?;

    let table = load_interactions(&args.input)?;
    let filtered = k_core_filter(&table, k_core)?;
    let ds = split(&filtered, (ratios[0], ratios[1], ratios[2]), seed)?;
    save_dataset(&ds, &args.out)?;
    println!(
        "users={} items={} interactions={} sparsity={:.4}%",
        ds.n_users,
        ds.n_items,
        ds.interactions(),
        100.0 * ds.sparsity()
    );
    Ok(())
}

pub fn cmd_train(args: TrainArgs) -> Result<()> {
    let file = load_config(&args.train.config)?;
    let cfg = resolve_train_config(&args.train, args.k, &file)?;
    let ds = load_dataset(&args.dataset)?;
    let (e, log) = fit(&ds, &cfg)?;

    fs::create_dir_all(&args.out)?;
    save_checkpoint(&e, args.out.join("checkpoint.bin"))?;
    fs::write(args.out.join("train_log.csv"), log.to_csv())?;
    println!(
        "epochs={} best_epoch={} time_per_epoch={:.4}s total={:.4}s",
        log.epochs.len(),
        log.best_epoch,
        log.mean_epoch_seconds(),
        log.total_seconds
    );
    Ok(())
}

fn sidecar_path(out: &Path) -> PathBuf {
    PathBuf::from(format!("{}.json", out.display()))
}

pub fn cmd_convolve(args: ConvolveArgs) -> Result<()> {
    let file = load_config(&args.config)?;
    let cfg = resolve_conv_config(&args.conv, &file, "ode")?;
    let ds = load_dataset(&args.dataset)?;
    let e0 = load_checkpoint(&args.checkpoint)?;
    check_dims(&e0, &ds)?;
    let g = build_graph(&ds)?;
    let out_set = convolve(&g, &e0, &cfg)?;

    ensure_parent(&args.out)?;
    save_checkpoint(&out_set, &args.out)?;
    let sidecar = ConvSidecar {
        flavor: out_set.flavor,
        conv: cfg,
        source: args.checkpoint.display().to_string(),
    };
    save_sidecar(&sidecar, sidecar_path(&args.out))?;
    println!("wrote {}", args.out.display());
    Ok(())
}

pub fn cmd_eval(args: EvalArgs) -> Result<()> {
    let file = load_config(&args.config)?;
    let ks = resolve_ks(args.ks, &file)?;
    let split_str: String = resolve(args.split.clone(), &file, "eval", "split", "test".into())?;
    let split = parse_split(&split_str)?;

    let ds = load_dataset(&args.dataset)?;
    let e = load_checkpoint(&args.checkpoint)?;
    check_dims(&e, &ds)?;
    let report = evaluate(&ds, &e, &ks, split)?;
    print!("{}", report.pretty());
    if let Some(out) = &args.out {
        write_text(out, &report.to_csv())?;
    }
    Ok(())
}

fn sweep_csv(ks: &[usize], rows: &[(String, MetricsReport, f64)]) -> String {
    let mut header = String::from("value");
    for k in ks {
        header.push_str(&format!(",recall@{k}"));
    }
    for k in ks {
        header.push_str(&format!(",ndcg@{k}"));
    }
    header.push_str(",discrepancy\n");

    let mut out = header;
    for (value, rep, disc) in rows {
        out.push_str(value);
        for r in &rep.recall {
            out.push_str(&format!(",{r:.6}"));
        }
        for n in &rep.ndcg {
            out.push_str(&format!(",{n:.6}"));
        }
        out.push_str(&format!(",{disc:.6}\n"));
    }
    out
}

/// Integer-valued grid entry (the K grid), rejecting fractional input.
fn as_layer_count(v: f64) -> Result<u32> {
    if v.fract() != 0.0 || v < 0.0 || v > u32::MAX as f64 {
        return Err(Error::InvalidConfig(format!("K grid value `{v}` is not a layer count")));
    }
    Ok(v as u32)
}

pub fn cmd_sweep(args: SweepArgs) -> Result<()> {
    if args.values.is_empty() {
        return Err(Error::InvalidConfig("sweep grid is empty".into()));
    }
    let file = load_config(&args.train.config)?;
    let ks = resolve_ks(args.ks, &file)?;
    let ds = load_dataset(&args.dataset)?;
    let g = build_graph(&ds)?;

    let need_checkpoint = || -> Result<EmbeddingSet> {
        let path = args.checkpoint.as_ref().ok_or_else(|| {
            Error::InvalidConfig("t and K sweeps reuse a trained model: pass --checkpoint".into())
        })?;
        let e = load_checkpoint(path)?;
        check_dims(&e, &ds)?;
        Ok(e)
    };

    let mut rows: Vec<(String, MetricsReport, f64)> = Vec::new();
    match args.grid.as_str() {
        "t" => {
            let base = resolve_conv_config(&args.conv, &file, "ode")?;
            if base.mode != ConvMode::Ode {
                return Err(Error::InvalidConfig("t sweep applies to --conv ode".into()));
            }
            let e0 = need_checkpoint()?;
            for &t in &args.values {
                let cfg = ConvConfig { t, ..base.clone() };
                cfg.validate()?;
                let conv = convolve(&g, &e0, &cfg)?;
                let rep = evaluate(&ds, &conv, &ks, EvalSplit::Test)?;
                let disc = embedding_discrepancy(&e0, &conv)?;
                rows.push((format!("{t}"), rep, disc));
            }
        }
        "K" | "k" => {
            let base = resolve_conv_config(&args.conv, &file, "discrete")?;
            if base.mode == ConvMode::Ode {
                return Err(Error::InvalidConfig(
                    "K sweep applies to --conv discrete or discrete_sl".into(),
                ));
            }
            let e0 = need_checkpoint()?;
            for &v in &args.values {
                let cfg = ConvConfig { k: as_layer_count(v)?, ..base.clone() };
                let conv = convolve(&g, &e0, &cfg)?;
                let rep = evaluate(&ds, &conv, &ks, EvalSplit::Test)?;
                let disc = embedding_discrepancy(&e0, &conv)?;
                rows.push((format!("{}", cfg.k), rep, disc));
            }
        }
        "gamma" => {
            // γ changes the objective, so each grid point retrains.
            let conv_cfg = resolve_conv_config(&args.conv, &file, "ode")?;
            let base = resolve_train_config(&args.train, None, &file)?;
            for &gamma in &args.values {
                let tcfg = TrainConfig { gamma, ..base.clone() };
                tcfg.validate()?;
                let (e, _) = fit(&ds, &tcfg)?;
                let conv = convolve(&g, &e, &conv_cfg)?;
                let rep = evaluate(&ds, &conv, &ks, EvalSplit::Test)?;
                let disc = embedding_discrepancy(&e, &conv)?;
                rows.push((format!("{gamma}"), rep, disc));
            }
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "grid `{other}`: expected `t`, `gamma` or `K`"
            )))
        }
    }

    let csv = sweep_csv(&ks, &rows);
    print!("{csv}");
    if let Some(out) = &args.out {
        write_text(out, &csv)?;
    }
    Ok(())
}

fn mean_sd(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

pub fn cmd_bench(args: BenchArgs) -> Result<()> {
    if args.epochs == 0 {
        return Err(Error::InvalidConfig("bench needs at least 1 epoch".into()));
    }
    let file = load_config(&args.train.config)?;
    let base = resolve_train_config(&args.train, None, &file)?;
    let gcn_k: u32 = resolve(args.k, &file, "train", "k", 2)?;
    let ds = load_dataset(&args.dataset)?;

    let run = |mode: TrainMode| -> Result<Vec<f64>> {
        let cfg = TrainConfig {
            mode,
            max_epochs: args.epochs,
            patience: args.epochs + 1, // never stop early inside the window
            ..base.clone()
        };
        let (_, log) = fit(&ds, &cfg)?;
        Ok(log.epochs.iter().map(|e| e.seconds).collect())
    };
    let mf = run(TrainMode::Mf)?;
    let gcn = run(TrainMode::Gcn { k: gcn_k, self_loop: false })?;

    let (mf_mean, mf_sd) = mean_sd(&mf);
    let (gcn_mean, gcn_sd) = mean_sd(&gcn);
    let fmt_sd = |sd: Option<f64>| sd.map(|s| format!("{s:.6}")).unwrap_or_default();
    let mut csv = String::from("mode,epochs,mean_s_per_epoch,sd_s_per_epoch\n");
    csv.push_str(&format!("mf,{},{:.6},{}\n", mf.len(), mf_mean, fmt_sd(mf_sd)));
    csv.push_str(&format!("gcn,{},{:.6},{}\n", gcn.len(), gcn_mean, fmt_sd(gcn_sd)));
    csv.push_str(&format!("ratio,,{:.4},\n", gcn_mean / mf_mean));

    print!("{csv}");
    if let Some(out) = &args.out {
        write_text(out, &csv)?;
    }
    Ok(())
}

pub fn cmd_variants(args: VariantsArgs) -> Result<()> {
    let file = load_config(&args.train.config)?;
    let cfg = resolve_train_config(&args.train, None, &file)?;
    let ks = resolve_ks(args.ks, &file)?;
    let ds = load_dataset(&args.dataset)?;

    let study = run_variant_study(&ds, &cfg, &ks)?;
    let csv = study.to_csv();
    print!("{csv}");
    if let Some(out) = &args.out {
        write_text(out, &csv)?;
    }
    Ok(())
}

pub fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg = match args.scale.as_str() {
        "tiny" => SynthConfig::tiny(args.seed),
        "desk" => SynthConfig::desk(args.seed),
        other => {
            return Err(Error::InvalidConfig(format!(
                "scale `{other}`: expected `tiny` or `desk`"
            )))
        }
    };
    let table = generate(&cfg);

    ensure_parent(&args.out)?;
    let mut w = BufWriter::new(fs::File::create(&args.out)?);
    for row in &table.rows {
        writeln!(w, "{}\t{}", row.user, row.item)?;
    }
    w.flush()?;
    println!("wrote {} interactions to {}", table.len(), args.out.display());
    Ok(())
}

/// Shared by tests: graph + convolved checkpoint in one call.
#[allow(dead_code)]
pub fn convolve_set(ds: &Dataset, e0: &EmbeddingSet, cfg: &ConvConfig) -> Result<EmbeddingSet> {
    let g: BipartiteGraph = build_graph(ds)?;
    convolve(&g, e0, cfg)
}
