use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use cp_prompt::backbone::{contrastive_pretrain, zero_shot_accuracy};
use cp_prompt::config::Sweep;
use cp_prompt::data::{save_dataset, Stream};
use cp_prompt::dil::{
    layer_grid as run_layer_grid, run_strategy, DilContext, PromptBank, SelectorMode, StrategyId,
    StreamFeatures, Summary,
};
use cp_prompt::prompting::cls_attention;
use cp_prompt::{Backbone, Error, RunConfig};
use serde_json::json;

use crate::Common;

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)
        .with_context(|| format!("loading {}", common.config.display()))?;
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn materialize(cfg: &RunConfig) -> Result<(Stream, Vec<Vec<usize>>)> {
    let manifest = cfg
        .manifest()
        .with_context(|| format!("loading manifest {}", cfg.manifest.display()))?;
    let stream = manifest.materialize()?;
    Ok((stream, cfg.labels(manifest.classes)))
}

fn load_backbone(cfg: &RunConfig) -> Result<Backbone> {
    let path = cfg.backbone_path();
    if !path.exists() {
        return Err(Error::Usage(format!(
            "no backbone at {}; run `cp-prompt pretrain` first",
            path.display()
        ))
        .into());
    }
    Backbone::load(&path, cfg.backbone.clone())
        .with_context(|| format!("loading {}", path.display()))
}

pub fn generate(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let (stream, _) = materialize(&cfg)?;
    let dir = cfg.out.join("data");
    std::fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    let mut save = |name: String, d: &cp_prompt::Dataset| -> Result<()> {
        let path = dir.join(name);
        save_dataset(&path, d)?;
        cp_prompt::data::load_dataset(&path)?;
        written.push(path);
        Ok(())
    };
    save("base_train.dild".into(), &stream.base.train)?;
    save("base_test.dild".into(), &stream.base.test)?;
    for (i, d) in stream.domains.iter().enumerate() {
        save(format!("domain{}_{}_train.dild", i + 1, d.name), &d.train)?;
        save(format!("domain{}_{}_test.dild", i + 1, d.name), &d.test)?;
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

pub fn pretrain(common: &Common, seed: Option<u64>) -> Result<()> {
    let cfg = load_config(common)?;
    let mut pcfg = cfg.pretrain.clone();
    if let Some(s) = seed {
        pcfg.seed = s;
    }
    let (stream, labels) = materialize(&cfg)?;
    let started = Instant::now();
    let (bb, report) = contrastive_pretrain(&stream.base.train, &cfg.backbone, &pcfg, &labels)?;
    let path = cfg.backbone_path();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    bb.save(&path)?;
    let reloaded = Backbone::load(&path, cfg.backbone.clone())?;
    if reloaded.checksum() != report.checksum {
        bail!(
            "backbone file {} does not read back identically",
            path.display()
        );
    }
    let mut zero_shot = serde_json::Map::new();
    zero_shot.insert(
        "base".into(),
        json!(zero_shot_accuracy(&bb, &stream.base.test, &labels)?),
    );
    for d in &stream.domains {
        zero_shot.insert(
            d.name.clone(),
            json!(zero_shot_accuracy(&bb, &d.test, &labels)?),
        );
    }
    let metrics = json!({
        "seed": pcfg.seed,
        "config_hash": cfg.hash(),
        "epoch_losses": report.epoch_losses,
        "logit_scale": report.logit_scale,
        "checksum": report.checksum,
        "zero_shot_accuracy": zero_shot,
        "seconds": started.elapsed().as_secs_f64(),
    });
    write(
        &cfg.out.join("pretrain_metrics.json"),
        serde_json::to_string_pretty(&metrics)?,
    )?;
    println!("{}", path.display());
    Ok(())
}

/// Parses `--sweep` arguments, skipping an optional leading label.
fn parse_sweep(args: &[String]) -> Result<Option<Sweep>> {
    match args {
        [] => Ok(None),
        [spec] | [_, spec] => Ok(Some(Sweep::parse(spec)?)),
        _ => Err(Error::Usage("--sweep takes one KEY=V1,V2,... argument".into()).into()),
    }
}

fn run_dir(cfg: &RunConfig, strategy: StrategyId, label: Option<&str>, seed: u64) -> PathBuf {
    let mut dir = cfg.out.join("runs").join(strategy.as_str());
    if let Some(l) = label {
        dir = dir.join(l);
    }
    dir.join(format!("seed{seed}"))
}

pub fn run(
    common: &Common,
    strategy: &str,
    selector: &str,
    seed: Option<u64>,
    sweep: &[String],
) -> Result<()> {
    let cfg = load_config(common)?;
    let strategies = if strategy == "all" {
        StrategyId::ALL.to_vec()
    } else {
        vec![strategy.parse::<StrategyId>()?]
    };
    let selector: SelectorMode = selector.parse()?;
    let settings = match parse_sweep(sweep)? {
        None => vec![(None, cfg.clone())],
        Some(s) => s
            .values
            .iter()
            .map(|&v| Ok((Some(s.label(v)), s.apply(&cfg, v)?)))
            .collect::<Result<Vec<_>>>()?,
    };
    let seeds = seed.map_or_else(|| cfg.train.seeds.clone(), |s| vec![s]);
    let bb = load_backbone(&cfg)?;
    let (stream, labels) = materialize(&cfg)?;
    let features = StreamFeatures::extract(&bb, &stream, cfg.train.selector_features)?;
    let ctx = DilContext {
        backbone: &bb,
        stream: &stream,
        labels: &labels,
        features: &features,
    };
    for &strategy in &strategies {
        for (label, c) in &settings {
            let hash = c.hash();
            for &seed in &seeds {
                let started = Instant::now();
                let out = run_strategy(ctx, strategy, &c.prompt, &c.train, seed)?;
                if out.backbone_checksum_after != out.backbone_checksum_before {
                    bail!("backbone changed during {strategy}");
                }
                let dir = run_dir(&cfg, strategy, label.as_deref(), seed);
                let summary = out.summary(selector, &hash);
                write(&dir.join("accuracy.csv"), out.matrix(selector).to_csv())?;
                let summary_path = dir.join("summary.json");
                write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
                let back: Summary = serde_json::from_str(&std::fs::read_to_string(&summary_path)?)?;
                if back != summary {
                    bail!("{} does not read back identically", summary_path.display());
                }
                if let Some(bank) = &out.bank {
                    let path = dir.join("prompt_bank.cppm");
                    bank.save(&path)?;
                    if PromptBank::load(&path)?.checksums() != bank.checksums() {
                        bail!("{} does not read back identically", path.display());
                    }
                }
                eprintln!(
                    "{strategy}{} seed {seed}: AA {:.4} AF {:.4} ({:.1}s)",
                    label.as_ref().map(|l| format!(" {l}")).unwrap_or_default(),
                    summary.aa,
                    summary.af,
                    started.elapsed().as_secs_f64()
                );
                println!("{}", summary_path.display());
            }
        }
    }
    Ok(())
}

pub fn layer_grid(common: &Common, seed: Option<u64>, selector: &str) -> Result<()> {
    let cfg = load_config(common)?;
    let selector: SelectorMode = selector.parse()?;
    let seed = seed.unwrap_or(cfg.train.seeds[0]);
    let bb = load_backbone(&cfg)?;
    let (stream, labels) = materialize(&cfg)?;
    let features = StreamFeatures::extract(&bb, &stream, cfg.train.selector_features)?;
    let ctx = DilContext {
        backbone: &bb,
        stream: &stream,
        labels: &labels,
        features: &features,
    };
    let zero = run_strategy(ctx, StrategyId::ZeroShot, &cfg.prompt, &cfg.train, seed)?;
    let grid = run_layer_grid(
        ctx,
        &cfg.prompt,
        &cfg.train,
        seed,
        selector,
        &Default::default(),
        |s, e, aa| eprintln!("layers {s}..={e}: AA {aa:.4}"),
    )?;
    let dir = cfg.out.join("layer_grid").join(format!("seed{seed}"));
    write(&dir.join("layer_grid.csv"), grid.to_csv())?;
    let report = json!({
        "seed": seed,
        "selector": selector,
        "config_hash": cfg.hash(),
        "zero_shot_aa": zero.matrix(selector).average_accuracy(),
        "grid": grid,
    });
    write(
        &dir.join("layer_grid.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!("{}", dir.join("layer_grid.csv").display());
    Ok(())
}

pub fn dump_attention(
    common: &Common,
    sample: usize,
    domain: usize,
    seed: Option<u64>,
    bank: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(common)?;
    let seed = seed.unwrap_or(cfg.train.seeds[0]);
    let bank_path = bank.unwrap_or_else(|| {
        run_dir(&cfg, StrategyId::CpPrompt, None, seed).join("prompt_bank.cppm")
    });
    if !bank_path.exists() {
        return Err(Error::Usage(format!(
            "no prompt bank at {}; run `cp-prompt run` first",
            bank_path.display()
        ))
        .into());
    }
    let bank = PromptBank::load(&bank_path)?;
    let bb = load_backbone(&cfg)?;
    let (stream, _) = materialize(&cfg)?;
    let set = bank.snapshot(domain).ok_or_else(|| {
        Error::Usage(format!(
            "domain {domain} has no snapshot (bank holds {:?})",
            bank.snapshots().keys().collect::<Vec<_>>()
        ))
    })?;
    let test = &stream
        .domains
        .get(domain.wrapping_sub(1))
        .ok_or_else(|| Error::Usage(format!("domain {domain} is not in the manifest")))?
        .test;
    if sample >= test.len() {
        return Err(Error::Usage(format!(
            "sample {sample} out of range; domain {domain} has {} test samples",
            test.len()
        ))
        .into());
    }
    let layers = cls_attention(&bb, set, test.image(sample), cfg.prompt.prefix_variant)?;
    let dir = cfg
        .out
        .join("attention")
        .join(format!("seed{seed}"))
        .join(format!("domain{domain}_sample{sample}"));
    let (common_rows, patches) = (set.common.len(), bb.config.num_patches());
    for (l, m) in layers.iter().enumerate() {
        let prefix = m.cols() - 1 - common_rows - patches;
        let mut csv = String::from("head,cls");
        (0..common_rows).for_each(|i| write!(csv, ",common{i}").unwrap());
        (0..patches).for_each(|i| write!(csv, ",patch{i}").unwrap());
        (0..prefix).for_each(|i| write!(csv, ",prefix{i}").unwrap());
        csv.push('\n');
        let mut prefix_mass = 0.0;
        for h in 0..m.rows() {
            write!(csv, "{h}").unwrap();
            for v in m.row(h) {
                write!(csv, ",{v:.12}").unwrap();
            }
            csv.push('\n');
            prefix_mass += m.row(h)[m.cols() - prefix..].iter().sum::<f64>();
        }
        let path = dir.join(format!("layer{l}.csv"));
        write(&path, csv)?;
        eprintln!(
            "layer {l}: {} keys, mean prefix mass {:.4}",
            m.cols(),
            prefix_mass / m.rows() as f64
        );
        println!("{}", path.display());
    }
    Ok(())
}
