//! Subcommand implementations: gen, train, cap, synonyms, report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use carma_core::data::io::{load_dataset, save_dataset, sha256_hex, write_atomic};
use carma_core::data::{Dataset, SplitName, Task};
use carma_core::interventions::{run_cap_eval, run_synonym_eval, PoolMode};
use carma_core::metrics::{cv, ni, CvEstimator, RunRecord};
use carma_core::model::Transformer;
use carma_core::trainer::{train, TrainLog, Variant};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

const VARIANT_ORDER: [Variant; 3] = [Variant::Original, Variant::Ft, Variant::Carma];

/// Default output root: `$CARMA_LAB_DIR` or `./carma_lab`.
pub fn lab_dir() -> PathBuf {
    std::env::var_os("CARMA_LAB_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("carma_lab"))
}

pub fn run_dir(root: &Path, variant: Variant, task: &str, seed: u64) -> PathBuf {
    root.join(variant.to_string()).join(task).join(seed.to_string())
}

fn provenance_line(command: &str, params_hash: &str) -> String {
    format!("# carma v{CODE_VERSION} command={command} config_hash={params_hash}\n")
}

// ---------------------------------------------------------------- gen ----

pub fn cmd_gen(task: &str, seed: u64, n: usize, out: Option<PathBuf>) -> Result<PathBuf> {
    let task: Task = task.parse()?;
    let ds = Dataset::regenerate(task, seed, n)?;
    let dir = out.unwrap_or_else(|| lab_dir().join("data").join(format!("{task}-s{seed}-n{n}")));
    save_dataset(&ds, &dir)?;
    println!(
        "wrote {} ({} train / {} val / {} test, vocab {})",
        dir.display(),
        ds.split.train.len(),
        ds.split.validation.len(),
        ds.split.test.len(),
        ds.vocab_size()
    );
    Ok(dir)
}

// -------------------------------------------------------------- train ----

/// Everything the result CSVs need to know about one finished run.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub task: String,
    pub seed: u64,
    pub config_hash: String,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub val_accuracy_per_epoch: Vec<f64>,
    pub steps: usize,
    pub train_wall_ms: f64,
    pub total_wall_ms: f64,
    pub empty_anchor_steps: usize,
}

fn train_one_seed(
    cfg: &RunConfig,
    dataset: &Dataset,
    variant: Variant,
    seed: u64,
    out_root: &Path,
) -> Result<()> {
    let mcfg = cfg.model.to_transformer_config(dataset.vocab_size());
    let mut model = Transformer::new(mcfg, seed)?;

    let log: TrainLog;
    match variant {
        Variant::Original => {
            let mut tc = cfg.to_train_config(Variant::Original, seed);
            if cfg.train.pretrain_epochs > 0 {
                tc.epochs = cfg.train.pretrain_epochs;
            }
            (model, log) = train(model, dataset, &tc)?;
        }
        Variant::Ft | Variant::Carma => {
            if cfg.train.pretrain_epochs > 0 {
                let mut pre = cfg.to_train_config(Variant::Original, seed);
                pre.epochs = cfg.train.pretrain_epochs;
                (model, _) = train(model, dataset, &pre)?;
            }
            let tc = cfg.to_train_config(variant, seed);
            (model, log) = train(model, dataset, &tc)?;
        }
    }

    let dir = run_dir(out_root, variant, &dataset.task.to_string(), seed);
    std::fs::create_dir_all(&dir)?;
    model.save_checkpoint(&dir.join("checkpoint.json"))?;
    write_atomic(&dir.join("trainlog.jsonl"), log.steps_jsonl().as_bytes())?;
    let summary = RunSummary {
        variant,
        task: dataset.task.to_string(),
        seed,
        config_hash: cfg.hash()?,
        best_epoch: log.best_epoch,
        best_val_accuracy: log.best_val_accuracy,
        val_accuracy_per_epoch: log.epochs.iter().map(|e| e.val_accuracy).collect(),
        steps: log.steps.len(),
        train_wall_ms: log.train_wall_ms,
        total_wall_ms: log.total_wall_ms,
        empty_anchor_steps: log.empty_anchor_steps,
    };
    let mut summary_json = serde_json::to_string_pretty(&summary)?;
    summary_json.push('\n');
    write_atomic(&dir.join("summary.json"), summary_json.as_bytes())?;
    let mut cfg_json = serde_json::to_string_pretty(cfg)?;
    cfg_json.push('\n');
    write_atomic(&dir.join("runconfig.json"), cfg_json.as_bytes())?;
    log::info!(
        "{variant}/{}/{seed}: best val {:.1}% at epoch {}",
        dataset.task,
        summary.best_val_accuracy,
        summary.best_epoch
    );
    Ok(())
}

pub fn cmd_train(
    cfg: &RunConfig,
    data_dir: &Path,
    variant: Variant,
    seeds: &[u64],
    out_root: &Path,
    jobs: usize,
) -> Result<()> {
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    let dataset = load_dataset(data_dir)?;
    let jobs = jobs.max(1);
    std::thread::scope(|scope| -> Result<()> {
        let mut results = Vec::new();
        for chunk in seeds.chunks(jobs) {
            let mut handles = Vec::new();
            for &seed in chunk {
                let ds = &dataset;
                handles.push((
                    seed,
                    scope.spawn(move || train_one_seed(cfg, ds, variant, seed, out_root)),
                ));
            }
            for (seed, h) in handles {
                let r = h
                    .join()
                    .map_err(|_| anyhow!("training thread for seed {seed} panicked"))?;
                results.push(r.with_context(|| format!("seed {seed}")));
            }
        }
        results.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(())
    })?;
    println!(
        "trained {} x {} seeds into {}",
        variant,
        seeds.len(),
        out_root.display()
    );
    Ok(())
}

// ------------------------------------------------------- run discovery ----

pub struct RunRef {
    pub seed: u64,
    pub dir: PathBuf,
}

/// Runs under `root` for `task`, grouped by variant in canonical order.
pub fn discover_runs(root: &Path, task: &str) -> Result<Vec<(Variant, Vec<RunRef>)>> {
    let mut out = Vec::new();
    for variant in VARIANT_ORDER {
        let vdir = root.join(variant.to_string()).join(task);
        if !vdir.is_dir() {
            continue;
        }
        let mut seeds: Vec<u64> = std::fs::read_dir(&vdir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_string_lossy().parse().ok())
            .collect();
        seeds.sort_unstable();
        let runs: Vec<RunRef> = seeds
            .into_iter()
            .map(|seed| RunRef {
                seed,
                dir: vdir.join(seed.to_string()),
            })
            .filter(|r| r.dir.join("checkpoint.json").is_file())
            .collect();
        if !runs.is_empty() {
            out.push((variant, runs));
        }
    }
    if out.is_empty() {
        bail!("no runs for task {task:?} under {}", root.display());
    }
    Ok(out)
}

// ---------------------------------------------------------------- cap ----

pub fn cmd_cap(
    runs_root: &Path,
    data_dir: &Path,
    layers_arg: &str,
    modes_arg: &str,
    split: SplitName,
    out: Option<PathBuf>,
) -> Result<PathBuf> {
    let dataset = load_dataset(data_dir)?;
    let task = dataset.task.to_string();
    let groups = discover_runs(runs_root, &task)?;

    let first = Transformer::load_checkpoint(&groups[0].1[0].dir.join("checkpoint.json"))?;
    let n_layers = first.config().n_layers;
    let layers: Vec<usize> = if layers_arg == "all" {
        (1..=n_layers).collect()
    } else {
        parse_list(layers_arg).context("parsing --layers")?
    };
    for &l in &layers {
        if l == 0 || l > n_layers {
            bail!("layer {l} outside 1..={n_layers}");
        }
    }
    let all_modes = modes_arg == "all";
    let modes: Vec<PoolMode> = if all_modes {
        PoolMode::ALL.to_vec()
    } else {
        modes_arg
            .split(',')
            .map(|m| m.trim().parse().map_err(anyhow::Error::from))
            .collect::<Result<_>>()?
    };

    let params = format!(
        "{{\"runs\":{:?},\"data\":{:?},\"layers\":{layers:?},\"modes\":{modes_arg:?},\"split\":\"{split}\"}}",
        runs_root.display().to_string(),
        data_dir.display().to_string()
    );
    let mut csv = provenance_line("cap", &sha256_hex(params.as_bytes()));
    csv.push_str("variant,task,split,layer,layer_frac,mode,accuracy,n_seeds\n");
    let mut records: Vec<RunRecord> = Vec::new();

    for (variant, runs) in &groups {
        let models: Vec<(u64, Transformer)> = runs
            .iter()
            .map(|r| {
                Ok((
                    r.seed,
                    Transformer::load_checkpoint(&r.dir.join("checkpoint.json"))?,
                ))
            })
            .collect::<carma_core::Result<_>>()?;
        for &layer in &layers {
            let mut per_mode = Vec::new();
            for &mode in &modes {
                let mut acc_sum = 0.0;
                for (seed, model) in &models {
                    let r = run_cap_eval(model, &dataset, split, layer, mode)?;
                    acc_sum += r.accuracy;
                    records.push(RunRecord {
                        variant: *variant,
                        task: task.clone(),
                        intervention: "cap".into(),
                        param: mode.to_string(),
                        layer: Some(layer),
                        seed: Some(*seed),
                        metric: "accuracy".into(),
                        value: r.accuracy,
                    });
                }
                let acc = acc_sum / models.len() as f64;
                per_mode.push(acc);
                csv.push_str(&format!(
                    "{variant},{task},{split},{layer},{:.4},{mode},{acc:.4},{}\n",
                    layer as f64 / n_layers as f64,
                    models.len()
                ));
            }
            if all_modes {
                let avg = per_mode.iter().sum::<f64>() / per_mode.len() as f64;
                csv.push_str(&format!(
                    "{variant},{task},{split},{layer},{:.4},avg3,{avg:.4},{}\n",
                    layer as f64 / n_layers as f64,
                    models.len()
                ));
            }
        }
    }

    let out = out.unwrap_or_else(|| lab_dir().join("results").join(format!("cap_{task}.csv")));
    write_atomic(&out, csv.as_bytes())?;
    write_records(&out, "cap", &params, &records)?;
    println!("wrote {}", out.display());
    Ok(out)
}

/// Long-format per-seed rows next to an aggregate CSV.
fn write_records(main_out: &Path, command: &str, params: &str, records: &[RunRecord]) -> Result<()> {
    let mut csv = provenance_line(command, &sha256_hex(params.as_bytes()));
    csv.push_str(RunRecord::CSV_HEADER);
    csv.push('\n');
    for r in records {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    let stem = main_out
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| command.to_string());
    let path = main_out.with_file_name(format!("{stem}_records.csv"));
    write_atomic(&path, csv.as_bytes())?;
    Ok(())
}

// ----------------------------------------------------------- synonyms ----

pub fn cmd_synonyms(
    runs_root: &Path,
    data_dir: &Path,
    rates: &[f64],
    eval_seeds: &[u64],
    split: SplitName,
    estimator: CvEstimator,
    out: Option<PathBuf>,
) -> Result<PathBuf> {
    if eval_seeds.is_empty() {
        bail!("no evaluation seeds given");
    }
    if eval_seeds.len() < 5 {
        log::warn!(
            "only {} evaluation seeds; the paper protocol repeats >= 5 times",
            eval_seeds.len()
        );
    }
    let dataset = load_dataset(data_dir)?;
    let task = dataset.task.to_string();
    let groups = discover_runs(runs_root, &task)?;

    let params = format!(
        "{{\"runs\":{:?},\"data\":{:?},\"rates\":{rates:?},\"eval_seeds\":{eval_seeds:?},\"split\":\"{split}\",\"estimator\":{estimator:?}}}",
        runs_root.display().to_string(),
        data_dir.display().to_string()
    );
    let mut csv = provenance_line("synonyms", &sha256_hex(params.as_bytes()));
    csv.push_str("variant,task,intervention,rate,split,cs,cv,ni,n_runs,n_eval_seeds,flag\n");

    // (rate -> per-variant grand CS) for the NI column.
    let mut cs_table: BTreeMap<(String, Variant), f64> = BTreeMap::new();
    let mut rows = Vec::new();
    let mut records: Vec<RunRecord> = Vec::new();
    for &rate in rates {
        let rate_key = format!("{rate}");
        for (variant, runs) in &groups {
            let mut run_means: Vec<f64> = Vec::new();
            let mut single_run_values: Vec<f64> = Vec::new();
            for r in runs {
                let model = Transformer::load_checkpoint(&r.dir.join("checkpoint.json"))?;
                let per_seed = run_synonym_eval(&model, &dataset, split, rate, eval_seeds)?;
                let values: Vec<f64> = per_seed.into_iter().flatten().collect();
                if values.is_empty() {
                    log::warn!(
                        "{variant}/{}/{}: nothing correct before perturbation; ConsistSyn undefined",
                        task,
                        r.seed
                    );
                    continue;
                }
                if runs.len() == 1 {
                    single_run_values = values.clone();
                }
                let mean = values.iter().sum::<f64>() / values.len() as f64;
                records.push(RunRecord {
                    variant: *variant,
                    task: task.clone(),
                    intervention: "synonym".into(),
                    param: rate_key.clone(),
                    layer: None,
                    seed: Some(r.seed),
                    metric: "consist_syn".into(),
                    value: mean,
                });
                run_means.push(mean);
            }
            if run_means.is_empty() {
                rows.push((rate_key.clone(), *variant, None, None, 0, "missing".into()));
                continue;
            }
            let cs = run_means.iter().sum::<f64>() / run_means.len() as f64;
            // CV across training seeds; with one run, across perturbation seeds.
            let cv_basis: &[f64] = if run_means.len() >= 2 {
                &run_means
            } else {
                &single_run_values
            };
            let cv_value = if cv_basis.len() >= 2 {
                cv(cv_basis, estimator)?
            } else {
                None
            };
            let flag = if cv_basis.len() >= 5 { "ok" } else { "insufficient" };
            cs_table.insert((rate_key.clone(), *variant), cs);
            rows.push((
                rate_key.clone(),
                *variant,
                Some(cs),
                cv_value,
                run_means.len(),
                flag.into(),
            ));
        }
    }

    for (rate_key, variant, cs, cv_value, n_runs, flag) in rows {
        let ni_cell = match (variant, cs) {
            (Variant::Ft, _) | (_, None) => "-".to_string(),
            (_, Some(cs_v)) => match cs_table.get(&(rate_key.clone(), Variant::Ft)) {
                Some(&baseline) if baseline > 0.0 => format!("{:.2}", ni(cs_v, baseline)?),
                _ => {
                    log::warn!("no ft baseline for rate {rate_key}; NI left empty");
                    "-".to_string()
                }
            },
        };
        let cs_cell = cs.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into());
        let cv_cell = cv_value
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "-".into());
        let flag: String = flag;
        csv.push_str(&format!(
            "{variant},{task},synonym,{rate_key},{split},{cs_cell},{cv_cell},{ni_cell},{n_runs},{},{flag}\n",
            eval_seeds.len()
        ));
    }

    let out = out.unwrap_or_else(|| lab_dir().join("results").join(format!("synonyms_{task}.csv")));
    write_atomic(&out, csv.as_bytes())?;
    write_records(&out, "synonyms", &params, &records)?;
    println!("wrote {}", out.display());
    Ok(out)
}

// -------------------------------------------------------------- report ----

#[derive(Debug, Clone)]
struct CapRow {
    variant: String,
    task: String,
    layer_frac: f64,
    mode: String,
    accuracy: f64,
}

fn parse_cap_csv(text: &str) -> Vec<CapRow> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("variant,"))
        .filter_map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() < 8 {
                return None;
            }
            Some(CapRow {
                variant: f[0].into(),
                task: f[1].into(),
                layer_frac: f[4].parse().ok()?,
                mode: f[5].into(),
                accuracy: f[6].parse().ok()?,
            })
        })
        .collect()
}

pub fn cmd_report(results_dir: &Path, out_dir: Option<PathBuf>, svg: bool) -> Result<PathBuf> {
    let out_dir = out_dir.unwrap_or_else(|| lab_dir().join("report"));
    let mut cap_files = Vec::new();
    let mut syn_files = Vec::new();
    if results_dir.is_dir() {
        for entry in std::fs::read_dir(results_dir)? {
            let p = entry?.path();
            let name = p.file_name().map(|n| n.to_string_lossy().to_string());
            match name.as_deref() {
                Some(n) if n.ends_with("_records.csv") => {}
                Some(n) if n.starts_with("cap_") && n.ends_with(".csv") => cap_files.push(p),
                Some(n) if n.starts_with("synonyms_") && n.ends_with(".csv") => syn_files.push(p),
                _ => {}
            }
        }
    }
    cap_files.sort();
    syn_files.sort();
    if cap_files.is_empty() && syn_files.is_empty() {
        bail!(
            "no cap_*.csv or synonyms_*.csv results under {}",
            results_dir.display()
        );
    }

    let mut md = String::from("# CARMA desk-scale report\n\n");
    md.push_str(&format!("code version: v{CODE_VERSION}\n\n"));

    for syn in &syn_files {
        let text = std::fs::read_to_string(syn)?;
        md.push_str(&format!(
            "## Synonym replacement ({})\n\n",
            syn.file_name().unwrap_or_default().to_string_lossy()
        ));
        md.push_str("| Variant | Task | Int. | CS | CV | NI |\n|---|---|---|---|---|---|\n");
        for line in text
            .lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with("variant,"))
        {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() >= 11 {
                md.push_str(&format!(
                    "| {} | {} | {}% | {} | {} | {} |\n",
                    f[0],
                    f[1],
                    (f[3].parse::<f64>().unwrap_or(0.0) * 100.0).round(),
                    f[5],
                    f[6],
                    f[7]
                ));
            }
        }
        md.push('\n');
    }

    for cap in &cap_files {
        let text = std::fs::read_to_string(cap)?;
        let rows = parse_cap_csv(&text);
        let avg_rows: Vec<&CapRow> = rows.iter().filter(|r| r.mode == "avg3").collect();
        let used: Vec<&CapRow> = if avg_rows.is_empty() {
            rows.iter().collect()
        } else {
            avg_rows
        };
        let Some(first) = used.first() else { continue };
        let task = first.task.clone();

        // Plot data: x = normalized layer, y = accuracy, series = variant.
        let mut plot = String::from("layer_frac,variant,accuracy\n");
        let mut series: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for r in &used {
            plot.push_str(&format!(
                "{:.4},{},{:.4}\n",
                r.layer_frac, r.variant, r.accuracy
            ));
            series
                .entry(r.variant.clone())
                .or_default()
                .push((r.layer_frac, r.accuracy));
        }
        let plot_path = out_dir.join(format!("plot_cap_{task}.csv"));
        write_atomic(&plot_path, plot.as_bytes())?;
        md.push_str(&format!(
            "## CAP layer sweep ({task})\n\nplot data: `{}`\n\n",
            plot_path.display()
        ));
        if svg {
            let svg_path = out_dir.join(format!("plot_cap_{task}.svg"));
            let rendered = crate::svg::line_plot(
                &format!("pooled accuracy vs layer ({task})"),
                "layer / L",
                "accuracy %",
                &series,
            );
            write_atomic(&svg_path, rendered.as_bytes())?;
            md.push_str(&format!("figure: `{}`\n\n", svg_path.display()));
        }
    }

    // Training overhead from run summaries, when runs sit next to results.
    let runs_root = results_dir.parent().map(|p| p.join("runs"));
    if let Some(runs_root) = runs_root.filter(|p| p.is_dir()) {
        let mut wall: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
        for entry in walk_summaries(&runs_root)? {
            let text = std::fs::read_to_string(&entry)?;
            if let Ok(s) = serde_json::from_str::<RunSummary>(&text) {
                wall.entry((s.task.clone(), s.variant.to_string()))
                    .or_default()
                    .push(s.train_wall_ms);
            }
        }
        let tasks: std::collections::BTreeSet<String> =
            wall.keys().map(|(t, _)| t.clone()).collect();
        for task in tasks {
            let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
            if let (Some(ft), Some(carma)) = (
                wall.get(&(task.clone(), "ft".into())),
                wall.get(&(task.clone(), "carma".into())),
            ) {
                let ratio = mean(carma) / mean(ft);
                let band = if (1.1..=10.0).contains(&ratio) {
                    "inside"
                } else {
                    "outside"
                };
                md.push_str(&format!(
                    "## Training overhead ({task})\n\nCARMA / FT wall-clock ratio: **x{ratio:.2}** \
                     ({band} the x1.1-x10 plausibility band; hardware-dependent).\n\n",
                ));
            }
        }
    }

    let md_path = out_dir.join("summary.md");
    write_atomic(&md_path, md.as_bytes())?;
    println!("wrote {}", md_path.display());
    Ok(md_path)
}

fn walk_summaries(runs_root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for variant in std::fs::read_dir(runs_root)? {
        let vdir = variant?.path();
        if !vdir.is_dir() {
            continue;
        }
        for task in std::fs::read_dir(&vdir)? {
            let tdir = task?.path();
            if !tdir.is_dir() {
                continue;
            }
            for seed in std::fs::read_dir(&tdir)? {
                let s = seed?.path().join("summary.json");
                if s.is_file() {
                    out.push(s);
                }
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn parse_list<T: std::str::FromStr>(arg: &str) -> Result<Vec<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    arg.split(',')
        .map(|s| s.trim().parse::<T>().map_err(anyhow::Error::from))
        .collect()
}

/// Replacement-rate list with range validation.
pub fn parse_rate_list(arg: &str) -> Result<Vec<f64>> {
    let rates: Vec<f64> = parse_list(arg)?;
    for &r in &rates {
        if !(r > 0.0 && r <= 1.0) {
            bail!("rate {r} not in (0, 1]");
        }
    }
    Ok(rates)
}
