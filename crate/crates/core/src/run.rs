//! End-to-end commands shared by the CLI and the acceptance suite: each
//! reads a resolved [`RunConfig`] and writes its artifacts under `out`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    load_directory, load_manifest, split, LabeledDataset, LoadReport, SplitSpec, INPUT_SIZE,
};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, save_checkpoint, ArchConfig, Model};
use crate::train::{evaluate, train, EvalReport, RmsPropConfig, TrainConfig, TrainOutcome};

pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_FILE: &str = "best.watt";
pub const CONFIG_FILE: &str = "config.json";
pub const CONFUSION_FILE: &str = "confusion.csv";

/// Everything needed to reproduce a command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub d: usize,
    pub k: usize,
    pub attention: bool,
    /// Class-per-directory root or a `path,class` manifest CSV.
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Side length images are resized to.
    pub input_size: usize,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub undersample: bool,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            command: "train".into(),
            d: 1,
            k: 2,
            attention: true,
            data: None,
            checkpoint: None,
            input_size: INPUT_SIZE,
            seed: t.seed,
            epochs: t.epochs,
            lr: t.optimizer.lr,
            batch: t.batch,
            undersample: t.undersample,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn arch(&self, num_classes: usize) -> Result<ArchConfig> {
        let mut a = ArchConfig::watt(self.d, self.k)?
            .with_attention(self.attention)
            .with_input(self.input_size, self.input_size);
        a.num_classes = num_classes;
        a.validate()?;
        Ok(a)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch: self.batch,
            seed: self.seed,
            optimizer: RmsPropConfig {
                lr: self.lr,
                ..Default::default()
            },
            undersample: self.undersample,
            ..Default::default()
        }
    }

    /// Write the config as pretty JSON to `out/config.json`.
    pub fn write(&self) -> Result<PathBuf> {
        let path = self.out.join(CONFIG_FILE);
        write_file(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| Error::Path {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| Error::Path {
        path: path.to_path_buf(),
        source,
    })
}

/// Load a dataset from a directory tree or, for a `.csv` path, a manifest.
pub fn load_data(path: &Path, size: usize) -> Result<(LabeledDataset, LoadReport)> {
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        load_manifest(path, size)
    } else {
        load_directory(path, size)
    }
}

fn manifest_csv(ds: &LabeledDataset) -> String {
    let mut s = String::from("path,class\n");
    for (p, &l) in ds.paths.iter().zip(&ds.labels) {
        s.push_str(&format!("{},{}\n", p.display(), ds.class_names[l]));
    }
    s
}

pub struct TrainArtifacts {
    pub outcome: TrainOutcome<f32>,
    pub load: LoadReport,
    /// Macro F1 (percent) of the selected weights on the held-out test split.
    pub test_f1: f64,
    pub history: PathBuf,
    pub checkpoint: PathBuf,
    pub config: PathBuf,
}

/// Load, split 4:1:2, train, then write `history.csv`, `best.watt`,
/// `config.json` and `split_{train,valid,test}.csv` manifests.
///
/// A numeric abort still writes every artifact; check `outcome.aborted`.
pub fn run_train(cfg: &RunConfig) -> Result<TrainArtifacts> {
    let data = cfg
        .data
        .as_deref()
        .ok_or_else(|| crate::error::config("train needs a data path"))?;
    let tc = cfg.train_config();
    let (ds, load) = load_data(data, cfg.input_size)?;
    let arch = cfg.arch(ds.num_classes())?;
    let parts = split(
        &ds.labels,
        &ds.class_names,
        &SplitSpec {
            seed: cfg.seed,
            ..Default::default()
        },
    )?;
    let (tr, va, te) = (
        ds.subset(&parts.train),
        ds.subset(&parts.valid),
        ds.subset(&parts.test),
    );
    let config = cfg.write()?;
    for (name, part) in [("train", &tr), ("valid", &va), ("test", &te)] {
        write_file(
            &cfg.out.join(format!("split_{name}.csv")),
            manifest_csv(part),
        )?;
    }
    let model = Model::<f32>::build(&arch, cfg.seed)?;
    log::info!(
        "{}: {} params, {} train / {} valid / {} test images",
        arch.name(),
        model.num_params(),
        tr.len(),
        va.len(),
        te.len()
    );
    let outcome = train(model, &tr, &va, &tc)?;
    let history = cfg.out.join(HISTORY_FILE);
    write_file(&history, outcome.history.to_csv())?;
    let checkpoint = cfg.out.join(CHECKPOINT_FILE);
    let meta = serde_json::json!({
        "class_names": ds.class_names,
        "best_epoch": outcome.best_epoch,
        "best_valid_f1": outcome.best_f1,
        "seed": cfg.seed,
    });
    save_checkpoint(&outcome.model, meta, &checkpoint)?;
    let test_f1 = evaluate(&outcome.model, &te, cfg.batch)?.macro_f1;
    Ok(TrainArtifacts {
        outcome,
        load,
        test_f1,
        history,
        checkpoint,
        config,
    })
}

/// Score a checkpoint on a dataset; writes `confusion.csv` and `pr_class<i>.csv`.
pub fn run_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let ckpt = cfg
        .checkpoint
        .as_deref()
        .ok_or_else(|| crate::error::config("eval needs a checkpoint"))?;
    let data = cfg
        .data
        .as_deref()
        .ok_or_else(|| crate::error::config("eval needs a data path"))?;
    let (model, _) = load_checkpoint::<f32>(ckpt)?;
    let [h, w, _] = model.config.input_shape;
    if h != w {
        return Err(Error::Checkpoint(format!(
            "non-square input {h}x{w} is not supported by the loader"
        )));
    }
    let (ds, _) = load_data(data, h)?;
    if ds.num_classes() != model.config.num_classes {
        return Err(Error::Ingest(format!(
            "checkpoint expects {} classes, data has {}",
            model.config.num_classes,
            ds.num_classes()
        )));
    }
    let resolved = RunConfig {
        d: model.config.d,
        k: model.config.k,
        attention: model.config.attention,
        input_size: h,
        ..cfg.clone()
    };
    resolved.write()?;
    let report = evaluate(&model, &ds, cfg.batch)?;
    write_file(&cfg.out.join(CONFUSION_FILE), report.confusion_csv())?;
    for c in 0..ds.num_classes() {
        write_file(&cfg.out.join(format!("pr_class{c}.csv")), report.pr_csv(c))?;
    }
    Ok(report)
}

/// One row of the d×k×attention grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub d: usize,
    pub k: usize,
    pub attention: bool,
    pub params: usize,
    pub macs: u64,
    pub f1: Option<f64>,
}

/// The variants listed in the reference parameter table.
pub fn default_grid() -> Vec<(usize, usize)> {
    let mut g: Vec<(usize, usize)> = (2..=7).map(|k| (1, k)).collect();
    g.extend((2..=7).map(|k| (3, k)));
    g.extend([(5, 2), (5, 3)]);
    g
}

/// Analytic params and MACs (at 224×224) for each grid point with attention on and off.
pub fn ablation(grid: &[(usize, usize)]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(grid.len() * 2);
    for &(d, k) in grid {
        for attention in [true, false] {
            let s = ArchConfig::watt(d, k)?
                .with_attention(attention)
                .summary()?;
            rows.push(AblationRow {
                d,
                k,
                attention,
                params: s.total_params,
                macs: s.total_macs,
                f1: None,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let with_f1 = rows.iter().any(|r| r.f1.is_some());
    let mut s = String::from("d,k,attention,params,macs");
    s.push_str(if with_f1 { ",f1\n" } else { "\n" });
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}",
            r.d, r.k, r.attention, r.params, r.macs
        ));
        if with_f1 {
            s.push_str(
                &r.f1
                    .map(|f| format!(",{f:.2}"))
                    .unwrap_or_else(|| ",".into()),
            );
        }
        s.push('\n');
    }
    s
}
