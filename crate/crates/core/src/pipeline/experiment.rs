use std::fmt::Write as _;
use std::path::Path;

use super::{create_dir, derive_seed, Dataset, PipelineConfig, PipelineError, Table1Grid};
use crate::latentnet::{save_checkpoint, decode_many, dn_predict_many, encode_means, train, TrainMode, TrainingSet};
use crate::surrogate::{build_basis, fit};

pub const METRIC_NAMES: [&str; 5] = ["dn_train_mse", "dn_test_mse", "gp_test_mse", "recon_train_mse", "recon_test_mse"];
const DN_TEST: usize = 1;
const GP_TEST: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub latent_dim: usize,
    pub doubled: bool,
    pub mode: TrainMode,
}

impl ModelSpec {
    pub fn checkpoint_name(&self, seed: u64) -> String {
        format!("{}_d{}_{}_seed{seed}.ckpt", self.mode, self.latent_dim, if self.doubled { "doubled" } else { "base" })
    }

    pub fn name(&self) -> String {
        format!("{} d{} {}", self.mode, self.latent_dim, if self.doubled { "doubled" } else { "base" })
    }
}

/// Per-model metrics, averaged over seeds, plus the row-normalized view.
#[derive(Debug, Clone, PartialEq)]
pub struct Table1 {
    pub specs: Vec<ModelSpec>,
    pub seeds: Vec<u64>,
    /// `per_seed[model][seed]`; `None` marks a failed training run.
    pub per_seed: Vec<Vec<Option<[f64; 5]>>>,
}

impl Table1 {
    /// Seed average of one model, `None` if any seed failed.
    pub fn mean(&self, model: usize) -> Option<[f64; 5]> {
        let runs = &self.per_seed[model];
        let mut acc = [0.0; 5];
        for r in runs {
            let r = (*r)?;
            acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
        }
        Some(acc.map(|a| a / runs.len() as f64))
    }

    /// Every metric divided by its maximum over the models.
    pub fn normalized(&self) -> Vec<Option<[f64; 5]>> {
        let means: Vec<Option<[f64; 5]>> = (0..self.specs.len()).map(|m| self.mean(m)).collect();
        let mut max = [0.0f64; 5];
        for m in means.iter().flatten() {
            max.iter_mut().zip(m).for_each(|(a, &v)| *a = a.max(v));
        }
        means.into_iter().map(|m| m.map(|m| std::array::from_fn(|k| m[k] / max[k]))).collect()
    }

    /// Mean of metric `k` over all models trained in `mode`.
    pub fn mode_mean(&self, mode: TrainMode, k: usize) -> Option<f64> {
        let vals: Vec<f64> = (0..self.specs.len())
            .filter(|&m| self.specs[m].mode == mode)
            .map(|m| self.mean(m).map(|v| v[k]))
            .collect::<Option<_>>()?;
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Whether joint training beats separate training on drag-net and
    /// surrogate test error.
    pub fn joint_wins(&self) -> Option<(bool, bool)> {
        let j = (self.mode_mean(TrainMode::Joint, DN_TEST)?, self.mode_mean(TrainMode::Joint, GP_TEST)?);
        let s = (self.mode_mean(TrainMode::Separate, DN_TEST)?, self.mode_mean(TrainMode::Separate, GP_TEST)?);
        Some((j.0 < s.0, j.1 < s.1))
    }

    /// Normalized table, then seed means and per-seed raw values.
    pub fn to_text(&self) -> String {
        let mut s = String::from("metric");
        for spec in &self.specs {
            write!(s, "\t{}", spec.name()).unwrap();
        }
        s.push('\n');
        let cell = |v: Option<f64>| v.map_or_else(|| "failed".to_string(), |v| format!("{v:.4}"));
        let norm = self.normalized();
        for (k, name) in METRIC_NAMES.iter().enumerate() {
            s.push_str(name);
            for m in &norm {
                write!(s, "\t{}", cell(m.map(|v| v[k]))).unwrap();
            }
            s.push('\n');
        }
        s.push_str("\n# seed means\n");
        for (k, name) in METRIC_NAMES.iter().enumerate() {
            s.push_str(name);
            for m in 0..self.specs.len() {
                write!(s, "\t{}", self.mean(m).map_or_else(|| "failed".into(), |v| format!("{:e}", v[k]))).unwrap();
            }
            s.push('\n');
        }
        for (i, seed) in self.seeds.iter().enumerate() {
            writeln!(s, "\n# seed {seed}").unwrap();
            for (k, name) in METRIC_NAMES.iter().enumerate() {
                s.push_str(name);
                for runs in &self.per_seed {
                    write!(s, "\t{}", runs[i].map_or_else(|| "failed".into(), |v| format!("{:e}", v[k]))).unwrap();
                }
                s.push('\n');
            }
        }
        s
    }
}

fn specs(cfg: &PipelineConfig) -> Vec<ModelSpec> {
    let (dims, widths): (Vec<usize>, Vec<bool>) = match cfg.table1_grid {
        Table1Grid::Desk => (vec![cfg.latent_dim], vec![false]),
        Table1Grid::Full => (vec![10, 20], vec![false, true]),
    };
    let mut out = Vec::new();
    for mode in [TrainMode::Joint, TrainMode::Separate] {
        for &latent_dim in &dims {
            for &doubled in &widths {
                out.push(ModelSpec { latent_dim, doubled, mode });
            }
        }
    }
    out
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

struct Split {
    images: Vec<f32>,
    labels: Vec<f64>,
}

fn run_one(
    cfg: &PipelineConfig,
    spec: &ModelSpec,
    seed: u64,
    tr: &Split,
    te: &Split,
    checkpoints: Option<&Path>,
) -> Result<[f64; 5], PipelineError> {
    let mut tc = cfg.train_config(spec.mode, seed);
    tc.latent_dim = spec.latent_dim;
    if spec.doubled {
        let net = tc.net().doubled();
        tc.dense_units = net.dense_units;
        tc.dn_units = net.dn_units;
    }
    let labels: Vec<f32> = tr.labels.iter().map(|&y| y as f32).collect();
    let set = TrainingSet::new(cfg.pixels(), tr.images.clone(), labels)?;
    let (params, _) = train(&set, &tc)?;
    if let Some(dir) = checkpoints {
        save_checkpoint(&dir.join(spec.checkpoint_name(seed)), &params)?;
    }

    let eval = |s: &Split| -> Result<(Vec<f64>, f64, f64), PipelineError> {
        let (mus, _) = encode_means(&params, &s.images)?;
        let flat: Vec<f32> = mus.concat();
        let dn = to_f64(&dn_predict_many(&flat, &params)?);
        let recon = to_f64(&decode_many(&flat, &params)?);
        Ok((to_f64(&flat), mse(&dn, &s.labels), mse(&recon, &to_f64(&s.images))))
    };
    let (z_tr, dn_tr, rec_tr) = eval(tr)?;
    let (z_te, dn_te, rec_te) = eval(te)?;

    let basis = build_basis(cfg.table1_m, &vec![cfg.lengthscale; spec.latent_dim], cfg.sigma_f, derive_seed(seed, 1))?;
    let model = fit(&z_tr, &tr.labels, &basis, cfg.sigma_n)?;
    let mut gp = Vec::with_capacity(te.labels.len());
    for z in z_te.chunks(spec.latent_dim) {
        gp.push(model.predict(z)?.0);
    }
    Ok([dn_tr, dn_te, mse(&gp, &te.labels), rec_tr, rec_te])
}

/// Trains every model of the configured grid for `table1_seeds` seeds
/// (`seed`, `seed + 1`, ...) and measures drag-net, surrogate and
/// reconstruction errors in standardized units. A failed run marks its
/// cell and the experiment continues. Trained parameters are kept in
/// `checkpoints` when given.
pub fn run_table1_experiment(dataset: &Dataset, cfg: &PipelineConfig, checkpoints: Option<&Path>) -> Result<Table1, PipelineError> {
    if let Some(dir) = checkpoints {
        create_dir(dir)?;
    }
    let load = |rows: Vec<&super::ManifestRow>| -> Result<Split, PipelineError> {
        Ok(Split { images: dataset.images(&rows)?, labels: dataset.labels(&rows) })
    };
    let tr = load(dataset.train_rows())?;
    let te = load(dataset.test_rows())?;
    if te.labels.is_empty() {
        return Err(PipelineError::Numerical("empty test split".into()));
    }
    let specs = specs(cfg);
    let seeds: Vec<u64> = (0..cfg.table1_seeds as u64).map(|k| cfg.seed.wrapping_add(k)).collect();
    let mut per_seed = Vec::new();
    for spec in &specs {
        let mut runs = Vec::new();
        for &seed in &seeds {
            let t = std::time::Instant::now();
            match run_one(cfg, spec, seed, &tr, &te, checkpoints) {
                Ok(m) => {
                    log::info!("{} seed {seed}: {m:?} ({:.0}s)", spec.name(), t.elapsed().as_secs_f64());
                    runs.push(Some(m));
                }
                Err(e) => {
                    log::warn!("{} seed {seed} failed: {e}", spec.name());
                    runs.push(None);
                }
            }
        }
        per_seed.push(runs);
    }
    Ok(Table1 { specs, seeds, per_seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(values: &[[f64; 5]]) -> Table1 {
        let modes = [TrainMode::Joint, TrainMode::Joint, TrainMode::Separate, TrainMode::Separate];
        Table1 {
            specs: (0..values.len()).map(|i| ModelSpec { latent_dim: 20, doubled: i % 2 == 1, mode: modes[i] }).collect(),
            seeds: vec![0],
            per_seed: values.iter().map(|v| vec![Some(*v)]).collect(),
        }
    }

    #[test]
    fn grids() {
        let mut cfg = PipelineConfig::default();
        assert_eq!(specs(&cfg).len(), 2);
        cfg.table1_grid = Table1Grid::Full;
        let s = specs(&cfg);
        assert_eq!(s.len(), 8);
        assert!(s[..4].iter().all(|m| m.mode == TrainMode::Joint));
        assert!(s[4..].iter().all(|m| m.mode == TrainMode::Separate));
    }

    #[test]
    fn normalization_puts_a_one_in_every_row() {
        let t = table(&[[1.0, 2.0, 3.0, 4.0, 5.0], [2.0, 1.0, 0.5, 8.0, 1.0], [0.5, 4.0, 3.0, 2.0, 9.0], [3.0, 3.0, 1.0, 1.0, 1.0]]);
        let n = t.normalized();
        for k in 0..5 {
            let col: Vec<f64> = n.iter().map(|m| m.unwrap()[k]).collect();
            assert!(col.iter().all(|&v| v > 0.0 && v <= 1.0));
            assert!(col.contains(&1.0));
        }
        assert_eq!(t.mode_mean(TrainMode::Joint, DN_TEST), Some(1.5));
        assert_eq!(t.joint_wins(), Some((true, true)));
        let text = t.to_text();
        assert_eq!(text.lines().next().unwrap().split('\t').count(), 5);
    }

    #[test]
    fn failed_cells_are_marked() {
        let mut t = table(&[[1.0; 5], [2.0; 5]]);
        t.per_seed[1][0] = None;
        assert!(t.normalized()[1].is_none());
        assert!(t.to_text().contains("failed"));
    }
}
