use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{create_dir, derive_seed, io_err, read_text, write_file, PipelineConfig, PipelineError};
use crate::flowsim::{simulate, FlowSetup};
use crate::numfmt::real;
use crate::shapegen::{frontal_area, generate_shape, read_contour, write_contour, BinaryImage, ShapeConfig};

pub const MANIFEST: &str = "manifest.tsv";
const COLUMNS: &str = "id\tseed\tcd\tfrontal_area\tconverged\timage\tcontour\tsplit";
const TRAIN_FRACTION: f64 = 0.8;
const MAX_FAILURE_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Generation parameters, stored as the manifest's first line so that every
/// later simulation can reuse the exact solver settings.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub seed: u64,
    pub n: usize,
    pub config: PipelineConfig,
}

const HEADER_KEYS: [&str; 14] = [
    "domain_lx",
    "domain_ly",
    "resolution",
    "rho",
    "nu",
    "v_in",
    "steady_tol",
    "max_iters",
    "r_min",
    "r_max",
    "n_angles",
    "fourier_k",
    "seed",
    "n",
];

impl DatasetHeader {
    /// Keeps only the fields that influence generation.
    pub fn new(cfg: &PipelineConfig, n: usize, seed: u64) -> Self {
        let d = PipelineConfig::default();
        let config = PipelineConfig {
            domain_lx: cfg.domain_lx,
            domain_ly: cfg.domain_ly,
            resolution: cfg.resolution,
            rho: cfg.rho,
            nu: cfg.nu,
            v_in: cfg.v_in,
            steady_tol: cfg.steady_tol,
            max_iters: cfg.max_iters,
            r_min: cfg.r_min,
            r_max: cfg.r_max,
            n_angles: cfg.n_angles,
            fourier_k: cfg.fourier_k,
            ..d
        };
        Self { seed, n, config }
    }

    fn to_line(&self) -> String {
        let c = &self.config;
        let values = [
            real(c.domain_lx),
            real(c.domain_ly),
            real(c.resolution),
            real(c.rho),
            real(c.nu),
            real(c.v_in),
            real(c.steady_tol),
            c.max_iters.to_string(),
            real(c.r_min),
            real(c.r_max),
            c.n_angles.to_string(),
            c.fourier_k.to_string(),
            self.seed.to_string(),
            self.n.to_string(),
        ];
        let kv: Vec<String> = HEADER_KEYS.iter().zip(values).map(|(k, v)| format!("{k}={v}")).collect();
        format!("# {}", kv.join(" "))
    }

    fn parse_line(line: &str) -> Result<Self, PipelineError> {
        let body = line.strip_prefix("# ").ok_or_else(|| PipelineError::Manifest("missing header line".into()))?;
        let mut cfg = PipelineConfig::default();
        let (mut seed, mut n) = (None, None);
        for kv in body.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| PipelineError::Manifest(format!("bad header field {kv:?}")))?;
            let bad = || PipelineError::Manifest(format!("bad header value {kv:?}"));
            match k {
                "seed" => seed = Some(v.parse().map_err(|_| bad())?),
                "n" => n = Some(v.parse().map_err(|_| bad())?),
                _ if HEADER_KEYS.contains(&k) => cfg.set(k, v).map_err(|_| bad())?,
                _ => return Err(PipelineError::Manifest(format!("unknown header field {k:?}"))),
            }
        }
        match (seed, n) {
            (Some(seed), Some(n)) => Ok(Self::new(&cfg, n, seed)),
            _ => Err(PipelineError::Manifest("header lacks seed or n".into())),
        }
    }

    pub fn flow_setup(&self) -> FlowSetup {
        self.config.flow_setup()
    }

    pub fn shape_config(&self) -> ShapeConfig {
        self.config.shape_config()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: usize,
    /// Seed that regenerates the shape on its first attempt.
    pub seed: u64,
    /// NaN when the simulation failed or did not converge.
    pub cd: f64,
    pub frontal_area: f64,
    pub converged: bool,
    /// Paths relative to the dataset directory.
    pub image: String,
    pub contour: String,
    pub split: Split,
}

impl ManifestRow {
    fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.id,
            self.seed,
            real(self.cd),
            real(self.frontal_area),
            u8::from(self.converged),
            self.image,
            self.contour,
            self.split.name()
        )
    }

    fn parse(line: &str) -> Result<Self, PipelineError> {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |what: &str| PipelineError::Manifest(format!("bad {what} in row {line:?}"));
        if f.len() != 8 {
            return Err(bad("column count"));
        }
        Ok(Self {
            id: f[0].parse().map_err(|_| bad("id"))?,
            seed: f[1].parse().map_err(|_| bad("seed"))?,
            cd: f[2].parse().map_err(|_| bad("cd"))?,
            frontal_area: f[3].parse().map_err(|_| bad("frontal_area"))?,
            converged: match f[4] {
                "1" => true,
                "0" => false,
                _ => return Err(bad("converged flag")),
            },
            image: f[5].to_string(),
            contour: f[6].to_string(),
            split: match f[7] {
                "train" => Split::Train,
                "test" => Split::Test,
                _ => return Err(bad("split")),
            },
        })
    }

    /// Converged rows are the only ones used for training and testing.
    pub fn usable(&self) -> bool {
        self.converged && self.cd.is_finite()
    }
}

/// Seed of shape `id` under master seed `master`.
pub fn shape_seed(master: u64, id: usize) -> u64 {
    derive_seed(master, (1u64 << 32) + id as u64)
}

/// Train/test assignment: a seeded shuffle of the ids, first 80% train.
pub fn split_assignment(n: usize, seed: u64) -> Vec<Split> {
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0)));
    let n_train = (TRAIN_FRACTION * n as f64).round() as usize;
    let mut out = vec![Split::Test; n];
    for &i in &ids[..n_train] {
        out[i] = Split::Train;
    }
    out
}

/// Mean and population standard deviation of the training-split drag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl LabelStats {
    pub fn standardize(&self, cd: f64) -> f64 {
        (cd - self.mean) / self.std
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub header: DatasetHeader,
    pub rows: Vec<ManifestRow>,
    pub stats: LabelStats,
}

fn parse_manifest(text: &str) -> Result<(DatasetHeader, Vec<ManifestRow>), PipelineError> {
    let mut lines = text.lines();
    let header = DatasetHeader::parse_line(lines.next().unwrap_or(""))?;
    if lines.next() != Some(COLUMNS) {
        return Err(PipelineError::Manifest("missing column header".into()));
    }
    let rows: Vec<ManifestRow> = lines.map(ManifestRow::parse).collect::<Result<_, _>>()?;
    for (i, r) in rows.iter().enumerate() {
        if r.id != i {
            return Err(PipelineError::Manifest(format!("row {i} has id {}", r.id)));
        }
    }
    Ok((header, rows))
}

impl Dataset {
    /// Reads the manifest and derives label statistics from the
    /// training split.
    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let (header, rows) = parse_manifest(&read_text(&dir.join(MANIFEST))?)?;
        if rows.len() != header.n {
            return Err(PipelineError::Manifest(format!("{} rows, header says {}", rows.len(), header.n)));
        }
        let cds: Vec<f64> = rows.iter().filter(|r| r.usable() && r.split == Split::Train).map(|r| r.cd).collect();
        if cds.len() < 2 {
            return Err(PipelineError::Numerical(format!("{} usable training rows", cds.len())));
        }
        let mean = cds.iter().sum::<f64>() / cds.len() as f64;
        let std = (cds.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / cds.len() as f64).sqrt();
        if !(std > 0.0) {
            return Err(PipelineError::Numerical("training drag has zero spread".into()));
        }
        Ok(Self { dir: dir.to_path_buf(), header, rows, stats: LabelStats { mean, std, count: cds.len() } })
    }

    pub fn train_rows(&self) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.usable() && r.split == Split::Train).collect()
    }

    pub fn test_rows(&self) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.usable() && r.split == Split::Test).collect()
    }

    pub fn image(&self, row: &ManifestRow) -> Result<BinaryImage, PipelineError> {
        let path = self.dir.join(&row.image);
        let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
        Ok(BinaryImage::from_bytes(&bytes)?)
    }

    /// Images of `rows` as one `f32` buffer, row after row.
    pub fn images(&self, rows: &[&ManifestRow]) -> Result<Vec<f32>, PipelineError> {
        let mut out = Vec::new();
        for r in rows {
            out.extend(self.image(r)?.pixels().iter().map(|&p| f32::from(p)));
        }
        Ok(out)
    }

    pub fn labels(&self, rows: &[&ManifestRow]) -> Vec<f64> {
        rows.iter().map(|r| self.stats.standardize(r.cd)).collect()
    }

    /// Smallest training-split drag coefficient.
    pub fn best_train_cd(&self) -> f64 {
        self.train_rows().iter().map(|r| r.cd).fold(f64::INFINITY, f64::min)
    }

    /// Checks that every referenced file exists and parses.
    pub fn verify(&self) -> Result<(), PipelineError> {
        for r in &self.rows {
            self.image(r)?.validate()?;
            read_contour(&self.dir.join(&r.contour))?;
        }
        Ok(())
    }
}

/// Generates shape `id`, stores image and contour, and simulates the
/// contour as read back from its file.
fn make_row(dir: &Path, header: &DatasetHeader, split: Split, id: usize) -> Result<ManifestRow, PipelineError> {
    let shape = generate_shape(shape_seed(header.seed, id), &header.shape_config())?;
    let image = format!("images/{id:06}.bin");
    let contour_file = format!("contours/{id:06}.txt");
    write_file(&dir.join(&image), shape.image.to_bytes())?;
    let contour_path = dir.join(&contour_file);
    write_contour(&contour_path, &shape.contour)?;
    let contour = read_contour(&contour_path)?;
    let frontal = frontal_area(&contour)?;
    let (cd, converged) = match simulate(id as u64, &contour, &header.flow_setup()) {
        Ok((rec, _)) => (rec.cd, rec.converged),
        Err(e) => {
            log::warn!("shape {id}: {e}");
            (f64::NAN, false)
        }
    };
    Ok(ManifestRow { id, seed: shape.seed, cd, frontal_area: frontal, converged, image, contour: contour_file, split })
}

/// Generates (or resumes) a dataset in `dir`. Rows are appended in id
/// order as soon as they are complete, so an interrupted run resumes to a
/// manifest identical to an uninterrupted one.
pub fn generate_dataset(cfg: &PipelineConfig, dir: &Path, n: usize, seed: u64) -> Result<Dataset, PipelineError> {
    if n < 10 {
        return Err(PipelineError::Usage(format!("need at least 10 shapes, got {n}")));
    }
    cfg.validate()?;
    let header = DatasetHeader::new(cfg, n, seed);
    create_dir(&dir.join("images"))?;
    create_dir(&dir.join("contours"))?;
    let path = dir.join(MANIFEST);
    let done = resume_point(&path, &header)?;
    let splits = split_assignment(n, seed);
    let mut failed = done.iter().filter(|r| !r.converged).count();
    let max_failed = (MAX_FAILURE_FRACTION * n as f64).floor() as usize;
    let failure = |failed: usize| PipelineError::SolverFailureRate {
        failed,
        total: n,
        resolution: cfg.resolution,
        nu: cfg.nu,
        v_in: cfg.v_in,
    };
    if failed > max_failed {
        return Err(failure(failed));
    }
    let mut file = OpenOptions::new().append(true).open(&path).map_err(|e| io_err(&path, e))?;
    let start = done.len();
    if start < n {
        log::info!("generating shapes {start}..{n} in {}", dir.display());
    }

    let next = AtomicUsize::new(start);
    let stop = AtomicBool::new(false);
    let workers = cfg.workers.clamp(1, (n - start).max(1));
    let (tx, rx) = mpsc::channel::<(usize, Result<ManifestRow, PipelineError>)>();
    let result = thread::scope(|s| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, stop, header, splits) = (&next, &stop, &header, &splits);
            s.spawn(move || loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let id = next.fetch_add(1, Ordering::Relaxed);
                if id >= n {
                    break;
                }
                if tx.send((id, make_row(dir, header, splits[id], id))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut written = start;
        for (id, row) in rx {
            pending.insert(id, row);
            while let Some(row) = pending.remove(&written) {
                let row = match row {
                    Ok(r) => r,
                    Err(e) => {
                        stop.store(true, Ordering::Relaxed);
                        return Err(e);
                    }
                };
                writeln!(file, "{}", row.to_line()).and_then(|_| file.flush()).map_err(|e| io_err(&path, e))?;
                if !row.converged {
                    failed += 1;
                    if failed > max_failed {
                        stop.store(true, Ordering::Relaxed);
                        return Err(failure(failed));
                    }
                }
                written += 1;
                if written % 50 == 0 || written == n {
                    log::info!("{written}/{n} shapes, {failed} failed");
                }
            }
        }
        Ok(())
    });
    result?;
    Dataset::load(dir)
}

/// Validates an existing manifest against `header`, drops a torn final
/// line, and returns the complete rows. Creates the manifest if absent.
fn resume_point(path: &Path, header: &DatasetHeader) -> Result<Vec<ManifestRow>, PipelineError> {
    let head = format!("{}\n{COLUMNS}\n", header.to_line());
    if !path.exists() {
        write_file(path, &head)?;
        return Ok(Vec::new());
    }
    let mut text = read_text(path)?;
    if !text.starts_with(&head) {
        return Err(PipelineError::Usage(format!(
            "{} was generated with different settings; use a fresh directory",
            path.display()
        )));
    }
    if !text.ends_with('\n') {
        let keep = text.rfind('\n').map_or(0, |i| i + 1).max(head.len());
        text.truncate(keep);
        write_file(path, &text)?;
    }
    let (_, rows) = parse_manifest(&text)?;
    Ok(rows)
}
