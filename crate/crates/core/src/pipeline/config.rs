use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use super::PipelineError;
use crate::flowsim::{FlowSetup, FluidParams, SolverConfig};
use crate::latentnet::{TrainConfig, TrainMode};
use crate::optimizer::AscentConfig;
use crate::shapegen::{PixelMap, Point2, ShapeConfig, DEFAULT_POLYLINE_POINTS, IMAGE_HEIGHT, IMAGE_WIDTH};

/// Which Table 1 cells to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Table1Grid {
    /// `latent_dim` with base units, joint and separate.
    Desk,
    /// Latent 10 and 20, base and doubled units, joint and separate.
    Full,
}

impl FromStr for Table1Grid {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Table1Grid::Desk),
            "full" => Ok(Table1Grid::Full),
            _ => Err(PipelineError::Usage(format!("table1_grid must be desk or full, got {s:?}"))),
        }
    }
}

impl Table1Grid {
    fn name(self) -> &'static str {
        match self {
            Table1Grid::Desk => "desk",
            Table1Grid::Full => "full",
        }
    }
}

/// Every tunable of the pipeline. Config files hold `key = value` lines;
/// `#` starts a comment. Keys:
///
/// | key | default | meaning |
/// |---|---|---|
/// | domain_lx, domain_ly | 4, 3 | flow domain size |
/// | resolution | 64 | grid cells per unit length |
/// | nu, rho, v_in | 0.02, 1, 1 | kinematic viscosity, density, inlet speed |
/// | steady_tol, max_iters | 1e-6, 200000 | steady-state test and iteration cap |
/// | r_min, r_max, n_angles, fourier_k | 0.3, 0.7, 16, 6 | random shape family |
/// | latent_dim, dense_units | 20, 256 | network size |
/// | epochs, batch_size, learning_rate | 100, 64, 1e-3 | training |
/// | kl_weight | 1/pixels | KL factor in the optimized loss |
/// | seed | 0 | master seed |
/// | ssgp_m, sigma_f, sigma_n, lengthscale | 1000, 1, 0.1, 1 | surrogate |
/// | fit_hyper | false | tune lengthscale, sigma_f, sigma_n by evidence before a campaign |
/// | starts, candidates, dedup_radius, xi | 2000, 25, 0.5, 0 | campaign |
/// | table1_m, table1_seeds, table1_grid | 500, 3, desk | comparison experiment |
/// | workers | 1 | threads for simulations and ascent |
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub domain_lx: f64,
    pub domain_ly: f64,
    pub resolution: f64,
    pub nu: f64,
    pub rho: f64,
    pub v_in: f64,
    pub steady_tol: f64,
    pub max_iters: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub n_angles: usize,
    pub fourier_k: usize,
    pub latent_dim: usize,
    pub dense_units: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub kl_weight: f64,
    pub seed: u64,
    pub ssgp_m: usize,
    pub sigma_f: f64,
    pub sigma_n: f64,
    pub lengthscale: f64,
    pub fit_hyper: bool,
    pub starts: usize,
    pub candidates: usize,
    pub dedup_radius: f64,
    pub xi: f64,
    pub table1_m: usize,
    pub table1_seeds: usize,
    pub table1_grid: Table1Grid,
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let flow = FlowSetup::default();
        let shape = ShapeConfig::default();
        let train = TrainConfig::default();
        Self {
            domain_lx: flow.lx,
            domain_ly: flow.ly,
            resolution: flow.resolution,
            nu: flow.params.nu,
            rho: flow.params.rho,
            v_in: flow.params.v_in,
            steady_tol: flow.solver.steady_tol,
            max_iters: flow.solver.max_iters,
            r_min: shape.r_min,
            r_max: shape.r_max,
            n_angles: shape.n_angles,
            fourier_k: shape.order,
            latent_dim: train.latent_dim,
            dense_units: train.dense_units,
            epochs: 100,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            kl_weight: train.kl_weight,
            seed: 0,
            ssgp_m: 1000,
            sigma_f: 1.0,
            sigma_n: 0.1,
            lengthscale: 1.0,
            fit_hyper: false,
            starts: 2000,
            candidates: 25,
            dedup_radius: 0.5,
            xi: 0.0,
            table1_m: 500,
            table1_seeds: 3,
            table1_grid: Table1Grid::Desk,
            workers: 1,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V, PipelineError> {
    value.parse().map_err(|_| PipelineError::Usage(format!("bad value {value:?} for {key}")))
}

impl PipelineConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), PipelineError> {
        match key {
            "domain_lx" => self.domain_lx = parse(key, value)?,
            "domain_ly" => self.domain_ly = parse(key, value)?,
            "resolution" => self.resolution = parse(key, value)?,
            "nu" => self.nu = parse(key, value)?,
            "rho" => self.rho = parse(key, value)?,
            "v_in" => self.v_in = parse(key, value)?,
            "steady_tol" => self.steady_tol = parse(key, value)?,
            "max_iters" => self.max_iters = parse(key, value)?,
            "r_min" => self.r_min = parse(key, value)?,
            "r_max" => self.r_max = parse(key, value)?,
            "n_angles" => self.n_angles = parse(key, value)?,
            "fourier_k" => self.fourier_k = parse(key, value)?,
            "latent_dim" => self.latent_dim = parse(key, value)?,
            "dense_units" => self.dense_units = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "kl_weight" => self.kl_weight = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "ssgp_m" => self.ssgp_m = parse(key, value)?,
            "sigma_f" => self.sigma_f = parse(key, value)?,
            "sigma_n" => self.sigma_n = parse(key, value)?,
            "lengthscale" => self.lengthscale = parse(key, value)?,
            "fit_hyper" => self.fit_hyper = parse(key, value)?,
            "starts" => self.starts = parse(key, value)?,
            "candidates" => self.candidates = parse(key, value)?,
            "dedup_radius" => self.dedup_radius = parse(key, value)?,
            "xi" => self.xi = parse(key, value)?,
            "table1_m" => self.table1_m = parse(key, value)?,
            "table1_seeds" => self.table1_seeds = parse(key, value)?,
            "table1_grid" => self.table1_grid = value.parse()?,
            "workers" => self.workers = parse(key, value)?,
            _ => return Err(PipelineError::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Defaults overridden by the `key = value` lines of `text`.
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| PipelineError::Usage(format!("config line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// All keys in a fixed order; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("domain_lx", self.domain_lx.to_string());
        kv("domain_ly", self.domain_ly.to_string());
        kv("resolution", self.resolution.to_string());
        kv("nu", self.nu.to_string());
        kv("rho", self.rho.to_string());
        kv("v_in", self.v_in.to_string());
        kv("steady_tol", self.steady_tol.to_string());
        kv("max_iters", self.max_iters.to_string());
        kv("r_min", self.r_min.to_string());
        kv("r_max", self.r_max.to_string());
        kv("n_angles", self.n_angles.to_string());
        kv("fourier_k", self.fourier_k.to_string());
        kv("latent_dim", self.latent_dim.to_string());
        kv("dense_units", self.dense_units.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("kl_weight", self.kl_weight.to_string());
        kv("seed", self.seed.to_string());
        kv("ssgp_m", self.ssgp_m.to_string());
        kv("sigma_f", self.sigma_f.to_string());
        kv("sigma_n", self.sigma_n.to_string());
        kv("lengthscale", self.lengthscale.to_string());
        kv("fit_hyper", self.fit_hyper.to_string());
        kv("starts", self.starts.to_string());
        kv("candidates", self.candidates.to_string());
        kv("dedup_radius", self.dedup_radius.to_string());
        kv("xi", self.xi.to_string());
        kv("table1_m", self.table1_m.to_string());
        kv("table1_seeds", self.table1_seeds.to_string());
        kv("table1_grid", self.table1_grid.name().to_string());
        kv("workers", self.workers.to_string());
        s
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let positive = [
            ("domain_lx", self.domain_lx),
            ("domain_ly", self.domain_ly),
            ("resolution", self.resolution),
            ("nu", self.nu),
            ("rho", self.rho),
            ("v_in", self.v_in),
            ("steady_tol", self.steady_tol),
            ("r_min", self.r_min),
            ("learning_rate", self.learning_rate),
            ("sigma_f", self.sigma_f),
            ("sigma_n", self.sigma_n),
            ("lengthscale", self.lengthscale),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PipelineError::Usage(format!("{k} must be positive, got {v}")));
            }
        }
        let counts = [
            ("max_iters", self.max_iters),
            ("latent_dim", self.latent_dim),
            ("dense_units", self.dense_units),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("ssgp_m", self.ssgp_m),
            ("starts", self.starts),
            ("candidates", self.candidates),
            ("table1_m", self.table1_m),
            ("table1_seeds", self.table1_seeds),
            ("workers", self.workers),
        ];
        for (k, v) in counts {
            if v == 0 {
                return Err(PipelineError::Usage(format!("{k} must be at least 1")));
            }
        }
        if self.r_max <= self.r_min {
            return Err(PipelineError::Usage("r_max must exceed r_min".into()));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite() && self.dedup_radius.is_finite() && self.xi.is_finite()) {
            return Err(PipelineError::Usage("kl_weight, dedup_radius and xi must be finite, kl_weight non-negative".into()));
        }
        Ok(())
    }

    pub fn flow_setup(&self) -> FlowSetup {
        FlowSetup {
            lx: self.domain_lx,
            ly: self.domain_ly,
            resolution: self.resolution,
            params: FluidParams { rho: self.rho, nu: self.nu, v_in: self.v_in },
            solver: SolverConfig { steady_tol: self.steady_tol, max_iters: self.max_iters, ..SolverConfig::default() },
        }
    }

    /// Shapes centered at `(5/16 lx, ly/2)`, upstream of the domain middle.
    pub fn shape_config(&self) -> ShapeConfig {
        ShapeConfig {
            n_angles: self.n_angles,
            order: self.fourier_k,
            n_points: DEFAULT_POLYLINE_POINTS,
            r_min: self.r_min,
            r_max: self.r_max,
            center: Point2::new(self.domain_lx * 0.3125, self.domain_ly * 0.5),
            map: PixelMap { lx: self.domain_lx, ly: self.domain_ly },
        }
    }

    pub fn train_config(&self, mode: TrainMode, seed: u64) -> TrainConfig {
        TrainConfig {
            latent_dim: self.latent_dim,
            dense_units: self.dense_units,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            kl_weight: self.kl_weight,
            mode,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn ascent_config(&self) -> AscentConfig {
        AscentConfig { workers: self.workers, ..AscentConfig::default() }
    }

    /// Pixels per training image.
    pub fn pixels(&self) -> usize {
        IMAGE_WIDTH * IMAGE_HEIGHT
    }
}
