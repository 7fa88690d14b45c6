use std::fmt::Write as _;
use std::path::Path;
use std::sync::Mutex;
use std::thread;
use std::time::Instant;

use super::{create_dir, derive_seed, read_text, write_file, Dataset, PipelineConfig, PipelineError};
use crate::flowsim::{simulate, write_field_dump, DragRecord, FlowError, FlowField, FlowSetup};
use crate::latentnet::{decode_image, encode_means, NetworkParams};
use crate::numfmt::real;
use crate::optimizer::{multistart_ascent, sample_starts, select_candidates, write_candidates, EIState};
use crate::shapegen::{extract_contour, read_contour, write_contour, ShapeContour, DEFAULT_EDGE_THRESHOLD, DEFAULT_POLYLINE_POINTS};
use crate::surrogate::{build_basis, fit, fit_hyperparameters, HyperSearch};

pub const REPORT_FILE: &str = "campaign.tsv";
pub const TIMINGS_FILE: &str = "timings.tsv";
const COLUMNS: &str = "candidate\tei\tcd\timprovement\titerations\timage\tcontour";

/// One decoded, re-simulated candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateOutcome {
    /// Position in the selection order (descending EI).
    pub candidate: usize,
    pub ei: f64,
    pub cd: f64,
    pub improvement: f64,
    pub iterations: usize,
    /// Paths relative to the campaign directory.
    pub image: String,
    pub contour: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedCandidate {
    pub candidate: usize,
    pub reason: String,
}

/// Wall-clock seconds per phase. Kept out of the report file, which must
/// be reproducible bit for bit.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Timings {
    pub encode: f64,
    pub fit: f64,
    pub ascent: f64,
    pub decode: f64,
    pub evaluate: f64,
    pub total: f64,
}

impl Timings {
    pub fn to_tsv(&self) -> String {
        format!(
            "phase\tseconds\nencode\t{:.3}\nfit\t{:.3}\nascent\t{:.3}\ndecode\t{:.3}\nevaluate\t{:.3}\ntotal\t{:.3}\n",
            self.encode, self.fit, self.ascent, self.decode, self.evaluate, self.total
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignReport {
    pub best_train_cd: f64,
    /// Standardized incumbent handed to EI.
    pub f_best: f64,
    pub starts: usize,
    pub converged_starts: usize,
    pub selected: usize,
    /// Sorted by evaluated `cd` ascending.
    pub candidates: Vec<CandidateOutcome>,
    pub skipped: Vec<SkippedCandidate>,
    pub timings: Timings,
}

impl CampaignReport {
    /// Best candidate's improvement over the training set.
    pub fn best_improvement(&self) -> Option<f64> {
        self.candidates.first().map(|c| c.improvement)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "# best_train_cd={} f_best={} starts={} converged_starts={} selected={}\n",
            real(self.best_train_cd),
            real(self.f_best),
            self.starts,
            self.converged_starts,
            self.selected
        );
        for k in &self.skipped {
            writeln!(s, "# skipped {} {}", k.candidate, k.reason.replace('\n', " ")).unwrap();
        }
        s.push_str(COLUMNS);
        s.push('\n');
        for c in &self.candidates {
            writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                c.candidate,
                real(c.ei),
                real(c.cd),
                real(c.improvement),
                c.iterations,
                c.image,
                c.contour
            )
            .unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let bad = |what: &str| PipelineError::Manifest(format!("campaign report: bad {what}"));
        let mut lines = text.lines();
        let head = lines.next().and_then(|l| l.strip_prefix("# ")).ok_or_else(|| bad("header"))?;
        let mut report = CampaignReport {
            best_train_cd: f64::NAN,
            f_best: f64::NAN,
            starts: 0,
            converged_starts: 0,
            selected: 0,
            candidates: Vec::new(),
            skipped: Vec::new(),
            timings: Timings::default(),
        };
        for kv in head.split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad("header"))?;
            match k {
                "best_train_cd" => report.best_train_cd = v.parse().map_err(|_| bad(k))?,
                "f_best" => report.f_best = v.parse().map_err(|_| bad(k))?,
                "starts" => report.starts = v.parse().map_err(|_| bad(k))?,
                "converged_starts" => report.converged_starts = v.parse().map_err(|_| bad(k))?,
                "selected" => report.selected = v.parse().map_err(|_| bad(k))?,
                _ => return Err(bad(k)),
            }
        }
        let mut in_rows = false;
        for line in lines {
            if !in_rows {
                if line == COLUMNS {
                    in_rows = true;
                    continue;
                }
                let rest = line.strip_prefix("# skipped ").ok_or_else(|| bad("skipped line"))?;
                let (idx, reason) = rest.split_once(' ').unwrap_or((rest, ""));
                report.skipped.push(SkippedCandidate { candidate: idx.parse().map_err(|_| bad("skipped index"))?, reason: reason.into() });
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 {
                return Err(bad("row"));
            }
            report.candidates.push(CandidateOutcome {
                candidate: f[0].parse().map_err(|_| bad("candidate"))?,
                ei: f[1].parse().map_err(|_| bad("ei"))?,
                cd: f[2].parse().map_err(|_| bad("cd"))?,
                improvement: f[3].parse().map_err(|_| bad("improvement"))?,
                iterations: f[4].parse().map_err(|_| bad("iterations"))?,
                image: f[5].into(),
                contour: f[6].into(),
            });
        }
        if !in_rows {
            return Err(bad("column header"));
        }
        Ok(report)
    }

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        Self::parse(&read_text(&dir.join(REPORT_FILE))?)
    }
}

/// Simulates every contour with one shared setup over `workers` threads.
/// Result `i` belongs to contour `i` regardless of scheduling.
fn evaluate_with_fields(
    contours: &[ShapeContour],
    setup: &FlowSetup,
    workers: usize,
) -> Vec<Result<(DragRecord, FlowField), FlowError>> {
    let slots: Vec<Mutex<Option<Result<(DragRecord, FlowField), FlowError>>>> =
        contours.iter().map(|_| Mutex::new(None)).collect();
    let workers = workers.clamp(1, contours.len().max(1));
    thread::scope(|s| {
        for w in 0..workers {
            let slots = &slots;
            s.spawn(move || {
                for i in (w..contours.len()).step_by(workers) {
                    let r = simulate(i as u64, &contours[i], setup);
                    *slots[i].lock().unwrap() = Some(r);
                }
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().unwrap().expect("every slot filled")).collect()
}

/// Drag records of `contours`, in input order. Unconverged runs come back
/// with `converged = false`; hard solver failures as errors.
pub fn evaluate_contours(contours: &[ShapeContour], setup: &FlowSetup, workers: usize) -> Vec<Result<DragRecord, FlowError>> {
    evaluate_with_fields(contours, setup, workers).into_iter().map(|r| r.map(|(rec, _)| rec)).collect()
}

/// Encodes the training split, fits the surrogate, maximizes expected
/// improvement from many starts, decodes the selected latents and
/// re-simulates their contours with the dataset's solver settings. All
/// artifacts go to `out`; see [`super::write_report`] for the summary.
pub fn run_optimization(
    dataset: &Dataset,
    params: &NetworkParams<f32>,
    cfg: &PipelineConfig,
    out: &Path,
) -> Result<CampaignReport, PipelineError> {
    let t_total = Instant::now();
    let mut timings = Timings::default();
    create_dir(&out.join("candidates"))?;
    create_dir(&out.join("fields"))?;
    let d = params.config.latent_dim;

    let t = Instant::now();
    let rows = dataset.train_rows();
    let images = dataset.images(&rows)?;
    let (mus, lvs) = encode_means(params, &images)?;
    let widen = |v: Vec<Vec<f32>>| -> Vec<Vec<f64>> { v.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect() };
    let (mus, lvs) = (widen(mus), widen(lvs));
    timings.encode = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let y = dataset.labels(&rows);
    let basis = build_basis(cfg.ssgp_m, &vec![cfg.lengthscale; d], cfg.sigma_f, derive_seed(cfg.seed, 1))?;
    let z = mus.concat();
    let (basis, sigma_n) = if cfg.fit_hyper {
        let (b, sn, lml) = fit_hyperparameters(&z, &y, &basis, cfg.sigma_n, &HyperSearch::default())?;
        log::info!("evidence {lml:.3}: lengthscale {} sigma_f {} sigma_n {sn}", b.lengthscales()[0], b.sigma_f());
        (b, sn)
    } else {
        (basis, cfg.sigma_n)
    };
    let model = fit(&z, &y, &basis, sigma_n)?;
    model.save(&out.join("ssgp.bin"))?;
    let best_train_cd = dataset.best_train_cd();
    let f_best = dataset.stats.standardize(best_train_cd);
    timings.fit = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let state = EIState { xi: cfg.xi, ..EIState::new(f_best)? };
    let starts = sample_starts(&mus, &lvs, cfg.starts, derive_seed(cfg.seed, 2))?;
    let results = multistart_ascent(&model, &starts, &state, &cfg.ascent_config())?;
    let converged_starts = results.iter().filter(|r| r.converged).count();
    let selected = select_candidates(&results, cfg.candidates, cfg.dedup_radius);
    write_candidates(&out.join("candidates.txt"), &selected)?;
    timings.ascent = t.elapsed().as_secs_f64();
    log::info!("{converged_starts}/{} ascents converged, {} candidates selected", results.len(), selected.len());

    let t = Instant::now();
    let shape_cfg = dataset.header.shape_config();
    let mut skipped = Vec::new();
    let mut decoded = Vec::new();
    for (k, c) in selected.iter().enumerate() {
        let z: Vec<f32> = c.z.iter().map(|&v| v as f32).collect();
        let image = decode_image(&z, params)?;
        let image_file = format!("candidates/cand_{k:02}.bin");
        write_file(&out.join(&image_file), image.to_bytes())?;
        let contour = match extract_contour(&image, DEFAULT_EDGE_THRESHOLD, &shape_cfg.map, shape_cfg.order, DEFAULT_POLYLINE_POINTS) {
            Ok(c) => c,
            Err(e) => {
                log::warn!("candidate {k}: no contour: {e}");
                skipped.push(SkippedCandidate { candidate: k, reason: format!("contour: {e}") });
                continue;
            }
        };
        let contour_file = format!("candidates/cand_{k:02}.txt");
        let path = out.join(&contour_file);
        write_contour(&path, &contour)?;
        decoded.push((k, c.ei, image_file, contour_file, read_contour(&path)?));
    }
    timings.decode = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let contours: Vec<ShapeContour> = decoded.iter().map(|e| e.4.clone()).collect();
    let evaluated = evaluate_with_fields(&contours, &dataset.header.flow_setup(), cfg.workers);
    let mut outcomes = Vec::new();
    for ((k, ei, image, contour, _), r) in decoded.into_iter().zip(evaluated) {
        match r {
            Ok((rec, flow)) if rec.converged && rec.cd.is_finite() => {
                let outcome = CandidateOutcome {
                    candidate: k,
                    ei,
                    cd: rec.cd,
                    improvement: (best_train_cd - rec.cd) / best_train_cd,
                    iterations: rec.iterations,
                    image,
                    contour,
                };
                outcomes.push((outcome, flow));
            }
            Ok(rec) => skipped.push(SkippedCandidate { candidate: k, reason: format!("not converged after {} iterations", rec.0.iterations) }),
            Err(e) => skipped.push(SkippedCandidate { candidate: k, reason: format!("solver: {e}") }),
        }
    }
    timings.evaluate = t.elapsed().as_secs_f64();
    if outcomes.is_empty() {
        return Err(PipelineError::NoCandidates);
    }
    outcomes.sort_by(|a, b| a.0.cd.total_cmp(&b.0.cd).then(a.0.candidate.cmp(&b.0.candidate)));
    skipped.sort_by_key(|s| s.candidate);
    for (rank, (_, flow)) in outcomes.iter().take(3).enumerate() {
        write_field_dump(&out.join(format!("fields/top{}.f64", rank + 1)), flow)?;
    }
    timings.total = t_total.elapsed().as_secs_f64();
    let report = CampaignReport {
        best_train_cd,
        f_best,
        starts: results.len(),
        converged_starts,
        selected: selected.len(),
        candidates: outcomes.into_iter().map(|o| o.0).collect(),
        skipped,
        timings,
    };
    write_file(&out.join(REPORT_FILE), report.to_text())?;
    write_file(&out.join(TIMINGS_FILE), timings.to_tsv())?;
    super::write_report(out)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapegen::Point2;

    fn report() -> CampaignReport {
        CampaignReport {
            best_train_cd: 2.5,
            f_best: -1.75,
            starts: 10,
            converged_starts: 9,
            selected: 3,
            candidates: vec![
                CandidateOutcome { candidate: 2, ei: 0.1, cd: 2.4, improvement: 0.04, iterations: 100, image: "a".into(), contour: "b".into() },
                CandidateOutcome { candidate: 0, ei: 0.3, cd: 2.6, improvement: -0.04, iterations: 90, image: "c".into(), contour: "d".into() },
            ],
            skipped: vec![SkippedCandidate { candidate: 1, reason: "contour: empty image".into() }],
            timings: Timings::default(),
        }
    }

    #[test]
    fn report_text_round_trip() {
        let r = report();
        assert_eq!(CampaignReport::parse(&r.to_text()).unwrap(), r);
        assert_eq!(r.best_improvement(), Some(0.04));
    }

    #[test]
    fn evaluation_is_order_independent() {
        let setup = FlowSetup { resolution: 12.0, lx: 4.0, ly: 3.0, ..FlowSetup::default() };
        let circle = |r: f64| {
            let pts = (0..64)
                .map(|k| {
                    let t = std::f64::consts::TAU * k as f64 / 64.0;
                    Point2::new(1.25 + r * t.cos(), 1.5 + r * t.sin())
                })
                .collect();
            ShapeContour::from_polyline(pts).unwrap()
        };
        let cs = vec![circle(0.5), circle(0.4)];
        let a = evaluate_contours(&cs, &setup, 1);
        let b = evaluate_contours(&[cs[1].clone(), cs[0].clone()], &setup, 2);
        assert_eq!(a[0].as_ref().unwrap().cd.to_bits(), b[1].as_ref().unwrap().cd.to_bits());
        assert_eq!(a[1].as_ref().unwrap().cd.to_bits(), b[0].as_ref().unwrap().cd.to_bits());
    }
}
