//! Evaluation suites: outside-mask preservation, probe-scored edit
//! fidelity, cumulative-amplitude-difference pairs and the ablation
//! comparisons. Each suite appends its metrics to the shared report.

use crate::report::{Metric, Report};
use crate::runconfig::Thresholds;
use anyhow::{anyhow, Context, Result};
use attredit_core::denoiser::Model;
use attredit_core::diffusion::NoiseSchedule;
use attredit_core::freq_guidance::cad;
use attredit_core::mask::{attr_mask, dilate, erode, BinaryMask};
use attredit_core::pipeline::{edit, AblationVariant, EditOutput, EditRequest};
use attredit_core::probe::{predict, ProbeModel};
use attredit_core::synth::{
    attr_classes, attribute, eyebrow_caption_direct, generate_face, SyntheticFaceSpec,
};
use attredit_core::Tensor;
use std::path::{Path, PathBuf};

/// One prepared eyebrow edit: the clean image, its masks, the current
/// thickness bucket and the prompted target bucket.
#[derive(Debug, Clone)]
pub struct EditCase {
    pub image: Tensor,
    pub coarse: BinaryMask,
    pub precise: BinaryMask,
    pub current_bucket: u8,
    pub target_bucket: u8,
    pub dark: bool,
    pub seed: u64,
}

impl EditCase {
    pub fn prompt(&self) -> String {
        eyebrow_caption_direct(self.target_bucket, self.dark)
    }
}

/// Deterministic eyebrow edit cases; glasses are disabled so the brow
/// region stays unobstructed, and the target bucket always differs from
/// the drawn one.
pub fn eyebrow_edit_cases(n: usize, base_seed: u64, size: usize) -> Vec<EditCase> {
    (0..n)
        .map(|i| {
            let mut spec = SyntheticFaceSpec::sample(base_seed ^ (0xE01D + i as u64 * 7919), size);
            spec.glasses.on = false;
            spec.eyebrows.thickness_bucket = (i % 3) as u8;
            let (image, seg, _) = generate_face(&spec);
            let mut precise = BinaryMask::filled(size, size, 0);
            for &cl in attr_classes(attribute::EYEBROWS) {
                precise = precise.union(&attr_mask(&seg, cl).expect("class id valid"));
            }
            let coarse = dilate(&precise, 2);
            let current = spec.eyebrows.thickness_bucket;
            let target = (current + 1 + (i as u8 / 3) % 2) % 3;
            EditCase {
                image,
                coarse,
                precise,
                current_bucket: current,
                target_bucket: target,
                dark: spec.eyebrows.dark,
                seed: base_seed ^ (0x5EED + i as u64),
            }
        })
        .collect()
}

/// Clean labelled crops for probe training: balanced thickness buckets.
pub fn probe_training_set(n: usize, seed: u64, size: usize) -> Vec<(Tensor, BinaryMask, u8)> {
    (0..n)
        .map(|i| {
            let mut spec = SyntheticFaceSpec::sample(seed ^ (0x9B0 + i as u64 * 104729), size);
            spec.glasses.on = false;
            spec.eyebrows.thickness_bucket = (i % 3) as u8;
            let (image, seg, _) = generate_face(&spec);
            let mut precise = BinaryMask::filled(size, size, 0);
            for &cl in attr_classes(attribute::EYEBROWS) {
                precise = precise.union(&attr_mask(&seg, cl).expect("class id valid"));
            }
            (image, dilate(&precise, 2), spec.eyebrows.thickness_bucket)
        })
        .collect()
}

pub struct SuiteCtx<'a> {
    pub model: &'a Model,
    pub schedule: &'a NoiseSchedule,
    pub thresholds: &'a Thresholds,
    pub report: &'a Report,
    pub out_dir: PathBuf,
    pub workers: usize,
    /// Sampling steps for edits; the spec default is 50.
    pub steps: usize,
    pub guidance_scale: f64,
    pub lambda: f64,
}

impl<'a> SuiteCtx<'a> {
    fn request(&self, case: &EditCase, stfg: bool, variant: AblationVariant) -> EditRequest {
        let mut req = EditRequest::new(case.image.clone(), case.coarse.clone(), case.prompt());
        req.steps = self.steps;
        req.guidance_scale = self.guidance_scale;
        req.lambda = self.lambda;
        req.seed = case.seed;
        req.stfg_enabled = stfg;
        req.variant = variant;
        req
    }

    fn run_edits<F, R>(&self, cases: &[EditCase], f: F) -> Result<Vec<R>>
    where
        F: Fn(&EditCase) -> Result<R> + Sync,
        R: Send,
    {
        let workers = self.workers.max(1).min(cases.len().max(1));
        if workers <= 1 {
            return cases.iter().map(&f).collect();
        }
        let results: Vec<std::sync::Mutex<Option<Result<R>>>> =
            cases.iter().map(|_| std::sync::Mutex::new(None)).collect();
        let next = std::sync::atomic::AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= cases.len() {
                        break;
                    }
                    let r = f(&cases[i]);
                    *results[i].lock().expect("result slot") = Some(r);
                });
            }
        });
        results
            .into_iter()
            .map(|slot| slot.into_inner().expect("poisoned slot").expect("filled"))
            .collect()
    }
}

fn max_abs_outside(mask: &BinaryMask, edited: &Tensor, original: &Tensor) -> f64 {
    let (c, h, w) = edited.dims3();
    let mut m = 0.0f64;
    for ch in 0..c {
        for p in 0..h * w {
            if mask.data()[p] == 0 {
                m = m.max((edited.data()[ch * h * w + p] - original.data()[ch * h * w + p]).abs());
            }
        }
    }
    m
}

/// Mean absolute change inside the edited region (precise attribute area).
fn mean_abs_inside(mask: &BinaryMask, edited: &Tensor, original: &Tensor) -> f64 {
    let (c, h, w) = edited.dims3();
    let mut sum = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for p in 0..h * w {
            if mask.data()[p] == 1 {
                sum += (edited.data()[ch * h * w + p] - original.data()[ch * h * w + p]).abs();
                count += 1;
            }
        }
    }
    sum / count.max(1) as f64
}

/// Outside-mask preservation over n edits: the max abs diff on unmasked
/// pixels must be exactly zero for every edit.
pub fn preserve_suite(ctx: &SuiteCtx, n: usize) -> Result<bool> {
    let cases = eyebrow_edit_cases(n, 0xF0, ctx.model.cfg.image_size);
    let diffs = ctx.run_edits(&cases, |case| {
        let req = ctx.request(case, true, AblationVariant::Full);
        let out = edit(ctx.model, &req, ctx.schedule).map_err(|e| anyhow!("{e}"))?;
        Ok(max_abs_outside(&case.coarse, &out.image, &case.image))
    })?;
    let worst = diffs.iter().cloned().fold(0.0f64, f64::max);
    let pass = worst <= ctx.thresholds.preserve_max_abs;
    ctx.report.append(
        "preserve",
        &[Metric::new("unmasked_max_abs_diff", worst, ctx.thresholds.preserve_max_abs, pass)],
    )?;
    Ok(pass)
}

/// Probe-scored edit fidelity plus the random-prompt control.
pub fn probe_suite(
    ctx: &SuiteCtx,
    probe: &ProbeModel,
    n: usize,
    variant: AblationVariant,
    label: &str,
) -> Result<(f64, f64, bool)> {
    let cases = eyebrow_edit_cases(n, 0xAC, ctx.model.cfg.image_size);
    let hits = ctx.run_edits(&cases, |case| {
        let req = ctx.request(case, true, variant);
        let out = edit(ctx.model, &req, ctx.schedule).map_err(|e| anyhow!("{e}"))?;
        let got = predict(probe, &out.image, &case.coarse).map_err(|e| anyhow!("{e}"))?;
        let moved = mean_abs_inside(&case.precise, &out.image, &case.image);
        Ok((got == case.target_bucket, moved))
    })?;
    let accuracy = hits.iter().filter(|(h, _)| *h).count() as f64 / n as f64;
    let mean_moved = hits.iter().map(|(_, m)| m).sum::<f64>() / n as f64;

    // control: an unrelated prompt must not land on the target bucket more
    // often than chance-ish
    let control_hits = ctx.run_edits(&cases, |case| {
        let mut req = ctx.request(case, true, variant);
        req.prompt = "a calm mouth".into();
        let out = edit(ctx.model, &req, ctx.schedule).map_err(|e| anyhow!("{e}"))?;
        let got = predict(probe, &out.image, &case.coarse).map_err(|e| anyhow!("{e}"))?;
        Ok(got == case.target_bucket)
    })?;
    let control = control_hits.iter().filter(|h| **h).count() as f64 / n as f64;

    let pass = accuracy >= ctx.thresholds.probe_accuracy
        && control <= ctx.thresholds.probe_control
        && mean_moved > ctx.thresholds.edit_region_mean_abs;
    ctx.report.append(
        label,
        &[
            Metric::new(
                format!("{label}_probe_accuracy"),
                accuracy,
                ctx.thresholds.probe_accuracy,
                accuracy >= ctx.thresholds.probe_accuracy,
            ),
            Metric::new(
                format!("{label}_control_accuracy"),
                control,
                ctx.thresholds.probe_control,
                control <= ctx.thresholds.probe_control,
            ),
            Metric::new(
                format!("{label}_region_mean_abs"),
                mean_moved,
                ctx.thresholds.edit_region_mean_abs,
                mean_moved > ctx.thresholds.edit_region_mean_abs,
            ),
        ],
    )?;
    Ok((accuracy, control, pass))
}

/// Mean |CAD| over the lowest quartile of radii.
fn low_quartile_mean_abs(curve: &[f64]) -> f64 {
    let k = (curve.len() / 4).max(1);
    curve[..k].iter().map(|v| v.abs()).sum::<f64>() / k as f64
}

pub struct CadPair {
    pub with: EditOutput,
    pub without: EditOutput,
    pub case: EditCase,
}

/// Run paired edits (guidance on/off, same seed) for the CAD and ablation
/// suites.
pub fn guided_pairs(ctx: &SuiteCtx, n: usize) -> Result<Vec<CadPair>> {
    let cases = eyebrow_edit_cases(n, 0xCAD, ctx.model.cfg.image_size);
    ctx.run_edits(&cases, |case| {
        let with = edit(ctx.model, &ctx.request(case, true, AblationVariant::Full), ctx.schedule)
            .map_err(|e| anyhow!("{e}"))?;
        let without = edit(
            ctx.model,
            &ctx.request(case, false, AblationVariant::Full),
            ctx.schedule,
        )
        .map_err(|e| anyhow!("{e}"))?;
        Ok(CadPair {
            with,
            without,
            case: case.clone(),
        })
    })
}

fn write_cad_curve(path: &Path, curve: &[f64]) -> Result<()> {
    let r_max = (curve.len() - 1).max(1) as f64;
    let mut text = String::new();
    for (r, v) in curve.iter().enumerate() {
        text.push_str(&format!("{:.6}\t{:.9e}\n", r as f64 / r_max, v));
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Cumulative amplitude difference inside the mask, with vs without
/// guidance; emits paired curve files and checks the low-radius means.
pub fn cad_suite(ctx: &SuiteCtx, pairs: &[CadPair]) -> Result<bool> {
    let dir = ctx.out_dir.join("cad");
    std::fs::create_dir_all(&dir)?;
    let mut with_lo = Vec::new();
    let mut without_lo = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        let c_with = cad(&pair.with.image, &pair.case.image, &pair.case.coarse)
            .map_err(|e| anyhow!("{e}"))?;
        let c_without = cad(&pair.without.image, &pair.case.image, &pair.case.coarse)
            .map_err(|e| anyhow!("{e}"))?;
        write_cad_curve(&dir.join(format!("sample{i:02}.stfg")), &c_with)?;
        write_cad_curve(&dir.join(format!("sample{i:02}.nostfg")), &c_without)?;
        with_lo.push(low_quartile_mean_abs(&c_with));
        without_lo.push(low_quartile_mean_abs(&c_without));
    }
    let mean_with = with_lo.iter().sum::<f64>() / with_lo.len().max(1) as f64;
    let mean_without = without_lo.iter().sum::<f64>() / without_lo.len().max(1) as f64;
    let pass = mean_with <= mean_without;
    ctx.report.append(
        "cad",
        &[
            Metric::new("cad_lowq_with_guidance", mean_with, mean_without, pass),
            Metric::new("cad_lowq_without_guidance", mean_without, mean_without, true),
        ],
    )?;
    Ok(pass)
}

/// Mean abs diff against the original over a 2-pixel ring just inside the
/// mask boundary.
pub fn boundary_ring_metric(case: &EditCase, edited: &Tensor) -> f64 {
    let ring = {
        let inner = erode(&case.coarse, 2);
        let mut ring = case.coarse.clone();
        for i in 0..ring.height() {
            for j in 0..ring.width() {
                if inner.get(i, j) == 1 {
                    ring.set(i, j, 0);
                }
            }
        }
        ring
    };
    mean_abs_inside(&ring, edited, &case.image)
}

/// Directional ablation comparisons: boundary artifacts with the full
/// method vs no-guidance, and probe accuracy full vs parallel injection.
pub fn ablation_suite(
    ctx: &SuiteCtx,
    probe: &ProbeModel,
    pairs: &[CadPair],
    full_accuracy: f64,
    n_probe: usize,
) -> Result<bool> {
    let ring_full: f64 = pairs
        .iter()
        .map(|p| boundary_ring_metric(&p.case, &p.with.image))
        .sum::<f64>()
        / pairs.len().max(1) as f64;
    let ring_noguide: f64 = pairs
        .iter()
        .map(|p| boundary_ring_metric(&p.case, &p.without.image))
        .sum::<f64>()
        / pairs.len().max(1) as f64;

    let (pi_accuracy, _, _) = probe_suite(
        ctx,
        probe,
        n_probe,
        AblationVariant::ParallelInjection,
        "ablation_parallel_injection",
    )?;

    let ring_pass = ring_full <= ring_noguide;
    let probe_pass = full_accuracy >= pi_accuracy;
    ctx.report.append(
        "ablation",
        &[
            Metric::new("boundary_ring_full", ring_full, ring_noguide, ring_pass),
            Metric::new("boundary_ring_no_guidance", ring_noguide, ring_noguide, true),
            Metric::new("probe_full_vs_parallel", full_accuracy, pi_accuracy, probe_pass),
        ],
    )?;
    Ok(ring_pass && probe_pass)
}

/// Write per-timestep score maps as grayscale images named
/// `score_t{t}_layer{l}.png` (0 = black, 1 = white).
pub fn dump_score_maps(
    dir: &Path,
    maps: &[(usize, Vec<attredit_core::adapter::ScoreMap>)],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (t, layers) in maps {
        for (l, score) in layers.iter().enumerate() {
            let (h, w) = score.dims();
            crate::pngio::save_unit_gray(
                &dir.join(format!("score_t{t}_layer{l}.png")),
                score.values(),
                h,
                w,
            )?;
        }
    }
    Ok(())
}
