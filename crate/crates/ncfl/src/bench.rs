//! Evaluation reports, the ablation runner, robustness distances and
//! q-map export.
//!
//! All report payloads are deterministic functions of (checkpoint, data,
//! seed); no timestamps go into files, so reports are reproducible
//! byte-for-byte.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{Direction, ModelConfig, QuantMode};
use crate::data::{synthesize_awgn, ClipSource};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim};
use crate::pipeline::{collect_features, run_clip, train_two_stage, NcflModel};
use crate::tensor::{write_tensor, Tensor};
use crate::types::VideoClip;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClipScore {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub input_psnr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub config_fingerprint: String,
    pub sigma: f32,
    pub seeds: Vec<u64>,
    pub clips: Vec<ClipScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_input_psnr: f64,
}

impl EvalReport {
    fn check(&self) -> Result<()> {
        for c in &self.clips {
            if !(c.psnr.is_finite() && c.psnr <= 100.0) {
                return Err(Error::Invalid(format!("psnr out of range for {}", c.id)));
            }
            if !(-1.0..=1.0).contains(&c.ssim) {
                return Err(Error::Invalid(format!("ssim out of range for {}", c.id)));
            }
        }
        Ok(())
    }
}

/// Degrade each clean source at `sigma` (seeded) and score the model's
/// restoration against the clean clip.
pub fn evaluate(
    model: &NcflModel,
    sources: &[ClipSource],
    sigma: f32,
    seed: u64,
    direction: Direction,
) -> Result<EvalReport> {
    if sources.is_empty() {
        return Err(Error::Data("evaluation needs at least one clip".into()));
    }
    let mut clips = Vec::with_capacity(sources.len());
    for (i, src) in sources.iter().enumerate() {
        let pair = match &src.kind {
            crate::data::SourceKind::Paired { .. } => src.realize(sigma, 0)?,
            _ => synthesize_awgn(&src.clean, sigma, seed.wrapping_add(i as u64))?,
        };
        let (restored, _ce) = run_clip(model, &pair.degraded, direction)?;
        clips.push(ClipScore {
            id: src.clean.id.clone(),
            psnr: psnr(&restored.frames, &pair.clean.frames)?,
            ssim: ssim(&restored.frames, &pair.clean.frames)?,
            input_psnr: psnr(&pair.degraded.frames, &pair.clean.frames)?,
        });
    }
    let n = clips.len() as f64;
    let report = EvalReport {
        variant: "checkpoint".into(),
        config_fingerprint: model.cfg.fingerprint(),
        sigma,
        seeds: vec![seed],
        mean_psnr: clips.iter().map(|c| c.psnr).sum::<f64>() / n,
        mean_ssim: clips.iter().map(|c| c.ssim).sum::<f64>() / n,
        mean_input_psnr: clips.iter().map(|c| c.input_psnr).sum::<f64>() / n,
        clips,
    };
    report.check()?;
    Ok(report)
}

// ---- robustness distances (feature-space noise analysis) ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistanceRecord {
    pub stage: String,
    pub kind: String,
    pub seed_a: u64,
    pub seed_b: i64,
    pub distance: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub clip_id: String,
    pub sigma: f32,
    pub n_seeds: usize,
    pub config_fingerprint: String,
    /// Mean pairwise RMS distance among warped features across noise
    /// realizations (empty pairs when n_seeds < 2).
    pub warped_pairwise_mean: Option<f64>,
    pub refined_pairwise_mean: Option<f64>,
    /// Mean distance from each realization's features to the clean
    /// clip's features.
    pub warped_to_clean_mean: f64,
    pub refined_to_clean_mean: f64,
    pub records: Vec<DistanceRecord>,
}

/// RMS distance between two feature stacks, averaged over frames.
fn feature_distance(a: &[crate::types::FeatureMap], b: &[crate::types::FeatureMap]) -> f64 {
    let per_frame: Vec<f64> =
        a.iter().zip(b).map(|(fa, fb)| fa.data.mse(&fb.data).sqrt()).collect();
    per_frame.iter().sum::<f64>() / per_frame.len() as f64
}

/// For `n_seeds` noise realizations of one clean clip, compute pairwise
/// distances among warped and refined features plus distances to the
/// clean clip's features.
pub fn robustness_report(
    model: &NcflModel,
    clean: &VideoClip,
    sigma: f32,
    n_seeds: usize,
) -> Result<RobustnessReport> {
    if n_seeds == 0 {
        return Err(Error::Invalid("robustness needs n_seeds >= 1".into()));
    }
    let clean_feats = collect_features(model, clean)?;
    let mut realizations = Vec::with_capacity(n_seeds);
    for s in 0..n_seeds {
        let pair = synthesize_awgn(clean, sigma, 0x5eed_0000 + s as u64)?;
        realizations.push(collect_features(model, &pair.degraded)?);
    }
    let mut records = Vec::new();
    let mut warped_pairs = Vec::new();
    let mut refined_pairs = Vec::new();
    for i in 0..n_seeds {
        for j in i + 1..n_seeds {
            let dw = feature_distance(&realizations[i].warped, &realizations[j].warped);
            let dr = feature_distance(&realizations[i].refined, &realizations[j].refined);
            warped_pairs.push(dw);
            refined_pairs.push(dr);
            records.push(DistanceRecord {
                stage: "warped".into(),
                kind: "pairwise".into(),
                seed_a: i as u64,
                seed_b: j as i64,
                distance: dw,
            });
            records.push(DistanceRecord {
                stage: "refined".into(),
                kind: "pairwise".into(),
                seed_a: i as u64,
                seed_b: j as i64,
                distance: dr,
            });
        }
    }
    let mut warped_clean = Vec::new();
    let mut refined_clean = Vec::new();
    for (i, r) in realizations.iter().enumerate() {
        let dw = feature_distance(&r.warped, &clean_feats.warped);
        let dr = feature_distance(&r.refined, &clean_feats.refined);
        warped_clean.push(dw);
        refined_clean.push(dr);
        records.push(DistanceRecord {
            stage: "warped".into(),
            kind: "to_clean".into(),
            seed_a: i as u64,
            seed_b: -1,
            distance: dw,
        });
        records.push(DistanceRecord {
            stage: "refined".into(),
            kind: "to_clean".into(),
            seed_a: i as u64,
            seed_b: -1,
            distance: dr,
        });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(RobustnessReport {
        clip_id: clean.id.clone(),
        sigma,
        n_seeds,
        config_fingerprint: model.cfg.fingerprint(),
        warped_pairwise_mean: (!warped_pairs.is_empty()).then(|| mean(&warped_pairs)),
        refined_pairwise_mean: (!refined_pairs.is_empty()).then(|| mean(&refined_pairs)),
        warped_to_clean_mean: mean(&warped_clean),
        refined_to_clean_mean: mean(&refined_clean),
        records,
    })
}

pub fn write_robustness(report: &RobustnessReport, json_path: &Path, csv_path: &Path) -> Result<()> {
    std::fs::write(json_path, serde_json::to_string_pretty(report).expect("serializes"))?;
    let mut csv = String::from("stage,kind,seed_a,seed_b,distance\n");
    for r in &report.records {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.stage, r.kind, r.seed_a, r.seed_b, r.distance
        ));
    }
    std::fs::write(csv_path, csv)?;
    Ok(())
}

// ---- ablation runner ----

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub psnr_per_seed: Vec<f64>,
    pub median_psnr: f64,
    pub ssim_per_seed: Vec<f64>,
    pub median_ssim: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationReport {
    pub base_fingerprint: String,
    pub sigma: f32,
    pub rows: Vec<AblationRow>,
}

/// Resolve a variant name into a configuration.
pub fn variant_config(base: &ModelConfig, variant: &str) -> Result<ModelConfig> {
    let mut cfg = base.clone();
    cfg.mvr = true;
    cfg.ncfl = true;
    cfg.fa = true;
    cfg.m_conv = false;
    cfg.n_conv = false;
    cfg.quant_mode = QuantMode::Adaptive;
    cfg.direction = Direction::Uni;
    match variant {
        "full" => {}
        "baseline" => {
            cfg.mvr = false;
            cfg.ncfl = false;
            cfg.fa = false;
        }
        "no_mvr" => cfg.mvr = false,
        "no_ncfl" => cfg.ncfl = false,
        "no_fa" => cfg.fa = false,
        "ncfl_noq" => cfg.quant_mode = QuantMode::None,
        "ncfl_fixedq" => {
            cfg.quant_mode = QuantMode::Fixed;
            if cfg.fixed_step.is_none() {
                cfg.fixed_step = Some(1.0);
            }
        }
        "m_conv" => {
            cfg.mvr = false;
            cfg.m_conv = true;
        }
        "n_conv" => {
            cfg.ncfl = false;
            cfg.n_conv = true;
        }
        "uni" => {}
        "bi" => cfg.direction = Direction::Bi,
        other => {
            if let Some(spec) = other.strip_prefix("lambda=") {
                cfg.lambda_ce = parse_lambda(spec)?;
            } else {
                return Err(Error::Invalid(format!("unknown variant {other:?}")));
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_lambda(spec: &str) -> Result<f64> {
    let value = if let Some((num, den)) = spec.split_once('/') {
        let n: f64 = num.trim().parse().map_err(|_| bad_lambda(spec))?;
        let d: f64 = den.trim().parse().map_err(|_| bad_lambda(spec))?;
        n / d
    } else {
        spec.trim().parse().map_err(|_| bad_lambda(spec))?
    };
    if !(value >= 0.0) {
        return Err(bad_lambda(spec));
    }
    Ok(value)
}

fn bad_lambda(spec: &str) -> Error {
    Error::Invalid(format!("bad lambda value {spec:?} (expected e.g. 1/2048 or 0.0005)"))
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Train each variant under identical seeds and budget, evaluate on the
/// held-out set, one row per variant.
pub fn ablate(
    base: &ModelConfig,
    variants: &[String],
    train_sources: &[ClipSource],
    eval_sources: &[ClipSource],
    seeds: &[u64],
    work_dir: &Path,
) -> Result<AblationReport> {
    if variants.is_empty() {
        return Err(Error::Invalid("empty variant list".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Invalid("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        let cfg_v = variant_config(base, variant)?;
        let mut psnrs = Vec::with_capacity(seeds.len());
        let mut ssims = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = cfg_v.clone();
            cfg.seed = seed;
            let out = work_dir.join(format!("{variant}_s{seed}"));
            let report = train_two_stage(&cfg, train_sources, &out)?;
            let model = NcflModel::from_checkpoint(&report.final_checkpoint)?;
            let eval =
                evaluate(&model, eval_sources, cfg.awgn_sigma, 0xe7a1, cfg.direction)?;
            psnrs.push(eval.mean_psnr);
            ssims.push(eval.mean_ssim);
        }
        rows.push(AblationRow {
            variant: variant.clone(),
            seeds: seeds.to_vec(),
            median_psnr: median(&psnrs),
            psnr_per_seed: psnrs,
            median_ssim: median(&ssims),
            ssim_per_seed: ssims,
        });
    }
    Ok(AblationReport { base_fingerprint: base.fingerprint(), sigma: base.awgn_sigma, rows })
}

// ---- q-map export ----

/// Export the last frame's quantization-step maps: one raw container plus
/// one min-max normalized grayscale PNG per latent channel.
pub fn export_qmaps(model: &NcflModel, clip: &VideoClip, out_dir: &Path) -> Result<usize> {
    use crate::nn::Session;
    use crate::pipeline::forward_clip;

    clip.check()?;
    std::fs::create_dir_all(out_dir)?;
    let (t_len, _, _, _) = clip.frames.dims4();
    let mut ss = Session::new(&model.params);
    let frames: Vec<_> = (0..t_len).map(|t| ss.tape.leaf(clip.frame(t).unsqueeze0())).collect();
    let fwd = forward_clip(model, &mut ss, &frames, Direction::Uni, true);
    let q = fwd.qmaps[t_len - 1]
        .ok_or_else(|| Error::Invalid("checkpoint has no quantizer (q-maps unavailable)".into()))?;
    let qmap = ss.tape.value(q).squeeze0();
    write_tensor(&qmap, &out_dir.join("qmap.ncfl"))?;
    let (ce, qh, qw) = qmap.dims3();
    for c in 0..ce {
        let plane = &qmap.data()[c * qh * qw..(c + 1) * qh * qw];
        let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = (hi - lo).max(1e-12);
        let norm = Tensor::new(
            &[qh, qw],
            plane.iter().map(|v| (v - lo) / span).collect(),
        );
        crate::data::save_png_gray(&norm, &out_dir.join(format!("qmap_c{c:03}.png")))?;
    }
    Ok(ce)
}

/// Helper used by the CLI and tests: restore a clip and write PNG frames.
pub fn denoise_to_dir(
    model: &NcflModel,
    clip: &VideoClip,
    direction: Direction,
    out_dir: &Path,
) -> Result<PathBuf> {
    let (restored, _) = run_clip(model, clip, direction)?;
    crate::data::save_clip_dir(&restored, out_dir)?;
    Ok(out_dir.to_path_buf())
}
