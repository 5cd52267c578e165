//! Recurrent orchestration and the two-stage trainer.
//!
//! Per frame: estimate flow from the previous degraded frame, refine the
//! MV, warp the propagated features, refine them through the compression
//! bottleneck, and fuse with the current frame to produce the restored
//! output plus the next step's features. Training unrolls whole clips
//! (backprop through time), optimizing L2 + lambda*CE in stage 1 and L2
//! alone in stage 2, with the flow net frozen for an initial window and
//! then trained at its own learning rate. Both rates follow cosine
//! annealing to zero.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::config::{Direction, ModelConfig};
use crate::data::{
    augment, sample_patch_batch, synthesize_awgn, ClipPair, ClipSource, Degradation, SourceKind,
};
use crate::error::{Error, Result};
use crate::flow::{FlowNet, Mvr};
use crate::nn::{cosine_lr, load_checkpoint, save_checkpoint, AdamW, ParamStore, Session};
use crate::refine::RefineStage;
use crate::restore::RestoreNet;
use crate::tensor::{write_tensor, Tensor};
use crate::types::{FeatureMap, FeatureStage, VideoClip};

pub struct NcflModel {
    pub cfg: ModelConfig,
    pub flow: FlowNet,
    pub mvr: Mvr,
    pub refine: RefineStage,
    pub restore: RestoreNet,
    pub params: ParamStore,
}

impl NcflModel {
    pub fn new(cfg: ModelConfig) -> Result<NcflModel> {
        cfg.validate()?;
        let flow = FlowNet::new(&cfg);
        let mvr = Mvr::new(&cfg);
        let refine = RefineStage::new(&cfg);
        let restore = RestoreNet::new(&cfg);
        let mut params = ParamStore::new();
        flow.register(&mut params, cfg.seed);
        if cfg.mvr || cfg.m_conv {
            mvr.register(&mut params, cfg.seed);
        }
        refine.register(&mut params, cfg.seed);
        restore.register(&mut params, cfg.seed);
        Ok(NcflModel { cfg, flow, mvr, refine, restore, params })
    }

    pub fn from_checkpoint(dir: &Path) -> Result<NcflModel> {
        let (cfg, params) = load_checkpoint(dir)?;
        let mut model = NcflModel::new(cfg)?;
        for name in model.params.names().map(String::from).collect::<Vec<_>>() {
            if !params.contains(&name) {
                return Err(Error::Checkpoint {
                    path: dir.to_path_buf(),
                    message: format!("missing parameter {name}"),
                });
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, &self.cfg, &self.params)
    }

    fn mv_refine_active(&self) -> bool {
        self.cfg.mvr || self.cfg.m_conv
    }
}

/// Carried between recurrent steps: the previous degraded frame and the
/// propagated features c_{t-1}. At t = 0 there is no previous frame and
/// the features are the zero map (flow is forced to zero by skipping the
/// warp entirely).
pub struct RecurrentState {
    pub prev_frame: Option<Tensor>,
    pub prev_features: Tensor,
    pub t: usize,
}

impl RecurrentState {
    pub fn initial(model: &NcflModel, h: usize, w: usize) -> RecurrentState {
        RecurrentState {
            prev_frame: None,
            prev_features: Tensor::zeros(&[model.cfg.feature_width, h, w]),
            t: 0,
        }
    }
}

struct BatchStep {
    y: Var,
    ce: Var,
    c_next: Var,
    refined: Var,
    warped: Var,
    qmap: Option<Var>,
}

/// One recurrent step on batched tensors.
fn step_batched(
    model: &NcflModel,
    ss: &mut Session,
    prev_frame: Option<Var>,
    prev_feats: Var,
    frame: Var,
    bwd_feats: Option<Var>,
    freeze_flow: bool,
) -> BatchStep {
    let c_hat = match prev_frame {
        None => prev_feats, // zero features, zero flow at the base case
        Some(prev) => {
            let mv = model.flow.forward(ss, prev, frame);
            let mv = if freeze_flow { ss.tape.detach(mv) } else { mv };
            let mv_refined =
                if model.mv_refine_active() { model.mvr.forward(ss, mv) } else { mv };
            ss.tape.warp(prev_feats, mv_refined)
        }
    };
    let out = model.refine.forward(ss, frame, c_hat);
    let (refined, ce) = (out.refined, out.ce);
    let bwd = match bwd_feats {
        Some(v) => v,
        None => {
            let shape = ss.tape.value(refined).shape().to_vec();
            ss.tape.leaf(Tensor::zeros(&shape))
        }
    };
    let (y, c_next) = model.restore.forward(ss, frame, refined, bwd);
    BatchStep { y, ce, c_next, refined, warped: c_hat, qmap: out.q }
}

pub struct ClipForward {
    pub ys: Vec<Var>,
    pub ces: Vec<Var>,
    /// Refined features per frame (forward scan).
    pub refined: Vec<Var>,
    /// Warped features per frame (forward scan).
    pub warped: Vec<Var>,
    /// Quantization-step maps per frame (None without a quantizer).
    pub qmaps: Vec<Option<Var>>,
}

/// Unrolled forward over a clip of batched frames [N,3,H,W]. In the
/// bi-directional mode a backward scan first produces future-derived
/// refined features; the frame with no future exports a zero map, which
/// makes T = 1 coincide with the uni-directional output exactly.
pub fn forward_clip(
    model: &NcflModel,
    ss: &mut Session,
    frames: &[Var],
    direction: Direction,
    freeze_flow: bool,
) -> ClipForward {
    let t_len = frames.len();
    let (n, _, h, w) = ss.tape.value(frames[0]).dims4();
    let cf = model.cfg.feature_width;
    let zero_feats = || Tensor::zeros(&[n, cf, h, w]);

    let mut bwd_exports: Vec<Option<Var>> = vec![None; t_len];
    let mut bwd_ces: Vec<Option<Var>> = vec![None; t_len];
    if direction == Direction::Bi && t_len > 1 {
        let mut prev_frame: Option<Var> = None;
        let mut prev_feats = ss.tape.leaf(zero_feats());
        for (k, t) in (0..t_len).rev().enumerate() {
            let step = step_batched(
                model,
                ss,
                prev_frame,
                prev_feats,
                frames[t],
                None,
                freeze_flow,
            );
            // The last frame has no future: export nothing for it.
            if k > 0 {
                bwd_exports[t] = Some(step.refined);
            }
            bwd_ces[t] = Some(step.ce);
            prev_frame = Some(frames[t]);
            prev_feats = step.c_next;
        }
    }

    let mut out = ClipForward {
        ys: Vec::with_capacity(t_len),
        ces: Vec::with_capacity(t_len),
        refined: Vec::with_capacity(t_len),
        warped: Vec::with_capacity(t_len),
        qmaps: Vec::with_capacity(t_len),
    };
    let mut prev_frame: Option<Var> = None;
    let mut prev_feats = ss.tape.leaf(zero_feats());
    for (t, &frame) in frames.iter().enumerate() {
        let bwd = match bwd_exports[t] {
            Some(v) => Some(v),
            None if direction == Direction::Bi && t_len > 1 => {
                Some(ss.tape.leaf(zero_feats()))
            }
            None => None,
        };
        let step = step_batched(model, ss, prev_frame, prev_feats, frame, bwd, freeze_flow);
        let ce = match bwd_ces[t] {
            Some(b) => ss.tape.add(step.ce, b),
            None => step.ce,
        };
        out.ys.push(step.y);
        out.ces.push(ce);
        out.refined.push(step.refined);
        out.warped.push(step.warped);
        out.qmaps.push(step.qmap);
        prev_frame = Some(frame);
        prev_feats = step.c_next;
    }
    out
}

/// Single-sample recurrent step (the public per-frame operation).
/// Returns the restored frame, the CE bits of this step, and the state
/// for the next step.
pub fn step(
    model: &NcflModel,
    state: &RecurrentState,
    frame: &Tensor,
) -> Result<(Tensor, f64, RecurrentState)> {
    let (c, h, w) = frame.dims3();
    if c != 3 {
        return Err(Error::shape(format!("frame must be [3,H,W], got {:?}", frame.shape())));
    }
    if state.prev_features.shape() != [model.cfg.feature_width, h, w] {
        return Err(Error::shape(format!(
            "state features {:?} vs frame {h}x{w}",
            state.prev_features.shape()
        )));
    }
    let mut ss = Session::new(&model.params);
    let fv = ss.tape.leaf(frame.unsqueeze0());
    let pv = state.prev_frame.as_ref().map(|p| ss.tape.leaf(p.unsqueeze0()));
    let cv = ss.tape.leaf(state.prev_features.unsqueeze0());
    let step = step_batched(model, &mut ss, pv, cv, fv, None, true);
    let y = ss.tape.value(step.y).squeeze0();
    let ce = ss.tape.value(step.ce).scalar_value() as f64;
    let c_next = ss.tape.value(step.c_next).squeeze0();
    Ok((
        y,
        ce,
        RecurrentState { prev_frame: Some(frame.clone()), prev_features: c_next, t: state.t + 1 },
    ))
}

/// Run a whole clip (evaluation path: outputs clamped to [0,1]).
/// Returns the restored clip and per-frame CE bits.
pub fn run_clip(
    model: &NcflModel,
    clip: &VideoClip,
    direction: Direction,
) -> Result<(VideoClip, Vec<f64>)> {
    clip.check()?;
    let (t_len, _, h, w) = clip.frames.dims4();
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::shape(format!(
            "clip size {h}x{w} must be divisible by 4 (flow pyramid and latent grid)"
        )));
    }
    let mut ss = Session::new(&model.params);
    let frames: Vec<Var> =
        (0..t_len).map(|t| ss.tape.leaf(clip.frame(t).unsqueeze0())).collect();
    let fwd = forward_clip(model, &mut ss, &frames, direction, true);
    let mut outs = Vec::with_capacity(t_len);
    let mut ces = Vec::with_capacity(t_len);
    for t in 0..t_len {
        outs.push(ss.tape.value(fwd.ys[t]).squeeze0().map(|v| v.clamp(0.0, 1.0)));
        ces.push(ss.tape.value(fwd.ces[t]).scalar_value() as f64);
    }
    let out_clip = VideoClip {
        frames: Tensor::stack(&outs),
        frame_rate: clip.frame_rate,
        id: format!("{}+restored", clip.id),
    };
    Ok((out_clip, ces))
}

/// Per-frame features from a clip pass, for robustness analysis.
pub struct ClipFeatures {
    pub warped: Vec<FeatureMap>,
    pub refined: Vec<FeatureMap>,
}

pub fn collect_features(model: &NcflModel, clip: &VideoClip) -> Result<ClipFeatures> {
    clip.check()?;
    let (t_len, _, _, _) = clip.frames.dims4();
    let mut ss = Session::new(&model.params);
    let frames: Vec<Var> =
        (0..t_len).map(|t| ss.tape.leaf(clip.frame(t).unsqueeze0())).collect();
    let fwd = forward_clip(model, &mut ss, &frames, Direction::Uni, true);
    Ok(ClipFeatures {
        warped: fwd
            .warped
            .iter()
            .map(|&v| FeatureMap {
                data: ss.tape.value(v).squeeze0(),
                stage: FeatureStage::Warped,
            })
            .collect(),
        refined: fwd
            .refined
            .iter()
            .map(|&v| FeatureMap {
                data: ss.tape.value(v).squeeze0(),
                stage: FeatureStage::Refined,
            })
            .collect(),
    })
}

/// Mean over frames of [ MSE(y_t, out_t) + lambda * ce_t ].
pub fn total_loss(
    outputs: &[Tensor],
    targets: &[Tensor],
    ce_per_frame: &[f64],
    lambda: f64,
) -> Result<f64> {
    if outputs.len() != targets.len() || outputs.len() != ce_per_frame.len() {
        return Err(Error::Invalid(format!(
            "length mismatch: outputs {}, targets {}, ce {}",
            outputs.len(),
            targets.len(),
            ce_per_frame.len()
        )));
    }
    let t = outputs.len() as f64;
    let mut total = 0.0;
    for ((o, y), ce) in outputs.iter().zip(targets).zip(ce_per_frame) {
        total += o.mse(y) + lambda * ce;
    }
    Ok(total / t)
}

// ---- trainer ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: usize,
    pub loss: f64,
    pub l2: f64,
    pub ce_bits: f64,
    pub psnr: f64,
    pub lr_main: f64,
    pub lr_flow: f64,
    pub stage: u8,
}

pub struct TrainReport {
    pub metrics: Vec<MetricsRecord>,
    pub final_checkpoint: std::path::PathBuf,
}

fn mix_seed(seed: u64, tag: &str, i: usize) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325 ^ seed;
    for &b in tag.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^= i as u64;
    h.wrapping_mul(0x100000001b3)
}

/// Two-stage training: L2 + lambda*CE for `stage1_iters`, then L2 only.
/// Writes `metrics.ndjson`, periodic checkpoints and `ckpt_final` under
/// `out_dir`. Fully deterministic given the config seed.
pub fn train_two_stage(
    cfg: &ModelConfig,
    sources: &[ClipSource],
    out_dir: &Path,
) -> Result<TrainReport> {
    train_two_stage_verbose(cfg, sources, out_dir, false)
}

/// As [`train_two_stage`], optionally echoing metric records to stdout.
pub fn train_two_stage_verbose(
    cfg: &ModelConfig,
    sources: &[ClipSource],
    out_dir: &Path,
    progress: bool,
) -> Result<TrainReport> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(Error::Data("training needs at least one clip source".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut model = NcflModel::new(cfg.clone())?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut log = std::io::BufWriter::new(std::fs::File::create(out_dir.join("metrics.ndjson"))?);
    let mut metrics = Vec::new();

    // Materialize the crop pool. Fresh-noise AWGN sources keep degraded
    // == clean here; noise is added per iteration after cropping.
    let fresh = cfg.noise_per_iter;
    let mut pool: Vec<ClipPair> = Vec::with_capacity(sources.len());
    for (idx, src) in sources.iter().enumerate() {
        match (&src.kind, fresh) {
            (SourceKind::Awgn { sigma }, true) => pool.push(ClipPair {
                clean: src.clean.clone(),
                degraded: src.clean.clone(),
                degradation: Degradation::Awgn { sigma: sigma.unwrap_or(cfg.awgn_sigma) },
            }),
            _ => pool.push(src.realize(cfg.awgn_sigma, mix_seed(cfg.seed, "frozen", idx))?),
        }
    }

    for iter in 1..=cfg.total_iters {
        let stage = if iter <= cfg.stage1_iters { 1u8 } else { 2 };
        let lambda = if stage == 1 { cfg.lambda_ce } else { 0.0 };
        let frozen = iter <= cfg.flow_freeze_iters;
        let lr_main = cosine_lr(cfg.lr_main, iter - 1, cfg.total_iters);
        let lr_flow = if frozen { 0.0 } else { cosine_lr(cfg.lr_flow, iter - 1, cfg.total_iters) };

        let batch = sample_patch_batch(
            &pool,
            cfg.patch,
            cfg.clip_len,
            cfg.batch,
            mix_seed(cfg.seed, "batch", iter),
        )?;
        let mut batch = augment(&batch, mix_seed(cfg.seed, "aug", iter))?;
        if fresh {
            for (b, pair) in batch.iter_mut().enumerate() {
                if let Degradation::Awgn { sigma } = pair.degradation {
                    let noised = synthesize_awgn(
                        &pair.clean,
                        sigma,
                        mix_seed(cfg.seed, "noise", iter * 1009 + b),
                    )?;
                    pair.degraded = noised.degraded;
                }
            }
        }

        // Stack [N,3,H,W] per frame index.
        let t_len = cfg.clip_len;
        let degraded_frames: Vec<Tensor> = (0..t_len)
            .map(|t| Tensor::stack(&batch.iter().map(|p| p.degraded.frame(t)).collect::<Vec<_>>()))
            .collect();
        let clean_frames: Vec<Tensor> = (0..t_len)
            .map(|t| Tensor::stack(&batch.iter().map(|p| p.clean.frame(t)).collect::<Vec<_>>()))
            .collect();

        let mut ss = Session::new(&model.params);
        let inputs: Vec<Var> = degraded_frames.iter().map(|f| ss.tape.leaf(f.clone())).collect();
        let fwd = forward_clip(&model, &mut ss, &inputs, model.cfg.direction, frozen);
        let mut l2_acc: Option<Var> = None;
        let mut ce_acc: Option<Var> = None;
        for t in 0..t_len {
            let target = ss.tape.leaf(clean_frames[t].clone());
            let mse = ss.tape.mse(fwd.ys[t], target);
            l2_acc = Some(match l2_acc {
                Some(acc) => ss.tape.add(acc, mse),
                None => mse,
            });
            ce_acc = Some(match ce_acc {
                Some(acc) => ss.tape.add(acc, fwd.ces[t]),
                None => fwd.ces[t],
            });
        }
        let inv_t = 1.0 / t_len as f32;
        let l2_mean = ss.tape.scale(l2_acc.expect("clip_len >= 1"), inv_t);
        let ce_mean = ss.tape.scale(ce_acc.expect("clip_len >= 1"), inv_t);
        let ce_scaled = ss.tape.scale(ce_mean, lambda as f32);
        let loss = ss.tape.add(l2_mean, ce_scaled);

        let loss_v = ss.tape.value(loss).scalar_value() as f64;
        let l2_v = ss.tape.value(l2_mean).scalar_value() as f64;
        let ce_v = ss.tape.value(ce_mean).scalar_value() as f64;
        if !loss_v.is_finite() {
            // Dump the offending batch for diagnosis, then abort.
            let dump = out_dir.join(format!("nonfinite_iter{iter}"));
            std::fs::create_dir_all(&dump)?;
            for (b, pair) in batch.iter().enumerate() {
                write_tensor(&pair.degraded.frames, &dump.join(format!("degraded{b}.ncfl")))?;
                write_tensor(&pair.clean.frames, &dump.join(format!("clean{b}.ncfl")))?;
            }
            return Err(Error::Train {
                iter,
                message: format!("non-finite loss {loss_v}; batch dumped to {}", dump.display()),
            });
        }

        let grads = ss.tape.backward(loss);
        let updates: Vec<(String, Tensor)> = ss
            .bound()
            .filter_map(|(n, v)| grads.get(v).map(|g| (n.to_string(), g.clone())))
            .collect();
        drop(ss);
        opt.step(&mut model.params, &updates, |name| {
            if name.starts_with("flow.") {
                lr_flow
            } else {
                lr_main
            }
        });

        if iter == 1 || iter % cfg.log_every == 0 || iter == cfg.total_iters {
            let rec = MetricsRecord {
                iter,
                loss: loss_v,
                l2: l2_v,
                ce_bits: ce_v,
                psnr: 10.0 * (1.0 / l2_v.max(1e-12)).log10(),
                lr_main,
                lr_flow,
                stage,
            };
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(log, "{line}")?;
            if progress {
                println!(
                    "iter {:>6}/{} stage {} loss {:.6} psnr {:.2} ce {:.3}",
                    rec.iter, cfg.total_iters, rec.stage, rec.loss, rec.psnr, rec.ce_bits
                );
            }
            metrics.push(rec);
        }
        if iter % cfg.ckpt_every == 0 && iter != cfg.total_iters {
            model.save(&out_dir.join(format!("ckpt_{iter:06}")))?;
        }
    }
    log.flush()?;
    let final_dir = out_dir.join("ckpt_final");
    model.save(&final_dir)?;
    Ok(TrainReport { metrics, final_checkpoint: final_dir })
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("bad metrics line: {e}")))?,
        );
    }
    Ok(out)
}
