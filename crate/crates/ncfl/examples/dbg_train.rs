// probe: per-iteration wall time vs GEMM work at desk scale
use ncfl::config::ModelConfig;
use ncfl::conv::{gemm_macs, reset_gemm_macs};
use ncfl::data::{synthetic_corpus, ClipSource, SourceKind, SynthSpec};
use ncfl::pipeline::train_two_stage;

fn main() {
    let mut cfg = ModelConfig::desk();
    cfg.total_iters = 30;
    cfg.stage1_iters = 30;
    cfg.log_every = 30;
    let sources: Vec<ClipSource> =
        synthetic_corpus(SynthSpec { n_clips: 12, frames: 10, height: 48, width: 48, seed: 1 })
            .into_iter()
            .map(|clean| ClipSource { clean, kind: SourceKind::Awgn { sigma: None } })
            .collect();
    let dir = std::env::temp_dir().join("ncfl_dbg_train");
    reset_gemm_macs();
    let start = std::time::Instant::now();
    train_two_stage(&cfg, &sources, &dir).unwrap();
    let dt = start.elapsed().as_secs_f64();
    let gmacs = gemm_macs() as f64 / 1e9;
    println!(
        "30 iters in {:.2}s = {:.3} s/iter; {:.2} GMAC/iter; {:.2} GMAC/s effective",
        dt,
        dt / 30.0,
        gmacs / 30.0,
        gmacs / dt
    );
}
