// debug: loss trajectory of supervised flow training
use ncfl::config::ModelConfig;
use ncfl::flow::FlowNet;
use ncfl::nn::{AdamW, ParamStore, Session};
use ncfl::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn pattern_frame(h: usize, w: usize, ox: f32, oy: f32, rng_seed: u64) -> Tensor {
    let mut rng = ChaCha12Rng::seed_from_u64(rng_seed);
    let waves: Vec<(f32, f32, f32, f32)> = (0..6)
        .map(|_| {
            let wavelength = rng.gen_range(5.0..14.0f32);
            let theta = rng.gen_range(0.0..std::f32::consts::TAU);
            let k = std::f32::consts::TAU / wavelength;
            (k * theta.cos(), k * theta.sin(), rng.gen_range(0.0..6.28f32), rng.gen_range(0.05..0.12f32))
        })
        .collect();
    Tensor::from_fn(&[3, h, w], |i| {
        let pix = i % (h * w);
        let (y, x) = (pix / w, pix % w);
        let (px, py) = (x as f32 - ox, y as f32 - oy);
        let mut v = 0.5;
        for &(kx, ky, ph, a) in &waves {
            v += a * (kx * px + ky * py + ph).sin();
        }
        v
    })
}

fn main() {
    let cfg = ModelConfig::desk();
    let net = FlowNet::new(&cfg);
    let mut store = ParamStore::new();
    net.register(&mut store, cfg.seed);
    let (h, w) = (16usize, 16usize);
    let mut opt = AdamW::new(0.0);
    let mut rng = ChaCha12Rng::seed_from_u64(42);
    for it in 0..2000 {
        let mut prevs = Vec::new();
        let mut curs = Vec::new();
        let mut targets = Vec::new();
        for _ in 0..8 {
            let seed = rng.gen::<u64>() % 1000;
            let (dx, dy) = (rng.gen_range(-2.0..2.0f32), rng.gen_range(-2.0..2.0f32));
            prevs.push(pattern_frame(h, w, 0.0, 0.0, seed));
            curs.push(pattern_frame(h, w, dx, dy, seed));
            let mut t = Tensor::zeros(&[2, h, w]);
            for p in 0..h * w {
                t.data_mut()[p] = -dx;
                t.data_mut()[h * w + p] = -dy;
            }
            targets.push(t);
        }
        let mut ss = Session::new(&store);
        let pv = ss.tape.leaf(Tensor::stack(&prevs));
        let cv = ss.tape.leaf(Tensor::stack(&curs));
        let tv = ss.tape.leaf(Tensor::stack(&targets));
        let flow = net.forward(&mut ss, pv, cv);
        let loss = ss.tape.mse(flow, tv);
        let grads = ss.tape.backward(loss);
        let updates: Vec<(String, Tensor)> = ss
            .bound()
            .filter_map(|(n, v)| grads.get(v).map(|g| (n.to_string(), g.clone())))
            .collect();
        if it == 0 {
            let gnorm: f32 = updates.iter().map(|(_, g)| g.data().iter().map(|v| v*v).sum::<f32>()).sum::<f32>().sqrt();
            println!("bound params with grads: {} / grad norm {gnorm:.3e}", updates.len());
        }
        let lv = ss.tape.value(loss).scalar_value();
        drop(ss);
        opt.step(&mut store, &updates, |_| 1e-3);
        if it % 200 == 0 {
            println!("iter {it}: loss {lv:.5}");
        }
    }
}
