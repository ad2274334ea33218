#![allow(dead_code)]

use fedadapt::experiments::ExperimentConfig;
use fedadapt::model::BlockedWeights;

/// Parameters of one block as plain f64 slices, read back through the
/// public serialization so the oracle shares no code with the model.
pub struct FlatBlock {
    pub n_in: usize,
    pub m: usize,
    pub p: Vec<f64>,
}

impl FlatBlock {
    fn w(&self, r: usize, k: usize) -> f64 {
        self.p[r * self.n_in + k]
    }
    fn b(&self, r: usize) -> f64 {
        self.p[self.m * self.n_in + r]
    }
    fn v(&self, r: usize) -> f64 {
        self.p[self.m * self.n_in + self.m + r]
    }
    fn c(&self) -> f64 {
        self.p[self.m * self.n_in + 2 * self.m]
    }
}

pub fn flatten(w: &BlockedWeights) -> Vec<FlatBlock> {
    let spec = *w.spec();
    let bytes = w.to_bytes();
    let all: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mut off = 0;
    (0..spec.num_blocks)
        .map(|i| {
            let n_in = if i == 0 { spec.input_dim } else { spec.hidden_dim };
            let len = spec.hidden_dim * n_in + 2 * spec.hidden_dim + 1;
            let p = all[off..off + len].to_vec();
            off += len;
            FlatBlock { n_in, m: spec.hidden_dim, p }
        })
        .collect()
}

/// Per-head squared losses of the tanh chain.
pub fn head_losses(blocks: &[FlatBlock], x: &[f64], t: f64) -> Vec<f64> {
    head_losses_from(blocks, x, t).0
}

/// Losses of every head fed by `input`, plus the hidden state after each block.
pub fn head_losses_from(blocks: &[FlatBlock], input: &[f64], t: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut input = input.to_vec();
    let mut out = Vec::new();
    let mut hidden = Vec::new();
    for blk in blocks {
        let mut h = vec![0.0; blk.m];
        for (r, hr) in h.iter_mut().enumerate() {
            let mut a = blk.b(r);
            for (k, xk) in input.iter().enumerate() {
                a += blk.w(r, k) * xk;
            }
            *hr = a.tanh();
        }
        let mut y = blk.c();
        for (r, hr) in h.iter().enumerate() {
            y += blk.v(r) * hr;
        }
        out.push((y - t).powi(2));
        hidden.push(h.clone());
        input = h;
    }
    (out, hidden)
}

pub fn close_with_floor(a: f64, b: f64, rel: f64, floor: f64) -> bool {
    (a - b).abs() <= (rel * a.abs().max(b.abs())).max(floor)
}

/// Distance in units in the last place between two finite f32 values.
pub fn ulps(a: f32, b: f32) -> u32 {
    let key = |x: f32| {
        let i = x.to_bits() as i32;
        if i < 0 {
            i32::MIN.wrapping_sub(i)
        } else {
            i
        }
    };
    key(a).abs_diff(key(b))
}

pub fn config(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(text).unwrap()
}

/// HARD listener domain, EASY active pool, warm start on a neutral domain.
pub fn hard_listener_benchmark(seed: u64, mode: &str, clients: usize) -> ExperimentConfig {
    config(&format!(
        r#"
seed = {seed}
mode = "{mode}"
supervision = "sparse"
update_interval = 10

[warmup]
domain = "synthetic"
steps = 5000

[[domains]]
name = "synthetic"

[[domains]]
name = "night"
difficulty = "hard"

[[domains]]
name = "city"

[[domains]]
name = "road"

[[domains]]
name = "campus"

[[domains]]
name = "residential"

[listener]
sequence = [{{ domain = "night", frames = 2000 }}]

[active]
count = {clients}
pool = ["city", "road", "campus", "residential"]
"#
    ))
}

/// Short federated setup without warm-up, for traffic and engine checks.
pub fn small_federated(seed: u64, mode: &str, clients: usize, t: usize, frames: usize) -> ExperimentConfig {
    config(&format!(
        r#"
seed = {seed}
mode = "{mode}"
update_interval = {t}

[[domains]]
name = "night"
difficulty = "hard"

[[domains]]
name = "city"

[[domains]]
name = "road"

[listener]
sequence = [{{ domain = "night", frames = {frames} }}]

[active]
count = {clients}
pool = ["city", "road"]
segments = 3
frames_per_segment = 200
"#
    ))
}
