//! Small image classifiers, cross-entropy and SGD with momentum.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, value_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Mlp,
    CnnSmall,
}

impl Arch {
    fn code(self) -> u8 {
        match self {
            Arch::Mlp => 0,
            Arch::CnnSmall => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Arch::Mlp),
            1 => Ok(Arch::CnnSmall),
            _ => value_err(format!("unknown architecture code {c}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    Avg,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub channels: usize,
    pub n: usize,
    pub classes: usize,
    /// Hidden widths for `Mlp`, the three conv channel counts for `CnnSmall`.
    pub widths: Vec<usize>,
    pub pool: Pool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn mlp(channels: usize, n: usize, classes: usize, hidden: &[usize], seed: u64) -> Self {
        Self { arch: Arch::Mlp, channels, n, classes, widths: hidden.to_vec(), pool: Pool::Avg, seed }
    }

    pub fn cnn_small(channels: usize, n: usize, classes: usize, widths: [usize; 3], seed: u64) -> Self {
        Self { arch: Arch::CnnSmall, channels, n, classes, widths: widths.to_vec(), pool: Pool::Avg, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return value_err(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.channels == 0 || self.n == 0 || self.widths.contains(&0) {
            return dim_err("channels, side length and widths must be positive");
        }
        if self.arch == Arch::CnnSmall {
            if self.widths.len() != 3 {
                return dim_err(format!("cnn-small needs 3 conv widths, got {}", self.widths.len()));
            }
            if self.n % 8 != 0 {
                return dim_err(format!("cnn-small pools three times by 2; side {} is not a multiple of 8", self.n));
            }
        }
        Ok(())
    }
}

/// A classifier: its configuration plus parameter tensors in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    params: Vec<Tensor>,
}

fn kaiming_uniform(rng: &mut Xoshiro256PlusPlus, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect()).unwrap()
}

fn bias_uniform(rng: &mut Xoshiro256PlusPlus, len: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::new(&[len], (0..len).map(|_| rng.random_range(-bound..bound)).collect()).unwrap()
}

fn param_shapes(cfg: &ModelConfig) -> Vec<(Vec<usize>, usize)> {
    let mut shapes = Vec::new();
    match cfg.arch {
        Arch::Mlp => {
            let mut fan_in = cfg.channels * cfg.n * cfg.n;
            for &h in cfg.widths.iter().chain(std::iter::once(&cfg.classes)) {
                shapes.push((vec![fan_in, h], fan_in));
                shapes.push((vec![h], fan_in));
                fan_in = h;
            }
        }
        Arch::CnnSmall => {
            let mut cin = cfg.channels;
            for &cout in &cfg.widths {
                shapes.push((vec![cout, cin, 3, 3], cin * 9));
                shapes.push((vec![cout], cin * 9));
                cin = cout;
            }
            let side = cfg.n / 8;
            let feat = cin * side * side;
            shapes.push((vec![feat, cfg.classes], feat));
            shapes.push((vec![cfg.classes], feat));
        }
    }
    shapes
}

/// Builds a model with seeded Kaiming-uniform (fan-in) weights.
pub fn build_model(cfg: ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(cfg.seed);
    let params = param_shapes(&cfg)
        .into_iter()
        .map(|(shape, fan_in)| {
            if shape.len() == 1 {
                bias_uniform(&mut rng, shape[0], fan_in)
            } else {
                kaiming_uniform(&mut rng, &shape, fan_in)
            }
        })
        .collect();
    Ok(Model { cfg, params })
}

/// Adds a per-channel bias `b: (C)` to `x: (B, C, ...)`.
fn add_channel_bias(tape: &mut Tape, x: Var, b: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let mut bb = tape.broadcast_axis(b, 0, shape[0])?;
    for (axis, &len) in shape.iter().enumerate().skip(2) {
        bb = tape.broadcast_axis(bb, axis, len)?;
    }
    tape.add(x, bb)
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone())).collect()
    }

    /// Records parameters as constants (no gradient).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.clone())).collect()
    }

    /// Logits `(B, classes)` for a `(B, C, N, N)` input.
    pub fn forward(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.cfg.channels || s[2] != self.cfg.n || s[3] != self.cfg.n {
            return dim_err(format!(
                "model expects (B, {}, {}, {}) input, got {s:?}",
                self.cfg.channels, self.cfg.n, self.cfg.n
            ));
        }
        let batch = s[0];
        match self.cfg.arch {
            Arch::Mlp => {
                let mut h = tape.reshape(x, &[batch, s[1] * s[2] * s[3]])?;
                let layers = params.len() / 2;
                for l in 0..layers {
                    h = tape.matmul(h, params[2 * l])?;
                    h = add_channel_bias(tape, h, params[2 * l + 1])?;
                    if l + 1 < layers {
                        h = tape.relu(h);
                    }
                }
                Ok(h)
            }
            Arch::CnnSmall => {
                let mut h = x;
                for block in 0..3 {
                    h = tape.conv2d(h, params[2 * block], 1, 1)?;
                    h = add_channel_bias(tape, h, params[2 * block + 1])?;
                    h = tape.relu(h);
                    h = match self.cfg.pool {
                        Pool::Avg => tape.avgpool2d(h, 2)?,
                        Pool::Max => tape.maxpool2d(h, 2)?,
                    };
                }
                let feat = tape.shape(h)[1..].iter().product();
                let h = tape.reshape(h, &[batch, feat])?;
                let h = tape.matmul(h, params[6])?;
                add_channel_bias(tape, h, params[7])
            }
        }
    }

    /// Logits for a batch without recording gradients.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let out = self.forward(&mut tape, x, &params)?;
        Ok(tape.value(out).clone())
    }

    /// Arg-max class per sample (ties go to the lowest index).
    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(images)?;
        let k = self.cfg.classes;
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }

    /// FNV-1a hash over the architecture and parameter bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        eat(&[self.cfg.arch.code()]);
        for p in &self.params {
            for &d in p.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for &v in p.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Mean cross-entropy of `logits: (B, K)` against labels.
pub fn ce_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

/// SGD hyperparameters plus one velocity buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl OptimState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { lr, momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }
}

/// `v <- mu v + (g + wd p)`, `p <- p - lr v`.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimState) -> Result<()> {
    if params.len() != grads.len() {
        return dim_err(format!("{} parameters but {} gradients", params.len(), grads.len()));
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return dim_err(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()));
        }
        let (mu, wd, lr) = (state.momentum, state.weight_decay, state.lr);
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = mu * *vi + (gi + wd * *pi);
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

const MAGIC: &[u8; 4] = b"FLNS";
/// Checkpoint blob format version.
pub const CHECKPOINT_VERSION: u32 = 1;

fn read_u32(bytes: &[u8], at: &mut usize) -> Result<u32> {
    let end = *at + 4;
    let slice = bytes
        .get(*at..end)
        .ok_or_else(|| Error::Value(format!("checkpoint truncated at byte {at}")))?;
    *at = end;
    Ok(u32::from_le_bytes(slice.try_into().unwrap()))
}

impl Model {
    /// Serialises to the versioned checkpoint blob: magic, version, arch,
    /// (channels, n, classes, pool), shape table, then little-endian f32
    /// parameters in declaration order.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.cfg.arch.code());
        out.push(match self.cfg.pool {
            Pool::Avg => 0,
            Pool::Max => 1,
        });
        for v in [self.cfg.channels, self.cfg.n, self.cfg.classes, self.params.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for p in &self.params {
            out.extend_from_slice(&(p.rank() as u32).to_le_bytes());
            for &d in p.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for p in &self.params {
            for &v in p.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 10 || &bytes[..4] != MAGIC {
            return value_err("not a checkpoint: bad magic");
        }
        let mut at = 4;
        let version = read_u32(bytes, &mut at)?;
        if version != CHECKPOINT_VERSION {
            return value_err(format!("unsupported checkpoint version {version}"));
        }
        let arch = Arch::from_code(bytes[at])?;
        let pool = match bytes[at + 1] {
            0 => Pool::Avg,
            1 => Pool::Max,
            c => return value_err(format!("unknown pool code {c}")),
        };
        at += 2;
        let channels = read_u32(bytes, &mut at)? as usize;
        let n = read_u32(bytes, &mut at)? as usize;
        let classes = read_u32(bytes, &mut at)? as usize;
        let count = read_u32(bytes, &mut at)? as usize;
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let rank = read_u32(bytes, &mut at)? as usize;
            let shape = (0..rank).map(|_| read_u32(bytes, &mut at).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            shapes.push(shape);
        }
        // Widths: output size of every weight except the head.
        let widths: Vec<usize> = match arch {
            Arch::Mlp => shapes.iter().step_by(2).map(|s| s[1]).take(count / 2 - 1).collect(),
            Arch::CnnSmall => shapes.iter().step_by(2).map(|s| s[0]).take(3).collect(),
        };
        let cfg = ModelConfig { arch, channels, n, classes, widths, pool, seed: 0 };
        cfg.validate()?;
        let expected: Vec<Vec<usize>> = param_shapes(&cfg).into_iter().map(|(s, _)| s).collect();
        if expected != shapes {
            return value_err("checkpoint shape table does not match its architecture");
        }
        let mut params = Vec::with_capacity(count);
        for shape in shapes {
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let end = at + 4;
                let b = bytes
                    .get(at..end)
                    .ok_or_else(|| Error::Value(format!("checkpoint payload truncated at byte {at}")))?;
                data.push(f32::from_le_bytes(b.try_into().unwrap()) as f64);
                at = end;
            }
            params.push(Tensor::new(&shape, data)?);
        }
        if at != bytes.len() {
            return value_err(format!("{} trailing bytes after checkpoint payload", bytes.len() - at));
        }
        Ok(Model { cfg, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_parameter_count() {
        for h in [1, 5, 32] {
            let m = build_model(ModelConfig::mlp(1, 8, 2, &[h], 0)).unwrap();
            assert_eq!(m.param_count(), 64 * h + h + h * 2 + 2);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = ModelConfig::cnn_small(3, 16, 4, [4, 8, 8], 42);
        let a = build_model(cfg.clone()).unwrap();
        let b = build_model(cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn cnn_output_shape() {
        let m = build_model(ModelConfig::cnn_small(3, 32, 10, [4, 8, 8], 1)).unwrap();
        let logits = m.logits(&Tensor::zeros(&[2, 3, 32, 32])).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
    }

    #[test]
    fn bad_configs() {
        assert!(matches!(build_model(ModelConfig::mlp(1, 8, 1, &[4], 0)), Err(Error::Value(_))));
        assert!(matches!(build_model(ModelConfig::cnn_small(1, 12, 2, [2, 2, 2], 0)), Err(Error::Dimension(_))));
        let m = build_model(ModelConfig::mlp(1, 8, 2, &[4], 0)).unwrap();
        assert!(matches!(m.logits(&Tensor::zeros(&[1, 1, 4, 4])), Err(Error::Dimension(_))));
    }

    #[test]
    fn uniform_logits_loss_is_ln2() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[3, 2]));
        let l = ce_loss(&mut tape, z, &[0, 1, 1]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn huge_margin_loss_vanishes() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::new(&[1, 2], vec![50.0, -50.0]).unwrap());
        let l = ce_loss(&mut tape, z, &[0]).unwrap();
        let v = tape.value(l).item();
        assert!((0.0..1e-20).contains(&v));
    }

    #[test]
    fn label_out_of_range() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros(&[1, 2]));
        assert!(matches!(ce_loss(&mut tape, z, &[5]), Err(Error::Value(_))));
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = vec![Tensor::new(&[2], vec![1.0, -1.0]).unwrap()];
        let g = vec![Tensor::new(&[2], vec![0.5, 2.0]).unwrap()];
        let mut st = OptimState::new(0.1, 0.0, 0.0);
        sgd_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p[0].data(), &[1.0 - 0.05, -1.0 - 0.2]);
    }

    #[test]
    fn momentum_recurrence() {
        let mut p = vec![Tensor::scalar(0.0)];
        let g = vec![Tensor::scalar(1.0)];
        let mut st = OptimState::new(0.1, 0.9, 0.0);
        sgd_step(&mut p, &g, &mut st).unwrap();
        assert!((p[0].item() + 0.1).abs() < 1e-15);
        sgd_step(&mut p, &g, &mut st).unwrap();
        assert!((p[0].item() + 0.1 + 0.19).abs() < 1e-15);
    }

    #[test]
    fn momentum_converges_on_quadratic() {
        // f(p) = (p - 3)^2 / 2 with minimum value 0 at p = 3. Heavy-ball
        // contracts by at most sqrt(0.9) per step, so the objective gap is
        // what reaches 1e-6 within 200 steps.
        let mut p = vec![Tensor::scalar(-4.0)];
        let mut st = OptimState::new(0.1, 0.9, 0.0);
        let mut steps = 0;
        while 0.5 * (p[0].item() - 3.0).powi(2) > 1e-6 {
            let g = vec![Tensor::scalar(p[0].item() - 3.0)];
            sgd_step(&mut p, &g, &mut st).unwrap();
            steps += 1;
            assert!(steps <= 200, "no convergence after 200 steps");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        for cfg in [ModelConfig::mlp(1, 8, 3, &[6, 5], 3), ModelConfig::cnn_small(3, 16, 4, [2, 3, 4], 9)] {
            let m = build_model(cfg).unwrap();
            let bytes = m.to_checkpoint();
            assert_eq!(&bytes[..4], b"FLNS");
            let back = Model::from_checkpoint(&bytes).unwrap();
            assert_eq!(back.config().arch, m.config().arch);
            assert_eq!(back.config().widths, m.config().widths);
            for (a, b) in back.params().iter().zip(m.params()) {
                assert_eq!(a.shape(), b.shape());
                assert!(a.data().iter().zip(b.data()).all(|(x, y)| *x == (*y as f32) as f64));
            }
            assert!(Model::from_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        }
    }
}
