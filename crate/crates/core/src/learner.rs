//! Per-cell safety classifier: a small convolutional encoder-decoder over
//! the hip-relative heightmap patch plus an 8-value state vector (hip
//! height, gait phase, body-frame linear and angular velocity). The encoder
//! bottleneck is the latent fed to the footstep policy; the decoder emits
//! one logit per patch cell. All gradients are hand-derived; the same
//! architecture doubles as a plain heightmap autoencoder (MSE on the
//! logits) for the no-safety-information baseline.

use nalgebra::Vector3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ClassifierConfig;
use crate::error::{Error, Result};
use crate::safety::BoolGrid;
use crate::terrain::Heightmap;

pub const STATE_DIM: usize = 14;
const K: usize = 3;
const STRIDE: usize = 2;

/// One labeled training record: heightmap values (row-major), state vector,
/// target grid (1.0 safe / 0.0 unsafe, or raw heights in autoencoder mode).
#[derive(Debug, Clone)]
pub struct Sample {
    pub heights: Vec<f64>,
    pub state: [f64; STATE_DIM],
    pub target: Vec<f64>,
}

/// Centimeter-scale relief on a decimeter hip offset underflows tanh
/// features, so cell inputs are centered on the middle cell and rescaled;
/// the absolute hip clearance rides in state[0] instead.
pub const INPUT_HEIGHT_SCALE: f64 = 10.0;

/// Network input from a query: cell heights relative to the patch center,
/// times `INPUT_HEIGHT_SCALE`. The state carries hip height above the
/// center cell, phase, body-frame velocities, heading (the patch stays
/// world-axis-aligned, so the criteria patterns rotate with yaw) and a leg
/// one-hot (hip offset side flips the shin and workspace geometry).
pub fn input_from_patch(
    map: &Heightmap,
    leg: usize,
    phi: f64,
    v_body: Vector3<f64>,
    w_body: Vector3<f64>,
    yaw: f64,
) -> (Vec<f64>, [f64; STATE_DIM]) {
    let center = map.values[(map.rows() / 2, map.cols() / 2)];
    let mut heights = Vec::with_capacity(map.rows() * map.cols());
    for i in 0..map.rows() {
        for j in 0..map.cols() {
            heights.push((map.values[(i, j)] - center) * INPUT_HEIGHT_SCALE);
        }
    }
    let mut state = [
        -center,
        phi,
        v_body.x,
        v_body.y,
        v_body.z,
        w_body.x,
        w_body.y,
        w_body.z,
        yaw.sin(),
        yaw.cos(),
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    state[10 + leg] = 1.0;
    (heights, state)
}

fn conv_out(n: usize) -> usize {
    (n - K) / STRIDE + 1
}

/// Strided 3x3 conv stack (1 -> c1 -> c2 channels), linear bottleneck to the
/// latent, then the mirrored transposed-conv stack back to one logit per
/// cell. tanh activations everywhere except the logits.
#[derive(Debug, Clone)]
pub struct ClassifierNet {
    pub rows: usize,
    pub cols: usize,
    pub c1: usize,
    pub c2: usize,
    pub latent: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w_enc: Vec<f64>,
    pub b_enc: Vec<f64>,
    pub w_dec: Vec<f64>,
    pub b_dec: Vec<f64>,
    pub wd1: Vec<f64>,
    pub bd1: Vec<f64>,
    pub wd2: Vec<f64>,
    pub bd2: Vec<f64>,
}

/// Cached activations of one forward pass, consumed by `backward` (tanh
/// derivatives come from the activations, so pre-activations are dropped).
pub struct ForwardPass {
    pub x: Vec<f64>,
    pub state: [f64; STATE_DIM],
    a1: Vec<f64>,
    a2: Vec<f64>,
    pub latent: Vec<f64>,
    a_dec: Vec<f64>,
    ad1: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Gradient of the loss w.r.t. every parameter tensor, same layout as the
/// net.
#[derive(Debug, Clone)]
pub struct Grads {
    pub tensors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossMode {
    /// BCE + dice_weight * generalized Dice on sigmoid(logits).
    Classify { dice_weight: f64, smoothing: f64 },
    /// Mean squared error of raw logits against the target grid.
    Reconstruct,
}

fn sigmoid(l: f64) -> f64 {
    1.0 / (1.0 + (-l).exp())
}

/// Mean of the numerically stable per-cell binary cross entropy
/// max(l,0) - l t + ln(1 + exp(-|l|)).
pub fn loss_bce(logits: &[f64], target: &[f64]) -> f64 {
    assert_eq!(logits.len(), target.len());
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(target)
        .map(|(&l, &t)| l.max(0.0) - l * t + (-l.abs()).exp().ln_1p())
        .sum::<f64>()
        / n
}

/// Generalized Dice loss 1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps).
pub fn loss_dice(probs: &[f64], target: &[f64], smoothing: f64) -> f64 {
    assert_eq!(probs.len(), target.len());
    let inter: f64 = probs.iter().zip(target).map(|(p, t)| p * t).sum();
    let total: f64 = probs.iter().sum::<f64>() + target.iter().sum::<f64>();
    1.0 - (2.0 * inter + smoothing) / (total + smoothing)
}

pub fn loss_mse(out: &[f64], target: &[f64]) -> f64 {
    assert_eq!(out.len(), target.len());
    out.iter()
        .zip(target)
        .map(|(o, t)| (o - t) * (o - t))
        .sum::<f64>()
        / out.len() as f64
}

impl ClassifierNet {
    pub fn new(rows: usize, cols: usize, cfg: &ClassifierConfig, seed: u64) -> Result<Self> {
        let r1 = conv_out(rows);
        let c1dim = conv_out(cols);
        if r1 < K || c1dim < K {
            return Err(Error::config("patch too small for the conv stack"));
        }
        let r2 = conv_out(r1);
        let c2dim = conv_out(c1dim);
        if (r1 - K) % STRIDE != 0
            || (c1dim - K) % STRIDE != 0
            || (rows - K) % STRIDE != 0
            || (cols - K) % STRIDE != 0
        {
            return Err(Error::config("patch size must invert through stride-2 convs"));
        }
        let (c1, c2, latent) = (cfg.conv1_channels, cfg.conv2_channels, cfg.latent_dim);
        let flat = c2 * r2 * c2dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = |fan_in: usize, fan_out: usize, n: usize| -> Vec<f64> {
            let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.gen_range(-lim..lim)).collect()
        };
        Ok(Self {
            rows,
            cols,
            c1,
            c2,
            latent,
            w1: init(9, 9 * c1, c1 * 9),
            b1: vec![0.0; c1],
            w2: init(9 * c1, 9 * c2, c2 * c1 * 9),
            b2: vec![0.0; c2],
            w_enc: init(flat + STATE_DIM, latent, latent * (flat + STATE_DIM)),
            b_enc: vec![0.0; latent],
            w_dec: init(latent, flat, flat * latent),
            b_dec: vec![0.0; flat],
            wd1: init(9 * c2, 9 * c1, c2 * c1 * 9),
            bd1: vec![0.0; c1],
            wd2: init(9 * c1, 9, c1 * 9),
            bd2: vec![0.0; 1],
        })
    }

    pub fn from_run_config(cfg: &ClassifierConfig, rows: usize, cols: usize, seed: u64) -> Result<Self> {
        Self::new(rows, cols, cfg, seed)
    }

    fn dims(&self) -> (usize, usize, usize, usize, usize) {
        let r1 = conv_out(self.rows);
        let c1dim = conv_out(self.cols);
        let r2 = conv_out(r1);
        let c2dim = conv_out(c1dim);
        (r1, c1dim, r2, c2dim, self.c2 * r2 * c2dim)
    }

    pub fn tensors(&self) -> [&Vec<f64>; 12] {
        [
            &self.w1, &self.b1, &self.w2, &self.b2, &self.w_enc, &self.b_enc, &self.w_dec,
            &self.b_dec, &self.wd1, &self.bd1, &self.wd2, &self.bd2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 12] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w_enc,
            &mut self.b_enc,
            &mut self.w_dec,
            &mut self.b_dec,
            &mut self.wd1,
            &mut self.bd1,
            &mut self.wd2,
            &mut self.bd2,
        ]
    }

    pub fn forward(&self, heights: &[f64], state: &[f64; STATE_DIM]) -> Result<ForwardPass> {
        if heights.len() != self.rows * self.cols {
            return Err(Error::config("heightmap size does not match the network"));
        }
        let (r1, c1dim, r2, c2dim, flat) = self.dims();
        let (cc1, cc2) = (self.c1, self.c2);

        // conv1: 1 x rows x cols -> c1 x r1 x c1dim
        let mut z1 = vec![0.0; cc1 * r1 * c1dim];
        for o in 0..cc1 {
            for oy in 0..r1 {
                for ox in 0..c1dim {
                    let mut acc = self.b1[o];
                    for ky in 0..K {
                        for kx in 0..K {
                            acc += self.w1[(o * K + ky) * K + kx]
                                * heights[(oy * STRIDE + ky) * self.cols + ox * STRIDE + kx];
                        }
                    }
                    z1[(o * r1 + oy) * c1dim + ox] = acc;
                }
            }
        }
        let a1: Vec<f64> = z1.iter().map(|z| z.tanh()).collect();

        // conv2: c1 x r1 x c1dim -> c2 x r2 x c2dim
        let mut z2 = vec![0.0; cc2 * r2 * c2dim];
        for o in 0..cc2 {
            for oy in 0..r2 {
                for ox in 0..c2dim {
                    let mut acc = self.b2[o];
                    for c in 0..cc1 {
                        for ky in 0..K {
                            for kx in 0..K {
                                acc += self.w2[((o * cc1 + c) * K + ky) * K + kx]
                                    * a1[(c * r1 + oy * STRIDE + ky) * c1dim + ox * STRIDE + kx];
                            }
                        }
                    }
                    z2[(o * r2 + oy) * c2dim + ox] = acc;
                }
            }
        }
        let a2: Vec<f64> = z2.iter().map(|z| z.tanh()).collect();

        // encoder linear over [flatten(a2), state]
        let mut z_enc = vec![0.0; self.latent];
        for u in 0..self.latent {
            let mut acc = self.b_enc[u];
            let row = u * (flat + STATE_DIM);
            for (i, a) in a2.iter().enumerate() {
                acc += self.w_enc[row + i] * a;
            }
            for (i, s) in state.iter().enumerate() {
                acc += self.w_enc[row + flat + i] * s;
            }
            z_enc[u] = acc;
        }
        let latent: Vec<f64> = z_enc.iter().map(|z| z.tanh()).collect();

        // decoder linear back to the conv2 shape
        let mut z_dec = vec![0.0; flat];
        for (i, zd) in z_dec.iter_mut().enumerate() {
            let mut acc = self.b_dec[i];
            let row = i * self.latent;
            for (u, h) in latent.iter().enumerate() {
                acc += self.w_dec[row + u] * h;
            }
            *zd = acc;
        }
        let a_dec: Vec<f64> = z_dec.iter().map(|z| z.tanh()).collect();

        // deconv1: c2 x r2 x c2dim -> c1 x r1 x c1dim
        let mut zd1 = vec![0.0; cc1 * r1 * c1dim];
        for o in 0..cc1 {
            for cell in zd1[o * r1 * c1dim..(o + 1) * r1 * c1dim].iter_mut() {
                *cell = self.bd1[o];
            }
        }
        for c in 0..cc2 {
            for iy in 0..r2 {
                for ix in 0..c2dim {
                    let a = a_dec[(c * r2 + iy) * c2dim + ix];
                    for o in 0..cc1 {
                        for ky in 0..K {
                            for kx in 0..K {
                                zd1[(o * r1 + iy * STRIDE + ky) * c1dim + ix * STRIDE + kx] +=
                                    self.wd1[((c * cc1 + o) * K + ky) * K + kx] * a;
                            }
                        }
                    }
                }
            }
        }
        let ad1: Vec<f64> = zd1.iter().map(|z| z.tanh()).collect();

        // deconv2: c1 x r1 x c1dim -> 1 x rows x cols (raw logits)
        let mut logits = vec![self.bd2[0]; self.rows * self.cols];
        for c in 0..cc1 {
            for iy in 0..r1 {
                for ix in 0..c1dim {
                    let a = ad1[(c * r1 + iy) * c1dim + ix];
                    for ky in 0..K {
                        for kx in 0..K {
                            logits[(iy * STRIDE + ky) * self.cols + ix * STRIDE + kx] +=
                                self.wd2[(c * K + ky) * K + kx] * a;
                        }
                    }
                }
            }
        }

        Ok(ForwardPass {
            x: heights.to_vec(),
            state: *state,
            a1,
            a2,
            latent,
            a_dec,
            ad1,
            logits,
        })
    }

    /// Latent for the policy observation.
    pub fn encode(&self, heights: &[f64], state: &[f64; STATE_DIM]) -> Result<Vec<f64>> {
        Ok(self.forward(heights, state)?.latent)
    }

    pub fn predict_probs(&self, heights: &[f64], state: &[f64; STATE_DIM]) -> Result<Vec<f64>> {
        Ok(self
            .forward(heights, state)?
            .logits
            .iter()
            .map(|&l| sigmoid(l))
            .collect())
    }

    pub fn predict_mask(
        &self,
        heights: &[f64],
        state: &[f64; STATE_DIM],
        threshold: f64,
    ) -> Result<BoolGrid> {
        let probs = self.predict_probs(heights, state)?;
        let mut grid = BoolGrid::filled(self.rows, self.cols, false);
        for i in 0..self.rows {
            for j in 0..self.cols {
                grid.set(i, j, probs[i * self.cols + j] >= threshold);
            }
        }
        Ok(grid)
    }

    /// Loss and parameter gradients for one sample; forward pass must come
    /// from this net.
    pub fn backward(&self, fp: &ForwardPass, target: &[f64], mode: LossMode) -> (f64, Grads) {
        let (r1, c1dim, r2, c2dim, flat) = self.dims();
        let (cc1, cc2) = (self.c1, self.c2);
        let n_cells = (self.rows * self.cols) as f64;
        assert_eq!(target.len(), fp.logits.len());

        let (loss, g_logit) = match mode {
            LossMode::Classify {
                dice_weight,
                smoothing,
            } => {
                let probs: Vec<f64> = fp.logits.iter().map(|&l| sigmoid(l)).collect();
                let bce = loss_bce(&fp.logits, target);
                let dice = loss_dice(&probs, target, smoothing);
                let inter: f64 = probs.iter().zip(target).map(|(p, t)| p * t).sum();
                let total: f64 = probs.iter().sum::<f64>() + target.iter().sum::<f64>();
                let denom = total + smoothing;
                let g: Vec<f64> = probs
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        let d_dice = -(2.0 * t * denom - (2.0 * inter + smoothing)) / (denom * denom);
                        (p - t) / n_cells + dice_weight * d_dice * p * (1.0 - p)
                    })
                    .collect();
                (bce + dice_weight * dice, g)
            }
            LossMode::Reconstruct => {
                let mse = loss_mse(&fp.logits, target);
                let g: Vec<f64> = fp
                    .logits
                    .iter()
                    .zip(target)
                    .map(|(&l, &t)| 2.0 * (l - t) / n_cells)
                    .collect();
                (mse, g)
            }
        };

        let mut g = Grads::zeros_like(self);
        let [gw1, gb1, gw2, gb2, gwe, gbe, gwd, gbd, gwd1, gbd1, gwd2, gbd2] = g.split_mut();

        // deconv2 backward
        let mut g_ad1 = vec![0.0; cc1 * r1 * c1dim];
        gbd2[0] = g_logit.iter().sum();
        for c in 0..cc1 {
            for iy in 0..r1 {
                for ix in 0..c1dim {
                    let a = fp.ad1[(c * r1 + iy) * c1dim + ix];
                    let mut acc = 0.0;
                    for ky in 0..K {
                        for kx in 0..K {
                            let go = g_logit[(iy * STRIDE + ky) * self.cols + ix * STRIDE + kx];
                            gwd2[(c * K + ky) * K + kx] += a * go;
                            acc += self.wd2[(c * K + ky) * K + kx] * go;
                        }
                    }
                    g_ad1[(c * r1 + iy) * c1dim + ix] = acc;
                }
            }
        }

        // tanh at zd1
        let g_zd1: Vec<f64> = g_ad1
            .iter()
            .zip(&fp.ad1)
            .map(|(g, a)| g * (1.0 - a * a))
            .collect();

        // deconv1 backward
        let mut g_adec = vec![0.0; flat];
        for o in 0..cc1 {
            for iy in 0..r1 {
                for ix in 0..c1dim {
                    gbd1[o] += g_zd1[(o * r1 + iy) * c1dim + ix];
                }
            }
        }
        for c in 0..cc2 {
            for iy in 0..r2 {
                for ix in 0..c2dim {
                    let a = fp.a_dec[(c * r2 + iy) * c2dim + ix];
                    let mut acc = 0.0;
                    for o in 0..cc1 {
                        for ky in 0..K {
                            for kx in 0..K {
                                let gz =
                                    g_zd1[(o * r1 + iy * STRIDE + ky) * c1dim + ix * STRIDE + kx];
                                gwd1[((c * cc1 + o) * K + ky) * K + kx] += a * gz;
                                acc += self.wd1[((c * cc1 + o) * K + ky) * K + kx] * gz;
                            }
                        }
                    }
                    g_adec[(c * r2 + iy) * c2dim + ix] = acc;
                }
            }
        }

        // tanh at z_dec, then decoder linear backward
        let g_zdec: Vec<f64> = g_adec
            .iter()
            .zip(&fp.a_dec)
            .map(|(g, a)| g * (1.0 - a * a))
            .collect();
        let mut g_latent = vec![0.0; self.latent];
        for i in 0..flat {
            gbd[i] += g_zdec[i];
            let row = i * self.latent;
            for u in 0..self.latent {
                gwd[row + u] += g_zdec[i] * fp.latent[u];
                g_latent[u] += self.w_dec[row + u] * g_zdec[i];
            }
        }

        // tanh at z_enc, then encoder linear backward (state inputs have no
        // upstream parameters)
        let g_zenc: Vec<f64> = g_latent
            .iter()
            .zip(&fp.latent)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect();
        let mut g_a2 = vec![0.0; flat];
        for u in 0..self.latent {
            gbe[u] += g_zenc[u];
            let row = u * (flat + STATE_DIM);
            for (i, a) in fp.a2.iter().enumerate() {
                gwe[row + i] += g_zenc[u] * a;
                g_a2[i] += self.w_enc[row + i] * g_zenc[u];
            }
            for (i, s) in fp.state.iter().enumerate() {
                gwe[row + flat + i] += g_zenc[u] * s;
            }
        }

        // tanh at z2, conv2 backward
        let g_z2: Vec<f64> = g_a2
            .iter()
            .zip(&fp.a2)
            .map(|(g, a)| g * (1.0 - a * a))
            .collect();
        let mut g_a1 = vec![0.0; cc1 * r1 * c1dim];
        for o in 0..cc2 {
            for oy in 0..r2 {
                for ox in 0..c2dim {
                    let gz = g_z2[(o * r2 + oy) * c2dim + ox];
                    gb2[o] += gz;
                    for c in 0..cc1 {
                        for ky in 0..K {
                            for kx in 0..K {
                                let ai = (c * r1 + oy * STRIDE + ky) * c1dim + ox * STRIDE + kx;
                                gw2[((o * cc1 + c) * K + ky) * K + kx] += fp.a1[ai] * gz;
                                g_a1[ai] += self.w2[((o * cc1 + c) * K + ky) * K + kx] * gz;
                            }
                        }
                    }
                }
            }
        }

        // tanh at z1, conv1 backward (input gradient not needed)
        let g_z1: Vec<f64> = g_a1
            .iter()
            .zip(&fp.a1)
            .map(|(g, a)| g * (1.0 - a * a))
            .collect();
        for o in 0..cc1 {
            for oy in 0..r1 {
                for ox in 0..c1dim {
                    let gz = g_z1[(o * r1 + oy) * c1dim + ox];
                    gb1[o] += gz;
                    for ky in 0..K {
                        for kx in 0..K {
                            gw1[(o * K + ky) * K + kx] +=
                                fp.x[(oy * STRIDE + ky) * self.cols + ox * STRIDE + kx] * gz;
                        }
                    }
                }
            }
        }

        (loss, g)
    }

    /// Loss without gradients, for validation passes.
    pub fn loss_of(&self, fp: &ForwardPass, target: &[f64], mode: LossMode) -> f64 {
        match mode {
            LossMode::Classify {
                dice_weight,
                smoothing,
            } => {
                let probs: Vec<f64> = fp.logits.iter().map(|&l| sigmoid(l)).collect();
                loss_bce(&fp.logits, target) + dice_weight * loss_dice(&probs, target, smoothing)
            }
            LossMode::Reconstruct => loss_mse(&fp.logits, target),
        }
    }
}

impl Grads {
    pub fn zeros_like(net: &ClassifierNet) -> Self {
        Self {
            tensors: net.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    fn split_mut(&mut self) -> [&mut Vec<f64>; 12] {
        let mut it = self.tensors.iter_mut();
        std::array::from_fn(|_| it.next().unwrap())
    }

    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors.iter_mut() {
            for x in t.iter_mut() {
                *x *= s;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Fraction of validation cells classified correctly at the decision
    /// threshold.
    pub val_accuracy: f64,
    /// Fraction of oracle-unsafe validation cells predicted safe.
    pub false_safe: f64,
    /// Fraction of oracle-safe validation cells predicted unsafe.
    pub false_unsafe: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

/// Gaussian draw via Box-Muller; two uniforms per call keeps the stream
/// deterministic.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn eval_split(
    net: &ClassifierNet,
    samples: &[Sample],
    idx: &[usize],
    mode: LossMode,
    threshold: f64,
) -> (f64, f64, f64, f64) {
    let mut loss = 0.0;
    let (mut correct, mut cells) = (0usize, 0usize);
    let (mut fs, mut unsafe_n, mut fu, mut safe_n) = (0usize, 0usize, 0usize, 0usize);
    for &i in idx {
        let s = &samples[i];
        let fp = net.forward(&s.heights, &s.state).expect("shape checked");
        loss += net.loss_of(&fp, &s.target, mode);
        if let LossMode::Classify { .. } = mode {
            for (l, t) in fp.logits.iter().zip(&s.target) {
                let pred = sigmoid(*l) >= threshold;
                let truth = *t >= 0.5;
                cells += 1;
                if pred == truth {
                    correct += 1;
                }
                if truth {
                    safe_n += 1;
                    if !pred {
                        fu += 1;
                    }
                } else {
                    unsafe_n += 1;
                    if pred {
                        fs += 1;
                    }
                }
            }
        }
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (
        loss / idx.len().max(1) as f64,
        frac(correct, cells),
        frac(fs, unsafe_n),
        frac(fu, safe_n),
    )
}

/// Minibatch SGD with momentum, additive input noise, early stopping on the
/// validation loss, best-epoch parameter restore. Deterministic for a fixed
/// seed.
pub fn train(
    net: &mut ClassifierNet,
    samples: &[Sample],
    cfg: &ClassifierConfig,
    mode: LossMode,
    seed: u64,
) -> Result<TrainHistory> {
    if samples.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let n_val = ((samples.len() as f64 * cfg.val_fraction) as usize).min(samples.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let val_idx = if val_idx.is_empty() { train_idx } else { val_idx };

    let mut velocity = Grads::zeros_like(net);
    let mut history = TrainHistory::default();
    let mut best_val = f64::INFINITY;
    let mut best_params: Option<Vec<Vec<f64>>> = None;
    let mut stale = 0usize;

    let mut train_order: Vec<usize> = train_idx.to_vec();
    for epoch in 0..cfg.max_epochs {
        for i in (1..train_order.len()).rev() {
            train_order.swap(i, rng.gen_range(0..=i));
        }
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in train_order.chunks(cfg.batch_size.max(1)) {
            let mut grad = Grads::zeros_like(net);
            let mut batch_loss = 0.0;
            for &i in chunk {
                let s = &samples[i];
                let mut noisy = s.heights.clone();
                if cfg.input_noise_std > 0.0 {
                    for h in noisy.iter_mut() {
                        *h += cfg.input_noise_std * normal(&mut rng);
                    }
                }
                let fp = net.forward(&noisy, &s.state)?;
                let (l, g) = net.backward(&fp, &s.target, mode);
                batch_loss += l;
                grad.add(&g);
            }
            grad.scale(1.0 / chunk.len() as f64);
            for ((p, v), g) in net
                .tensors_mut()
                .into_iter()
                .zip(velocity.tensors.iter_mut())
                .zip(grad.tensors.iter())
            {
                for k in 0..p.len() {
                    v[k] = cfg.momentum * v[k] - cfg.learning_rate * g[k];
                    p[k] += v[k];
                }
            }
            epoch_loss += batch_loss / chunk.len() as f64;
            batches += 1;
        }

        let (val_loss, acc, fs, fu) =
            eval_split(net, samples, val_idx, mode, cfg.decision_threshold);
        history.epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_loss,
            val_accuracy: acc,
            false_safe: fs,
            false_unsafe: fu,
        });

        if val_loss < best_val - 1e-12 {
            best_val = val_loss;
            best_params = Some(net.tensors().iter().map(|t| (*t).clone()).collect());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    if let Some(best) = best_params {
        for (p, b) in net.tensors_mut().into_iter().zip(best) {
            *p = b;
        }
    }
    Ok(history)
}

/// Held-out false-safe rate of a trained net on labeled samples.
pub fn false_safe_rate(
    net: &ClassifierNet,
    samples: &[Sample],
    threshold: f64,
) -> f64 {
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mode = LossMode::Classify {
        dice_weight: 0.0,
        smoothing: 1e-6,
    };
    eval_split(net, samples, &idx, mode, threshold).2
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_cfg() -> ClassifierConfig {
        ClassifierConfig {
            conv1_channels: 2,
            conv2_channels: 3,
            latent_dim: 4,
            ..ClassifierConfig::default()
        }
    }

    fn tiny_net(seed: u64) -> ClassifierNet {
        ClassifierNet::new(7, 7, &tiny_cfg(), seed).unwrap()
    }

    fn full_net(seed: u64) -> ClassifierNet {
        ClassifierNet::new(15, 15, &ClassifierConfig::default(), seed).unwrap()
    }

    fn ramp_input(n: usize) -> Vec<f64> {
        (0..n).map(|i| (i as f64) * 0.001 - 0.3).collect()
    }

    #[test]
    fn zero_net_predicts_half_everywhere() {
        let mut net = full_net(0);
        for t in net.tensors_mut() {
            for x in t.iter_mut() {
                *x = 0.0;
            }
        }
        let state = [0.4, 0.3, 0.2, 0.0, 0.0, 0.0, 0.0, 0.1, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0];
        let fp = net.forward(&ramp_input(225), &state).unwrap();
        assert!(fp.logits.iter().all(|l| *l == 0.0));
        let probs = net.predict_probs(&ramp_input(225), &state).unwrap();
        assert!(probs.iter().all(|p| (p - 0.5).abs() < 1e-15));
    }

    #[test]
    fn forward_is_deterministic() {
        let net = full_net(9);
        let state = [0.4, 0.1, 0.3, -0.1, 0.0, 0.0, 0.0, 0.2, 0.2, 0.98, 0.0, 1.0, 0.0, 0.0];
        let a = net.forward(&ramp_input(225), &state).unwrap();
        let b = net.forward(&ramp_input(225), &state).unwrap();
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in a.latent.iter().zip(&b.latent) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn identical_flat_inputs_give_identical_logits() {
        // hip-relative inputs sampled anywhere on flat ground are the same
        // patch, so the logits must match bit for bit
        let net = full_net(4);
        let flat = vec![-0.4; 225];
        let state = [0.4, 0.25, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let a = net.forward(&flat, &state).unwrap();
        let b = net.forward(&flat.clone(), &state).unwrap();
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn bce_identities() {
        let logits = vec![0.0; 16];
        let target: Vec<f64> = (0..16).map(|i| (i % 2) as f64).collect();
        assert_relative_eq!(
            loss_bce(&logits, &target),
            std::f64::consts::LN_2,
            epsilon = 1e-9
        );

        let saturated: Vec<f64> = target.iter().map(|t| if *t > 0.5 { 20.0 } else { -20.0 }).collect();
        assert!(loss_bce(&saturated, &target) < 1e-8);

        // four-cell case against the direct per-cell formula
        let l = [0.3, -1.2, 2.0, -0.4];
        let t = [1.0, 0.0, 1.0, 1.0];
        let direct: f64 = l
            .iter()
            .zip(&t)
            .map(|(&l, &t)| {
                let p = 1.0 / (1.0 + (-l as f64).exp());
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 4.0;
        assert_relative_eq!(loss_bce(&l, &t), direct, epsilon = 1e-12);
    }

    #[test]
    fn dice_identities() {
        let t: Vec<f64> = (0..9).map(|i| if i < 4 { 1.0 } else { 0.0 }).collect();
        assert!(loss_dice(&t, &t, 1e-6) < 1e-5);
        let inv: Vec<f64> = t.iter().map(|x| 1.0 - x).collect();
        assert!((loss_dice(&inv, &t, 1e-6) - 1.0).abs() < 1e-5);

        // mixed 3x3 hand computation
        let p = [0.9, 0.1, 0.5, 0.8, 0.2, 0.3, 1.0, 0.0, 0.6];
        let inter: f64 = p.iter().zip(&t).map(|(p, t)| p * t).sum();
        let total: f64 = p.iter().sum::<f64>() + t.iter().sum::<f64>();
        let hand = 1.0 - (2.0 * inter + 1e-6) / (total + 1e-6);
        assert_relative_eq!(loss_dice(&p, &t, 1e-6), hand, epsilon = 1e-12);
    }

    #[test]
    fn dice_stays_in_unit_interval() {
        let p = vec![0.3; 9];
        let t = vec![0.0; 9];
        let d = loss_dice(&p, &t, 1e-6);
        assert!((0.0..=1.0).contains(&d));
        assert!(loss_dice(&t, &t, 1e-6) <= 1e-6);
    }

    fn fd_check(mode: LossMode) {
        let net = tiny_net(21);
        let heights = ramp_input(49);
        let state = [0.4, 0.6, 0.2, -0.1, 0.0, 0.05, -0.02, 0.0, -0.3, 0.95, 0.0, 0.0, 0.0, 1.0];
        let target: Vec<f64> = (0..49).map(|i| ((i * 7) % 3 == 0) as usize as f64).collect();
        let fp = net.forward(&heights, &state).unwrap();
        let (_, g) = net.backward(&fp, &target, mode);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for ti in 0..12 {
            let len = net.tensors()[ti].len();
            for k in (0..len).step_by((len / 6).max(1)) {
                let mut plus = net.clone();
                plus.tensors_mut()[ti][k] += h;
                let fp_p = plus.forward(&heights, &state).unwrap();
                let (lp, _) = plus.backward(&fp_p, &target, mode);
                let mut minus = net.clone();
                minus.tensors_mut()[ti][k] -= h;
                let fp_m = minus.forward(&heights, &state).unwrap();
                let (lm, _) = minus.backward(&fp_m, &target, mode);
                let fd = (lp - lm) / (2.0 * h);
                let an = g.tensors[ti][k];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
                assert!(rel <= 1e-4, "tensor {ti} index {k}: {an:e} vs {fd:e}");
            }
        }
        assert!(worst > 0.0);
    }

    #[test]
    fn gradients_match_finite_differences_classify() {
        fd_check(LossMode::Classify {
            dice_weight: 1.0,
            smoothing: 1e-6,
        });
    }

    #[test]
    fn gradients_match_finite_differences_reconstruct() {
        fd_check(LossMode::Reconstruct);
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let net = tiny_net(5);
        let heights = ramp_input(49);
        let state = [0.4, 0.2, 0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.1, 0.99, 1.0, 0.0, 0.0, 0.0];
        let target = vec![1.0; 49];
        let mode = LossMode::Classify {
            dice_weight: 1.0,
            smoothing: 1e-6,
        };
        let fp = net.forward(&heights, &state).unwrap();
        let (_, single) = net.backward(&fp, &target, mode);
        let mut doubled = Grads::zeros_like(&net);
        for _ in 0..2 {
            let fp = net.forward(&heights, &state).unwrap();
            let (_, g) = net.backward(&fp, &target, mode);
            doubled.add(&g);
        }
        doubled.scale(0.5);
        for (a, b) in single.tensors.iter().zip(&doubled.tensors) {
            for (x, y) in a.iter().zip(b) {
                assert_relative_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    fn one_patch_dataset(copies: usize) -> Vec<Sample> {
        let mut heights = vec![-0.4; 49];
        for j in 0..7 {
            heights[3 * 7 + j] = -0.25;
        }
        let target: Vec<f64> = (0..49)
            .map(|i| {
                let r = i / 7;
                (r < 2 || r > 4) as usize as f64
            })
            .collect();
        let sample = Sample {
            heights,
            state: [0.4, 0.5, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0],
            target,
        };
        vec![sample; copies]
    }

    #[test]
    fn overfits_a_single_patch() {
        let mut net = tiny_net(3);
        let cfg = ClassifierConfig {
            conv1_channels: 2,
            conv2_channels: 3,
            latent_dim: 4,
            learning_rate: 0.05,
            batch_size: 10,
            max_epochs: 700,
            patience: 700,
            input_noise_std: 0.0,
            val_fraction: 0.1,
            ..ClassifierConfig::default()
        };
        let data = one_patch_dataset(50);
        let hist = train(
            &mut net,
            &data,
            &cfg,
            LossMode::Classify {
                dice_weight: 1.0,
                smoothing: 1e-6,
            },
            11,
        )
        .unwrap();
        let last = hist.epochs.last().unwrap();
        assert!(
            last.train_loss < 0.01,
            "final train loss {}",
            last.train_loss
        );
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut net = tiny_net(8);
        let before: Vec<Vec<f64>> = net.tensors().iter().map(|t| (*t).clone()).collect();
        let cfg = ClassifierConfig {
            conv1_channels: 2,
            conv2_channels: 3,
            latent_dim: 4,
            learning_rate: 0.0,
            max_epochs: 3,
            ..ClassifierConfig::default()
        };
        train(
            &mut net,
            &one_patch_dataset(10),
            &cfg,
            LossMode::Reconstruct,
            1,
        )
        .unwrap();
        for (a, b) in net.tensors().iter().zip(&before) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = ClassifierConfig {
            conv1_channels: 2,
            conv2_channels: 3,
            latent_dim: 4,
            max_epochs: 5,
            ..ClassifierConfig::default()
        };
        let data = one_patch_dataset(20);
        let mode = LossMode::Classify {
            dice_weight: 1.0,
            smoothing: 1e-6,
        };
        let mut n1 = tiny_net(2);
        let h1 = train(&mut n1, &data, &cfg, mode, 33).unwrap();
        let mut n2 = tiny_net(2);
        let h2 = train(&mut n2, &data, &cfg, mode, 33).unwrap();
        assert_eq!(h1.epochs.len(), h2.epochs.len());
        for (a, b) in h1.epochs.iter().zip(&h2.epochs) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.val_loss.to_bits(), b.val_loss.to_bits());
        }
        for (a, b) in n1.tensors().iter().zip(n2.tensors().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn empty_dataset_is_a_config_error() {
        let mut net = tiny_net(0);
        let err = train(
            &mut net,
            &[],
            &tiny_cfg(),
            LossMode::Reconstruct,
            0,
        );
        assert!(err.is_err());
    }

    #[test]
    fn rejects_mismatched_input() {
        let net = tiny_net(0);
        assert!(net.forward(&vec![0.0; 10], &[0.0; 14]).is_err());
    }
}
