//! Synthetic datasets: reference trajectories, seeded observation sampling
//! and the batch protocol, plus the plain-text dataset format.
//!
//! Random streams are ChaCha20 generators keyed by SHA-256 of a stream tag
//! and a 64-bit seed, so every dataset is reproducible across platforms.
//! Uniform variates take the top 53 bits of a `u64`; normal variates use
//! the Box-Muller transform, consuming both outputs of each pair.

use std::fmt::Write as _;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg::{Matrix, Vector};
use crate::ll_integrator::{integrate_fixed_step, ll_step, IntegrationError};
use crate::model::OdeModel;

/// Step of the fixed-step reference integration.
pub const TRUTH_STEP: f64 = 1.0 / 4096.0;

const HEADER: &str = "# msll-dataset v1";

#[derive(Debug, Error)]
pub enum DataGenError {
    #[error("reference integration failed: {0}")]
    Integration(#[from] IntegrationError),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("dataset format error on line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub model: String,
    pub sigma: f64,
    pub seed: u64,
    pub t0: f64,
    pub t_end: f64,
    /// Generating parameters, when known; not stored in files.
    pub p_true: Option<Vector>,
    pub x0_true: Option<Vector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub times: Vec<f64>,
    pub observations: Vec<Vector>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.observations.first().map_or(0, |z| z.len())
    }

    pub fn to_text(&self) -> String {
        let m = &self.meta;
        let mut out = String::new();
        let _ = writeln!(out, "{HEADER}");
        let _ = writeln!(
            out,
            "# model={} sigma={} seed={} t0={} T={} N={} v={}",
            m.model,
            fmt_f64(m.sigma),
            m.seed,
            fmt_f64(m.t0),
            fmt_f64(m.t_end),
            self.len(),
            self.obs_dim()
        );
        for (t, z) in self.times.iter().zip(&self.observations) {
            out.push_str(&fmt_f64(*t));
            for v in z.iter() {
                out.push(',');
                out.push_str(&fmt_f64(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Dataset, DataGenError> {
        let fail = |line: usize, msg: &str| DataGenError::Format { line, msg: msg.to_string() };
        let mut lines = text.lines();
        if lines.next().map(str::trim_end) != Some(HEADER) {
            return Err(fail(1, "missing dataset header"));
        }
        let meta_line = lines.next().ok_or_else(|| fail(2, "missing metadata line"))?;
        let body = meta_line.strip_prefix('#').ok_or_else(|| fail(2, "metadata line must start with '#'"))?;

        let (mut model, mut sigma, mut seed, mut t0, mut t_end, mut n, mut v) = (None, None, None, None, None, None, None);
        for pair in body.split_whitespace() {
            let (k, val) = pair.split_once('=').ok_or_else(|| fail(2, &format!("expected key=value, got '{pair}'")))?;
            let bad = || fail(2, &format!("bad value for {k}: '{val}'"));
            match k {
                "model" => model = Some(val.to_string()),
                "sigma" => sigma = Some(val.parse::<f64>().map_err(|_| bad())?),
                "seed" => seed = Some(val.parse::<u64>().map_err(|_| bad())?),
                "t0" => t0 = Some(val.parse::<f64>().map_err(|_| bad())?),
                "T" => t_end = Some(val.parse::<f64>().map_err(|_| bad())?),
                "N" => n = Some(val.parse::<usize>().map_err(|_| bad())?),
                "v" => v = Some(val.parse::<usize>().map_err(|_| bad())?),
                _ => return Err(fail(2, &format!("unknown key '{k}'"))),
            }
        }
        let missing = |k: &str| fail(2, &format!("missing key '{k}'"));
        let n = n.ok_or_else(|| missing("N"))?;
        let v = v.ok_or_else(|| missing("v"))?;
        let meta = DatasetMeta {
            model: model.ok_or_else(|| missing("model"))?,
            sigma: sigma.ok_or_else(|| missing("sigma"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            t0: t0.ok_or_else(|| missing("t0"))?,
            t_end: t_end.ok_or_else(|| missing("T"))?,
            p_true: None,
            x0_true: None,
        };

        let mut times = Vec::with_capacity(n);
        let mut observations = Vec::with_capacity(n);
        for (idx, line) in lines.enumerate() {
            let lineno = idx + 3;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| fail(lineno, "non-numeric field"))?;
            if vals.len() != v + 1 {
                return Err(fail(lineno, &format!("expected {} fields, got {}", v + 1, vals.len())));
            }
            if vals.iter().any(|x| !x.is_finite()) {
                return Err(fail(lineno, "non-finite value"));
            }
            if times.last().is_some_and(|&last| vals[0] <= last) {
                return Err(fail(lineno, "times must be strictly increasing"));
            }
            times.push(vals[0]);
            observations.push(Vector::from_column_slice(&vals[1..]));
        }
        if times.len() != n {
            return Err(fail(0, &format!("header announces {n} rows, found {}", times.len())));
        }
        Ok(Dataset { times, observations, meta })
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<(), DataGenError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Dataset, DataGenError> {
        Dataset::parse(&std::fs::read_to_string(path)?)
    }
}

/// 17 significant digits, which round-trips every `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Fixed-step reference solution, queryable at arbitrary times.
pub struct TruthTrajectory<'a> {
    model: &'a dyn OdeModel,
    p: Vector,
    x0: Vector,
    times: Vec<f64>,
    states: Vec<Vector>,
}

impl<'a> TruthTrajectory<'a> {
    pub fn model(&self) -> &dyn OdeModel {
        self.model
    }

    pub fn params(&self) -> &Vector {
        &self.p
    }

    pub fn x0(&self) -> &Vector {
        &self.x0
    }

    pub fn t0(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn grid(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[Vector] {
        &self.states
    }

    /// State at `t`: one partial LL step from the preceding grid node.
    pub fn state_at(&self, t: f64) -> Result<Vector, DataGenError> {
        if !(t >= self.t0() && t <= self.t_end()) {
            return Err(DataGenError::Invalid(format!("time {t} outside the reference interval")));
        }
        let n = self.times.partition_point(|&s| s <= t) - 1;
        let (tn, xn) = (self.times[n], &self.states[n]);
        if t == tn {
            return Ok(xn.clone());
        }
        let d = self.model.state_dim();
        let step = ll_step(
            self.model,
            tn,
            t - tn,
            xn,
            &Matrix::identity(d, d),
            &Matrix::zeros(d, self.model.param_dim()),
            &self.p,
        )?;
        Ok(step.y)
    }
}

/// Reference integration of the model with the LL scheme at step `h`.
pub fn simulate_truth<'a>(
    model: &'a dyn OdeModel,
    x0: &Vector,
    p: &Vector,
    t0: f64,
    t_end: f64,
    h: f64,
) -> Result<TruthTrajectory<'a>, DataGenError> {
    let (times, states) = integrate_fixed_step(model, x0, p, t0, t_end, h)?;
    Ok(TruthTrajectory {
        model,
        p: p.clone(),
        x0: x0.clone(),
        times,
        states,
    })
}

/// ChaCha20 keyed by `SHA-256(tag ‖ seed_le)`.
pub fn stream_rng(tag: &str, seed: u64) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(tag.as_bytes());
    h.update(seed.to_le_bytes());
    let key: [u8; 32] = h.finalize().into();
    ChaCha20Rng::from_seed(key)
}

/// Seed for realization `r` of batch `b`.
pub fn derive_seed(master: u64, batch: u64, realization: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(b"msll-realization");
    h.update(master.to_le_bytes());
    h.update(batch.to_le_bytes());
    h.update(realization.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Uniform on `[0, 1)` with 53 random bits.
pub fn uniform01(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal variates by Box-Muller.
pub struct NormalStream<R> {
    rng: R,
    spare: Option<f64>,
}

impl<R: RngCore> NormalStream<R> {
    pub fn new(rng: R) -> Self {
        NormalStream { rng, spare: None }
    }

    pub fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - uniform01(&mut self.rng);
        let u2 = uniform01(&mut self.rng);
        let rad = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        self.spare = Some(rad * s);
        rad * c
    }
}

/// `n` sorted, distinct times uniform on `[t0, t_end)`.
pub fn draw_times(n: usize, t0: f64, t_end: f64, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng("times", seed);
    let mut times: Vec<f64> = Vec::with_capacity(n);
    while times.len() < n {
        while times.len() < n {
            times.push(t0 + (t_end - t0) * uniform01(&mut rng));
        }
        times.sort_by(f64::total_cmp);
        times.dedup();
    }
    times
}

/// Noisy observations `g(t, x(t)) + σε` at given times.
pub fn observe_at(
    truth: &TruthTrajectory,
    times: Vec<f64>,
    sigma: f64,
    noise_seed: u64,
) -> Result<Dataset, DataGenError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(DataGenError::Invalid(format!("noise scale must be non-negative, got {sigma}")));
    }
    let model = truth.model();
    let mut noise = NormalStream::new(stream_rng("noise", noise_seed));
    let mut observations = Vec::with_capacity(times.len());
    for &t in &times {
        let x = truth.state_at(t)?;
        let mut z = model.g(t, &x, truth.params());
        for v in z.iter_mut() {
            *v += sigma * noise.next();
        }
        observations.push(z);
    }
    Ok(Dataset {
        times,
        observations,
        meta: DatasetMeta {
            model: model.name().to_string(),
            sigma,
            seed: noise_seed,
            t0: truth.t0(),
            t_end: truth.t_end(),
            p_true: Some(truth.params().clone()),
            x0_true: Some(truth.x0().clone()),
        },
    })
}

/// `n` observations at uniformly drawn times; times and noise both derive
/// from `seed`.
pub fn sample_observations(truth: &TruthTrajectory, sigma: f64, n: usize, seed: u64) -> Result<Dataset, DataGenError> {
    if n == 0 {
        return Err(DataGenError::Invalid("need at least one observation".into()));
    }
    let times = draw_times(n, truth.t0(), truth.t_end(), seed);
    observe_at(truth, times, sigma, seed)
}

/// `B` batches of `R` realizations. Each batch shares one time grid; every
/// realization draws fresh noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchProtocol {
    pub batches: usize,
    pub realizations: usize,
    pub master_seed: u64,
}

impl BatchProtocol {
    pub fn seed(&self, batch: usize, realization: usize) -> u64 {
        derive_seed(self.master_seed, batch as u64, realization as u64)
    }
}

/// Datasets indexed as `[batch][realization]`. Realization 0 of batch `b`
/// equals `sample_observations(.., protocol.seed(b, 0))`.
pub fn batch_generate(
    truth: &TruthTrajectory,
    sigma: f64,
    n: usize,
    protocol: &BatchProtocol,
) -> Result<Vec<Vec<Dataset>>, DataGenError> {
    if protocol.batches == 0 || protocol.realizations == 0 || n == 0 {
        return Err(DataGenError::Invalid("batches, realizations and N must be positive".into()));
    }
    (0..protocol.batches)
        .map(|b| {
            let times = draw_times(n, truth.t0(), truth.t_end(), protocol.seed(b, 0));
            (0..protocol.realizations)
                .map(|r| observe_at(truth, times.clone(), sigma, protocol.seed(b, r)))
                .collect()
        })
        .collect()
}
