//! Driving semimartingale paths with finitely many jumps.
//!
//! A [`JumpPath`] stores the continuous part of `Z` on a strictly increasing
//! grid together with an explicit ledger of jumps. Every jump time is a grid
//! point, so both the left limit `Z_{s-}` and the value `Z_s = Z_{s-} + ΔZ_s`
//! are available there. Between grid points the continuous part is linearly
//! interpolated.
//!
//! Random paths come from [`sample_levy_jump_diffusion`]: drift, scaled
//! Brownian motion and a compound Poisson part. Randomness is drawn from
//! ChaCha8 streams keyed by `(purpose << 32) | channel` under a single master
//! seed, so adding channels never perturbs the draws of existing ones.
//! Determinism is per seed at a fixed step; paths sampled at different steps
//! are not refinements of one another (use [`JumpPath::regrid`] on a fine path
//! for refinement studies).

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when matching query times to grid points.
const TIME_TOL: f64 = 1e-12;

pub const PATH_FORMAT_VERSION: u32 = 1;

/// A single jump event: one time, one m-vector of simultaneous channel jumps.
#[derive(Debug, Clone, PartialEq)]
pub struct Jump {
    pub time: f64,
    pub size: DVector<f64>,
}

/// Sampled càdlàg path with a jump ledger.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpPath {
    dim: usize,
    grid: Vec<f64>,
    continuous: Vec<DVector<f64>>,
    jumps: Vec<Jump>,
    /// For each grid index, the jump recorded there (if any).
    jump_slot: Vec<Option<usize>>,
    /// Sum of all jumps with time <= grid[k].
    cumulative: Vec<DVector<f64>>,
}

impl JumpPath {
    /// Builds a path from grid samples of the continuous part and a jump ledger.
    /// Every jump time must already be a grid point.
    pub fn new(grid: Vec<f64>, continuous: Vec<DVector<f64>>, jumps: Vec<Jump>) -> Result<Self> {
        if grid.len() < 2 {
            return Err(Error::InvalidPath("grid needs at least two points".into()));
        }
        if grid.len() != continuous.len() {
            return Err(Error::InvalidPath(format!(
                "{} grid points but {} samples",
                grid.len(),
                continuous.len()
            )));
        }
        if grid[0] != 0.0 {
            return Err(Error::InvalidPath("grid must start at t = 0".into()));
        }
        if grid.iter().any(|t| !t.is_finite()) || grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidPath("grid must be finite and strictly increasing".into()));
        }
        let dim = continuous[0].len();
        if dim == 0 {
            return Err(Error::InvalidPath("path dimension must be positive".into()));
        }
        for v in &continuous {
            if v.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: v.len() });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidPath("non-finite sample".into()));
            }
        }
        let horizon = *grid.last().unwrap();
        let mut jump_slot = vec![None; grid.len()];
        let mut last_time = 0.0;
        for (j, jump) in jumps.iter().enumerate() {
            if jump.size.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: jump.size.len() });
            }
            if !(jump.time > 0.0 && jump.time <= horizon) {
                return Err(Error::InvalidPath(format!(
                    "jump time {} outside (0, {horizon}]",
                    jump.time
                )));
            }
            if j > 0 && jump.time <= last_time {
                return Err(Error::InvalidPath("jump times must be strictly increasing".into()));
            }
            if jump.size.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidPath("non-finite jump size".into()));
            }
            last_time = jump.time;
            match find_time(&grid, jump.time) {
                Some(k) => jump_slot[k] = Some(j),
                None => {
                    return Err(Error::InvalidPath(format!(
                        "jump time {} is not a grid point",
                        jump.time
                    )))
                }
            }
        }
        let mut cumulative = Vec::with_capacity(grid.len());
        let mut acc = DVector::zeros(dim);
        for slot in &jump_slot {
            if let Some(j) = slot {
                acc += &jumps[*j].size;
            }
            cumulative.push(acc.clone());
        }
        Ok(Self { dim, grid, continuous, jumps, jump_slot, cumulative })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    pub fn times(&self) -> &[f64] {
        &self.grid
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn jumps(&self) -> &[Jump] {
        &self.jumps
    }

    pub fn is_jump(&self, k: usize) -> bool {
        self.jump_slot[k].is_some()
    }

    /// Jump size recorded at grid index `k`.
    pub fn jump_at_index(&self, k: usize) -> Option<&DVector<f64>> {
        self.jump_slot[k].map(|j| &self.jumps[j].size)
    }

    pub fn continuous_at_index(&self, k: usize) -> &DVector<f64> {
        &self.continuous[k]
    }

    /// `Z_{t_k}` (post-jump value).
    pub fn value_at_index(&self, k: usize) -> DVector<f64> {
        &self.continuous[k] + &self.cumulative[k]
    }

    /// `Z_{t_k -}`.
    pub fn left_limit_at_index(&self, k: usize) -> DVector<f64> {
        let mut v = self.value_at_index(k);
        if let Some(dz) = self.jump_at_index(k) {
            v -= dz;
        }
        v
    }

    /// Increment of the continuous part over `(t_{k-1}, t_k]`.
    pub fn continuous_increment(&self, k: usize) -> DVector<f64> {
        &self.continuous[k] - &self.continuous[k - 1]
    }

    /// Grid index of `t`, if `t` is a grid point.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        find_time(&self.grid, t)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= -TIME_TOL && t <= self.horizon() * (1.0 + TIME_TOL) + TIME_TOL) {
            return Err(Error::TimeOutOfRange { time: t, horizon: self.horizon() });
        }
        Ok(())
    }

    /// Continuous part at an arbitrary time (linear interpolation).
    pub fn continuous_at(&self, t: f64) -> Result<DVector<f64>> {
        self.check_time(t)?;
        if let Some(k) = find_time(&self.grid, t) {
            return Ok(self.continuous[k].clone());
        }
        let k = self.grid.partition_point(|&s| s <= t).clamp(1, self.grid.len() - 1);
        let (t0, t1) = (self.grid[k - 1], self.grid[k]);
        let w = (t - t0) / (t1 - t0);
        Ok(&self.continuous[k - 1] * (1.0 - w) + &self.continuous[k] * w)
    }

    fn jumps_through(&self, t: f64, inclusive: bool) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dim);
        for jump in &self.jumps {
            let hit = if inclusive {
                jump.time <= t + TIME_TOL
            } else {
                jump.time < t - TIME_TOL
            };
            if hit {
                acc += &jump.size;
            }
        }
        acc
    }

    /// `Z_t`.
    pub fn value(&self, t: f64) -> Result<DVector<f64>> {
        Ok(self.continuous_at(t)? + self.jumps_through(t, true))
    }

    /// `Z_{t-}`; at `t = 0` this is `Z_0`.
    pub fn left_limit(&self, t: f64) -> Result<DVector<f64>> {
        Ok(self.continuous_at(t)? + self.jumps_through(t, false))
    }

    /// `Z_t - Z_s` for `0 <= s <= t <= T`.
    pub fn increment(&self, s: f64, t: f64) -> Result<DVector<f64>> {
        if s > t {
            return Err(Error::InvalidParameter(format!("increment needs s <= t, got {s} > {t}")));
        }
        Ok(self.value(t)? - self.value(s)?)
    }

    /// `ΔZ_t` when `t` is a recorded jump time.
    pub fn jump_at(&self, t: f64) -> Result<Option<DVector<f64>>> {
        self.check_time(t)?;
        Ok(self
            .jumps
            .iter()
            .find(|j| (j.time - t).abs() <= TIME_TOL * (1.0 + t.abs()))
            .map(|j| j.size.clone()))
    }

    /// Per-interval increments of `[Z, Z]^c`: outer products of the continuous
    /// increments. Entry `k - 1` belongs to `(t_{k-1}, t_k]`.
    pub fn quadratic_variation_c(&self) -> Vec<DMatrix<f64>> {
        (1..self.grid.len())
            .map(|k| {
                let dz = self.continuous_increment(k);
                &dz * dz.transpose()
            })
            .collect()
    }

    /// Resamples onto a uniform grid of step close to `h` (the horizon divided
    /// into an integer number of steps), keeping every jump time. Continuous
    /// values are read from this path, so samples that coincide with existing
    /// grid points are reproduced exactly.
    pub fn regrid(&self, h: f64) -> Result<JumpPath> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::InvalidParameter(format!("step must be positive, got {h}")));
        }
        let horizon = self.horizon();
        let uniform = uniform_grid(horizon, h);
        let jump_times: Vec<f64> = self.jumps.iter().map(|j| j.time).collect();
        let grid = merge_times(&uniform, &jump_times);
        let continuous = grid
            .iter()
            .map(|&t| self.continuous_at(t))
            .collect::<Result<Vec<_>>>()?;
        let jumps = self
            .jumps
            .iter()
            .map(|j| {
                let k = find_time(&grid, j.time).expect("jump time merged into grid");
                Jump { time: grid[k], size: j.size.clone() }
            })
            .collect();
        JumpPath::new(grid, continuous, jumps)
    }

    /// Columnar text: `time, z_1..z_m, is_jump, dz_1..dz_m`, preceded by one
    /// `#` comment line carrying the format version.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# jumpflow-path format_version={PATH_FORMAT_VERSION}");
        out.push_str("time");
        for i in 1..=self.dim {
            let _ = write!(out, ",z_{i}");
        }
        out.push_str(",is_jump");
        for i in 1..=self.dim {
            let _ = write!(out, ",dz_{i}");
        }
        out.push('\n');
        for k in 0..self.grid.len() {
            let _ = write!(out, "{}", self.grid[k]);
            for v in self.value_at_index(k).iter() {
                let _ = write!(out, ",{v}");
            }
            let jump = self.jump_at_index(k);
            let _ = write!(out, ",{}", u8::from(jump.is_some()));
            for i in 0..self.dim {
                let v = jump.map_or(0.0, |dz| dz[i]);
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses the format written by [`JumpPath::to_csv`].
    pub fn from_csv(text: &str) -> Result<JumpPath> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
        let header = lines.next().ok_or_else(|| Error::InvalidPath("empty csv".into()))?;
        let cols = header.split(',').count();
        if cols < 4 || (cols - 2) % 2 != 0 {
            return Err(Error::InvalidPath(format!("unexpected header: {header}")));
        }
        let dim = (cols - 2) / 2;
        let mut grid = Vec::new();
        let mut continuous = Vec::new();
        let mut jumps = Vec::new();
        let mut acc = DVector::zeros(dim);
        for (row, line) in lines.enumerate() {
            let fields: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::InvalidPath(format!("row {}: {e}", row + 1)))?;
            if fields.len() != cols {
                return Err(Error::InvalidPath(format!("row {}: expected {cols} columns", row + 1)));
            }
            let t = fields[0];
            let z = DVector::from_column_slice(&fields[1..=dim]);
            if fields[dim + 1] != 0.0 {
                let dz = DVector::from_column_slice(&fields[dim + 2..]);
                acc += &dz;
                jumps.push(Jump { time: t, size: dz });
            }
            grid.push(t);
            continuous.push(z - &acc);
        }
        JumpPath::new(grid, continuous, jumps)
    }
}

fn find_time(grid: &[f64], t: f64) -> Option<usize> {
    let k = grid.partition_point(|&s| s < t - TIME_TOL * (1.0 + t.abs()));
    (k < grid.len() && (grid[k] - t).abs() <= TIME_TOL * (1.0 + t.abs())).then_some(k)
}

/// Uniform grid `k * T / n` with `n = ceil(T / h)`.
pub fn uniform_grid(horizon: f64, h: f64) -> Vec<f64> {
    let n = ((horizon / h) - 1e-9).ceil().max(1.0) as usize;
    let step = horizon / n as f64;
    (0..=n).map(|k| if k == n { horizon } else { k as f64 * step }).collect()
}

/// Sorted union of two sorted time lists; near-coincident times are merged.
fn merge_times(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    out.sort_by(|x, y| x.partial_cmp(y).unwrap());
    out.dedup_by(|x, y| (*x - *y).abs() <= TIME_TOL * (1.0 + y.abs()));
    out
}

/// Test-fixture constructor: continuous part interpolating `values` at
/// `times`, with the given `(time, size)` jumps. Jump times that are not among
/// `times` are inserted into the grid.
pub fn deterministic_path(
    times: &[f64],
    values: &[DVector<f64>],
    jumps: &[(f64, DVector<f64>)],
) -> Result<JumpPath> {
    if times.len() != values.len() || times.len() < 2 {
        return Err(Error::InvalidPath("need matching times and values, at least two".into()));
    }
    if times[0] != 0.0 || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidPath("times must start at 0 and be strictly increasing".into()));
    }
    let horizon = *times.last().unwrap();
    for (t, _) in jumps {
        if !(*t > 0.0 && *t <= horizon) {
            return Err(Error::InvalidPath(format!("jump time {t} outside (0, {horizon}]")));
        }
    }
    let skeleton = JumpPath::new(times.to_vec(), values.to_vec(), Vec::new())?;
    let jump_times: Vec<f64> = jumps.iter().map(|(t, _)| *t).collect();
    let grid = merge_times(times, &jump_times);
    let continuous = grid
        .iter()
        .map(|&t| skeleton.continuous_at(t))
        .collect::<Result<Vec<_>>>()?;
    let ledger = jumps
        .iter()
        .map(|(t, dz)| {
            let k = find_time(&grid, *t).expect("merged");
            Jump { time: grid[k], size: dz.clone() }
        })
        .collect();
    JumpPath::new(grid, continuous, ledger)
}

/// I.i.d. jump-size law of the compound Poisson part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum JumpLaw {
    Constant { size: Vec<f64> },
    Uniform { low: Vec<f64>, high: Vec<f64> },
    Gaussian { mean: Vec<f64>, std_dev: Vec<f64> },
}

impl JumpLaw {
    fn dim(&self) -> usize {
        match self {
            JumpLaw::Constant { size } => size.len(),
            JumpLaw::Uniform { low, .. } => low.len(),
            JumpLaw::Gaussian { mean, .. } => mean.len(),
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            JumpLaw::Constant { size } if finite(size) => Ok(()),
            JumpLaw::Uniform { low, high }
                if low.len() == high.len()
                    && finite(low)
                    && finite(high)
                    && low.iter().zip(high).all(|(a, b)| a <= b) =>
            {
                Ok(())
            }
            JumpLaw::Gaussian { mean, std_dev }
                if mean.len() == std_dev.len()
                    && finite(mean)
                    && finite(std_dev)
                    && std_dev.iter().all(|s| *s >= 0.0) =>
            {
                Ok(())
            }
            _ => Err(Error::InvalidParameter(format!("invalid jump law {self:?}"))),
        }
    }

    fn sample_channel(&self, channel: usize, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            JumpLaw::Constant { size } => size[channel],
            JumpLaw::Uniform { low, high } => {
                let u: f64 = rng.random();
                low[channel] + u * (high[channel] - low[channel])
            }
            JumpLaw::Gaussian { mean, std_dev } => {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                mean[channel] + std_dev[channel] * z
            }
        }
    }
}

/// Parameters of a Lévy-jump diffusion `Z = drift·t + scale·B_t + Σ J_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathParams {
    pub horizon: f64,
    pub step: f64,
    pub brownian_scale: Vec<f64>,
    pub drift: Vec<f64>,
    /// Expected number of jumps per unit time.
    pub jump_intensity: f64,
    pub jump_law: JumpLaw,
    pub seed: u64,
}

impl PathParams {
    pub fn dim(&self) -> usize {
        self.brownian_scale.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(what.to_string()));
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return bad("horizon must be finite and positive");
        }
        if !(self.step.is_finite() && self.step > 0.0) {
            return bad("step must be finite and positive");
        }
        if !(self.jump_intensity.is_finite() && self.jump_intensity >= 0.0) {
            return bad("jump intensity must be finite and non-negative");
        }
        let m = self.brownian_scale.len();
        if m == 0 || self.drift.len() != m || self.jump_law.dim() != m {
            return bad("brownian_scale, drift and jump law must share a positive dimension");
        }
        if self.brownian_scale.iter().chain(&self.drift).any(|x| !x.is_finite()) {
            return bad("non-finite drift or scale");
        }
        self.jump_law.validate()
    }
}

#[derive(Clone, Copy)]
#[repr(u64)]
enum Purpose {
    Brownian = 1,
    JumpCount = 2,
    JumpTimes = 3,
    JumpSizes = 4,
}

fn substream(seed: u64, purpose: Purpose, channel: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 32) | channel as u64);
    rng
}

/// Samples a Lévy-jump diffusion on a uniform grid of step `params.step`, with
/// the Poisson jump times inserted into the grid. Brownian increments are drawn
/// exactly on the merged grid.
pub fn sample_levy_jump_diffusion(params: &PathParams) -> Result<JumpPath> {
    params.validate()?;
    let m = params.dim();
    let horizon = params.horizon;

    let mean_jumps = params.jump_intensity * horizon;
    let count = if mean_jumps > 0.0 {
        let poisson = Poisson::new(mean_jumps)
            .map_err(|e| Error::InvalidParameter(format!("poisson: {e}")))?;
        poisson.sample(&mut substream(params.seed, Purpose::JumpCount, 0)) as usize
    } else {
        0
    };
    let mut time_rng = substream(params.seed, Purpose::JumpTimes, 0);
    let mut times: Vec<f64> = (0..count)
        .map(|_| {
            // (0, T]
            let u: f64 = time_rng.random();
            horizon * (1.0 - u)
        })
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut size_rngs: Vec<ChaCha8Rng> =
        (0..m).map(|c| substream(params.seed, Purpose::JumpSizes, c)).collect();
    let mut raw_jumps: Vec<(f64, DVector<f64>)> = times
        .iter()
        .map(|&t| {
            let dz = DVector::from_iterator(
                m,
                (0..m).map(|c| params.jump_law.sample_channel(c, &mut size_rngs[c])),
            );
            (t, dz)
        })
        .collect();
    // Coincident times (probability zero) are merged into one event.
    raw_jumps.dedup_by(|later, earlier| {
        if (later.0 - earlier.0).abs() <= TIME_TOL * (1.0 + earlier.0) {
            earlier.1 += &later.1;
            true
        } else {
            false
        }
    });

    let uniform = uniform_grid(horizon, params.step);
    let jump_times: Vec<f64> = raw_jumps.iter().map(|(t, _)| *t).collect();
    let grid = merge_times(&uniform, &jump_times);

    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut continuous = vec![DVector::zeros(m); grid.len()];
    for c in 0..m {
        let mut rng = substream(params.seed, Purpose::Brownian, c);
        let mut level = 0.0;
        for k in 1..grid.len() {
            let dt = grid[k] - grid[k - 1];
            let db = normal.sample(&mut rng) * dt.sqrt();
            level += params.drift[c] * dt + params.brownian_scale[c] * db;
            continuous[k][c] = level;
        }
    }

    let jumps = raw_jumps
        .into_iter()
        .map(|(t, size)| {
            let k = find_time(&grid, t).expect("merged");
            Jump { time: grid[k], size }
        })
        .collect();
    JumpPath::new(grid, continuous, jumps)
}

/// Mixes a master seed and an index into an independent 64-bit seed
/// (SplitMix64 finalizer).
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
