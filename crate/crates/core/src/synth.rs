//! Closed-form synthetic systems under tune and a brute-force grid oracle.
//!
//! | id                 | shape                                                     |
//! |--------------------|-----------------------------------------------------------|
//! | `steplike`         | one dominant enum knob, two plateaus, mild unimodal rest  |
//! | `bumpy`            | Gaussian hill plus sinusoidal ripples; a flag moves it    |
//! | `spiky`            | smooth bowl plus narrow spikes at integer knob values     |
//! | `spiky-smooth`     | `spiky` without the spike term                            |
//! | `quad1d`           | `-(x - 3)^2` on `[0, 10]`                                 |
//! | `frontend`         | constant capacity 100                                     |
//! | `backend`          | smooth bowl, 100 at default, 163 at optimum               |
//! | `frontend+backend` | `min(frontend, backend)`                                  |
//!
//! Every surface declares defaults for all of its knobs; the default setting
//! is the tuning baseline. With zero noise every surface is a pure function.

use std::f64::consts::PI;

use rand::Rng;

use crate::error::SurfaceError;
use crate::rng::{derive_seed, seeded_rng};
use crate::space::{ConfigSetting, ParamKind, Parameter, ParameterSpace, Value};

/// Steplike calibration: value at the default setting.
pub const STEPLIKE_DEFAULT: f64 = 9815.0;
/// Steplike calibration: global maximum.
pub const STEPLIKE_MAX: f64 = 118184.0;
/// Height of the secondary-knob contribution on the steplike surface.
const STEPLIKE_SECONDARY_SPAN: f64 = 8192.0;

pub const FRONTEND_CAPACITY: f64 = 100.0;
pub const BACKEND_DEFAULT: f64 = 100.0;
pub const BACKEND_MAX: f64 = 163.0;

/// Default cap on brute-force grid size.
pub const DEFAULT_GRID_CAP: u64 = 10_000_000;
/// Integer knobs with at most this many levels are enumerated in full by the
/// oracle; wider ranges are sampled at the requested resolution.
pub const INT_ENUMERATION_LIMIT: u64 = 256;

pub const CATALOG: &[&str] = &[
    "steplike",
    "bumpy",
    "spiky",
    "spiky-smooth",
    "quad1d",
    "frontend",
    "backend",
    "frontend+backend",
];

#[derive(Debug, Clone, PartialEq)]
enum Shape {
    Steplike {
        dominant_good: usize,
        secondary: Vec<Secondary>,
        low_plateau: f64,
        high_plateau: f64,
    },
    Bumpy,
    Spiky { spikes: bool },
    Quadratic,
    Constant(f64),
    Bowl {
        optimum: Vec<f64>,
        default_spread: f64,
        low: f64,
        high: f64,
    },
    Composed {
        front: Box<SyntheticSurface>,
        back: Box<SyntheticSurface>,
    },
}

/// One secondary knob of the steplike surface: its optimum and span.
#[derive(Debug, Clone, PartialEq)]
struct Secondary {
    dim: usize,
    optimum: f64,
    span: f64,
}

/// Deterministic closed-form performance surface.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSurface {
    id: String,
    description: &'static str,
    space: ParameterSpace,
    shape: Shape,
    default_resolution: usize,
    noise: f64,
    noise_seed: u64,
}

fn p(r: Result<Parameter, crate::error::SpaceError>, default: Value) -> Parameter {
    r.and_then(|p| p.with_default(default))
        .expect("catalog parameters are well formed")
}

impl SyntheticSurface {
    /// Database-like surface dominated by `query_cache_type`.
    pub fn steplike() -> Self {
        let space = ParameterSpace::new(vec![
            p(
                Parameter::enumeration("query_cache_type", ["OFF", "ON", "DEMAND"]),
                Value::Label("OFF".into()),
            ),
            p(Parameter::real("innodb_buffer_pool_mb", 0.0, 1024.0), Value::Real(128.0)),
            p(Parameter::int("thread_cache_size", 0, 64), Value::Int(8)),
            p(Parameter::real("query_cache_size_mb", 0.0, 256.0), Value::Real(0.0)),
            p(Parameter::real("innodb_log_file_mb", 0.0, 512.0), Value::Real(48.0)),
        ])
        .expect("catalog space is well formed");
        let secondary = vec![
            Secondary { dim: 1, optimum: 768.0, span: 1024.0 },
            Secondary { dim: 2, optimum: 32.0, span: 64.0 },
            Secondary { dim: 3, optimum: 64.0, span: 256.0 },
            Secondary { dim: 4, optimum: 256.0, span: 512.0 },
        ];
        let defaults = space.defaults().expect("catalog defaults");
        let q_default = secondary_quality(&secondary, &defaults);
        let shape = Shape::Steplike {
            dominant_good: 1,
            secondary,
            low_plateau: STEPLIKE_DEFAULT - STEPLIKE_SECONDARY_SPAN * q_default,
            high_plateau: STEPLIKE_MAX - STEPLIKE_SECONDARY_SPAN,
        };
        Self::build("steplike", "two plateaus split by query_cache_type (MySQL-like)", space, shape, 17)
    }

    /// Web-server-like surface with many local optima. `jvm_tuned` moves the
    /// hill to a different region.
    pub fn bumpy() -> Self {
        let space = ParameterSpace::new(vec![
            p(Parameter::real("max_threads", 16.0, 1024.0), Value::Real(200.0)),
            p(Parameter::real("accept_count", 10.0, 1000.0), Value::Real(100.0)),
            p(Parameter::boolean("jvm_tuned"), Value::Bool(false)),
        ])
        .expect("catalog space is well formed");
        Self::build("bumpy", "irregular bumps, argmax moved by jvm_tuned (Tomcat-like)", space, Shape::Bumpy, 100)
    }

    /// Cluster-like surface with a sharp rise at `executor_cores = 4`.
    pub fn spiky() -> Self {
        Self::spiky_with(true)
    }

    /// [`SyntheticSurface::spiky`] without its spike term.
    pub fn spiky_smooth() -> Self {
        Self::spiky_with(false)
    }

    fn spiky_with(spikes: bool) -> Self {
        let space = ParameterSpace::new(vec![
            p(Parameter::int("executor_cores", 1, 8), Value::Int(1)),
            p(Parameter::real("executor_memory_gb", 1.0, 16.0), Value::Real(1.0)),
            p(Parameter::int("shuffle_partitions", 8, 263), Value::Int(200)),
        ])
        .expect("catalog space is well formed");
        let (id, desc) = if spikes {
            ("spiky", "smooth bowl with spikes at executor_cores 4 and 8 (Spark-cluster-like)")
        } else {
            ("spiky-smooth", "spiky without its spike term")
        };
        Self::build(id, desc, space, Shape::Spiky { spikes }, 33)
    }

    /// `-(x - 3)^2` over `x` in `[0, 10]`, default `x = 0`.
    pub fn quad1d() -> Self {
        let space = ParameterSpace::new(vec![p(Parameter::real("x", 0.0, 10.0), Value::Real(0.0))])
            .expect("catalog space is well formed");
        Self::build("quad1d", "-(x-3)^2 on [0, 10]", space, Shape::Quadratic, 10_001)
    }

    /// Front-end tier with fixed capacity.
    pub fn frontend() -> Self {
        let space = ParameterSpace::new(vec![p(Parameter::int("lb_workers", 1, 16), Value::Int(4))])
            .expect("catalog space is well formed");
        Self::constant("frontend", space, FRONTEND_CAPACITY)
    }

    /// Database tier: 100 at its default, 163 at its optimum.
    pub fn backend() -> Self {
        let space = ParameterSpace::new(vec![
            p(Parameter::real("db_buffer_pool_gb", 0.0, 64.0), Value::Real(16.0)),
            p(Parameter::real("db_io_capacity", 100.0, 2100.0), Value::Real(600.0)),
        ])
        .expect("catalog space is well formed");
        let defaults = space.defaults().expect("catalog defaults");
        let optimum = vec![0.75, 0.75];
        let default_spread = bowl_spread(&space, &optimum, &defaults);
        Self::build(
            "backend",
            "smooth database tier: 100 at default, 163 at optimum",
            space,
            Shape::Bowl {
                optimum,
                default_spread,
                low: BACKEND_DEFAULT,
                high: BACKEND_MAX,
            },
            101,
        )
    }

    /// Surface with the same value everywhere.
    pub fn constant(id: impl Into<String>, space: ParameterSpace, value: f64) -> Self {
        Self::build(id, "constant capacity", space, Shape::Constant(value), 2)
    }

    /// End-to-end throughput of two chained tiers: the slower one wins.
    pub fn composed(front: SyntheticSurface, back: SyntheticSurface) -> Result<Self, SurfaceError> {
        let space = front.space.concat(&back.space)?;
        let id = format!("{}+{}", front.id, back.id);
        let res = front.default_resolution.min(back.default_resolution);
        Ok(Self::build(
            id,
            "min of two tiers",
            space,
            Shape::Composed {
                front: Box::new(front),
                back: Box::new(back),
            },
            res,
        ))
    }

    fn build(
        id: impl Into<String>,
        description: &'static str,
        space: ParameterSpace,
        shape: Shape,
        default_resolution: usize,
    ) -> Self {
        Self {
            id: id.into(),
            description,
            space,
            shape,
            default_resolution,
            noise: 0.0,
            noise_seed: 0,
        }
    }

    /// Looks a surface up in [`CATALOG`].
    pub fn by_id(id: &str) -> Result<Self, SurfaceError> {
        Ok(match id {
            "steplike" => Self::steplike(),
            "bumpy" => Self::bumpy(),
            "spiky" => Self::spiky(),
            "spiky-smooth" => Self::spiky_smooth(),
            "quad1d" => Self::quad1d(),
            "frontend" => Self::frontend(),
            "backend" => Self::backend(),
            "frontend+backend" => Self::composed(Self::frontend(), Self::backend())?,
            other => {
                return Err(SurfaceError::Unknown {
                    name: other.to_string(),
                    available: CATALOG.to_vec(),
                })
            }
        })
    }

    /// Additive uniform noise in `[-amplitude, amplitude]` for
    /// [`SyntheticSurface::noisy_value`].
    pub fn with_noise(mut self, amplitude: f64, seed: u64) -> Self {
        self.noise = amplitude.abs();
        self.noise_seed = seed;
        self
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn description(&self) -> &'static str {
        self.description
    }

    pub fn space(&self) -> &ParameterSpace {
        &self.space
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn default_resolution(&self) -> usize {
        self.default_resolution
    }

    pub fn default_setting(&self) -> ConfigSetting {
        self.space.defaults().expect("catalog surfaces declare all defaults")
    }

    /// Noise-free value. `setting` must be valid for [`Self::space`].
    pub fn value(&self, setting: &ConfigSetting) -> f64 {
        let v = setting.values();
        match &self.shape {
            Shape::Steplike {
                dominant_good,
                secondary,
                low_plateau,
                high_plateau,
            } => {
                let good = self.space.params()[0].value_at_level(*dominant_good as u64);
                let plateau = if v[0] == good { *high_plateau } else { *low_plateau };
                plateau + STEPLIKE_SECONDARY_SPAN * secondary_quality(secondary, setting)
            }
            Shape::Bumpy => {
                let u = unit_coord(&self.space, setting, 0);
                let w = unit_coord(&self.space, setting, 1);
                bumpy_value(u, w, matches!(v[2], Value::Bool(true)))
            }
            Shape::Spiky { spikes } => {
                let cores = v[0].as_f64().unwrap_or(1.0);
                let mem = v[1].as_f64().unwrap_or(1.0);
                let parts = v[2].as_f64().unwrap_or(8.0);
                spiky_value(cores, mem, parts, *spikes)
            }
            Shape::Quadratic => {
                let x = v[0].as_f64().unwrap_or(0.0);
                -(x - 3.0) * (x - 3.0)
            }
            Shape::Constant(c) => *c,
            Shape::Bowl {
                optimum,
                default_spread,
                low,
                high,
            } => high - (high - low) * (bowl_spread(&self.space, optimum, setting) / default_spread),
            Shape::Composed { front, back } => {
                let (a, b) = self.split(front.space.dim(), setting);
                front.value(&a).min(back.value(&b))
            }
        }
    }

    /// Value plus the `draw`-th noise sample of this surface's noise stream.
    pub fn noisy_value(&self, setting: &ConfigSetting, draw: u64) -> f64 {
        let base = self.value(setting);
        if self.noise == 0.0 {
            return base;
        }
        let mut rng = seeded_rng(derive_seed(self.noise_seed, draw));
        base + rng.random_range(-self.noise..=self.noise)
    }

    /// Splits a composed setting into its front and back parts.
    pub fn split(&self, front_dim: usize, setting: &ConfigSetting) -> (ConfigSetting, ConfigSetting) {
        let (a, b) = setting.values().split_at(front_dim);
        (ConfigSetting::new(a.to_vec()), ConfigSetting::new(b.to_vec()))
    }

    /// Upper bound on how far the true maximum can exceed the grid maximum
    /// at resolution `res`: a Lipschitz bound times the half grid spacing
    /// along each real dimension. Zero where the optimum lies on the grid.
    pub fn grid_slack(&self, res: usize) -> f64 {
        let h = 0.5 / (res.max(2) - 1) as f64;
        match &self.shape {
            // |d/dd (span * (1 - d^2)/4)| <= span / 2 per real knob.
            Shape::Steplike { .. } => 3.0 * STEPLIKE_SECONDARY_SPAN / 2.0 * h,
            // Gradient bound of bumpy_value in unit coordinates.
            Shape::Bumpy => BUMPY_LIPSCHITZ * 2.0 * h,
            // Only executor_memory_gb is sampled: |d/dm| <= 2*30/15 per unit of m.
            Shape::Spiky { .. } => 4.0 * 15.0 * h,
            Shape::Quadratic => 14.0 * 10.0 * h,
            Shape::Constant(_) => 0.0,
            Shape::Bowl { .. } | Shape::Composed { .. } => {
                // |d spread/du| <= 0.75 per dim, scaled by 63/spread_default.
                2.0 * 63.0 * 0.75 * 8.0 * h
            }
        }
    }
}

fn unit_coord(space: &ParameterSpace, setting: &ConfigSetting, dim: usize) -> f64 {
    match (space.params()[dim].kind(), &setting.values()[dim]) {
        (ParamKind::Real { lo, hi }, v) => (v.as_f64().unwrap_or(*lo) - lo) / (hi - lo),
        _ => 0.0,
    }
}

/// Mean of `1 - d_i^2` over the secondary knobs, `d_i` the normalized
/// distance to the knob's optimum.
fn secondary_quality(secondary: &[Secondary], setting: &ConfigSetting) -> f64 {
    let sum: f64 = secondary
        .iter()
        .map(|s| {
            let x = setting.values()[s.dim].as_f64().unwrap_or(s.optimum);
            let d = (x - s.optimum) / s.span;
            1.0 - d * d
        })
        .sum();
    sum / secondary.len() as f64
}

/// Mean squared normalized distance to `optimum` (unit coordinates).
fn bowl_spread(space: &ParameterSpace, optimum: &[f64], setting: &ConfigSetting) -> f64 {
    let sum: f64 = optimum
        .iter()
        .enumerate()
        .map(|(dim, o)| {
            let d = unit_coord(space, setting, dim) - o;
            d * d
        })
        .sum();
    sum / optimum.len() as f64
}

const BUMPY_SCALE: f64 = 1000.0;
const BUMPY_HILL_WIDTH: f64 = 0.2;
const BUMPY_FREQ_U: f64 = 6.0;
const BUMPY_FREQ_W: f64 = 5.0;
const BUMPY_LIPSCHITZ: f64 = 1.08 * BUMPY_SCALE * (0.5 * 3.1 + 0.3 * PI * 11.0 + 0.06 * 2.0 * PI * 5.1);

/// Hill centers for `jvm_tuned = false` and `true`.
const BUMPY_CENTERS: [(f64, f64); 2] = [(0.3, 0.7), (0.72, 0.35)];
const BUMPY_GAIN: [f64; 2] = [1.0, 1.08];

fn bumpy_value(u: f64, w: f64, tuned: bool) -> f64 {
    let i = usize::from(tuned);
    let (cu, cw) = BUMPY_CENTERS[i];
    let (du, dw) = (u - cu, w - cw);
    let hill = (-(du * du + dw * dw) / (2.0 * BUMPY_HILL_WIDTH * BUMPY_HILL_WIDTH)).exp();
    let ripple = (0.5 + 0.5 * (2.0 * PI * BUMPY_FREQ_U * du).cos())
        * (0.5 + 0.5 * (2.0 * PI * BUMPY_FREQ_W * dw).cos());
    let skew = 0.06 * (2.0 * PI * (4.3 * u + 2.9 * w + 0.37 * i as f64)).sin();
    BUMPY_GAIN[i] * BUMPY_SCALE * (0.2 + 0.5 * hill + 0.3 * ripple + skew)
}

fn spiky_value(cores: f64, mem: f64, parts: f64, spikes: bool) -> f64 {
    let dc = (cores - 6.0) / 7.0;
    let dm = (mem - 12.0) / 15.0;
    let dp = (parts - 136.0) / 256.0;
    let smooth = 100.0 - 40.0 * dc * dc - 30.0 * dm * dm - 10.0 * dp * dp;
    let spike = if !spikes {
        0.0
    } else if cores == 4.0 {
        90.0
    } else if cores == 8.0 {
        25.0
    } else {
        0.0
    };
    smooth + spike
}

/// Exact maximum over a Cartesian grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub best_setting: ConfigSetting,
    pub best_value: f64,
    /// Grid points per dimension.
    pub resolution: Vec<usize>,
    pub evaluations: u64,
}

/// Values the oracle visits along one dimension.
pub fn grid_axis(param: &Parameter, res: usize) -> Vec<Value> {
    match param.kind() {
        ParamKind::Real { lo, hi } => (0..res)
            .map(|i| {
                if i + 1 == res {
                    Value::Real(*hi)
                } else {
                    Value::Real(lo + i as f64 * (hi - lo) / (res - 1) as f64)
                }
            })
            .collect(),
        ParamKind::Int { lo, hi } => {
            let k = param.kind().levels().unwrap_or(1);
            if k <= INT_ENUMERATION_LIMIT.max(res as u64) {
                (*lo..=*hi).map(Value::Int).collect()
            } else {
                let mut levels: Vec<i64> = (0..res)
                    .map(|i| lo + ((i as f64) * (*hi - *lo) as f64 / (res - 1) as f64).round() as i64)
                    .collect();
                levels.dedup();
                levels.into_iter().map(Value::Int).collect()
            }
        }
        _ => (0..param.kind().levels().unwrap_or(1))
            .map(|l| param.value_at_level(l))
            .collect(),
    }
}

/// Exhaustive evaluation of `surface` on its grid. Ties keep the first point
/// in row-major order.
pub fn brute_force(surface: &SyntheticSurface, res: usize, cap: u64) -> Result<OracleResult, SurfaceError> {
    let params = surface.space().params();
    if res < 2 && params.iter().any(|p| matches!(p.kind(), ParamKind::Real { .. })) {
        return Err(SurfaceError::BadResolution);
    }
    let axes: Vec<Vec<Value>> = params.iter().map(|p| grid_axis(p, res)).collect();
    let size: u128 = axes.iter().map(|a| a.len() as u128).product();
    if size > cap as u128 {
        return Err(SurfaceError::GridTooLarge { size, cap });
    }
    let mut idx = vec![0usize; axes.len()];
    let mut current: Vec<Value> = axes.iter().map(|a| a[0].clone()).collect();
    let mut best: Option<(f64, Vec<Value>)> = None;
    let mut evaluations = 0u64;
    loop {
        let setting = ConfigSetting::new(current.clone());
        let y = surface.value(&setting);
        evaluations += 1;
        if best.as_ref().is_none_or(|(b, _)| y > *b) {
            best = Some((y, current.clone()));
        }
        // Odometer increment, last dimension fastest.
        let mut dim = axes.len();
        loop {
            if dim == 0 {
                let (best_value, values) = best.expect("grid is non-empty");
                return Ok(OracleResult {
                    best_setting: ConfigSetting::new(values),
                    best_value,
                    resolution: axes.iter().map(Vec::len).collect(),
                    evaluations,
                });
            }
            dim -= 1;
            idx[dim] += 1;
            if idx[dim] < axes[dim].len() {
                current[dim] = axes[dim][idx[dim]].clone();
                break;
            }
            idx[dim] = 0;
            current[dim] = axes[dim][0].clone();
        }
    }
}

/// Strict local maxima of a 2-D slice over the oracle grid of two real
/// dimensions, others held fixed at `fixed`.
pub fn count_local_maxima_2d(
    surface: &SyntheticSurface,
    dims: (usize, usize),
    fixed: &ConfigSetting,
    res: usize,
) -> usize {
    let params = surface.space().params();
    let ax = grid_axis(&params[dims.0], res);
    let ay = grid_axis(&params[dims.1], res);
    let mut grid = vec![vec![0.0; ay.len()]; ax.len()];
    for (i, x) in ax.iter().enumerate() {
        for (j, y) in ay.iter().enumerate() {
            let mut v = fixed.values().to_vec();
            v[dims.0] = x.clone();
            v[dims.1] = y.clone();
            grid[i][j] = surface.value(&ConfigSetting::new(v));
        }
    }
    let mut count = 0;
    for i in 0..ax.len() {
        for j in 0..ay.len() {
            let c = grid[i][j];
            let mut is_max = true;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (ni, nj) = (i as i64 + di, j as i64 + dj);
                    if ni < 0 || nj < 0 || ni >= ax.len() as i64 || nj >= ay.len() as i64 {
                        continue;
                    }
                    if grid[ni as usize][nj as usize] >= c {
                        is_max = false;
                    }
                }
            }
            if is_max {
                count += 1;
            }
        }
    }
    count
}
