//! Mixed-type configuration parameter spaces and their mapping onto the unit
//! hypercube.
//!
//! Every search and sampling routine works on [`UnitPoint`]s. A concrete
//! [`ConfigSetting`] is produced with [`ParameterSpace::from_unit`] and mapped
//! back with [`ParameterSpace::to_unit`]. Discrete dimensions (integers,
//! booleans, enums) with `k` levels are split into `k` equal cells; a level is
//! encoded as its cell center `(i + 0.5) / k`, which makes the round trip
//! `from_unit(to_unit(s)) == s` exact.
//!
//! Enum levels are ordered by declaration order. No log scaling is applied to
//! numeric ranges.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::error::SpaceError;

/// Current version of the space file schema.
pub const SPACE_FORMAT_VERSION: u32 = 1;

/// Domain of a single knob.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamKind {
    Real { lo: f64, hi: f64 },
    Int { lo: i64, hi: i64 },
    Bool,
    Enum { labels: Vec<String> },
}

impl ParamKind {
    /// Number of discrete levels, or `None` for real-valued knobs.
    pub fn levels(&self) -> Option<u64> {
        match self {
            ParamKind::Real { .. } => None,
            ParamKind::Int { lo, hi } => Some((*hi as i128 - *lo as i128 + 1) as u64),
            ParamKind::Bool => Some(2),
            ParamKind::Enum { labels } => Some(labels.len() as u64),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            ParamKind::Real { .. } => "real",
            ParamKind::Int { .. } => "int",
            ParamKind::Bool => "bool",
            ParamKind::Enum { .. } => "enum",
        }
    }
}

/// A named knob with its domain and an optional default value.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    name: String,
    kind: ParamKind,
    default: Option<Value>,
}

impl Parameter {
    pub fn real(name: impl Into<String>, lo: f64, hi: f64) -> Result<Self, SpaceError> {
        let name = name.into();
        if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
            return Err(SpaceError::field(&name, "lo/hi", "real range needs finite lo < hi"));
        }
        Self::checked(name, ParamKind::Real { lo, hi })
    }

    pub fn int(name: impl Into<String>, lo: i64, hi: i64) -> Result<Self, SpaceError> {
        let name = name.into();
        if lo > hi {
            return Err(SpaceError::field(&name, "lo/hi", "int range needs lo <= hi"));
        }
        Self::checked(name, ParamKind::Int { lo, hi })
    }

    pub fn boolean(name: impl Into<String>) -> Result<Self, SpaceError> {
        Self::checked(name.into(), ParamKind::Bool)
    }

    pub fn enumeration<S: Into<String>>(
        name: impl Into<String>,
        labels: impl IntoIterator<Item = S>,
    ) -> Result<Self, SpaceError> {
        let name = name.into();
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(SpaceError::field(&name, "labels", "enum needs at least one label"));
        }
        let mut seen = HashSet::new();
        for label in &labels {
            if !seen.insert(label.as_str()) {
                return Err(SpaceError::field(
                    &name,
                    "labels",
                    format!("duplicate label {label:?}"),
                ));
            }
        }
        Self::checked(name, ParamKind::Enum { labels })
    }

    fn checked(name: String, kind: ParamKind) -> Result<Self, SpaceError> {
        if name.is_empty() {
            return Err(SpaceError::field("<unnamed>", "name", "name must be non-empty"));
        }
        Ok(Self {
            name,
            kind,
            default: None,
        })
    }

    /// Attaches a default value, checked against the domain.
    pub fn with_default(mut self, value: Value) -> Result<Self, SpaceError> {
        let value = self.coerce(value);
        if let Some(reason) = self.violation(&value) {
            return Err(SpaceError::field(&self.name, "default", reason.to_string()));
        }
        self.default = Some(value);
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> &ParamKind {
        &self.kind
    }

    pub fn default_value(&self) -> Option<&Value> {
        self.default.as_ref()
    }

    /// Integer literals for real knobs are widened to reals.
    fn coerce(&self, value: Value) -> Value {
        match (&self.kind, value) {
            (ParamKind::Real { .. }, Value::Int(i)) => Value::Real(i as f64),
            (_, v) => v,
        }
    }

    fn violation(&self, value: &Value) -> Option<ViolationReason> {
        match (&self.kind, value) {
            (ParamKind::Real { lo, hi }, Value::Real(x)) => {
                if !x.is_finite() {
                    Some(ViolationReason::NotFinite)
                } else if x < lo || x > hi {
                    Some(ViolationReason::OutOfRange)
                } else {
                    None
                }
            }
            (ParamKind::Int { lo, hi }, Value::Int(x)) => {
                (x < lo || x > hi).then_some(ViolationReason::OutOfRange)
            }
            (ParamKind::Bool, Value::Bool(_)) => None,
            (ParamKind::Enum { labels }, Value::Label(l)) => {
                (!labels.contains(l)).then_some(ViolationReason::UnknownLabel)
            }
            _ => Some(ViolationReason::WrongType),
        }
    }

    /// Level index of a discrete value. Callers must have validated `value`.
    fn level_of(&self, value: &Value) -> u64 {
        match (&self.kind, value) {
            (ParamKind::Int { lo, .. }, Value::Int(x)) => (*x as i128 - *lo as i128) as u64,
            (ParamKind::Bool, Value::Bool(b)) => u64::from(*b),
            (ParamKind::Enum { labels }, Value::Label(l)) => {
                labels.iter().position(|x| x == l).unwrap_or(0) as u64
            }
            _ => 0,
        }
    }

    /// Value at a level index. `level` must be below `levels()`.
    pub fn value_at_level(&self, level: u64) -> Value {
        match &self.kind {
            ParamKind::Int { lo, .. } => Value::Int((*lo as i128 + level as i128) as i64),
            ParamKind::Bool => Value::Bool(level == 1),
            ParamKind::Enum { labels } => Value::Label(labels[level as usize].clone()),
            ParamKind::Real { lo, hi } => Value::Real(lo + (level as f64) * (hi - lo)),
        }
    }

    fn encode(&self, value: &Value) -> f64 {
        match (&self.kind, value) {
            (ParamKind::Real { lo, hi }, Value::Real(x)) => ((x - lo) / (hi - lo)).clamp(0.0, 1.0),
            _ => {
                let k = self.kind.levels().unwrap_or(1) as f64;
                (self.level_of(value) as f64 + 0.5) / k
            }
        }
    }

    fn decode(&self, u: f64) -> Value {
        match &self.kind {
            ParamKind::Real { lo, hi } => Value::Real((lo + u * (hi - lo)).clamp(*lo, *hi)),
            kind => {
                let k = kind.levels().unwrap_or(1);
                let level = ((u * k as f64).floor() as u64).min(k - 1);
                self.value_at_level(level)
            }
        }
    }
}

/// One concrete knob value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Real(f64),
    Label(String),
}

impl Value {
    /// Numeric view of ints and reals.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(i) => Some(*i as f64),
            Value::Real(x) => Some(*x),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bool(b) => write!(f, "{b}"),
            Value::Int(i) => write!(f, "{i}"),
            Value::Real(x) => write!(f, "{x}"),
            Value::Label(l) => f.write_str(l),
        }
    }
}

/// Concrete values, position-aligned with a [`ParameterSpace`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfigSetting {
    values: Vec<Value>,
}

impl ConfigSetting {
    pub fn new(values: Vec<Value>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[Value] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Coordinates in `[0, 1]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnitPoint(Vec<f64>);

impl UnitPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self, SpaceError> {
        if let Some((dim, &c)) = coords
            .iter()
            .enumerate()
            .find(|(_, c)| !(0.0..=1.0).contains(*c))
        {
            return Err(SpaceError::CoordinateOutOfRange { dim, value: c });
        }
        Ok(Self(coords))
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Axis-aligned sub-box of the unit hypercube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitBox {
    bounds: Vec<(f64, f64)>,
}

impl UnitBox {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self, SpaceError> {
        for (dim, &(lo, hi)) in bounds.iter().enumerate() {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(SpaceError::InvalidBox { dim, lo, hi });
            }
        }
        Ok(Self { bounds })
    }

    pub fn full(d: usize) -> Self {
        Self {
            bounds: vec![(0.0, 1.0); d],
        }
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn contains(&self, p: &UnitPoint) -> bool {
        p.dim() == self.dim()
            && p
                .coords()
                .iter()
                .zip(&self.bounds)
                .all(|(c, (lo, hi))| lo <= c && c <= hi)
    }
}

/// Box of half-width `radius` around `center`, clipped to the unit cube.
pub fn clip_box(center: &UnitPoint, radius: f64) -> Result<UnitBox, SpaceError> {
    if radius.is_nan() || radius <= 0.0 {
        return Err(SpaceError::InvalidRadius(radius));
    }
    let bounds = center
        .coords()
        .iter()
        .map(|&c| ((c - radius).max(0.0), (c + radius).min(1.0)))
        .collect();
    UnitBox::new(bounds)
}

/// Why a coordinate of a setting is invalid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationReason {
    OutOfRange,
    WrongType,
    UnknownLabel,
    NotFinite,
    /// Setting has more or fewer values than the space has parameters.
    LengthMismatch,
}

impl fmt::Display for ViolationReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ViolationReason::OutOfRange => "out-of-range",
            ViolationReason::WrongType => "wrong-type",
            ViolationReason::UnknownLabel => "unknown-label",
            ViolationReason::NotFinite => "not-finite",
            ViolationReason::LengthMismatch => "length-mismatch",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub dim: usize,
    pub param: String,
    pub reason: ViolationReason,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dim {} ({}): {}", self.dim, self.param, self.reason)
    }
}

/// Ordered list of uniquely named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSpace {
    params: Vec<Parameter>,
}

impl ParameterSpace {
    pub fn new(params: Vec<Parameter>) -> Result<Self, SpaceError> {
        if params.is_empty() {
            return Err(SpaceError::Empty);
        }
        let mut seen = HashSet::new();
        for p in &params {
            if !seen.insert(p.name()) {
                return Err(SpaceError::DuplicateName(p.name().to_string()));
            }
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(Parameter::name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name() == name)
    }

    /// Total number of settings when every dimension is discrete.
    pub fn discrete_size(&self) -> Option<u64> {
        self.params
            .iter()
            .try_fold(1u64, |acc, p| acc.checked_mul(p.kind().levels()?))
    }

    /// Concatenation of two spaces; names must not collide.
    pub fn concat(&self, other: &ParameterSpace) -> Result<ParameterSpace, SpaceError> {
        let mut params = self.params.clone();
        params.extend(other.params.iter().cloned());
        ParameterSpace::new(params)
    }

    /// Widens integer literals given for real knobs. Used when reading
    /// settings back from JSON.
    pub fn coerce(&self, setting: ConfigSetting) -> ConfigSetting {
        if setting.len() != self.dim() {
            return setting;
        }
        ConfigSetting::new(
            setting
                .values
                .into_iter()
                .zip(&self.params)
                .map(|(v, p)| p.coerce(v))
                .collect(),
        )
    }

    /// Lists every coordinate that falls outside its parameter's domain.
    pub fn validate(&self, setting: &ConfigSetting) -> Result<(), Vec<Violation>> {
        if setting.len() != self.dim() {
            return Err(vec![Violation {
                dim: setting.len().min(self.dim()),
                param: String::new(),
                reason: ViolationReason::LengthMismatch,
            }]);
        }
        let violations: Vec<_> = self
            .params
            .iter()
            .zip(setting.values())
            .enumerate()
            .filter_map(|(dim, (p, v))| {
                p.violation(v).map(|reason| Violation {
                    dim,
                    param: p.name().to_string(),
                    reason,
                })
            })
            .collect();
        if violations.is_empty() {
            Ok(())
        } else {
            Err(violations)
        }
    }

    pub fn to_unit(&self, setting: &ConfigSetting) -> Result<UnitPoint, SpaceError> {
        self.validate(setting).map_err(SpaceError::InvalidSetting)?;
        Ok(UnitPoint(
            self.params
                .iter()
                .zip(setting.values())
                .map(|(p, v)| p.encode(v))
                .collect(),
        ))
    }

    pub fn from_unit(&self, point: &UnitPoint) -> Result<ConfigSetting, SpaceError> {
        if point.dim() != self.dim() {
            return Err(SpaceError::DimensionMismatch {
                expected: self.dim(),
                actual: point.dim(),
            });
        }
        let mut values = Vec::with_capacity(self.dim());
        for (dim, (p, &u)) in self.params.iter().zip(point.coords()).enumerate() {
            if !(0.0..=1.0).contains(&u) {
                return Err(SpaceError::CoordinateOutOfRange { dim, value: u });
            }
            values.push(p.decode(u));
        }
        Ok(ConfigSetting::new(values))
    }

    /// Setting built from per-parameter defaults, if all are declared.
    pub fn defaults(&self) -> Result<ConfigSetting, SpaceError> {
        self.params
            .iter()
            .map(|p| {
                p.default_value()
                    .cloned()
                    .ok_or_else(|| SpaceError::field(p.name(), "default", "no default declared"))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(ConfigSetting::new)
    }

    /// Builds a setting from a name → value JSON object, falling back to
    /// declared defaults for names not present.
    pub fn setting_from_json(&self, obj: &serde_json::Map<String, Json>) -> Result<ConfigSetting, SpaceError> {
        for key in obj.keys() {
            if self.index_of(key).is_none() {
                return Err(SpaceError::field(key, "name", "not a parameter of the space"));
            }
        }
        let mut values = Vec::with_capacity(self.dim());
        for p in &self.params {
            let value = match obj.get(p.name()) {
                Some(raw) => {
                    let v: Value = serde_json::from_value(raw.clone()).map_err(|e| {
                        SpaceError::field(p.name(), "value", e.to_string())
                    })?;
                    p.coerce(v)
                }
                None => p.default_value().cloned().ok_or_else(|| {
                    SpaceError::field(p.name(), "value", "no value given and no default declared")
                })?,
            };
            if let Some(reason) = p.violation(&value) {
                return Err(SpaceError::field(p.name(), "value", reason.to_string()));
            }
            values.push(value);
        }
        Ok(ConfigSetting::new(values))
    }

    /// Name → value view of a setting, in parameter order.
    pub fn setting_to_json(&self, setting: &ConfigSetting) -> serde_json::Map<String, Json> {
        self.names()
            .zip(setting.values())
            .map(|(n, v)| (n.to_string(), serde_json::to_value(v).unwrap_or(Json::Null)))
            .collect()
    }

    pub fn from_json_str(text: &str) -> Result<Self, SpaceError> {
        let raw: RawSpaceFile =
            serde_json::from_str(text).map_err(|e| SpaceError::Parse(e.to_string()))?;
        if let Some(v) = raw.format_version {
            if v != SPACE_FORMAT_VERSION {
                return Err(SpaceError::UnsupportedVersion(v));
            }
        }
        let params = raw
            .params
            .into_iter()
            .enumerate()
            .map(|(i, p)| p.into_parameter(i))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(params)
    }

    pub fn load(path: &Path) -> Result<Self, SpaceError> {
        let text = fs::read_to_string(path).map_err(|e| SpaceError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> Json {
        let params: Vec<Json> = self
            .params
            .iter()
            .map(|p| {
                let mut obj = serde_json::Map::new();
                obj.insert("name".into(), Json::from(p.name()));
                obj.insert("kind".into(), Json::from(p.kind().kind_name()));
                match p.kind() {
                    ParamKind::Real { lo, hi } => {
                        obj.insert("lo".into(), Json::from(*lo));
                        obj.insert("hi".into(), Json::from(*hi));
                    }
                    ParamKind::Int { lo, hi } => {
                        obj.insert("lo".into(), Json::from(*lo));
                        obj.insert("hi".into(), Json::from(*hi));
                    }
                    ParamKind::Bool => {}
                    ParamKind::Enum { labels } => {
                        obj.insert("labels".into(), Json::from(labels.clone()));
                    }
                }
                if let Some(d) = p.default_value() {
                    obj.insert("default".into(), serde_json::to_value(d).unwrap_or(Json::Null));
                }
                Json::Object(obj)
            })
            .collect();
        serde_json::json!({ "format_version": SPACE_FORMAT_VERSION, "params": params })
    }
}

#[derive(Deserialize)]
struct RawSpaceFile {
    format_version: Option<u32>,
    params: Vec<RawParam>,
}

#[derive(Deserialize)]
struct RawParam {
    name: Option<String>,
    kind: Option<String>,
    lo: Option<Json>,
    hi: Option<Json>,
    labels: Option<Vec<String>>,
    default: Option<Json>,
}

impl RawParam {
    fn into_parameter(self, index: usize) -> Result<Parameter, SpaceError> {
        let name = match self.name {
            Some(n) if !n.is_empty() => n,
            _ => {
                return Err(SpaceError::field(
                    format!("#{index}"),
                    "name",
                    "missing or empty",
                ))
            }
        };
        let kind = self
            .kind
            .ok_or_else(|| SpaceError::field(&name, "kind", "missing"))?;
        let real_bound = |v: &Option<Json>, field: &str| -> Result<f64, SpaceError> {
            v.as_ref()
                .and_then(Json::as_f64)
                .ok_or_else(|| SpaceError::field(&name, field, "expected a number"))
        };
        let int_bound = |v: &Option<Json>, field: &str| -> Result<i64, SpaceError> {
            v.as_ref()
                .and_then(Json::as_i64)
                .ok_or_else(|| SpaceError::field(&name, field, "expected an integer"))
        };
        let param = match kind.as_str() {
            "real" => Parameter::real(&name, real_bound(&self.lo, "lo")?, real_bound(&self.hi, "hi")?)?,
            "int" => Parameter::int(&name, int_bound(&self.lo, "lo")?, int_bound(&self.hi, "hi")?)?,
            "bool" => Parameter::boolean(&name)?,
            "enum" => {
                let labels = self
                    .labels
                    .ok_or_else(|| SpaceError::field(&name, "labels", "missing"))?;
                Parameter::enumeration(&name, labels)?
            }
            other => {
                return Err(SpaceError::field(
                    &name,
                    "kind",
                    format!("unknown kind {other:?} (expected real, int, bool or enum)"),
                ))
            }
        };
        match self.default {
            Some(raw) => {
                let v: Value = serde_json::from_value(raw)
                    .map_err(|e| SpaceError::field(&name, "default", e.to_string()))?;
                param.with_default(v)
            }
            None => Ok(param),
        }
    }
}
