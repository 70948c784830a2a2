//! The linear-quadratic mean-field-type game and linear policies.
//!
//! A model is a finite-horizon, time-varying system in which a generic agent
//! evolves as
//!
//! ```text
//! x[t+1] = A x + Ā x̄ + B u1 + B̄ ū1 + u2 + ū2 + ω + ω̄
//! ```
//!
//! and is penalised by `Q` on its deviation from the mean-field and `Q̄` on the
//! mean-field itself. Controls are identity-weighted; a weighted control
//! penalty has to be folded into `B` by the caller.

use std::fmt;
use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::linalg::{is_symmetric, min_eigenvalue, Mat};

const SYMMETRY_TOL: f64 = 1e-9;
const PSD_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LqMftgModel {
    pub horizon: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    pub a: Vec<Mat>,
    pub a_bar: Vec<Mat>,
    pub b: Vec<Mat>,
    pub b_bar: Vec<Mat>,
    /// `T + 1` weights; index `T` is the terminal weight.
    pub q: Vec<Mat>,
    pub q_bar: Vec<Mat>,
    /// Per-step idiosyncratic noise covariance.
    pub sigma: Mat,
    /// Per-step common noise covariance.
    pub sigma_bar: Mat,
    pub sigma0: Mat,
    pub sigma0_bar: Mat,
    pub gamma: f64,
}

/// One invariant violation found by [`validate_model`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: String,
    pub reason: String,
}

impl Violation {
    fn new(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.path, self.reason)
    }
}

/// Gains of both players at a single timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGains {
    /// Minimizer deviation gain, `p x m`.
    pub k1: Mat,
    /// Maximizer deviation gain, `m x m`.
    pub k2: Mat,
    /// Minimizer mean-field gain, `p x m`.
    pub l1: Mat,
    /// Maximizer mean-field gain, `m x m`.
    pub l2: Mat,
}

impl StepGains {
    pub fn zeros(state_dim: usize, control_dim: usize) -> Self {
        Self {
            k1: Mat::zeros(control_dim, state_dim),
            k2: Mat::zeros(state_dim, state_dim),
            l1: Mat::zeros(control_dim, state_dim),
            l2: Mat::zeros(state_dim, state_dim),
        }
    }

    fn check_dims(&self, m: usize, p: usize, t: usize) -> Result<()> {
        let expect = [
            ("k1", &self.k1, (p, m)),
            ("k2", &self.k2, (m, m)),
            ("l1", &self.l1, (p, m)),
            ("l2", &self.l2, (m, m)),
        ];
        for (name, mat, shape) in expect {
            if mat.shape() != shape {
                return Err(Error::Dimension(format!(
                    "{name}[{t}] is {}x{}, expected {}x{}",
                    mat.nrows(),
                    mat.ncols(),
                    shape.0,
                    shape.1
                )));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        [&self.k1, &self.k2, &self.l1, &self.l2]
            .iter()
            .all(|m| m.iter().all(|v| v.is_finite()))
    }
}

/// Time-indexed linear gains for both players.
///
/// Realized controls are `u1 = -K1 (x - z) - L1 z` and `u2 = K2 (x - z) + L2 z`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyProfile {
    pub k1: Vec<Mat>,
    pub k2: Vec<Mat>,
    pub l1: Vec<Mat>,
    pub l2: Vec<Mat>,
}

impl PolicyProfile {
    pub fn zeros(model: &LqMftgModel) -> Self {
        Self::from_steps(vec![
            StepGains::zeros(model.state_dim, model.control_dim);
            model.horizon
        ])
    }

    pub fn from_steps(steps: Vec<StepGains>) -> Self {
        let mut p = Self {
            k1: Vec::with_capacity(steps.len()),
            k2: Vec::with_capacity(steps.len()),
            l1: Vec::with_capacity(steps.len()),
            l2: Vec::with_capacity(steps.len()),
        };
        for s in steps {
            p.k1.push(s.k1);
            p.k2.push(s.k2);
            p.l1.push(s.l1);
            p.l2.push(s.l2);
        }
        p
    }

    pub fn horizon(&self) -> usize {
        self.k1.len()
    }

    pub fn step(&self, t: usize) -> StepGains {
        StepGains {
            k1: self.k1[t].clone(),
            k2: self.k2[t].clone(),
            l1: self.l1[t].clone(),
            l2: self.l2[t].clone(),
        }
    }

    pub fn set_step(&mut self, t: usize, gains: StepGains) {
        self.k1[t] = gains.k1;
        self.k2[t] = gains.k2;
        self.l1[t] = gains.l1;
        self.l2[t] = gains.l2;
    }

    /// Checks lengths, shapes and finiteness against `model`.
    pub fn check(&self, model: &LqMftgModel) -> Result<()> {
        let t_len = model.horizon;
        for (name, seq) in [("k1", &self.k1), ("k2", &self.k2), ("l1", &self.l1), ("l2", &self.l2)] {
            if seq.len() != t_len {
                return Err(Error::Dimension(format!(
                    "policy {name} has {} entries, expected {t_len}",
                    seq.len()
                )));
            }
        }
        for t in 0..t_len {
            let s = self.step(t);
            s.check_dims(model.state_dim, model.control_dim, t)?;
            if !s.is_finite() {
                return Err(Error::InvalidArgument(format!("policy gains at t={t} are not finite")));
            }
        }
        Ok(())
    }

    /// Serializes as a gains file: keys `k1,k2,l1,l2`, each an array of matrices.
    pub fn to_json(&self) -> Value {
        let seq = |s: &[Mat]| Value::Array(s.iter().map(matrix_to_json).collect());
        let mut map = Map::new();
        map.insert("k1".into(), seq(&self.k1));
        map.insert("k2".into(), seq(&self.k2));
        map.insert("l1".into(), seq(&self.l1));
        map.insert("l2".into(), seq(&self.l2));
        Value::Object(map)
    }

    pub fn from_json(value: &Value) -> Result<Self> {
        let obj = value.as_object().ok_or_else(|| Error::Parse {
            key: "<root>".into(),
            reason: "expected an object".into(),
        })?;
        reject_unknown(obj, &["k1", "k2", "l1", "l2"])?;
        let get = |key: &str| -> Result<Vec<Mat>> {
            let v = obj.get(key).ok_or_else(|| Error::Parse {
                key: key.into(),
                reason: "missing required key".into(),
            })?;
            let arr = v.as_array().ok_or_else(|| Error::Parse {
                key: key.into(),
                reason: "expected an array of matrices".into(),
            })?;
            arr.iter()
                .enumerate()
                .map(|(i, m)| parse_matrix(m, &format!("{key}[{i}]")))
                .collect()
        };
        Ok(Self {
            k1: get("k1")?,
            k2: get("k2")?,
            l1: get("l1")?,
            l2: get("l2")?,
        })
    }
}

impl LqMftgModel {
    /// `Ã_t = A_t + Ā_t`.
    pub fn a_tilde(&self, t: usize) -> Mat {
        &self.a[t] + &self.a_bar[t]
    }

    /// `B̃_t = B_t + B̄_t`.
    pub fn b_tilde(&self, t: usize) -> Mat {
        &self.b[t] + &self.b_bar[t]
    }

    /// Deviation closed loop `A_t - B_t K1 + K2`.
    pub fn deviation_loop(&self, t: usize, gains: &StepGains) -> Mat {
        &self.a[t] - &self.b[t] * &gains.k1 + &gains.k2
    }

    /// Mean-field closed loop `Ã_t - B̃_t L1 + L2`.
    pub fn mean_loop(&self, t: usize, gains: &StepGains) -> Mat {
        self.a_tilde(t) - self.b_tilde(t) * &gains.l1 + &gains.l2
    }

    pub fn with_gamma(&self, gamma: f64) -> Self {
        Self {
            gamma,
            ..self.clone()
        }
    }

    /// True when every sequence repeats its first entry (the terminal weights
    /// are compared separately from the running weights).
    pub fn is_time_invariant(&self) -> bool {
        fn same(s: &[Mat]) -> bool {
            s.windows(2).all(|w| w[0] == w[1])
        }
        let t = self.horizon;
        same(&self.a)
            && same(&self.a_bar)
            && same(&self.b)
            && same(&self.b_bar)
            && same(&self.q[..t])
            && same(&self.q_bar[..t])
    }

    /// Re-broadcasts a time-invariant model to a new horizon.
    pub fn with_horizon(&self, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be at least 1".into()));
        }
        if !self.is_time_invariant() {
            return Err(Error::InvalidArgument(
                "only time-invariant models can change horizon".into(),
            ));
        }
        let rep = |s: &[Mat], n: usize| vec![s[0].clone(); n];
        let t = self.horizon;
        let mut q = rep(&self.q, horizon);
        q.push(self.q[t].clone());
        let mut q_bar = rep(&self.q_bar, horizon);
        q_bar.push(self.q_bar[t].clone());
        Ok(Self {
            horizon,
            a: rep(&self.a, horizon),
            a_bar: rep(&self.a_bar, horizon),
            b: rep(&self.b, horizon),
            b_bar: rep(&self.b_bar, horizon),
            q,
            q_bar,
            ..self.clone()
        })
    }

    /// Parses a model configuration (JSON) and validates it.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
            key: "<root>".into(),
            reason: e.to_string(),
        })?;
        let model = Self::from_json(&value)?;
        let violations = validate_model(&model);
        if violations.is_empty() {
            Ok(model)
        } else {
            Err(Error::Invalid(violations))
        }
    }

    /// Structural parse without validation. Time-invariant shorthand (a single
    /// matrix where a sequence is expected) is broadcast.
    pub fn from_json(value: &Value) -> Result<Self> {
        let obj = value.as_object().ok_or_else(|| Error::Parse {
            key: "<root>".into(),
            reason: "expected an object".into(),
        })?;
        reject_unknown(obj, MODEL_KEYS)?;
        let required = |key: &str| {
            obj.get(key).ok_or_else(|| Error::Parse {
                key: key.into(),
                reason: "missing required key".into(),
            })
        };
        let uint = |key: &str| -> Result<usize> {
            required(key)?
                .as_u64()
                .map(|v| v as usize)
                .ok_or_else(|| Error::Parse {
                    key: key.into(),
                    reason: "expected a non-negative integer".into(),
                })
        };
        let horizon = uint("horizon")?;
        let state_dim = uint("state_dim")?;
        let control_dim = uint("control_dim")?;
        let gamma = required("gamma")?.as_f64().ok_or_else(|| Error::Parse {
            key: "gamma".into(),
            reason: "expected a number".into(),
        })?;
        let seq = |key: &str, len: usize| parse_sequence(required(key)?, key, len);
        let mat = |key: &str| parse_matrix(required(key)?, key);
        Ok(Self {
            horizon,
            state_dim,
            control_dim,
            a: seq("a", horizon)?,
            a_bar: seq("a_bar", horizon)?,
            b: seq("b", horizon)?,
            b_bar: seq("b_bar", horizon)?,
            q: seq("q", horizon + 1)?,
            q_bar: seq("q_bar", horizon + 1)?,
            sigma: mat("sigma")?,
            sigma_bar: mat("sigma_bar")?,
            sigma0: mat("sigma0")?,
            sigma0_bar: mat("sigma0_bar")?,
            gamma,
        })
    }

    /// Serializes with every sequence written out in full.
    pub fn to_json(&self) -> Value {
        let seq = |s: &[Mat]| Value::Array(s.iter().map(matrix_to_json).collect());
        let mut map = Map::new();
        map.insert("horizon".into(), self.horizon.into());
        map.insert("state_dim".into(), self.state_dim.into());
        map.insert("control_dim".into(), self.control_dim.into());
        map.insert("gamma".into(), self.gamma.into());
        map.insert("a".into(), seq(&self.a));
        map.insert("a_bar".into(), seq(&self.a_bar));
        map.insert("b".into(), seq(&self.b));
        map.insert("b_bar".into(), seq(&self.b_bar));
        map.insert("q".into(), seq(&self.q));
        map.insert("q_bar".into(), seq(&self.q_bar));
        map.insert("sigma".into(), matrix_to_json(&self.sigma));
        map.insert("sigma_bar".into(), matrix_to_json(&self.sigma_bar));
        map.insert("sigma0".into(), matrix_to_json(&self.sigma0));
        map.insert("sigma0_bar".into(), matrix_to_json(&self.sigma0_bar));
        Value::Object(map)
    }
}

const MODEL_KEYS: &[&str] = &[
    "horizon",
    "state_dim",
    "control_dim",
    "gamma",
    "a",
    "a_bar",
    "b",
    "b_bar",
    "q",
    "q_bar",
    "sigma",
    "sigma_bar",
    "sigma0",
    "sigma0_bar",
];

fn reject_unknown(obj: &Map<String, Value>, allowed: &[&str]) -> Result<()> {
    match obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(Error::Parse {
            key: k.clone(),
            reason: "unknown key".into(),
        }),
        None => Ok(()),
    }
}

/// Row-major nested arrays, the layout `parse_matrix` reads.
pub fn matrix_to_json(m: &Mat) -> Value {
    Value::Array(
        m.row_iter()
            .map(|row| Value::Array(row.iter().map(|v| Value::from(*v)).collect()))
            .collect(),
    )
}

pub fn parse_matrix(value: &Value, key: &str) -> Result<Mat> {
    let err = |reason: &str| Error::Parse {
        key: key.into(),
        reason: reason.into(),
    };
    let rows = value.as_array().ok_or_else(|| err("expected a matrix (array of rows)"))?;
    if rows.is_empty() {
        return Err(err("matrix has no rows"));
    }
    let mut data = Vec::new();
    let mut ncols = None;
    for row in rows {
        let row = row.as_array().ok_or_else(|| err("matrix rows must be arrays"))?;
        if *ncols.get_or_insert(row.len()) != row.len() {
            return Err(err("ragged matrix rows"));
        }
        for v in row {
            data.push(v.as_f64().ok_or_else(|| err("matrix entries must be numbers"))?);
        }
    }
    let ncols = ncols.unwrap_or(0);
    if ncols == 0 {
        return Err(err("matrix has no columns"));
    }
    Ok(Mat::from_row_slice(rows.len(), ncols, &data))
}

fn parse_sequence(value: &Value, key: &str, len: usize) -> Result<Vec<Mat>> {
    let is_sequence = value
        .as_array()
        .and_then(|a| a.first())
        .and_then(|r| r.as_array())
        .and_then(|r| r.first())
        .is_some_and(|v| v.is_array());
    if is_sequence {
        value
            .as_array()
            .expect("checked above")
            .iter()
            .enumerate()
            .map(|(i, m)| parse_matrix(m, &format!("{key}[{i}]")))
            .collect()
    } else {
        let m = parse_matrix(value, key)?;
        Ok(vec![m; len])
    }
}

/// Reads and validates a model configuration file.
pub fn load_model(path: impl AsRef<Path>) -> Result<LqMftgModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    LqMftgModel::from_json_str(&text)
}

/// Reports every invariant violation; an empty report means the model is valid.
pub fn validate_model(model: &LqMftgModel) -> Vec<Violation> {
    let mut out = Vec::new();
    let (m, p, t_len) = (model.state_dim, model.control_dim, model.horizon);
    if t_len < 1 {
        out.push(Violation::new("horizon", "must be at least 1"));
    }
    if m < 1 {
        out.push(Violation::new("state_dim", "must be at least 1"));
    }
    if p < 1 {
        out.push(Violation::new("control_dim", "must be at least 1"));
    }
    if !(model.gamma.is_finite() && model.gamma > 0.0) {
        out.push(Violation::new("gamma", "must be a positive finite number"));
    }

    let mut check_seq = |name: &str, seq: &[Mat], len: usize, shape: (usize, usize), kind: Definiteness| {
        if seq.len() != len {
            out.push(Violation::new(
                name,
                format!("has {} entries, expected {len}", seq.len()),
            ));
        }
        for (i, mat) in seq.iter().enumerate() {
            check_matrix(&mut out, &format!("{name}[{i}]"), mat, shape, kind);
        }
    };
    check_seq("a", &model.a, t_len, (m, m), Definiteness::None);
    check_seq("a_bar", &model.a_bar, t_len, (m, m), Definiteness::None);
    check_seq("b", &model.b, t_len, (m, p), Definiteness::None);
    check_seq("b_bar", &model.b_bar, t_len, (m, p), Definiteness::None);
    check_seq("q", &model.q, t_len + 1, (m, m), Definiteness::Positive);
    check_seq("q_bar", &model.q_bar, t_len + 1, (m, m), Definiteness::Positive);
    for (name, mat) in [
        ("sigma", &model.sigma),
        ("sigma_bar", &model.sigma_bar),
        ("sigma0", &model.sigma0),
        ("sigma0_bar", &model.sigma0_bar),
    ] {
        check_matrix(&mut out, name, mat, (m, m), Definiteness::SemiPositive);
    }
    out
}

#[derive(Clone, Copy)]
enum Definiteness {
    None,
    Positive,
    SemiPositive,
}

fn check_matrix(out: &mut Vec<Violation>, path: &str, mat: &Mat, shape: (usize, usize), kind: Definiteness) {
    if mat.shape() != shape {
        out.push(Violation::new(
            path,
            format!(
                "dimension mismatch: expected {}x{}, got {}x{}",
                shape.0,
                shape.1,
                mat.nrows(),
                mat.ncols()
            ),
        ));
        return;
    }
    if mat.iter().any(|v| !v.is_finite()) {
        out.push(Violation::new(path, "has non-finite entries"));
        return;
    }
    match kind {
        Definiteness::None => {}
        Definiteness::Positive | Definiteness::SemiPositive if !is_symmetric(mat, SYMMETRY_TOL) => {
            out.push(Violation::new(path, "not symmetric"));
        }
        Definiteness::Positive => {
            if min_eigenvalue(mat) <= 0.0 {
                out.push(Violation::new(path, "not positive definite"));
            }
        }
        Definiteness::SemiPositive => {
            let scale = mat.amax().max(1.0);
            if min_eigenvalue(mat) < -PSD_TOL * scale {
                out.push(Violation::new(path, "not positive semi-definite"));
            }
        }
    }
}

/// Closed-loop transition matrices of the decoupled deviation and mean-field
/// processes under `policy`.
pub fn closed_loop_matrices(model: &LqMftgModel, policy: &PolicyProfile) -> Result<(Vec<Mat>, Vec<Mat>)> {
    policy.check(model)?;
    Ok((0..model.horizon)
        .map(|t| {
            let g = policy.step(t);
            (model.deviation_loop(t, &g), model.mean_loop(t, &g))
        })
        .unzip())
}
