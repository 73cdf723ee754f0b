//! Lion and AdamW optimizers and learning-rate schedules.
//!
//! Both optimizers read gradients from each [`Parameter`]'s gradient slot and
//! update values in place. The learning rate is passed to every step so a
//! schedule can drive it from outside.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Parameter;

const SCALAR_BYTES: usize = std::mem::size_of::<f64>();
const COUNTER_BYTES: usize = std::mem::size_of::<u64>();

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("parameter `{name}`: shape {got:?} does not match optimizer state {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("optimizer state tracks {expected} parameters, got {got}")]
    ParameterCount { expected: usize, got: usize },
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("invalid hyperparameter: {0}")]
    InvalidConfig(String),
    #[error("step {step} is past the end of a {total}-step schedule")]
    StepOutOfRange { step: u64, total: u64 },
}

pub type Result<T> = std::result::Result<T, OptimError>;

/// `sign` with `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn decays(exclude: &[String], name: &str) -> bool {
    !exclude.iter().any(|pat| name.contains(pat.as_str()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LionConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Parameters whose name contains any of these substrings skip decay.
    pub decay_exclude: Vec<String>,
}

impl Default for LionConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.01,
            decay_exclude: Vec::new(),
        }
    }
}

impl LionConfig {
    pub fn validate(&self) -> Result<()> {
        check_beta("beta1", self.beta1)?;
        check_beta("beta2", self.beta2)?;
        check_decay(self.weight_decay)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_exclude: Vec<String>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            decay_exclude: Vec::new(),
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        check_beta("beta1", self.beta1)?;
        check_beta("beta2", self.beta2)?;
        check_decay(self.weight_decay)?;
        if self.eps.is_nan() || self.eps < 0.0 {
            return Err(OptimError::InvalidConfig(format!("eps must be ≥ 0, got {}", self.eps)));
        }
        Ok(())
    }
}

fn check_beta(name: &str, beta: f64) -> Result<()> {
    if (0.0..1.0).contains(&beta) {
        Ok(())
    } else {
        Err(OptimError::InvalidConfig(format!(
            "{name} must lie in [0, 1), got {beta}"
        )))
    }
}

fn check_decay(wd: f64) -> Result<()> {
    if wd >= 0.0 {
        Ok(())
    } else {
        Err(OptimError::InvalidConfig(format!("weight decay must be ≥ 0, got {wd}")))
    }
}

/// One optimizer buffer, shaped like the parameter it shadows.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBuffer {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl StateBuffer {
    fn zeros_like(p: &Parameter) -> Self {
        Self {
            name: p.name.clone(),
            shape: p.tensor.shape().to_vec(),
            data: vec![0.0; p.tensor.numel()],
        }
    }
}

/// Checks that `params` line up with `buffers` and returns each gradient.
fn gradients<'a>(buffers: &[StateBuffer], params: &'a [Parameter]) -> Result<Vec<&'a [f64]>> {
    if buffers.len() != params.len() {
        return Err(OptimError::ParameterCount {
            expected: buffers.len(),
            got: params.len(),
        });
    }
    buffers
        .iter()
        .zip(params)
        .map(|(b, p)| {
            if b.shape != p.tensor.shape() {
                return Err(OptimError::ShapeMismatch {
                    name: p.name.clone(),
                    expected: b.shape.clone(),
                    got: p.tensor.shape().to_vec(),
                });
            }
            let g = p
                .tensor
                .grad()
                .ok_or_else(|| OptimError::MissingGradient(p.name.clone()))?;
            if g.len() != b.data.len() {
                return Err(OptimError::ShapeMismatch {
                    name: p.name.clone(),
                    expected: b.shape.clone(),
                    got: vec![g.len()],
                });
            }
            Ok(g)
        })
        .collect()
}

/// One Lion update of a single coordinate. Returns the interpolation `c`.
///
/// ```text
/// c  = β1·m + (1 − β1)·g
/// θ ← θ − lr·(sign(c) + λ·θ)
/// m ← β2·m + (1 − β2)·g
/// ```
pub fn lion_update(theta: &mut f64, m: &mut f64, g: f64, lr: f64, beta1: f64, beta2: f64, wd: f64) -> f64 {
    let c = beta1 * *m + (1.0 - beta1) * g;
    *theta -= lr * (sign(c) + wd * *theta);
    *m = beta2 * *m + (1.0 - beta2) * g;
    c
}

/// Lion optimizer state: one momentum buffer per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct LionState {
    pub config: LionConfig,
    momentum: Vec<StateBuffer>,
}

impl LionState {
    pub fn new(config: LionConfig, params: &[Parameter]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            momentum: params.iter().map(StateBuffer::zeros_like).collect(),
        })
    }

    /// Rebuilds a state from saved buffers.
    pub fn from_buffers(config: LionConfig, momentum: Vec<StateBuffer>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, momentum })
    }

    pub fn momentum(&self) -> &[StateBuffer] {
        &self.momentum
    }

    pub fn step(&mut self, params: &mut [Parameter], lr: f64) -> Result<()> {
        let grads: Vec<Vec<f64>> = gradients(&self.momentum, params)?
            .into_iter()
            .map(<[f64]>::to_vec)
            .collect();
        let LionConfig {
            beta1,
            beta2,
            weight_decay,
            ref decay_exclude,
        } = self.config;
        for ((p, m), g) in params.iter_mut().zip(&mut self.momentum).zip(&grads) {
            let wd = if decays(decay_exclude, &p.name) {
                weight_decay
            } else {
                0.0
            };
            let theta = p.tensor.data_mut();
            for i in 0..theta.len() {
                lion_update(&mut theta[i], &mut m.data[i], g[i], lr, beta1, beta2, wd);
            }
        }
        Ok(())
    }

    pub fn state_bytes(&self) -> usize {
        self.momentum.iter().map(|b| b.data.len()).sum::<usize>() * SCALAR_BYTES
    }
}

/// AdamW optimizer state: first and second moments plus a step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<StateBuffer>,
    second: Vec<StateBuffer>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, params: &[Parameter]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            first: params.iter().map(StateBuffer::zeros_like).collect(),
            second: params.iter().map(StateBuffer::zeros_like).collect(),
        })
    }

    pub fn from_buffers(
        config: AdamWConfig,
        step: u64,
        first: Vec<StateBuffer>,
        second: Vec<StateBuffer>,
    ) -> Result<Self> {
        config.validate()?;
        if first.len() != second.len() {
            return Err(OptimError::ParameterCount {
                expected: first.len(),
                got: second.len(),
            });
        }
        Ok(Self {
            config,
            step,
            first,
            second,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &[StateBuffer] {
        &self.first
    }

    pub fn second_moment(&self) -> &[StateBuffer] {
        &self.second
    }

    pub fn step(&mut self, params: &mut [Parameter], lr: f64) -> Result<()> {
        let grads: Vec<Vec<f64>> = gradients(&self.first, params)?
            .into_iter()
            .map(<[f64]>::to_vec)
            .collect();
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ref decay_exclude,
        } = self.config;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (((p, m), v), g) in params.iter_mut().zip(&mut self.first).zip(&mut self.second).zip(&grads) {
            let wd = if decays(decay_exclude, &p.name) {
                weight_decay
            } else {
                0.0
            };
            let theta = p.tensor.data_mut();
            for i in 0..theta.len() {
                let gi = g[i];
                m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * gi;
                v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                let denom = v_hat.sqrt() + eps;
                // 0/0 only arises with eps = 0 and an all-zero gradient history.
                let adaptive = if denom > 0.0 { m_hat / denom } else { 0.0 };
                theta[i] -= lr * (adaptive + wd * theta[i]);
            }
        }
        Ok(())
    }

    pub fn state_bytes(&self) -> usize {
        let p: usize = self.first.iter().map(|b| b.data.len()).sum();
        2 * p * SCALAR_BYTES + COUNTER_BYTES
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Lion,
    #[serde(rename = "adamw")]
    AdamW,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lion => "lion",
            Self::AdamW => "adamw",
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = OptimError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lion" => Ok(Self::Lion),
            "adamw" => Ok(Self::AdamW),
            other => Err(OptimError::InvalidConfig(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// Either optimizer, for code that picks one at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Lion(LionState),
    AdamW(AdamWState),
}

impl Optimizer {
    pub fn kind(&self) -> OptimizerKind {
        match self {
            Self::Lion(_) => OptimizerKind::Lion,
            Self::AdamW(_) => OptimizerKind::AdamW,
        }
    }

    pub fn step(&mut self, params: &mut [Parameter], lr: f64) -> Result<()> {
        match self {
            Self::Lion(s) => s.step(params, lr),
            Self::AdamW(s) => s.step(params, lr),
        }
    }

    pub fn state_bytes(&self) -> usize {
        state_bytes(self)
    }
}

/// Exact bytes held by optimizer buffers: `P·8` for Lion and `2·P·8 + 8`
/// (moments plus step counter) for AdamW.
pub fn state_bytes(opt: &Optimizer) -> usize {
    match opt {
        Optimizer::Lion(s) => s.state_bytes(),
        Optimizer::AdamW(s) => s.state_bytes(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

/// Learning-rate schedule over a fixed number of steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub warmup_ratio: f64,
    pub total_steps: u64,
}

impl ScheduleSpec {
    pub fn new(kind: ScheduleKind, base_lr: f64, warmup_ratio: f64, total_steps: u64) -> Result<Self> {
        if base_lr.is_nan() || base_lr <= 0.0 {
            return Err(OptimError::InvalidConfig(format!("base_lr must be > 0, got {base_lr}")));
        }
        if !(0.0..1.0).contains(&warmup_ratio) {
            return Err(OptimError::InvalidConfig(format!(
                "warmup_ratio must lie in [0, 1), got {warmup_ratio}"
            )));
        }
        if total_steps == 0 {
            return Err(OptimError::InvalidConfig("total_steps must be ≥ 1".into()));
        }
        Ok(Self {
            kind,
            base_lr,
            warmup_ratio,
            total_steps,
        })
    }

    pub fn constant(base_lr: f64, total_steps: u64) -> Result<Self> {
        Self::new(ScheduleKind::Constant, base_lr, 0.0, total_steps)
    }

    /// Linear warmup steps. Only cosine schedules warm up.
    pub fn warmup_steps(&self) -> u64 {
        match self.kind {
            ScheduleKind::Constant => 0,
            ScheduleKind::Cosine => (self.warmup_ratio * self.total_steps as f64).floor() as u64,
        }
    }

    /// Learning rate for 0-based `step`, valid up to and including `total_steps`.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(OptimError::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        let w = self.warmup_steps();
        if step < w {
            return Ok(self.base_lr * (step + 1) as f64 / w as f64);
        }
        Ok(match self.kind {
            ScheduleKind::Constant => self.base_lr,
            ScheduleKind::Cosine => {
                let progress = (step - w) as f64 / (self.total_steps - w) as f64;
                self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        })
    }
}

/// Free-function form of [`ScheduleSpec::lr_at`].
pub fn lr_at(spec: &ScheduleSpec, step: u64) -> Result<f64> {
    spec.lr_at(step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn param(name: &str, data: Vec<f64>) -> Parameter {
        Parameter::new(name, Tensor::vector(data))
    }

    fn set_grad(p: &mut Parameter, g: &[f64]) {
        p.tensor.zero_grad();
        p.tensor.accumulate_grad(g);
    }

    fn no_decay_lion() -> LionConfig {
        LionConfig {
            weight_decay: 0.0,
            ..LionConfig::default()
        }
    }

    #[test]
    fn lion_single_coordinate_example() {
        let (mut theta, mut m) = (1.0, 0.0);
        let c = lion_update(&mut theta, &mut m, 2.0, 0.1, 0.9, 0.99, 0.0);
        assert!((c - 0.2).abs() < 1e-15);
        assert!((theta - 0.9).abs() < 1e-15);
        assert!((m - 0.02).abs() < 1e-15);
    }

    #[test]
    fn lion_zero_gradient_is_a_fixed_point() {
        let mut params = vec![param("w", vec![0.3, -1.5])];
        let mut state = LionState::new(no_decay_lion(), &params).unwrap();
        set_grad(&mut params[0], &[0.0, 0.0]);
        state.step(&mut params, 0.1).unwrap();
        assert_eq!(params[0].tensor.data(), &[0.3, -1.5]);
        assert_eq!(state.momentum()[0].data, vec![0.0, 0.0]);
    }

    #[test]
    fn lion_momentum_uses_raw_gradient_after_update() {
        let mut params = vec![param("w", vec![0.0])];
        let mut state = LionState::new(no_decay_lion(), &params).unwrap();
        set_grad(&mut params[0], &[1.0]);
        state.step(&mut params, 0.5).unwrap();
        set_grad(&mut params[0], &[-0.05]);
        state.step(&mut params, 0.5).unwrap();
        // c₂ = 0.9·0.01 + 0.1·(−0.05) = 0.004 > 0, so θ keeps falling.
        assert!((params[0].tensor.data()[0] + 1.0).abs() < 1e-15);
        let m = state.momentum()[0].data[0];
        assert!((m - (0.99 * 0.01 + 0.01 * -0.05)).abs() < 1e-15);
    }

    #[test]
    fn lion_shape_mismatch_names_parameter() {
        let params = vec![param("layer.w", vec![1.0, 2.0])];
        let mut state = LionState::new(LionConfig::default(), &params).unwrap();
        let mut other = vec![param("layer.w", vec![1.0, 2.0, 3.0])];
        set_grad(&mut other[0], &[0.0; 3]);
        match state.step(&mut other, 0.1) {
            Err(OptimError::ShapeMismatch { name, .. }) => assert_eq!(name, "layer.w"),
            other => panic!("unexpected {other:?}"),
        }
        let mut missing = vec![param("layer.w", vec![1.0, 2.0])];
        assert_eq!(
            state.step(&mut missing, 0.1),
            Err(OptimError::MissingGradient("layer.w".into()))
        );
    }

    #[test]
    fn decay_exclusion_by_name() {
        let cfg = LionConfig {
            weight_decay: 0.5,
            decay_exclude: vec!["bias".into()],
            ..LionConfig::default()
        };
        let mut params = vec![param("w", vec![1.0]), param("b.bias", vec![1.0])];
        let mut state = LionState::new(cfg, &params).unwrap();
        for p in &mut params {
            set_grad(p, &[0.0]);
        }
        state.step(&mut params, 0.1).unwrap();
        assert!((params[0].tensor.data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(params[1].tensor.data()[0], 1.0);
    }

    #[test]
    fn adamw_single_step_example() {
        let cfg = AdamWConfig {
            eps: 0.0,
            ..AdamWConfig::default()
        };
        let mut params = vec![param("w", vec![1.0])];
        let mut state = AdamWState::new(cfg, &params).unwrap();
        set_grad(&mut params[0], &[2.0]);
        state.step(&mut params, 0.1).unwrap();
        assert_eq!(state.step_count(), 1);
        assert!((state.first_moment()[0].data[0] - 0.2).abs() < 1e-15);
        assert!((state.second_moment()[0].data[0] - 0.004).abs() < 1e-15);
        assert!((params[0].tensor.data()[0] - 0.899).abs() < 1e-12);
    }

    #[test]
    fn adamw_zero_gradient_without_decay_is_fixed() {
        for eps in [0.0, 1e-8] {
            let cfg = AdamWConfig {
                eps,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            };
            let mut params = vec![param("w", vec![0.7])];
            let mut state = AdamWState::new(cfg, &params).unwrap();
            set_grad(&mut params[0], &[0.0]);
            state.step(&mut params, 0.1).unwrap();
            assert_eq!(params[0].tensor.data()[0], 0.7);
        }
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let mut params = vec![param("w", vec![2.0, -3.0])];
        let mut state = AdamWState::new(AdamWConfig::default(), &params).unwrap();
        let lrs = [0.1, 0.05, 0.2, 0.01, 0.3];
        let mut factor = 1.0;
        for lr in lrs {
            set_grad(&mut params[0], &[0.0, 0.0]);
            state.step(&mut params, lr).unwrap();
            factor *= 1.0 - lr * 0.01;
        }
        let got = params[0].tensor.data();
        assert!((got[0] - 2.0 * factor).abs() < 1e-14);
        assert!((got[1] + 3.0 * factor).abs() < 1e-14);
    }

    #[test]
    fn state_bytes_examples() {
        let params = vec![param("w", vec![0.0; 1000])];
        let lion = Optimizer::Lion(LionState::new(LionConfig::default(), &params).unwrap());
        let adamw = Optimizer::AdamW(AdamWState::new(AdamWConfig::default(), &params).unwrap());
        assert_eq!(state_bytes(&lion), 8000);
        assert_eq!(state_bytes(&adamw), 16008);

        let lion = Optimizer::Lion(LionState::new(LionConfig::default(), &[]).unwrap());
        let adamw = Optimizer::AdamW(AdamWState::new(AdamWConfig::default(), &[]).unwrap());
        assert_eq!(state_bytes(&lion), 0);
        assert_eq!(state_bytes(&adamw), COUNTER_BYTES);
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        let bad = LionConfig {
            beta2: 1.0,
            ..LionConfig::default()
        };
        assert!(LionState::new(bad, &[]).is_err());
        assert!(ScheduleSpec::new(ScheduleKind::Cosine, 0.0, 0.1, 10).is_err());
        assert!(ScheduleSpec::new(ScheduleKind::Cosine, 1e-3, 1.0, 10).is_err());
        assert!(ScheduleSpec::new(ScheduleKind::Cosine, 1e-3, 0.1, 0).is_err());
        assert!("sgd".parse::<OptimizerKind>().is_err());
        assert_eq!("AdamW".parse::<OptimizerKind>().unwrap(), OptimizerKind::AdamW);
    }

    #[test]
    fn schedule_examples() {
        let constant = ScheduleSpec::constant(2e-5, 30).unwrap();
        for s in 0..=30 {
            assert_eq!(constant.lr_at(s).unwrap(), 2e-5);
        }
        // Warmup ratio is ignored by constant schedules.
        let constant = ScheduleSpec::new(ScheduleKind::Constant, 2e-5, 0.1, 30).unwrap();
        assert_eq!(constant.lr_at(0).unwrap(), 2e-5);

        let cosine = ScheduleSpec::new(ScheduleKind::Cosine, 2e-6, 0.1, 1000).unwrap();
        assert_eq!(cosine.warmup_steps(), 100);
        assert!((cosine.lr_at(50).unwrap() - 1.02e-6).abs() < 1e-18);
        assert!((cosine.lr_at(550).unwrap() - 1e-6).abs() < 1e-18);
        assert!(cosine.lr_at(1000).unwrap().abs() < 1e-20);
        assert_eq!(
            cosine.lr_at(1001),
            Err(OptimError::StepOutOfRange {
                step: 1001,
                total: 1000
            })
        );
    }

    proptest! {
        #[test]
        fn lion_step_magnitude_is_lr_or_zero(
            theta in prop::collection::vec(-5.0f64..5.0, 1..20),
            grads in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 20), 1..10),
            lr in 1e-4f64..0.5,
        ) {
            let n = theta.len();
            let mut params = vec![param("w", theta)];
            let mut state = LionState::new(no_decay_lion(), &params).unwrap();
            for g in grads {
                let before = params[0].tensor.data().to_vec();
                set_grad(&mut params[0], &g[..n]);
                state.step(&mut params, lr).unwrap();
                for (a, b) in before.iter().zip(params[0].tensor.data()) {
                    let delta = (a - b).abs();
                    prop_assert!(delta == 0.0 || (delta - lr).abs() <= 1e-12 * a.abs().max(1.0));
                }
            }
        }

        #[test]
        fn adamw_first_step_moves_by_lr_times_sign(
            theta in prop::collection::vec(-5.0f64..5.0, 8),
            g in prop::collection::vec(prop_oneof![-3.0f64..-1e-3, 1e-3f64..3.0], 8),
            lr in 1e-4f64..0.5,
        ) {
            let cfg = AdamWConfig { eps: 0.0, weight_decay: 0.0, ..AdamWConfig::default() };
            let mut params = vec![param("w", theta.clone())];
            let mut state = AdamWState::new(cfg, &params).unwrap();
            set_grad(&mut params[0], &g);
            state.step(&mut params, lr).unwrap();
            for ((a, b), gi) in theta.iter().zip(params[0].tensor.data()).zip(&g) {
                prop_assert!(((a - b) - lr * sign(*gi)).abs() < 1e-9);
            }
        }

        #[test]
        fn optimizers_are_deterministic(g in prop::collection::vec(-1.0f64..1.0, 6)) {
            for kind in [OptimizerKind::Lion, OptimizerKind::AdamW] {
                let run = || {
                    let mut params = vec![param("w", vec![0.5; 6])];
                    let mut opt = match kind {
                        OptimizerKind::Lion => Optimizer::Lion(LionState::new(LionConfig::default(), &params).unwrap()),
                        OptimizerKind::AdamW => Optimizer::AdamW(AdamWState::new(AdamWConfig::default(), &params).unwrap()),
                    };
                    for _ in 0..3 {
                        set_grad(&mut params[0], &g);
                        opt.step(&mut params, 0.01).unwrap();
                    }
                    (params, opt)
                };
                prop_assert_eq!(run(), run());
            }
        }

        #[test]
        fn warmup_boundary_is_continuous(
            base in 1e-6f64..1e-2,
            ratio in 0.01f64..0.9,
            total in 10u64..5000,
        ) {
            let spec = ScheduleSpec::new(ScheduleKind::Cosine, base, ratio, total).unwrap();
            let w = spec.warmup_steps();
            prop_assume!(w >= 1);
            let before = spec.lr_at(w - 1).unwrap();
            let at = spec.lr_at(w).unwrap();
            prop_assert!((before - at).abs() <= base / w as f64 + 1e-18);
        }

        #[test]
        fn lion_state_is_at_most_half_of_adamw(p in 0usize..5000) {
            let params = vec![param("w", vec![0.0; p])];
            let lion = LionState::new(LionConfig::default(), &params).unwrap().state_bytes();
            let adamw = AdamWState::new(AdamWConfig::default(), &params).unwrap().state_bytes();
            prop_assert!(lion as f64 <= 0.5 * adamw as f64 + COUNTER_BYTES as f64);
        }
    }
}
