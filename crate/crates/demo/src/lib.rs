//! Browser bindings. Each export wraps a plain function that the native tests
//! call directly.

use lionrank::ir_eval::{evaluate, parse_qrels, parse_run, EvalOptions, Gain};
use lionrank::optim::{AdamWConfig, AdamWState, LionConfig, LionState, ScheduleKind, ScheduleSpec};
use lionrank::tensor::{Parameter, Tensor};
use wasm_bindgen::prelude::*;

/// Learning rate at every step `0..=total_steps`.
pub fn schedule_curve(kind: &str, base_lr: f64, warmup_ratio: f64, total_steps: u32) -> Result<Vec<f64>, String> {
    let kind = match kind {
        "constant" => ScheduleKind::Constant,
        "cosine" => ScheduleKind::Cosine,
        other => return Err(format!("unknown schedule `{other}`")),
    };
    let spec = ScheduleSpec::new(kind, base_lr, warmup_ratio, u64::from(total_steps)).map_err(|e| e.to_string())?;
    (0..=u64::from(total_steps))
        .map(|s| spec.lr_at(s).map_err(|e| e.to_string()))
        .collect()
}

/// Minimises `0.5·(a·x² + b·y²)` from `(x0, y0)` with Lion and AdamW side
/// by side, without weight decay. Row `i` of the result is
/// `[lion_x, lion_y, adamw_x, adamw_y]` after `i` steps, flattened.
pub fn quadratic_race(a: f64, b: f64, x0: f64, y0: f64, lr: f64, steps: u32) -> Result<Vec<f64>, String> {
    if !(a > 0.0 && b > 0.0) {
        return Err("curvatures must be positive".into());
    }
    let start = || vec![Parameter::new("xy", Tensor::vector(vec![x0, y0]))];
    let mut lion_p = start();
    let mut adam_p = start();
    let err = |e: lionrank::optim::OptimError| e.to_string();
    let lion_cfg = LionConfig {
        weight_decay: 0.0,
        ..LionConfig::default()
    };
    let adam_cfg = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    };
    let mut lion = LionState::new(lion_cfg, &lion_p).map_err(err)?;
    let mut adam = AdamWState::new(adam_cfg, &adam_p).map_err(err)?;

    let mut out = Vec::with_capacity(4 * (steps as usize + 1));
    let record = |out: &mut Vec<f64>, l: &[Parameter], w: &[Parameter]| {
        out.extend_from_slice(l[0].tensor.data());
        out.extend_from_slice(w[0].tensor.data());
    };
    record(&mut out, &lion_p, &adam_p);
    for _ in 0..steps {
        for p in [&mut lion_p[0], &mut adam_p[0]] {
            let (x, y) = (p.tensor.data()[0], p.tensor.data()[1]);
            p.tensor.zero_grad();
            p.tensor.accumulate_grad(&[a * x, b * y]);
        }
        lion.step(&mut lion_p, lr).map_err(err)?;
        adam.step(&mut adam_p, lr).map_err(err)?;
        record(&mut out, &lion_p, &adam_p);
    }
    Ok(out)
}

/// Evaluates a TREC run against qrels and returns the metric table.
pub fn metrics_table(run: &str, qrels: &str, binarize_at: u32, exponential_gain: bool) -> Result<String, String> {
    if binarize_at == 0 {
        return Err("binarize_at must be at least 1".into());
    }
    let run = parse_run(run).map_err(|e| e.to_string())?;
    let qrels = parse_qrels(qrels).map_err(|e| e.to_string())?;
    let opts = EvalOptions {
        binarize_at,
        gain: if exponential_gain {
            Gain::Exponential
        } else {
            Gain::Linear
        },
        ..EvalOptions::default()
    };
    Ok(evaluate(&run, &qrels, &opts).to_table())
}

#[wasm_bindgen]
pub fn lr_curve(kind: &str, base_lr: f64, warmup_ratio: f64, total_steps: u32) -> Result<Vec<f64>, JsError> {
    schedule_curve(kind, base_lr, warmup_ratio, total_steps).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn optimizer_race(a: f64, b: f64, x0: f64, y0: f64, lr: f64, steps: u32) -> Result<Vec<f64>, JsError> {
    quadratic_race(a, b, x0, y0, lr, steps).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn rank_metrics(run: &str, qrels: &str, binarize_at: u32, exponential_gain: bool) -> Result<String, JsError> {
    metrics_table(run, qrels, binarize_at, exponential_gain).map_err(|e| JsError::new(&e))
}
