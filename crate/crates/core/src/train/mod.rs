//! Optimizers, ranking metrics, the training loop and the sweep harness.

mod metrics;
mod optim;
mod sweep;
mod trainer;

pub use metrics::{auc, auc_brute_force, logloss, uauc, Uauc};
pub use optim::{adagrad_step, rmsprop_step, OptimizerState, RMSPROP_EPS, RMSPROP_RHO};
pub use sweep::{
    ablate, params_matched_set, read_metrics_csv, scaling_sweep, AblationReport, AblationRow, SweepAxis, SweepPoint,
    SweepReport, SweepRow,
};
pub use trainer::{
    bayes_auc, dense_learning_rates, embedding_seed, evaluate, metrics_csv, train, EvalResult, MetricsReport, TrainConfig, TrainOutcome, TrainSetup,
};

/// Formats a float with 9 significant digits, trimming trailing zeros.
/// Magnitudes outside `[1e-5, 1e9)` use exponent notation.
pub fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        format!("{}e{exp}", trim_zeros(mantissa.to_string()))
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}
