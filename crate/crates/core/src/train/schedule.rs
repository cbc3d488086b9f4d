use crate::model::ParamGroup;

/// `xi^(L-l) * eta0` for layers `l = 1..=L`.
pub fn llrd_schedule(layers: usize, base_lr: f64, decay: f64) -> Vec<f64> {
    (1..=layers).map(|l| decay.powi((layers - l) as i32) * base_lr).collect()
}

/// Rate per parameter group: the embedding shares the first block's rate,
/// the final norm and heads share the last block's.
pub fn group_learning_rates(groups: &[ParamGroup], layers: usize, base_lr: f64, decay: f64) -> Vec<f64> {
    let rates = llrd_schedule(layers, base_lr, decay);
    groups.iter().map(|g| rates[g.0.clamp(1, layers) - 1]).collect()
}
