use crate::model::{forward, Mode, ModelError, ModelParams};
use crate::tensor::Graph;
use crate::token::TokenSequence;
use crate::Scalar;

use super::{ConfusionMatrix, RoutingStats};

/// Classifier outputs over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub predicted: Vec<usize>,
    /// Mean cross-entropy over labeled sequences, if any.
    pub loss: Option<f64>,
    pub routing: RoutingStats,
}

/// Runs the classifier in batches on an inference tape.
pub fn predict<T: Scalar>(
    params: &ModelParams<T>,
    data: &[TokenSequence],
    batch_size: usize,
) -> Result<Predictions, ModelError> {
    let mut predicted = Vec::with_capacity(data.len());
    let mut routing = RoutingStats::default();
    let (mut loss_sum, mut labeled) = (0.0, 0usize);
    for chunk in data.chunks(batch_size.max(1)) {
        let mut g = Graph::inference();
        let out = forward(&mut g, params, chunk, Mode::Classify)?;
        let logits = g.value(out.logits);
        for (r, seq) in chunk.iter().enumerate() {
            let row = logits.row(r);
            let best = crate::model::top_k(row, 1)[0];
            predicted.push(best);
            if let Some(label) = seq.label {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.f64()));
                let lse = max + row.iter().map(|x| (x.f64() - max).exp()).sum::<f64>().ln();
                loss_sum += lse - row.get(label as usize).map_or(f64::NAN, |x| x.f64());
                labeled += 1;
            }
        }
        routing.add(&out.trace);
    }
    Ok(Predictions {
        predicted,
        loss: (labeled > 0).then(|| loss_sum / labeled as f64),
        routing,
    })
}

/// Confusion matrix of the classifier over labeled sequences.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    data: &[TokenSequence],
    batch_size: usize,
) -> Result<(ConfusionMatrix, Predictions), ModelError> {
    let classes = params.config.num_classes.ok_or(ModelError::NoClassHead)?;
    let preds = predict(params, data, batch_size)?;
    let mut cm = ConfusionMatrix::new(classes);
    for (seq, &p) in data.iter().zip(&preds.predicted) {
        if let Some(label) = seq.label {
            let label = label as usize;
            if label >= classes {
                return Err(ModelError::Config(format!("label {label} outside {classes} classes")));
            }
            cm.add(label, p);
        }
    }
    Ok((cm, preds))
}
