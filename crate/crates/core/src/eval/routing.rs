use std::io::Write;

use crate::model::{ModelError, RoutingTrace};

#[derive(Debug, Clone, PartialEq)]
struct LayerStats {
    prob_sum: Vec<f64>,
    load_count: Vec<u64>,
    tokens: u64,
    top_k: usize,
}

/// Running per-layer expert statistics over valid tokens.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoutingStats {
    layers: Vec<LayerStats>,
}

impl RoutingStats {
    pub fn add(&mut self, trace: &RoutingTrace) {
        if self.layers.is_empty() {
            self.layers = trace
                .layers
                .iter()
                .map(|l| LayerStats {
                    prob_sum: vec![0.0; l.experts],
                    load_count: vec![0; l.experts],
                    tokens: 0,
                    top_k: l.top_k,
                })
                .collect();
        }
        for (stats, layer) in self.layers.iter_mut().zip(&trace.layers) {
            for r in (0..layer.rows()).filter(|&r| layer.valid[r]) {
                for (s, &p) in stats.prob_sum.iter_mut().zip(layer.prob_row(r)) {
                    *s += p;
                }
                for &e in layer.selected_row(r) {
                    stats.load_count[e] += 1;
                }
                stats.tokens += 1;
            }
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn tokens(&self) -> u64 {
        self.layers.first().map_or(0, |l| l.tokens)
    }

    /// Mean routing probability per expert.
    pub fn prob(&self, layer: usize) -> Vec<f64> {
        let s = &self.layers[layer];
        s.prob_sum.iter().map(|p| p / s.tokens.max(1) as f64).collect()
    }

    /// Assignment share per expert; sums to 1.
    pub fn load(&self, layer: usize) -> Vec<f64> {
        let s = &self.layers[layer];
        let denom = (s.tokens * s.top_k as u64).max(1) as f64;
        s.load_count.iter().map(|&c| c as f64 / denom).collect()
    }

    /// Population variance of `load` averaged over layers.
    pub fn load_variance(&self) -> f64 {
        let per_layer: Vec<f64> = (0..self.num_layers())
            .map(|l| {
                let load = self.load(l);
                let mean = load.iter().sum::<f64>() / load.len() as f64;
                load.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / load.len() as f64
            })
            .collect();
        per_layer.iter().sum::<f64>() / per_layer.len().max(1) as f64
    }

    /// `layer expert prob load` rows.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "layer\texpert\tprob\tload")?;
        for l in 0..self.num_layers() {
            for (e, (p, ld)) in self.prob(l).iter().zip(self.load(l)).enumerate() {
                writeln!(w, "{l}\t{e}\t{p:.9}\t{ld:.9}")?;
            }
        }
        w.flush()
    }
}

/// Aggregates a set of traces; at least one routed token is required.
pub fn routing_stats<'t>(traces: impl IntoIterator<Item = &'t RoutingTrace>) -> Result<RoutingStats, ModelError> {
    let mut stats = RoutingStats::default();
    for t in traces {
        stats.add(t);
    }
    if stats.tokens() == 0 {
        return Err(ModelError::NoRoutedTokens);
    }
    Ok(stats)
}
