use std::io::Write;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Builds from a row-major `classes x classes` count table.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Option<Self> {
        (counts.len() == classes * classes).then_some(Self { classes, counts })
    }

    pub fn from_pairs(classes: usize, truth: &[usize], predicted: &[usize]) -> Self {
        let mut cm = Self::new(classes);
        for (&t, &p) in truth.iter().zip(predicted) {
            cm.add(t, p);
        }
        cm
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.classes + predicted] += 1;
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        (0..self.classes).filter(|&t| t != c).map(|t| self.get(t, c)).sum()
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..self.classes).filter(|&p| p != c).map(|p| self.get(c, p)).sum()
    }

    pub fn true_negatives(&self, c: usize) -> u64 {
        self.total() - self.true_positives(c) - self.false_positives(c) - self.false_negatives(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fnr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub macro_fnr: f64,
    pub macro_fpr: f64,
    pub accuracy: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class and macro-averaged scores. Empty denominators give 0, and the
/// miss rate is `1 - recall`.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Metrics {
    let per_class: Vec<ClassMetrics> = (0..cm.classes())
        .map(|c| {
            let (tp, fp, fn_, tn) = (
                cm.true_positives(c),
                cm.false_positives(c),
                cm.false_negatives(c),
                cm.true_negatives(c),
            );
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                fnr: 1.0 - recall,
                fpr: ratio(fp, fp + tn),
            }
        })
        .collect();
    let c = per_class.len().max(1) as f64;
    let avg = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c;
    let correct: u64 = (0..cm.classes()).map(|k| cm.get(k, k)).sum();
    Metrics {
        macro_precision: avg(|m| m.precision),
        macro_recall: avg(|m| m.recall),
        macro_f1: avg(|m| m.f1),
        macro_fnr: avg(|m| m.fnr),
        macro_fpr: avg(|m| m.fpr),
        accuracy: ratio(correct, cm.total()),
        per_class,
    }
}

impl Metrics {
    /// `metric<TAB>class<TAB>value`, class `all` for aggregates.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "metric\tclass\tvalue")?;
        for (name, v) in [
            ("accuracy", self.accuracy),
            ("macro_precision", self.macro_precision),
            ("macro_recall", self.macro_recall),
            ("macro_f1", self.macro_f1),
            ("macro_fnr", self.macro_fnr),
            ("macro_fpr", self.macro_fpr),
        ] {
            writeln!(w, "{name}\tall\t{v}")?;
        }
        for (c, m) in self.per_class.iter().enumerate() {
            for (name, v) in [
                ("precision", m.precision),
                ("recall", m.recall),
                ("f1", m.f1),
                ("fnr", m.fnr),
                ("fpr", m.fpr),
            ] {
                writeln!(w, "{name}\t{c}\t{v}")?;
            }
        }
        w.flush()
    }
}
