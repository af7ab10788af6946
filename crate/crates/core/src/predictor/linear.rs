//! Dense L2-regularised logistic regression trained by full-batch gradient
//! descent. Used where a small linear model over tabular columns is needed
//! (recursive feature elimination).

use crate::math::{log_sigmoid, sigmoid};

#[derive(Clone, Debug)]
pub struct DenseLogisticConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub l2: f64,
}

impl Default for DenseLogisticConfig {
    fn default() -> Self {
        DenseLogisticConfig {
            learning_rate: 0.5,
            iterations: 300,
            l2: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLogistic {
    pub coef: Vec<f64>,
    pub intercept: f64,
}

impl DenseLogistic {
    pub fn zeros(dim: usize) -> Self {
        DenseLogistic {
            coef: vec![0.0; dim],
            intercept: 0.0,
        }
    }

    pub fn logit(&self, row: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(row).map(|(w, x)| w * x).sum::<f64>()
    }

    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        sigmoid(self.logit(row))
    }

    /// Mean BCE plus `l2/2 * |w|^2` (intercept unpenalised).
    pub fn objective(&self, rows: &[Vec<f64>], labels: &[u8], l2: f64) -> f64 {
        let n = rows.len() as f64;
        let data: f64 = rows
            .iter()
            .zip(labels)
            .map(|(r, &y)| {
                let z = self.logit(r);
                if y == 1 {
                    -log_sigmoid(z)
                } else {
                    -log_sigmoid(-z)
                }
            })
            .sum::<f64>()
            / n;
        data + 0.5 * l2 * self.coef.iter().map(|w| w * w).sum::<f64>()
    }

    pub fn fit(rows: &[Vec<f64>], labels: &[u8], config: &DenseLogisticConfig) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        let mut model = DenseLogistic::zeros(dim);
        let n = rows.len().max(1) as f64;
        let mut grad = vec![0.0; dim];
        for _ in 0..config.iterations {
            grad.iter_mut().for_each(|g| *g = 0.0);
            let mut g0 = 0.0;
            for (r, &y) in rows.iter().zip(labels) {
                let err = model.predict_proba(r) - y as f64;
                g0 += err;
                for (g, x) in grad.iter_mut().zip(r) {
                    *g += err * x;
                }
            }
            model.intercept -= config.learning_rate * g0 / n;
            for (w, g) in model.coef.iter_mut().zip(&grad) {
                *w -= config.learning_rate * (g / n + config.l2 * *w);
            }
        }
        model
    }
}
