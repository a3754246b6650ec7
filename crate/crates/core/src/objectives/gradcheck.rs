use super::losses::LossWeights;
use super::pretrain::{loss_graph, PreparedBatch};
use crate::autograd::Graph;
use crate::error::Result;
use crate::model::Seq2Seq;

/// Worst disagreement between analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Checks every parameter element of `model` against central differences of
/// the total pretraining loss on a fixed batch.
pub fn check_total_loss_gradients(
    model: &mut Seq2Seq,
    batch: &PreparedBatch,
    weights: &LossWeights,
    step: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    let mut g = Graph::new(true, None);
    let lg = loss_graph(model, &mut g, batch, weights)?;
    let grads = g.backward(lg.total);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let eval = |m: &Seq2Seq| -> Result<f64> {
        let mut g = Graph::inference();
        let lg = loss_graph(m, &mut g, batch, weights)?;
        Ok(g.scalar(lg.total))
    };
    for id in 0..model.params.len() {
        let analytic = grads.param(id).cloned();
        for i in 0..model.params.value(id).len() {
            let orig = model.params.value(id).data[i];
            model.params.value_mut(id).data[i] = orig + step;
            let plus = eval(model)?;
            model.params.value_mut(id).data[i] = orig - step;
            let minus = eval(model)?;
            model.params.value_mut(id).data[i] = orig;
            let n = (plus - minus) / (2.0 * step);
            let a = analytic.as_ref().map_or(0.0, |m| m.data[i]);
            let e = rel_err(a, n, floor);
            report.checked += 1;
            if e > report.max_rel_err {
                report = GradCheckReport {
                    max_rel_err: e,
                    worst_tensor: model.params.get(id).name.clone(),
                    worst_index: i,
                    analytic: a,
                    numeric: n,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}
