use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `±1` one-vs-rest target codes, shape `(n, classes)`.
pub fn one_vs_rest(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![-1.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::input(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Mean over batch and classes of `max(0, 1 - t*o)^2`, with its gradient
/// with respect to the logits.
pub fn square_hinge_loss(logits: &Tensor, targets: &Tensor) -> Result<(f64, Tensor)> {
    if logits.shape() != targets.shape() {
        return Err(Error::input(format!(
            "logits {:?} and targets {:?} differ in shape",
            logits.shape(),
            targets.shape()
        )));
    }
    if logits.is_empty() {
        return Err(Error::input("empty logits"));
    }
    if let Some(t) = targets.data().iter().find(|&&t| t != 1.0 && t != -1.0) {
        return Err(Error::input(format!("hinge target {t} is not +1 or -1")));
    }
    let count = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&o, &t) in logits.data().iter().zip(targets.data()) {
        let margin = (1.0 - t * o).max(0.0);
        loss += margin * margin;
        grad.push(-2.0 * t * margin / count);
    }
    Ok((loss / count, Tensor::new(logits.shape().to_vec(), grad)?))
}
