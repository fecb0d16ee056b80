use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::nn::{DiCo, Trace};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const SCORE_REDUCTION: &str = "relu then mean over batch and space";

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelActivationReport {
    pub layer: String,
    pub scores: Vec<f64>,
}

impl ChannelActivationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("channel,score\n");
        for (i, x) in self.scores.iter().enumerate() {
            let _ = writeln!(s, "{i},{x}");
        }
        let _ = writeln!(s, "# layer {}; {SCORE_REDUCTION}", self.layer);
        s
    }
}

/// Per channel, the mean of `max(x, 0)` over batch and space.
pub fn channel_activation_scores<T: Scalar>(features: &Tensor<T>, layer: &str) -> ChannelActivationReport {
    let s = features.shape();
    let mut scores = vec![0.0; s.c];
    for n in 0..s.n {
        for (c, plane) in features.sample(n).chunks_exact(s.spatial()).enumerate() {
            scores[c] += plane
                .iter()
                .map(|x| x.to_f64_lossy().max(0.0))
                .sum::<f64>();
        }
    }
    let count = (s.n * s.spatial()).max(1) as f64;
    for x in &mut scores {
        *x /= count;
    }
    ChannelActivationReport {
        layer: layer.into(),
        scores,
    }
}

/// Runs `model` on a batch and scores the named traced feature, e.g.
/// `stages.4.blocks.0.conv_module.mixed`.
pub fn model_channel_scores<T: Scalar>(
    model: &DiCo<T>,
    z: &Tensor<T>,
    t: &[usize],
    y: &[usize],
    layer: &str,
) -> Result<ChannelActivationReport> {
    let mut tape = Tape::new();
    let p = model.params.load(&mut tape, false);
    let zv = tape.constant(z.clone());
    let mut trace = Trace::on();
    model.forward_traced(&mut tape, &p, zv, t, y, &mut trace)?;
    let v = trace.get(layer).ok_or_else(|| {
        let known: Vec<&str> = trace.names().collect();
        Error::Usage(format!("layer {layer:?} not traced (known: {})", known.join(", ")))
    })?;
    Ok(channel_activation_scores(tape.value(v), layer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn basic_scores() {
        let neg = Tensor::<f32>::full(Shape::new(2, 3, 2, 2), -1.0);
        assert!(channel_activation_scores(&neg, "x").scores.iter().all(|&s| s == 0.0));
        let pos = Tensor::<f32>::full(Shape::new(2, 3, 2, 2), 0.75);
        assert!(channel_activation_scores(&pos, "x").scores.iter().all(|&s| s == 0.75));
    }
}
