use super::params::{glorot_uniform, Binding, ParamId, ParamStore};
use crate::autodiff::{Padding, Tape, Var};
use crate::error::ModelError;
use crate::tensor::{Result, Tensor, TensorError};

/// 1-D convolution over the time axis with a bias per filter. Weights are
/// `[kernel_width × in_channels × filters]`, applied as cross-correlation.
#[derive(Clone, Debug)]
pub struct Conv1DLayer {
    weight: ParamId,
    bias: ParamId,
    kernel_width: usize,
    in_channels: usize,
    filters: usize,
    padding: Padding,
}

impl Conv1DLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        filters: usize,
        kernel_width: usize,
        padding: Padding,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Self, ModelError> {
        let w = glorot_uniform(
            vec![kernel_width, in_channels, filters],
            kernel_width * in_channels,
            kernel_width * filters,
            rng,
        );
        Self::from_tensors(store, name, w, Tensor::zeros(vec![filters]), padding)
    }

    pub fn from_tensors(
        store: &mut ParamStore,
        name: &str,
        weight: Tensor,
        bias: Tensor,
        padding: Padding,
    ) -> Result<Self, ModelError> {
        let [kernel_width, in_channels, filters] = *weight.shape() else {
            return Err(ModelError::config(format!("{name}: weight must be [kernel × in × filters]")));
        };
        if bias.shape() != [filters] {
            return Err(ModelError::config(format!("{name}: bias must have shape [{filters}]")));
        }
        Ok(Conv1DLayer {
            weight: store.add(format!("{name}.weight"), weight, true)?,
            bias: store.add(format!("{name}.bias"), bias, true)?,
            kernel_width,
            in_channels,
            filters,
            padding,
        })
    }

    pub fn kernel_width(&self) -> usize {
        self.kernel_width
    }

    pub fn filters(&self) -> usize {
        self.filters
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    /// Output length for an input of length `len`.
    pub fn output_len(&self, len: usize) -> Option<usize> {
        match self.padding {
            Padding::SameZero => Some(len),
            Padding::Valid => (len >= self.kernel_width).then(|| len - self.kernel_width + 1),
        }
    }

    /// `x: [batch × L × in]` → `[batch × L′ × filters]`.
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape.len() != 3 || shape[2] != self.in_channels {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d layer",
                lhs: shape.to_vec(),
                rhs: vec![self.kernel_width, self.in_channels, self.filters],
            });
        }
        let y = tape.conv1d(x, bind.var(self.weight), self.padding)?;
        tape.add(y, bind.var(self.bias))
    }
}

/// Global max-pooling over time, `[batch × L × C]` → `[batch × C]`.
/// With a `[batch × L]` mask only flagged positions compete. Gradient goes
/// to the first maximal position.
pub fn maxpool1d(tape: &mut Tape, x: Var, mask: Option<&[bool]>) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "maxpool1d",
            lhs: shape,
            rhs: vec![],
        });
    }
    match mask {
        Some(m) => tape.masked_max_time(x, m),
        None => tape.max_axis(x, 1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn channel_identity(c: usize) -> Tensor {
        let mut w = vec![0.0; c * c];
        for i in 0..c {
            w[i * c + i] = 1.0;
        }
        Tensor::new(vec![1, c, c], w).unwrap()
    }

    #[test]
    fn width_one_identity_kernel() {
        let mut store = ParamStore::new();
        let conv = Conv1DLayer::from_tensors(&mut store, "c", channel_identity(3), Tensor::zeros(vec![3]), Padding::Valid).unwrap();
        let x = Tensor::new(vec![2, 4, 3], (0..24).map(|i| i as f64 * 0.5 - 3.0).collect()).unwrap();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = conv.forward(&mut tape, &bind, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn output_lengths() {
        let mut store = ParamStore::new();
        let mut rng = rand::rngs::mock::StepRng::new(1, 7);
        for (k, pad, expected) in [(3, Padding::Valid, 3), (3, Padding::SameZero, 5), (5, Padding::SameZero, 5), (1, Padding::SameZero, 5)] {
            let conv = Conv1DLayer::new(&mut store, &format!("c{k}{pad:?}"), 2, 4, k, pad, &mut rng).unwrap();
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let x = tape.constant(Tensor::full(vec![1, 5, 2], 0.1));
            let y = conv.forward(&mut tape, &bind, x).unwrap();
            assert_eq!(tape.value(y).shape(), &[1, expected, 4]);
            assert_eq!(conv.output_len(5), Some(expected));
        }
    }

    #[test]
    fn valid_too_short_is_shape_error() {
        let mut store = ParamStore::new();
        let mut rng = rand::rngs::mock::StepRng::new(1, 7);
        let conv = Conv1DLayer::new(&mut store, "c", 2, 4, 3, Padding::Valid, &mut rng).unwrap();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let x = tape.constant(Tensor::zeros(vec![1, 2, 2]));
        assert!(matches!(conv.forward(&mut tape, &bind, x), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn maxpool_cases() {
        let mut tape = Tape::new();
        let single = tape.constant(Tensor::new(vec![1, 1, 2], vec![4.0, -1.0]).unwrap());
        let p = maxpool1d(&mut tape, single, None).unwrap();
        assert_eq!(tape.value(p).data(), &[4.0, -1.0]);

        let seq = tape.param(Tensor::new(vec![1, 3, 1], vec![1.0, 5.0, 2.0]).unwrap());
        let p = maxpool1d(&mut tape, seq, None).unwrap();
        assert_eq!(tape.value(p).data(), &[5.0]);
        let masked = maxpool1d(&mut tape, seq, Some(&[true, false, true])).unwrap();
        assert_eq!(tape.value(masked).data(), &[2.0]);
        let s = tape.sum(masked).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(seq).data(), &[0.0, 0.0, 1.0]);
    }
}
