//! Dense `f64` matrices, a recording autodiff tape and a finite-difference
//! gradient checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::softmax_into;

use crate::error::{dim_err, Result};

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.matmul(b)
}

/// Numerically stable softmax along `axis` (0: down columns, 1: along rows).
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    match axis {
        1 => {
            if x.cols() == 0 {
                return dim_err("softmax over an empty axis");
            }
            let mut out = Tensor::zeros(x.rows(), x.cols());
            let n = x.cols();
            for i in 0..x.rows() {
                softmax_into(x.row(i), &mut out.data_mut()[i * n..(i + 1) * n]);
            }
            out.ensure_finite("softmax")?;
            Ok(out)
        }
        0 => Ok(softmax(&x.transpose(), 1)?.transpose()),
        _ => dim_err(format!("softmax axis {axis} on a matrix")),
    }
}
