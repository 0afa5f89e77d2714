use crate::error::{Error, Result};
use crate::tensor::{Reduction, Scalar, Tape, Var};

/// Spatial mean per channel: `[B, C, H, W] -> [B, C]`.
pub fn global_average_pool<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let xs = tape.shape(x);
    if xs.len() != 4 || xs[2] == 0 || xs[3] == 0 {
        return Err(Error::Domain {
            op: "global_average_pool",
            detail: format!("expected non-empty [B, C, H, W], got {xs:?}"),
        });
    }
    tape.reduce(x, &[2, 3], Reduction::Mean)
}
