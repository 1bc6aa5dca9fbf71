use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Real;

/// Compares the tape's gradient of the scalar `loss` against central differences for every
/// named leaf, after binding `point`. Returns the maximum of
/// `|analytic − numeric| / (|numeric| + 1e-8)`.
pub fn grad_check<T: Real>(tape: &mut Tape<T>, loss: Var, point: &[(&str, Grid<T>)], eps: T) -> Result<T> {
    if eps <= T::zero() {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    if tape.shape(loss).iter().product::<usize>() != 1 {
        return Err(Error::InvalidArgument("grad_check needs a scalar loss".into()));
    }
    for (name, g) in point {
        tape.bind(name, g.clone())?;
    }
    tape.replay()?;
    let analytic = tape.grad(loss)?.named();
    let mut worst = T::zero();
    for (name, grad) in &analytic {
        let base = tape.value(tape.leaf(name).expect("named leaf"))?.clone();
        for i in 0..base.len() {
            let mut probe = base.clone();
            probe.data_mut()[i] = base.data()[i] + eps;
            tape.bind(name, probe.clone())?;
            tape.replay()?;
            let up = tape.item(loss)?;
            probe.data_mut()[i] = base.data()[i] - eps;
            tape.bind(name, probe)?;
            tape.replay()?;
            let down = tape.item(loss)?;
            let numeric = (up - down) / (eps + eps);
            let err = (grad.data()[i] - numeric).abs() / (numeric.abs() + T::lit(1e-8));
            worst = worst.max(err);
        }
        tape.bind(name, base)?;
    }
    tape.replay()?;
    Ok(worst)
}

/// Reduces `x` to a scalar with fixed random weights so every element's gradient is exercised.
pub fn weighted_sum<T: Real>(tape: &mut Tape<T>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(Grid::from_fn(&shape, |_| T::lit(rng.gen_range(0.5..1.5))));
    let p = tape.mul(x, w)?;
    tape.sum(p)
}
