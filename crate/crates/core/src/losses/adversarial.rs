use muralfill_autograd::{Real, Var};

use crate::error::{Error, Result};

/// Hinge discriminator loss `mean(relu(1 − real)) + mean(relu(1 + fake))`.
pub fn d_hinge<T: Real>(d_real: &Var<T>, d_fake: &Var<T>) -> Var<T> {
    let one = T::one();
    let r = d_real.neg().add_scalar(one).relu().mean();
    let f = d_fake.add_scalar(one).relu().mean();
    r.add(&f).expect("scalars broadcast")
}

/// Hinge generator loss `−mean(fake)`.
pub fn g_hinge<T: Real>(d_fake: &Var<T>) -> Var<T> {
    d_fake.mean().neg()
}

/// `(g_term, d_term)` on the same pair of logit maps.
pub fn adversarial_losses<T: Real>(d_real: &Var<T>, d_fake: &Var<T>) -> Result<(Var<T>, Var<T>)> {
    if d_real.shape() != d_fake.shape() {
        return Err(Error::Shape(format!(
            "logit maps differ: real {:?}, fake {:?}",
            d_real.shape(),
            d_fake.shape()
        )));
    }
    Ok((g_hinge(d_fake), d_hinge(d_real, d_fake)))
}
