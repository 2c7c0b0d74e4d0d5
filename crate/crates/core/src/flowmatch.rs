//! Linear-interpolant flow matching: targets, loss, guidance and Euler sampling.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// One point on the straight path between noise `x0` and data `x1`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolantSample {
    pub x_t: Tensor,
    pub t: f32,
    pub u_target: Tensor,
}

/// A batch of interpolants with one time per leading-dimension row.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolantBatch {
    pub x_t: Tensor,
    pub t: Vec<f32>,
    pub u_target: Tensor,
}

/// A time-dependent velocity field `v(x, t, cond)`.
///
/// `cond = None` is the plain unconditional field; guided integration passes
/// the guidance's null condition explicitly.
pub trait VelocityField {
    type Cond;

    fn velocity(&self, x: &Tensor, t: f32, cond: Option<&Self::Cond>) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor, f32) -> Result<Tensor>,
{
    type Cond = ();

    fn velocity(&self, x: &Tensor, t: f32, _cond: Option<&()>) -> Result<Tensor> {
        self(x, t)
    }
}

/// Classifier-free guidance settings.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSpec<C> {
    pub scale: f32,
    pub null_cond: C,
}

/// Uniform time on `[0, 1)`.
pub fn sample_time<R: Rng + ?Sized>(rng: &mut R) -> f32 {
    rng.random::<f32>()
}

/// `x_t = t·x1 + (1−t)·x0`, `u = x1 − x0`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f32) -> Result<InterpolantSample> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("interpolation time {} outside [0, 1]", t)));
    }
    let x_t = x0.zip_map(x1, |a, b| t * b + (1.0 - t) * a)?;
    let u_target = x0.zip_map(x1, |a, b| b - a)?;
    Ok(InterpolantSample { x_t, t, u_target })
}

/// Row-wise [`interpolate`] with one time per leading row.
pub fn interpolate_batch(x0: &Tensor, x1: &Tensor, t: &[f32]) -> Result<InterpolantBatch> {
    x0.expect_same_shape(x1)?;
    if t.len() != x0.dim0() {
        return Err(Error::invalid(format!(
            "{} times for {} rows",
            t.len(),
            x0.dim0()
        )));
    }
    if let Some(bad) = t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::invalid(format!("interpolation time {} outside [0, 1]", bad)));
    }
    let w = x0.row_len();
    let mut xt = Vec::with_capacity(x0.numel());
    for (r, &ti) in t.iter().enumerate() {
        for (&a, &b) in x0.row(r).iter().zip(x1.row(r)) {
            xt.push(ti * b + (1.0 - ti) * a);
        }
    }
    debug_assert_eq!(xt.len(), t.len() * w);
    Ok(InterpolantBatch {
        x_t: Tensor::from_vec(x0.shape(), xt)?,
        t: t.to_vec(),
        u_target: x0.zip_map(x1, |a, b| b - a)?,
    })
}

/// Mean squared error over all elements.
pub fn fm_loss(v_pred: &Tensor, u_target: &Tensor) -> Result<f32> {
    v_pred.expect_same_shape(u_target)?;
    let n = v_pred.numel().max(1);
    let s: f64 = v_pred
        .data()
        .iter()
        .zip(u_target.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok((s / n as f64) as f32)
}

/// [`fm_loss`] together with its gradient with respect to `v_pred`.
pub fn fm_loss_with_grad(v_pred: &Tensor, u_target: &Tensor) -> Result<(f32, Tensor)> {
    let mut g = Graph::new();
    let v = g.leaf(v_pred.clone(), true);
    let l = g.mse_loss(v, u_target)?;
    let mut grads = g.backward(l)?;
    let grad = grads.take(v).expect("leaf is trainable");
    Ok((g.value(l).item(), grad))
}

/// Guided velocity `v_uncond + w·(v_cond − v_uncond)`.
///
/// Evaluated as `w·v_cond + (1−w)·v_uncond`, with `w = 1` and `w = 0`
/// returning the respective branch unchanged.
pub fn cfg_velocity(v_cond: &Tensor, v_uncond: &Tensor, w: f32) -> Result<Tensor> {
    v_cond.expect_same_shape(v_uncond)?;
    if !(w >= 0.0) {
        return Err(Error::invalid(format!("guidance scale {} must be >= 0", w)));
    }
    if w == 1.0 {
        return Ok(v_cond.clone());
    }
    if w == 0.0 {
        return Ok(v_uncond.clone());
    }
    v_cond.zip_map(v_uncond, |c, u| w * c + (1.0 - w) * u)
}

/// Forward Euler from `t = 0` to `t = 1` on the grid `t_k = k/steps`.
pub fn euler_integrate<F: VelocityField>(
    field: &F,
    x0: &Tensor,
    steps: usize,
    cond: Option<&F::Cond>,
    guidance: Option<&GuidanceSpec<F::Cond>>,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::invalid("integration needs at least one step"));
    }
    let dt = 1.0 / steps as f32;
    let mut x = x0.clone();
    for k in 0..steps {
        let t = k as f32 / steps as f32;
        let v = match guidance {
            Some(gs) => {
                let vc = field.velocity(&x, t, cond)?;
                check_shape(&vc, &x)?;
                if gs.scale == 1.0 {
                    vc
                } else {
                    let vu = field.velocity(&x, t, Some(&gs.null_cond))?;
                    check_shape(&vu, &x)?;
                    cfg_velocity(&vc, &vu, gs.scale)?
                }
            }
            None => {
                let v = field.velocity(&x, t, cond)?;
                check_shape(&v, &x)?;
                v
            }
        };
        for (xi, &vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += dt * vi;
        }
    }
    Ok(x)
}

fn check_shape(v: &Tensor, x: &Tensor) -> Result<()> {
    if v.shape() != x.shape() {
        return Err(Error::Integration(format!(
            "velocity shape {:?} does not match state shape {:?}",
            v.shape(),
            x.shape()
        )));
    }
    Ok(())
}
