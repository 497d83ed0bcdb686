use nalgebra::{DMatrix, DVector};

use super::{check_blowup, DataSpec, MomentGrid, SimConfig};
use crate::error::Result;
use crate::symquad;

/// Offsets of the blocks inside the augmented moment state.
struct Layout {
    m: usize,
    nd: usize,
    mean: usize,
    second: usize,
    x_d: usize,
    z: usize,
    cum_s: usize,
    cum_w: usize,
    cum_xd_chi: usize,
    len: usize,
}

impl Layout {
    fn new(n: usize, m: usize, nd: usize) -> Self {
        let mean = 0;
        let second = mean + n;
        let x_d = second + n * n;
        let z = x_d + nd;
        let cum_s = z + nd * n;
        let cum_w = cum_s + n * n;
        let cum_xd_chi = cum_w + n * m;
        let len = cum_xd_chi + nd * n;
        Self { m, nd, mean, second, x_d, z, cum_s, cum_w, cum_xd_chi, len }
    }
}

/// Exact first and second moments of the discounted data, integrated by RK4.
///
/// The mean `m`, the second moment `G`, the reference `x_d`, the product
/// `z = E[x_d ⊗ chi]` and the running integrals are advanced as one linear
/// system, so the increments of `G` and of `∫G` come from the same stages.
/// The model-based regressor identities then hold to rounding error.
pub fn propagate_moments_exact(spec: &DataSpec<'_>, cfg: &SimConfig) -> Result<MomentGrid> {
    cfg.validate()?;
    spec.check()?;
    let d = spec.dims();
    let lay = Layout::new(d.n, d.m, d.nd);
    let sys = spec.system;
    let n = d.n;
    let a0 = sys.a() - DMatrix::identity(n, n) * spec.discount;
    let (b, c, dm) = (sys.b(), sys.c(), sys.d());
    let a_d = spec.reference.a_d();
    let big = a_d.kronecker(&DMatrix::<f64>::identity(n, n))
        + DMatrix::<f64>::identity(d.nd, d.nd).kronecker(&a0);

    let rate = spec.discount;
    let input = spec.input;
    let v_at = |t: f64| -> DVector<f64> { input.eval(t) * (-rate * t).exp() };

    let f = |t: f64, y: &DVector<f64>| -> DVector<f64> {
        let v = v_at(t);
        let mean = y.rows(lay.mean, n).into_owned();
        let g = DMatrix::from_column_slice(n, n, y.rows(lay.second, n * n).as_slice());
        let xd = y.rows(lay.x_d, lay.nd).into_owned();
        let z = y.rows(lay.z, lay.nd * n).into_owned();
        let bv = b * &v;
        let dv = dm * &v;
        let cm = c * &mean;
        let mut out = DVector::zeros(lay.len);
        out.rows_mut(lay.mean, n).copy_from(&(&a0 * &mean + &bv));
        let dg = &a0 * &g + &g * a0.transpose() + c * &g * c.transpose()
            + &bv * mean.transpose()
            + &mean * bv.transpose()
            + &cm * dv.transpose()
            + &dv * cm.transpose()
            + &dv * dv.transpose();
        out.rows_mut(lay.second, n * n).copy_from_slice(dg.as_slice());
        out.rows_mut(lay.x_d, lay.nd).copy_from(&(a_d * &xd));
        out.rows_mut(lay.z, lay.nd * n).copy_from(&(&big * &z + symquad::kron_vec(&xd, &bv)));
        out.rows_mut(lay.cum_s, n * n).copy_from_slice(g.as_slice());
        let w = &mean * v.transpose();
        out.rows_mut(lay.cum_w, n * lay.m).copy_from_slice(w.as_slice());
        out.rows_mut(lay.cum_xd_chi, lay.nd * n).copy_from(&z);
        out
    };

    let mut y = DVector::zeros(lay.len);
    let x0 = spec.x0;
    y.rows_mut(lay.mean, n).copy_from(x0);
    let g0 = x0 * x0.transpose();
    y.rows_mut(lay.second, n * n).copy_from_slice(g0.as_slice());
    y.rows_mut(lay.x_d, lay.nd).copy_from(spec.reference.x_d0());
    y.rows_mut(lay.z, lay.nd * n).copy_from(&symquad::kron_vec(spec.reference.x_d0(), x0));

    let len = cfg.grid_len();
    let per = cfg.steps_per_sample();
    let steps = cfg.total_steps();
    let h = cfg.h;
    let mut mean = DMatrix::zeros(n, len);
    let mut second = DMatrix::zeros(n * n, len);
    let mut xd_chi = DMatrix::zeros(lay.nd * n, len);
    let mut cum_s = DMatrix::zeros(n * n, len);
    let mut cum_w = DMatrix::zeros(n * lay.m, len);
    let mut cum_xd_chi = DMatrix::zeros(lay.nd * n, len);
    let mut x_d_exact = DMatrix::zeros(lay.nd, len);
    for k in 0..=steps {
        if k % per == 0 {
            let s = k / per;
            mean.set_column(s, &y.rows(lay.mean, n));
            second.set_column(s, &y.rows(lay.second, n * n));
            x_d_exact.set_column(s, &y.rows(lay.x_d, lay.nd));
            xd_chi.set_column(s, &y.rows(lay.z, lay.nd * n));
            cum_s.set_column(s, &y.rows(lay.cum_s, n * n));
            cum_w.set_column(s, &y.rows(lay.cum_w, n * lay.m));
            cum_xd_chi.set_column(s, &y.rows(lay.cum_xd_chi, lay.nd * n));
        }
        if k == steps {
            break;
        }
        y = super::rk4_step(&f, k as f64 * h, &y, h);
        check_blowup(y.rows(lay.mean, n).as_slice(), 0, (k + 1) as f64 * h)?;
    }

    // The deterministic input integrals need the same stage nodes as the
    // moment states, i.e. Simpson's rule per step.
    let (input_cols, _, cum_v, cum_xd_v) = simpson_columns(spec, cfg, &v_at)?;
    Ok(MomentGrid {
        dims: d,
        sample_period: cfg.sample_period,
        n_paths: 0,
        mean,
        second,
        second_var: DMatrix::zeros(n * n, 0),
        input: input_cols,
        x_d: x_d_exact,
        xd_chi,
        cum_s,
        cum_w,
        cum_v,
        cum_xd_chi,
        cum_xd_v,
    })
}

/// `v`, `x_d`, `∫ v v'` and `∫ x_d ⊗ v` advanced with the RK4 stage nodes.
fn simpson_columns(
    spec: &DataSpec<'_>,
    cfg: &SimConfig,
    v_at: &dyn Fn(f64) -> DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let d = spec.dims();
    let (m, nd) = (d.m, d.nd);
    let a_d = spec.reference.a_d();
    // state: [x_d; ∫ v v'; ∫ x_d ⊗ v]
    let len_state = nd + m * m + nd * m;
    let f = |t: f64, y: &DVector<f64>| -> DVector<f64> {
        let v = v_at(t);
        let xd = y.rows(0, nd).into_owned();
        let mut out = DVector::zeros(len_state);
        out.rows_mut(0, nd).copy_from(&(a_d * &xd));
        let vv = &v * v.transpose();
        out.rows_mut(nd, m * m).copy_from_slice(vv.as_slice());
        out.rows_mut(nd + m * m, nd * m).copy_from(&symquad::kron_vec(&xd, &v));
        out
    };
    let mut y = DVector::zeros(len_state);
    y.rows_mut(0, nd).copy_from(spec.reference.x_d0());
    let len = cfg.grid_len();
    let per = cfg.steps_per_sample();
    let steps = cfg.total_steps();
    let h = cfg.h;
    let mut input = DMatrix::zeros(m, len);
    let mut x_d = DMatrix::zeros(nd, len);
    let mut cum_v = DMatrix::zeros(m * m, len);
    let mut cum_xd_v = DMatrix::zeros(nd * m, len);
    for k in 0..=steps {
        if k % per == 0 {
            let s = k / per;
            input.set_column(s, &v_at(k as f64 * h));
            x_d.set_column(s, &y.rows(0, nd));
            cum_v.set_column(s, &y.rows(nd, m * m));
            cum_xd_v.set_column(s, &y.rows(nd + m * m, nd * m));
        }
        if k == steps {
            break;
        }
        y = super::rk4_step(&f, k as f64 * h, &y, h);
    }
    Ok((input, x_d, cum_v, cum_xd_v))
}
