use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{check_blowup, matvec, matvec_add, DataSpec, EnsembleDataset, GridDims, MomentGrid, SimConfig};
use crate::error::Result;

const CHUNK: usize = 50;

/// Inputs shared by every path, tabulated on the integration grid.
pub(super) struct SharedTables {
    pub u: DMatrix<f64>,
    pub x_d: DMatrix<f64>,
    pub discount: Vec<f64>,
}

impl SharedTables {
    pub fn build(spec: &DataSpec<'_>, cfg: &SimConfig) -> Result<Self> {
        let steps = cfg.total_steps();
        let h = cfg.h;
        let m = spec.system.m();
        let mut u = DMatrix::zeros(m, steps + 1);
        for k in 0..=steps {
            spec.input.eval_into(k as f64 * h, u.column_mut(k).as_mut_slice());
        }
        let x_d = super::simulate_ode(spec.reference.a_d(), None, spec.reference.x_d0(), h, steps as f64 * h)?.states;
        let discount = (0..=steps).map(|k| (-spec.discount * k as f64 * h).exp()).collect();
        Ok(Self { u, x_d, discount })
    }
}

struct Sums {
    mean: DMatrix<f64>,
    second: DMatrix<f64>,
    second_sq: DMatrix<f64>,
    xd_chi: DMatrix<f64>,
    cum_s: DMatrix<f64>,
    cum_w: DMatrix<f64>,
    cum_xd_chi: DMatrix<f64>,
}

impl Sums {
    fn zeros(d: GridDims, len: usize) -> Self {
        let z = |r: usize| DMatrix::zeros(r, len);
        Self {
            mean: z(d.n),
            second: z(d.n * d.n),
            second_sq: z(d.n * d.n),
            xd_chi: z(d.nd * d.n),
            cum_s: z(d.n * d.n),
            cum_w: z(d.n * d.m),
            cum_xd_chi: z(d.nd * d.n),
        }
    }

    fn add(&mut self, other: &Sums) {
        self.mean += &other.mean;
        self.second += &other.second;
        self.second_sq += &other.second_sq;
        self.xd_chi += &other.xd_chi;
        self.cum_s += &other.cum_s;
        self.cum_w += &other.cum_w;
        self.cum_xd_chi += &other.cum_xd_chi;
    }
}

/// Per-step products `vec(chi chi')`, `vec(chi v')`, `x_d ⊗ chi`.
fn products(chi: &[f64], v: &[f64], xd: &[f64], g: &mut [f64], w: &mut [f64], z: &mut [f64]) {
    let n = chi.len();
    for j in 0..n {
        for i in 0..n {
            g[j * n + i] = chi[i] * chi[j];
        }
    }
    for (j, vj) in v.iter().enumerate() {
        for i in 0..n {
            w[j * n + i] = chi[i] * vj;
        }
    }
    for (a, xa) in xd.iter().enumerate() {
        for i in 0..n {
            z[a * n + i] = xa * chi[i];
        }
    }
}

fn simulate_chunk(spec: &DataSpec<'_>, cfg: &SimConfig, tables: &SharedTables, paths: std::ops::Range<usize>) -> Result<Sums> {
    let d = spec.dims();
    let (n, m, nd) = (d.n, d.m, d.nd);
    let len = cfg.grid_len();
    let per = cfg.steps_per_sample();
    let steps = cfg.total_steps();
    let h = cfg.h;
    let sqrt_h = h.sqrt();
    let sys = spec.system;
    let mut sums = Sums::zeros(d, len);

    let mut x = vec![0.0; n];
    let mut chi = vec![0.0; n];
    let mut v = vec![0.0; m];
    let mut drift = vec![0.0; n];
    let mut diff = vec![0.0; n];
    let mut g = vec![0.0; n * n];
    let mut w = vec![0.0; n * m];
    let mut z = vec![0.0; nd * n];
    let mut g_prev = g.clone();
    let mut w_prev = w.clone();
    let mut z_prev = z.clone();
    let mut cs = vec![0.0; n * n];
    let mut cw = vec![0.0; n * m];
    let mut cz = vec![0.0; nd * n];

    for p in paths {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.base_seed.wrapping_add(p as u64));
        x.copy_from_slice(spec.x0.as_slice());
        cs.iter_mut().for_each(|c| *c = 0.0);
        cw.iter_mut().for_each(|c| *c = 0.0);
        cz.iter_mut().for_each(|c| *c = 0.0);
        for k in 0..=steps {
            let e = tables.discount[k];
            let u = tables.u.column(k);
            for i in 0..n {
                chi[i] = e * x[i];
            }
            for i in 0..m {
                v[i] = e * u[i];
            }
            products(&chi, &v, tables.x_d.column(k).as_slice(), &mut g, &mut w, &mut z);
            if k > 0 {
                let half = 0.5 * h;
                for i in 0..g.len() {
                    cs[i] += half * (g_prev[i] + g[i]);
                }
                for i in 0..w.len() {
                    cw[i] += half * (w_prev[i] + w[i]);
                }
                for i in 0..z.len() {
                    cz[i] += half * (z_prev[i] + z[i]);
                }
            }
            if k % per == 0 {
                let s = k / per;
                let add = |dst: &mut DMatrix<f64>, src: &[f64]| {
                    for (o, v) in dst.column_mut(s).iter_mut().zip(src) {
                        *o += v;
                    }
                };
                add(&mut sums.mean, &chi);
                add(&mut sums.second, &g);
                let sq: Vec<f64> = g.iter().map(|v| v * v).collect();
                add(&mut sums.second_sq, &sq);
                add(&mut sums.xd_chi, &z);
                add(&mut sums.cum_s, &cs);
                add(&mut sums.cum_w, &cw);
                add(&mut sums.cum_xd_chi, &cz);
            }
            if k == steps {
                break;
            }
            g_prev.copy_from_slice(&g);
            w_prev.copy_from_slice(&w);
            z_prev.copy_from_slice(&z);

            matvec(&mut drift, sys.a(), &x);
            matvec_add(&mut drift, sys.b(), u.as_slice(), 1.0);
            matvec(&mut diff, sys.c(), &x);
            matvec_add(&mut diff, sys.d(), u.as_slice(), 1.0);
            let xi: f64 = rng.sample(StandardNormal);
            let dw = sqrt_h * xi;
            for i in 0..n {
                x[i] += drift[i] * h + diff[i] * dw;
            }
            check_blowup(&x, p, (k + 1) as f64 * h)?;
        }
    }
    Ok(sums)
}

/// Deterministic columns: `v`, `x_d`, `∫ v v'` and `∫ x_d ⊗ v` on the sample grid.
pub(super) fn deterministic_columns(
    d: GridDims,
    cfg: &SimConfig,
    tables: &SharedTables,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let len = cfg.grid_len();
    let per = cfg.steps_per_sample();
    let steps = cfg.total_steps();
    let h = cfg.h;
    let mut input = DMatrix::zeros(d.m, len);
    let mut x_d = DMatrix::zeros(d.nd, len);
    let mut cum_v = DMatrix::zeros(d.m * d.m, len);
    let mut cum_xd_v = DMatrix::zeros(d.nd * d.m, len);
    let mut cv = vec![0.0; d.m * d.m];
    let mut cxv = vec![0.0; d.nd * d.m];
    let mut prev_vv = cv.clone();
    let mut prev_xv = cxv.clone();
    let mut vv = cv.clone();
    let mut xv = cxv.clone();
    for k in 0..=steps {
        let e = tables.discount[k];
        let v: Vec<f64> = tables.u.column(k).iter().map(|u| e * u).collect();
        let xd = tables.x_d.column(k);
        for j in 0..d.m {
            for i in 0..d.m {
                vv[j * d.m + i] = v[i] * v[j];
            }
        }
        for a in 0..d.nd {
            for i in 0..d.m {
                xv[a * d.m + i] = xd[a] * v[i];
            }
        }
        if k > 0 {
            for i in 0..vv.len() {
                cv[i] += 0.5 * h * (prev_vv[i] + vv[i]);
            }
            for i in 0..xv.len() {
                cxv[i] += 0.5 * h * (prev_xv[i] + xv[i]);
            }
        }
        if k % per == 0 {
            let s = k / per;
            input.column_mut(s).copy_from_slice(&v);
            x_d.set_column(s, &xd);
            cum_v.column_mut(s).copy_from_slice(&cv);
            cum_xd_v.column_mut(s).copy_from_slice(&cxv);
        }
        prev_vv.copy_from_slice(&vv);
        prev_xv.copy_from_slice(&xv);
    }
    (input, x_d, cum_v, cum_xd_v)
}

/// Monte Carlo estimate of the moment grid.
///
/// Path `p` draws its Brownian increments from seed `base_seed + p`. Paths are
/// simulated in fixed chunks and the chunk sums are reduced in index order, so
/// the result does not depend on the number of worker threads.
pub fn run_ensemble(spec: &DataSpec<'_>, cfg: &SimConfig) -> Result<EnsembleDataset> {
    cfg.validate()?;
    spec.check()?;
    let d = spec.dims();
    let tables = SharedTables::build(spec, cfg)?;
    let chunks: Vec<std::ops::Range<usize>> = (0..cfg.n_paths)
        .step_by(CHUNK)
        .map(|lo| lo..(lo + CHUNK).min(cfg.n_paths))
        .collect();
    let partial: Vec<Result<Sums>> = chunks
        .into_par_iter()
        .map(|r| simulate_chunk(spec, cfg, &tables, r))
        .collect();
    let len = cfg.grid_len();
    let mut total = Sums::zeros(d, len);
    for part in partial {
        total.add(&part?);
    }
    let scale = 1.0 / cfg.n_paths as f64;
    let mean_sq = &total.second_sq * scale;
    let second = &total.second * scale;
    let second_var = if cfg.n_paths > 1 {
        (mean_sq - second.component_mul(&second)) * (cfg.n_paths as f64 / (cfg.n_paths - 1) as f64)
    } else {
        DMatrix::zeros(d.n * d.n, len)
    };
    let (input, x_d, cum_v, cum_xd_v) = deterministic_columns(d, cfg, &tables);
    let grid = MomentGrid {
        dims: d,
        sample_period: cfg.sample_period,
        n_paths: cfg.n_paths,
        mean: &total.mean * scale,
        second,
        second_var,
        input,
        x_d,
        xd_chi: &total.xd_chi * scale,
        cum_s: &total.cum_s * scale,
        cum_w: &total.cum_w * scale,
        cum_v,
        cum_xd_chi: &total.cum_xd_chi * scale,
        cum_xd_v,
    };
    Ok(EnsembleDataset {
        config: cfg.clone(),
        plant_hash: spec.system.fingerprint(),
        discount: spec.discount,
        x0: spec.x0.clone(),
        input: spec.input.clone(),
        created_at: super::store::timestamp(),
        grid,
    })
}
