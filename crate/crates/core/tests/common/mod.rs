//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use rstar4d::net::layers::*;
use rstar4d::config::RunConfig;
use rstar4d::net::*;
use rstar4d::scanner::ScanGeometry;

pub const EPS: f64 = 1e-4;
pub const TOL: f64 = 1e-6;

pub fn rand_tensor(rng: &mut ChaCha8Rng, dims: [usize; 5]) -> Tensor5D<f64> {
    let n = dims.iter().product();
    Tensor5D::new(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU kinks and L1 ties stay out of reach of EPS.
pub fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, dims: [usize; 5]) -> Tensor5D<f64> {
    let mut t = rand_tensor(rng, dims);
    for v in &mut t.data {
        *v = v.signum() * (0.05 + v.abs());
    }
    t
}

pub fn inner(a: &Tensor5D<f64>, b: &Tensor5D<f64>) -> f64 {
    assert_eq!(a.dims, b.dims);
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

pub fn rand_param(rng: &mut ChaCha8Rng, p: &mut Param<f64>) {
    p.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
}

pub fn random_sep(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> SepConv4DBlock<f64> {
    let mut b = SepConv4DBlock::zeros("b", c_in, c_out);
    for p in b.params_mut() {
        rand_param(rng, p);
    }
    b
}

pub fn unbiased_sep(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> SepConv4DBlock<f64> {
    let mut b = random_sep(rng, c_in, c_out);
    for p in [&mut b.b_xy, &mut b.b_z, &mut b.b_t] {
        p.data.iter_mut().for_each(|v| *v = 0.0);
    }
    b
}

pub fn small_net(rng: &mut ChaCha8Rng, channels: Vec<usize>, residual: bool) -> Network<f64> {
    let mut net = Network::<f64>::build(NetConfig { in_channels: 2, channels, residual }, 11).unwrap();
    for p in net.params_mut() {
        if p.name.starts_with("head") || p.name.contains(".b_") {
            rand_param(rng, p);
            p.data.iter_mut().for_each(|v| *v *= 0.3);
        }
    }
    net
}

pub fn max_rel(a: &Tensor5D<f64>, b: &Tensor5D<f64>) -> f64 {
    let scale = b.data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-30);
    a.max_abs_diff(b) / scale
}

/// Composed kernel K[co][ci][kt][kz][ky][kx] = sum_a sum_c w_t[co][a][kt] w_z[a][c][kz] w_xy[c][ci][ky][kx],
/// applied by direct summation with circular t and zero padding elsewhere.
pub fn brute_force_4d(block: &SepConv4DBlock<f64>, x: &Tensor5D<f64>) -> Tensor5D<f64> {
    let [ci_n, nt, nz, ny, nx] = x.dims;
    let co_n = block.c_out;
    let mut k = vec![0.0; co_n * ci_n * 81];
    for co in 0..co_n {
        for ci in 0..ci_n {
            for kt in 0..3 {
                for kz in 0..3 {
                    for kyx in 0..9 {
                        let mut acc = 0.0;
                        for a in 0..co_n {
                            for c in 0..co_n {
                                acc += block.w_t.data[(co * co_n + a) * 3 + kt]
                                    * block.w_z.data[(a * co_n + c) * 3 + kz]
                                    * block.w_xy.data[(c * ci_n + ci) * 9 + kyx];
                            }
                        }
                        k[(((co * ci_n + ci) * 3 + kt) * 3 + kz) * 9 + kyx] = acc;
                    }
                }
            }
        }
    }
    let mut out = Tensor5D::zeros([co_n, nt, nz, ny, nx]);
    for co in 0..co_n {
        for t in 0..nt {
            for z in 0..nz {
                for y in 0..ny {
                    for xx in 0..nx {
                        let mut acc = 0.0;
                        for ci in 0..ci_n {
                            for kt in 0..3 {
                                let st = (t + nt + kt - 1) % nt;
                                for kz in 0..3 {
                                    let sz = z as isize + kz as isize - 1;
                                    for ky in 0..3 {
                                        let sy = y as isize + ky as isize - 1;
                                        for kx in 0..3 {
                                            let sx = xx as isize + kx as isize - 1;
                                            if sz < 0 || sy < 0 || sx < 0 || sz >= nz as isize || sy >= ny as isize || sx >= nx as isize {
                                                continue;
                                            }
                                            acc += k[(((co * ci_n + ci) * 3 + kt) * 3 + kz) * 9 + ky * 3 + kx]
                                                * x.data[x.index(ci, st, sz as usize, sy as usize, sx as usize)];
                                        }
                                    }
                                }
                            }
                        }
                        let i = out.index(co, t, z, y, xx);
                        out.data[i] = acc;
                    }
                }
            }
        }
    }
    out
}

/// Worst relative error of central differences of `loss` against `analytic` over
/// entries `idx`, as |fd - an| / max(|an|, |fd|, 1). An entry that misses TOL at
/// EPS is re-measured at EPS / 100, which separates a ReLU kink inside
/// `[x - EPS, x + EPS]` from a wrong gradient.
pub fn fd_error(base: &[f64], analytic: &[f64], idx: impl Iterator<Item = usize>, mut loss: impl FnMut(&[f64]) -> f64) -> f64 {
    let mut v = base.to_vec();
    let mut central = |v: &mut Vec<f64>, i: usize, h: f64| {
        v[i] = base[i] + h;
        let lp = loss(v);
        v[i] = base[i] - h;
        let lm = loss(v);
        v[i] = base[i];
        let fd = (lp - lm) / (2.0 * h);
        (fd - analytic[i]).abs() / analytic[i].abs().max(fd.abs()).max(1.0)
    };
    let mut worst = 0.0f64;
    for i in idx {
        let mut err = central(&mut v, i, EPS);
        if err >= TOL {
            err = central(&mut v, i, EPS / 100.0);
        }
        worst = worst.max(err);
    }
    worst
}

/// Finite-difference errors of every layer type's input and parameter gradients.
pub fn layer_gradient_errors() -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let x = rand_tensor(&mut rng, [2, 4, 3, 5, 5]);
    let wrap = |v: &[f64]| Tensor5D::new(x.dims, v.to_vec()).unwrap();
    let w: Vec<f64> = (0..3 * 2 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g = rand_tensor(&mut rng, [3, 4, 3, 5, 5]);
    let (mut gw, mut gb) = (vec![0.0; w.len()], vec![0.0; 3]);
    let gx = conv_xy_backward(&x, &g, &w, Some((&mut gw, &mut gb)));
    out.push(("conv_xy.x".into(), fd_error(&x.data, &gx.data, 0..x.len(), |v| inner(&conv_xy(&wrap(v), &w, &b, 3), &g))));
    out.push(("conv_xy.w".into(), fd_error(&w, &gw, 0..w.len(), |v| inner(&conv_xy(&x, v, &b, 3), &g))));
    out.push(("conv_xy.b".into(), fd_error(&b, &gb, 0..3, |v| inner(&conv_xy(&x, &w, v, 3), &g))));

    for axis in [Axis::Z, Axis::T] {
        let w: Vec<f64> = (0..3 * 2 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (mut gw, mut gb) = (vec![0.0; w.len()], vec![0.0; 3]);
        let gx = conv_axis_backward(&x, &g, &w, axis, Some((&mut gw, &mut gb)));
        let name = format!("conv_{axis:?}");
        out.push((format!("{name}.x"), fd_error(&x.data, &gx.data, 0..x.len(), |v| inner(&conv_axis(&wrap(v), &w, &b, 3, axis), &g))));
        out.push((format!("{name}.w"), fd_error(&w, &gw, 0..w.len(), |v| inner(&conv_axis(&x, v, &b, 3, axis), &g))));
        out.push((format!("{name}.b"), fd_error(&b, &gb, 0..3, |v| inner(&conv_axis(&x, &w, v, 3, axis), &g))));
    }

    for skip_z in [false, true] {
        let mut block = random_sep(&mut rng, 2, 2);
        block.skip_z = skip_z;
        let g = rand_tensor(&mut rng, [2, 4, 3, 5, 5]);
        let (_, cache) = block.forward(&x).unwrap();
        let gx = block.backward(&g, &cache).unwrap();
        let tag = if skip_z { "sep(skip_z)" } else { "sep" };
        out.push((format!("{tag}.x"), fd_error(&x.data, &gx.data, 0..x.len(), |v| inner(&block.apply(&wrap(v)).unwrap(), &g))));
        for k in 0..6 {
            let p = block.params()[k].clone();
            out.push((
                format!("{tag}.{}", p.name),
                fd_error(&p.data, &p.grad, 0..p.len(), |v| {
                    let mut b = block.clone();
                    b.params_mut()[k].data.copy_from_slice(v);
                    inner(&b.apply(&x).unwrap(), &g)
                }),
            ));
        }
    }

    let mut iso = Iso4DConvBlock::<f64>::zeros("iso", 2, 2);
    rand_param(&mut rng, &mut iso.w);
    rand_param(&mut rng, &mut iso.b);
    let g2 = rand_tensor(&mut rng, [2, 4, 3, 5, 5]);
    let gx = iso.backward(&x, &g2).unwrap();
    out.push(("iso.x".into(), fd_error(&x.data, &gx.data, 0..x.len(), |v| inner(&iso.forward(&wrap(v)).unwrap(), &g2))));
    let (iw, igw) = (iso.w.data.clone(), iso.w.grad.clone());
    out.push((
        "iso.w".into(),
        fd_error(&iw, &igw, (0..iw.len()).step_by(7), |v| {
            let mut b = iso.clone();
            b.w.data.copy_from_slice(v);
            inner(&b.forward(&x).unwrap(), &g2)
        }),
    ));
    let (ib, igb) = (iso.b.data.clone(), iso.b.grad.clone());
    out.push((
        "iso.b".into(),
        fd_error(&ib, &igb, 0..2, |v| {
            let mut b = iso.clone();
            b.b.data.copy_from_slice(v);
            inner(&b.forward(&x).unwrap(), &g2)
        }),
    ));

    let xp = rand_tensor_off_zero(&mut rng, [2, 4, 3, 4, 4]);
    let wrapp = |v: &[f64]| Tensor5D::new(xp.dims, v.to_vec()).unwrap();
    let w1: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let g3 = rand_tensor(&mut rng, [3, 4, 3, 4, 4]);
    let (mut gw, mut gb) = (vec![0.0; 6], vec![0.0; 3]);
    let gx = conv1x1_backward(&xp, &g3, &w1, &mut gw, &mut gb);
    out.push(("conv1x1.x".into(), fd_error(&xp.data, &gx.data, 0..xp.len(), |v| inner(&conv1x1(&wrapp(v), &w1, &b, 3), &g3))));
    out.push(("conv1x1.w".into(), fd_error(&w1, &gw, 0..6, |v| inner(&conv1x1(&xp, v, &b, 3), &g3))));
    out.push(("conv1x1.b".into(), fd_error(&b, &gb, 0..3, |v| inner(&conv1x1(&xp, &w1, v, 3), &g3))));

    let gr_up = rand_tensor(&mut rng, xp.dims);
    let gr = relu_backward(&relu(xp.clone()), &gr_up);
    out.push(("relu.x".into(), fd_error(&xp.data, &gr.data, 0..xp.len(), |v| inner(&relu(wrapp(v)), &gr_up))));

    let x4 = rand_tensor(&mut rng, [2, 2, 4, 4, 4]);
    let wrap4 = |v: &[f64]| Tensor5D::new(x4.dims, v.to_vec()).unwrap();
    for pz in [false, true] {
        let pooled = avg_pool(&x4, pz);
        let gp = rand_tensor(&mut rng, pooled.dims);
        let gi = avg_pool_backward(&gp, x4.dims, pz);
        out.push((format!("avg_pool(z={pz}).x"), fd_error(&x4.data, &gi.data, 0..x4.len(), |v| inner(&avg_pool(&wrap4(v), pz), &gp))));
        let gu = rand_tensor(&mut rng, x4.dims);
        let gi = upsample_backward(&gu, pooled.dims, pz);
        let wrapd = |v: &[f64]| Tensor5D::new(pooled.dims, v.to_vec()).unwrap();
        out.push((
            format!("upsample(z={pz}).x"),
            fd_error(&pooled.data, &gi.data, 0..pooled.len(), |v| inner(&upsample(&wrapd(v), pz, x4.dims), &gu)),
        ));
    }

    let target = rand_tensor(&mut rng, [1, 4, 3, 4, 4]);
    let mut pred = rand_tensor(&mut rng, target.dims);
    for (p, t) in pred.data.iter_mut().zip(&target.data) {
        if (*p - t).abs() < 0.01 {
            *p += 0.05;
        }
    }
    let (_, gl) = l1_loss(&pred, &target).unwrap();
    out.push((
        "l1.pred".into(),
        fd_error(&pred.data, &gl.data, 0..pred.len(), |v| l1_loss(&Tensor5D::new(target.dims, v.to_vec()).unwrap(), &target).unwrap().0),
    ));

    for (residual, z) in [(true, 3), (false, 4)] {
        let mut net = small_net(&mut rng, vec![2, 3], residual);
        let xn = rand_tensor(&mut rng, [2, 4, z, 4, 4]);
        let gn = rand_tensor(&mut rng, [1, 4, z, 4, 4]);
        net.zero_grad();
        let (_, cache) = net.forward_cached(&xn).unwrap();
        let gx = net.backward(&gn, &cache).unwrap();
        out.push((
            format!("net(z={z}).x"),
            fd_error(&xn.data, &gx.data, 0..xn.len(), |v| inner(&net.forward(&Tensor5D::new(xn.dims, v.to_vec()).unwrap()).unwrap(), &gn)),
        ));
        for k in 0..net.params().len() {
            let p = net.params()[k].clone();
            out.push((
                format!("net(z={z}).{}", p.name),
                fd_error(&p.data, &p.grad, (0..p.len()).step_by(5), |v| {
                    let mut m = net.clone();
                    m.params_mut()[k].data.copy_from_slice(v);
                    inner(&m.forward(&xn).unwrap(), &gn)
                }),
            ));
        }
    }
    out
}

/// Worst separable-vs-composed-isotropic relative difference over 24 random cases.
pub fn separable_vs_isotropic_worst() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    for i in 0..24 {
        let (ci, co) = (1 + i % 3, 1 + (i / 3) % 3);
        let dims = [ci, 1 + i % 4, 1 + i % 3, 2 + i % 4, 3 + i % 3];
        let x = rand_tensor(&mut rng, dims);
        let mut block = unbiased_sep(&mut rng, ci, co);
        block.skip_z = i % 5 == 0;
        let iso = Iso4DConvBlock::from_separable(&block);
        worst = worst.max(max_rel(&block.apply(&x).unwrap(), &iso.forward(&x).unwrap()));
    }
    worst
}

/// A run small enough for every command to finish in seconds.
pub fn tiny_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    let geometry = ScanGeometry { detector_channels: [64, 48], ..ScanGeometry::desk() };
    cfg.output_dir = out.to_path_buf();
    cfg.geometry = geometry;
    cfg.grid.dims = [16, 32, 32];
    cfg.grid.spacing = [10.0; 3];
    cfg.rsa.flow.levels = 2;
    cfg.rsa.trajectory_stride = 4;
    cfg.rsa.streak_slices = [4, 12];
    cfg.network.channels = vec![2, 4];
    cfg.training.stage1_epochs = 1;
    cfg.training.stage2_epochs = 1;
    cfg.training.stage2_steps = 2;
    cfg.training.block_shapes = vec![[4, 16, 16]];
    cfg.dataset.dims = [16, 32, 32];
    cfg.dataset.spacing = [10.0; 3];
    cfg.dataset.geometry = geometry;
    cfg.dataset.train_variants = 1;
    cfg.dataset.signals_per_variant = 1;
    cfg.dataset.validation = 1;
    cfg.dataset.test = 1;
    cfg
}
