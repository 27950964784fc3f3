use std::rc::Rc;

use founddiff::dadiff::*;
use founddiff::numcore::{grad_check, selective_scan, Bound, ParamStore, Rng, ScanInputs, Tape, Tensor, Var, DEFAULT_EPS};
use founddiff::verify::randomize;

fn dims(c: usize) -> DacbDims {
    DacbDims { channels: c, t_dim: 4, d_e: 3, n_state: 2, scan_directions: 4 }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn cond<'t>(tape: &'t Tape, seed: u64) -> Condition<'t> {
    let mut rng = Rng::new(seed);
    Condition {
        t_emb: tape.constant(vec![1, 4], rng.normals(4)).unwrap(),
        e_d: tape.constant(vec![1, 3], rng.normals(3)).unwrap(),
        e_a: tape.constant(vec![1, 3], rng.normals(3)).unwrap(),
    }
}

/// Gradient check over an input and every parameter of `store`.
fn check_all<F>(store: &ParamStore, x: Tensor, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, Var<'t>, &Bound<'t>) -> founddiff::Result<Var<'t>>,
{
    let mut ins = vec![x];
    ins.extend(store.tensors().iter().cloned());
    grad_check(|t, v| f(t, v[0], &Bound(v[1..].to_vec())), &ins, DEFAULT_EPS).unwrap()
}

fn quadratic<'t>(tape: &'t Tape, y: Var<'t>) -> founddiff::Result<Var<'t>> {
    let w = Rng::new(99).normals(y.numel());
    let lin = y.mul(tape.constant(y.shape(), w)?)?;
    lin.add(y.mul(y)?)?.sum()
}

#[test]
fn modulation_zero_at_init() {
    let mut rng = Rng::new(1);
    let mut store = ParamStore::new();
    let m = ModulationMlp::new(&mut store, "m", 5, 4, 3, &mut rng);
    for seed in 0..3 {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let c = cond(&tape, seed);
        let out = m.forward(&p, c.t_emb, c.e_d).unwrap();
        for v in [out.gamma1, out.beta1, out.alpha1, out.gamma2, out.beta2, out.alpha2] {
            assert!(v.value().iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn modulation_bias_splits_in_order() {
    let mut rng = Rng::new(2);
    let mut store = ParamStore::new();
    let m = ModulationMlp::new(&mut store, "m", 3, 4, 3, &mut rng);
    let bias: Vec<f64> = (0..18).map(|v| v as f64).collect();
    store.get_mut(m.fin.bias.unwrap()).values_mut().copy_from_slice(&bias);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let c = cond(&tape, 7);
    let out = m.forward(&p, c.t_emb, c.e_d).unwrap();
    let parts = [out.gamma1, out.beta1, out.alpha1, out.gamma2, out.beta2, out.alpha2];
    for (k, v) in parts.iter().enumerate() {
        assert_eq!(v.value(), bias[3 * k..3 * k + 3].to_vec());
    }
}

#[test]
fn modulation_gradient() {
    let mut rng = Rng::new(3);
    let mut store = ParamStore::new();
    let m = ModulationMlp::new(&mut store, "m", 2, 4, 3, &mut rng);
    randomize(&mut store, 0.5, &mut rng);
    let e = Tensor::randn([1, 3], 1.0, &mut rng);
    let err = check_all(&store, e, |tape, e_d, p| {
        let t_emb = tape.constant(vec![1, 4], vec![0.3, -0.2, 0.9, 0.1])?;
        let o = m.forward(p, t_emb, e_d)?;
        let all = [o.gamma1, o.beta1, o.alpha1, o.gamma2, o.beta2, o.alpha2];
        let mut acc = quadratic(tape, all[0])?;
        for v in &all[1..] {
            acc = acc.add(quadratic(tape, *v)?)?;
        }
        Ok(acc)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn rleb_identity_shape_and_gradient() {
    let mut rng = Rng::new(4);
    for (c, hw) in [(16, 8), (32, 16)] {
        let mut store = ParamStore::new();
        let r = Rleb::new(&mut store, "r", c, InitMode::Zero, &mut rng);
        let x = Tensor::randn([c, hw, hw], 1.0, &mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let y = r.forward(&p, tape.leaf(&x)).unwrap();
        assert_eq!(y.shape(), vec![c, hw, hw]);
        assert_eq!(y.value(), x.values());
    }
    let mut store = ParamStore::new();
    let r = Rleb::new(&mut store, "r", 2, InitMode::Default, &mut rng);
    randomize(&mut store, 0.4, &mut rng);
    let err = check_all(&store, Tensor::randn([2, 4, 4], 1.0, &mut rng), |t, x, p| quadratic(t, r.forward(p, x)?));
    assert!(err < 1e-5, "{err}");
}

fn scan_vals(x: &[f64], dt: &[f64], a: &[f64], b: &[f64], c: &[f64], d: &[f64], l: usize, dd: usize, n: usize) -> Vec<f64> {
    let tape = Tape::new();
    let k = |shape: Vec<usize>, v: &[f64]| tape.constant(shape, v.to_vec()).unwrap();
    selective_scan(ScanInputs {
        x: k(vec![l, dd], x),
        dt: k(vec![l, dd], dt),
        a: k(vec![dd, n], a),
        b: k(vec![l, n], b),
        c: k(vec![l, n], c),
        d_skip: k(vec![dd], d),
    })
    .unwrap()
    .value()
}

#[test]
fn scan_hand_example_and_zero_input() {
    assert_eq!(scan_vals(&[5.0], &[1.0], &[-1.0], &[2.0], &[3.0], &[0.0], 1, 1, 1), vec![30.0]);
    let mut rng = Rng::new(5);
    let (l, d, n) = (6, 2, 3);
    let y = scan_vals(
        &vec![0.0; l * d],
        &vec![0.5; l * d],
        &vec![-1.0; d * n],
        &rng.normals(l * n),
        &rng.normals(l * n),
        &rng.normals(d),
        l,
        d,
        n,
    );
    assert!(y.iter().all(|&v| v == 0.0));
}

#[test]
fn scan_matches_stepwise_recurrence() {
    let mut rng = Rng::new(6);
    let (l, d, n) = (12, 3, 4);
    let x = rng.normals(l * d);
    let dt: Vec<f64> = (0..l * d).map(|_| rng.uniform_in(0.05, 1.0)).collect();
    let a: Vec<f64> = (0..d * n).map(|_| -rng.uniform_in(0.1, 2.0)).collect();
    let (b, c, dsk) = (rng.normals(l * n), rng.normals(l * n), rng.normals(d));
    // state as a D×N matrix advanced one position at a time
    let mut h = vec![vec![0.0; n]; d];
    let mut want = vec![0.0; l * d];
    for t in 0..l {
        for ch in 0..d {
            let mut y = dsk[ch] * x[t * d + ch];
            for s in 0..n {
                let delta = dt[t * d + ch];
                h[ch][s] = (delta * a[ch * n + s]).exp() * h[ch][s] + delta * b[t * n + s] * x[t * d + ch];
                y += c[t * n + s] * h[ch][s];
            }
            want[t * d + ch] = y;
        }
    }
    let got = scan_vals(&x, &dt, &a, &b, &c, &dsk, l, d, n);
    assert!(max_diff(&got, &want) < 1e-12);
}

fn cssm(seed: u64, c: usize, anatomy_std: f64) -> (ParamStore, Cssm) {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let m = Cssm::new(&mut store, "s", c, 3, 3, InitMode::Default, &mut rng);
    if anatomy_std > 0.0 {
        let w = m.anatomy.weight;
        let t = store.get_mut(w);
        for v in t.values_mut() {
            *v = anatomy_std * rng.normal();
        }
    }
    (store, m)
}

fn run_cssm(store: &ParamStore, m: &Cssm, x: &Tensor, e_a: &[f64], orders: Option<&[ScanOrder]>) -> Vec<f64> {
    let tape = Tape::new();
    let p = store.bind(&tape);
    let e = tape.constant(vec![1, e_a.len()], e_a.to_vec()).unwrap();
    let f = tape.leaf(x);
    match orders {
        Some(o) => m.forward_with(&p, f, e, o),
        None => m.forward(&p, f, e),
    }
    .unwrap()
    .value()
}

#[test]
fn anatomy_routes_only_through_projection() {
    let x = Tensor::randn([3, 4, 5], 1.0, &mut Rng::new(7));
    let (store, m) = cssm(8, 3, 0.0);
    let a = run_cssm(&store, &m, &x, &[1.0, 0.0, 0.0], None);
    let b = run_cssm(&store, &m, &x, &[0.0, 0.6, 0.8], None);
    assert_eq!(a, b);
    let (store, m) = cssm(8, 3, 0.5);
    let a = run_cssm(&store, &m, &x, &[1.0, 0.0, 0.0], None);
    let b = run_cssm(&store, &m, &x, &[0.0, 0.6, 0.8], None);
    assert!(max_diff(&a, &b) > 1e-6);
}

#[test]
fn cssm_zero_input_gives_zero() {
    let (store, m) = cssm(9, 3, 0.5);
    let y = run_cssm(&store, &m, &Tensor::zeros([3, 4, 4]), &[0.0, 1.0, 0.0], None);
    assert!(y.iter().all(|&v| v == 0.0));
}

#[test]
fn one_pixel_merge_is_four_single_scans() {
    let (store, m) = cssm(10, 3, 0.5);
    let x = Tensor::randn([3, 1, 1], 1.0, &mut Rng::new(11));
    let e = [0.6, 0.0, 0.8];
    let four = run_cssm(&store, &m, &x, &e, None);
    let single: ScanOrder = Rc::from(vec![0usize]);
    let one = run_cssm(&store, &m, &x, &e, Some(&[single]));
    for (f, o) in four.iter().zip(&one) {
        assert!((f - 4.0 * o).abs() < 1e-12, "{f} vs {o}");
    }
}

fn permute(x: &Tensor, h: usize, w: usize, map: impl Fn(usize, usize) -> (usize, usize)) -> Tensor {
    let c = x.shape()[0];
    let corners = [map(0, 0), map(h - 1, w - 1)];
    let oh = corners.iter().map(|c| c.0).max().unwrap() + 1;
    let ow = corners.iter().map(|c| c.1).max().unwrap() + 1;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let (a, b) = map(i, j);
                out[ch * oh * ow + a * ow + b] = x.values()[ch * h * w + i * w + j];
            }
        }
    }
    Tensor::new([c, oh, ow], out).unwrap()
}

#[test]
fn cssm_equivariant_under_direction_swapping_symmetries() {
    let (h, w) = (4, 5);
    let x = Tensor::randn([3, h, w], 1.0, &mut Rng::new(12));
    let (store, m) = cssm(13, 3, 0.5);
    let e = [0.0, 0.6, 0.8];
    let y = Tensor::new([3, h, w], run_cssm(&store, &m, &x, &e, None)).unwrap();
    // both map the four default orders onto themselves
    let rot = move |i: usize, j: usize| (h - 1 - i, w - 1 - j);
    let transpose = |i: usize, j: usize| (j, i);
    for (name, map) in [("rot180", &rot as &dyn Fn(usize, usize) -> (usize, usize)), ("transpose", &transpose)] {
        let got = run_cssm(&store, &m, &permute(&x, h, w, map), &e, None);
        let want = permute(&y, h, w, map);
        assert!(max_diff(&got, want.values()) < 1e-12, "{name}");
    }
}

#[test]
fn cssm_hflip_equivariant_with_mirrored_orders() {
    let (h, w) = (4, 5);
    let x = Tensor::randn([3, h, w], 1.0, &mut Rng::new(25));
    let (store, m) = cssm(26, 3, 0.5);
    let e = [0.8, 0.0, 0.6];
    let flip = move |i: usize, j: usize| (i, w - 1 - j);
    let orders = four_directions(h, w);
    let mirrored: Vec<ScanOrder> = orders
        .iter()
        .map(|o| {
            o.iter()
                .map(|&px| {
                    let (i, j) = flip(px / w, px % w);
                    i * w + j
                })
                .collect()
        })
        .collect();
    let y = Tensor::new([3, h, w], run_cssm(&store, &m, &x, &e, Some(&mirrored))).unwrap();
    let got = run_cssm(&store, &m, &permute(&x, h, w, flip), &e, Some(&orders));
    assert!(max_diff(&got, permute(&y, h, w, flip).values()) < 1e-12);
}

#[test]
fn cssm_gradient() {
    let (mut store, m) = cssm(14, 3, 0.5);
    randomize(&mut store, 0.4, &mut Rng::new(15));
    let x = Tensor::randn([3, 3, 3], 1.0, &mut Rng::new(16));
    let err = check_all(&store, x, |t, x, p| {
        let e = t.constant(vec![1, 3], vec![0.0, 0.6, 0.8])?;
        quadratic(t, m.forward(p, x, e)?)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn attention_single_channel_and_row_sums() {
    let mut rng = Rng::new(17);
    let mut store = ParamStore::new();
    let ta = TransposedAttention::new(&mut store, "a", 1, &mut rng);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let x = tape.leaf(&Tensor::randn([1, 3, 3], 1.0, &mut rng));
    assert_eq!(ta.attention(&p, x).unwrap().value(), vec![1.0]);

    let mut store = ParamStore::new();
    let ta = TransposedAttention::new(&mut store, "a", 5, &mut rng);
    randomize(&mut store, 1.0, &mut rng);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let attn = ta.attention(&p, tape.leaf(&Tensor::randn([5, 4, 4], 1.0, &mut rng))).unwrap().value();
    for row in attn.chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn attention_gradient() {
    let mut rng = Rng::new(18);
    let mut store = ParamStore::new();
    let ta = TransposedAttention::new(&mut store, "a", 4, &mut rng);
    randomize(&mut store, 0.5, &mut rng);
    let err = check_all(&store, Tensor::randn([4, 4, 4], 1.0, &mut rng), |t, x, p| quadratic(t, ta.forward(p, x)?));
    assert!(err < 1e-5, "{err}");
}

#[test]
fn zero_initialized_blocks_are_identity() {
    let mut rng = Rng::new(19);
    for variant in [DacbVariant::Full, DacbVariant::DoseOnly, DacbVariant::AnatomyOnly] {
        let mut store = ParamStore::new();
        let b = Dacb::new(&mut store, "b", dims(4), variant, InitMode::Zero, &mut rng);
        let x = Tensor::randn([4, 5, 5], 1.0, &mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let y = b.forward(&p, tape.leaf(&x), cond(&tape, 3)).unwrap();
        assert_eq!(max_diff(&y.value(), x.values()), 0.0, "{}", variant.name());
    }
}

#[test]
fn substitution_reduces_to_scan_plus_attention() {
    let mut rng = Rng::new(20);
    let mut store = ParamStore::new();
    let c = 3;
    let b = Dacb::new(&mut store, "b", dims(c), DacbVariant::Full, InitMode::Default, &mut rng);
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        if name.contains("attention") || name.contains("cssm") {
            for v in store.get_mut(id).values_mut() {
                *v = 0.3 * rng.normal();
            }
        }
    }
    // final modulation layer: weights 0, bias gives γ=0, β=1, α=0 on both halves
    let fin = b.modulation.as_ref().unwrap().fin.clone();
    let mut bias = vec![0.0; 6 * c];
    bias[c..2 * c].fill(1.0);
    bias[4 * c..5 * c].fill(1.0);
    store.get_mut(fin.bias.unwrap()).values_mut().copy_from_slice(&bias);
    let x = Tensor::randn([c, 4, 4], 1.0, &mut rng);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let k = cond(&tape, 5);
    let f = tape.leaf(&x);
    let got = b.forward(&p, f, k).unwrap().value();
    let fp = b.cssm.as_ref().unwrap().forward(&p, f, k.e_a).unwrap().add(f).unwrap();
    let want = b.attention.as_ref().unwrap().forward(&p, fp).unwrap().add(fp).unwrap().value();
    assert!(max_diff(&got, &want) < 1e-12);
}

#[test]
fn full_block_gradient() {
    let mut rng = Rng::new(21);
    let mut store = ParamStore::new();
    let b = Dacb::new(&mut store, "b", dims(4), DacbVariant::Full, InitMode::Default, &mut rng);
    randomize(&mut store, 0.3, &mut rng);
    let err = check_all(&store, Tensor::randn([4, 4, 4], 1.0, &mut rng), |t, x, p| {
        let k = cond(t, 6);
        quadratic(t, b.forward(p, x, k)?)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn denoiser_shape_and_zero_output() {
    let mut rng = Rng::new(22);
    let net = Denoiser::new(DenoiserConfig::default(), InitMode::Default, &mut rng).unwrap();
    let img = rng.normals(64 * 64);
    let out = net.predict(&img, &img, 64, 10, &rng.normals(32), &rng.normals(32)).unwrap();
    assert_eq!(out.len(), 64 * 64);
    assert!(out.iter().all(|&v| v == 0.0));
}

#[test]
fn denoiser_rejects_bad_config() {
    let mut rng = Rng::new(23);
    for cfg in [
        DenoiserConfig { widths: vec![], ..Default::default() },
        DenoiserConfig { widths: vec![3, 6], ..Default::default() },
        DenoiserConfig { scan_directions: 3, ..Default::default() },
    ] {
        assert!(Denoiser::new(cfg, InitMode::Default, &mut rng).is_err());
    }
}

#[test]
fn parameters_reload_by_name() {
    let mut rng = Rng::new(24);
    let cfg = DenoiserConfig { widths: vec![4, 8], n_state: 2, d_e: 3, ..Default::default() };
    let mut a = Denoiser::new(cfg.clone(), InitMode::Default, &mut rng).unwrap();
    randomize(&mut a.params, 0.1, &mut rng);
    let b = Denoiser::from_params(cfg, &a.params).unwrap();
    let img = rng.normals(16 * 16);
    let e = [0.1, 0.2, 0.3];
    assert_eq!(a.predict(&img, &img, 16, 3, &e, &e).unwrap(), b.predict(&img, &img, 16, 3, &e, &e).unwrap());
}
