//! Finite-difference checks of the tape's backward pass.

use mixseg_nn::arch::{ClassifierSpec, IrnetSpec, SegmenterSpec};
use mixseg_nn::ops::ConvGeom;
use mixseg_nn::{NodeId, ParamStore, Tape};
use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random3(rng: &mut ChaCha8Rng, shape: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn randomd(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random_range(-0.5..0.5))
}

/// Compares analytic and central-difference gradients of `sum(r * f(x))`
/// for every parameter entry and every input entry.
fn check<F>(params: &ParamStore, x: &Array3<f64>, build: F)
where
    F: Fn(&mut Tape<'_>, NodeId) -> NodeId,
{
    let mut t = Tape::new(params);
    let xi = t.leaf(x.clone());
    let out = build(&mut t, xi);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let r = random3(&mut rng, t.value(out).dim());
    let grads = t.backward(&[(out, r.clone())]);

    let eval = |p: &ParamStore, x: &Array3<f64>| {
        let mut t = Tape::new(p);
        let xi = t.leaf(x.clone());
        let o = build(&mut t, xi);
        (t.value(o) * &r).sum()
    };
    let h = 1e-6;
    let tol = |a: f64, n: f64| (a - n).abs() <= 1e-5 * (1.0 + a.abs().max(n.abs()));

    for (pi, (name, value)) in params.iter().enumerate() {
        for k in 0..value.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.iter_mut().nth(pi).unwrap().1.as_slice_mut().unwrap()[k] += h;
            minus.iter_mut().nth(pi).unwrap().1.as_slice_mut().unwrap()[k] -= h;
            let num = (eval(&plus, x) - eval(&minus, x)) / (2.0 * h);
            let ana = grads.params.grads[pi].as_slice().unwrap()[k];
            assert!(tol(ana, num), "{name}[{k}]: analytic {ana} numeric {num}");
        }
    }
    let gx = grads.node(xi).expect("leaf gradient");
    for (k, _) in x.iter().enumerate() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus.as_slice_mut().unwrap()[k] += h;
        minus.as_slice_mut().unwrap()[k] -= h;
        let num = (eval(params, &plus) - eval(params, &minus)) / (2.0 * h);
        let ana = gx.as_slice().unwrap()[k];
        assert!(tol(ana, num), "input[{k}]: analytic {ana} numeric {num}");
    }
}

#[test]
fn conv_with_dilation_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = ParamStore::new();
    let w = p.insert("w", randomd(&mut rng, &[3, 2, 3, 3]));
    let b = p.insert("b", randomd(&mut rng, &[3]));
    let x = random3(&mut rng, (2, 7, 6));
    check(&p, &x, |t, x| t.conv2d(x, w, Some(b), ConvGeom::same(3, 2)));
    check(&p, &x, |t, x| t.conv2d(x, w, None, ConvGeom::same(3, 1)));
}

#[test]
fn group_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = ParamStore::new();
    let g = p.insert("g", randomd(&mut rng, &[4]));
    let b = p.insert("b", randomd(&mut rng, &[4]));
    let x = random3(&mut rng, (4, 3, 5));
    check(&p, &x, |t, x| t.group_norm(x, g, b, 2));
}

#[test]
fn pooling_upsampling_concat_relu() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = ParamStore::new();
    let x = random3(&mut rng, (2, 6, 8));
    check(&p, &x, |t, x| t.max_pool2(x));
    check(&p, &x, |t, x| t.global_avg_pool(x));
    check(&p, &x, |t, x| t.upsample(x, 11, 5));
    check(&p, &x, |t, x| t.relu(x));
    check(&p, &x, |t, x| {
        let a = t.relu(x);
        let b = t.upsample(x, 6, 8);
        t.concat(&[a, b, x])
    });
}

#[test]
fn classifier_network() {
    let spec = ClassifierSpec { cam_width: 8, ..ClassifierSpec::new(2) };
    let spec = ClassifierSpec { encoder: mixseg_nn::arch::EncoderSpec { widths: vec![4, 4, 4], groups: 2, ..Default::default() }, ..spec };
    let p = spec.init(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random3(&mut rng, (1, 16, 16));
    check(&p, &x, |t, x| spec.forward(t, x).unwrap().logits);
}

#[test]
fn segmenter_and_irnet_networks() {
    let enc = mixseg_nn::arch::EncoderSpec { widths: vec![4, 4, 4], groups: 2, ..Default::default() };
    let seg = SegmenterSpec {
        encoder: enc.clone(),
        context_branch_width: 2,
        context_width: 4,
        decoder_width: 4,
        ..SegmenterSpec::new(2)
    };
    let p = seg.init(5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random3(&mut rng, (1, 16, 16));
    check(&p, &x, |t, x| seg.forward(t, x).unwrap());

    let ir = IrnetSpec { encoder: enc, width: 4 };
    let p = ir.init(6);
    check(&p, &x, |t, x| {
        let f = ir.forward(t, x).unwrap();
        t.concat(&[f.displacement, f.boundary_logits])
    });
}
