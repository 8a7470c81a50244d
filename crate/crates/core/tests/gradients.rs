mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stainfuse_core::encoders::EncoderModel;
use stainfuse_core::generator::{Generator, GeneratorConfig};
use stainfuse_core::tensor::gradcheck::{numerical_grad, rel_err};
use stainfuse_core::tensor::{Ctx, Mode, ParamStore, Tape, Tensor};
use stainfuse_core::encoders::EncoderConfig;
use stainfuse_core::vmfe::{Vmfe, VmfeConfig};

fn tiny_generator(rng: &mut ChaCha8Rng) -> (Generator, ParamStore<f64>, EncoderModel<f64>) {
    let enc = EncoderModel::<f64>::new(
        "he",
        EncoderConfig {
            widths: [2, 2, 3, 3],
            proj_hidden: 4,
            embed_dim: 4,
            image_size: 16,
            ..Default::default()
        },
        rng,
    );
    let cfg = GeneratorConfig {
        base_width: 2,
        n_resblocks: 4,
        fusion_strength: 0.5,
        ..Default::default()
    };
    let mut store = ParamStore::new();
    let g = Generator::new(&mut store, cfg, 3, rng).unwrap();
    (g, store, enc)
}

#[test]
fn whole_generator_input_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (g, store, enc) = tiny_generator(&mut rng);
    let x = Tensor::<f64>::rand_uniform(&[2, 3, 16, 16], -1.0, 1.0, &mut rng);
    let r = Tensor::<f64>::randn(&[2, 3, 16, 16], 1.0, &mut rng);
    let feats = g.guide_features(&enc, &x).unwrap();
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store, Mode::Train);
    let xv = tape.leaf(x.clone());
    let y = g.forward(&cx, xv, Some(tape.constant(feats.clone()))).unwrap();
    let loss = y.mul(&tape.constant(r.clone())).unwrap().sum();
    let analytic = tape.backward(loss).unwrap().wrt(xv).unwrap().clone();
    let numeric = numerical_grad(&x, 1e-6, |p| {
        let t = Tape::no_grad();
        let cx = Ctx::new(&t, &store, Mode::Train);
        g.forward(&cx, t.constant(p.clone()), Some(t.constant(feats.clone())))
            .unwrap()
            .mul(&t.constant(r.clone()))
            .unwrap()
            .sum()
            .item()
    });
    let e = rel_err(&analytic, &numeric);
    assert!(e < 1e-4, "generator input gradient rel err {e}");
}

#[test]
fn generator_head_weight_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let (g, store, enc) = tiny_generator(&mut rng);
    let x = Tensor::<f64>::rand_uniform(&[2, 3, 16, 16], -1.0, 1.0, &mut rng);
    let r = Tensor::<f64>::randn(&[2, 3, 16, 16], 1.0, &mut rng);
    let feats = g.guide_features(&enc, &x).unwrap();
    let eval = |s: &ParamStore<f64>| {
        let t = Tape::no_grad();
        let cx = Ctx::new(&t, s, Mode::Train);
        g.forward(&cx, t.constant(x.clone()), Some(t.constant(feats.clone())))
            .unwrap()
            .mul(&t.constant(r.clone()))
            .unwrap()
            .sum()
            .item()
    };
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store, Mode::Train);
    let y = g.forward(&cx, tape.constant(x.clone()), Some(tape.constant(feats.clone()))).unwrap();
    let grads = tape.backward(y.mul(&tape.constant(r.clone())).unwrap().sum()).unwrap();
    let id = g.head.weight;
    let analytic = grads.param(store.key(id)).unwrap().clone();
    let e = common::param_grad_rel_err(&store, id, &analytic, eval);
    assert!(e < 1e-4, "head weight rel err {e}");
}

#[test]
fn vmfe_gru_weight_gradient_through_pyramid() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut store = ParamStore::<f64>::new();
    let vmfe = Vmfe::new(&mut store, "v", VmfeConfig::for_base_width(3, 2), &mut rng);
    let x = Tensor::<f64>::randn(&[1, 3, 16, 16], 1.0, &mut rng);
    let eval = |s: &ParamStore<f64>| {
        let t = Tape::no_grad();
        let cx = Ctx::new(&t, s, Mode::Train);
        let p = vmfe.build_pyramid(&cx, t.constant(x.clone())).unwrap();
        let hs = vmfe.run_msfpm(&cx, &p).unwrap();
        hs.h1.square().sum().item() + hs.h3.sum().item()
    };
    let tape = Tape::new();
    let cx = Ctx::new(&tape, &store, Mode::Train);
    let p = vmfe.build_pyramid(&cx, tape.constant(x.clone())).unwrap();
    let hs = vmfe.run_msfpm(&cx, &p).unwrap();
    let loss = hs.h1.square().sum().add(&hs.h3.sum()).unwrap();
    let grads = tape.backward(loss).unwrap();
    let id = vmfe.gru.candidate.weight;
    let analytic = grads.param(store.key(id)).unwrap().clone();
    let e = common::param_grad_rel_err(&store, id, &analytic, eval);
    assert!(e < 1e-4, "gru candidate rel err {e}");
}
