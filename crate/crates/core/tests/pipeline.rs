mod common;

use avic_core::data::DatasetId;
use avic_core::nn::{Arch, Bound, ClassifierNet, GeneratorNet, VaeNet};
use avic_core::pipeline::*;
use avic_core::train::Schedule;
use avic_core::Error;
use avic_tensor::{finite_diff_check, CheckOptions, Tape, Tensor};
use common::*;

fn small_models(seed: u64) -> (Vae<f32>, Generator<f32>, Classifier<f32>) {
    let vnet = VaeNet::with_widths(DatasetId::Mnist, 4, [4, 8]).unwrap();
    let gnet = GeneratorNet {
        dataset: DatasetId::Mnist,
        widths: [4, 8],
    };
    let cnet = ClassifierNet::new(Arch::PlainCnn, DatasetId::Mnist);
    (
        Model::new(vnet.clone(), vnet.init(seed).unwrap(), 0.002),
        Model::new(gnet.clone(), gnet.init(seed).unwrap(), 0.001),
        Model::new(cnet.clone(), cnet.init(seed).unwrap(), 0.005),
    )
}

fn sched(epochs: usize) -> Schedule {
    Schedule::new(epochs, 16, 3)
}

#[test]
fn stages_respect_freeze_contracts() {
    let split = stripes(48, 0);
    let (mut vae, mut gen, mut cls) = small_models(1);
    train_vae_stage(&mut vae, &split, sched(1)).unwrap();

    let err = train_generator_separate(&mut gen, &vae, &split, 0.1, sched(1)).unwrap_err();
    assert!(matches!(err, Error::NotFrozen(_)), "{err}");
    vae.params.freeze();
    let vae_sum = vae.params.checksum();
    let gen_before = gen.params.checksum();
    train_generator_separate(&mut gen, &vae, &split, 0.1, sched(1)).unwrap();
    assert_eq!(vae.params.checksum(), vae_sum);
    assert_ne!(gen.params.checksum(), gen_before);

    assert!(matches!(
        train_classifier_adv(&mut cls, &gen, &split, 0.1, sched(1)),
        Err(Error::NotFrozen(_))
    ));
    gen.params.freeze();
    let gen_sum = gen.params.checksum();
    train_classifier_adv(&mut cls, &gen, &split, 0.1, sched(1)).unwrap();
    assert_eq!(gen.params.checksum(), gen_sum);
    gen.params.unfreeze();

    let cls_before = cls.params.checksum();
    global_finetune(&mut gen, &mut cls, &vae, &split, 0.1, 1.0, sched(1).continuing(1)).unwrap();
    assert_eq!(vae.params.checksum(), vae_sum);
    assert_ne!(gen.params.checksum(), gen_sum);
    assert_ne!(cls.params.checksum(), cls_before);
}

#[test]
fn zero_budget_classifier_matches_clean_training_bit_for_bit() {
    let split = stripes(40, 1);
    let (_, mut gen, cls) = small_models(2);
    // Make the generator nontrivial so only the zero budget keeps x_a = x.
    let shape = gen.params.get("gen.dec2.weight").unwrap().shape().to_vec();
    gen.params
        .set("gen.dec2.weight", uniform(&mut rng(3), &shape, -0.5, 0.5))
        .unwrap();
    gen.params.freeze();
    let (mut a, mut b) = (cls.clone(), cls);
    let ra = train_classifier_adv(&mut a, &gen, &split, 0.0, sched(2)).unwrap();
    let rb = train_classifier_clean(&mut b, &split, sched(2)).unwrap();
    assert_eq!(
        ra.curve.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        rb.curve.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(a.params.checksum(), b.params.checksum());
}

#[test]
fn zero_budget_leaves_generated_images_unchanged() {
    let split = stripes(32, 2);
    let (mut vae, mut gen, _) = small_models(4);
    vae.params.freeze();
    train_generator_separate(&mut gen, &vae, &split, 0.0, sched(1)).unwrap();
    let xa = avic_core::attacks::generate(&gen.net, &gen.params, &split.images, 0.0).unwrap();
    assert!(xa.bit_eq(&split.images));
}

#[test]
fn zero_alpha_generator_gradient_equals_separate_gradient() {
    let split = stripes(16, 3);
    let (mut vae, mut gen, cls) = small_models(5);
    let shape = gen.params.get("gen.dec2.weight").unwrap().shape().to_vec();
    gen.params
        .set("gen.dec2.weight", uniform(&mut rng(6), &shape, -0.3, 0.3))
        .unwrap();
    vae.params.freeze();
    let x = split.images.clone();
    let (l_sep, g_sep) = separate_generator_step(&gen, &vae, &x, 0.1, 77).unwrap();
    let step = global_step(&gen, &vae, &cls, &x, &split.labels, 0.1, 0.0, 77).unwrap();
    assert_eq!(l_sep.to_bits(), step.l_vae.to_bits());
    assert_eq!(g_sep.len(), step.gen_grads.len());
    for (name, g) in &g_sep {
        assert!(g.bit_eq(&step.gen_grads[name]), "{name}");
    }
}

#[test]
fn classifier_update_ignores_the_generator_path() {
    let split = stripes(8, 4);
    let (vae, gen, mut cls) = small_models(7);
    let shape = gen.params.get("gen.dec2.weight").unwrap().shape().to_vec();
    let mut gen = gen;
    gen.params
        .set("gen.dec2.weight", uniform(&mut rng(8), &shape, -0.3, 0.3))
        .unwrap();
    let step = global_step(&gen, &vae, &cls, &split.images, &split.labels, 0.1, 1.0, 1).unwrap();

    // Reference: plain cross-entropy gradient on the fixed generated batch.
    let xa = avic_core::attacks::generate(&gen.net, &gen.params, &split.images, 0.1).unwrap();
    let tape = Tape::new();
    let p = cls.params.bind(&tape, true);
    let loss =
        avic_tensor::softmax_cross_entropy(&cls.net.forward(&p, &tape.constant(xa)).unwrap(), &split.labels).unwrap();
    let reference = p.grads(&tape.backward(&loss).unwrap()).unwrap();
    for (name, g) in &reference {
        assert!(g.max_abs_diff(&step.cls_grads[name]).unwrap() <= 1e-6, "{name}");
    }
    cls.params.freeze();
}

#[test]
fn combined_generator_objective_matches_finite_differences() {
    let vnet = VaeNet::with_widths(DatasetId::Mnist, 4, [4, 8]).unwrap();
    let gnet = GeneratorNet {
        dataset: DatasetId::Mnist,
        widths: [4, 8],
    };
    let cnet = ClassifierNet::new(Arch::PlainCnn, DatasetId::Mnist);
    let vs = vnet.init::<f64>(1).unwrap();
    let cs = cnet.init::<f64>(2).unwrap();
    let mut gs = gnet.init::<f64>(3).unwrap();
    let shape = gs.get("gen.dec2.weight").unwrap().shape().to_vec();
    gs.set("gen.dec2.weight", uniform(&mut rng(9), &shape, -0.2, 0.2))
        .unwrap();
    // Interior pixels keep the range clamp inactive for ε = 0.3. A large
    // budget keeps every gradient well above the difference quotient's noise.
    let x: Tensor<f64> = uniform(&mut rng(10), &[2, 1, 28, 28], 0.35, 0.65);
    let inputs: Vec<Tensor<f64>> = gs.iter().map(|(_, t)| t.clone()).collect();
    let report = finite_diff_check(
        |tape, v| {
            let gp = Bound::from_vars(&gs, v).unwrap();
            let vp = vs.bind(tape, false);
            let cp = cs.bind(tape, false);
            let xv = tape.constant(x.clone());
            let obj = global_objective(&gnet, &gp, &vnet, &vp, &cnet, &cp, &xv, &[1, 6], 0.3, 1.0, 5).unwrap();
            Ok(obj.j)
        },
        &inputs,
        CheckOptions {
            max_coords: Some(8),
            ..CheckOptions::default()
        },
    )
    .unwrap();
    assert!(report.passed, "{:#?}", report.inputs);
}

fn tiny_config() -> RunConfig {
    RunConfig {
        epochs: Epochs {
            vae: 1,
            gen: 1,
            cls: 1,
            global: 1,
        },
        batch_size: 16,
        vae_lr: 0.002,
        ..RunConfig::default()
    }
}

#[test]
fn zero_budget_pipeline_matches_clean_baseline() {
    let split = stripes(32, 5);
    let cfg = RunConfig {
        epsilon: 0.0,
        ..tiny_config()
    };
    let t = train_all::<f32>(&cfg, &split).unwrap();
    assert_eq!(t.classifier.params.checksum(), t.clean_classifier.params.checksum());
    let cls_curve: Vec<f64> = t
        .stages
        .iter()
        .filter(|s| s.stage == "classifier" || s.stage == "global")
        .flat_map(|s| s.curve.clone())
        .collect();
    let clean = &t.stages.iter().find(|s| s.stage == "clean").unwrap().curve;
    assert_eq!(&cls_curve, clean);
}

#[test]
fn zero_epoch_pipeline_has_empty_curves() {
    let split = stripes(16, 6);
    let cfg = RunConfig {
        epochs: Epochs {
            vae: 0,
            gen: 0,
            cls: 0,
            global: 0,
        },
        ..tiny_config()
    };
    let t = train_all::<f32>(&cfg, &split).unwrap();
    assert_eq!(t.stages.len(), 5);
    assert!(t.stages.iter().all(|s| s.curve.is_empty()));
    assert_eq!(
        t.classifier.params.checksum(),
        build_classifier::<f32>(&cfg).unwrap().params.checksum()
    );
}

#[test]
fn every_curve_is_finite_and_sized_by_epochs() {
    let split = stripes(32, 7);
    let cfg = RunConfig {
        epochs: Epochs {
            vae: 2,
            gen: 1,
            cls: 2,
            global: 1,
        },
        ..tiny_config()
    };
    let t = train_all::<f32>(&cfg, &split).unwrap();
    let lens: Vec<(String, usize)> = t.stages.iter().map(|s| (s.stage.clone(), s.curve.len())).collect();
    let expect = [
        ("vae", 2),
        ("generator", 1),
        ("classifier", 2),
        ("global", 1),
        ("clean", 3),
    ];
    assert_eq!(lens, expect.map(|(s, n)| (s.to_string(), n)).to_vec());
    assert!(t.stages.iter().all(|s| s.curve.iter().all(|v| v.is_finite())));
}

#[test]
fn invalid_config_names_the_key() {
    let split = stripes(8, 8);
    for (cfg, key) in [
        (
            RunConfig {
                epsilon: 1.5,
                ..tiny_config()
            },
            "epsilon",
        ),
        (
            RunConfig {
                alpha: -1.0,
                ..tiny_config()
            },
            "alpha",
        ),
        (
            RunConfig {
                gen_lr: 0.0,
                ..tiny_config()
            },
            "gen_lr",
        ),
    ] {
        let err = train_all::<f32>(&cfg, &split).err().unwrap();
        assert!(err.to_string().starts_with(key), "{err}");
    }
}

#[test]
fn divergence_is_attributed_to_its_stage() {
    let split = stripes(16, 9);
    let cfg = RunConfig {
        cls_lr: 1e30,
        ..tiny_config()
    };
    let cfg = RunConfig {
        epochs: Epochs { cls: 3, ..cfg.epochs },
        ..cfg
    };
    match train_all::<f32>(&cfg, &split) {
        Err(Error::Stage { stage, source }) => {
            assert_eq!(stage, "classifier");
            assert!(matches!(*source, Error::Diverged { .. }), "{source}");
        }
        other => panic!("expected a stage error, got {:?}", other.err()),
    }
}
