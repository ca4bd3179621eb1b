mod common;

use avic_core::attacks::{AttackMethod, AttackTarget, Targets};
use avic_core::data::{DatasetId, DatasetSplit};
use avic_core::eval::*;
use avic_core::nn::{load_into, save_weights, Arch, ClassifierNet, ParameterStore, VaeNet};
use avic_core::pipeline::{Epochs, RunConfig};
use avic_core::report::*;
use avic_core::run::run_avic;
use avic_core::train::StageResult;
use avic_core::Error;
use avic_tensor::Tensor;
use common::*;

fn one_hot_logits(labels: &[usize], k: usize) -> Tensor<f32> {
    let mut d = vec![0.0; labels.len() * k];
    for (i, &y) in labels.iter().enumerate() {
        d[i * k + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), k], d).unwrap()
}

#[test]
fn perfect_stub_scores_100() {
    let split = stripes(25, 0);
    let labels = split.labels.clone();
    let mut seen = 0;
    let acc = accuracy_with(&split.images, &labels, 7, |x| {
        let n = x.shape()[0];
        let l = one_hot_logits(&labels[seen..seen + n], 10);
        seen += n;
        Ok(l)
    })
    .unwrap();
    assert_eq!(acc, 100.0);
}

/// A classifier whose logits are its final bias, whatever the input.
fn constant_classifier(net: &ClassifierNet, bias: &[f32]) -> ParameterStore<f32> {
    let mut s = net.init::<f32>(0).unwrap();
    let names: Vec<String> = s.names().map(str::to_string).collect();
    for n in names {
        let shape = s.get(&n).unwrap().shape().to_vec();
        s.set(&n, Tensor::zeros(shape).unwrap()).unwrap();
    }
    s.set("cls.fc2.bias", Tensor::new(vec![bias.len()], bias.to_vec()).unwrap())
        .unwrap();
    s
}

#[test]
fn zero_logits_pick_class_zero() {
    let split = stripes(50, 1);
    let net = ClassifierNet::new(Arch::PlainCnn, DatasetId::Mnist);
    let store = constant_classifier(&net, &[0.0; 10]);
    let acc = evaluate_accuracy(&net, &store, &split.images, &split.labels, 16).unwrap();
    let zeros = split.labels.iter().filter(|&&l| l == 0).count();
    assert_eq!(acc, 100.0 * zeros as f64 / 50.0);
    assert_eq!(acc, 10.0);
}

#[test]
fn saved_stub_scores_six_of_eight() {
    let net = ClassifierNet::new(Arch::PlainCnn, DatasetId::Mnist);
    let mut bias = [0.0f32; 10];
    bias[4] = 1.0;
    let stub = constant_classifier(&net, &bias);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stub.bin");
    save_weights(&stub, &path).unwrap();
    let loaded = load_into(&net.init::<f32>(9).unwrap(), &path).unwrap();
    let images = Tensor::zeros(vec![8, 1, 28, 28]).unwrap();
    let labels = vec![4, 4, 1, 4, 4, 7, 4, 4];
    assert_eq!(evaluate_accuracy(&net, &loaded, &images, &labels, 3).unwrap(), 75.0);
}

#[test]
fn empty_or_mismatched_split_is_an_error() {
    let net = ClassifierNet::new(Arch::PlainCnn, DatasetId::Mnist);
    let store = net.init::<f32>(0).unwrap();
    assert!(Tensor::<f32>::zeros(vec![0, 1, 28, 28]).is_err());
    let images = Tensor::zeros(vec![2, 1, 28, 28]).unwrap();
    assert!(evaluate_accuracy(&net, &store, &images, &[], 4).is_err());
    assert!(evaluate_accuracy(&net, &store, &images, &[1, 2, 3], 4).is_err());
}

#[test]
fn increase_rate_examples() {
    assert_eq!(increase_rate(2.0, 3.0).unwrap(), 50.0);
    assert_eq!(increase_rate(1.5, 1.5).unwrap(), 0.0);
    assert!(matches!(increase_rate(0.0, 3.0), Err(Error::Degenerate { .. })));
}

fn models() -> (VaeNet, ParameterStore<f32>, ClassifierNet, ParameterStore<f32>) {
    let vnet = VaeNet::with_widths(DatasetId::Mnist, 4, [4, 8]).unwrap();
    let cnet = ClassifierNet::new(Arch::PlainCnn, DatasetId::Mnist);
    let (vs, cs) = (vnet.init(1).unwrap(), cnet.init(2).unwrap());
    (vnet, vs, cnet, cs)
}

#[test]
fn zero_budget_transfer_row_is_the_identity() {
    let split = stripes(20, 2);
    let (vnet, vs, cnet, cs) = models();
    let targets = Targets {
        vae: Some((&vnet, &vs)),
        classifier: Some((&cnet, &cs)),
        generator: None,
    };
    let cells = transfer_matrix(
        &targets,
        &split.images,
        &split.labels,
        &[0.0, 0.1],
        PgdSettings::default(),
        8,
        0,
    )
    .unwrap();
    assert_eq!(cells.len(), 4);
    let clean = evaluate_accuracy(&cnet, &cs, &split.images, &split.labels, 8).unwrap();
    for c in cells.iter().filter(|c| c.epsilon == 0.0) {
        assert_eq!(c.accuracy, clean);
        assert_eq!(c.increase_rate, 0.0);
        assert_eq!(c.vae_clean_loss, c.vae_adv_loss);
    }
    let vae_pgd = cells
        .iter()
        .find(|c| c.epsilon == 0.1 && c.target == AttackTarget::Vae && c.method == AttackMethod::Pgd)
        .unwrap();
    assert!(vae_pgd.increase_rate > 0.0);
    let csv = transfer_csv(&cells);
    assert_eq!(csv.lines().count(), cells.len() + 1);
    assert_eq!(csv.lines().next().unwrap(), TRANSFER_HEADER);
}

#[test]
fn canonical_json_is_stable() {
    let text = r#"{"b": [1.0, 2.5e-7, -0.0, 3], "a": {"z": 0.1234567891, "y": null, "x": 1e300}}"#;
    let once = recanonicalize(text).unwrap();
    assert_eq!(recanonicalize(&once).unwrap(), once);
    assert_eq!(
        once,
        "{\n  \"a\": {\n    \"x\": 1e300,\n    \"y\": null,\n    \"z\": 0.123457\n  },\n  \"b\": [\n    1,\n    0.00000025,\n    0,\n    3\n  ]\n}\n"
    );
}

#[test]
fn round6_keeps_six_significant_digits() {
    assert_eq!(round6(123.456789), 123.457);
    assert_eq!(round6(-0.000123456789), -0.000123457);
    assert_eq!(format_float(-0.0), "0");
    assert_eq!(format_float(2.0), "2");
}

#[test]
fn stages_csv_has_a_row_per_epoch() {
    let stages = vec![
        StageResult {
            stage: "vae".into(),
            curve: vec![3.0, 2.0],
            final_metric: None,
            metric: "loss".into(),
            wall_time_s: 0.0,
        },
        StageResult {
            stage: "clean".into(),
            curve: vec![1.0],
            final_metric: None,
            metric: "loss".into(),
            wall_time_s: 0.0,
        },
    ];
    assert_eq!(stages_csv(&stages), "stage,epoch,loss\nvae,1,3\nvae,2,2\nclean,1,1\n");
}

#[test]
fn ppm_grid_layout() {
    let split = stripes(4, 3);
    let cols: Vec<&Tensor<f32>> = vec![&split.images; 4];
    let grid = sample_grid(&cols, 4).unwrap();
    assert_eq!(
        (grid.width, grid.height),
        (4 * 28 + 3 * SEPARATOR, 4 * 28 + 3 * SEPARATOR)
    );
    let bytes = grid.to_bytes();
    let header = b"P6\n118 118\n255\n";
    assert!(bytes.starts_with(header));
    assert_eq!(bytes.len(), header.len() + 118 * 118 * 3);
    // Separator column between the first two tiles.
    let at = |x: usize, y: usize| grid.rgb[(y * grid.width + x) * 3];
    assert_eq!(at(28, 0), SEPARATOR_GRAY);
    assert_eq!(at(0, 28), SEPARATOR_GRAY);
    // The stripe row of image 0 (label 0) is bright.
    assert_eq!(at(3, 4), (0.9f32 * 255.0).round() as u8);
}

fn tiny_run() -> (RunConfig, DatasetSplit, DatasetSplit) {
    let cfg = RunConfig {
        epochs: Epochs {
            vae: 1,
            gen: 1,
            cls: 1,
            global: 1,
        },
        batch_size: 16,
        vae_lr: 0.002,
        latent_dim: Some(4),
        transfer_eps: vec![0.0, 0.1],
        samples: 4,
        ..RunConfig::default()
    };
    (cfg, stripes(32, 4), stripes(20, 5))
}

#[test]
fn reports_are_byte_identical_across_runs_and_round_trip() {
    let (cfg, train, test) = tiny_run();
    let a = run_avic::<f32>(&cfg, &train, &test).unwrap();
    let b = run_avic::<f32>(&cfg, &train, &test).unwrap();
    let (ja, jb) = (
        to_canonical_json(&a.report).unwrap(),
        to_canonical_json(&b.report).unwrap(),
    );
    assert_eq!(ja, jb);
    assert_eq!(recanonicalize(&ja).unwrap(), ja);
    assert_eq!(
        a.samples.as_ref().unwrap().to_bytes(),
        b.samples.as_ref().unwrap().to_bytes()
    );

    let dir = tempfile::tempdir().unwrap();
    emit_report(&a.report, &a.timing, dir.path()).unwrap();
    let first = std::fs::read(dir.path().join("report.json")).unwrap();
    emit_report(&a.report, &a.timing, dir.path()).unwrap();
    assert_eq!(std::fs::read(dir.path().join("report.json")).unwrap(), first);
    let back = read_report(&dir.path().join("report.json")).unwrap();
    assert_eq!(to_canonical_json(&back).unwrap(), ja);
    assert_eq!(back.config, cfg);
    let csv = std::fs::read_to_string(dir.path().join("transfer.csv")).unwrap();
    assert_eq!(csv.lines().count(), a.report.transfer.len() + 1);
    assert_eq!(a.report.transfer.len(), 2 * 3);
}
