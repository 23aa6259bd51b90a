use sghf_core::data::{Dataset, DatasetConfig, Subject};
use sghf_core::encoder::VolumePrep;
use sghf_core::nn::{Mode, Scope};
use sghf_core::pfsm::{Generator, PfsmModel};
use sghf_core::sghf::{
    build_model, hard_label, predict, predict_all, train_sghf, train_sghf_audited, Checkpoint, SghfConfig,
    SghfModel, Variant,
};
use sghf_core::{Error, RunConfig, Tape, Tensor};

const SHAPE: [usize; 4] = [1, 8, 16, 16];

fn config() -> SghfConfig {
    RunConfig::desk().sghf
}

fn generator(seed: u64) -> Generator {
    let desk = RunConfig::desk();
    PfsmModel::init(&desk.pfsm, &SHAPE, desk.pfsm.generator.feature_dim, seed)
        .unwrap()
        .generator
}

fn model(variant: Variant) -> SghfModel {
    let g = variant.needs_generator().then(|| generator(1));
    build_model(variant, &config(), &SHAPE, g, 2).unwrap()
}

fn subjects(n: usize, seed: u64) -> Vec<Subject> {
    Dataset::generate(
        &DatasetConfig {
            n_subjects: n,
            ..DatasetConfig::default()
        },
        seed,
    )
    .unwrap()
    .subjects
}

#[test]
fn variant_structure() {
    let f = config().encoder.feature_dim;
    let bench = model(Variant::BenchmarkRf);
    let sghf = model(Variant::Sghf);
    let spf = model(Variant::SpfOnly);
    let double = model(Variant::DoubleRf);
    assert!(bench.generator.is_none() && double.generator.is_none());
    assert!(sghf.generator.is_some() && spf.generator.is_some());
    assert_eq!(bench.num_encoder_params(), sghf.num_encoder_params());
    assert_eq!(spf.num_encoder_params(), 0);
    assert_eq!(spf.num_trainable(), f + 1);
    assert_eq!(sghf.fusion_width(), 2 * f);
    assert_eq!(double.fusion_width(), 2 * f);
    assert_eq!(bench.fusion_width(), f);
    assert_eq!(spf.fusion_width(), f);
    assert_eq!(double.num_encoder_params(), 2 * bench.num_encoder_params());
    assert!(matches!(
        build_model(Variant::Sghf, &config(), &SHAPE, None, 0),
        Err(Error::Config(_))
    ));
    assert!(build_model(Variant::Sghf, &config(), &[1, 8, 16, 8], Some(generator(1)), 0).is_err());
}

#[test]
fn double_encoder_has_twice_the_parameters() {
    let ratio = model(Variant::DoubleRf).num_trainable() as f64 / model(Variant::BenchmarkRf).num_trainable() as f64;
    assert!((1.9..=2.1).contains(&ratio), "ratio {ratio}");
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{v}\""));
    }
    assert!("resnet".parse::<Variant>().is_err());
}

#[test]
fn benchmark_is_sghf_without_the_synthesized_branch() {
    let sghf = model(Variant::Sghf);
    let mut bench = model(Variant::BenchmarkRf);
    for (name, p) in bench.params.clone().iter() {
        if name.starts_with("rfem") {
            *bench.params.get_mut(name).unwrap() = sghf.params.get(name).unwrap().clone();
        } else {
            assert!(!p.tensor.data().is_empty());
        }
    }
    let ss = subjects(6, 3);
    let prep = VolumePrep::default();
    let vols: Vec<Tensor> = ss.iter().map(|s| prep.apply(s).unwrap()).collect();
    let f = config().encoder.feature_dim;

    let mut tape = Tape::new();
    let mut scope = Scope::bind(&mut tape, &sghf.params, false, Mode::Eval);
    let g = sghf.generator.as_ref().unwrap();
    let mut gs = Scope::bind(&mut tape, &g.params, false, Mode::Eval);
    let fused = sghf.features(&mut tape, &mut scope, Some(&mut gs), &vols, &[0.5; 6]).unwrap();
    let fr = tape.slice(fused, 1, f, f).unwrap();
    let a = tape.value(fr).clone();

    let mut tape = Tape::new();
    let mut scope = Scope::bind(&mut tape, &bench.params, false, Mode::Eval);
    let b = bench.features(&mut tape, &mut scope, None, &vols, &[0.5; 6]).unwrap();
    assert_eq!(&a, tape.value(b));
}

#[test]
fn training_freezes_generator_and_partitions_gradients() {
    let ss = subjects(24, 4);
    let refs: Vec<&Subject> = ss.iter().collect();
    let mut m = model(Variant::Sghf);
    m.config.epochs = 2;
    let before = m.generator.as_ref().unwrap().params.to_bytes();
    let checksum = m.generator.as_ref().unwrap().params.checksum();
    let mut audits = Vec::new();
    let (trained, log) = train_sghf_audited(m, &refs, &VolumePrep::default(), 5, |a| audits.push(a.clone())).unwrap();
    assert_eq!(log.len(), 2);
    assert_eq!(audits.len(), 2 * 3);
    assert!(audits.iter().all(|a| a.frozen_with_grad == 0 && a.trainable_with_grad > 0));
    let g = trained.generator.as_ref().unwrap();
    assert_eq!(g.params.to_bytes(), before);
    assert_eq!(g.params.checksum(), checksum);
}

#[test]
fn training_is_deterministic_and_fits() {
    let ss = subjects(40, 6);
    let refs: Vec<&Subject> = ss.iter().collect();
    let prep = VolumePrep::default();
    let make = || {
        let mut m = model(Variant::BenchmarkRf);
        m.config.epochs = 30;
        m
    };
    let (a, la) = train_sghf(make(), &refs, &prep, 7).unwrap();
    let (b, lb) = train_sghf(make(), &refs, &prep, 7).unwrap();
    assert_eq!(a.params.to_bytes(), b.params.to_bytes());
    assert_eq!(la, lb);
    assert!(la.last().unwrap().loss < la[0].loss);
    assert!(la.last().unwrap().accuracy > 0.9, "{:?}", la.last());
}

#[test]
fn both_branches_are_live_after_training() {
    let ss = subjects(24, 8);
    let refs: Vec<&Subject> = ss.iter().collect();
    let prep = VolumePrep::default();
    let mut m = model(Variant::Sghf);
    m.config.epochs = 3;
    let (m, _) = train_sghf(m, &refs, &prep, 9).unwrap();
    let vols: Vec<Tensor> = ss.iter().map(|s| prep.apply(s).unwrap()).collect();
    let labels: Vec<u8> = ss.iter().map(|s| s.label).collect();
    let p = m.probabilities(&vols, &labels, false).unwrap();
    let z = m.probabilities(&vols, &labels, true).unwrap();
    assert!(p.iter().all(|&x| x > 0.0 && x < 1.0));
    assert!(p.iter().zip(&z).any(|(a, b)| a != b));
    assert_eq!(m.probabilities(&vols, &labels, false).unwrap(), p);
}

#[test]
fn prediction_rules() {
    assert_eq!(hard_label(0.5), 1);
    assert_eq!(hard_label(0.5 - 1e-12), 0);
    let ss = subjects(10, 10);
    let refs: Vec<&Subject> = ss.iter().collect();
    let prep = VolumePrep::default();
    let m = model(Variant::Sghf);
    let all = predict_all(&m, &refs, &prep).unwrap();
    let mut rev = refs.clone();
    rev.reverse();
    let back = predict_all(&m, &rev, &prep).unwrap();
    for (a, s) in all.iter().zip(&refs) {
        let (p, label) = predict(&m, s, &prep).unwrap();
        assert_eq!((a.id, a.p, a.label, a.truth), (s.id, p, label, s.label));
        assert_eq!(back.iter().find(|b| b.id == s.id).unwrap(), a);
    }
    // batched eval-mode forward agrees with single-subject forward
    let vols: Vec<Tensor> = refs.iter().map(|s| prep.apply(s).unwrap()).collect();
    let labels: Vec<u8> = refs.iter().map(|s| s.label).collect();
    let batch = m.probabilities(&vols, &labels, false).unwrap();
    for (b, a) in batch.iter().zip(&all) {
        assert!((b - a.p).abs() < 1e-12);
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let desk = RunConfig::desk();
    for v in Variant::ALL {
        let m = model(v);
        let path = dir.path().join(format!("{v}.json"));
        Checkpoint::of(&m, Some(&desk.pfsm.generator)).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().into_model().unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(back.generator.as_ref().map(|g| g.params.to_bytes()), m.generator.as_ref().map(|g| g.params.to_bytes()));
        let s = &subjects(2, 11)[0];
        assert_eq!(predict(&back, s, &desk.prep).unwrap(), predict(&m, s, &desk.prep).unwrap());
    }
}
